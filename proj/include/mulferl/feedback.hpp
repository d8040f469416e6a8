#pragma once

// Group-level verbal feedback for all-failed groups: random partition into
// subgroups, one simulator query per subgroup, then one merge.

#include <chrono>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mulferl/env.hpp"
#include "mulferl/feedback_text.hpp"
#include "mulferl/policy.hpp"
#include "mulferl/rng.hpp"
#include "mulferl/vocab.hpp"

namespace mulferl {

enum class SimulatorBackend { kScripted, kRemote };

struct SimulatorConfig {
  SimulatorBackend backend = SimulatorBackend::kScripted;
  std::size_t subgroup_size = 2;
  std::size_t feedback_cap = 16;
  // Remote backend only.
  std::string endpoint;             // http://host:port/path
  std::string model = "gpt-4o-mini";
  std::string auth_env;             // name of the variable holding the bearer token
  double timeout_seconds = 60.0;
  std::size_t max_in_flight = 4;
  int max_attempts = 3;
  double backoff_seconds = 1.0;     // doubled after every failed attempt
  int max_tokens = 1024;
  double temperature = 0.0;

  /// Throws ConfigError naming the field. `group_size` is K.
  void validate(std::size_t group_size) const;
};

/// Randomly partitions indices 0..k-1 into ceil(k / subgroup_size) disjoint
/// subgroups; only the last one may be smaller.
std::vector<std::vector<std::size_t>> partition_group(std::size_t k, std::size_t subgroup_size, Rng& rng);

class FeedbackSimulator {
 public:
  virtual ~FeedbackSimulator() = default;

  /// Every rollout in `subgroup` must have reward 0.
  virtual FeedbackText subgroup_feedback(const ProblemInstance& problem, std::span<const Rollout> subgroup) = 0;
  /// Requires at least one input.
  virtual FeedbackText merge_feedback(const ProblemInstance& problem, std::span<const FeedbackText> feedbacks) = 0;
  /// How many subgroup queries may run at once.
  virtual std::size_t max_in_flight() const { return 1; }
};

/// Deterministic oracle for the arithmetic task. Feedback reads
///   issue wrong:d... [format] fix H_k
/// listing the distinct wrong answers seen, a format marker when some
/// response broke the schema, and the class hint. The true answer token is
/// never emitted.
class ScriptedSimulator final : public FeedbackSimulator {
 public:
  ScriptedSimulator(const Vocab& vocab, std::size_t feedback_cap);

  FeedbackText subgroup_feedback(const ProblemInstance& problem, std::span<const Rollout> subgroup) override;
  /// g = 1 returns the input unchanged; otherwise the deduplicated union.
  FeedbackText merge_feedback(const ProblemInstance& problem, std::span<const FeedbackText> feedbacks) override;

 private:
  FeedbackText build(const ProblemInstance& problem, std::vector<int> wrong, bool format_issue) const;

  const Vocab& vocab_;
  std::size_t cap_;
};

/// Client for a chat-completions style endpoint. Requests carry the bundled
/// reviewer / merge templates as the system message. Replies must wrap their
/// text in <feedback> ... </feedback>; the text is split at "Issue:" and
/// "Fix steps:" and re-tokenized word by word into the vocabulary.
class RemoteSimulator final : public FeedbackSimulator {
 public:
  RemoteSimulator(const Vocab& vocab, SimulatorConfig cfg);

  FeedbackText subgroup_feedback(const ProblemInstance& problem, std::span<const Rollout> subgroup) override;
  FeedbackText merge_feedback(const ProblemInstance& problem, std::span<const FeedbackText> feedbacks) override;
  std::size_t max_in_flight() const override { return cfg_.max_in_flight; }

  /// Sends one chat request with retries; returns the assistant content.
  std::string complete(const std::string& system, const std::string& user) const;

 private:
  const Vocab& vocab_;
  SimulatorConfig cfg_;
  std::string bearer_;
};

/// Extracts the text inside the <feedback> wrapper and maps it into the
/// vocabulary. Throws a non-retriable SimulatorError carrying `content` when
/// the wrapper is missing.
FeedbackText parse_remote_feedback(const Vocab& vocab, const std::string& content, std::size_t feedback_cap);

/// Word-level whitelist mapping: a word (lower-cased, surrounding
/// punctuation stripped) that spells a non-tag vocabulary symbol maps to it,
/// everything else to <unk>.
TokenSeq retokenize(const Vocab& vocab, const std::string& text);

std::unique_ptr<FeedbackSimulator> make_simulator(const Vocab& vocab, const SimulatorConfig& cfg);

struct AggregatedFeedback {
  FeedbackText feedback;
  std::vector<std::vector<std::size_t>> partition;
  std::size_t subgroup_calls = 0;
  std::size_t merge_calls = 0;
};

/// Partition, query every subgroup (concurrently up to the simulator's
/// in-flight bound), merge. Results do not depend on completion order.
AggregatedFeedback aggregate_feedback(FeedbackSimulator& sim, const ProblemInstance& problem,
                                      std::span<const Rollout> group, std::size_t subgroup_size, Rng& rng);

}  // namespace mulferl
