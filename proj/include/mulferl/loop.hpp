#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mulferl/env.hpp"
#include "mulferl/feedback.hpp"
#include "mulferl/objectives.hpp"
#include "mulferl/policy.hpp"
#include "mulferl/schema.hpp"

namespace mulferl {

enum class TrainMode {
  kMulFeRL,       // full method
  kGrpoBaseline,  // no regeneration: all-failed groups are skipped
  kNoDpo,         // regeneration kept, all-positive regenerations skipped
  kNoInjection,   // feedback appended to the context, no forced prefix / mask
};

const char* to_string(TrainMode m);
/// Accepts "mulferl", "grpo-baseline", "no-dpo", "no-injection".
std::optional<TrainMode> parse_train_mode(std::string_view s);

enum class OptimizerKind { kAdam, kSgd };

struct TrainConfig {
  std::size_t group_size = 8;    // K
  std::size_t max_turns = 2;     // T, the initial turn included
  std::size_t batch_size = 16;
  std::size_t micro_batch = 2;
  double learning_rate = 1e-6;
  std::size_t total_steps = 300;
  double temperature = 1.0;
  std::size_t prompt_cap = 8;
  std::size_t response_cap = 64;
  GrpoConfig grpo;
  DpoConfig dpo;
  SimulatorConfig feedback;      // feedback.feedback_cap is the feedback length cap
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::kMulFeRL;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t ref_refresh_interval = 0;  // 0 keeps the reference frozen
  std::size_t workers = 1;               // prompts processed concurrently

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Reward hook; the default parses and verifies. Tests substitute a mock.
/// Arguments: problem, rollout, turn index, index within the group.
using RewardFn = std::function<int(const ProblemInstance&, const Rollout&, std::size_t, std::size_t)>;

struct TurnState {
  std::size_t t = 0;
  Context ctx;
  TokenSeq forced_prefix;
  std::vector<Rollout> group;
  GroupPattern pattern = GroupPattern::kAllFail;
  std::optional<std::vector<Rollout>> prev_group;
  std::vector<FeedbackText> feedback_history;
};

struct PromptOutcome {
  LossReport loss_report;
  std::size_t turns_used = 0;
  std::vector<GroupPattern> pattern_trace;
  std::size_t simulator_calls = 0;  // subgroup queries
  std::size_t merge_calls = 0;
  std::size_t feedback_truncations = 0;
  double turn0_reward_mean = 0.0;
  bool simulator_failed = false;
  std::string diagnostic;
  TurnState final_state;
};

struct PromptDeps {
  const Vocab& vocab;
  FeedbackSimulator& sim;
  RewardFn reward;  // empty -> verifier
};

/// The per-prompt state machine. Rollouts are sampled from `old`; the loss
/// is taken with respect to `params`; `ref` anchors KL and DPO.
PromptOutcome run_prompt(const ProblemInstance& problem, const PolicyParams& params, const PolicyParams& old,
                         const PolicyParams& ref, const TrainConfig& cfg, const PromptDeps& deps, Rng& rng);

struct OptimizerState {
  Gradient m;
  Gradient v;
  std::uint64_t t = 0;

  static OptimizerState zeros(Eigen::Index vocab_size) {
    return {Gradient::zeros(vocab_size), Gradient::zeros(vocab_size), 0};
  }
};

/// One descent step on `grad` (a loss gradient).
void apply_update(PolicyParams& params, const Gradient& grad, const TrainConfig& cfg, OptimizerState& state);

struct StepMetrics {
  std::uint64_t step = 0;
  std::size_t grpo = 0, dpo = 0, skip_allpos = 0, skip_allfail = 0;
  double grpo_loss_mean = 0.0, dpo_loss_mean = 0.0;
  std::vector<std::size_t> regenerations;  // [i] = prompts that reached turn i + 1
  std::size_t simulator_calls = 0;
  std::size_t merge_calls = 0;
  std::size_t simulator_failures = 0;
  std::size_t feedback_truncations = 0;
  double reward_mean_turn0 = 0.0;
  bool updated = false;
  std::optional<double> val_solve_rate;
  double wall_seconds = 0.0;  // kept out of the deterministic stream

  /// Deterministic JSON line (no wall clock).
  std::string to_json() const;
};

/// One optimizer step over `batch`. Per-prompt seeds derive from
/// (cfg.seed, step, slot) so results do not depend on scheduling.
StepMetrics run_step(std::span<const ProblemInstance> batch, PolicyParams& params, const PolicyParams& ref,
                     OptimizerState& opt, const TrainConfig& cfg, const PromptDeps& deps, std::uint64_t step);

struct EvalReport {
  std::size_t n = 0;
  std::size_t solved = 0;
  std::size_t format_failures = 0;
  std::size_t class_total[3] = {0, 0, 0};
  std::size_t class_solved[3] = {0, 0, 0};
  double solve_rate() const { return n ? static_cast<double>(solved) / static_cast<double>(n) : 0.0; }
};

/// Greedy single-attempt decoding at turn 0. Ties break with a seeded RNG
/// per problem. Throws std::invalid_argument on an empty split.
EvalReport evaluate(const Vocab& vocab, const PolicyParams& params, std::span<const ProblemInstance> problems,
                    std::size_t response_cap, std::uint64_t seed);

struct InferTurn {
  Rollout rollout;
  VerifierOutcome outcome;
  std::optional<FeedbackText> feedback;  // requested after this attempt
};

struct InferResult {
  std::optional<TokenSeq> answer;  // parsed answer of the last attempt
  bool verified = false;
  std::size_t turns_used = 0;
  std::size_t simulator_calls = 0;
  std::vector<InferTurn> trace;
};

struct InferOptions {
  std::size_t max_turns = 2;
  std::size_t response_cap = 64;
  std::size_t feedback_cap = 16;
  bool inject = true;  // false: plain context append
  std::uint64_t seed = 0;
};

/// Test-time loop: greedy attempt, then single-rollout feedback (no merge),
/// injection and a fresh attempt until accepted or out of turns.
InferResult infer_multiturn(const Vocab& vocab, const ProblemInstance& problem, const PolicyParams& params,
                            FeedbackSimulator& sim, const InferOptions& opts);

struct TrainIo {
  std::filesystem::path out_dir;
  std::size_t checkpoint_interval = 50;
  std::size_t metrics_flush_interval = 1;
  std::size_t eval_interval = 50;  // 0: evaluate only after the last step
  bool resume = false;
};

struct TrainResult {
  PolicyParams params;
  std::uint64_t steps_completed = 0;
  std::optional<double> final_val_solve_rate;
  std::vector<StepMetrics> metrics;  // records emitted by this invocation
};

/// Runs `cfg.total_steps` steps starting from `init` (or from the trainer
/// state in `io.out_dir` when resuming). Writes metrics.jsonl, timing.jsonl,
/// checkpoints/ and summary.json; with an empty out_dir nothing is written.
TrainResult train(const TrainConfig& cfg, const Vocab& vocab, const DatasetSplit& data, const PolicyParams& init,
                  FeedbackSimulator& sim, const TrainIo& io);

}  // namespace mulferl
