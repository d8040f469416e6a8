#pragma once

// Response schema, one token per tag:
//
//   <thinking> <feedback> F* </feedback> R* </thinking> <box> A+ <eos>
//
// F, R and A are any non-tag tokens. Anything else is a format failure.

#include <cstddef>
#include <optional>
#include <span>

#include "mulferl/env.hpp"
#include "mulferl/feedback_text.hpp"
#include "mulferl/policy.hpp"
#include "mulferl/vocab.hpp"

namespace mulferl {

/// Half-open token index range [start, end).
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - start; }
  friend bool operator==(const Span&, const Span&) = default;
};

struct StructuredResponse {
  std::optional<Span> feedback_span;   // content strictly inside <feedback> ... </feedback>
  std::optional<Span> reasoning_span;  // between </feedback> and </thinking>
  std::optional<Span> answer_span;     // between <box> and <eos>
  std::optional<TokenSeq> answer;
  bool format_ok = false;
};

struct VerifierOutcome {
  int reward = 0;
  bool format_ok = false;
  bool answer_ok = false;
};

/// Total: never throws, malformed input yields format_ok = false. Spans are
/// filled only for a well-formed response.
StructuredResponse parse_response(const Vocab& vocab, std::span<const TokenId> tokens);

/// Builds the token sequence of a well-formed response.
TokenSeq render_response(const Vocab& vocab, std::span<const TokenId> feedback, std::span<const TokenId> reasoning,
                         std::span<const TokenId> answer);

VerifierOutcome verify(const ProblemInstance& problem, const StructuredResponse& response);

/// parse + verify.
VerifierOutcome score(const Vocab& vocab, const ProblemInstance& problem, std::span<const TokenId> tokens);

/// The turn-0 context: just the prompt.
Context initial_context(const ProblemInstance& problem);

struct RegenerationContext {
  Context ctx;
  TokenSeq forced_prefix;          // <thinking> <feedback> f </feedback>
  std::optional<Span> masked_span; // covers the whole forced prefix
  bool truncated = false;          // feedback was cut at the cap
};

/// Structured injection: the feedback joins the context bag and is
/// teacher-forced into the feedback slot, where it is masked from every loss.
/// Feedback longer than `feedback_cap` is truncated and flagged.
RegenerationContext build_regeneration_context(const Vocab& vocab, const ProblemInstance& problem,
                                               const FeedbackText& feedback, std::size_t feedback_cap);

/// Plain-append variant used by the no-injection ablation: same feedback
/// content in the context, no forced prefix, no masked span.
RegenerationContext build_appended_context(const ProblemInstance& problem, const FeedbackText& feedback,
                                           std::size_t feedback_cap);

}  // namespace mulferl
