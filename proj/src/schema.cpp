#include "mulferl/schema.hpp"

#include "mulferl/errors.hpp"

namespace mulferl {

const char* to_string(FeedbackSource s) {
  switch (s) {
    case FeedbackSource::kScripted: return "scripted";
    case FeedbackSource::kRemote: return "remote";
    case FeedbackSource::kSelf: return "self";
  }
  return "unknown";
}

StructuredResponse parse_response(const Vocab& vocab, std::span<const TokenId> tokens) {
  enum class State { kStart, kAfterThinking, kFeedback, kReasoning, kAfterThinkingClose, kAnswer, kDone };
  StructuredResponse out;
  State state = State::kStart;
  std::size_t fb_start = 0, fb_end = 0, rs_start = 0, rs_end = 0, ans_start = 0, ans_end = 0;

  for (std::size_t j = 0; j < tokens.size(); ++j) {
    const TokenId t = tokens[j];
    const bool tag = vocab.is_marker(t);
    switch (state) {
      case State::kStart:
        if (t != vocab.thinking_open()) return out;
        state = State::kAfterThinking;
        break;
      case State::kAfterThinking:
        if (t != vocab.feedback_open()) return out;  // feedback block must open the reasoning
        fb_start = j + 1;
        state = State::kFeedback;
        break;
      case State::kFeedback:
        if (t == vocab.feedback_close()) {
          fb_end = j;
          rs_start = j + 1;
          state = State::kReasoning;
        } else if (tag) {
          return out;
        }
        break;
      case State::kReasoning:
        if (t == vocab.thinking_close()) {
          rs_end = j;
          state = State::kAfterThinkingClose;
        } else if (tag) {
          return out;
        }
        break;
      case State::kAfterThinkingClose:
        if (t != vocab.box()) return out;
        ans_start = j + 1;
        state = State::kAnswer;
        break;
      case State::kAnswer:
        if (t == vocab.eos()) {
          ans_end = j;
          if (ans_end == ans_start) return out;  // empty answer
          state = State::kDone;
        } else if (tag) {
          return out;
        }
        break;
      case State::kDone:
        return out;  // anything after <eos>
    }
  }
  if (state != State::kDone) return out;

  out.format_ok = true;
  out.feedback_span = Span{fb_start, fb_end};
  out.reasoning_span = Span{rs_start, rs_end};
  out.answer_span = Span{ans_start, ans_end};
  out.answer = TokenSeq(tokens.begin() + static_cast<std::ptrdiff_t>(ans_start),
                        tokens.begin() + static_cast<std::ptrdiff_t>(ans_end));
  return out;
}

TokenSeq render_response(const Vocab& vocab, std::span<const TokenId> feedback, std::span<const TokenId> reasoning,
                         std::span<const TokenId> answer) {
  TokenSeq out;
  out.reserve(feedback.size() + reasoning.size() + answer.size() + 6);
  out.push_back(vocab.thinking_open());
  out.push_back(vocab.feedback_open());
  out.insert(out.end(), feedback.begin(), feedback.end());
  out.push_back(vocab.feedback_close());
  out.insert(out.end(), reasoning.begin(), reasoning.end());
  out.push_back(vocab.thinking_close());
  out.push_back(vocab.box());
  out.insert(out.end(), answer.begin(), answer.end());
  out.push_back(vocab.eos());
  return out;
}

VerifierOutcome verify(const ProblemInstance& problem, const StructuredResponse& response) {
  VerifierOutcome v;
  v.format_ok = response.format_ok;
  v.answer_ok = response.answer.has_value() && check_answer(problem, *response.answer);
  v.reward = (v.format_ok && v.answer_ok) ? 1 : 0;
  return v;
}

VerifierOutcome score(const Vocab& vocab, const ProblemInstance& problem, std::span<const TokenId> tokens) {
  return verify(problem, parse_response(vocab, tokens));
}

Context initial_context(const ProblemInstance& problem) { return Context{problem.prompt_tokens, std::nullopt}; }

namespace {

TokenSeq capped(const FeedbackText& feedback, std::size_t cap, bool& truncated) {
  if (feedback.tokens.empty()) throw ContractViolation("regeneration context needs non-empty feedback");
  if (cap == 0) throw ContractViolation("feedback cap must be >= 1");
  truncated = feedback.truncated || feedback.tokens.size() > cap;
  if (feedback.tokens.size() <= cap) return feedback.tokens;
  return TokenSeq(feedback.tokens.begin(), feedback.tokens.begin() + static_cast<std::ptrdiff_t>(cap));
}

}  // namespace

RegenerationContext build_regeneration_context(const Vocab& vocab, const ProblemInstance& problem,
                                               const FeedbackText& feedback, std::size_t feedback_cap) {
  RegenerationContext r;
  TokenSeq f = capped(feedback, feedback_cap, r.truncated);
  r.forced_prefix.reserve(f.size() + 3);
  r.forced_prefix.push_back(vocab.thinking_open());
  r.forced_prefix.push_back(vocab.feedback_open());
  r.forced_prefix.insert(r.forced_prefix.end(), f.begin(), f.end());
  r.forced_prefix.push_back(vocab.feedback_close());
  r.masked_span = Span{0, r.forced_prefix.size()};
  r.ctx = Context{problem.prompt_tokens, std::move(f)};
  return r;
}

RegenerationContext build_appended_context(const ProblemInstance& problem, const FeedbackText& feedback,
                                           std::size_t feedback_cap) {
  RegenerationContext r;
  TokenSeq f = capped(feedback, feedback_cap, r.truncated);
  r.ctx = Context{problem.prompt_tokens, std::move(f)};
  return r;
}

}  // namespace mulferl
