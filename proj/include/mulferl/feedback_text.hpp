#pragma once

#include <string>

#include "mulferl/vocab.hpp"

namespace mulferl {

enum class FeedbackSource { kScripted, kRemote, kSelf };

const char* to_string(FeedbackSource s);

/// Verbal feedback already mapped into the vocabulary. `issue` and
/// `fix_steps` keep the human-readable segments for transcripts.
struct FeedbackText {
  TokenSeq tokens;
  std::string issue;
  std::string fix_steps;
  FeedbackSource source = FeedbackSource::kScripted;
  bool truncated = false;  // cut at the feedback cap

  friend bool operator==(const FeedbackText&, const FeedbackText&) = default;
};

}  // namespace mulferl
