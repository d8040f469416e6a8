#pragma once

#include <string>
#include <string_view>

namespace mulferl::prompts {

// Bundled templates, embedded at build time from assets/prompts/.
extern const std::string_view kTrainingSystem;
extern const std::string_view kFeedbackSystem;
extern const std::string_view kMergeFeedbackSystem;
extern const std::string_view kFeedbackInjectionRegen;

/// Fills {question} and {feedback}; "{{" and "}}" collapse to single braces.
std::string fill(std::string_view tmpl, std::string_view question, std::string_view feedback);

}  // namespace mulferl::prompts
