#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mulferl {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

namespace symbols {
inline constexpr std::string_view kThinkingOpen = "<thinking>";
inline constexpr std::string_view kThinkingClose = "</thinking>";
inline constexpr std::string_view kFeedbackOpen = "<feedback>";
inline constexpr std::string_view kFeedbackClose = "</feedback>";
inline constexpr std::string_view kBox = "<box>";
inline constexpr std::string_view kEos = "<eos>";
inline constexpr std::string_view kUnk = "<unk>";
}  // namespace symbols

/// Ordered token alphabet. Every symbol is distinct, and the schema markers
/// (`<thinking>`, `</thinking>`, `<feedback>`, `</feedback>`, `<box>`,
/// `<eos>`) plus `<unk>` appear exactly once.
class Vocab {
 public:
  explicit Vocab(std::vector<std::string> symbols);

  /// The alphabet of the synthetic arithmetic task: markers, digits, one
  /// token per problem ("3+4", "7*2"), class hints H0..H2, and the words the
  /// scripted feedback and the base policy use.
  static Vocab task_vocab();

  std::size_t size() const noexcept { return symbols_.size(); }
  const std::vector<std::string>& symbols() const noexcept { return symbols_; }

  std::optional<TokenId> find(std::string_view symbol) const;
  /// Throws std::out_of_range for unknown symbols.
  TokenId id(std::string_view symbol) const;
  const std::string& symbol(TokenId token) const;
  bool contains(TokenId token) const noexcept {
    return token >= 0 && static_cast<std::size_t>(token) < symbols_.size();
  }

  TokenId thinking_open() const noexcept { return thinking_open_; }
  TokenId thinking_close() const noexcept { return thinking_close_; }
  TokenId feedback_open() const noexcept { return feedback_open_; }
  TokenId feedback_close() const noexcept { return feedback_close_; }
  TokenId box() const noexcept { return box_; }
  TokenId eos() const noexcept { return eos_; }
  TokenId unk() const noexcept { return unk_; }

  /// True for the six schema markers (not `<unk>`).
  bool is_marker(TokenId token) const noexcept;

  /// Space-joined spelling.
  std::string render(std::span<const TokenId> tokens) const;

  /// Whitespace tokenization; anything outside the alphabet maps to `<unk>`.
  TokenSeq tokenize(std::string_view text) const;

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.symbols_ == b.symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId thinking_open_, thinking_close_, feedback_open_, feedback_close_, box_, eos_, unk_;
};

}  // namespace mulferl
