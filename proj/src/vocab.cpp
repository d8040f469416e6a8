#include "mulferl/vocab.hpp"

#include <sstream>
#include <stdexcept>

namespace mulferl {

namespace {

TokenId require_once(const std::unordered_map<std::string, TokenId>& index, std::string_view symbol) {
  auto it = index.find(std::string(symbol));
  if (it == index.end())
    throw std::invalid_argument("vocab is missing reserved symbol " + std::string(symbol));
  return it->second;
}

}  // namespace

Vocab::Vocab(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    const std::string& s = symbols_[i];
    if (s.empty() || s.find_first_of(" \t\r\n") != std::string::npos)
      throw std::invalid_argument("vocab symbol must be non-empty without whitespace: '" + s + "'");
    if (!index_.emplace(s, static_cast<TokenId>(i)).second)
      throw std::invalid_argument("duplicate vocab symbol " + s);
  }
  thinking_open_ = require_once(index_, symbols::kThinkingOpen);
  thinking_close_ = require_once(index_, symbols::kThinkingClose);
  feedback_open_ = require_once(index_, symbols::kFeedbackOpen);
  feedback_close_ = require_once(index_, symbols::kFeedbackClose);
  box_ = require_once(index_, symbols::kBox);
  eos_ = require_once(index_, symbols::kEos);
  unk_ = require_once(index_, symbols::kUnk);
}

Vocab Vocab::task_vocab() {
  std::vector<std::string> s = {
      std::string(symbols::kThinkingOpen), std::string(symbols::kThinkingClose),
      std::string(symbols::kFeedbackOpen), std::string(symbols::kFeedbackClose),
      std::string(symbols::kBox),          std::string(symbols::kEos),
      std::string(symbols::kUnk),
  };
  for (int d = 0; d < 10; ++d) s.push_back(std::to_string(d));
  for (char op : {'+', '*'})
    for (int a = 0; a < 10; ++a)
      for (int b = 0; b < 10; ++b) s.push_back(std::to_string(a) + op + std::to_string(b));
  for (int k = 0; k < 3; ++k) s.push_back("H" + std::to_string(k));
  s.insert(s.end(), {"issue", "fix", "format"});
  for (int d = 0; d < 10; ++d) s.push_back("wrong:" + std::to_string(d));
  s.insert(s.end(), {"check", "step"});
  return Vocab(std::move(s));
}

std::optional<TokenId> Vocab::find(std::string_view symbol) const {
  auto it = index_.find(std::string(symbol));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::id(std::string_view symbol) const {
  if (auto t = find(symbol)) return *t;
  throw std::out_of_range("unknown vocab symbol " + std::string(symbol));
}

const std::string& Vocab::symbol(TokenId token) const {
  if (!contains(token)) throw std::out_of_range("token id out of range: " + std::to_string(token));
  return symbols_[static_cast<std::size_t>(token)];
}

bool Vocab::is_marker(TokenId t) const noexcept {
  return t == thinking_open_ || t == thinking_close_ || t == feedback_open_ ||
         t == feedback_close_ || t == box_ || t == eos_;
}

std::string Vocab::render(std::span<const TokenId> tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += contains(tokens[i]) ? symbols_[static_cast<std::size_t>(tokens[i])] : std::string(symbols::kUnk);
  }
  return out;
}

TokenSeq Vocab::tokenize(std::string_view text) const {
  TokenSeq out;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) out.push_back(find(word).value_or(unk_));
  return out;
}

}  // namespace mulferl
