#include "mulferl/env.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <nlohmann/json.hpp>

#include "mulferl/errors.hpp"
#include "mulferl/rng.hpp"

namespace mulferl {

int apply_op(int a, Op op, int b) { return op == Op::kAdd ? (a + b) % 10 : (a * b) % 10; }

char op_symbol(Op op) { return op == Op::kAdd ? '+' : '*'; }

ProblemInstance make_problem(const Vocab& vocab, std::string id, int a, Op op, int b) {
  if (a < 0 || a > 9 || b < 0 || b > 9) throw std::invalid_argument("operands must be single digits");
  ProblemInstance p;
  p.id = std::move(id);
  p.a = a;
  p.op = op;
  p.b = b;
  p.prompt_tokens = {vocab.id(std::to_string(a) + op_symbol(op) + std::to_string(b))};
  p.answer = apply_op(a, op, b);
  p.answer_token = vocab.id(std::to_string(p.answer));
  p.answer_class = p.answer % 3;
  return p;
}

DatasetSplit generate_dataset(const Vocab& vocab, std::size_t n, std::uint64_t seed) {
  if (n < 3) throw std::invalid_argument("generate_dataset: n must be >= 3");
  // Candidate (a, b) pairs per (op, class) stratum.
  std::vector<std::pair<int, int>> strata[2][3];
  for (int o = 0; o < 2; ++o)
    for (int a = 0; a < 10; ++a)
      for (int b = 0; b < 10; ++b) strata[o][apply_op(a, static_cast<Op>(o), b) % 3].emplace_back(a, b);

  Rng rng(seed);
  std::vector<ProblemInstance> all;
  all.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int o = static_cast<int>(i % 2);
    const int k = static_cast<int>((i / 2) % 3);
    const auto& pool = strata[o][k];
    const auto [a, b] = pool[rng.below(pool.size())];
    all.push_back(make_problem(vocab, "p" + std::to_string(i), a, static_cast<Op>(o), b));
  }
  for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[rng.below(i)]);

  DatasetSplit split;
  split.seed = seed;
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_val = std::max<std::size_t>(1, n / 10);
  const std::size_t n_train_eff = std::min(n_train, n - 2);
  const std::size_t n_val_eff = std::min(n_val, n - n_train_eff - 1);
  split.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train_eff));
  split.validation.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train_eff),
                          all.begin() + static_cast<std::ptrdiff_t>(n_train_eff + n_val_eff));
  split.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train_eff + n_val_eff), all.end());
  return split;
}

bool check_answer(const ProblemInstance& problem, std::span<const TokenId> answer) {
  return answer.size() == 1 && answer[0] == problem.answer_token;
}

TokenId hint(const Vocab& vocab, const ProblemInstance& problem) {
  return vocab.id("H" + std::to_string(problem.answer_class));
}

std::vector<TokenId> class_members(const Vocab& vocab, int k) {
  std::vector<TokenId> out;
  for (int d = k; d < 10; d += 3) out.push_back(vocab.id(std::to_string(d)));
  return out;
}

void write_jsonl(const std::filesystem::path& path, const Vocab& vocab, std::span<const ProblemInstance> problems) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string());
  for (const auto& p : problems) {
    nlohmann::ordered_json j;
    j["id"] = p.id;
    j["prompt"] = vocab.render(p.prompt_tokens);
    j["answer"] = vocab.symbol(p.answer_token);
    j["class"] = p.answer_class;
    f << j.dump() << '\n';
  }
  if (!f) throw IoError("write failed: " + path.string());
}

std::vector<ProblemInstance> read_jsonl(const std::filesystem::path& path, const Vocab& vocab) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<ProblemInstance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    try {
      const auto j = nlohmann::json::parse(line);
      const auto prompt = j.at("prompt").get<std::string>();
      if (prompt.size() != 3 || (prompt[1] != '+' && prompt[1] != '*') || !std::isdigit(prompt[0]) ||
          !std::isdigit(prompt[2]))
        throw IoError(where + ": bad prompt '" + prompt + "'");
      auto p = make_problem(vocab, j.at("id").get<std::string>(), prompt[0] - '0',
                            prompt[1] == '+' ? Op::kAdd : Op::kMul, prompt[2] - '0');
      if (j.at("answer").get<std::string>() != vocab.symbol(p.answer_token) ||
          j.at("class").get<int>() != p.answer_class)
        throw IoError(where + ": answer fields disagree with the prompt");
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(where + ": " + e.what());
    }
  }
  return out;
}

PolicyParams make_base_policy(const Vocab& vocab, const BasePrior& prior) {
  auto p = PolicyParams::zeros(static_cast<Eigen::Index>(vocab.size()));
  const double s = prior.format;
  auto link = [&](Eigen::Index from, TokenId to) { p.trans(from, to) = s; };
  const TokenId check = vocab.id("check"), step = vocab.id("step");
  link(p.bos_row(), vocab.thinking_open());
  link(vocab.thinking_open(), vocab.feedback_open());
  link(vocab.feedback_open(), check);
  link(check, vocab.feedback_close());
  link(vocab.feedback_close(), step);
  link(step, vocab.thinking_close());
  link(vocab.thinking_close(), vocab.box());
  for (int d = 0; d < 10; ++d) {
    const TokenId digit = vocab.id(std::to_string(d));
    link(vocab.box(), digit);
    link(digit, vocab.eos());
  }
  for (int k = 0; k < 3; ++k)
    for (TokenId d : class_members(vocab, k)) p.ctx(vocab.id("H" + std::to_string(k)), d) = prior.hint;
  for (int d = 0; d < 10; ++d)
    p.ctx(vocab.id("wrong:" + std::to_string(d)), vocab.id(std::to_string(d))) = -prior.exclusion;
  return p;
}

}  // namespace mulferl
