#pragma once

// Synthetic verifiable task: single-digit modular arithmetic.
//   a (+) b -> (a + b) mod 10,   a (*) b -> (a * b) mod 10
// The prompt is the single problem token "a+b" / "a*b"; the answer is one
// digit token; the hint names the answer's residue class mod 3.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mulferl/policy.hpp"
#include "mulferl/vocab.hpp"

namespace mulferl {

enum class Op { kAdd, kMul };

struct ProblemInstance {
  std::string id;
  int a = 0;
  Op op = Op::kAdd;
  int b = 0;
  TokenSeq prompt_tokens;
  TokenId answer_token = 0;
  int answer = 0;
  int answer_class = 0;
};

struct DatasetSplit {
  std::vector<ProblemInstance> train;
  std::vector<ProblemInstance> validation;
  std::vector<ProblemInstance> test;
  std::uint64_t seed = 0;
};

int apply_op(int a, Op op, int b);
char op_symbol(Op op);

ProblemInstance make_problem(const Vocab& vocab, std::string id, int a, Op op, int b);

/// Deterministic under `seed`. Instances are stratified over (op, answer
/// class) so both are balanced, shuffled, then split 80/10/10 by position.
/// Requires n >= 3.
DatasetSplit generate_dataset(const Vocab& vocab, std::size_t n, std::uint64_t seed);

/// Exact single-token equality with the ground truth.
bool check_answer(const ProblemInstance& problem, std::span<const TokenId> answer);

/// H_k with k = answer class.
TokenId hint(const Vocab& vocab, const ProblemInstance& problem);

/// Digit tokens whose residue class is k.
std::vector<TokenId> class_members(const Vocab& vocab, int k);

/// One JSON object per line: {"id", "prompt", "answer", "class"}.
void write_jsonl(const std::filesystem::path& path, const Vocab& vocab, std::span<const ProblemInstance> problems);
std::vector<ProblemInstance> read_jsonl(const std::filesystem::path& path, const Vocab& vocab);

/// Strengths of the hand-set prior that stands in for a pretrained model.
struct BasePrior {
  double format = 20.0;     // schema transitions
  double hint = 6.0;        // w_ctx[H_k, d] for d in class k
  double exclusion = 8.0;   // -w_ctx[wrong:d, d]
};

/// The starting checkpoint: emits the response schema
///   <thinking> <feedback> check </feedback> step </thinking> <box> D <eos>
/// with every digit D equally likely, and reads feedback tokens the obvious
/// way (a class hint raises its digits, a wrong:d marker lowers d).
PolicyParams make_base_policy(const Vocab& vocab, const BasePrior& prior = {});

}  // namespace mulferl
