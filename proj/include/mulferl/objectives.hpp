#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mulferl/policy.hpp"

namespace mulferl {

enum class GroupPattern { kAllFail, kAllPos, kMixed };
enum class Branch { kGrpo, kDpo, kSkip };

const char* to_string(GroupPattern p);
const char* to_string(Branch b);

/// Rejects an empty vector and values other than 0 / 1.
GroupPattern classify_pattern(std::span<const int> rewards);

/// A_i = (r_i - mean) / (population std + eps). Requires K >= 2.
std::vector<double> grpo_advantages(std::span<const double> rewards, double adv_denom_eps);
std::vector<double> grpo_advantages(std::span<const int> rewards, double adv_denom_eps);

/// k3 estimator: exp(u) - u - 1 with u = logp_ref - logp_theta.
template <typename Scalar>
Scalar kl_low_var(Scalar logp_theta, Scalar logp_ref) {
  const Scalar u = logp_ref - logp_theta;
  return std::expm1(u) - u;
}

/// log(sigmoid(x)) without overflow.
inline double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

struct GrpoConfig {
  double clip_eps = 0.2;
  double kl_coef = 0.001;
  double adv_denom_eps = 1e-6;
  double entropy_coef = 0.0;
  bool token_level_ratio = false;  // per-token ratios averaged per rollout

  void validate() const;  // throws ConfigError
};

struct DpoConfig {
  double beta = 0.005;
  double lambda_weight = 0.01;

  void validate() const;  // throws ConfigError
};

struct LossDiagnostics {
  std::vector<double> advantages;
  std::vector<double> ratios;   // sequence-level rho_i (token mode: mean token ratio)
  std::vector<double> margins;  // DPO delta_i
  double kl_mean = 0.0;
  double entropy_mean = 0.0;
  std::size_t clipped = 0;      // surrogate terms where the clipped branch won
};

struct LossReport {
  Branch branch = Branch::kSkip;
  double loss = 0.0;
  Gradient gradient;
  LossDiagnostics diagnostics;

  static LossReport skip(Eigen::Index vocab_size);
};

/// Clipped group-relative surrogate plus k3 KL to `ref` (and the optional
/// entropy bonus), all over unmasked tokens. The old-policy log-probs are the
/// ones recorded in each rollout. Every rollout is scored under `ctx`.
LossReport grpo_loss(std::span<const Rollout> group, const Context& ctx, const PolicyParams& params,
                     const PolicyParams& ref, std::span<const double> advantages, const GrpoConfig& cfg);

/// Sum over unmasked tokens of log pi_theta - log pi_ref, scored under `ctx`.
double dpo_delta(const Rollout& y, const Context& ctx, const PolicyParams& params, const PolicyParams& ref);

/// -(1/K) sum log sigmoid(beta * (Delta(winner_i) - Delta(loser_i))), both
/// scored under `ctx` (the loser counterfactually). Unweighted by lambda.
LossReport dpo_loss(std::span<const Rollout> winners, std::span<const Rollout> losers, const Context& ctx,
                    const PolicyParams& params, const PolicyParams& ref, const DpoConfig& cfg);

/// What the per-prompt state machine stopped on.
struct BranchRecord {
  GroupPattern pattern = GroupPattern::kAllFail;
  std::size_t turn = 0;
  std::span<const Rollout> group;
  std::span<const Rollout> prev_group;  // empty at turn 0
  const Context* ctx = nullptr;         // context the group was sampled under
};

/// Piecewise per-prompt loss: Mixed -> GRPO; AllPos at turn 0 -> skip;
/// AllPos later -> lambda * DPO against the previous group; AllFail -> skip.
LossReport per_prompt_loss(const BranchRecord& record, const PolicyParams& params, const PolicyParams& ref,
                           const GrpoConfig& grpo, const DpoConfig& dpo);

}  // namespace mulferl
