#include "mulferl/objectives.hpp"

#include <algorithm>
#include <stdexcept>

#include "mulferl/errors.hpp"

namespace mulferl {

const char* to_string(GroupPattern p) {
  switch (p) {
    case GroupPattern::kAllFail: return "all_fail";
    case GroupPattern::kAllPos: return "all_pos";
    case GroupPattern::kMixed: return "mixed";
  }
  return "unknown";
}

const char* to_string(Branch b) {
  switch (b) {
    case Branch::kGrpo: return "grpo";
    case Branch::kDpo: return "dpo";
    case Branch::kSkip: return "skip";
  }
  return "unknown";
}

GroupPattern classify_pattern(std::span<const int> rewards) {
  if (rewards.empty()) throw std::invalid_argument("classify_pattern: empty reward vector");
  bool any_pos = false, any_fail = false;
  for (int r : rewards) {
    if (r != 0 && r != 1) throw std::invalid_argument("classify_pattern: rewards must be 0 or 1");
    (r ? any_pos : any_fail) = true;
  }
  if (!any_pos) return GroupPattern::kAllFail;
  if (!any_fail) return GroupPattern::kAllPos;
  return GroupPattern::kMixed;
}

std::vector<double> grpo_advantages(std::span<const double> rewards, double adv_denom_eps) {
  if (rewards.size() < 2) throw std::invalid_argument("grpo_advantages: need K >= 2");
  if (!(adv_denom_eps > 0)) throw std::invalid_argument("grpo_advantages: eps must be > 0");
  const double k = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= k;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double denom = std::sqrt(var / k) + adv_denom_eps;
  std::vector<double> a(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) a[i] = (rewards[i] - mean) / denom;
  return a;
}

std::vector<double> grpo_advantages(std::span<const int> rewards, double adv_denom_eps) {
  std::vector<double> r(rewards.begin(), rewards.end());
  return grpo_advantages(std::span<const double>(r), adv_denom_eps);
}

void GrpoConfig::validate() const {
  if (!(clip_eps > 0 && clip_eps < 1)) throw ConfigError("grpo.clip_eps", "must lie in (0, 1)");
  if (!(kl_coef >= 0)) throw ConfigError("grpo.kl_coef", "must be >= 0");
  if (!(adv_denom_eps > 0)) throw ConfigError("grpo.adv_denom_eps", "must be > 0");
  if (!(entropy_coef >= 0)) throw ConfigError("grpo.entropy_coef", "must be >= 0");
}

void DpoConfig::validate() const {
  if (!(beta > 0)) throw ConfigError("dpo.beta", "must be > 0");
  if (!(lambda_weight > 0)) throw ConfigError("dpo.lambda", "must be > 0");
}

LossReport LossReport::skip(Eigen::Index vocab_size) {
  LossReport r;
  r.branch = Branch::kSkip;
  r.gradient = Gradient::zeros(vocab_size);
  return r;
}

namespace {

void check_rollout(const Rollout& y) {
  if (y.tokens.size() != y.loss_mask.size() || y.tokens.size() != y.token_logprobs.size())
    throw ContractViolation("rollout tokens, log-probs and mask differ in length");
}

// Masked sum in index order; the old-policy sum uses the same order so an
// on-policy ratio is exactly 1.
double masked_sum(const Vec<double>& v, const std::vector<bool>& mask) {
  double s = 0.0;
  for (std::size_t j = 0; j < mask.size(); ++j)
    if (mask[j]) s += v[static_cast<Eigen::Index>(j)];
  return s;
}

double masked_sum(const std::vector<double>& v, const std::vector<bool>& mask) {
  double s = 0.0;
  for (std::size_t j = 0; j < mask.size(); ++j)
    if (mask[j]) s += v[j];
  return s;
}

}  // namespace

LossReport grpo_loss(std::span<const Rollout> group, const Context& ctx, const PolicyParams& params,
                     const PolicyParams& ref, std::span<const double> advantages, const GrpoConfig& cfg) {
  if (group.size() != advantages.size()) throw ContractViolation("grpo_loss: one advantage per rollout");
  if (group.empty()) throw ContractViolation("grpo_loss: empty group");
  std::vector<int> rewards;
  for (const auto& y : group) {
    check_rollout(y);
    rewards.push_back(y.reward);
  }
  if (classify_pattern(rewards) != GroupPattern::kMixed)
    throw ContractViolation("grpo_loss requires a mixed group");

  const double k = static_cast<double>(group.size());
  const double lo = 1.0 - cfg.clip_eps, hi = 1.0 + cfg.clip_eps;

  LossReport rep;
  rep.branch = Branch::kGrpo;
  rep.gradient = Gradient::zeros_like(params);
  rep.diagnostics.advantages.assign(advantages.begin(), advantages.end());

  std::size_t n_tokens = 0;
  for (const auto& y : group) n_tokens += static_cast<std::size_t>(std::count(y.loss_mask.begin(), y.loss_mask.end(), true));
  const double inv_n = n_tokens ? 1.0 / static_cast<double>(n_tokens) : 0.0;

  double surrogate = 0.0, kl_sum = 0.0, entropy_sum = 0.0;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const Rollout& y = group[i];
    const double a = advantages[i];
    const auto lp = log_prob(params, ctx, y.tokens);
    const auto lref = log_prob(ref, ctx, y.tokens);
    std::vector<double> coeff(y.tokens.size(), 0.0);

    if (!cfg.token_level_ratio) {
      const double rho = std::exp(masked_sum(lp.per_token, y.loss_mask) - masked_sum(y.token_logprobs, y.loss_mask));
      const double unclipped = rho * a;
      const double clipped = std::clamp(rho, lo, hi) * a;
      rep.diagnostics.ratios.push_back(rho);
      // d(min)/d(rho) is zero only when the clipped branch is strictly smaller
      // and rho sits outside the clip interval.
      const bool clip_active = clipped < unclipped;
      surrogate += clip_active ? clipped : unclipped;
      if (clip_active) ++rep.diagnostics.clipped;
      const double g = (clip_active && (rho < lo || rho > hi)) ? 0.0 : -a * rho / k;
      for (std::size_t j = 0; j < coeff.size(); ++j)
        if (y.loss_mask[j]) coeff[j] += g;
    } else {
      std::size_t m = 0;
      for (bool b : y.loss_mask) m += b;
      double rho_mean = 0.0, term = 0.0;
      for (std::size_t j = 0; j < coeff.size(); ++j) {
        if (!y.loss_mask[j]) continue;
        const double rho = std::exp(lp.per_token[static_cast<Eigen::Index>(j)] - y.token_logprobs[j]);
        const double unclipped = rho * a, clipped = std::clamp(rho, lo, hi) * a;
        const bool clip_active = clipped < unclipped;
        term += (clip_active ? clipped : unclipped) / static_cast<double>(m);
        rho_mean += rho / static_cast<double>(m);
        if (clip_active) ++rep.diagnostics.clipped;
        if (!(clip_active && (rho < lo || rho > hi))) coeff[j] += -a * rho / (k * static_cast<double>(m));
      }
      surrogate += term;
      rep.diagnostics.ratios.push_back(rho_mean);
    }

    for (std::size_t j = 0; j < coeff.size(); ++j) {
      if (!y.loss_mask[j]) continue;
      const auto e = static_cast<Eigen::Index>(j);
      kl_sum += kl_low_var(lp.per_token[e], lref.per_token[e]);
      // d/d(logp_theta) of exp(u) - u - 1, u = logp_ref - logp_theta
      coeff[j] += cfg.kl_coef * inv_n * (1.0 - std::exp(lref.per_token[e] - lp.per_token[e]));
    }
    accumulate_log_prob_grad<double>(params, ctx, y.tokens, coeff, rep.gradient);

    if (cfg.entropy_coef > 0.0) {
      std::vector<double> ecoeff(y.tokens.size());
      for (std::size_t j = 0; j < ecoeff.size(); ++j) ecoeff[j] = y.loss_mask[j] ? -cfg.entropy_coef * inv_n : 0.0;
      const Vec<double> h = position_entropies<double>(params, ctx, y.tokens, ecoeff, &rep.gradient);
      entropy_sum += masked_sum(h, y.loss_mask);
    }
  }

  rep.diagnostics.kl_mean = kl_sum * inv_n;
  rep.diagnostics.entropy_mean = entropy_sum * inv_n;
  rep.loss = -surrogate / k + cfg.kl_coef * rep.diagnostics.kl_mean - cfg.entropy_coef * rep.diagnostics.entropy_mean;
  return rep;
}

double dpo_delta(const Rollout& y, const Context& ctx, const PolicyParams& params, const PolicyParams& ref) {
  check_rollout(y);
  if (y.tokens.empty()) return 0.0;
  const auto lp = log_prob(params, ctx, y.tokens);
  const auto lr = log_prob(ref, ctx, y.tokens);
  return masked_sum(lp.per_token, y.loss_mask) - masked_sum(lr.per_token, y.loss_mask);
}

LossReport dpo_loss(std::span<const Rollout> winners, std::span<const Rollout> losers, const Context& ctx,
                    const PolicyParams& params, const PolicyParams& ref, const DpoConfig& cfg) {
  if (winners.size() != losers.size()) throw std::invalid_argument("dpo_loss: winners and losers differ in count");
  if (winners.empty()) throw std::invalid_argument("dpo_loss: no pairs");
  for (std::size_t i = 0; i < winners.size(); ++i)
    if (winners[i].reward != 1 || losers[i].reward != 0)
      throw ContractViolation("dpo_loss: winners must have reward 1 and losers reward 0");

  const double k = static_cast<double>(winners.size());
  LossReport rep;
  rep.branch = Branch::kDpo;
  rep.gradient = Gradient::zeros_like(params);
  double total = 0.0;
  for (std::size_t i = 0; i < winners.size(); ++i) {
    const double delta = dpo_delta(winners[i], ctx, params, ref) - dpo_delta(losers[i], ctx, params, ref);
    rep.diagnostics.margins.push_back(delta);
    total += -log_sigmoid(cfg.beta * delta);
    // d/d(delta) of -log sigmoid(beta delta) = -beta sigmoid(-beta delta)
    const double g = -cfg.beta * sigmoid(-cfg.beta * delta) / k;
    auto push = [&](const Rollout& y, double c) {
      std::vector<double> coeff(y.tokens.size());
      for (std::size_t j = 0; j < coeff.size(); ++j) coeff[j] = y.loss_mask[j] ? c : 0.0;
      if (!y.tokens.empty()) accumulate_log_prob_grad<double>(params, ctx, y.tokens, coeff, rep.gradient);
    };
    push(winners[i], g);
    push(losers[i], -g);
  }
  rep.loss = total / k;
  return rep;
}

LossReport per_prompt_loss(const BranchRecord& record, const PolicyParams& params, const PolicyParams& ref,
                           const GrpoConfig& grpo, const DpoConfig& dpo) {
  switch (record.pattern) {
    case GroupPattern::kAllFail:
      return LossReport::skip(params.vocab_size());
    case GroupPattern::kAllPos: {
      if (record.turn == 0) return LossReport::skip(params.vocab_size());
      if (!record.ctx) throw ContractViolation("per_prompt_loss: missing context");
      if (record.prev_group.size() != record.group.size())
        throw ContractViolation("per_prompt_loss: DPO needs the previous group, index-matched");
      LossReport rep = dpo_loss(record.group, record.prev_group, *record.ctx, params, ref, dpo);
      rep.loss *= dpo.lambda_weight;
      rep.gradient *= dpo.lambda_weight;
      return rep;
    }
    case GroupPattern::kMixed: {
      if (!record.ctx) throw ContractViolation("per_prompt_loss: missing context");
      std::vector<int> rewards;
      for (const auto& y : record.group) rewards.push_back(y.reward);
      const auto adv = grpo_advantages(std::span<const int>(rewards), grpo.adv_denom_eps);
      return grpo_loss(record.group, *record.ctx, params, ref, adv, grpo);
    }
  }
  return LossReport::skip(params.vocab_size());
}

}  // namespace mulferl
