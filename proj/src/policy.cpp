#include "mulferl/policy.hpp"

#include <algorithm>
#include <cmath>

namespace mulferl {

namespace {

TokenId pick_greedy(const Vec<double>& logp, Rng& rng) {
  const double best = logp.maxCoeff();
  std::vector<TokenId> ties;
  for (Eigen::Index k = 0; k < logp.size(); ++k)
    if (logp[k] == best) ties.push_back(static_cast<TokenId>(k));
  if (ties.size() == 1) return ties.front();
  return ties[rng.below(ties.size())];
}

TokenId pick_sampled(const Vec<double>& logp, double temperature, Rng& rng) {
  Vec<double> z = logp;
  if (temperature != 1.0) {
    z /= temperature;
    detail::log_softmax_inplace(z);
  }
  const double u = rng.uniform();
  double cum = 0.0;
  Eigen::Index last_positive = 0;
  for (Eigen::Index k = 0; k < z.size(); ++k) {
    const double p = std::exp(z[k]);
    if (p <= 0.0) continue;
    last_positive = k;
    cum += p;
    if (u < cum) return static_cast<TokenId>(k);
  }
  return static_cast<TokenId>(last_positive);  // rounding left cum slightly below 1
}

}  // namespace

Rollout sample_rollout(const PolicyParams& params, const Context& ctx, std::span<const TokenId> forced_prefix,
                       const SamplingOptions& options, Rng& rng) {
  if (options.max_len < 1) throw ContractViolation("sample_rollout: max_len must be >= 1");
  if (!(options.temperature >= 0.0) || !std::isfinite(options.temperature))
    throw ContractViolation("sample_rollout: temperature must be finite and >= 0");
  if (forced_prefix.size() >= options.max_len)
    throw ContractViolation("sample_rollout: forced prefix leaves no room to generate");
  detail::check_tokens<double>(params.vocab_size(), forced_prefix);

  const bool greedy = options.greedy || options.temperature == 0.0;
  const Vec<double> bag = context_logits(params, ctx);

  Rollout r;
  r.tokens.reserve(options.max_len);
  r.token_logprobs.reserve(options.max_len);
  r.loss_mask.reserve(options.max_len);

  std::optional<TokenId> prev;
  for (std::size_t pos = 0; pos < options.max_len; ++pos) {
    const Vec<double> logp = next_token_log_probs(params, bag, prev);
    const bool forced = pos < forced_prefix.size();
    TokenId tok;
    if (forced)
      tok = forced_prefix[pos];
    else if (greedy)
      tok = pick_greedy(logp, rng);
    else
      tok = pick_sampled(logp, options.temperature, rng);

    r.tokens.push_back(tok);
    r.token_logprobs.push_back(logp[tok]);
    r.loss_mask.push_back(!forced);
    prev = tok;
    if (!forced && options.stop_token && tok == *options.stop_token) return r;
  }
  r.truncated = options.stop_token.has_value();
  return r;
}

}  // namespace mulferl
