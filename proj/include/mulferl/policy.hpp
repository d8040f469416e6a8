#pragma once

// Order-1 log-linear sequence policy with a context bag:
//
//   logits(next | prev, ctx) = trans[prev, next] + sum_{u in bag(ctx)} ctx[u, next]
//
// bag(ctx) is the multiset of prompt tokens plus injected feedback tokens.
// The first step reads the dedicated begin-of-sequence row trans[V, :].
// Everything here is templated on the scalar type; the engine uses double.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "mulferl/errors.hpp"
#include "mulferl/rng.hpp"
#include "mulferl/vocab.hpp"

namespace mulferl {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
struct BasicPolicyParams {
  RowMatrix<Scalar> trans;  // (V + 1) x V, last row is begin-of-sequence
  RowMatrix<Scalar> ctx;    // V x V

  static BasicPolicyParams zeros(Eigen::Index vocab_size) {
    return {RowMatrix<Scalar>::Zero(vocab_size + 1, vocab_size),
            RowMatrix<Scalar>::Zero(vocab_size, vocab_size)};
  }

  Eigen::Index vocab_size() const { return ctx.cols(); }
  Eigen::Index bos_row() const { return ctx.cols(); }
  bool all_finite() const { return trans.allFinite() && ctx.allFinite(); }

  friend bool operator==(const BasicPolicyParams& a, const BasicPolicyParams& b) {
    return a.trans.rows() == b.trans.rows() && a.trans.cols() == b.trans.cols() &&
           a.ctx.rows() == b.ctx.rows() && a.trans == b.trans && a.ctx == b.ctx;
  }
};

/// Same shape as the parameter tables; accumulates d(objective)/d(params).
template <typename Scalar>
struct BasicGradient {
  RowMatrix<Scalar> trans;
  RowMatrix<Scalar> ctx;

  static BasicGradient zeros(Eigen::Index vocab_size) {
    return {RowMatrix<Scalar>::Zero(vocab_size + 1, vocab_size),
            RowMatrix<Scalar>::Zero(vocab_size, vocab_size)};
  }
  static BasicGradient zeros_like(const BasicPolicyParams<Scalar>& p) { return zeros(p.vocab_size()); }

  BasicGradient& operator+=(const BasicGradient& o) {
    trans += o.trans;
    ctx += o.ctx;
    return *this;
  }
  BasicGradient& operator*=(Scalar s) {
    trans *= s;
    ctx *= s;
    return *this;
  }
  bool is_zero() const { return (trans.array() == 0).all() && (ctx.array() == 0).all(); }
  Scalar max_abs() const {
    Scalar m = trans.size() ? trans.cwiseAbs().maxCoeff() : Scalar(0);
    return ctx.size() ? std::max(m, ctx.cwiseAbs().maxCoeff()) : m;
  }
};

using PolicyParams = BasicPolicyParams<double>;
using Gradient = BasicGradient<double>;

struct Context {
  TokenSeq prompt_tokens;
  std::optional<TokenSeq> injected_feedback_tokens;

  /// Multiset of context tokens feeding the ctx table.
  TokenSeq bag() const {
    TokenSeq b = prompt_tokens;
    if (injected_feedback_tokens) b.insert(b.end(), injected_feedback_tokens->begin(), injected_feedback_tokens->end());
    return b;
  }
};

/// One sampled response. `token_logprobs` are under the sampling policy at
/// temperature 1; `loss_mask[j]` is false for teacher-forced positions.
struct Rollout {
  TokenSeq tokens;
  std::vector<double> token_logprobs;
  std::vector<bool> loss_mask;
  int reward = 0;
  bool truncated = false;
};

template <typename Scalar>
struct SequenceLogProb {
  Scalar total;
  Vec<Scalar> per_token;
};

namespace detail {

template <typename Scalar>
void check_tokens(Eigen::Index vocab_size, std::span<const TokenId> tokens) {
  for (std::size_t j = 0; j < tokens.size(); ++j)
    if (tokens[j] < 0 || tokens[j] >= vocab_size) throw UnknownTokenError(j, tokens[j]);
}

// In-place log-softmax of a logit vector; max-shifted.
template <typename Scalar>
void log_softmax_inplace(Vec<Scalar>& z) {
  const Scalar m = z.maxCoeff();
  const Scalar lse = m + std::log((z.array() - m).exp().sum());
  z.array() -= lse;
}

}  // namespace detail

/// Sum of ctx rows over the bag: the context-dependent part of every logit.
template <typename Scalar>
Vec<Scalar> context_logits(const BasicPolicyParams<Scalar>& params, const Context& ctx) {
  const TokenSeq bag = ctx.bag();
  detail::check_tokens<Scalar>(params.vocab_size(), bag);
  Vec<Scalar> out = Vec<Scalar>::Zero(params.vocab_size());
  for (TokenId u : bag) out += params.ctx.row(u).transpose();
  return out;
}

/// Log-probabilities of every next token given the previous token (or
/// begin-of-sequence when `prev` is nullopt) and precomputed context logits.
template <typename Scalar>
Vec<Scalar> next_token_log_probs(const BasicPolicyParams<Scalar>& params, const Vec<Scalar>& bag_logits,
                                 std::optional<TokenId> prev) {
  const Eigen::Index row = prev ? static_cast<Eigen::Index>(*prev) : params.bos_row();
  Vec<Scalar> z = params.trans.row(row).transpose() + bag_logits;
  detail::log_softmax_inplace(z);
  return z;
}

template <typename Scalar>
SequenceLogProb<Scalar> log_prob(const BasicPolicyParams<Scalar>& params, const Context& ctx,
                                 std::span<const TokenId> tokens) {
  if (tokens.empty()) throw ContractViolation("log_prob: empty token sequence");
  detail::check_tokens<Scalar>(params.vocab_size(), tokens);
  const Vec<Scalar> bag = context_logits(params, ctx);
  SequenceLogProb<Scalar> out{Scalar(0), Vec<Scalar>(static_cast<Eigen::Index>(tokens.size()))};
  std::optional<TokenId> prev;
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    out.per_token[static_cast<Eigen::Index>(j)] = next_token_log_probs(params, bag, prev)[tokens[j]];
    out.total += out.per_token[static_cast<Eigen::Index>(j)];
    prev = tokens[j];
  }
  return out;
}

/// Adds sum_j coeff[j] * d(log pi(tokens[j] | prefix, ctx))/d(params) into
/// `grad`. Positions with zero coefficient are skipped entirely.
template <typename Scalar>
void accumulate_log_prob_grad(const BasicPolicyParams<Scalar>& params, const Context& ctx,
                              std::span<const TokenId> tokens, std::span<const Scalar> coeff,
                              BasicGradient<Scalar>& grad) {
  if (coeff.size() != tokens.size()) throw ContractViolation("coefficient length must equal token length");
  detail::check_tokens<Scalar>(params.vocab_size(), tokens);
  const Vec<Scalar> bag = context_logits(params, ctx);
  Vec<Scalar> bag_grad = Vec<Scalar>::Zero(params.vocab_size());
  bool any = false;
  std::optional<TokenId> prev;
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    if (coeff[j] != Scalar(0)) {
      // d log softmax(z)[y] / dz = onehot(y) - softmax(z)
      Vec<Scalar> g = -next_token_log_probs(params, bag, prev).array().exp().matrix();
      g[tokens[j]] += Scalar(1);
      g *= coeff[j];
      const Eigen::Index row = prev ? static_cast<Eigen::Index>(*prev) : params.bos_row();
      grad.trans.row(row) += g.transpose();
      bag_grad += g;
      any = true;
    }
    prev = tokens[j];
  }
  if (!any) return;
  for (TokenId u : ctx.bag()) grad.ctx.row(u) += bag_grad.transpose();
}

/// Gradient of the masked-in log-probability sum.
template <typename Scalar>
BasicGradient<Scalar> grad_log_prob(const BasicPolicyParams<Scalar>& params, const Context& ctx,
                                    std::span<const TokenId> tokens, const std::vector<bool>& mask) {
  if (mask.size() != tokens.size()) throw ContractViolation("mask length must equal token length");
  std::vector<Scalar> coeff(tokens.size());
  for (std::size_t j = 0; j < tokens.size(); ++j) coeff[j] = mask[j] ? Scalar(1) : Scalar(0);
  auto grad = BasicGradient<Scalar>::zeros_like(params);
  accumulate_log_prob_grad<Scalar>(params, ctx, tokens, coeff, grad);
  return grad;
}

/// Entropy of the next-token distribution at every position, and (when
/// `grad` is given) sum_j coeff[j] * dH_j/d(params) added into it.
template <typename Scalar>
Vec<Scalar> position_entropies(const BasicPolicyParams<Scalar>& params, const Context& ctx,
                               std::span<const TokenId> tokens, std::span<const Scalar> coeff,
                               BasicGradient<Scalar>* grad) {
  detail::check_tokens<Scalar>(params.vocab_size(), tokens);
  const Vec<Scalar> bag = context_logits(params, ctx);
  Vec<Scalar> h(static_cast<Eigen::Index>(tokens.size()));
  Vec<Scalar> bag_grad = Vec<Scalar>::Zero(params.vocab_size());
  std::optional<TokenId> prev;
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    const Vec<Scalar> logp = next_token_log_probs(params, bag, prev);
    const Vec<Scalar> p = logp.array().exp().matrix();
    const Scalar entropy = -(p.array() * logp.array()).sum();
    h[static_cast<Eigen::Index>(j)] = entropy;
    if (grad && !coeff.empty() && coeff[j] != Scalar(0)) {
      // dH/dz_k = -p_k (log p_k + H)
      Vec<Scalar> g = (-(p.array() * (logp.array() + entropy)) * coeff[j]).matrix();
      const Eigen::Index row = prev ? static_cast<Eigen::Index>(*prev) : params.bos_row();
      grad->trans.row(row) += g.transpose();
      bag_grad += g;
    }
    prev = tokens[j];
  }
  if (grad && !bag_grad.isZero(0))
    for (TokenId u : ctx.bag()) grad->ctx.row(u) += bag_grad.transpose();
  return h;
}

struct SamplingOptions {
  std::size_t max_len = 64;       // total rollout length, forced prefix included
  double temperature = 1.0;       // 0 selects greedy decoding
  bool greedy = false;
  std::optional<TokenId> stop_token;
};

/// Samples one rollout autoregressively. `forced_prefix` is teacher-forced:
/// those positions are not sampled, their log-probs are recorded, and their
/// loss_mask entries are false. Greedy decoding breaks exact ties uniformly
/// at random with `rng`.
Rollout sample_rollout(const PolicyParams& params, const Context& ctx, std::span<const TokenId> forced_prefix,
                       const SamplingOptions& options, Rng& rng);

inline Rollout sample_rollout(const PolicyParams& params, const Context& ctx, const SamplingOptions& options,
                              Rng& rng) {
  return sample_rollout(params, ctx, {}, options, rng);
}

}  // namespace mulferl
