#include <gtest/gtest.h>

#include "mulferl/checkpoint.hpp"
#include "mulferl/errors.hpp"
#include "mulferl/policy.hpp"
#include "test_support.hpp"

using namespace mulferl;
using namespace mulferl::testing;

TEST(Policy, ZeroParamsGiveUniformSteps) {
  const auto p = PolicyParams::zeros(4);
  const Context ctx{{1, 2}, std::nullopt};
  for (std::optional<TokenId> prev : {std::optional<TokenId>{}, std::optional<TokenId>{0}, std::optional<TokenId>{3}}) {
    const auto lp = next_token_log_probs(p, context_logits(p, ctx), prev);
    for (Eigen::Index k = 0; k < 4; ++k) EXPECT_NEAR(std::exp(lp[k]), 0.25, 1e-15);
  }
}

TEST(Policy, ZeroParamsLogProbOfThreeTokens) {
  const auto p = PolicyParams::zeros(4);
  const TokenSeq y = {0, 3, 1};
  const auto lp = log_prob(p, Context{{2}, std::nullopt}, y);
  EXPECT_NEAR(lp.total, -4.1588830833596719, 1e-12);  // 3 ln(1/4)
}

TEST(Policy, SpotValueMatchesHighPrecisionOracle) {
  auto p = PolicyParams::zeros(3);
  p.trans(1, 0) = 1.0;  // row for prev = 1 is [1, 0, 0]
  const TokenSeq y = {1, 0};
  const auto lp = log_prob(p, Context{}, y);
  EXPECT_NEAR(lp.per_token[1], -0.55144471393205109, 1e-12);  // ln(e / (e + 2))
}

TEST(Policy, EmptyInjectedFeedbackMatchesNoFeedback) {
  Rng rng(3);
  const auto p = random_params(10, rng);
  const TokenSeq y = random_tokens(10, 6, rng);
  const auto a = log_prob(p, Context{{7, 8}, std::nullopt}, y);
  const auto b = log_prob(p, Context{{7, 8}, TokenSeq{}}, y);
  EXPECT_EQ(a.total, b.total);
}

TEST(Policy, LogProbMatchesNaiveReference) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_params(10, rng, 2.0);
    const Context ctx{random_tokens(10, 2, rng), random_tokens(10, rng.below(3), rng)};
    const TokenSeq y = random_tokens(10, 1 + rng.below(8), rng);
    std::vector<long double> ref;
    const long double total = naive_log_prob(p, ctx, y, &ref);
    const auto lp = log_prob(p, ctx, y);
    EXPECT_NEAR(lp.total, static_cast<double>(total), 1e-12);
    EXPECT_LE(lp.total, 0.0);
    for (std::size_t j = 0; j < y.size(); ++j) EXPECT_NEAR(lp.per_token[j], static_cast<double>(ref[j]), 1e-12);
  }
}

TEST(Policy, UnknownTokenReportsPosition) {
  const auto p = PolicyParams::zeros(5);
  const TokenSeq y = {1, 2, 9, 0};
  try {
    log_prob(p, Context{}, y);
    FAIL() << "expected UnknownTokenError";
  } catch (const UnknownTokenError& e) {
    EXPECT_EQ(e.position(), 2u);
  }
  EXPECT_THROW(log_prob(p, Context{}, TokenSeq{}), ContractViolation);
}

TEST(Policy, NormalizationProperty) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_params(12, rng, 5.0);
    const Context ctx{random_tokens(12, 3, rng), random_tokens(12, 2, rng)};
    const auto bag = context_logits(p, ctx);
    std::optional<TokenId> prev;
    if (rng.below(2)) prev = static_cast<TokenId>(rng.below(12));
    const auto lp = next_token_log_probs(p, bag, prev);
    EXPECT_NEAR(lp.array().exp().sum(), 1.0, 1e-12);
  }
}

TEST(Policy, ContextBagLinearity) {
  Rng rng(6);
  const auto p = random_params(9, rng);
  const Context base{{1, 4}, std::nullopt};
  for (TokenId u = 0; u < 9; ++u) {
    Context more = base;
    more.prompt_tokens.push_back(u);
    const Vec<double> diff = context_logits(p, more) - context_logits(p, base);
    EXPECT_TRUE(diff.isApprox(p.ctx.row(u).transpose(), 1e-14));
  }
}

TEST(Policy, FullyMaskedGradientIsZero) {
  Rng rng(8);
  const auto p = random_params(10, rng);
  const TokenSeq y = random_tokens(10, 5, rng);
  const auto g = grad_log_prob(p, Context{{1}, std::nullopt}, y, std::vector<bool>(5, false));
  EXPECT_TRUE(g.is_zero());
}

TEST(Policy, SingleTokenUniformGradient) {
  const auto p = PolicyParams::zeros(6);
  const TokenSeq y = {2};
  const auto g = grad_log_prob(p, Context{}, y, {true});
  for (Eigen::Index k = 0; k < 6; ++k) EXPECT_NEAR(g.trans(6, k), (k == 2 ? 1.0 : 0.0) - 1.0 / 6, 1e-15);
  EXPECT_EQ((g.trans.topRows(6).array() != 0).count(), 0);
}

TEST(Policy, ContextRowsWeightedByMultiplicity) {
  Rng rng(9);
  const auto p = random_params(8, rng);
  const TokenSeq y = random_tokens(8, 4, rng);
  const std::vector<bool> mask(4, true);
  const auto once = grad_log_prob(p, Context{{3, 5}, std::nullopt}, y, mask);
  const auto twice = grad_log_prob(p, Context{{3, 3, 5}, std::nullopt}, y, mask);
  // Row 3 appears twice in the second bag, so the logits differ; compare the
  // rows within each gradient instead: every bag occurrence receives the
  // same vector.
  EXPECT_TRUE(once.ctx.row(3).isApprox(once.ctx.row(5)));
  EXPECT_TRUE(twice.ctx.row(3).isApprox(2.0 * twice.ctx.row(5)));
}

TEST(Policy, GradientMatchesFiniteDifferences) {
  Rng rng(21);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index v = 6 + static_cast<Eigen::Index>(rng.below(4));
    const auto p = random_params(v, rng, 1.5);
    const Context ctx{random_tokens(v, 1 + rng.below(3), rng), random_tokens(v, rng.below(3), rng)};
    const TokenSeq y = random_tokens(v, 1 + rng.below(7), rng);
    const auto mask = random_mask(y.size(), rng);
    const auto g = grad_log_prob(p, ctx, y, mask);
    auto f = [&](const PolicyParams& q) {
      const auto lp = log_prob(q, ctx, y);
      double s = 0;
      for (std::size_t j = 0; j < y.size(); ++j)
        if (mask[j]) s += lp.per_token[static_cast<Eigen::Index>(j)];
      return s;
    };
    worst = std::max(worst, check_gradient(p, g, f).max_rel_err);
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Policy, EntropyGradientMatchesFiniteDifferences) {
  Rng rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_params(7, rng);
    const Context ctx{random_tokens(7, 2, rng), std::nullopt};
    const TokenSeq y = random_tokens(7, 5, rng);
    std::vector<double> coeff(y.size());
    for (auto& c : coeff) c = rng.uniform();
    auto g = Gradient::zeros(7);
    position_entropies<double>(p, ctx, y, coeff, &g);
    auto f = [&](const PolicyParams& q) {
      const auto h = position_entropies<double>(q, ctx, y, {}, nullptr);
      double s = 0;
      for (std::size_t j = 0; j < y.size(); ++j) s += coeff[j] * h[static_cast<Eigen::Index>(j)];
      return s;
    };
    EXPECT_LT(check_gradient(p, g, f).max_rel_err, 1e-5);
  }
}

TEST(Policy, MergedGradientsIndependentOfOrder) {
  Rng rng(30);
  const auto p = random_params(10, rng);
  std::vector<Gradient> parts;
  for (int i = 0; i < 16; ++i) {
    const TokenSeq y = random_tokens(10, 6, rng);
    parts.push_back(grad_log_prob(p, Context{{static_cast<TokenId>(i % 10)}, std::nullopt}, y, random_mask(6, rng)));
  }
  auto forward = Gradient::zeros(10), backward = Gradient::zeros(10);
  for (std::size_t i = 0; i < parts.size(); ++i) forward += parts[i];
  for (std::size_t i = parts.size(); i-- > 0;) backward += parts[i];
  EXPECT_LT((forward.trans - backward.trans).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((forward.ctx - backward.ctx).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Sampling, SeededDeterminism) {
  Rng prng(1);
  const auto p = random_params(10, prng);
  const Context ctx{{4}, std::nullopt};
  SamplingOptions so;
  so.max_len = 12;
  so.stop_token = 5;
  Rng a(42), b(42);
  const Rollout ra = sample_rollout(p, ctx, so, a), rb = sample_rollout(p, ctx, so, b);
  EXPECT_EQ(ra.tokens, rb.tokens);
  EXPECT_EQ(ra.token_logprobs, rb.token_logprobs);
  EXPECT_EQ(ra.loss_mask, rb.loss_mask);
}

TEST(Sampling, GreedyFollowsUniqueArgmax) {
  auto p = PolicyParams::zeros(5);
  p.trans(5, 2) = 3;  // bos -> 2 -> 4 -> 1 -> 0
  p.trans(2, 4) = 3;
  p.trans(4, 1) = 3;
  p.trans(1, 0) = 3;
  p.trans(0, 3) = 3;
  SamplingOptions so;
  so.max_len = 5;
  so.temperature = 0.0;
  Rng rng(0);
  const Rollout r = sample_rollout(p, Context{}, so, rng);
  EXPECT_EQ(r.tokens, (TokenSeq{2, 4, 1, 0, 3}));
  EXPECT_FALSE(r.truncated);  // no stop token requested
}

TEST(Sampling, LowTemperatureApproachesGreedy) {
  Rng prng(2);
  const auto p = random_params(8, prng, 3.0);
  SamplingOptions greedy, cold;
  greedy.max_len = cold.max_len = 10;
  greedy.greedy = true;
  cold.temperature = 1e-4;
  Rng a(1), b(2);
  EXPECT_EQ(sample_rollout(p, Context{{1}, std::nullopt}, greedy, a).tokens,
            sample_rollout(p, Context{{1}, std::nullopt}, cold, b).tokens);
}

TEST(Sampling, EmpiricalFrequenciesMatchSoftmax) {
  Rng prng(3);
  const auto p = random_params(4, prng);
  const auto lp = next_token_log_probs(p, context_logits(p, Context{}), std::nullopt);
  SamplingOptions so;
  so.max_len = 1;
  Rng rng(9);
  std::vector<int> counts(4, 0);
  const int n = 200000;
  for (int i = 0; i < n; ++i) ++counts[sample_rollout(p, Context{}, so, rng).tokens[0]];
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(counts[k] / double(n), std::exp(lp[k]), 0.005);
}

TEST(Sampling, RecordedLogProbsEqualScoring) {
  Rng prng(4);
  const auto p = random_params(10, prng);
  const Context ctx{{2}, TokenSeq{7, 8}};
  const TokenSeq prefix = {0, 2, 7, 8, 3};
  SamplingOptions so;
  so.max_len = 15;
  so.stop_token = 5;
  so.temperature = 0.7;
  Rng rng(5);
  const Rollout r = sample_rollout(p, ctx, prefix, so, rng);
  ASSERT_EQ(r.tokens.size(), r.token_logprobs.size());
  ASSERT_EQ(r.tokens.size(), r.loss_mask.size());
  const auto lp = log_prob(p, ctx, r.tokens);
  for (std::size_t j = 0; j < r.tokens.size(); ++j) {
    EXPECT_EQ(r.token_logprobs[j], lp.per_token[static_cast<Eigen::Index>(j)]);  // temperature 1, bitwise
    EXPECT_EQ(r.loss_mask[j], j >= prefix.size());
    if (j < prefix.size()) {
      EXPECT_EQ(r.tokens[j], prefix[j]);
    }
  }
}

TEST(Sampling, TruncationFlagged) {
  const auto p = PolicyParams::zeros(6);
  SamplingOptions so;
  so.max_len = 3;
  so.stop_token = 5;
  Rng rng(0);
  bool saw_truncated = false;
  for (int i = 0; i < 50; ++i) {
    const Rollout r = sample_rollout(p, Context{}, so, rng);
    EXPECT_LE(r.tokens.size(), 3u);
    EXPECT_EQ(r.truncated, r.tokens.back() != 5);
    saw_truncated |= r.truncated;
  }
  EXPECT_TRUE(saw_truncated);
}

TEST(Sampling, RejectsBadOptions) {
  const auto p = PolicyParams::zeros(4);
  Rng rng(0);
  SamplingOptions so;
  so.max_len = 0;
  EXPECT_THROW(sample_rollout(p, Context{}, so, rng), ContractViolation);
  so.max_len = 3;
  so.temperature = -1;
  EXPECT_THROW(sample_rollout(p, Context{}, so, rng), ContractViolation);
}

TEST(Checkpoint, BitExactRoundTrip) {
  const Vocab vocab = Vocab::task_vocab();
  Rng rng(77);
  auto p = random_params(static_cast<Eigen::Index>(vocab.size()), rng, 1e3);
  p.trans(0, 0) = -0.0;
  p.ctx(1, 1) = std::numeric_limits<double>::denorm_min();
  const auto path = std::filesystem::temp_directory_path() / "mulferl_ckpt_roundtrip.mfrl";
  save_checkpoint(path, vocab, p);
  const Checkpoint ck = load_checkpoint(path);
  EXPECT_TRUE(ck.vocab == vocab);
  EXPECT_EQ(std::memcmp(ck.params.trans.data(), p.trans.data(), sizeof(double) * p.trans.size()), 0);
  EXPECT_EQ(std::memcmp(ck.params.ctx.data(), p.ctx.data(), sizeof(double) * p.ctx.size()), 0);
  EXPECT_EQ(encode_checkpoint(ck.vocab, ck.params), read_file(path));
  std::filesystem::remove(path);
}

TEST(Checkpoint, HeaderLayout) {
  const Vocab vocab = small_vocab(1);
  auto p = PolicyParams::zeros(8);
  p.trans(8, 0) = 1.5;
  const std::string bytes = encode_checkpoint(vocab, p);
  const std::string header =
      "MFRL1\nV 8\n<thinking>\n</thinking>\n<feedback>\n</feedback>\n<box>\n<eos>\n<unk>\na0\n";
  ASSERT_EQ(bytes.substr(0, header.size()), header);
  EXPECT_EQ(bytes.size(), header.size() + 8 * (9 * 8 + 8 * 8));
  // trans(8, 0) is the first entry of the last row: little-endian 1.5.
  const std::size_t off = header.size() + 8 * (8 * 8);
  const unsigned char expect[8] = {0, 0, 0, 0, 0, 0, 0xf8, 0x3f};
  EXPECT_EQ(std::memcmp(bytes.data() + off, expect, 8), 0);
}

TEST(Checkpoint, RejectsCorruptInput) {
  const Vocab vocab = small_vocab(1);
  std::string bytes = encode_checkpoint(vocab, PolicyParams::zeros(8));
  EXPECT_THROW(decode_checkpoint("MFRL2" + bytes.substr(5)), IoError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), IoError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), IoError);
}

TEST(Vocab, TaskVocabInvariants) {
  const Vocab v = Vocab::task_vocab();
  EXPECT_EQ(v.size(), 235u);
  std::set<std::string> seen(v.symbols().begin(), v.symbols().end());
  EXPECT_EQ(seen.size(), v.size());
  EXPECT_TRUE(v.is_marker(v.box()));
  EXPECT_FALSE(v.is_marker(v.unk()));
  EXPECT_EQ(v.tokenize("<thinking> 7 banana"), (TokenSeq{v.thinking_open(), v.id("7"), v.unk()}));
  EXPECT_THROW(Vocab({"a", "a"}), std::invalid_argument);
  EXPECT_THROW(Vocab({"<thinking>", "x"}), std::invalid_argument);
}
