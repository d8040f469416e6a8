#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <thread>

#include "mulferl/env.hpp"
#include "mulferl/errors.hpp"
#include "mulferl/feedback.hpp"
#include "mulferl/prompts.hpp"
#include "mulferl/schema.hpp"

// After Eigen: <resolv.h> defines _res.
#include <httplib.h>

using namespace mulferl;

namespace {

const Vocab& V() {
  static const Vocab v = Vocab::task_vocab();
  return v;
}

Rollout answered(int digit, int reward = 0) {
  Rollout r;
  r.tokens = render_response(V(), {}, {}, TokenSeq{V().id(std::to_string(digit))});
  r.token_logprobs.assign(r.tokens.size(), 0.0);
  r.loss_mask.assign(r.tokens.size(), true);
  r.reward = reward;
  return r;
}

Rollout garbage() {
  Rollout r;
  r.tokens = {V().id("step"), V().eos()};
  r.token_logprobs.assign(2, 0.0);
  r.loss_mask.assign(2, true);
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST(Partition, SizesAndCoverage) {
  Rng rng(1);
  auto p = partition_group(8, 2, rng);
  ASSERT_EQ(p.size(), 4u);
  for (auto& s : p) EXPECT_EQ(s.size(), 2u);
  p = partition_group(5, 2, rng);
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[0].size(), 2u);
  EXPECT_EQ(p[1].size(), 2u);
  EXPECT_EQ(p[2].size(), 1u);
  p = partition_group(1, 2, rng);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0], std::vector<std::size_t>{0});
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t k = 1 + rng.below(12), s = 1 + rng.below(k);
    const auto q = partition_group(k, s, rng);
    EXPECT_EQ(q.size(), (k + s - 1) / s);
    std::multiset<std::size_t> seen;
    for (auto& g : q) seen.insert(g.begin(), g.end());
    EXPECT_EQ(seen.size(), k);
    for (std::size_t i = 0; i < k; ++i) EXPECT_EQ(seen.count(i), 1u);
  }
  EXPECT_THROW(partition_group(4, 0, rng), ContractViolation);
}

TEST(Scripted, HintForClassOne) {
  ScriptedSimulator sim(V(), 16);
  const auto prob = make_problem(V(), "p", 3, Op::kAdd, 4);  // answer 7, class 1
  const std::vector<Rollout> sub = {answered(2), answered(5)};
  const auto f = sim.subgroup_feedback(prob, sub);
  EXPECT_EQ(f.tokens, V().tokenize("issue wrong:2 wrong:5 fix H1"));
  EXPECT_EQ(f.source, FeedbackSource::kScripted);
  EXPECT_FALSE(f.issue.empty());
  EXPECT_FALSE(f.fix_steps.empty());
  const auto g = sim.subgroup_feedback(prob, std::vector<Rollout>{garbage(), answered(2)});
  EXPECT_EQ(g.tokens, V().tokenize("issue wrong:2 format fix H1"));
}

TEST(Scripted, RejectsPositiveRollout) {
  ScriptedSimulator sim(V(), 16);
  const auto prob = make_problem(V(), "p", 3, Op::kAdd, 4);
  EXPECT_THROW(sim.subgroup_feedback(prob, std::vector<Rollout>{answered(7, 1)}), ContractViolation);
  EXPECT_THROW(sim.merge_feedback(prob, std::vector<FeedbackText>{}), ContractViolation);
}

TEST(Scripted, NeverLeaksTheAnswer) {
  ScriptedSimulator sim(V(), 16);
  Rng rng(99);
  for (int i = 0; i < 10000; ++i) {
    const auto prob = make_problem(V(), "p", static_cast<int>(rng.below(10)), rng.below(2) ? Op::kMul : Op::kAdd,
                                   static_cast<int>(rng.below(10)));
    std::vector<Rollout> sub;
    for (int j = 0; j < 2; ++j) {
      // Include the correct digit with reward 0 (as if the format failed elsewhere) to stress the filter.
      sub.push_back(rng.below(4) ? answered(static_cast<int>(rng.below(10))) : garbage());
      sub.back().reward = 0;
    }
    const auto f = sim.subgroup_feedback(prob, sub);
    for (TokenId t : f.tokens) {
      EXPECT_NE(t, prob.answer_token);
      EXPECT_NE(V().symbol(t), "wrong:" + std::to_string(prob.answer));
    }
    EXPECT_LE(f.tokens.size(), 16u);
  }
}

TEST(Scripted, MergeIdentityAndDedup) {
  ScriptedSimulator sim(V(), 16);
  const auto prob = make_problem(V(), "p", 3, Op::kAdd, 4);
  const auto f = sim.subgroup_feedback(prob, std::vector<Rollout>{answered(1), answered(4)});
  const auto one = sim.merge_feedback(prob, std::vector<FeedbackText>{f});
  EXPECT_EQ(one.tokens, f.tokens);
  EXPECT_EQ(one.issue, f.issue);
  const auto four = sim.merge_feedback(prob, std::vector<FeedbackText>(4, f));
  EXPECT_EQ(four.tokens, f.tokens);
  const auto g = sim.subgroup_feedback(prob, std::vector<Rollout>{answered(4), answered(9)});
  const auto both = sim.merge_feedback(prob, std::vector<FeedbackText>{f, g});
  EXPECT_EQ(both.tokens, V().tokenize("issue wrong:1 wrong:4 wrong:9 fix H1"));
}

TEST(Scripted, CapTruncates) {
  ScriptedSimulator sim(V(), 3);
  const auto prob = make_problem(V(), "p", 3, Op::kAdd, 4);
  const auto f = sim.subgroup_feedback(prob, std::vector<Rollout>{answered(1), answered(4)});
  EXPECT_EQ(f.tokens.size(), 3u);
  EXPECT_TRUE(f.truncated);
}

TEST(Aggregate, DeterministicAndCounted) {
  ScriptedSimulator sim(V(), 16);
  const auto prob = make_problem(V(), "p", 3, Op::kAdd, 4);
  std::vector<Rollout> group;
  for (int d : {0, 1, 2, 3, 4, 5, 6, 8}) group.push_back(answered(d));
  Rng a(5), b(5);
  const auto x = aggregate_feedback(sim, prob, group, 2, a);
  const auto y = aggregate_feedback(sim, prob, group, 2, b);
  EXPECT_EQ(x.feedback.tokens, y.feedback.tokens);
  EXPECT_EQ(x.partition, y.partition);
  EXPECT_EQ(x.subgroup_calls, 4u);
  EXPECT_EQ(x.merge_calls, 1u);
  Rng c(5);
  const auto z = aggregate_feedback(sim, prob, group, 8, c);
  EXPECT_EQ(z.subgroup_calls, 1u);
  EXPECT_EQ(z.merge_calls, 0u);
  EXPECT_EQ(z.feedback.tokens, x.feedback.tokens);  // union over everything either way
  group[3].reward = 1;
  Rng d(5);
  EXPECT_THROW(aggregate_feedback(sim, prob, group, 2, d), ContractViolation);
}

TEST(Retokenize, WhitelistMapping) {
  EXPECT_EQ(retokenize(V(), "The answer is in class H1, check step."),
            (TokenSeq{V().unk(), V().unk(), V().unk(), V().unk(), V().unk(), V().id("H1"), V().id("check"),
                      V().id("step")}));
  EXPECT_EQ(retokenize(V(), "Issue: FIX <box> 7"), (TokenSeq{V().id("issue"), V().id("fix"), V().unk(), V().id("7")}));
}

TEST(RemoteParse, WrapperRequired) {
  try {
    parse_remote_feedback(V(), "Issue: no wrapper here", 16);
    FAIL();
  } catch (const SimulatorError& e) {
    EXPECT_FALSE(e.retriable());
    EXPECT_EQ(e.payload(), "Issue: no wrapper here");
  }
  const auto f = parse_remote_feedback(V(), "<feedback>\nIssue:\nwrong sign\n\nFix steps:\ncheck H2\n</feedback>", 16);
  EXPECT_EQ(f.issue, "wrong sign");
  EXPECT_EQ(f.fix_steps, "check H2");
  EXPECT_EQ(f.source, FeedbackSource::kRemote);
  EXPECT_EQ(f.tokens, (TokenSeq{V().id("issue"), V().unk(), V().unk(), V().id("fix"), V().unk(), V().id("check"),
                                V().id("H2")}));
}

namespace {

// Minimal chat-completions endpoint on a background thread.
class FakeEndpoint {
 public:
  explicit FakeEndpoint(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server_.Post("/v1/chat/completions", std::move(handler));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeEndpoint() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

std::string reply(const std::string& content) {
  return nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}}.dump();
}

SimulatorConfig remote_config(const std::string& url) {
  SimulatorConfig c;
  c.backend = SimulatorBackend::kRemote;
  c.endpoint = url;
  c.auth_env = "MULFERL_TEST_SIM_TOKEN";
  c.timeout_seconds = 5;
  c.backoff_seconds = 0.01;
  return c;
}

}  // namespace

TEST(Remote, ProtocolAuthAndTemplates) {
  ::setenv("MULFERL_TEST_SIM_TOKEN", "s3cret", 1);
  std::mutex mu;
  std::vector<nlohmann::json> seen;
  std::vector<std::string> auth;
  FakeEndpoint ep([&](const httplib::Request& req, httplib::Response& res) {
    std::lock_guard lock(mu);
    seen.push_back(nlohmann::json::parse(req.body));
    auth.push_back(req.get_header_value("Authorization"));
    res.set_content(reply("<feedback>\nIssue:\ncarry dropped\n\nFix steps:\ncheck H1\n</feedback>"),
                    "application/json");
  });
  auto sim = make_simulator(V(), remote_config(ep.url()));
  const auto prob = make_problem(V(), "p", 3, Op::kAdd, 4);
  std::vector<Rollout> group;
  for (int d : {0, 1, 2, 3}) group.push_back(answered(d));
  Rng rng(1);
  const auto agg = aggregate_feedback(*sim, prob, group, 2, rng);
  EXPECT_EQ(agg.subgroup_calls, 2u);
  EXPECT_EQ(agg.merge_calls, 1u);
  ASSERT_EQ(seen.size(), 3u);
  for (const auto& a : auth) EXPECT_EQ(a, "Bearer s3cret");
  std::size_t feedback_prompts = 0, merge_prompts = 0;
  for (const auto& j : seen) {
    EXPECT_EQ(j.at("model"), "gpt-4o-mini");
    EXPECT_EQ(j.at("max_tokens"), 1024);
    EXPECT_EQ(j.at("temperature"), 0.0);
    ASSERT_EQ(j.at("messages").size(), 2u);
    EXPECT_EQ(j["messages"][0]["role"], "system");
    EXPECT_EQ(j["messages"][1]["role"], "user");
    const std::string sys = j["messages"][0]["content"];
    feedback_prompts += sys == prompts::kFeedbackSystem;
    merge_prompts += sys == prompts::kMergeFeedbackSystem;
  }
  EXPECT_EQ(feedback_prompts, 2u);
  EXPECT_EQ(merge_prompts, 1u);
  EXPECT_EQ(agg.feedback.fix_steps, "check H1");
  ::unsetenv("MULFERL_TEST_SIM_TOKEN");
}

TEST(Remote, RetriesServerErrorsThenSucceeds) {
  ::setenv("MULFERL_TEST_SIM_TOKEN", "x", 1);
  std::atomic<int> calls{0};
  FakeEndpoint ep([&](const httplib::Request&, httplib::Response& res) {
    if (calls.fetch_add(1) < 2) {
      res.status = 503;
      return;
    }
    res.set_content(reply("<feedback>Issue: x Fix steps: H0</feedback>"), "application/json");
  });
  RemoteSimulator sim(V(), remote_config(ep.url()));
  EXPECT_NO_THROW(sim.complete("s", "u"));
  EXPECT_EQ(calls.load(), 3);
  ::unsetenv("MULFERL_TEST_SIM_TOKEN");
}

TEST(Remote, MissingWrapperCarriesPayload) {
  ::setenv("MULFERL_TEST_SIM_TOKEN", "x", 1);
  FakeEndpoint ep([&](const httplib::Request&, httplib::Response& res) {
    res.set_content(reply("Issue: forgot the tags"), "application/json");
  });
  RemoteSimulator sim(V(), remote_config(ep.url()));
  const auto prob = make_problem(V(), "p", 3, Op::kAdd, 4);
  FeedbackText f;
  f.tokens = {V().id("fix")};
  try {
    sim.merge_feedback(prob, std::vector<FeedbackText>{f, f});
    FAIL();
  } catch (const SimulatorError& e) {
    EXPECT_FALSE(e.retriable());
    EXPECT_EQ(e.payload(), "Issue: forgot the tags");
  }
  ::unsetenv("MULFERL_TEST_SIM_TOKEN");
}

TEST(Remote, UnreachableIsRetriable) {
  ::setenv("MULFERL_TEST_SIM_TOKEN", "x", 1);
  std::string url;
  {
    FakeEndpoint ep([](const httplib::Request&, httplib::Response&) {});
    url = ep.url();
  }  // port now closed
  auto cfg = remote_config(url);
  cfg.timeout_seconds = 0.5;
  RemoteSimulator sim(V(), cfg);
  try {
    sim.complete("s", "u");
    FAIL();
  } catch (const SimulatorError& e) {
    EXPECT_TRUE(e.retriable());
    EXPECT_EQ(e.attempts(), 3);
  }
  ::unsetenv("MULFERL_TEST_SIM_TOKEN");
}

TEST(Remote, SecretComesOnlyFromEnvironment) {
  ::unsetenv("MULFERL_TEST_SIM_TOKEN");
  EXPECT_THROW(RemoteSimulator(V(), remote_config("http://127.0.0.1:1/v1/chat/completions")), ConfigError);
}

TEST(Config, SimulatorValidation) {
  SimulatorConfig c;
  EXPECT_NO_THROW(c.validate(8));
  c.subgroup_size = 9;
  EXPECT_THROW(c.validate(8), ConfigError);
  c.subgroup_size = 0;
  EXPECT_THROW(c.validate(8), ConfigError);
  c = SimulatorConfig{};
  c.backend = SimulatorBackend::kRemote;
  EXPECT_THROW(c.validate(8), ConfigError);  // no endpoint
  c.endpoint = "https://example.invalid/v1";
  EXPECT_THROW(c.validate(8), ConfigError);
}

TEST(Prompts, AssetsEmbeddedVerbatim) {
  const std::string dir = std::string(MULFERL_SOURCE_DIR) + "/assets/prompts/";
  auto strip = [](std::string s) {
    if (!s.empty() && s.back() == '\n') s.pop_back();
    return s;
  };
  EXPECT_EQ(strip(slurp(dir + "training_system.txt")), prompts::kTrainingSystem);
  EXPECT_EQ(strip(slurp(dir + "feedback_system.txt")), prompts::kFeedbackSystem);
  EXPECT_EQ(strip(slurp(dir + "merge_feedback_system.txt")), prompts::kMergeFeedbackSystem);
  EXPECT_EQ(strip(slurp(dir + "feedback_injection_regen.txt")), prompts::kFeedbackInjectionRegen);
  EXPECT_EQ(prompts::fill("Q: {question} F: {feedback} {{x}}", "1+1", "f"), "Q: 1+1 F: f {x}");
}
