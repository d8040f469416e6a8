#include "mulferl/feedback.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdlib>
#include <exception>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "mulferl/errors.hpp"
#include "mulferl/prompts.hpp"
#include "mulferl/schema.hpp"

namespace mulferl {

void SimulatorConfig::validate(std::size_t group_size) const {
  if (subgroup_size < 1) throw ConfigError("feedback.subgroup_size", "must be >= 1");
  if (subgroup_size > group_size) throw ConfigError("feedback.subgroup_size", "must not exceed the group size K");
  if (feedback_cap < 1) throw ConfigError("feedback.cap", "must be >= 1");
  if (backend == SimulatorBackend::kRemote) {
    if (endpoint.empty()) throw ConfigError("feedback.endpoint", "required for the remote backend");
    if (endpoint.rfind("http://", 0) != 0) throw ConfigError("feedback.endpoint", "must start with http://");
    if (!(timeout_seconds > 0)) throw ConfigError("feedback.timeout_seconds", "must be > 0");
    if (max_in_flight < 1) throw ConfigError("feedback.max_in_flight", "must be >= 1");
    if (max_attempts < 1) throw ConfigError("feedback.max_attempts", "must be >= 1");
    if (backoff_seconds < 0) throw ConfigError("feedback.backoff_seconds", "must be >= 0");
  }
}

std::vector<std::vector<std::size_t>> partition_group(std::size_t k, std::size_t subgroup_size, Rng& rng) {
  if (subgroup_size < 1) throw ContractViolation("partition_group: subgroup_size must be >= 1");
  std::vector<std::size_t> order(k);
  for (std::size_t i = 0; i < k; ++i) order[i] = i;
  for (std::size_t i = k; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < k; i += subgroup_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(k, i + subgroup_size)));
  return out;
}

// ---------------------------------------------------------------- scripted

ScriptedSimulator::ScriptedSimulator(const Vocab& vocab, std::size_t feedback_cap)
    : vocab_(vocab), cap_(feedback_cap) {
  if (cap_ < 1) throw ContractViolation("feedback cap must be >= 1");
}

FeedbackText ScriptedSimulator::build(const ProblemInstance& problem, std::vector<int> wrong,
                                      bool format_issue) const {
  std::sort(wrong.begin(), wrong.end());
  wrong.erase(std::unique(wrong.begin(), wrong.end()), wrong.end());
  std::erase(wrong, problem.answer);

  FeedbackText f;
  f.source = FeedbackSource::kScripted;
  f.tokens.push_back(vocab_.id("issue"));
  std::ostringstream issue;
  if (!wrong.empty()) {
    issue << "answers";
    for (int d : wrong) {
      f.tokens.push_back(vocab_.id("wrong:" + std::to_string(d)));
      issue << ' ' << d;
    }
    issue << " are wrong";
  }
  if (format_issue) {
    f.tokens.push_back(vocab_.id("format"));
    issue << (wrong.empty() ? "" : "; ") << "response breaks the output format";
  }
  f.issue = issue.str();
  f.tokens.push_back(vocab_.id("fix"));
  f.tokens.push_back(hint(vocab_, problem));
  f.fix_steps = "the answer is congruent to " + std::to_string(problem.answer_class) + " mod 3";
  if (f.tokens.size() > cap_) {
    f.tokens.resize(cap_);
    f.truncated = true;
  }
  return f;
}

FeedbackText ScriptedSimulator::subgroup_feedback(const ProblemInstance& problem, std::span<const Rollout> subgroup) {
  if (subgroup.empty()) throw ContractViolation("subgroup_feedback: empty subgroup");
  std::vector<int> wrong;
  bool format_issue = false;
  for (const auto& r : subgroup) {
    if (r.reward != 0) throw ContractViolation("subgroup_feedback called on a rollout with reward 1");
    const auto parsed = parse_response(vocab_, r.tokens);
    if (!parsed.format_ok || parsed.answer->size() != 1) {
      format_issue = true;
      continue;
    }
    const std::string& sym = vocab_.symbol(parsed.answer->front());
    if (sym.size() == 1 && std::isdigit(static_cast<unsigned char>(sym[0])))
      wrong.push_back(sym[0] - '0');
    else
      format_issue = true;
  }
  return build(problem, std::move(wrong), format_issue);
}

FeedbackText ScriptedSimulator::merge_feedback(const ProblemInstance& problem,
                                               std::span<const FeedbackText> feedbacks) {
  if (feedbacks.empty()) throw ContractViolation("merge_feedback: nothing to merge");
  if (feedbacks.size() == 1) return feedbacks.front();
  std::vector<int> wrong;
  bool format_issue = false;
  const TokenId fmt = vocab_.id("format");
  for (const auto& f : feedbacks)
    for (TokenId t : f.tokens) {
      const std::string& sym = vocab_.symbol(t);
      if (sym.rfind("wrong:", 0) == 0) wrong.push_back(sym.back() - '0');
      if (t == fmt) format_issue = true;
    }
  auto merged = build(problem, std::move(wrong), format_issue);
  for (const auto& f : feedbacks) merged.truncated = merged.truncated || f.truncated;
  return merged;
}

// ------------------------------------------------------------------ remote

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

struct Endpoint {
  std::string host_port;
  std::string path;
};

Endpoint split_endpoint(const std::string& url) {
  const std::string rest = url.substr(std::string("http://").size());
  const auto slash = rest.find('/');
  if (slash == std::string::npos) return {rest, "/v1/chat/completions"};
  return {rest.substr(0, slash), rest.substr(slash)};
}

std::string describe_rollout(const Vocab& vocab, const ProblemInstance& problem, const Rollout& r) {
  const auto parsed = parse_response(vocab, r.tokens);
  const auto v = verify(problem, parsed);
  std::ostringstream s;
  s << vocab.render(r.tokens) << "\nVerifier: format_ok=" << (v.format_ok ? "true" : "false")
    << " answer_ok=" << (v.answer_ok ? "true" : "false") << (r.truncated ? " (truncated)" : "");
  return s.str();
}

std::string question_text(const ProblemInstance& problem) {
  return "Compute (" + std::to_string(problem.a) + " " + op_symbol(problem.op) + " " + std::to_string(problem.b) +
         ") mod 10. Answer with a single digit.";
}

}  // namespace

TokenSeq retokenize(const Vocab& vocab, const std::string& text) {
  TokenSeq out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    auto strip = [](char c) { return c == ':' || c == ',' || c == '.' || c == ';' || c == '"' || c == '(' || c == ')'; };
    std::string w = word;
    while (!w.empty() && strip(w.back())) w.pop_back();
    while (!w.empty() && strip(w.front())) w.erase(w.begin());
    std::string lower;
    for (char c : w) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    auto t = vocab.find(w);
    if (!t) t = vocab.find(lower);
    out.push_back(t && !vocab.is_marker(*t) ? *t : vocab.unk());
  }
  return out;
}

FeedbackText parse_remote_feedback(const Vocab& vocab, const std::string& content, std::size_t feedback_cap) {
  const auto open = content.find("<feedback>");
  const auto close = open == std::string::npos ? std::string::npos : content.find("</feedback>", open);
  if (open == std::string::npos || close == std::string::npos)
    throw SimulatorError("simulator reply lacks a <feedback> ... </feedback> wrapper", 1, false, content);
  const std::string body = content.substr(open + 10, close - open - 10);

  FeedbackText f;
  f.source = FeedbackSource::kRemote;
  const auto issue_at = body.find("Issue:");
  const auto fix_at = body.find("Fix steps:");
  if (fix_at != std::string::npos) {
    const auto issue_begin = issue_at != std::string::npos && issue_at < fix_at ? issue_at + 6 : 0;
    f.issue = trim(body.substr(issue_begin, fix_at - issue_begin));
    f.fix_steps = trim(body.substr(fix_at + 10));
  } else {
    f.issue = trim(issue_at != std::string::npos ? body.substr(issue_at + 6) : body);
  }
  f.tokens = retokenize(vocab, body);
  if (f.tokens.empty()) throw SimulatorError("simulator feedback is empty", 1, false, content);
  if (f.tokens.size() > feedback_cap) {
    f.tokens.resize(feedback_cap);
    f.truncated = true;
  }
  return f;
}

RemoteSimulator::RemoteSimulator(const Vocab& vocab, SimulatorConfig cfg) : vocab_(vocab), cfg_(std::move(cfg)) {
  if (!cfg_.auth_env.empty()) {
    const char* secret = std::getenv(cfg_.auth_env.c_str());
    if (!secret || !*secret)
      throw ConfigError("feedback.auth_env", "environment variable " + cfg_.auth_env + " is not set");
    bearer_ = secret;
  }
}

std::string RemoteSimulator::complete(const std::string& system, const std::string& user) const {
  const Endpoint ep = split_endpoint(cfg_.endpoint);
  nlohmann::json req = {
      {"model", cfg_.model},
      {"messages", {{{"role", "system"}, {"content", system}}, {{"role", "user"}, {"content", user}}}},
      {"max_tokens", cfg_.max_tokens},
      {"temperature", cfg_.temperature},
  };
  const std::string body = req.dump();
  httplib::Headers headers;
  if (!bearer_.empty()) headers.emplace("Authorization", "Bearer " + bearer_);

  double backoff = cfg_.backoff_seconds;
  std::string last_error;
  for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
    if (attempt > 1) {
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
      backoff *= 2;
    }
    httplib::Client cli(ep.host_port);
    const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(
        std::chrono::duration<double>(cfg_.timeout_seconds));
    cli.set_connection_timeout(timeout);
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);
    auto res = cli.Post(ep.path, headers, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200)
      throw SimulatorError("simulator returned HTTP " + std::to_string(res->status), attempt, false, res->body);
    try {
      const auto j = nlohmann::json::parse(res->body);
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw SimulatorError(std::string("malformed chat-completions reply: ") + e.what(), attempt, false, res->body);
    }
  }
  throw SimulatorError("simulator unreachable after " + std::to_string(cfg_.max_attempts) + " attempts (" +
                           last_error + ")",
                       cfg_.max_attempts, true);
}

FeedbackText RemoteSimulator::subgroup_feedback(const ProblemInstance& problem, std::span<const Rollout> subgroup) {
  if (subgroup.empty()) throw ContractViolation("subgroup_feedback: empty subgroup");
  std::ostringstream user;
  user << "Problem:\n" << question_text(problem) << "\n";
  for (std::size_t i = 0; i < subgroup.size(); ++i) {
    if (subgroup[i].reward != 0) throw ContractViolation("subgroup_feedback called on a rollout with reward 1");
    user << "\nSolution " << i + 1 << ":\n" << describe_rollout(vocab_, problem, subgroup[i]) << "\n";
  }
  return parse_remote_feedback(vocab_, complete(std::string(prompts::kFeedbackSystem), user.str()),
                               cfg_.feedback_cap);
}

FeedbackText RemoteSimulator::merge_feedback(const ProblemInstance& problem, std::span<const FeedbackText> feedbacks) {
  if (feedbacks.empty()) throw ContractViolation("merge_feedback: nothing to merge");
  std::ostringstream user;
  user << "Problem:\n" << question_text(problem) << "\n";
  for (std::size_t i = 0; i < feedbacks.size(); ++i)
    user << "\nFeedback " << i + 1 << ":\n<feedback>\nIssue:\n"
         << feedbacks[i].issue << "\n\nFix steps:\n" << feedbacks[i].fix_steps << "\n</feedback>\n";
  return parse_remote_feedback(vocab_, complete(std::string(prompts::kMergeFeedbackSystem), user.str()),
                               cfg_.feedback_cap);
}

std::unique_ptr<FeedbackSimulator> make_simulator(const Vocab& vocab, const SimulatorConfig& cfg) {
  if (cfg.backend == SimulatorBackend::kRemote) return std::make_unique<RemoteSimulator>(vocab, cfg);
  return std::make_unique<ScriptedSimulator>(vocab, cfg.feedback_cap);
}

// ------------------------------------------------------------- aggregation

AggregatedFeedback aggregate_feedback(FeedbackSimulator& sim, const ProblemInstance& problem,
                                      std::span<const Rollout> group, std::size_t subgroup_size, Rng& rng) {
  if (group.empty()) throw ContractViolation("aggregate_feedback: empty group");
  for (const auto& r : group)
    if (r.reward != 0) throw ContractViolation("aggregate_feedback requires an all-failed group");

  AggregatedFeedback out;
  out.partition = partition_group(group.size(), subgroup_size, rng);
  const std::size_t g = out.partition.size();
  std::vector<std::vector<Rollout>> members(g);
  for (std::size_t s = 0; s < g; ++s)
    for (std::size_t i : out.partition[s]) members[s].push_back(group[i]);

  std::vector<std::optional<FeedbackText>> results(g);
  std::vector<std::exception_ptr> errors(g);
  auto work = [&](std::size_t s) {
    try {
      results[s] = sim.subgroup_feedback(problem, members[s]);
    } catch (...) {
      errors[s] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(g, std::max<std::size_t>(1, sim.max_in_flight()));
  if (workers <= 1) {
    for (std::size_t s = 0; s < g; ++s) work(s);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t s; (s = next.fetch_add(1)) < g;) work(s);
      });
    for (auto& t : pool) t.join();
  }
  for (std::size_t s = 0; s < g; ++s)
    if (errors[s]) std::rethrow_exception(errors[s]);
  out.subgroup_calls = g;

  std::vector<FeedbackText> parts;
  parts.reserve(g);
  for (auto& r : results) parts.push_back(std::move(*r));
  if (g == 1) {
    out.feedback = std::move(parts.front());
  } else {
    out.feedback = sim.merge_feedback(problem, parts);
    out.merge_calls = 1;
  }
  return out;
}

}  // namespace mulferl
