#include "mulferl/loop.hpp"

#include <atomic>
#include <chrono>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "mulferl/checkpoint.hpp"
#include "mulferl/errors.hpp"

namespace mulferl {

namespace {

constexpr std::uint64_t kBatchTag = 0xBA7C4;
constexpr std::uint64_t kEvalTag = 0xE7A1;
constexpr std::uint64_t kInferTag = 0x1F3E;

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& f) {
  workers = std::min(n, std::max<std::size_t>(1, workers));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          f(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kMulFeRL: return "mulferl";
    case TrainMode::kGrpoBaseline: return "grpo-baseline";
    case TrainMode::kNoDpo: return "no-dpo";
    case TrainMode::kNoInjection: return "no-injection";
  }
  return "unknown";
}

std::optional<TrainMode> parse_train_mode(std::string_view s) {
  for (TrainMode m : {TrainMode::kMulFeRL, TrainMode::kGrpoBaseline, TrainMode::kNoDpo, TrainMode::kNoInjection})
    if (s == to_string(m)) return m;
  return std::nullopt;
}

void TrainConfig::validate() const {
  if (group_size < 2) throw ConfigError("group_size", "must be >= 2");
  if (max_turns < 1) throw ConfigError("max_turns", "must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (micro_batch < 1 || batch_size % micro_batch != 0)
    throw ConfigError("micro_batch", "must be >= 1 and divide batch_size");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate", "must be > 0");
  if (!(temperature > 0) || !std::isfinite(temperature)) throw ConfigError("temperature", "must be > 0");
  if (prompt_cap < 1) throw ConfigError("prompt_cap", "must be >= 1");
  if (response_cap < 2) throw ConfigError("response_cap", "must be >= 2");
  if (feedback.feedback_cap + 3 >= response_cap)
    throw ConfigError("feedback.cap", "injected prefix must leave room in response_cap");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1)) throw ConfigError("optimizer.beta1", "must lie in [0, 1)");
  if (!(adam_beta2 >= 0 && adam_beta2 < 1)) throw ConfigError("optimizer.beta2", "must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("optimizer.eps", "must be > 0");
  if (workers < 1) throw ConfigError("workers", "must be >= 1");
  grpo.validate();
  dpo.validate();
  feedback.validate(group_size);
}

// ----------------------------------------------------------- state machine

PromptOutcome run_prompt(const ProblemInstance& problem, const PolicyParams& params, const PolicyParams& old,
                         const PolicyParams& ref, const TrainConfig& cfg, const PromptDeps& deps, Rng& rng) {
  if (problem.prompt_tokens.size() > cfg.prompt_cap) throw ContractViolation("prompt exceeds prompt_cap");
  PromptOutcome out;
  out.loss_report = LossReport::skip(params.vocab_size());
  TurnState& st = out.final_state;
  st.ctx = initial_context(problem);

  const SamplingOptions so{cfg.response_cap, cfg.temperature, false, deps.vocab.eos()};
  const std::size_t turn_limit = cfg.mode == TrainMode::kGrpoBaseline ? 1 : cfg.max_turns;

  for (st.t = 0;; ++st.t) {
    st.group.clear();
    std::vector<int> rewards;
    for (std::size_t i = 0; i < cfg.group_size; ++i) {
      Rollout r = sample_rollout(old, st.ctx, st.forced_prefix, so, rng);
      r.reward = deps.reward ? deps.reward(problem, r, st.t, i) : score(deps.vocab, problem, r.tokens).reward;
      rewards.push_back(r.reward);
      st.group.push_back(std::move(r));
    }
    st.pattern = classify_pattern(rewards);
    out.pattern_trace.push_back(st.pattern);
    out.turns_used = st.t + 1;
    if (st.t == 0) {
      double s = 0;
      for (int r : rewards) s += r;
      out.turn0_reward_mean = s / static_cast<double>(rewards.size());
    }

    if (st.pattern != GroupPattern::kAllFail) {
      const bool dpo_disabled = st.pattern == GroupPattern::kAllPos && cfg.mode == TrainMode::kNoDpo;
      if (!dpo_disabled) {
        BranchRecord rec{st.pattern, st.t, st.group, {}, &st.ctx};
        if (st.prev_group) rec.prev_group = *st.prev_group;
        out.loss_report = per_prompt_loss(rec, params, ref, cfg.grpo, cfg.dpo);
      }
      return out;
    }
    if (st.t + 1 >= turn_limit) return out;

    AggregatedFeedback agg;
    try {
      agg = aggregate_feedback(deps.sim, problem, st.group, cfg.feedback.subgroup_size, rng);
    } catch (const SimulatorError& e) {
      out.simulator_failed = true;
      out.diagnostic = std::string("feedback unavailable, prompt skipped: ") + e.what();
      return out;
    }
    out.simulator_calls += agg.subgroup_calls;
    out.merge_calls += agg.merge_calls;

    RegenerationContext regen = cfg.mode == TrainMode::kNoInjection
                                    ? build_appended_context(problem, agg.feedback, cfg.feedback.feedback_cap)
                                    : build_regeneration_context(deps.vocab, problem, agg.feedback,
                                                                 cfg.feedback.feedback_cap);
    if (regen.truncated) ++out.feedback_truncations;
    st.feedback_history.push_back(std::move(agg.feedback));
    st.prev_group = std::move(st.group);
    st.group.clear();
    st.ctx = std::move(regen.ctx);
    st.forced_prefix = std::move(regen.forced_prefix);
  }
}

// --------------------------------------------------------------- optimizer

void apply_update(PolicyParams& params, const Gradient& grad, const TrainConfig& cfg, OptimizerState& state) {
  const double lr = cfg.learning_rate;
  if (cfg.optimizer == OptimizerKind::kSgd) {
    params.trans -= lr * grad.trans;
    params.ctx -= lr * grad.ctx;
    return;
  }
  ++state.t;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  auto step = [&](RowMatrix<double>& p, const RowMatrix<double>& g, RowMatrix<double>& m, RowMatrix<double>& v) {
    m = b1 * m + (1.0 - b1) * g;
    v.array() = b2 * v.array() + (1.0 - b2) * g.array().square();
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.adam_eps);
  };
  step(params.trans, grad.trans, state.m.trans, state.v.trans);
  step(params.ctx, grad.ctx, state.m.ctx, state.v.ctx);
}

// -------------------------------------------------------------------- step

std::string StepMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["branches"] = {{"grpo", grpo}, {"dpo", dpo}, {"skip_allpos", skip_allpos}, {"skip_allfail", skip_allfail}};
  j["loss_mean"] = {{"grpo", grpo_loss_mean}, {"dpo", dpo_loss_mean}};
  j["regenerations"] = regenerations;
  j["simulator_calls"] = simulator_calls;
  j["merge_calls"] = merge_calls;
  j["simulator_failures"] = simulator_failures;
  j["feedback_truncations"] = feedback_truncations;
  j["reward_mean_turn0"] = reward_mean_turn0;
  j["updated"] = updated;
  if (val_solve_rate) j["val_solve_rate"] = *val_solve_rate;
  return j.dump();
}

StepMetrics run_step(std::span<const ProblemInstance> batch, PolicyParams& params, const PolicyParams& ref,
                     OptimizerState& opt, const TrainConfig& cfg, const PromptDeps& deps, std::uint64_t step) {
  const auto t_start = std::chrono::steady_clock::now();
  const PolicyParams old = params;  // behaviour policy for this step
  std::vector<PromptOutcome> outs(batch.size());
  parallel_for(batch.size(), cfg.workers, [&](std::size_t slot) {
    Rng rng(derive_seed(cfg.seed, {step, slot}));
    outs[slot] = run_prompt(batch[slot], old, old, ref, cfg, deps, rng);
  });

  StepMetrics m;
  m.step = step;
  m.regenerations.assign(cfg.max_turns > 1 ? cfg.max_turns - 1 : 0, 0);
  auto total = Gradient::zeros_like(params);
  std::size_t contributing = 0;
  for (std::size_t mb = 0; mb < outs.size(); mb += cfg.micro_batch) {
    auto partial = Gradient::zeros_like(params);
    for (std::size_t slot = mb; slot < std::min(outs.size(), mb + cfg.micro_batch); ++slot) {
      const PromptOutcome& o = outs[slot];
      const LossReport& rep = o.loss_report;
      switch (rep.branch) {
        case Branch::kGrpo:
          ++m.grpo;
          m.grpo_loss_mean += rep.loss;
          break;
        case Branch::kDpo:
          ++m.dpo;
          m.dpo_loss_mean += rep.loss;
          break;
        case Branch::kSkip:
          (o.pattern_trace.back() == GroupPattern::kAllPos ? m.skip_allpos : m.skip_allfail)++;
          break;
      }
      if (rep.branch != Branch::kSkip) {
        partial += rep.gradient;
        ++contributing;
      }
      for (std::size_t t = 1; t < o.turns_used; ++t) ++m.regenerations[t - 1];
      m.simulator_calls += o.simulator_calls;
      m.merge_calls += o.merge_calls;
      m.simulator_failures += o.simulator_failed;
      m.feedback_truncations += o.feedback_truncations;
      m.reward_mean_turn0 += o.turn0_reward_mean;
    }
    total += partial;
  }
  if (m.grpo) m.grpo_loss_mean /= static_cast<double>(m.grpo);
  if (m.dpo) m.dpo_loss_mean /= static_cast<double>(m.dpo);
  if (!outs.empty()) m.reward_mean_turn0 /= static_cast<double>(outs.size());

  if (contributing > 0) {
    total *= 1.0 / static_cast<double>(contributing);
    apply_update(params, total, cfg, opt);
    m.updated = true;
  }
  m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return m;
}

// -------------------------------------------------------------- evaluation

EvalReport evaluate(const Vocab& vocab, const PolicyParams& params, std::span<const ProblemInstance> problems,
                    std::size_t response_cap, std::uint64_t seed) {
  if (problems.empty()) throw std::invalid_argument("evaluate: empty problem set");
  EvalReport rep;
  const SamplingOptions so{response_cap, 1.0, true, vocab.eos()};
  for (std::size_t i = 0; i < problems.size(); ++i) {
    const auto& p = problems[i];
    Rng rng(derive_seed(seed, {kEvalTag, i}));
    const Rollout r = sample_rollout(params, initial_context(p), so, rng);
    const auto v = score(vocab, p, r.tokens);
    ++rep.n;
    ++rep.class_total[p.answer_class];
    if (!v.format_ok) ++rep.format_failures;
    if (v.reward) {
      ++rep.solved;
      ++rep.class_solved[p.answer_class];
    }
  }
  return rep;
}

InferResult infer_multiturn(const Vocab& vocab, const ProblemInstance& problem, const PolicyParams& params,
                            FeedbackSimulator& sim, const InferOptions& opts) {
  if (opts.max_turns < 1) throw std::invalid_argument("infer_multiturn: max_turns must be >= 1");
  InferResult res;
  Rng rng(derive_seed(opts.seed, {kInferTag, fnv1a(problem.id)}));
  const SamplingOptions so{opts.response_cap, 1.0, true, vocab.eos()};
  Context ctx = initial_context(problem);
  TokenSeq forced;
  for (std::size_t t = 0; t < opts.max_turns; ++t) {
    InferTurn turn;
    turn.rollout = sample_rollout(params, ctx, forced, so, rng);
    const auto parsed = parse_response(vocab, turn.rollout.tokens);
    turn.outcome = verify(problem, parsed);
    turn.rollout.reward = turn.outcome.reward;
    res.turns_used = t + 1;
    res.answer = parsed.answer;
    if (turn.outcome.reward) {
      res.verified = true;
      res.trace.push_back(std::move(turn));
      break;
    }
    if (t + 1 < opts.max_turns) {
      FeedbackText fb = sim.subgroup_feedback(problem, std::span<const Rollout>(&turn.rollout, 1));
      ++res.simulator_calls;
      RegenerationContext regen = opts.inject ? build_regeneration_context(vocab, problem, fb, opts.feedback_cap)
                                              : build_appended_context(problem, fb, opts.feedback_cap);
      ctx = std::move(regen.ctx);
      forced = std::move(regen.forced_prefix);
      turn.feedback = std::move(fb);
    }
    res.trace.push_back(std::move(turn));
  }
  return res;
}

// ------------------------------------------------------------------- train

namespace {

std::string checkpoint_name(std::uint64_t step) {
  std::ostringstream s;
  s << "step_" << std::setw(6) << std::setfill('0') << step << ".mfrl";
  return s.str();
}

// Keeps only the records with step <= last_step.
void truncate_stream(const std::filesystem::path& path, std::uint64_t last_step) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      if (nlohmann::json::parse(line).at("step").get<std::uint64_t>() <= last_step) kept += line + "\n";
    } catch (const nlohmann::json::exception&) {
      break;  // torn final line from a crash
    }
  }
  in.close();
  write_file_atomic(path, kept);
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Vocab& vocab, const DatasetSplit& data, const PolicyParams& init,
                  FeedbackSimulator& sim, const TrainIo& io) {
  cfg.validate();
  if (data.train.empty()) throw std::invalid_argument("train: empty training split");
  if (init.vocab_size() != static_cast<Eigen::Index>(vocab.size()))
    throw ContractViolation("train: initial params do not match the vocabulary");

  TrainResult res;
  PolicyParams params = init, ref = init;
  OptimizerState opt = OptimizerState::zeros(init.vocab_size());
  std::uint64_t start = 0;

  const bool persist = !io.out_dir.empty();
  const auto metrics_path = io.out_dir / "metrics.jsonl";
  const auto timing_path = io.out_dir / "timing.jsonl";
  const auto ckpt_dir = io.out_dir / "checkpoints";
  const auto state_path = io.out_dir / "trainer_state.bin";

  if (persist) {
    std::filesystem::create_directories(ckpt_dir);
    if (io.resume && std::filesystem::exists(state_path)) {
      TrainerState s = load_trainer_state(state_path);
      if (s.params.vocab_size() != init.vocab_size()) throw IoError("trainer state does not match the vocabulary");
      params = std::move(s.params);
      ref = std::move(s.ref);
      opt = OptimizerState{std::move(s.m), std::move(s.v), s.adam_t};
      start = s.step;
      truncate_stream(metrics_path, start);
      truncate_stream(timing_path, start);
    } else {
      write_file_atomic(metrics_path, "");
      write_file_atomic(timing_path, "");
      save_checkpoint(ckpt_dir / checkpoint_name(0), vocab, params);
    }
  }

  std::ofstream metrics_out, timing_out;
  if (persist) {
    metrics_out.open(metrics_path, std::ios::app);
    timing_out.open(timing_path, std::ios::app);
    if (!metrics_out || !timing_out) throw IoError("cannot open metrics streams in " + io.out_dir.string());
  }
  std::string metrics_buf, timing_buf;
  auto flush = [&] {
    if (!persist) return;
    metrics_out << metrics_buf;
    timing_out << timing_buf;
    metrics_out.flush();
    timing_out.flush();
    metrics_buf.clear();
    timing_buf.clear();
    if (!metrics_out || !timing_out) throw IoError("failed writing metrics streams");
  };
  auto save_state = [&](std::uint64_t step) {
    flush();
    save_checkpoint(ckpt_dir / checkpoint_name(step), vocab, params);
    save_trainer_state(state_path, TrainerState{step, opt.t, params, ref, opt.m, opt.v});
  };

  const PromptDeps deps{vocab, sim, {}};
  const std::uint64_t eval_seed = derive_seed(cfg.seed, {kEvalTag});
  std::vector<ProblemInstance> batch(cfg.batch_size);
  for (std::uint64_t step = start + 1; step <= cfg.total_steps; ++step) {
    Rng batch_rng(derive_seed(cfg.seed, {step, kBatchTag}));
    for (auto& p : batch) p = data.train[batch_rng.below(data.train.size())];

    StepMetrics m;
    try {
      m = run_step(batch, params, ref, opt, cfg, deps, step);
    } catch (...) {
      flush();
      throw;
    }
    if (cfg.ref_refresh_interval && step % cfg.ref_refresh_interval == 0) ref = params;
    const bool last = step == cfg.total_steps;
    if (!data.validation.empty() && (last || (io.eval_interval && step % io.eval_interval == 0)))
      m.val_solve_rate = evaluate(vocab, params, data.validation, cfg.response_cap, eval_seed).solve_rate();

    metrics_buf += m.to_json() + "\n";
    nlohmann::ordered_json tj = {{"step", step}, {"wall_seconds", m.wall_seconds}};
    timing_buf += tj.dump() + "\n";
    if (io.metrics_flush_interval <= 1 || step % io.metrics_flush_interval == 0) flush();
    if (persist && (last || (io.checkpoint_interval && step % io.checkpoint_interval == 0))) save_state(step);
    if (m.val_solve_rate) res.final_val_solve_rate = m.val_solve_rate;
    res.metrics.push_back(std::move(m));
    res.steps_completed = step;
  }
  if (res.steps_completed == 0) res.steps_completed = start;
  flush();

  if (persist) {
    save_checkpoint(io.out_dir / "final.mfrl", vocab, params);
    nlohmann::ordered_json summary = {
        {"mode", to_string(cfg.mode)},
        {"seed", cfg.seed},
        {"steps_completed", res.steps_completed},
    };
    if (res.final_val_solve_rate) summary["final_val_solve_rate"] = *res.final_val_solve_rate;
    write_file_atomic(io.out_dir / "summary.json", summary.dump(2) + "\n");
  }
  res.params = std::move(params);
  return res;
}

}  // namespace mulferl
