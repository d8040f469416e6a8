// mulferl: train / eval / infer-multiturn / report.
//
// Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 simulator failure
// during inference.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>

#include "mulferl/checkpoint.hpp"
#include "mulferl/config.hpp"
#include "mulferl/errors.hpp"
#include "mulferl/loop.hpp"
#include "mulferl/report.hpp"

namespace fs = std::filesystem;
using namespace mulferl;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitSimulator = 4;

class DirLock {
 public:
  explicit DirLock(const fs::path& dir) {
    const auto path = dir / ".lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw IoError("another trainer holds " + path.string());
    }
  }
  ~DirLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  int fd_;
};

Checkpoint load_compatible(const fs::path& path, const Vocab& vocab) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.vocab == vocab)) throw IoError("checkpoint vocabulary does not match the task vocabulary");
  return ck;
}

std::vector<ProblemInstance> select_split(const DatasetSplit& d, const std::string& name) {
  if (name == "train") return d.train;
  if (name == "validation") return d.validation;
  if (name == "test") return d.test;
  throw ConfigError("--split", "expected train, validation or test");
}

RunConfig config_or_defaults(const std::string& path) {
  if (!path.empty()) return load_run_config(path);
  nlohmann::json doc = {{"learning_rate", TrainConfig{}.learning_rate}};
  apply_env_overrides(doc, environment_snapshot());
  return parse_run_config(doc);
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& mode,
              const std::string& out, const std::string& init_ckpt, bool resume) {
  RunConfig rc = load_run_config(config_path);
  if (seed) rc.train.seed = *seed;
  if (!mode.empty()) {
    auto m = parse_train_mode(mode);
    if (!m) throw ConfigError("--mode", "expected mulferl, grpo-baseline, no-dpo or no-injection");
    rc.train.mode = *m;
  }
  if (!out.empty()) rc.io.out_dir = out;
  if (rc.io.out_dir.empty()) throw ConfigError("output.dir", "required (or pass --out)");
  rc.io.resume = resume;
  rc.train.validate();

  fs::create_directories(rc.io.out_dir);
  DirLock lock(rc.io.out_dir);

  const Vocab vocab = Vocab::task_vocab();
  const DatasetSplit data = generate_dataset(vocab, rc.dataset_size, rc.dataset_seed);
  const fs::path ds = rc.io.out_dir / "dataset";
  fs::create_directories(ds);
  write_jsonl(ds / "train.jsonl", vocab, data.train);
  write_jsonl(ds / "validation.jsonl", vocab, data.validation);
  write_jsonl(ds / "test.jsonl", vocab, data.test);
  write_file_atomic(rc.io.out_dir / "config.json", to_json(rc).dump(2) + "\n");

  const PolicyParams init = init_ckpt.empty() ? make_base_policy(vocab, rc.prior) : load_compatible(init_ckpt, vocab).params;
  auto sim = make_simulator(vocab, rc.train.feedback);
  const TrainResult res = train(rc.train, vocab, data, init, *sim, rc.io);
  std::cout << "trained " << res.steps_completed << " steps";
  if (res.final_val_solve_rate) std::cout << ", validation solve-rate " << *res.final_val_solve_rate;
  std::cout << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path, const std::string& split,
             const std::string& dataset_file, std::uint64_t seed, const std::string& out) {
  const RunConfig rc = config_or_defaults(config_path);
  const Vocab vocab = Vocab::task_vocab();
  const Checkpoint ck = load_compatible(checkpoint, vocab);
  std::vector<ProblemInstance> problems = dataset_file.empty()
                                              ? select_split(generate_dataset(vocab, rc.dataset_size, rc.dataset_seed), split)
                                              : read_jsonl(dataset_file, vocab);
  if (problems.empty()) throw ConfigError(dataset_file.empty() ? "--split" : "--dataset", "no problems to evaluate");
  const EvalReport rep = evaluate(vocab, ck.params, problems, rc.train.response_cap, seed);

  nlohmann::ordered_json j;
  j["checkpoint"] = checkpoint;
  j["problems"] = rep.n;
  j["solved"] = rep.solved;
  j["solve_rate"] = rep.solve_rate();
  j["format_failures"] = rep.format_failures;
  for (int k = 0; k < 3; ++k)
    j["per_class"].push_back({{"class", k},
                              {"problems", rep.class_total[k]},
                              {"solved", rep.class_solved[k]},
                              {"solve_rate", rep.class_total[k] ? double(rep.class_solved[k]) / double(rep.class_total[k]) : 0.0}});
  std::cout << j.dump(2) << "\n";
  if (!out.empty()) write_file_atomic(out, j.dump(2) + "\n");
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& config_path, const std::string& problem_spec,
              const std::string& problem_file, std::size_t max_turns, std::uint64_t seed, const std::string& out) {
  const RunConfig rc = config_or_defaults(config_path);
  const Vocab vocab = Vocab::task_vocab();
  const Checkpoint ck = load_compatible(checkpoint, vocab);

  std::vector<ProblemInstance> problems;
  if (!problem_file.empty()) {
    problems = read_jsonl(problem_file, vocab);
    if (!problem_spec.empty())
      std::erase_if(problems, [&](const ProblemInstance& p) { return p.id != problem_spec; });
  } else if (problem_spec.size() == 3 && (problem_spec[1] == '+' || problem_spec[1] == '*') &&
             std::isdigit(static_cast<unsigned char>(problem_spec[0])) &&
             std::isdigit(static_cast<unsigned char>(problem_spec[2]))) {
    problems.push_back(make_problem(vocab, problem_spec, problem_spec[0] - '0',
                                    problem_spec[1] == '+' ? Op::kAdd : Op::kMul, problem_spec[2] - '0'));
  } else {
    throw ConfigError("--problem", "expected a problem such as 3+4 (or an id together with --problem-file)");
  }
  if (problems.empty()) throw ConfigError("--problem", "no matching problem");

  auto sim = make_simulator(vocab, rc.train.feedback);
  InferOptions opts;
  opts.max_turns = max_turns;
  opts.response_cap = rc.train.response_cap;
  opts.feedback_cap = rc.train.feedback.feedback_cap;
  opts.inject = rc.train.mode != TrainMode::kNoInjection;
  opts.seed = seed;

  nlohmann::ordered_json transcript = nlohmann::ordered_json::array();
  for (const auto& p : problems) {
    const InferResult r = infer_multiturn(vocab, p, ck.params, *sim, opts);
    nlohmann::ordered_json jp;
    jp["id"] = p.id;
    jp["prompt"] = vocab.render(p.prompt_tokens);
    std::cout << "problem " << p.id << " (" << vocab.render(p.prompt_tokens) << ")\n";
    for (std::size_t t = 0; t < r.trace.size(); ++t) {
      const auto& turn = r.trace[t];
      const std::string text = vocab.render(turn.rollout.tokens);
      std::cout << "  turn " << t + 1 << ": " << text << "  [format_ok=" << turn.outcome.format_ok
                << " answer_ok=" << turn.outcome.answer_ok << "]\n";
      nlohmann::ordered_json jt = {{"turn", t + 1},
                                   {"response", text},
                                   {"format_ok", turn.outcome.format_ok},
                                   {"answer_ok", turn.outcome.answer_ok}};
      if (turn.feedback) {
        std::cout << "    feedback: " << vocab.render(turn.feedback->tokens) << "\n";
        jt["feedback"] = {{"tokens", vocab.render(turn.feedback->tokens)},
                          {"issue", turn.feedback->issue},
                          {"fix_steps", turn.feedback->fix_steps},
                          {"source", to_string(turn.feedback->source)},
                          {"truncated", turn.feedback->truncated}};
      }
      jp["turns"].push_back(jt);
    }
    jp["turns_used"] = r.turns_used;
    jp["verified"] = r.verified;
    jp["answer"] = r.answer ? nlohmann::ordered_json(vocab.render(*r.answer)) : nlohmann::ordered_json(nullptr);
    jp["simulator_calls"] = r.simulator_calls;
    std::cout << "  -> " << (r.verified ? "verified" : "unverified") << " after " << r.turns_used << " turn(s)\n";
    transcript.push_back(jp);
  }
  if (!out.empty()) write_file_atomic(out, transcript.dump(2) + "\n");
  return 0;
}

int cmd_report(const std::vector<std::string>& metrics, const std::string& out) {
  std::vector<fs::path> paths(metrics.begin(), metrics.end());
  const std::size_t partial = write_report(paths, out, std::cerr);
  std::cout << "wrote branch_losses.csv, regenerations.csv, turn_budget.csv to " << out;
  if (partial) std::cout << " (" << partial << " partial run(s))";
  std::cout << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"feedback-guided multi-turn RL trainer"};
  app.require_subcommand(1);

  std::string config, mode, out, checkpoint, init_ckpt, split = "validation", dataset_file, problem, problem_file;
  std::optional<std::uint64_t> seed;
  std::uint64_t eval_seed = 0;
  std::size_t max_turns = 2;
  bool resume = false;
  std::vector<std::string> metrics;

  auto* train = app.add_subcommand("train", "run training from a JSON config");
  train->add_option("--config", config, "run config (JSON)")->required();
  train->add_option("--seed", seed, "override the run seed");
  train->add_option("--mode", mode, "mulferl | grpo-baseline | no-dpo | no-injection");
  train->add_option("--out", out, "output directory");
  train->add_option("--checkpoint", init_ckpt, "initial parameters (default: base policy)");
  train->add_flag("--resume", resume, "continue from the trainer state in the output directory");

  auto* eval = app.add_subcommand("eval", "greedy solve-rate of a checkpoint");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--config", config, "dataset and length caps (optional)");
  eval->add_option("--split", split, "train | validation | test");
  eval->add_option("--dataset", dataset_file, "JSONL problems instead of a generated split");
  eval->add_option("--seed", eval_seed, "tie-break seed");
  eval->add_option("--out", out, "also write the report here");

  auto* infer = app.add_subcommand("infer-multiturn", "test-time feedback loop on one or more problems");
  infer->add_option("--checkpoint", checkpoint)->required();
  infer->add_option("--config", config, "simulator and caps (optional)");
  infer->add_option("--problem", problem, "problem such as 3+4, or an id within --problem-file");
  infer->add_option("--problem-file", problem_file, "JSONL problems");
  infer->add_option("--max-turns", max_turns)->check(CLI::PositiveNumber);
  infer->add_option("--seed", eval_seed, "tie-break seed");
  infer->add_option("--out", out, "transcript JSON");

  auto* report = app.add_subcommand("report", "CSV tables from metrics streams");
  report->add_option("--metrics", metrics, "metrics.jsonl (repeatable)")->required();
  report->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) return cmd_train(config, seed, mode, out, init_ckpt, resume);
    if (*eval) return cmd_eval(checkpoint, config, split, dataset_file, eval_seed, out);
    if (*infer) {
      if (problem.empty() && problem_file.empty()) throw ConfigError("--problem", "pass --problem or --problem-file");
      return cmd_infer(checkpoint, config, problem, problem_file, max_turns, eval_seed, out);
    }
    if (*report) return cmd_report(metrics, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const SimulatorError& e) {
    std::cerr << "simulator error after " << e.attempts() << " attempt(s): " << e.what() << "\n";
    return kExitSimulator;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return 0;
}
