#include "mulferl/report.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mulferl/errors.hpp"

namespace mulferl {

using nlohmann::json;

std::string validate_step_record(const json& r, std::optional<std::size_t> batch_size) {
  if (!r.is_object()) return "record is not an object";
  auto uint_field = [](const json& o, const char* k) { return o.contains(k) && o.at(k).is_number_unsigned(); };
  auto num_field = [](const json& o, const char* k) { return o.contains(k) && o.at(k).is_number(); };
  if (!uint_field(r, "step")) return "missing step";
  if (!r.contains("branches") || !r["branches"].is_object()) return "missing branches";
  std::size_t sum = 0;
  for (const char* k : {"grpo", "dpo", "skip_allpos", "skip_allfail"}) {
    if (!uint_field(r["branches"], k)) return std::string("missing branches.") + k;
    sum += r["branches"][k].get<std::size_t>();
  }
  if (batch_size && sum != *batch_size) return "branch counts do not sum to the batch size";
  if (!r.contains("loss_mean") || !num_field(r["loss_mean"], "grpo") || !num_field(r["loss_mean"], "dpo"))
    return "missing loss_mean";
  if (!r.contains("regenerations") || !r["regenerations"].is_array()) return "missing regenerations";
  for (const auto& x : r["regenerations"])
    if (!x.is_number_unsigned()) return "regenerations must be counts";
  for (const char* k : {"simulator_calls", "merge_calls", "simulator_failures", "feedback_truncations"})
    if (!uint_field(r, k)) return std::string("missing ") + k;
  if (!num_field(r, "reward_mean_turn0")) return "missing reward_mean_turn0";
  if (!r.contains("updated") || !r["updated"].is_boolean()) return "missing updated";
  if (r.contains("val_solve_rate") && !r["val_solve_rate"].is_number()) return "val_solve_rate must be a number";
  return {};
}

MetricsStream read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  MetricsStream s;
  std::string line;
  std::size_t lineno = 0;
  std::optional<std::size_t> batch;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json r = json::parse(line, nullptr, false);
    std::string err = r.is_discarded() ? "unparseable line" : validate_step_record(r, batch);
    if (err.empty() && !s.records.empty() && r["step"].get<std::uint64_t>() <= s.records.back()["step"].get<std::uint64_t>())
      err = "step indices not increasing";
    if (!err.empty()) {
      s.truncated = true;
      s.warning = path.string() + ":" + std::to_string(lineno) + ": " + err + "; report covers the preceding records";
      break;
    }
    if (!batch) {
      std::size_t sum = 0;
      for (const auto& [k, v] : r["branches"].items()) sum += v.get<std::size_t>();
      batch = sum;
    }
    s.records.push_back(std::move(r));
  }
  return s;
}

std::size_t write_report(std::span<const std::filesystem::path> metrics_paths, const std::filesystem::path& out_dir,
                         std::ostream& warn) {
  std::filesystem::create_directories(out_dir);
  std::ofstream losses(out_dir / "branch_losses.csv"), regen(out_dir / "regenerations.csv"),
      budget(out_dir / "turn_budget.csv");
  if (!losses || !regen || !budget) throw IoError("cannot write report files in " + out_dir.string());
  losses << std::setprecision(10);
  budget << std::setprecision(10);
  losses << "run,step,grpo,dpo,skip_allpos,skip_allfail,grpo_loss_mean,dpo_loss_mean\n";
  regen << "run,step,turn,count\n";
  budget << "run,max_turns,steps,best_val_solve_rate,final_val_solve_rate,mean_regenerations_per_step,wall_seconds\n";

  std::size_t partial = 0;
  for (std::size_t run = 0; run < metrics_paths.size(); ++run) {
    const MetricsStream s = read_metrics(metrics_paths[run]);
    if (s.truncated) {
      ++partial;
      warn << "warning: " << s.warning << "\n";
    }
    std::optional<double> best, final_rate;
    double regen_total = 0;
    std::size_t max_turns = 1;
    for (const auto& r : s.records) {
      const auto step = r["step"].get<std::uint64_t>();
      const auto& b = r["branches"];
      losses << run << ',' << step << ',' << b["grpo"] << ',' << b["dpo"] << ',' << b["skip_allpos"] << ','
             << b["skip_allfail"] << ',' << r["loss_mean"]["grpo"].get<double>() << ','
             << r["loss_mean"]["dpo"].get<double>() << '\n';
      const auto& rg = r["regenerations"];
      max_turns = std::max<std::size_t>(max_turns, rg.size() + 1);
      for (std::size_t t = 0; t < rg.size(); ++t) {
        regen << run << ',' << step << ',' << t + 1 << ',' << rg[t] << '\n';
        regen_total += rg[t].get<double>();
      }
      if (r.contains("val_solve_rate")) {
        const double v = r["val_solve_rate"].get<double>();
        best = best ? std::max(*best, v) : v;
        final_rate = v;
      }
    }
    std::optional<double> wall;
    const auto timing = metrics_paths[run].parent_path() / "timing.jsonl";
    if (std::filesystem::exists(timing)) {
      std::ifstream tin(timing);
      std::string line;
      double total = 0;
      while (std::getline(tin, line)) {
        json t = json::parse(line, nullptr, false);
        if (t.is_discarded() || !t.contains("wall_seconds")) break;
        total += t["wall_seconds"].get<double>();
      }
      wall = total;
    }
    budget << run << ',' << max_turns << ',' << s.records.size() << ',';
    if (best) budget << *best;
    budget << ',';
    if (final_rate) budget << *final_rate;
    budget << ',' << (s.records.empty() ? 0.0 : regen_total / static_cast<double>(s.records.size())) << ',';
    if (wall) budget << *wall;
    budget << '\n';
  }
  return partial;
}

}  // namespace mulferl
