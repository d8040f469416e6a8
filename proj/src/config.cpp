#include "mulferl/config.hpp"

#include <cctype>
#include <set>

#include "mulferl/checkpoint.hpp"
#include "mulferl/errors.hpp"

extern char** environ;

namespace mulferl {

namespace {

using nlohmann::json;

// Reads typed values out of one JSON object, tracking which keys were used
// so leftovers can be reported.
class Section {
 public:
  Section(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "must be an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return obj_.contains(key); }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!obj_.contains(key)) return;
    used_.insert(key);
    const json& v = obj_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(field(key), "expected a boolean");
        out = v.get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
          throw ConfigError(field(key), "expected a non-negative integer");
        out = v.get<T>();
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(field(key), "expected a number");
        out = v.get<T>();
      } else {
        if (!v.is_string()) throw ConfigError(field(key), "expected a string");
        out = v.get<T>();
      }
    } catch (const json::exception& e) {
      throw ConfigError(field(key), e.what());
    }
  }

  Section sub(const std::string& key) {
    used_.insert(key);
    static const json kEmpty = json::object();
    return Section(obj_.contains(key) ? obj_.at(key) : kEmpty, field(key));
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> used_;
};

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
  RunConfig rc;
  TrainConfig& t = rc.train;
  Section root(doc, "");
  if (!root.has("learning_rate")) throw ConfigError("learning_rate", "required field is missing");
  root.get("learning_rate", t.learning_rate);
  root.get("group_size", t.group_size);
  root.get("max_turns", t.max_turns);
  root.get("batch_size", t.batch_size);
  root.get("micro_batch", t.micro_batch);
  root.get("total_steps", t.total_steps);
  root.get("temperature", t.temperature);
  root.get("prompt_cap", t.prompt_cap);
  root.get("response_cap", t.response_cap);
  root.get("seed", t.seed);
  root.get("workers", t.workers);
  root.get("ref_refresh_interval", t.ref_refresh_interval);
  std::string mode = to_string(t.mode);
  root.get("mode", mode);
  if (auto m = parse_train_mode(mode))
    t.mode = *m;
  else
    throw ConfigError("mode", "expected mulferl, grpo-baseline, no-dpo or no-injection");

  {
    Section s = root.sub("optimizer");
    std::string kind = "adam";
    s.get("kind", kind);
    if (kind == "adam")
      t.optimizer = OptimizerKind::kAdam;
    else if (kind == "sgd")
      t.optimizer = OptimizerKind::kSgd;
    else
      throw ConfigError(s.field("kind"), "expected adam or sgd");
    s.get("beta1", t.adam_beta1);
    s.get("beta2", t.adam_beta2);
    s.get("eps", t.adam_eps);
    s.finish();
  }
  {
    Section s = root.sub("grpo");
    s.get("clip_eps", t.grpo.clip_eps);
    s.get("kl_coef", t.grpo.kl_coef);
    s.get("adv_denom_eps", t.grpo.adv_denom_eps);
    s.get("entropy_coef", t.grpo.entropy_coef);
    s.get("token_level_ratio", t.grpo.token_level_ratio);
    s.finish();
  }
  {
    Section s = root.sub("dpo");
    s.get("beta", t.dpo.beta);
    s.get("lambda", t.dpo.lambda_weight);
    s.finish();
  }
  {
    Section s = root.sub("feedback");
    std::string backend = "scripted";
    s.get("backend", backend);
    if (backend == "scripted")
      t.feedback.backend = SimulatorBackend::kScripted;
    else if (backend == "remote")
      t.feedback.backend = SimulatorBackend::kRemote;
    else
      throw ConfigError(s.field("backend"), "expected scripted or remote");
    s.get("subgroup_size", t.feedback.subgroup_size);
    s.get("cap", t.feedback.feedback_cap);
    s.get("endpoint", t.feedback.endpoint);
    s.get("model", t.feedback.model);
    s.get("auth_env", t.feedback.auth_env);
    s.get("timeout_seconds", t.feedback.timeout_seconds);
    s.get("max_in_flight", t.feedback.max_in_flight);
    s.get("max_attempts", t.feedback.max_attempts);
    s.get("backoff_seconds", t.feedback.backoff_seconds);
    s.get("max_tokens", t.feedback.max_tokens);
    s.get("temperature", t.feedback.temperature);
    s.finish();
  }
  {
    Section s = root.sub("prior");
    s.get("format", rc.prior.format);
    s.get("hint", rc.prior.hint);
    s.get("exclusion", rc.prior.exclusion);
    s.finish();
  }
  {
    Section s = root.sub("dataset");
    s.get("size", rc.dataset_size);
    s.get("seed", rc.dataset_seed);
    s.finish();
    if (rc.dataset_size < 3) throw ConfigError("dataset.size", "must be >= 3");
  }
  {
    Section s = root.sub("output");
    std::string dir;
    s.get("dir", dir);
    rc.io.out_dir = dir;
    s.get("checkpoint_interval", rc.io.checkpoint_interval);
    s.get("metrics_flush_interval", rc.io.metrics_flush_interval);
    s.get("eval_interval", rc.io.eval_interval);
    s.finish();
  }
  root.finish();
  t.validate();
  return rc;
}

void apply_env_overrides(json& doc, const std::map<std::string, std::string>& env, const std::string& skip) {
  for (const auto& [name, value] : env) {
    if (name.rfind(kEnvPrefix, 0) != 0 || name == skip) continue;
    const std::string path = name.substr(kEnvPrefix.size());
    if (path.empty()) continue;
    json* node = &doc;
    std::size_t pos = 0;
    while (true) {
      const auto sep = path.find("__", pos);
      const std::string key = lower(path.substr(pos, sep == std::string::npos ? std::string::npos : sep - pos));
      if (sep == std::string::npos) {
        json v = json::parse(value, nullptr, false);
        (*node)[key] = v.is_discarded() ? json(value) : v;
        break;
      }
      if (!node->contains(key)) (*node)[key] = json::object();
      node = &(*node)[key];
      if (!node->is_object()) throw ConfigError(name, "override path crosses a non-object value");
      pos = sep + 2;
    }
  }
}

std::map<std::string, std::string> environment_snapshot() {
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv = *e;
    const auto eq = kv.find('=');
    if (eq != std::string::npos) env.emplace(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return env;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  json doc = json::parse(text, nullptr, false);
  if (doc.is_discarded()) throw ConfigError(path.string(), "not valid JSON");
  if (!doc.is_object()) throw ConfigError(path.string(), "top level must be an object");
  std::string skip;
  if (doc.contains("feedback") && doc["feedback"].is_object() && doc["feedback"].contains("auth_env") &&
      doc["feedback"]["auth_env"].is_string())
    skip = doc["feedback"]["auth_env"].get<std::string>();
  apply_env_overrides(doc, environment_snapshot(), skip);
  return parse_run_config(doc);
}

nlohmann::ordered_json to_json(const RunConfig& rc) {
  const TrainConfig& t = rc.train;
  nlohmann::ordered_json j;
  j["learning_rate"] = t.learning_rate;
  j["group_size"] = t.group_size;
  j["max_turns"] = t.max_turns;
  j["batch_size"] = t.batch_size;
  j["micro_batch"] = t.micro_batch;
  j["total_steps"] = t.total_steps;
  j["temperature"] = t.temperature;
  j["prompt_cap"] = t.prompt_cap;
  j["response_cap"] = t.response_cap;
  j["seed"] = t.seed;
  j["mode"] = to_string(t.mode);
  j["workers"] = t.workers;
  j["ref_refresh_interval"] = t.ref_refresh_interval;
  j["optimizer"] = {{"kind", t.optimizer == OptimizerKind::kAdam ? "adam" : "sgd"},
                    {"beta1", t.adam_beta1},
                    {"beta2", t.adam_beta2},
                    {"eps", t.adam_eps}};
  j["grpo"] = {{"clip_eps", t.grpo.clip_eps},
               {"kl_coef", t.grpo.kl_coef},
               {"adv_denom_eps", t.grpo.adv_denom_eps},
               {"entropy_coef", t.grpo.entropy_coef},
               {"token_level_ratio", t.grpo.token_level_ratio}};
  j["dpo"] = {{"beta", t.dpo.beta}, {"lambda", t.dpo.lambda_weight}};
  j["feedback"] = {{"backend", t.feedback.backend == SimulatorBackend::kRemote ? "remote" : "scripted"},
                   {"subgroup_size", t.feedback.subgroup_size},
                   {"cap", t.feedback.feedback_cap},
                   {"endpoint", t.feedback.endpoint},
                   {"model", t.feedback.model},
                   {"auth_env", t.feedback.auth_env},
                   {"timeout_seconds", t.feedback.timeout_seconds},
                   {"max_in_flight", t.feedback.max_in_flight},
                   {"max_attempts", t.feedback.max_attempts},
                   {"backoff_seconds", t.feedback.backoff_seconds},
                   {"max_tokens", t.feedback.max_tokens},
                   {"temperature", t.feedback.temperature}};
  j["prior"] = {{"format", rc.prior.format}, {"hint", rc.prior.hint}, {"exclusion", rc.prior.exclusion}};
  j["dataset"] = {{"size", rc.dataset_size}, {"seed", rc.dataset_seed}};
  j["output"] = {{"dir", rc.io.out_dir.string()},
                 {"checkpoint_interval", rc.io.checkpoint_interval},
                 {"metrics_flush_interval", rc.io.metrics_flush_interval},
                 {"eval_interval", rc.io.eval_interval}};
  return j;
}

}  // namespace mulferl
