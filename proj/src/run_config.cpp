#include "plrank/run_config.hpp"

#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "plrank/random.hpp"

namespace plrank {

namespace {

using nlohmann::ordered_json;

ordered_json world_json(const WorldConfig& w) {
  return ordered_json{{"m", w.m},
                      {"buckets", w.buckets},
                      {"n_users", w.n_users},
                      {"n_items", w.n_items},
                      {"zipf_s", w.zipf_s},
                      {"history_geom_p", w.history_geom_p},
                      {"exposure_pool", w.exposure_pool},
                      {"relevant_fraction", w.relevant_fraction},
                      {"K", w.K},
                      {"L", w.L},
                      {"negatives", to_string(w.negatives)}};
}

ordered_json model_json(const ModelConfig& m) {
  return ordered_json{{"layers", m.layers},   {"d_model", m.d_model}, {"heads", m.heads},
                      {"ffn", m.ffn},         {"max_len", m.max_len}, {"max_gen", m.max_gen},
                      {"head_hidden", m.head_hidden}, {"init_std", m.init_std}};
}

ordered_json train_json(const TrainConfig& t, bool with_workers) {
  ordered_json j{{"reward_cutoff", t.reward_cutoff},
                 {"epsilon", t.epsilon},
                 {"inner_epochs", t.inner_epochs},
                 {"rankings_per_instance", t.rankings_per_instance},
                 {"lr_policy", t.lr_policy},
                 {"lr_head", t.lr_head},
                 {"lr_sft", t.lr_sft},
                 {"batch_size", t.batch_size},
                 {"sft_batch_size", t.sft_batch_size},
                 {"steps_sft", t.steps_sft},
                 {"steps_rl", t.steps_rl},
                 {"baseline", to_string(t.baseline)},
                 {"joint", t.joint},
                 {"cot", t.cot},
                 {"sft_init", t.sft_init},
                 {"head_grad_to_theta", t.head_grad_to_theta},
                 {"temperature", t.temperature},
                 {"checkpoint_every", t.checkpoint_every}};
  if (with_workers) j["workers"] = t.workers;
  return j;
}

ordered_json to_json(const RunConfig& c, bool full) {
  ordered_json j;
  if (full) j["run_id"] = c.run_id;
  j["seed"] = c.seed;
  if (full) {
    j["paths"] = ordered_json{
        {"data_dir", c.data_dir}, {"checkpoint_dir", c.checkpoint_dir}, {"report_dir", c.report_dir}};
  }
  j["world"] = world_json(c.world);
  j["model"] = model_json(c.model);
  j["train"] = train_json(c.train, full);
  j["teacher_noise"] = c.teacher_noise;
  j["eval"] = ordered_json{
      {"cutoffs", c.eval_cutoffs}, {"probe_shuffles", c.probe_shuffles}, {"probe_positions", c.probe_positions}};
  return j;
}

// Reads the keys of one JSON object into fields, rejecting anything unknown.
class ObjectReader {
 public:
  ObjectReader(const ordered_json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError("config key '" + display() + "' must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (it->template get<long long>() < 0 && !it->is_number_unsigned()) throw ConfigError("");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("");
      }
      out = it->template get<T>();
    } catch (const std::exception&) {
      throw ConfigError("config key '" + prefix_ + key + "' has the wrong type");
    }
  }

  template <typename F>
  void get_with(const std::string& key, F&& parse) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_string()) throw ConfigError("config key '" + prefix_ + key + "' has the wrong type");
    try {
      parse(it->template get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError("config key '" + prefix_ + key + "': " + e.what());
    }
  }

  const ordered_json* child(const std::string& key) {
    seen_.push_back(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
        throw ConfigError("unknown config key '" + prefix_ + it.key() + "'");
      }
    }
  }

 private:
  std::string display() const { return prefix_.empty() ? "<root>" : prefix_.substr(0, prefix_.size() - 1); }

  const ordered_json& j_;
  std::string prefix_;
  std::vector<std::string> seen_;
};

}  // namespace

void RunConfig::finalize() {
  world.seed = seed;
  train.seed = seed;
  train.L = world.L;
  model.dims = world.m;
  model.buckets = world.buckets;
  if (run_id.empty()) throw ConfigError("run_id must not be empty");
  world.validate();
  model.validate();
  train.validate();
  if (!(teacher_noise >= 0.0 && teacher_noise < 0.5)) throw ConfigError("teacher_noise must lie in [0, 0.5)");
  if (eval_cutoffs.empty()) throw ConfigError("eval.cutoffs must not be empty");
  for (int c : eval_cutoffs) {
    if (c < 1) throw ConfigError("eval.cutoffs entries must be >= 1");
  }
  if (probe_shuffles < 1) throw ConfigError("eval.probe_shuffles must be >= 1");
  for (int p : probe_positions) {
    if (p < 1 || p > world.K) throw ConfigError("eval.probe_positions entries must lie in [1, K]");
  }
}

std::string RunConfig::dump() const { return to_json(*this, true).dump(2) + "\n"; }

std::string RunConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(mix64(hash_string(to_json(*this, false).dump()))));
  return buf;
}

RunConfig parse_run_config(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  ObjectReader root(j, "");
  root.get("run_id", c.run_id);
  root.get("seed", c.seed);
  if (const auto* p = root.child("paths")) {
    ObjectReader r(*p, "paths.");
    r.get("data_dir", c.data_dir);
    r.get("checkpoint_dir", c.checkpoint_dir);
    r.get("report_dir", c.report_dir);
    r.finish();
  }
  if (const auto* p = root.child("world")) {
    ObjectReader r(*p, "world.");
    WorldConfig& w = c.world;
    r.get("m", w.m);
    r.get("buckets", w.buckets);
    r.get("n_users", w.n_users);
    r.get("n_items", w.n_items);
    r.get("zipf_s", w.zipf_s);
    r.get("history_geom_p", w.history_geom_p);
    r.get("exposure_pool", w.exposure_pool);
    r.get("relevant_fraction", w.relevant_fraction);
    r.get("K", w.K);
    r.get("L", w.L);
    r.get_with("negatives", [&](const std::string& s) { w.negatives = parse_negative_sampling(s); });
    r.finish();
  }
  if (const auto* p = root.child("model")) {
    ObjectReader r(*p, "model.");
    ModelConfig& m = c.model;
    r.get("layers", m.layers);
    r.get("d_model", m.d_model);
    r.get("heads", m.heads);
    r.get("ffn", m.ffn);
    r.get("max_len", m.max_len);
    r.get("max_gen", m.max_gen);
    r.get("head_hidden", m.head_hidden);
    r.get("init_std", m.init_std);
    r.finish();
  }
  if (const auto* p = root.child("train")) {
    ObjectReader r(*p, "train.");
    TrainConfig& t = c.train;
    r.get("reward_cutoff", t.reward_cutoff);
    r.get("epsilon", t.epsilon);
    r.get("inner_epochs", t.inner_epochs);
    r.get("rankings_per_instance", t.rankings_per_instance);
    r.get("lr_policy", t.lr_policy);
    r.get("lr_head", t.lr_head);
    r.get("lr_sft", t.lr_sft);
    r.get("batch_size", t.batch_size);
    r.get("sft_batch_size", t.sft_batch_size);
    r.get("steps_sft", t.steps_sft);
    r.get("steps_rl", t.steps_rl);
    r.get_with("baseline", [&](const std::string& s) { t.baseline = parse_baseline(s); });
    r.get("joint", t.joint);
    r.get("cot", t.cot);
    r.get("sft_init", t.sft_init);
    r.get("head_grad_to_theta", t.head_grad_to_theta);
    r.get("temperature", t.temperature);
    r.get("checkpoint_every", t.checkpoint_every);
    r.get("workers", t.workers);
    r.finish();
  }
  root.get("teacher_noise", c.teacher_noise);
  if (const auto* p = root.child("eval")) {
    ObjectReader r(*p, "eval.");
    r.get("cutoffs", c.eval_cutoffs);
    r.get("probe_shuffles", c.probe_shuffles);
    r.get("probe_positions", c.probe_positions);
    r.finish();
  }
  root.finish();
  c.finalize();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read config " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace plrank
