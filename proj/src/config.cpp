#include "msd/config.hpp"

#include <concepts>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "msd/errors.hpp"

namespace msd {

namespace {

using nlohmann::json;

// Reads known keys out of one JSON object and remembers which were seen, so
// anything left over can be reported as unknown.
class Section {
 public:
  Section(const json& doc, std::string path) : path_(std::move(path)) {
    if (!doc.is_object()) throw ConfigError(path_ + ": expected an object");
    obj_ = &doc;
  }

  Section child(const std::string& key) {
    known_.insert(key);
    static const json empty = json::object();
    const auto it = obj_->find(key);
    return Section(it == obj_->end() ? empty : *it, path_ + "." + key);
  }

  template <std::unsigned_integral U>
  void get(const std::string& key, U& out) {
    read(key, out, [](const json& v) { return v.is_number_unsigned(); }, "a non-negative integer");
  }
  void get(const std::string& key, double& out) { read(key, out, [](const json& v) { return v.is_number(); }, "a number"); }
  void get(const std::string& key, bool& out) { read(key, out, [](const json& v) { return v.is_boolean(); }, "a boolean"); }
  void get(const std::string& key, std::string& out) { read(key, out, [](const json& v) { return v.is_string(); }, "a string"); }
  void get(const std::string& key, std::vector<std::size_t>& out) {
    read(key, out,
         [](const json& v) {
           if (!v.is_array()) return false;
           for (const auto& e : v)
             if (!e.is_number_unsigned()) return false;
           return true;
         },
         "an array of non-negative integers");
  }

  bool has(const std::string& key) const { return obj_->contains(key); }
  const std::string& path() const { return path_; }

  void reject_unknown() const {
    for (const auto& [key, value] : obj_->items()) {
      if (!known_.count(key)) throw ConfigError(path_ + "." + key + ": unknown key");
    }
  }

 private:
  template <typename T, typename Pred>
  void read(const std::string& key, T& out, Pred ok, const char* expected) {
    known_.insert(key);
    const auto it = obj_->find(key);
    if (it == obj_->end()) return;
    if (!ok(*it)) throw ConfigError(path_ + "." + key + ": expected " + expected);
    out = it->template get<T>();
  }

  const json* obj_ = nullptr;
  std::string path_;
  std::set<std::string> known_;
};

}  // namespace

RunConfig parse_run_config(const json& doc) {
  RunConfig cfg;
  Section root(doc, "$");
  if (!root.has("seed")) throw ConfigError("$.seed: required");
  root.get("seed", cfg.seed);

  Section gen = root.child("gen");
  gen.get("n", cfg.gen.n);
  gen.get("d_latent", cfg.gen.d_latent);
  gen.get("d_a", cfg.gen.d_a);
  gen.get("d_b", cfg.gen.d_b);
  gen.get("classes", cfg.gen.classes);
  gen.get("noise_sigma", cfg.gen.noise_sigma);
  gen.get("aug_sigma", cfg.gen.aug_sigma);
  gen.get("mask_prob", cfg.gen.mask_prob);
  gen.get("aug_scale_min", cfg.gen.aug_scale_min);
  gen.get("aug_scale_max", cfg.gen.aug_scale_max);
  gen.reject_unknown();

  TrainConfig& t = cfg.train;
  Section train = root.child("train");
  train.get("epochs", t.epochs);
  train.get("primary_batch", t.primary_batch);
  train.get("sub_batch", t.sub_batch);
  train.get("base_lr", t.base_lr);
  train.get("momentum", t.momentum);
  train.get("queue_capacity", t.queue_capacity);
  train.get("weight_decay", t.weight_decay);
  train.get("beta1", t.beta1);
  train.get("beta2", t.beta2);
  train.get("adam_eps", t.adam_eps);
  train.get("image_hidden", t.dims.image_hidden);
  train.get("text_hidden", t.dims.text_hidden);
  train.get("embedding_dim", t.dims.embedding);
  train.get("shared_temperature", t.shared_temperature);
  train.get("test_fraction", t.test_fraction);
  train.reject_unknown();

  Section loss = root.child("loss");
  loss.get("alpha", t.loss.alpha);
  loss.get("beta", t.loss.beta);
  loss.get("omega_uni", t.loss.omega_uni);
  loss.get("omega_multi", t.loss.omega_multi);
  std::string mode(to_string(t.loss.mode));
  loss.get("mode", mode);
  try {
    t.loss.mode = parse_loss_mode(mode);
  } catch (const ConfigError& e) {
    throw ConfigError(loss.path() + ".mode: " + e.what());
  }
  loss.reject_unknown();

  Section eval = root.child("eval");
  eval.get("recall_ks", cfg.eval.recall_ks);
  eval.get("probe_fraction", cfg.eval.probe.fraction);
  eval.get("probe_epochs", cfg.eval.probe.epochs);
  eval.get("probe_lr", cfg.eval.probe.lr);
  eval.get("probe_weight_decay", cfg.eval.probe.weight_decay);
  eval.reject_unknown();
  root.reject_unknown();

  cfg.gen.seed = cfg.seed;
  t.seed = cfg.seed;
  t.augmentation = cfg.gen;
  cfg.eval.seed = cfg.seed;
  cfg.eval.probe.seed = cfg.seed;
  cfg.eval.test_fraction = t.test_fraction;

  // Range checks after the schema, each reported under its section.
  auto checked = [](const char* path, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(path) + ": " + e.what());
    }
  };
  checked("$.gen", [&] { cfg.gen.validate(); });
  checked("$.train", [&] { t.validate(); });
  if (cfg.eval.recall_ks.empty()) throw ConfigError("$.eval.recall_ks: must not be empty");
  for (std::size_t k : cfg.eval.recall_ks) {
    if (k == 0) throw ConfigError("$.eval.recall_ks: entries must be positive");
  }
  if (!(cfg.eval.probe.fraction > 0.0 && cfg.eval.probe.fraction <= 1.0)) {
    throw ConfigError("$.eval.probe_fraction: must be in (0, 1]");
  }
  if (cfg.eval.probe.epochs == 0) throw ConfigError("$.eval.probe_epochs: must be positive");
  if (!(cfg.eval.probe.lr > 0.0)) throw ConfigError("$.eval.probe_lr: must be positive");
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("$: invalid JSON in " + path.string() + ": " + e.what());
  }
  return parse_run_config(doc);
}

nlohmann::ordered_json to_json(const RunConfig& cfg) {
  const TrainConfig& t = cfg.train;
  return {
      {"seed", cfg.seed},
      {"gen",
       {{"n", cfg.gen.n},
        {"d_latent", cfg.gen.d_latent},
        {"d_a", cfg.gen.d_a},
        {"d_b", cfg.gen.d_b},
        {"classes", cfg.gen.classes},
        {"noise_sigma", cfg.gen.noise_sigma},
        {"aug_sigma", cfg.gen.aug_sigma},
        {"mask_prob", cfg.gen.mask_prob},
        {"aug_scale_min", cfg.gen.aug_scale_min},
        {"aug_scale_max", cfg.gen.aug_scale_max}}},
      {"train",
       {{"epochs", t.epochs},
        {"primary_batch", t.primary_batch},
        {"sub_batch", t.sub_batch},
        {"base_lr", t.base_lr},
        {"momentum", t.momentum},
        {"queue_capacity", t.queue_capacity},
        {"weight_decay", t.weight_decay},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"adam_eps", t.adam_eps},
        {"image_hidden", t.dims.image_hidden},
        {"text_hidden", t.dims.text_hidden},
        {"embedding_dim", t.dims.embedding},
        {"shared_temperature", t.shared_temperature},
        {"test_fraction", t.test_fraction}}},
      {"loss",
       {{"alpha", t.loss.alpha},
        {"beta", t.loss.beta},
        {"omega_uni", t.loss.omega_uni},
        {"omega_multi", t.loss.omega_multi},
        {"mode", to_string(t.loss.mode)}}},
      {"eval",
       {{"recall_ks", cfg.eval.recall_ks},
        {"probe_fraction", cfg.eval.probe.fraction},
        {"probe_epochs", cfg.eval.probe.epochs},
        {"probe_lr", cfg.eval.probe.lr},
        {"probe_weight_decay", cfg.eval.probe.weight_decay}}},
  };
}

}  // namespace msd
