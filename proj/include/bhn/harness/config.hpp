#pragma once

// Declarative experiment configuration. JSON documents are applied on top of
// the task defaults, key by key; unknown keys are rejected.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "bhn/attacks.hpp"
#include "bhn/bhn.hpp"
#include "bhn/error.hpp"
#include "bhn/harness/datasets.hpp"
#include "bhn/uncertainty.hpp"

namespace bhn::harness {

using json = nlohmann::json;

inline const std::vector<std::string> kTasks = {"train",    "regress-demo", "multimodal-demo", "classify",
                                                "active-learn", "anomaly",      "adversary"};

struct DatasetConfig {
  std::string source = "glyphs";  // glyphs | idx | toy_regression | linear
  std::size_t n_train = 5000;
  std::size_t n_test = 1000;
  GlyphSpec glyphs;
  std::string train_images, train_labels, test_images, test_labels;
  double noise_sd = 0.02;  // toy_regression xi, linear sigma
};

struct ModelConfig {
  std::string kind = "bhn";  // bhn | mle | dropout
  std::string flow = "coupling";
  std::size_t depth = 4;
  std::size_t flow_hidden = 200;
  std::vector<std::size_t> hidden{64, 64};
  std::string activation = "relu";
  double dropout = 0.5;
  double init_scale = 1e-2;
  double init_mean = 1.0;
  double init_log_sigma = -2.302585092994046;  // log 0.1
  double init_log_var = -4.605170185988092;    // regression head, log 0.01
  std::string bias_init = "fan_in";            // zero | fan_in
};

struct ActiveConfig {
  std::size_t rounds = 10;
  std::size_t acquire = 10;
  std::size_t initial_per_class = 2;
  std::size_t epochs_per_round = 50;
  std::size_t trials = 1;
  std::size_t pool_size = 2000;
  std::string acquisition = "bald";  // random | bald | variation_ratio | mean_std | entropy
  std::optional<bool> warm_start;     // unset: on for BHN, off otherwise
};

struct AnomalyConfig {
  std::string mode = "ood";  // ood | unseen
  std::vector<std::string> sources{"uniform", "gaussian"};  // uniform | gaussian | copy (fresh in-distribution draws) | idx
  std::string ood_images;
  std::size_t n_ood = 1000;
  std::size_t excluded_class = 9;
};

struct AdversaryConfig {
  attacks::AttackConfig attack;
  std::vector<std::size_t> grad_samples{1, 32};
  std::size_t n_attack = 1000;
};

struct ExperimentConfig {
  std::string task = "classify";
  std::string run_id = "run";
  std::optional<std::uint64_t> seed;
  std::string output_dir;
  std::size_t eval_samples = 100;
  std::size_t grid_points = 200;      // regression demo
  std::size_t posterior_draws = 1000;  // multimodal demo
  std::vector<std::string> scores{"variation_ratio", "bald", "mean_std", "entropy"};
  DatasetConfig data;
  ModelConfig model;
  TrainConfig train;
  PriorConfig prior;
  ActiveConfig active;
  AnomalyConfig anomaly;
  AdversaryConfig adversary;

  std::uint64_t require_seed() const {
    if (!seed) throw ConfigError("--seed is required for '" + task + "'");
    return *seed;
  }

  std::vector<uq::Score> score_kinds() const {
    std::vector<uq::Score> out;
    for (const auto& s : scores) out.push_back(uq::score_from_string(s));
    return out;
  }

  void validate() const {
    bool known = false;
    for (const auto& t : kTasks) known |= t == task;
    if (!known) throw ConfigError("unknown task '" + task + "'");
    if (eval_samples < 1) throw ConfigError("eval_samples must be at least 1");
    if (data.n_train < 1) throw ConfigError("n_train must be at least 1");
    model_kind_from_string(model.kind);
    flows::flow_kind_from_string(model.flow);
    net::activation_from_string(model.activation);
    if (model.bias_init != "zero" && model.bias_init != "fan_in") throw ConfigError("bias_init must be zero or fan_in");
    if (data.source != "glyphs" && data.source != "idx" && data.source != "toy_regression" && data.source != "linear")
      throw ConfigError("unknown dataset source '" + data.source + "'");
    if (data.source == "glyphs") data.glyphs.validate();
    train.validate();
    prior.validate();
    adversary.attack.validate();
    score_kinds();
    if (anomaly.mode != "ood" && anomaly.mode != "unseen") throw ConfigError("anomaly mode must be ood or unseen");
    for (const auto& s : anomaly.sources)
      if (s != "uniform" && s != "gaussian" && s != "copy" && s != "idx")
        throw ConfigError("unknown OOD source '" + s + "'");
    if (active.acquisition != "random") uq::score_from_string(active.acquisition);
    if (active.acquire < 1 || active.initial_per_class < 1) throw ConfigError("active-learning sizes must be positive");
    if (adversary.grad_samples.empty()) throw ConfigError("adversary needs at least one gradient sample count");
    for (auto s : adversary.grad_samples)
      if (s < 1) throw ConfigError("gradient sample counts must be at least 1");
  }

  ModelInit model_init() const {
    ModelInit mi;
    mi.flow_kind = model.depth == 0 ? flows::FlowKind::None : flows::flow_kind_from_string(model.flow);
    mi.flow_depth = model.depth;
    mi.flow_hidden = model.flow_hidden;
    mi.flow_init = {model.init_scale, model.init_mean, model.init_log_sigma};
    mi.log_var = model.init_log_var;
    mi.bias = model.bias_init == "zero" ? net::BiasInit::Zero : net::BiasInit::FanIn;
    return mi;
  }
};

namespace detail {
inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("'" + where + "' must be a JSON object");
  for (const auto& [k, _] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown config key '" + where + (where.empty() ? "" : ".") + k + "'");
}

template <class T>
void opt(const json& j, const char* key, T& field, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    field = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + where + (where.empty() ? "" : ".") + key + "' has the wrong type");
  }
}
}  // namespace detail

/// Overlays the keys present in `j` onto `cfg`.
inline void apply_json(ExperimentConfig& cfg, const json& j) {
  using detail::check_keys;
  using detail::opt;
  check_keys(j, {"task", "run_id", "seed", "output_dir", "eval_samples", "grid_points", "posterior_draws", "scores",
                 "data", "model", "train", "prior", "active", "anomaly", "adversary"},
             "");
  opt(j, "task", cfg.task, "");
  opt(j, "run_id", cfg.run_id, "");
  if (j.contains("seed")) {
    std::uint64_t s = 0;
    opt(j, "seed", s, "");
    cfg.seed = s;
  }
  opt(j, "output_dir", cfg.output_dir, "");
  opt(j, "eval_samples", cfg.eval_samples, "");
  opt(j, "grid_points", cfg.grid_points, "");
  opt(j, "posterior_draws", cfg.posterior_draws, "");
  opt(j, "scores", cfg.scores, "");

  if (auto it = j.find("data"); it != j.end()) {
    const auto& d = *it;
    check_keys(d, {"source", "n_train", "n_test", "glyphs", "train_images", "train_labels", "test_images",
                   "test_labels", "noise_sd"},
               "data");
    opt(d, "source", cfg.data.source, "data");
    opt(d, "n_train", cfg.data.n_train, "data");
    opt(d, "n_test", cfg.data.n_test, "data");
    opt(d, "train_images", cfg.data.train_images, "data");
    opt(d, "train_labels", cfg.data.train_labels, "data");
    opt(d, "test_images", cfg.data.test_images, "data");
    opt(d, "test_labels", cfg.data.test_labels, "data");
    opt(d, "noise_sd", cfg.data.noise_sd, "data");
    if (auto g = d.find("glyphs"); g != d.end()) {
      check_keys(*g, {"side", "classes", "strokes", "endpoint_jitter", "max_shift", "pixel_noise", "stroke_width",
                      "style_seed"},
                 "data.glyphs");
      auto& gs = cfg.data.glyphs;
      opt(*g, "side", gs.side, "data.glyphs");
      opt(*g, "classes", gs.classes, "data.glyphs");
      opt(*g, "strokes", gs.strokes, "data.glyphs");
      opt(*g, "endpoint_jitter", gs.endpoint_jitter, "data.glyphs");
      opt(*g, "max_shift", gs.max_shift, "data.glyphs");
      opt(*g, "pixel_noise", gs.pixel_noise, "data.glyphs");
      opt(*g, "stroke_width", gs.stroke_width, "data.glyphs");
      opt(*g, "style_seed", gs.style_seed, "data.glyphs");
    }
  }
  if (auto it = j.find("model"); it != j.end()) {
    const auto& m = *it;
    check_keys(m, {"kind", "flow", "depth", "flow_hidden", "hidden", "activation", "dropout", "init_scale", "init_mean",
                   "init_log_sigma", "init_log_var", "bias_init"},
               "model");
    opt(m, "kind", cfg.model.kind, "model");
    opt(m, "flow", cfg.model.flow, "model");
    opt(m, "depth", cfg.model.depth, "model");
    opt(m, "flow_hidden", cfg.model.flow_hidden, "model");
    opt(m, "hidden", cfg.model.hidden, "model");
    opt(m, "activation", cfg.model.activation, "model");
    opt(m, "dropout", cfg.model.dropout, "model");
    opt(m, "init_scale", cfg.model.init_scale, "model");
    opt(m, "init_mean", cfg.model.init_mean, "model");
    opt(m, "init_log_sigma", cfg.model.init_log_sigma, "model");
    opt(m, "init_log_var", cfg.model.init_log_var, "model");
    opt(m, "bias_init", cfg.model.bias_init, "model");
  }
  if (auto it = j.find("train"); it != j.end()) {
    const auto& t = *it;
    check_keys(t, {"lr", "beta1", "beta2", "adam_eps", "batch_size", "clip_norm", "epochs", "mc_samples",
                   "warmup_epochs", "per_example_noise"},
               "train");
    opt(t, "lr", cfg.train.lr, "train");
    opt(t, "beta1", cfg.train.beta1, "train");
    opt(t, "beta2", cfg.train.beta2, "train");
    opt(t, "adam_eps", cfg.train.adam_eps, "train");
    opt(t, "batch_size", cfg.train.batch_size, "train");
    opt(t, "clip_norm", cfg.train.clip_norm, "train");
    opt(t, "epochs", cfg.train.epochs, "train");
    opt(t, "mc_samples", cfg.train.mc_samples, "train");
    opt(t, "warmup_epochs", cfg.train.warmup_epochs, "train");
    opt(t, "per_example_noise", cfg.train.per_example_noise, "train");
  }
  if (auto it = j.find("prior"); it != j.end()) {
    check_keys(*it, {"lambda"}, "prior");
    opt(*it, "lambda", cfg.prior.lambda, "prior");
  }
  if (auto it = j.find("active"); it != j.end()) {
    const auto& a = *it;
    check_keys(a, {"rounds", "acquire", "initial_per_class", "epochs_per_round", "trials", "pool_size", "acquisition",
                   "warm_start"},
               "active");
    opt(a, "rounds", cfg.active.rounds, "active");
    opt(a, "acquire", cfg.active.acquire, "active");
    opt(a, "initial_per_class", cfg.active.initial_per_class, "active");
    opt(a, "epochs_per_round", cfg.active.epochs_per_round, "active");
    opt(a, "trials", cfg.active.trials, "active");
    opt(a, "pool_size", cfg.active.pool_size, "active");
    opt(a, "acquisition", cfg.active.acquisition, "active");
    if (a.contains("warm_start")) {
      if (a["warm_start"].is_null()) {
        cfg.active.warm_start.reset();
      } else {
        bool w = false;
        opt(a, "warm_start", w, "active");
        cfg.active.warm_start = w;
      }
    }
  }
  if (auto it = j.find("anomaly"); it != j.end()) {
    const auto& a = *it;
    check_keys(a, {"mode", "sources", "ood_images", "n_ood", "excluded_class"}, "anomaly");
    opt(a, "mode", cfg.anomaly.mode, "anomaly");
    opt(a, "sources", cfg.anomaly.sources, "anomaly");
    opt(a, "ood_images", cfg.anomaly.ood_images, "anomaly");
    opt(a, "n_ood", cfg.anomaly.n_ood, "anomaly");
    opt(a, "excluded_class", cfg.anomaly.excluded_class, "anomaly");
  }
  if (auto it = j.find("adversary"); it != j.end()) {
    const auto& a = *it;
    check_keys(a, {"steps", "grad_samples", "clamp", "clipped_loss", "n_attack"}, "adversary");
    opt(a, "steps", cfg.adversary.attack.steps, "adversary");
    opt(a, "grad_samples", cfg.adversary.grad_samples, "adversary");
    opt(a, "clipped_loss", cfg.adversary.attack.clipped_loss, "adversary");
    opt(a, "n_attack", cfg.adversary.n_attack, "adversary");
    if (a.contains("clamp")) {
      std::vector<double> c;
      opt(a, "clamp", c, "adversary");
      if (c.size() != 2) throw ConfigError("adversary.clamp must be [lo, hi]");
      cfg.adversary.attack.lo = c[0];
      cfg.adversary.attack.hi = c[1];
    }
  }
}

inline json to_json(const ExperimentConfig& c) {
  json j = {{"task", c.task},
            {"run_id", c.run_id},
            {"output_dir", c.output_dir},
            {"eval_samples", c.eval_samples},
            {"grid_points", c.grid_points},
            {"posterior_draws", c.posterior_draws},
            {"scores", c.scores}};
  j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
  const auto& g = c.data.glyphs;
  j["data"] = {{"source", c.data.source},
               {"n_train", c.data.n_train},
               {"n_test", c.data.n_test},
               {"train_images", c.data.train_images},
               {"train_labels", c.data.train_labels},
               {"test_images", c.data.test_images},
               {"test_labels", c.data.test_labels},
               {"noise_sd", c.data.noise_sd},
               {"glyphs",
                {{"side", g.side},
                 {"classes", g.classes},
                 {"strokes", g.strokes},
                 {"endpoint_jitter", g.endpoint_jitter},
                 {"max_shift", g.max_shift},
                 {"pixel_noise", g.pixel_noise},
                 {"stroke_width", g.stroke_width},
                 {"style_seed", g.style_seed}}}};
  const auto& m = c.model;
  j["model"] = {{"kind", m.kind},
                {"flow", m.flow},
                {"depth", m.depth},
                {"flow_hidden", m.flow_hidden},
                {"hidden", m.hidden},
                {"activation", m.activation},
                {"dropout", m.dropout},
                {"init_scale", m.init_scale},
                {"init_mean", m.init_mean},
                {"init_log_sigma", m.init_log_sigma},
                {"init_log_var", m.init_log_var},
                {"bias_init", m.bias_init}};
  const auto& t = c.train;
  j["train"] = {{"lr", t.lr},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"adam_eps", t.adam_eps},
                {"batch_size", t.batch_size},
                {"clip_norm", t.clip_norm},
                {"epochs", t.epochs},
                {"mc_samples", t.mc_samples},
                {"warmup_epochs", t.warmup_epochs},
                {"per_example_noise", t.per_example_noise}};
  j["prior"] = {{"lambda", c.prior.lambda}};
  const auto& a = c.active;
  j["active"] = {{"rounds", a.rounds},
                 {"acquire", a.acquire},
                 {"initial_per_class", a.initial_per_class},
                 {"epochs_per_round", a.epochs_per_round},
                 {"trials", a.trials},
                 {"pool_size", a.pool_size},
                 {"acquisition", a.acquisition}};
  j["active"]["warm_start"] = a.warm_start ? json(*a.warm_start) : json(nullptr);
  j["anomaly"] = {{"mode", c.anomaly.mode},
                  {"sources", c.anomaly.sources},
                  {"ood_images", c.anomaly.ood_images},
                  {"n_ood", c.anomaly.n_ood},
                  {"excluded_class", c.anomaly.excluded_class}};
  j["adversary"] = {{"steps", c.adversary.attack.steps},
                    {"grad_samples", c.adversary.grad_samples},
                    {"clamp", {c.adversary.attack.lo, c.adversary.attack.hi}},
                    {"clipped_loss", c.adversary.attack.clipped_loss},
                    {"n_attack", c.adversary.n_attack}};
  return j;
}

/// Defaults for one task; everything else keeps the struct defaults.
inline ExperimentConfig task_defaults(const std::string& task) {
  ExperimentConfig c;
  c.task = task;
  c.train.lr = 1e-3;
  c.train.batch_size = 100;
  c.train.epochs = 20;
  if (task == "regress-demo") {
    c.data.source = "toy_regression";
    c.data.n_train = 50;
    c.data.noise_sd = 0.02;
    c.model.hidden = {50};
    c.model.activation = "relu";
    c.model.depth = 4;
    c.model.flow_hidden = 32;
    c.train.lr = 1e-2;
    c.train.batch_size = 50;
    c.train.epochs = 5000;
  } else if (task == "multimodal-demo") {
    c.data.source = "linear";
    c.data.n_train = 100;
    c.data.noise_sd = 0.1;
    c.model.flow = "iaf";
    c.model.depth = 4;
    c.model.flow_hidden = 200;
    c.model.init_scale = 1e-2;
    c.model.init_mean = 0.0;
    c.model.init_log_sigma = 0.0;
    c.train.lr = 1e-3;
    c.train.batch_size = 100;
    c.train.mc_samples = 8;
    c.train.epochs = 3000;
  } else if (task == "active-learn") {
    c.data.n_test = 1000;
    c.model.hidden = {64};
    c.train.batch_size = 20;
  } else if (task == "adversary") {
    c.adversary.attack.steps = {0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3};
  }
  return c;
}

/// Task defaults, then the file (if any), then `overrides`.
inline ExperimentConfig load_config(const std::string& task, const std::optional<json>& file,
                                    const json& overrides = json::object()) {
  std::string t = task;
  if (file && file->contains("task") && t.empty()) t = (*file)["task"].get<std::string>();
  ExperimentConfig c = task_defaults(t.empty() ? "classify" : t);
  if (file) apply_json(c, *file);
  apply_json(c, overrides);
  if (!task.empty()) c.task = task;
  c.validate();
  return c;
}

}  // namespace bhn::harness
