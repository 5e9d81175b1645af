#pragma once

// Experiment drivers. Each is a pure function of its configuration: all
// randomness flows from cfg.seed through a fixed sequence of derived seeds.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "bhn/attacks.hpp"
#include "bhn/bhn.hpp"
#include "bhn/harness/checkpoint.hpp"
#include "bhn/harness/config.hpp"
#include "bhn/harness/datasets.hpp"
#include "bhn/harness/metrics.hpp"
#include "bhn/tasks.hpp"
#include "bhn/uncertainty.hpp"

namespace bhn::harness {

/// Derived seeds, drawn in a fixed order from the run seed.
struct Seeds {
  std::uint64_t data, model, train, eval;
  explicit Seeds(std::uint64_t seed) {
    Rng r(seed);
    data = r.next_seed();
    model = r.next_seed();
    train = r.next_seed();
    eval = r.next_seed();
  }
};

struct Splits {
  Dataset train, test;
};

inline Dataset take_first(const Dataset& d, std::size_t n) {
  if (n >= d.size()) return d;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return d.subset(idx);
}

/// Classification data for the configured source.
inline Splits load_classification(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto& dc = cfg.data;
  Splits s;
  if (dc.source == "glyphs") {
    Rng r(seed);
    s.train = gen_glyphs(dc.glyphs, dc.n_train, r.next_seed());
    s.test = gen_glyphs(dc.glyphs, dc.n_test, r.next_seed());
  } else if (dc.source == "idx") {
    if (dc.train_images.empty() || dc.train_labels.empty() || dc.test_images.empty() || dc.test_labels.empty())
      throw ConfigError("idx source needs train/test image and label paths");
    s.train = take_first(load_idx(dc.train_images, dc.train_labels), dc.n_train);
    s.test = take_first(load_idx(dc.test_images, dc.test_labels, s.train.classes), dc.n_test);
    s.train.classes = s.test.classes = std::max(s.train.classes, s.test.classes);
  } else {
    throw ConfigError("task '" + cfg.task + "' needs a classification source (glyphs | idx), got '" + dc.source + "'");
  }
  if (s.train.empty() || s.test.empty()) throw DataError("classification data is empty");
  s.train.validate();
  s.test.validate();
  return s;
}

inline net::PrimaryNetSpec net_spec(const ExperimentConfig& cfg, std::size_t inputs, std::size_t outputs,
                                    net::Head head) {
  return net::PrimaryNetSpec::mlp(inputs, cfg.model.hidden, outputs, head,
                                  net::activation_from_string(cfg.model.activation));
}

inline Model build_model(const ExperimentConfig& cfg, const net::PrimaryNetSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  return make_model(model_kind_from_string(cfg.model.kind), spec, rng, cfg.model_init(), cfg.prior,
                    cfg.model.dropout);
}

inline TrainConfig train_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  return tc;
}

/// Trains and appends one metrics line per epoch; divergence is fatal.
inline TrainReport train_logged(TrainState& st, const Dataset& data, const TrainConfig& tc, MetricLog& log,
                                std::size_t& step, const std::string& phase = "train") {
  auto report = train(st, data, tc, [&](const TrainState&, EpochMetrics& em) {
    log.record(++step, {{"epoch", static_cast<double>(em.epoch)},
                        {"elbo", em.elbo},
                        {"log_lik", em.log_lik},
                        {"log_prior", em.log_prior},
                        {"log_q", em.log_q},
                        {"grad_norm", em.grad_norm},
                        {"kl_weight", em.kl_weight}},
               phase);
  });
  if (report.diverged) throw NumericalError(report.message);
  return report;
}

inline Table epoch_curves(const TrainReport& r) {
  Table t({"epoch", "elbo", "log_lik", "log_prior", "log_q", "grad_norm"});
  for (const auto& e : r.epochs)
    t.add({static_cast<double>(e.epoch), e.elbo, e.log_lik, e.log_prior, e.log_q, e.grad_norm});
  return t;
}

inline void maybe_checkpoint(const ExperimentConfig& cfg, const TrainState& st) {
  if (cfg.output_dir.empty()) return;
  std::filesystem::create_directories(cfg.output_dir);
  save_checkpoint((std::filesystem::path(cfg.output_dir) / "checkpoint.bin").string(), {st, to_json(cfg)});
}

inline void finish(const ExperimentConfig& cfg, const RunOutput& out) {
  if (!cfg.output_dir.empty()) write_outputs(cfg.output_dir, out);
}

/// Mean log predictive probability of the true labels.
inline double mean_log_predictive(const Tensor& probs, const Dataset& d) {
  double s = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    double z = 0;
    for (std::size_t c = 0; c < probs.cols(); ++c) z += probs.at(i, c);
    s += std::log(probs.at(i, d.label(i)) / z);
  }
  return s / static_cast<double>(d.size());
}

// ---- regression demo -----------------------------------------------------

inline RunOutput run_regression_demo(const ExperimentConfig& cfg) {
  const Seeds sd(cfg.require_seed());
  RunOutput out{MetricLog(cfg.run_id), {}, {}, json::object()};
  const Dataset data = cfg.data.source == "linear" ? gen_overparam_linear(cfg.data.n_train, cfg.data.noise_sd, sd.data)
                                                    : gen_toy_regression(cfg.data.n_train, sd.data, cfg.data.noise_sd);
  TrainState st(build_model(cfg, net_spec(cfg, 1, 1, net::Head::Regression), sd.model), train_config(cfg, sd.train));
  std::size_t step = 0;
  auto report = train_logged(st, data, train_config(cfg, sd.train), out.metrics, step);

  const std::size_t n = std::max<std::size_t>(cfg.grid_points, 2);
  Tensor grid(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) grid[i] = -0.5 + 1.7 * static_cast<double>(i) / static_cast<double>(n - 1);
  Rng er(sd.eval);
  const auto pred = predict(st.model, grid, cfg.eval_samples, er);
  const double noise_sd = std::exp(0.5 * st.model.params.get(kLogVar)[0]);

  out.curves = Table({"x", "mean", "std", "lower", "upper"});
  double in_sum = 0, out_sum = 0;
  std::size_t in_n = 0, out_n = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = grid[i], m = pred.mean[i], s = pred.std[i];
    out.curves.add({x, m, s, m - 2 * s, m + 2 * s});
    if (x >= 0.1 && x <= 0.4) in_sum += s, ++in_n;
    if (x >= 0.8 && x <= 1.2) out_sum += s, ++out_n;
  }
  const double inside = in_n ? in_sum / static_cast<double>(in_n) : 0.0;
  const double outside = out_n ? out_sum / static_cast<double>(out_n) : 0.0;
  out.summary = Table({"run", "model", "depth", "std_inside", "std_outside", "ratio", "noise_sd", "final_elbo"});
  out.summary.add({cfg.run_id, cfg.model.kind, static_cast<double>(cfg.model.depth), inside, outside,
                   inside > 0 ? outside / inside : INFINITY, noise_sd,
                   report.epochs.empty() ? NAN : report.epochs.back().elbo});
  out.report = {{"std_inside", inside}, {"std_outside", outside}, {"noise_sd", noise_sd}};
  maybe_checkpoint(cfg, st);
  finish(cfg, out);
  return out;
}

// ---- multimodal demo -----------------------------------------------------

inline RunOutput run_multimodal_demo(const ExperimentConfig& cfg) {
  const Seeds sd(cfg.require_seed());
  RunOutput out{MetricLog(cfg.run_id), {}, {}, json::object()};
  const Dataset data = gen_overparam_linear(cfg.data.n_train, cfg.data.noise_sd, sd.data);
  Rng mr(sd.model);
  const auto kind = flows::flow_kind_from_string(cfg.model.flow);
  const auto noise = std::max(cfg.data.noise_sd, 1e-3);
  auto task = product_task(noise, kind, cfg.model.depth, cfg.model.flow_hidden, mr, cfg.prior,
                           {cfg.model.init_scale, cfg.model.init_mean, cfg.model.init_log_sigma});
  auto tc = train_config(cfg, sd.train);
  tc.frozen = task.frozen;
  TrainState st(task.model, tc);
  std::size_t step = 0;
  train_logged(st, data, tc, out.metrics, step);

  Rng er(sd.eval);
  const Tensor g = sample_g(st.model, cfg.posterior_draws, er);
  out.curves = Table({"draw", "a", "b", "ab"});
  std::size_t pp = 0, mm = 0, pm = 0, mp = 0;
  std::vector<double> ab(g.rows());
  for (std::size_t k = 0; k < g.rows(); ++k) {
    const double a = g.at(k, 0), b = g.at(k, 1);
    ab[k] = a * b;
    out.curves.add({static_cast<double>(k), a, b, ab[k]});
    (a >= 0 ? (b >= 0 ? pp : pm) : (b >= 0 ? mp : mm)) += 1;
  }
  std::nth_element(ab.begin(), ab.begin() + static_cast<std::ptrdiff_t>(ab.size() / 2), ab.end());
  const double median = ab[ab.size() / 2];
  const double m = static_cast<double>(g.rows());
  out.summary = Table({"run", "flow", "depth", "frac_pp", "frac_mm", "frac_pm", "frac_mp", "median_ab"});
  out.summary.add({cfg.run_id, cfg.model.flow, static_cast<double>(cfg.model.depth), pp / m, mm / m, pm / m, mp / m,
                   median});
  out.report = {{"frac_pp", pp / m}, {"frac_mm", mm / m}, {"frac_pm", pm / m}, {"frac_mp", mp / m},
                {"median_ab", median}};
  maybe_checkpoint(cfg, st);
  finish(cfg, out);
  return out;
}

// ---- classification ------------------------------------------------------

struct Trained {
  TrainState state;
  TrainReport report;
  Splits data;
};

inline Trained train_classifier(const ExperimentConfig& cfg, const Seeds& sd, MetricLog& log, std::size_t& step) {
  Splits data = load_classification(cfg, sd.data);
  auto tc = train_config(cfg, sd.train);
  TrainState st(build_model(cfg, net_spec(cfg, data.train.dim, data.train.classes, net::Head::Classifier), sd.model),
                tc);
  auto report = train_logged(st, data.train, tc, log, step);
  return {std::move(st), std::move(report), std::move(data)};
}

inline RunOutput run_classification(const ExperimentConfig& cfg) {
  const Seeds sd(cfg.require_seed());
  RunOutput out{MetricLog(cfg.run_id), {}, {}, json::object()};
  std::size_t step = 0;
  auto t = train_classifier(cfg, sd, out.metrics, step);
  Rng er(sd.eval);
  const auto pred = predict(t.state.model, t.data.test.inputs(), cfg.eval_samples, er);
  const double acc = accuracy(pred.mean, t.data.test);
  const double lp = mean_log_predictive(pred.mean, t.data.test);
  out.metrics.record(step, {{"test_accuracy", acc}, {"test_log_predictive", lp}}, "eval");
  out.curves = epoch_curves(t.report);
  out.summary = Table({"run", "model", "flow", "depth", "n_train", "n_test", "test_accuracy", "test_log_predictive",
                       "final_elbo"});
  out.summary.add({cfg.run_id, cfg.model.kind, cfg.model.flow, static_cast<double>(cfg.model.depth),
                   static_cast<double>(t.data.train.size()), static_cast<double>(t.data.test.size()), acc, lp,
                   t.report.epochs.empty() ? NAN : t.report.epochs.back().elbo});
  out.report = {{"test_accuracy", acc}, {"test_log_predictive", lp}};
  maybe_checkpoint(cfg, t.state);
  finish(cfg, out);
  return out;
}

/// Trains (or resumes) and saves the checkpoint; works for both heads.
inline RunOutput run_train(const ExperimentConfig& cfg, const std::optional<std::string>& resume = std::nullopt) {
  const Seeds sd(cfg.require_seed());
  RunOutput out{MetricLog(cfg.run_id), {}, {}, json::object()};
  const bool regression = cfg.data.source == "toy_regression" || cfg.data.source == "linear";
  Splits data;
  if (regression) {
    data.train = cfg.data.source == "linear" ? gen_overparam_linear(cfg.data.n_train, cfg.data.noise_sd, sd.data)
                                             : gen_toy_regression(cfg.data.n_train, sd.data, cfg.data.noise_sd);
  } else {
    data = load_classification(cfg, sd.data);
  }
  auto tc = train_config(cfg, sd.train);
  std::optional<TrainState> st;
  if (resume) {
    auto ck = load_checkpoint(*resume);
    st.emplace(std::move(ck.state));
  } else {
    const auto spec = regression ? net_spec(cfg, 1, 1, net::Head::Regression)
                                 : net_spec(cfg, data.train.dim, data.train.classes, net::Head::Classifier);
    st.emplace(build_model(cfg, spec, sd.model), tc);
  }
  std::size_t step = st->epoch;
  auto report = train_logged(*st, data.train, tc, out.metrics, step);
  out.curves = epoch_curves(report);
  double acc = NAN;
  if (!regression) {
    Rng er(sd.eval);
    acc = accuracy(predict(st->model, data.test.inputs(), cfg.eval_samples, er).mean, data.test);
    out.metrics.record(step, {{"test_accuracy", acc}}, "eval");
  }
  out.summary = Table({"run", "model", "depth", "epochs_total", "final_elbo", "test_accuracy"});
  out.summary.add({cfg.run_id, cfg.model.kind, static_cast<double>(cfg.model.depth), static_cast<double>(st->epoch),
                   report.epochs.empty() ? NAN : report.epochs.back().elbo, acc});
  out.report = {{"epochs_total", st->epoch}, {"test_accuracy", acc}};
  maybe_checkpoint(cfg, *st);
  finish(cfg, out);
  return out;
}

// ---- active learning -----------------------------------------------------

/// `per_class` indices of every class, drawn without replacement.
inline std::vector<std::size_t> balanced_seed_set(const Dataset& d, std::size_t per_class, Rng& rng) {
  std::vector<std::size_t> out;
  const auto order = rng.permutation(d.size());
  std::vector<std::size_t> count(d.classes, 0);
  for (auto i : order)
    if (count[d.label(i)] < per_class) {
      ++count[d.label(i)];
      out.push_back(i);
    }
  for (std::size_t c = 0; c < d.classes; ++c)
    if (count[c] < per_class) throw DataError("pool has fewer than " + std::to_string(per_class) + " examples of class " +
                                              std::to_string(c));
  std::sort(out.begin(), out.end());
  return out;
}

struct ActiveTrial {
  std::vector<std::size_t> train_sizes;
  std::vector<double> accuracy;
  std::vector<std::vector<std::size_t>> acquired;  // pool indices per round
};

inline ActiveTrial run_active_trial(const ExperimentConfig& cfg, const Splits& data, std::uint64_t seed,
                                    MetricLog& log, std::size_t& step, std::size_t trial) {
  const auto& ac = cfg.active;
  const auto kind = model_kind_from_string(cfg.model.kind);
  const bool warm = ac.warm_start.value_or(kind == ModelKind::Bhn);
  Rng rng(seed);
  const std::uint64_t model_seed = rng.next_seed();
  auto labelled = balanced_seed_set(data.train, ac.initial_per_class, rng);
  std::vector<std::size_t> pool;
  {
    std::vector<char> used(data.train.size(), 0);
    for (auto i : labelled) used[i] = 1;
    for (std::size_t i = 0; i < data.train.size(); ++i)
      if (!used[i]) pool.push_back(i);
  }
  const auto spec = net_spec(cfg, data.train.dim, data.train.classes, net::Head::Classifier);
  auto tc = train_config(cfg, rng.next_seed());
  tc.epochs = ac.epochs_per_round;
  TrainState st(build_model(cfg, spec, model_seed), tc);
  const Tensor test_x = data.test.inputs();
  const bool random = ac.acquisition == "random";
  const auto score = random ? uq::Score::Bald : uq::score_from_string(ac.acquisition);

  ActiveTrial out;
  for (std::size_t round = 0;; ++round) {
    if (!warm) st = TrainState(build_model(cfg, spec, model_seed), tc);
    tc.seed = rng.next_seed();
    st.rng = Rng(tc.seed);
    const Dataset train_set = data.train.subset(labelled);
    train_logged(st, train_set, tc, log, step, "trial " + std::to_string(trial) + " round " + std::to_string(round));
    Rng er(rng.next_seed());
    const double acc = accuracy(predict(st.model, test_x, cfg.eval_samples, er).mean, data.test);
    out.train_sizes.push_back(labelled.size());
    out.accuracy.push_back(acc);
    log.record(step,
               {{"trial", static_cast<double>(trial)},
                {"round", static_cast<double>(round)},
                {"n_labelled", static_cast<double>(labelled.size())},
                {"test_accuracy", acc}},
               "acquire");
    if (round == ac.rounds || pool.empty()) break;

    const std::size_t take = std::min(ac.acquire, pool.size());
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    if (random) {
      rng.shuffle(order.begin(), order.end());
    } else {
      Rng sr(rng.next_seed());
      const auto pred = predict(st.model, data.train.inputs(pool), cfg.eval_samples, sr);
      const auto s = uq::score_batch(score, pred.samples);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    }
    std::vector<std::size_t> picked;
    std::vector<char> drop(pool.size(), 0);
    for (std::size_t k = 0; k < take; ++k) {
      picked.push_back(pool[order[k]]);
      drop[order[k]] = 1;
    }
    std::vector<std::size_t> rest;
    for (std::size_t k = 0; k < pool.size(); ++k)
      if (!drop[k]) rest.push_back(pool[k]);
    pool = std::move(rest);
    labelled.insert(labelled.end(), picked.begin(), picked.end());
    out.acquired.push_back(std::move(picked));
  }
  return out;
}

inline RunOutput run_active_learning(const ExperimentConfig& cfg) {
  const Seeds sd(cfg.require_seed());
  RunOutput out{MetricLog(cfg.run_id), {}, {}, json::object()};
  ExperimentConfig dc = cfg;
  dc.data.n_train = cfg.active.pool_size;
  const Splits data = load_classification(dc, sd.data);
  std::size_t step = 0;
  Rng tr(sd.train);
  std::vector<ActiveTrial> trials;
  for (std::size_t t = 0; t < std::max<std::size_t>(cfg.active.trials, 1); ++t)
    trials.push_back(run_active_trial(cfg, data, tr.next_seed(), out.metrics, step, t));

  out.curves = Table({"round", "n_labelled", "mean_accuracy", "trials"});
  std::size_t rounds = 0;
  for (const auto& t : trials) rounds = std::max(rounds, t.accuracy.size());
  for (std::size_t r = 0; r < rounds; ++r) {
    double s = 0;
    std::size_t n = 0, size = 0;
    for (const auto& t : trials)
      if (r < t.accuracy.size()) s += t.accuracy[r], ++n, size = t.train_sizes[r];
    out.curves.add({static_cast<double>(r), static_cast<double>(size), s / static_cast<double>(n),
                    static_cast<double>(n)});
  }
  const bool warm = cfg.active.warm_start.value_or(model_kind_from_string(cfg.model.kind) == ModelKind::Bhn);
  const double final_acc = out.curves.number(out.curves.size() - 1, "mean_accuracy");
  out.summary = Table({"run", "model", "acquisition", "warm_start", "rounds", "final_n_labelled", "final_accuracy"});
  out.summary.add({cfg.run_id, cfg.model.kind, cfg.active.acquisition, warm ? "true" : "false",
                   static_cast<double>(rounds - 1), out.curves.number(out.curves.size() - 1, "n_labelled"),
                   final_acc});
  json acq = json::array();
  for (const auto& t : trials) acq.push_back(t.acquired);
  out.report = {{"final_accuracy", final_acc}, {"acquired", acq}, {"warm_start", warm}};
  finish(cfg, out);
  return out;
}

// ---- anomaly detection ---------------------------------------------------

struct DetectionRow {
  std::string source, score;
  double auc_roc, auc_pr_pos, auc_pr_neg;
};

inline std::vector<DetectionRow> detection_table(const std::vector<Tensor>& nominal, const std::vector<Tensor>& anomalous,
                                                 const std::string& source, const std::vector<uq::Score>& scores) {
  std::vector<DetectionRow> rows;
  for (auto s : scores) {
    auto a = uq::score_batch(s, nominal);
    const auto b = uq::score_batch(s, anomalous);
    std::vector<int> lab(a.size(), 0);
    a.insert(a.end(), b.begin(), b.end());
    lab.resize(a.size(), 1);
    rows.push_back({source, uq::to_string(s), uq::auc_roc(a, lab), uq::auc_pr(a, lab, uq::Positive::Anomaly),
                    uq::auc_pr(a, lab, uq::Positive::Nominal)});
  }
  return rows;
}

inline RunOutput run_anomaly_detection(const ExperimentConfig& cfg) {
  const Seeds sd(cfg.require_seed());
  RunOutput out{MetricLog(cfg.run_id), {}, {}, json::object()};
  Splits data = load_classification(cfg, sd.data);
  std::vector<std::pair<std::string, Dataset>> sources;
  Dataset nominal_test = data.test;
  if (cfg.anomaly.mode == "unseen") {
    const auto ex = cfg.anomaly.excluded_class;
    data.train = split_by_class(data.train, ex).first;
    auto [kept, held] = split_by_class(data.test, ex);
    nominal_test = kept;
    sources.emplace_back("class_" + std::to_string(ex), held);
  } else {
    Rng orng(sd.data ^ 0x5bd1e995ull);
    for (const auto& s : cfg.anomaly.sources) {
      if (s == "uniform")
        sources.emplace_back(s, uniform_noise(cfg.anomaly.n_ood, data.test.dim, orng.next_seed()));
      else if (s == "gaussian")
        sources.emplace_back(s, gaussian_noise(cfg.anomaly.n_ood, data.test.dim, orng.next_seed()));
      else if (s == "copy" && cfg.data.source == "glyphs")
        sources.emplace_back(s, gen_glyphs(cfg.data.glyphs, cfg.anomaly.n_ood, orng.next_seed()));
      else if (s == "copy")
        sources.emplace_back(s, data.test);
      else {
        if (cfg.anomaly.ood_images.empty()) throw ConfigError("OOD source 'idx' needs anomaly.ood_images");
        auto d = take_first(load_idx_images(cfg.anomaly.ood_images), cfg.anomaly.n_ood);
        if (d.dim != data.test.dim) throw DataError("OOD images differ in size from the training images");
        sources.emplace_back(s, d);
      }
    }
  }
  if (nominal_test.empty()) throw DataError("no in-distribution test examples");
  for (const auto& [name, d] : sources)
    if (d.empty()) throw DataError("OOD source '" + name + "' is empty");

  auto tc = train_config(cfg, sd.train);
  TrainState st(build_model(cfg, net_spec(cfg, data.train.dim, data.train.classes, net::Head::Classifier), sd.model),
                tc);
  std::size_t step = 0;
  train_logged(st, data.train, tc, out.metrics, step);

  // Every set is scored under the same posterior draws.
  Rng er(sd.eval);
  const auto nom = predict(st.model, nominal_test.inputs(), cfg.eval_samples, er);
  const double acc = accuracy(nom.mean, nominal_test);
  out.metrics.record(step, {{"test_accuracy", acc}}, "eval");
  out.summary = Table({"run", "model", "mode", "source", "score", "auc_roc", "auc_pr_pos", "auc_pr_neg"});
  json rep = json::object();
  for (const auto& [name, d] : sources) {
    er = Rng(sd.eval);
    const auto pred = predict(st.model, d.inputs(), cfg.eval_samples, er);
    for (const auto& r : detection_table(nom.samples, pred.samples, name, cfg.score_kinds())) {
      out.summary.add({cfg.run_id, cfg.model.kind, cfg.anomaly.mode, r.source, r.score, r.auc_roc, r.auc_pr_pos,
                       r.auc_pr_neg});
      rep[r.source][r.score] = {{"auc_roc", r.auc_roc}, {"auc_pr_pos", r.auc_pr_pos}, {"auc_pr_neg", r.auc_pr_neg}};
    }
  }
  out.curves = out.summary;
  out.report = {{"test_accuracy", acc}, {"detection", rep}};
  maybe_checkpoint(cfg, st);
  finish(cfg, out);
  return out;
}

// ---- adversarial examples ------------------------------------------------

inline RunOutput run_adversary_detection(const ExperimentConfig& cfg) {
  const Seeds sd(cfg.require_seed());
  RunOutput out{MetricLog(cfg.run_id), {}, {}, json::object()};
  std::size_t step = 0;
  auto t = train_classifier(cfg, sd, out.metrics, step);
  const Dataset target = take_first(t.data.test, cfg.adversary.n_attack);
  const auto scores = cfg.score_kinds();

  std::vector<std::string> cols{"grad_samples", "step", "accuracy"};
  for (auto s : scores) cols.push_back(uq::to_string(s) + "_mean");
  for (auto s : scores) cols.push_back(uq::to_string(s) + "_adv_auc");
  for (auto s : scores) cols.push_back(uq::to_string(s) + "_err_auc");
  out.curves = Table(cols);
  json rep = json::array();
  Rng ar(sd.eval);
  for (auto sg : cfg.adversary.grad_samples) {
    auto ac = cfg.adversary.attack;
    ac.grad_samples = sg;
    const auto recs = attacks::attack_sweep(t.state.model, target, ac, cfg.eval_samples, scores, ar.next_seed());
    for (const auto& r : recs) {
      std::vector<Table::Cell> row{static_cast<double>(sg), r.step, r.accuracy};
      for (auto s : scores) row.emplace_back(r.score_mean.at(uq::to_string(s)));
      for (auto s : scores) row.emplace_back(r.adversary_auc.at(uq::to_string(s)).value_or(NAN));
      for (auto s : scores) row.emplace_back(r.error_auc.at(uq::to_string(s)).value_or(NAN));
      out.curves.add(row);
      std::map<std::string, double> m{{"grad_samples", static_cast<double>(sg)}, {"step", r.step},
                                      {"accuracy", r.accuracy}};
      for (auto s : scores) m[uq::to_string(s) + "_mean"] = r.score_mean.at(uq::to_string(s));
      out.metrics.record(step, m, "attack");
      rep.push_back(m);
    }
  }
  out.summary = out.curves;
  out.report = {{"sweep", rep}};
  maybe_checkpoint(cfg, t.state);
  finish(cfg, out);
  return out;
}

/// Dispatch by task name.
inline RunOutput run_experiment(const ExperimentConfig& cfg, const std::optional<std::string>& resume = std::nullopt) {
  cfg.validate();
  if (cfg.task == "train") return run_train(cfg, resume);
  if (cfg.task == "regress-demo") return run_regression_demo(cfg);
  if (cfg.task == "multimodal-demo") return run_multimodal_demo(cfg);
  if (cfg.task == "classify") return run_classification(cfg);
  if (cfg.task == "active-learn") return run_active_learning(cfg);
  if (cfg.task == "anomaly") return run_anomaly_detection(cfg);
  if (cfg.task == "adversary") return run_adversary_detection(cfg);
  throw ConfigError("unknown task '" + cfg.task + "'");
}

}  // namespace bhn::harness
