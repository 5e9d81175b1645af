// bhn: command-line front end for the experiment harness.
//
//   bhn <command> [--config file.json] --seed N [flags]
//
// Flags override the config file, which overrides the task defaults.
// Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bhn/error.hpp"
#include "bhn/harness/checkpoint.hpp"
#include "bhn/harness/config.hpp"
#include "bhn/harness/experiments.hpp"
#include "bhn/harness/metrics.hpp"

namespace {

using json = nlohmann::json;
using namespace bhn;
using namespace bhn::harness;

/// Flags shared by every experiment command. Unset flags leave the config alone.
struct Flags {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, run_id, resume;
  bool wall_clock = false;
  bool quiet = false;

  std::optional<std::size_t> epochs, batch_size, mc_samples, warmup_epochs, eval_samples;
  std::optional<double> lr, clip_norm, prior_lambda, dropout, noise_sd;
  std::optional<std::string> model_kind, flow, activation, source, bias_init;
  std::optional<std::size_t> depth, flow_hidden, n_train, n_test;
  std::vector<std::size_t> hidden;
  std::optional<std::string> train_images, train_labels, test_images, test_labels;
  std::vector<std::string> scores;
  std::optional<std::size_t> grid_points, posterior_draws;
  std::optional<std::string> acquisition;
  std::optional<std::size_t> rounds, acquire, trials, epochs_per_round, pool_size;
  std::optional<bool> warm_start;
  std::optional<std::string> anomaly_mode, ood_images;
  std::vector<std::string> ood_sources;
  std::optional<std::size_t> excluded_class, n_ood, n_attack;
  std::vector<double> steps;
  std::vector<std::size_t> grad_samples;
};

void add_experiment_flags(CLI::App& app, Flags& f, const std::string& task) {
  app.add_option("--config", f.config_file, "JSON config file (flags take precedence)");
  app.add_option("--seed", f.seed, "Run seed (required)");
  app.add_option("--out", f.out, "Output directory (default bhn-out/<command>)");
  app.add_option("--run-id", f.run_id, "Run identifier written into metrics.jsonl");
  app.add_flag("--wall-clock", f.wall_clock, "Append elapsed seconds to metrics.jsonl");
  app.add_flag("-q,--quiet", f.quiet, "Print only errors");

  auto* t = app.add_option_group("training");
  t->add_option("--epochs", f.epochs);
  t->add_option("--lr", f.lr);
  t->add_option("--batch-size", f.batch_size);
  t->add_option("--mc-samples", f.mc_samples, "Noise draws per gradient step");
  t->add_option("--clip-norm", f.clip_norm, "Global gradient-norm clip");
  t->add_option("--warmup-epochs", f.warmup_epochs, "Linear KL warm-up length");
  t->add_option("--eval-samples", f.eval_samples, "Posterior samples S for prediction");

  auto* m = app.add_option_group("model");
  m->add_option("--model", f.model_kind, "bhn | mle | dropout");
  m->add_option("--flow", f.flow, "coupling | iaf | none");
  m->add_option("--depth", f.depth, "Flow layers (0 = factorial Gaussian)");
  m->add_option("--flow-hidden", f.flow_hidden, "Hidden units of each flow conditioner");
  m->add_option("--hidden", f.hidden, "Primary-net hidden layer sizes");
  m->add_option("--activation", f.activation, "relu | tanh | linear");
  m->add_option("--dropout", f.dropout, "Dropout rate for --model dropout");
  m->add_option("--bias-init", f.bias_init, "zero | fan_in");
  m->add_option("--prior-lambda", f.prior_lambda, "Prior variance of g");

  auto* d = app.add_option_group("data");
  d->add_option("--data", f.source, "glyphs | idx | toy_regression | linear");
  d->add_option("--n-train", f.n_train);
  d->add_option("--n-test", f.n_test);
  d->add_option("--noise-sd", f.noise_sd, "Noise of the generated regression data");
  d->add_option("--train-images", f.train_images);
  d->add_option("--train-labels", f.train_labels);
  d->add_option("--test-images", f.test_images);
  d->add_option("--test-labels", f.test_labels);

  app.add_option("--scores", f.scores, "variation_ratio bald mean_std entropy");
  if (task == "train") app.add_option("--resume", f.resume, "Continue from a checkpoint");
  if (task == "regress-demo") app.add_option("--grid-points", f.grid_points);
  if (task == "multimodal-demo") app.add_option("--posterior-draws", f.posterior_draws);
  if (task == "active-learn") {
    app.add_option("--acquisition", f.acquisition, "random | bald | variation_ratio | mean_std | entropy");
    app.add_option("--rounds", f.rounds);
    app.add_option("--acquire", f.acquire, "Examples acquired per round");
    app.add_option("--trials", f.trials);
    app.add_option("--epochs-per-round", f.epochs_per_round);
    app.add_option("--pool-size", f.pool_size);
    app.add_option("--warm-start", f.warm_start, "true | false (default: true for bhn)");
  }
  if (task == "anomaly") {
    app.add_option("--mode", f.anomaly_mode, "ood | unseen");
    app.add_option("--ood-sources", f.ood_sources, "uniform gaussian copy idx");
    app.add_option("--ood-images", f.ood_images, "IDX image file for the idx source");
    app.add_option("--excluded-class", f.excluded_class);
    app.add_option("--n-ood", f.n_ood);
  }
  if (task == "adversary") {
    app.add_option("--steps", f.steps, "FGS step sizes, ascending");
    app.add_option("--grad-samples", f.grad_samples, "Gradient sample counts S_g");
    app.add_option("--n-attack", f.n_attack, "Test examples attacked");
  }
}

template <class T>
void put(json& j, const std::initializer_list<const char*>& path, const std::optional<T>& v) {
  if (!v) return;
  json* node = &j;
  for (auto it = path.begin(); it + 1 != path.end(); ++it) node = &(*node)[*it];
  (*node)[*(path.end() - 1)] = *v;
}

template <class T>
void put(json& j, const std::initializer_list<const char*>& path, const std::vector<T>& v) {
  if (v.empty()) return;
  put(j, path, std::optional<std::vector<T>>(v));
}

json overrides(const Flags& f) {
  json j = json::object();
  put(j, {"seed"}, f.seed);
  put(j, {"output_dir"}, f.out);
  put(j, {"run_id"}, f.run_id);
  put(j, {"eval_samples"}, f.eval_samples);
  put(j, {"scores"}, f.scores);
  put(j, {"grid_points"}, f.grid_points);
  put(j, {"posterior_draws"}, f.posterior_draws);
  put(j, {"train", "epochs"}, f.epochs);
  put(j, {"train", "lr"}, f.lr);
  put(j, {"train", "batch_size"}, f.batch_size);
  put(j, {"train", "mc_samples"}, f.mc_samples);
  put(j, {"train", "clip_norm"}, f.clip_norm);
  put(j, {"train", "warmup_epochs"}, f.warmup_epochs);
  put(j, {"model", "kind"}, f.model_kind);
  put(j, {"model", "flow"}, f.flow);
  put(j, {"model", "depth"}, f.depth);
  put(j, {"model", "flow_hidden"}, f.flow_hidden);
  put(j, {"model", "hidden"}, f.hidden);
  put(j, {"model", "activation"}, f.activation);
  put(j, {"model", "dropout"}, f.dropout);
  put(j, {"model", "bias_init"}, f.bias_init);
  put(j, {"prior", "lambda"}, f.prior_lambda);
  put(j, {"data", "source"}, f.source);
  put(j, {"data", "n_train"}, f.n_train);
  put(j, {"data", "n_test"}, f.n_test);
  put(j, {"data", "noise_sd"}, f.noise_sd);
  put(j, {"data", "train_images"}, f.train_images);
  put(j, {"data", "train_labels"}, f.train_labels);
  put(j, {"data", "test_images"}, f.test_images);
  put(j, {"data", "test_labels"}, f.test_labels);
  put(j, {"active", "acquisition"}, f.acquisition);
  put(j, {"active", "rounds"}, f.rounds);
  put(j, {"active", "acquire"}, f.acquire);
  put(j, {"active", "trials"}, f.trials);
  put(j, {"active", "epochs_per_round"}, f.epochs_per_round);
  put(j, {"active", "pool_size"}, f.pool_size);
  put(j, {"active", "warm_start"}, f.warm_start);
  put(j, {"anomaly", "mode"}, f.anomaly_mode);
  put(j, {"anomaly", "sources"}, f.ood_sources);
  put(j, {"anomaly", "ood_images"}, f.ood_images);
  put(j, {"anomaly", "excluded_class"}, f.excluded_class);
  put(j, {"anomaly", "n_ood"}, f.n_ood);
  put(j, {"adversary", "steps"}, f.steps);
  put(j, {"adversary", "grad_samples"}, f.grad_samples);
  put(j, {"adversary", "n_attack"}, f.n_attack);
  return j;
}

std::optional<json> read_config(const std::string& path) {
  if (path.empty()) return std::nullopt;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
}

int run(const std::string& task, const Flags& f) {
  const auto t0 = std::chrono::steady_clock::now();
  auto cfg = load_config(task, read_config(f.config_file), overrides(f));
  cfg.require_seed();
  if (cfg.output_dir.empty()) cfg.output_dir = (std::filesystem::path("bhn-out") / task).string();
  auto out = run_experiment(cfg, f.resume);
  if (f.wall_clock) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const std::size_t step = out.metrics.lines().empty() ? 0 : out.metrics.lines().back()["step"].get<std::size_t>();
    out.metrics.record(step, {}, "wall_clock", s);
    write_text(std::filesystem::path(cfg.output_dir) / "metrics.jsonl", out.metrics.str());
  }
  if (!f.quiet) {
    std::cout << out.summary.csv();
    std::cout << "outputs written to " << cfg.output_dir << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian hypernetworks: training and uncertainty experiments"};
  app.require_subcommand(1);
  Flags flags;
  std::string checkpoint_path;
  std::vector<std::pair<std::string, CLI::App*>> experiments;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train", "Train one model and write checkpoint.bin"},
      {"regress-demo", "Toy 1-D regression: predictive mean and band"},
      {"multimodal-demo", "Posterior over (a, b) for y = a*b*x"},
      {"classify", "Train and report test accuracy"},
      {"active-learn", "Pool-based active learning curve"},
      {"anomaly", "Out-of-distribution and unseen-class detection"},
      {"adversary", "FGS attack sweep with adversary and error detection"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    add_experiment_flags(*sub, flags, name);
    experiments.emplace_back(name, sub);
  }
  auto* inspect = app.add_subcommand("inspect-checkpoint", "Print a checkpoint manifest as JSON");
  inspect->add_option("path", checkpoint_path, "checkpoint.bin")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code_for(ErrorKind::Config);
  }

  try {
    if (inspect->parsed()) {
      std::cout << checkpoint_summary(load_checkpoint(checkpoint_path)).dump(2) << "\n";
      return 0;
    }
    for (const auto& [name, sub] : experiments)
      if (sub->parsed()) return run(name, flags);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(ErrorKind::Data);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(ErrorKind::Config);
  }
  return exit_code_for(ErrorKind::Config);
}
