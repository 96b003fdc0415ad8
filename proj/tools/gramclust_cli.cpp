#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gramclust/errors.hpp"
#include "gramclust/nets.hpp"
#include "gramclust/parallel.hpp"
#include "gramclust/pipeline.hpp"
#include "gramclust/synthdata.hpp"

namespace fs = std::filesystem;
using namespace gramclust;

namespace {

struct GlobalOpts {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::string out = "run";
  std::size_t threads = 0;
  bool quiet = false;
};

void add_globals(CLI::App* sub, GlobalOpts& g) {
  sub->add_option("--config", g.config_path, "JSON config file");
  sub->add_option("--seed", g.seed, "override the config seed");
  sub->add_option("--out", g.out, "run directory for artifacts")
      ->capture_default_str();
  sub->add_option("--threads", g.threads, "worker threads (0 = all cores)");
  sub->add_flag("--quiet", g.quiet, "suppress the end-of-run summary");
}

PipelineConfig load_config(const GlobalOpts& g) {
  PipelineConfig cfg = g.config_path.empty() ? default_pipeline_config()
                                             : pipeline_config_load(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  validate(cfg);
  return cfg;
}

void say(const GlobalOpts& g, const std::string& line) {
  if (!g.quiet) std::printf("%s\n", line.c_str());
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

void print_eval(const GlobalOpts& g, const EvalMetrics& ev) {
  say(g, "test_ind   worst-group " + pct(ev.test_ind.worst) + "  average " +
             pct(ev.test_ind.avg));
  say(g, "test_shift worst-group " + pct(ev.test_shift.worst) + "  average " +
             pct(ev.test_shift.avg));
}

int cmd_synth(const GlobalOpts& g) {
  const auto cfg = load_config(g);
  if (!cfg.dataset_dir.empty())
    throw ConfigError("synth generates a dataset; config must not point at one");
  SynthConfig ds = cfg.dataset;
  ds.seed = cfg.seed;
  const auto bundle = generate(ds);
  bundle_save(bundle, g.out);
  say(g, "wrote dataset (" + std::to_string(bundle.train.size()) + " train / " +
             std::to_string(bundle.val.size()) + " val / " +
             std::to_string(bundle.test_ind.size()) + " + " +
             std::to_string(bundle.test_shift.size()) + " test) to " + g.out);
  return 0;
}

int cmd_discover(const GlobalOpts& g) {
  const auto cfg = load_config(g);
  const auto bundle = obtain_dataset(cfg, g.out, true);
  const auto disc = run_discovery(cfg, bundle, g.out);
  say(g, "clusters: " + std::to_string(disc.clusters.counts.size()) +
             ", train matching " + pct(disc.train_match.matching_accuracy) +
             ", val matching " + pct(disc.val_match.matching_accuracy));
  return 0;
}

int cmd_train(const GlobalOpts& g) {
  const auto cfg = load_config(g);
  const auto stage = run_train_command(cfg, g.out);
  say(g, "trained " + stage.outcome.report.method + " for " +
             std::to_string(stage.outcome.report.epochs.size()) + " epochs");
  print_eval(g, stage.eval);
  return 0;
}

int cmd_eval(const GlobalOpts& g, const std::string& checkpoint) {
  const auto cfg = load_config(g);
  const auto params = checkpoint_load(checkpoint);
  const auto bundle = obtain_dataset(cfg, g.out, false);
  const auto ev = evaluate_model(params, bundle);
  fs::create_directories(fs::path(g.out) / "reports");
  const auto report = fs::path(g.out) / "reports" / "eval.json";
  {
    std::string j = "{\n  \"schema_version\": 1,\n  \"metric_groups\": \"true\",\n";
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "  \"test_ind\": {\"worst_group_accuracy\": %.10g, \"average_accuracy\": "
                  "%.10g},\n  \"test_shift\": {\"worst_group_accuracy\": %.10g, "
                  "\"average_accuracy\": %.10g}\n}\n",
                  ev.test_ind.worst, ev.test_ind.avg, ev.test_shift.worst,
                  ev.test_shift.avg);
    j += buf;
    std::FILE* f = std::fopen(report.c_str(), "w");
    if (!f) throw IoError(IoErrorKind::OpenFailed, report.string(), "cannot open");
    std::fputs(j.c_str(), f);
    std::fclose(f);
  }
  print_eval(g, ev);
  return 0;
}

int cmd_grid(const GlobalOpts& g) {
  const auto cfg = load_config(g);
  const auto bundle = obtain_dataset(cfg, g.out, true);
  std::optional<DiscoveryOutput> disc;
  if (needs_pseudo_groups(cfg)) disc = run_discovery(cfg, bundle, g.out);
  const auto grid = grid_search(cfg, bundle, disc ? &*disc : nullptr, g.out);
  const auto& chosen = grid.cells[static_cast<std::size_t>(grid.chosen)];
  char buf[128];
  std::snprintf(buf, sizeof buf, "chose lr=%g l2=%g from %zu cells", chosen.lr, chosen.l2,
                grid.cells.size());
  say(g, buf);
  print_eval(g, chosen.eval);
  return 0;
}

int cmd_pipeline(const GlobalOpts& g) {
  const auto cfg = load_config(g);
  const auto res = run_pipeline(cfg, g.out);
  if (res.discovery)
    say(g, "discovery val matching " + pct(res.discovery->val_match.matching_accuracy));
  const auto& chosen = res.grid.cells[static_cast<std::size_t>(res.grid.chosen)];
  char buf[128];
  std::snprintf(buf, sizeof buf, "chose lr=%g l2=%g", chosen.lr, chosen.l2);
  say(g, buf);
  print_eval(g, res.final_eval);
  return 0;
}

int cmd_sweep_k(const GlobalOpts& g) {
  const auto cfg = load_config(g);
  const auto entries = sweep_clusters(cfg, cfg.sweep_ks, g.out);
  for (const auto& e : entries) {
    if (e.failed) {
      say(g, "k=" + std::to_string(e.k) + "  FAILED: " + e.error);
    } else {
      say(g, "k=" + std::to_string(e.k) + "  val matching " + pct(e.val_matching) +
                 "  test_ind worst " + pct(e.eval.test_ind.worst));
    }
  }
  return 0;
}

int cmd_sweep_layers(const GlobalOpts& g) {
  const auto cfg = load_config(g);
  const auto entries = sweep_layers(cfg, cfg.sweep_layer_sets, g.out);
  for (const auto& e : entries) {
    std::string ids;
    for (const auto id : e.layer_ids) {
      if (!ids.empty()) ids += ',';
      ids += std::to_string(id);
    }
    if (e.failed) {
      say(g, "layers {" + ids + "}  FAILED: " + e.error);
    } else {
      say(g, "layers {" + ids + "}  train matching " + pct(e.train_matching) +
                 "  val matching " + pct(e.val_matching));
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Environment discovery and group-robust training on synthetic data"};
  app.require_subcommand(1);

  GlobalOpts g;
  std::string checkpoint;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset directory");
  auto* discover = app.add_subcommand("discover", "train id model, cluster style features");
  auto* train = app.add_subcommand("train", "single-point robust training run");
  auto* eval = app.add_subcommand("eval", "true-group test metrics for a checkpoint");
  auto* grid = app.add_subcommand("grid", "hyperparameter grid search");
  auto* pipeline = app.add_subcommand("pipeline", "all stages end to end");
  auto* sweepk = app.add_subcommand("sweep-k", "full pipeline per cluster count");
  auto* sweepl = app.add_subcommand("sweep-layers", "discovery per layer set");

  for (auto* sub : {synth, discover, train, eval, grid, pipeline, sweepk, sweepl})
    add_globals(sub, g);
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (g.threads != 0) set_thread_count(g.threads);
    if (synth->parsed()) return cmd_synth(g);
    if (discover->parsed()) return cmd_discover(g);
    if (train->parsed()) return cmd_train(g);
    if (eval->parsed()) return cmd_eval(g, checkpoint);
    if (grid->parsed()) return cmd_grid(g);
    if (pipeline->parsed()) return cmd_pipeline(g);
    if (sweepk->parsed()) return cmd_sweep_k(g);
    if (sweepl->parsed()) return cmd_sweep_layers(g);
    std::fprintf(stderr, "no subcommand\n");
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}
