#include "gramclust/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "gramclust/errors.hpp"
#include "gramclust/parallel.hpp"
#include "gramclust/projection.hpp"
#include "gramclust/rng.hpp"
#include "gramclust/stylefeat.hpp"

namespace gramclust {

namespace {

constexpr uint64_t kIdSeedSalt = 0x10;
constexpr uint64_t kRobustSeedSalt = 0x20;
constexpr uint64_t kProjectorSeedSalt = 0x400;

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& ctx) {
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key))
      throw ConfigError("unknown key '" + key + "' in " + ctx);
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

void write_json_file(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(IoErrorKind::OpenFailed, path.string(), "cannot open for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError(IoErrorKind::WriteFailed, path.string(), "write failed");
}

void write_text_file(const std::string& text, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(IoErrorKind::OpenFailed, path.string(), "cannot open for writing");
  out << text;
  if (!out) throw IoError(IoErrorKind::WriteFailed, path.string(), "write failed");
}

SgdmConfig sgdm_fields(const json& j, const SgdmConfig& defaults) {
  SgdmConfig out = defaults;
  out.lr = get_or(j, "lr", out.lr);
  out.l2 = get_or(j, "l2", out.l2);
  out.momentum = get_or(j, "momentum", out.momentum);
  out.batch_size = get_or(j, "batch_size", out.batch_size);
  out.epochs = get_or(j, "epochs", out.epochs);
  return out;
}

SgdmConfig sgdm_from_json(const json& j, const SgdmConfig& defaults, const std::string& ctx) {
  check_keys(j, {"lr", "l2", "momentum", "batch_size", "epochs"}, ctx);
  return sgdm_fields(j, defaults);
}

json sgdm_to_json(const SgdmConfig& cfg) {
  json j;
  j["lr"] = cfg.lr;
  j["l2"] = cfg.l2;
  j["momentum"] = cfg.momentum;
  j["batch_size"] = cfg.batch_size;
  j["epochs"] = cfg.epochs;
  return j;
}

json split_metrics_to_json(const SplitMetrics& m) {
  json j;
  j["worst_group_accuracy"] = m.worst;
  j["average_accuracy"] = m.avg;
  j["per_group_accuracy"] = m.per_group;
  auto& cells = j["group_cells"] = json::array();
  for (const auto& [e, y] : m.group_cells) cells.push_back(json::array({e, y}));
  return j;
}

json eval_to_json(const EvalMetrics& m) {
  json j;
  j["test_ind"] = split_metrics_to_json(m.test_ind);
  j["test_shift"] = split_metrics_to_json(m.test_shift);
  return j;
}

json match_to_json(const MatchResult& m) {
  json j;
  j["matching_accuracy"] = m.matching_accuracy;
  j["matched_samples"] = m.matched_samples;
  j["permutation"] = m.permutation;
  return j;
}

std::string iso_utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct DiscoveryCore {
  KMeansResult clusters;
  std::vector<int> pseudo_train;
  std::vector<int> pseudo_val;
  MatchResult train_match;
  MatchResult val_match;
  std::size_t style_dim = 0;
  std::size_t projected_dim = 0;
  Tensor train_stack;
  Tensor val_stack;
  Tensor train_feats;
  Tensor val_feats;
  std::optional<StyleProjector> projector;
};

std::vector<int> extraction_layers(const PipelineConfig& cfg) {
  if (cfg.style == StyleKind::Penultimate) return {cfg.layer_ids.back()};
  return cfg.layer_ids;
}

DiscoveryCore discovery_core(const PipelineConfig& cfg, const SynthBundle& bundle,
                             const NetParams& id_params) {
  DiscoveryCore core;
  const auto layers = extraction_layers(cfg);
  core.train_stack = style_stack(id_params, bundle.train, cfg.style, layers);
  core.val_stack = style_stack(id_params, bundle.val, cfg.style, layers);
  core.style_dim = core.train_stack.dim(1);

  if (cfg.projection == ProjectionMode::Off) {
    core.train_feats = core.train_stack;
    core.val_feats = core.val_stack;
    core.projected_dim = core.style_dim;
  } else {
    const std::size_t target = cfg.projection == ProjectionMode::Auto
                                   ? default_projection_dim(bundle.train.size())
                                   : cfg.projection_dim;
    const auto dims = style_block_dims(cfg.style, layers);
    core.projector = StyleProjector(derive_seed(cfg.seed, kProjectorSeedSalt), target,
                                    layers, dims);
    core.train_feats = core.projector->project_stack(core.train_stack);
    core.val_feats = core.projector->project_stack(core.val_stack);
    core.projected_dim = core.train_feats.dim(1);
  }

  KMeansConfig kc;
  kc.k = cfg.k;
  kc.seed = cfg.seed;
  core.clusters = kmeans(core.train_feats, kc);
  core.pseudo_train = core.clusters.assignments;
  core.pseudo_val = assign_to_centroids(core.clusters.centroids, core.val_feats);
  core.train_match = hungarian_match(core.pseudo_train, bundle.train.envs);
  core.val_match = hungarian_match(core.pseudo_val, bundle.val.envs);
  return core;
}

json assignments_json(std::span<const int> a) {
  json j;
  j["schema_version"] = 1;
  j["assignments"] = std::vector<int>(a.begin(), a.end());
  return j;
}

json discovery_report_json(const PipelineConfig& cfg, const DiscoveryCore& core) {
  json j;
  j["schema_version"] = 1;
  j["style"] = style_kind_name(cfg.style);
  j["layer_ids"] = extraction_layers(cfg);
  j["k"] = cfg.k;
  j["style_dim"] = core.style_dim;
  j["projected_dim"] = core.projected_dim;
  j["projection_applied"] = core.projector.has_value();
  j["inertia"] = core.clusters.inertia;
  j["iterations"] = core.clusters.iterations;
  j["converged"] = core.clusters.converged;
  j["cluster_sizes"] = core.clusters.counts;
  j["train_match"] = match_to_json(core.train_match);
  j["val_match"] = match_to_json(core.val_match);
  return j;
}

DiscoveryOutput to_output(const NetParams& id_params, DiscoveryCore&& core) {
  DiscoveryOutput out;
  out.id_params = id_params;
  out.clusters = std::move(core.clusters);
  out.pseudo_train = std::move(core.pseudo_train);
  out.pseudo_val = std::move(core.pseudo_val);
  out.train_match = std::move(core.train_match);
  out.val_match = std::move(core.val_match);
  out.style_dim = core.style_dim;
  out.projected_dim = core.projected_dim;
  return out;
}

SgdmConfig id_config(const PipelineConfig& cfg) {
  SgdmConfig id = cfg.id_model;
  id.seed = derive_seed(cfg.seed, kIdSeedSalt);
  return id;
}

NetParams train_id_model(const PipelineConfig& cfg, const SynthBundle& bundle) {
  const auto id = id_config(cfg);
  auto outcome = train_erm(bundle.train.images, bundle.train.labels,
                           bundle.config.n_classes, id);
  return std::move(outcome.params);
}

struct CellOutcome {
  GridCell cell;
  NetParams params;
  TrainReport report;
};

CellOutcome run_cell(const PipelineConfig& cfg, const SynthBundle& bundle,
                     const DiscoveryOutput* disc, double lr, double l2) {
  RobustConfig rc = cfg.robust;
  rc.sgdm.lr = lr;
  rc.sgdm.l2 = l2;
  rc.sgdm.seed = derive_seed(cfg.seed, kRobustSeedSalt);

  const auto& train = bundle.train;
  TrainOutcome outcome;
  if (rc.method == RobustMethod::Erm) {
    outcome = train_erm(train.images, train.labels, bundle.config.n_classes, rc.sgdm);
  } else {
    const std::vector<int>& envs =
        cfg.group_source == GroupSource::Pseudo ? disc->pseudo_train : train.envs;
    const auto gi = build_group_index(envs, train.labels);
    RobustConfig rc2 = rc;
    outcome = train_robust(train.images, train.labels, gi.ids, gi.cells.size(),
                           bundle.config.n_classes, rc2);
  }

  CellOutcome co;
  co.cell.lr = lr;
  co.cell.l2 = l2;

  const auto val_preds = predict(outcome.params, bundle.val.images);
  co.cell.val_true = split_metrics(val_preds, bundle.val.labels, bundle.val.envs);
  if (disc)
    co.cell.val_pseudo = split_metrics(val_preds, bundle.val.labels, disc->pseudo_val);
  co.cell.eval = evaluate_model(outcome.params, bundle);
  co.cell.final_train_loss =
      outcome.report.epochs.empty() ? 0.0 : outcome.report.epochs.back().avg_loss;

  bool finite = std::isfinite(co.cell.final_train_loss) &&
                std::isfinite(co.cell.val_true.worst) && std::isfinite(co.cell.val_true.avg);
  for (const auto& w : outcome.params.fc_w)
    if (!std::isfinite(w)) finite = false;
  co.cell.divergent = !finite;

  co.params = std::move(outcome.params);
  co.report = std::move(outcome.report);
  return co;
}

const SplitMetrics* selection_metrics(const GridCell& cell, SelectionMode mode) {
  if (mode == SelectionMode::PseudoGroup)
    return cell.val_pseudo ? &*cell.val_pseudo : nullptr;
  return &cell.val_true;
}

int pick_best(const std::vector<GridCell>& cells, SelectionMode mode) {
  int best = -1;
  double best_worst = 0.0, best_avg = 0.0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    if (c.divergent) continue;
    const auto* m = selection_metrics(c, mode);
    if (!m) continue;
    // Strict > keeps the first of tied cells; iteration runs smaller l2
    // first, then smaller lr, completing the tie-break chain.
    if (best < 0 || m->worst > best_worst ||
        (m->worst == best_worst && m->avg > best_avg)) {
      best = static_cast<int>(i);
      best_worst = m->worst;
      best_avg = m->avg;
    }
  }
  return best;
}

json grid_cell_to_json(const GridCell& c) {
  json j;
  j["lr"] = c.lr;
  j["l2"] = c.l2;
  j["divergent"] = c.divergent;
  j["final_train_loss"] = c.final_train_loss;
  j["val_true"] = split_metrics_to_json(c.val_true);
  if (c.val_pseudo) j["val_pseudo"] = split_metrics_to_json(*c.val_pseudo);
  j["eval"] = eval_to_json(c.eval);
  return j;
}

std::string grid_csv(const std::vector<GridCell>& cells) {
  std::ostringstream csv;
  csv.precision(10);
  csv << "lr,l2,divergent,final_train_loss,val_true_worst,val_true_avg,"
         "val_pseudo_worst,val_pseudo_avg,test_ind_worst,test_ind_avg,"
         "test_shift_worst,test_shift_avg\n";
  for (const auto& c : cells) {
    csv << c.lr << ',' << c.l2 << ',' << (c.divergent ? 1 : 0) << ','
        << c.final_train_loss << ',' << c.val_true.worst << ',' << c.val_true.avg << ',';
    if (c.val_pseudo)
      csv << c.val_pseudo->worst << ',' << c.val_pseudo->avg;
    else
      csv << ',';
    csv << ',' << c.eval.test_ind.worst << ',' << c.eval.test_ind.avg << ','
        << c.eval.test_shift.worst << ',' << c.eval.test_shift.avg << '\n';
  }
  return csv.str();
}

}  // namespace

std::string style_kind_name(StyleKind s) {
  switch (s) {
    case StyleKind::Gram:
      return "gram";
    case StyleKind::MeanVar:
      return "meanvar";
    case StyleKind::Penultimate:
      return "penultimate";
  }
  throw std::invalid_argument("style_kind_name: bad value");
}

StyleKind style_kind_from_name(const std::string& name) {
  if (name == "gram") return StyleKind::Gram;
  if (name == "meanvar") return StyleKind::MeanVar;
  if (name == "penultimate") return StyleKind::Penultimate;
  throw ConfigError("unknown style '" + name + "'");
}

std::string selection_mode_name(SelectionMode s) {
  return s == SelectionMode::TrueGroup ? "true_group" : "pseudo_group";
}

SelectionMode selection_mode_from_name(const std::string& name) {
  if (name == "true_group") return SelectionMode::TrueGroup;
  if (name == "pseudo_group") return SelectionMode::PseudoGroup;
  throw ConfigError("unknown selection mode '" + name + "'");
}

std::string group_source_name(GroupSource g) {
  return g == GroupSource::Pseudo ? "pseudo" : "true";
}

GroupSource group_source_from_name(const std::string& name) {
  if (name == "pseudo") return GroupSource::Pseudo;
  if (name == "true") return GroupSource::True;
  throw ConfigError("unknown group source '" + name + "'");
}

PipelineConfig default_pipeline_config() {
  PipelineConfig cfg;
  cfg.robust.method = RobustMethod::GroupDro;
  cfg.robust.sgdm.lr = 1e-4;
  cfg.robust.sgdm.l2 = 1e-4;
  cfg.robust.sgdm.momentum = 0.9;
  cfg.robust.sgdm.batch_size = 32;
  cfg.robust.sgdm.epochs = 12;
  cfg.robust.eta_q = 0.01;
  cfg.id_model = cfg.robust.sgdm;
  cfg.id_model.epochs = 1;
  return cfg;
}

void validate(const PipelineConfig& cfg) {
  if (cfg.dataset_dir.empty()) validate(cfg.dataset);
  if (cfg.layer_ids.empty()) throw ConfigError("layer_ids must be nonempty");
  std::set<int> seen;
  for (const auto id : cfg.layer_ids) {
    if (id < 1 || id > kNumConvLayers)
      throw ConfigError("layer id " + std::to_string(id) + " out of range 1.." +
                        std::to_string(kNumConvLayers));
    if (!seen.insert(id).second)
      throw ConfigError("layer id " + std::to_string(id) + " repeated");
  }
  if (cfg.projection == ProjectionMode::Explicit && cfg.projection_dim == 0)
    throw ConfigError("explicit projection requires a positive dimension");
  if (cfg.k == 0) throw ConfigError("k must be positive");
  validate(cfg.id_model);
  validate(cfg.robust.sgdm);
  if (cfg.robust.eta_q < 0.0) throw ConfigError("eta_q must be non-negative");
  if (cfg.grid.lr.empty() || cfg.grid.l2.empty())
    throw ConfigError("grid lists must be nonempty");
  for (const auto v : cfg.grid.lr)
    if (!(v > 0.0)) throw ConfigError("grid lr values must be positive");
  for (const auto v : cfg.grid.l2)
    if (v < 0.0) throw ConfigError("grid l2 values must be non-negative");
  if (cfg.sweep_ks.empty()) throw ConfigError("sweep_ks must be nonempty");
  for (const auto k : cfg.sweep_ks)
    if (k == 0) throw ConfigError("sweep_ks entries must be positive");
  if (cfg.sweep_layer_sets.empty()) throw ConfigError("sweep_layer_sets must be nonempty");
}

namespace {

PipelineConfig config_from_json(const json& j) {
  check_keys(j,
             {"seed", "dataset", "style", "layer_ids", "projection", "k", "id_model",
              "robust", "selection", "grid", "sweep_ks", "sweep_layer_sets"},
             "config");
  PipelineConfig cfg = default_pipeline_config();
  cfg.seed = get_or<uint64_t>(j, "seed", cfg.seed);

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    if (!d.is_object()) throw ConfigError("dataset must be an object");
    if (d.contains("dir")) {
      check_keys(d, {"dir"}, "dataset");
      cfg.dataset_dir = d.at("dir").get<std::string>();
    } else {
      check_keys(d,
                 {"n_train", "n_val", "n_test", "image_size", "channels", "n_classes",
                  "n_envs", "majority_frac", "class_signal_strength",
                  "env_texture_strength", "gain_jitter", "sample_gain_jitter", "noise_std",
                  "texture_mode"},
                 "dataset");
      auto& ds = cfg.dataset;
      ds.n_train = get_or(d, "n_train", ds.n_train);
      ds.n_val = get_or(d, "n_val", ds.n_val);
      ds.n_test = get_or(d, "n_test", ds.n_test);
      ds.image_size = get_or(d, "image_size", ds.image_size);
      ds.channels = get_or(d, "channels", ds.channels);
      ds.n_classes = get_or(d, "n_classes", ds.n_classes);
      ds.n_envs = get_or(d, "n_envs", ds.n_envs);
      ds.majority_frac = get_or(d, "majority_frac", ds.majority_frac);
      ds.class_signal_strength = get_or(d, "class_signal_strength", ds.class_signal_strength);
      ds.env_texture_strength = get_or(d, "env_texture_strength", ds.env_texture_strength);
      ds.gain_jitter = get_or(d, "gain_jitter", ds.gain_jitter);
      ds.sample_gain_jitter = get_or(d, "sample_gain_jitter", ds.sample_gain_jitter);
      ds.noise_std = get_or(d, "noise_std", ds.noise_std);
      if (d.contains("texture_mode"))
        ds.texture_mode = texture_mode_from_name(d.at("texture_mode").get<std::string>());
    }
  }

  if (j.contains("style"))
    cfg.style = style_kind_from_name(j.at("style").get<std::string>());
  cfg.layer_ids = get_or(j, "layer_ids", cfg.layer_ids);

  if (j.contains("projection")) {
    const auto& p = j.at("projection");
    if (p.is_string()) {
      const auto s = p.get<std::string>();
      if (s == "auto") {
        cfg.projection = ProjectionMode::Auto;
      } else if (s == "off") {
        cfg.projection = ProjectionMode::Off;
      } else {
        throw ConfigError("projection must be \"auto\", \"off\", or a positive integer");
      }
    } else if (p.is_number_unsigned() || p.is_number_integer()) {
      const auto v = p.get<int64_t>();
      if (v <= 0) throw ConfigError("explicit projection dimension must be positive");
      cfg.projection = ProjectionMode::Explicit;
      cfg.projection_dim = static_cast<std::size_t>(v);
    } else {
      throw ConfigError("projection must be \"auto\", \"off\", or a positive integer");
    }
  }

  cfg.k = get_or(j, "k", cfg.k);

  if (j.contains("robust")) {
    const auto& r = j.at("robust");
    check_keys(r,
               {"method", "lr", "l2", "momentum", "batch_size", "epochs", "eta_q",
                "hard_max", "group_source"},
               "robust");
    if (r.contains("method"))
      cfg.robust.method = robust_method_from_name(r.at("method").get<std::string>());
    cfg.robust.sgdm = sgdm_fields(r, cfg.robust.sgdm);
    cfg.robust.eta_q = get_or(r, "eta_q", cfg.robust.eta_q);
    cfg.robust.hard_max = get_or(r, "hard_max", cfg.robust.hard_max);
    if (r.contains("group_source"))
      cfg.group_source = group_source_from_name(r.at("group_source").get<std::string>());
  }

  // The identification model inherits the robust optimizer settings with a
  // single epoch unless overridden.
  cfg.id_model = cfg.robust.sgdm;
  cfg.id_model.epochs = 1;
  if (j.contains("id_model"))
    cfg.id_model = sgdm_from_json(j.at("id_model"), cfg.id_model, "id_model");

  if (j.contains("selection"))
    cfg.selection = selection_mode_from_name(j.at("selection").get<std::string>());

  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    check_keys(g, {"lr", "l2"}, "grid");
    cfg.grid.lr = get_or(g, "lr", cfg.grid.lr);
    cfg.grid.l2 = get_or(g, "l2", cfg.grid.l2);
  }
  std::sort(cfg.grid.lr.begin(), cfg.grid.lr.end());
  cfg.grid.lr.erase(std::unique(cfg.grid.lr.begin(), cfg.grid.lr.end()), cfg.grid.lr.end());
  std::sort(cfg.grid.l2.begin(), cfg.grid.l2.end());
  cfg.grid.l2.erase(std::unique(cfg.grid.l2.begin(), cfg.grid.l2.end()), cfg.grid.l2.end());

  cfg.sweep_ks = get_or(j, "sweep_ks", cfg.sweep_ks);
  cfg.sweep_layer_sets = get_or(j, "sweep_layer_sets", cfg.sweep_layer_sets);

  validate(cfg);
  return cfg;
}

json config_to_json(const PipelineConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  if (!cfg.dataset_dir.empty()) {
    j["dataset"] = json{{"dir", cfg.dataset_dir}};
  } else {
    json d;
    d["n_train"] = cfg.dataset.n_train;
    d["n_val"] = cfg.dataset.n_val;
    d["n_test"] = cfg.dataset.n_test;
    d["image_size"] = cfg.dataset.image_size;
    d["channels"] = cfg.dataset.channels;
    d["n_classes"] = cfg.dataset.n_classes;
    d["n_envs"] = cfg.dataset.n_envs;
    d["majority_frac"] = cfg.dataset.majority_frac;
    d["class_signal_strength"] = cfg.dataset.class_signal_strength;
    d["env_texture_strength"] = cfg.dataset.env_texture_strength;
    d["gain_jitter"] = cfg.dataset.gain_jitter;
    d["sample_gain_jitter"] = cfg.dataset.sample_gain_jitter;
    d["noise_std"] = cfg.dataset.noise_std;
    d["texture_mode"] = texture_mode_name(cfg.dataset.texture_mode);
    j["dataset"] = std::move(d);
  }
  j["style"] = style_kind_name(cfg.style);
  j["layer_ids"] = cfg.layer_ids;
  if (cfg.projection == ProjectionMode::Auto)
    j["projection"] = "auto";
  else if (cfg.projection == ProjectionMode::Off)
    j["projection"] = "off";
  else
    j["projection"] = cfg.projection_dim;
  j["k"] = cfg.k;
  j["id_model"] = sgdm_to_json(cfg.id_model);
  json r = sgdm_to_json(cfg.robust.sgdm);
  r["method"] = robust_method_name(cfg.robust.method);
  r["eta_q"] = cfg.robust.eta_q;
  r["hard_max"] = cfg.robust.hard_max;
  r["group_source"] = group_source_name(cfg.group_source);
  j["robust"] = std::move(r);
  j["selection"] = selection_mode_name(cfg.selection);
  j["grid"] = json{{"lr", cfg.grid.lr}, {"l2", cfg.grid.l2}};
  j["sweep_ks"] = cfg.sweep_ks;
  j["sweep_layer_sets"] = cfg.sweep_layer_sets;
  return j;
}

}  // namespace

PipelineConfig pipeline_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

PipelineConfig pipeline_config_load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

std::string pipeline_config_to_json_text(const PipelineConfig& cfg) {
  return config_to_json(cfg).dump(2);
}

SynthBundle obtain_dataset(const PipelineConfig& cfg, const std::filesystem::path& out_dir,
                           bool persist_generated) {
  if (!cfg.dataset_dir.empty()) return bundle_load(cfg.dataset_dir);
  SynthConfig ds = cfg.dataset;
  ds.seed = cfg.seed;
  auto bundle = generate(ds);
  if (persist_generated) bundle_save(bundle, out_dir / "datasets");
  return bundle;
}

bool needs_pseudo_groups(const PipelineConfig& cfg) {
  const bool robust_needs =
      cfg.robust.method != RobustMethod::Erm && cfg.group_source == GroupSource::Pseudo;
  return robust_needs || cfg.selection == SelectionMode::PseudoGroup;
}

std::vector<std::size_t> style_block_dims(StyleKind style, std::span<const int> layer_ids) {
  std::vector<std::size_t> out;
  if (style == StyleKind::Penultimate) {
    out.push_back(kConvChannels[static_cast<std::size_t>(layer_ids.back() - 1)]);
    return out;
  }
  out.reserve(layer_ids.size());
  for (const auto id : layer_ids) {
    const std::size_t c = kConvChannels[static_cast<std::size_t>(id - 1)];
    out.push_back(style == StyleKind::Gram ? c * c : 2 * c);
  }
  return out;
}

Tensor style_stack(const NetParams& id_params, const GroupedDataset& ds, StyleKind style,
                   std::span<const int> layer_ids) {
  const std::size_t n = ds.size();
  if (n == 0) throw std::invalid_argument("style_stack: empty dataset");
  std::vector<int> layers(layer_ids.begin(), layer_ids.end());
  if (style == StyleKind::Penultimate) layers = {layer_ids.back()};

  std::size_t dim = 0;
  for (const auto d : style_block_dims(style, layers)) dim += d;

  Tensor stack({n, dim});
  float* dst = stack.mutable_data().data();
  const std::size_t per =
      ds.images.dim(1) * ds.images.dim(2) * ds.images.dim(3);
  const float* imgs = ds.images.data().data();
  const std::size_t c = ds.images.dim(1);
  const std::size_t h = ds.images.dim(2);
  const std::size_t w = ds.images.dim(3);

  const auto row_of = [&](std::size_t i) {
    std::vector<float> img(imgs + i * per, imgs + (i + 1) * per);
    Tensor image({c, h, w}, std::move(img));
    const auto fms = extract_features(id_params, image, layers);
    StyleVector sv;
    switch (style) {
      case StyleKind::Gram:
        sv = style_vector(fms);
        break;
      case StyleKind::MeanVar:
        sv = meanvar_vector(fms);
        break;
      case StyleKind::Penultimate:
        sv = penultimate_vector(fms.back());
        break;
    }
    return sv.concat();
  };

  // First row runs serially so layout errors surface as exceptions instead of
  // terminating a worker thread.
  const auto first = row_of(0);
  if (first.size() != dim) throw std::logic_error("style_stack: dimension mismatch");
  std::memcpy(dst, first.data(), dim * sizeof(float));
  parallel_for(n - 1, [&](std::size_t j) {
    const std::size_t i = j + 1;
    const auto flat = row_of(i);
    std::memcpy(dst + i * dim, flat.data(), dim * sizeof(float));
  });
  return stack;
}

GroupIndex build_group_index(std::span<const int> envs, std::span<const int> labels) {
  if (envs.size() != labels.size())
    throw std::invalid_argument("build_group_index: length mismatch");
  std::map<std::pair<int, int>, int> cell_id;
  for (std::size_t i = 0; i < envs.size(); ++i)
    cell_id.emplace(std::make_pair(envs[i], labels[i]), 0);
  GroupIndex gi;
  gi.cells.reserve(cell_id.size());
  for (auto& [cell, id] : cell_id) {
    id = static_cast<int>(gi.cells.size());
    gi.cells.push_back(cell);
  }
  gi.ids.resize(envs.size());
  for (std::size_t i = 0; i < envs.size(); ++i)
    gi.ids[i] = cell_id.at(std::make_pair(envs[i], labels[i]));
  return gi;
}

SplitMetrics split_metrics(std::span<const int> preds, std::span<const int> labels,
                           std::span<const int> envs) {
  const auto gi = build_group_index(envs, labels);
  const auto acc = worst_group_accuracy(preds, labels, gi.ids, gi.cells.size());
  SplitMetrics m;
  m.worst = acc.worst;
  m.avg = acc.avg;
  m.per_group = acc.per_group;
  m.group_cells = gi.cells;
  return m;
}

EvalMetrics evaluate_model(const NetParams& params, const SynthBundle& bundle) {
  EvalMetrics m;
  const auto ind_preds = predict(params, bundle.test_ind.images);
  m.test_ind = split_metrics(ind_preds, bundle.test_ind.labels, bundle.test_ind.envs);
  const auto shift_preds = predict(params, bundle.test_shift.images);
  m.test_shift = split_metrics(shift_preds, bundle.test_shift.labels, bundle.test_shift.envs);
  return m;
}

DiscoveryOutput run_discovery(const PipelineConfig& cfg, const SynthBundle& bundle,
                              const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "features");
  fs::create_directories(out_dir / "clustering");
  fs::create_directories(out_dir / "reports");

  const auto id_cfg = id_config(cfg);
  auto id_outcome =
      train_erm(bundle.train.images, bundle.train.labels, bundle.config.n_classes, id_cfg);
  checkpoint_save(id_outcome.params, out_dir / "checkpoints" / "id_model", id_cfg.seed,
                  id_cfg.epochs);

  auto core = discovery_core(cfg, bundle, id_outcome.params);

  tensor_save(core.train_stack, out_dir / "features" / "style_train.grtn");
  tensor_save(core.val_stack, out_dir / "features" / "style_val.grtn");
  if (core.projector) {
    core.projector->save(out_dir / "features" / "projector.json");
    tensor_save(core.train_feats, out_dir / "features" / "projected_train.grtn");
    tensor_save(core.val_feats, out_dir / "features" / "projected_val.grtn");
  }
  clustering_save(core.clusters, out_dir / "clustering" / "clusters.json");
  write_json_file(assignments_json(core.pseudo_train),
                  out_dir / "clustering" / "pseudo_train.json");
  write_json_file(assignments_json(core.pseudo_val),
                  out_dir / "clustering" / "pseudo_val.json");
  write_json_file(discovery_report_json(cfg, core), out_dir / "reports" / "discovery.json");

  return to_output(id_outcome.params, std::move(core));
}

TrainStage run_robust_stage(const PipelineConfig& cfg, const SynthBundle& bundle,
                            const DiscoveryOutput* disc,
                            const std::filesystem::path& out_dir) {
  if (cfg.robust.method != RobustMethod::Erm && cfg.group_source == GroupSource::Pseudo &&
      disc == nullptr)
    throw ConfigError("robust training needs pseudo groups but discovery has not run");

  auto co = run_cell(cfg, bundle, disc, cfg.robust.sgdm.lr, cfg.robust.sgdm.l2);

  std::filesystem::create_directories(out_dir / "reports");
  const auto ckpt = out_dir / "checkpoints" / "robust";
  checkpoint_save(co.params, ckpt, derive_seed(cfg.seed, kRobustSeedSalt),
                  cfg.robust.sgdm.epochs);
  co.report.checkpoint_path = "checkpoints/robust";
  report_save_json(co.report, out_dir / "reports" / ("train_" + co.report.method + ".json"));
  report_save_csv(co.report, out_dir / "reports" / ("train_" + co.report.method + ".csv"));

  json ev;
  ev["schema_version"] = 1;
  ev["metric_groups"] = "true";
  ev["val_true"] = split_metrics_to_json(co.cell.val_true);
  if (co.cell.val_pseudo) ev["val_pseudo"] = split_metrics_to_json(*co.cell.val_pseudo);
  ev["eval"] = eval_to_json(co.cell.eval);
  write_json_file(ev, out_dir / "reports" / "eval.json");

  TrainStage stage;
  stage.outcome.params = std::move(co.params);
  stage.outcome.report = std::move(co.report);
  stage.eval = co.cell.eval;
  stage.val_true = co.cell.val_true;
  stage.val_pseudo = co.cell.val_pseudo;
  return stage;
}

GridResult grid_search(const PipelineConfig& cfg, const SynthBundle& bundle,
                       const DiscoveryOutput* disc,
                       const std::filesystem::path& out_dir) {
  if (cfg.robust.method != RobustMethod::Erm && cfg.group_source == GroupSource::Pseudo &&
      disc == nullptr)
    throw ConfigError("grid search needs pseudo groups but discovery has not run");
  if (cfg.selection == SelectionMode::PseudoGroup && disc == nullptr)
    throw ConfigError("pseudo-group selection needs discovery results");

  GridResult res;
  std::vector<NetParams> params;
  for (const auto l2 : cfg.grid.l2) {
    for (const auto lr : cfg.grid.lr) {
      auto co = run_cell(cfg, bundle, disc, lr, l2);
      res.cells.push_back(std::move(co.cell));
      params.push_back(std::move(co.params));
    }
  }

  res.chosen = pick_best(res.cells, cfg.selection);
  res.chosen_by_true = pick_best(res.cells, SelectionMode::TrueGroup);
  res.chosen_by_pseudo = disc ? pick_best(res.cells, SelectionMode::PseudoGroup) : -1;
  if (res.chosen < 0)
    throw std::runtime_error("grid search produced no usable model (every cell divergent)");
  res.chosen_params = params[static_cast<std::size_t>(res.chosen)];

  std::filesystem::create_directories(out_dir / "reports");
  json j;
  j["schema_version"] = 1;
  j["selection"] = selection_mode_name(cfg.selection);
  auto& cells = j["cells"] = json::array();
  for (const auto& c : res.cells) cells.push_back(grid_cell_to_json(c));
  auto chosen_entry = [&](int idx) -> json {
    if (idx < 0) return nullptr;
    const auto& c = res.cells[static_cast<std::size_t>(idx)];
    return json{{"index", idx}, {"lr", c.lr}, {"l2", c.l2}};
  };
  j["chosen"] = chosen_entry(res.chosen);
  j["chosen_by_true"] = chosen_entry(res.chosen_by_true);
  j["chosen_by_pseudo"] = chosen_entry(res.chosen_by_pseudo);
  write_json_file(j, out_dir / "reports" / "grid.json");
  write_text_file(grid_csv(res.cells), out_dir / "reports" / "grid.csv");

  const auto ckpt = out_dir / "checkpoints" / "robust";
  checkpoint_save(res.chosen_params, ckpt, derive_seed(cfg.seed, kRobustSeedSalt),
                  cfg.robust.sgdm.epochs);
  return res;
}

PipelineResult run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_dir) {
  validate(cfg);
  std::filesystem::create_directories(out_dir / "reports");

  json manifest;
  manifest["schema_version"] = 1;
  manifest["config"] = config_to_json(cfg);
  write_json_file(manifest, out_dir / "manifest.json");

  PipelineResult res;
  res.config = cfg;
  const auto bundle = obtain_dataset(cfg, out_dir, true);

  if (needs_pseudo_groups(cfg)) res.discovery = run_discovery(cfg, bundle, out_dir);

  res.grid = grid_search(cfg, bundle, res.discovery ? &*res.discovery : nullptr, out_dir);
  res.final_eval = res.grid.cells[static_cast<std::size_t>(res.grid.chosen)].eval;

  json j;
  j["schema_version"] = 1;
  j["generated_at"] = iso_utc_now();
  j["config"] = config_to_json(cfg);
  if (res.discovery) {
    json d;
    d["train_matching_accuracy"] = res.discovery->train_match.matching_accuracy;
    d["val_matching_accuracy"] = res.discovery->val_match.matching_accuracy;
    d["inertia"] = res.discovery->clusters.inertia;
    d["style_dim"] = res.discovery->style_dim;
    d["projected_dim"] = res.discovery->projected_dim;
    j["discovery"] = std::move(d);
  } else {
    j["discovery"] = nullptr;
  }
  const auto& chosen = res.grid.cells[static_cast<std::size_t>(res.grid.chosen)];
  json fin;
  fin["lr"] = chosen.lr;
  fin["l2"] = chosen.l2;
  fin["selection"] = selection_mode_name(cfg.selection);
  const auto* sel = selection_metrics(chosen, cfg.selection);
  fin["selection_worst_group_accuracy"] = sel ? sel->worst : 0.0;
  fin["metric_groups"] = "true";
  fin["eval"] = eval_to_json(res.final_eval);
  j["final"] = std::move(fin);
  json g;
  g["chosen_index"] = res.grid.chosen;
  g["chosen_by_true"] = res.grid.chosen_by_true;
  g["chosen_by_pseudo"] = res.grid.chosen_by_pseudo;
  j["grid"] = std::move(g);
  write_json_file(j, out_dir / "reports" / "pipeline.json");
  return res;
}

TrainStage run_train_command(const PipelineConfig& cfg, const std::filesystem::path& out_dir) {
  validate(cfg);
  std::filesystem::create_directories(out_dir / "reports");

  json manifest;
  manifest["schema_version"] = 1;
  manifest["config"] = config_to_json(cfg);
  write_json_file(manifest, out_dir / "manifest.json");

  const auto bundle = obtain_dataset(cfg, out_dir, true);
  std::optional<DiscoveryOutput> disc;
  if (needs_pseudo_groups(cfg)) disc = run_discovery(cfg, bundle, out_dir);
  return run_robust_stage(cfg, bundle, disc ? &*disc : nullptr, out_dir);
}

std::vector<SweepKEntry> sweep_clusters(const PipelineConfig& cfg,
                                        std::span<const std::size_t> ks,
                                        const std::filesystem::path& out_dir) {
  validate(cfg);
  if (ks.empty()) throw ConfigError("sweep needs at least one cluster count");

  std::vector<SweepKEntry> entries;
  for (const auto k : ks) {
    SweepKEntry entry;
    entry.k = k;
    PipelineConfig sub = cfg;
    sub.k = k;
    const auto sub_dir = out_dir / ("k" + std::to_string(k));
    try {
      const auto res = run_pipeline(sub, sub_dir);
      if (res.discovery)
        entry.val_matching = res.discovery->val_match.matching_accuracy;
      const auto& chosen = res.grid.cells[static_cast<std::size_t>(res.grid.chosen)];
      const auto* sel = selection_metrics(chosen, sub.selection);
      entry.selection_worst = sel ? sel->worst : 0.0;
      entry.eval = res.final_eval;
    } catch (const std::exception& e) {
      entry.failed = true;
      entry.error = e.what();
    }
    entries.push_back(std::move(entry));
  }

  std::filesystem::create_directories(out_dir / "reports");
  json j;
  j["schema_version"] = 1;
  auto& rows = j["entries"] = json::array();
  std::ostringstream csv;
  csv.precision(10);
  csv << "k,failed,val_matching,selection_worst,test_ind_worst,test_ind_avg,"
         "test_shift_worst,test_shift_avg\n";
  for (const auto& e : entries) {
    json row;
    row["k"] = e.k;
    row["failed"] = e.failed;
    if (e.failed) {
      row["error"] = e.error;
      csv << e.k << ",1,,,,,,\n";
    } else {
      row["val_matching_accuracy"] = e.val_matching;
      row["selection_worst_group_accuracy"] = e.selection_worst;
      row["eval"] = eval_to_json(e.eval);
      csv << e.k << ",0," << e.val_matching << ',' << e.selection_worst << ','
          << e.eval.test_ind.worst << ',' << e.eval.test_ind.avg << ','
          << e.eval.test_shift.worst << ',' << e.eval.test_shift.avg << '\n';
    }
    rows.push_back(std::move(row));
  }
  write_json_file(j, out_dir / "reports" / "sweep_k.json");
  write_text_file(csv.str(), out_dir / "reports" / "sweep_k.csv");
  return entries;
}

std::vector<SweepLayersEntry> sweep_layers(const PipelineConfig& cfg,
                                           std::span<const std::vector<int>> layer_sets,
                                           const std::filesystem::path& out_dir) {
  validate(cfg);
  if (layer_sets.empty()) throw ConfigError("sweep needs at least one layer set");
  std::set<std::vector<int>> seen;
  for (const auto& set : layer_sets) {
    if (set.empty()) throw ConfigError("layer sets must be nonempty");
    std::set<int> ids;
    for (const auto id : set) {
      if (id < 1 || id > kNumConvLayers)
        throw ConfigError("layer id " + std::to_string(id) + " out of range");
      if (!ids.insert(id).second)
        throw ConfigError("layer id repeated inside a layer set");
    }
    auto sorted = set;
    std::sort(sorted.begin(), sorted.end());
    if (!seen.insert(sorted).second) throw ConfigError("duplicate layer set in sweep");
  }

  std::filesystem::create_directories(out_dir / "reports");
  const auto bundle = obtain_dataset(cfg, out_dir, true);
  const auto id_cfg = id_config(cfg);
  auto id_outcome =
      train_erm(bundle.train.images, bundle.train.labels, bundle.config.n_classes, id_cfg);
  checkpoint_save(id_outcome.params, out_dir / "checkpoints" / "id_model", id_cfg.seed,
                  id_cfg.epochs);

  std::vector<SweepLayersEntry> entries;
  for (const auto& set : layer_sets) {
    SweepLayersEntry entry;
    entry.layer_ids = set;
    PipelineConfig sub = cfg;
    sub.layer_ids = set;
    try {
      const auto core = discovery_core(sub, bundle, id_outcome.params);
      entry.train_matching = core.train_match.matching_accuracy;
      entry.val_matching = core.val_match.matching_accuracy;
    } catch (const std::exception& e) {
      entry.failed = true;
      entry.error = e.what();
    }
    entries.push_back(std::move(entry));
  }

  json j;
  j["schema_version"] = 1;
  auto& rows = j["entries"] = json::array();
  std::ostringstream csv;
  csv.precision(10);
  csv << "layer_ids,failed,train_matching,val_matching\n";
  for (const auto& e : entries) {
    json row;
    row["layer_ids"] = e.layer_ids;
    row["failed"] = e.failed;
    std::string ids;
    for (const auto id : e.layer_ids) {
      if (!ids.empty()) ids += ' ';
      ids += std::to_string(id);
    }
    if (e.failed) {
      row["error"] = e.error;
      csv << '"' << ids << "\",1,,\n";
    } else {
      row["train_matching_accuracy"] = e.train_matching;
      row["val_matching_accuracy"] = e.val_matching;
      csv << '"' << ids << "\",0," << e.train_matching << ',' << e.val_matching << '\n';
    }
    rows.push_back(std::move(row));
  }
  write_json_file(j, out_dir / "reports" / "sweep_layers.json");
  write_text_file(csv.str(), out_dir / "reports" / "sweep_layers.csv");
  return entries;
}

}  // namespace gramclust
