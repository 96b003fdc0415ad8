#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gramclust/clustering.hpp"
#include "gramclust/evalmatch.hpp"
#include "gramclust/nets.hpp"
#include "gramclust/robusttrain.hpp"
#include "gramclust/synthdata.hpp"

namespace gramclust {

enum class StyleKind { Gram, MeanVar, Penultimate };
enum class ProjectionMode { Auto, Off, Explicit };
enum class SelectionMode { TrueGroup, PseudoGroup };
enum class GroupSource { Pseudo, True };

std::string style_kind_name(StyleKind s);
StyleKind style_kind_from_name(const std::string& name);
std::string selection_mode_name(SelectionMode s);
SelectionMode selection_mode_from_name(const std::string& name);
std::string group_source_name(GroupSource g);
GroupSource group_source_from_name(const std::string& name);

struct GridSpec {
  std::vector<double> lr = {1e-5, 5e-5, 1e-4};
  std::vector<double> l2 = {1e-4, 1e-2, 1e-1, 1.0};
};

struct PipelineConfig {
  uint64_t seed = 0;
  SynthConfig dataset;
  std::string dataset_dir;  // load this directory instead of generating
  StyleKind style = StyleKind::Gram;
  std::vector<int> layer_ids = {3};
  ProjectionMode projection = ProjectionMode::Auto;
  std::size_t projection_dim = 0;  // used when projection == Explicit
  std::size_t k = 2;               // cluster count E'
  SgdmConfig id_model;             // defaults to robust config with epochs = 1
  RobustConfig robust;
  GroupSource group_source = GroupSource::Pseudo;
  SelectionMode selection = SelectionMode::PseudoGroup;
  GridSpec grid;
  std::vector<std::size_t> sweep_ks = {2, 4, 8};
  std::vector<std::vector<int>> sweep_layer_sets = {{1}, {2}, {3}};
};

PipelineConfig default_pipeline_config();
PipelineConfig pipeline_config_from_json_text(const std::string& text);
PipelineConfig pipeline_config_load(const std::filesystem::path& path);
std::string pipeline_config_to_json_text(const PipelineConfig& cfg);
void validate(const PipelineConfig& cfg);

/// Loads cfg.dataset_dir when set, otherwise generates from cfg.dataset with
/// cfg.seed (persisting the generated bundle to out_dir/datasets when asked).
SynthBundle obtain_dataset(const PipelineConfig& cfg, const std::filesystem::path& out_dir,
                           bool persist_generated);

/// Whether the configuration requires discovered pseudo groups (for training,
/// for model selection, or both).
bool needs_pseudo_groups(const PipelineConfig& cfg);

/// Style feature stacks for a dataset split: one row per image, blocks in
/// layer order. Which vectorization runs is decided by `style`.
Tensor style_stack(const NetParams& id_params, const GroupedDataset& ds, StyleKind style,
                   std::span<const int> layer_ids);

/// Per-layer column widths of the style stack.
std::vector<std::size_t> style_block_dims(StyleKind style, std::span<const int> layer_ids);

struct DiscoveryOutput {
  NetParams id_params;
  KMeansResult clusters;
  std::vector<int> pseudo_train;
  std::vector<int> pseudo_val;
  MatchResult train_match;
  MatchResult val_match;
  std::size_t style_dim = 0;
  std::size_t projected_dim = 0;  // equals style_dim when projection is off
};

/// Stage 1 + 2: train the identification model one pass of ERM, extract and
/// (optionally) project style vectors, cluster the train split, and carry the
/// clusters onto the validation split by nearest centroid. Writes artifacts
/// under out_dir (features/, clustering/, checkpoints/id_model/,
/// reports/discovery.json).
DiscoveryOutput run_discovery(const PipelineConfig& cfg, const SynthBundle& bundle,
                              const std::filesystem::path& out_dir);

struct SplitMetrics {
  double worst = 0.0;
  double avg = 0.0;
  std::vector<double> per_group;
  std::vector<std::pair<int, int>> group_cells;  // (env, class) per dense group id
};

struct EvalMetrics {
  SplitMetrics test_ind;
  SplitMetrics test_shift;
};

/// True-group test metrics for a trained classifier.
EvalMetrics evaluate_model(const NetParams& params, const SynthBundle& bundle);

struct TrainStage {
  TrainOutcome outcome;
  EvalMetrics eval;
  SplitMetrics val_true;
  std::optional<SplitMetrics> val_pseudo;
};

/// Stage 3 for a single hyperparameter point: train with the configured
/// method and group source, then evaluate on validation and both test splits.
/// disc may be null only if neither training nor selection needs pseudo labels.
TrainStage run_robust_stage(const PipelineConfig& cfg, const SynthBundle& bundle,
                            const DiscoveryOutput* disc,
                            const std::filesystem::path& out_dir);

struct GridCell {
  double lr = 0.0;
  double l2 = 0.0;
  bool divergent = false;
  double final_train_loss = 0.0;
  SplitMetrics val_true;
  std::optional<SplitMetrics> val_pseudo;
  EvalMetrics eval;
};

struct GridResult {
  std::vector<GridCell> cells;
  int chosen = -1;            // per the config's selection mode
  int chosen_by_true = -1;    // selection replayed with true validation groups
  int chosen_by_pseudo = -1;  // selection replayed with pseudo groups (-1 if absent)
  NetParams chosen_params;
};

/// Trains every (l2, lr) grid cell with shared seeds, scores each on the
/// validation split, and picks the best by worst-group accuracy (ties: higher
/// average, then lower l2, then lower lr). Divergent cells stay in the table
/// but never win. Writes reports/grid.json and reports/grid.csv.
GridResult grid_search(const PipelineConfig& cfg, const SynthBundle& bundle,
                       const DiscoveryOutput* disc, const std::filesystem::path& out_dir);

struct PipelineResult {
  PipelineConfig config;
  std::optional<DiscoveryOutput> discovery;
  GridResult grid;
  EvalMetrics final_eval;
};

/// All stages: dataset (generate or load), discovery when pseudo labels are
/// needed, grid search, final evaluation. Writes the full artifact tree and
/// reports/pipeline.json. Reports are deterministic for a fixed config and
/// seed; the only timestamp lives in pipeline.json's generated_at field.
PipelineResult run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_dir);

/// Single-point variant of run_pipeline: no grid, trains cfg.robust as given.
TrainStage run_train_command(const PipelineConfig& cfg, const std::filesystem::path& out_dir);

struct SweepKEntry {
  std::size_t k = 0;
  bool failed = false;
  std::string error;
  double val_matching = 0.0;
  double selection_worst = 0.0;  // validation worst-group under the selection mode
  EvalMetrics eval;              // chosen cell's test metrics
};

/// Full pipeline per cluster count with shared seeds; entries that fail keep
/// their error message and the sweep continues. Writes reports/sweep_k.json
/// and .csv under each entry's subdirectory plus a combined table.
std::vector<SweepKEntry> sweep_clusters(const PipelineConfig& cfg,
                                        std::span<const std::size_t> ks,
                                        const std::filesystem::path& out_dir);

struct SweepLayersEntry {
  std::vector<int> layer_ids;
  bool failed = false;
  std::string error;
  double train_matching = 0.0;
  double val_matching = 0.0;
};

/// Discovery per layer set on a shared identification model; rejects
/// duplicate sets. Writes reports/sweep_layers.json and .csv.
std::vector<SweepLayersEntry> sweep_layers(const PipelineConfig& cfg,
                                           std::span<const std::vector<int>> layer_sets,
                                           const std::filesystem::path& out_dir);

/// Dense group ids over the (env, class) cells that actually occur.
struct GroupIndex {
  std::vector<int> ids;                          // per sample
  std::vector<std::pair<int, int>> cells;        // dense id -> (env, class)
};
GroupIndex build_group_index(std::span<const int> envs, std::span<const int> labels);

/// Group accuracy over observed cells only.
SplitMetrics split_metrics(std::span<const int> preds, std::span<const int> labels,
                           std::span<const int> envs);

}  // namespace gramclust
