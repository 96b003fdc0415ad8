#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gramclust/nets.hpp"
#include "gramclust/tensor.hpp"

namespace gramclust {

enum class RobustMethod { Erm, GroupDro, ImportanceWeighting };

std::string robust_method_name(RobustMethod m);
RobustMethod robust_method_from_name(const std::string& name);

struct RobustConfig {
  RobustMethod method = RobustMethod::Erm;
  SgdmConfig sgdm;
  double eta_q = 0.01;   // group-weight step size for the exponentiated update
  bool hard_max = false; // put all weight on the worst batch group instead
};

struct EpochMetrics {
  double avg_loss = 0.0;
  std::vector<double> group_loss;
  std::vector<double> group_acc;
  double worst_group_acc = 0.0;
};

struct TrainReport {
  std::string method;
  std::size_t n_groups = 0;
  std::vector<EpochMetrics> epochs;
  std::vector<double> final_q;  // group weights after the last batch (GroupDro)
  std::string checkpoint_path;
};

struct TrainOutcome {
  NetParams params;
  TrainReport report;
};

/// Minibatch SGD-M from a seeded He-uniform init. Each epoch visits a seeded
/// shuffle of the data; samples inside a batch are processed in ascending
/// dataset order so results do not depend on batch-internal permutation or
/// thread count. group_ids are dense ids in [0, n_groups); GroupDro and
/// ImportanceWeighting reject any dataset-level empty group.
TrainOutcome train_robust(const Tensor& images, std::span<const int> labels,
                          std::span<const int> group_ids, std::size_t n_groups,
                          std::size_t n_classes, const RobustConfig& cfg);

/// Mean cross-entropy over all samples; groups ignored.
TrainOutcome train_erm(const Tensor& images, std::span<const int> labels,
                       std::size_t n_classes, const SgdmConfig& cfg);

/// Exponentiated-gradient group reweighting: per batch the group weights move
/// by exp(eta_q * group loss) and renormalize, then the q-weighted sum of
/// per-group mean losses is backpropagated.
TrainOutcome train_group_dro(const Tensor& images, std::span<const int> labels,
                             std::span<const int> group_ids, std::size_t n_groups,
                             std::size_t n_classes, const SgdmConfig& cfg, double eta_q,
                             bool hard_max = false);

/// Static per-sample weights N / (G * |D_g|).
TrainOutcome train_importance_weighting(const Tensor& images, std::span<const int> labels,
                                        std::span<const int> group_ids,
                                        std::size_t n_groups, std::size_t n_classes,
                                        const SgdmConfig& cfg);

void report_save_json(const TrainReport& report, const std::filesystem::path& path);
void report_save_csv(const TrainReport& report, const std::filesystem::path& path);

}  // namespace gramclust
