#include "gramclust/robusttrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "gramclust/errors.hpp"
#include "gramclust/parallel.hpp"
#include "gramclust/rng.hpp"

namespace gramclust {

namespace {

constexpr uint64_t kShuffleSalt = 0x300;

void check_simplex(std::span<const double> q) {
  double sum = 0.0;
  for (const auto v : q) {
    if (v < 0.0) throw std::logic_error("group weights left the simplex (negative entry)");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::logic_error("group weights left the simplex (sum " + std::to_string(sum) + ")");
}

std::vector<std::size_t> dataset_group_sizes(std::span<const int> group_ids,
                                             std::size_t n_groups) {
  std::vector<std::size_t> sizes(n_groups, 0);
  for (const auto g : group_ids) {
    if (g < 0 || static_cast<std::size_t>(g) >= n_groups)
      throw std::invalid_argument("group id out of range");
    ++sizes[static_cast<std::size_t>(g)];
  }
  return sizes;
}

}  // namespace

std::string robust_method_name(RobustMethod m) {
  switch (m) {
    case RobustMethod::Erm:
      return "erm";
    case RobustMethod::GroupDro:
      return "group_dro";
    case RobustMethod::ImportanceWeighting:
      return "importance_weighting";
  }
  throw std::invalid_argument("robust_method_name: bad value");
}

RobustMethod robust_method_from_name(const std::string& name) {
  if (name == "erm") return RobustMethod::Erm;
  if (name == "group_dro") return RobustMethod::GroupDro;
  if (name == "importance_weighting") return RobustMethod::ImportanceWeighting;
  throw ConfigError("unknown robust method '" + name + "'");
}

TrainOutcome train_robust(const Tensor& images, std::span<const int> labels,
                          std::span<const int> group_ids, std::size_t n_groups,
                          std::size_t n_classes, const RobustConfig& cfg) {
  validate(cfg.sgdm);
  if (images.rank() != 4) throw std::invalid_argument("train_robust: expected [N,C,H,W]");
  const std::size_t n = images.dim(0);
  if (n == 0) throw ConfigError("train_robust: empty training set");
  if (labels.size() != n || group_ids.size() != n)
    throw std::invalid_argument("train_robust: label/group length mismatch");
  if (n_groups == 0) throw std::invalid_argument("train_robust: n_groups must be positive");
  if (cfg.method == RobustMethod::GroupDro && cfg.eta_q < 0.0)
    throw ConfigError("eta_q must be non-negative");

  const auto sizes = dataset_group_sizes(group_ids, n_groups);
  if (cfg.method != RobustMethod::Erm) {
    for (std::size_t g = 0; g < n_groups; ++g)
      if (sizes[g] == 0)
        throw ConfigError("group " + std::to_string(g) + " has no samples");
  }

  // Static per-sample weights for importance weighting.
  std::vector<double> iw(n, 1.0);
  if (cfg.method == RobustMethod::ImportanceWeighting) {
    for (std::size_t i = 0; i < n; ++i)
      iw[i] = static_cast<double>(n) /
              (static_cast<double>(n_groups) *
               static_cast<double>(sizes[static_cast<std::size_t>(group_ids[i])]));
  }

  TrainOutcome out;
  out.params = init_net(images.dim(1), n_classes, cfg.sgdm.seed);
  out.report.method = robust_method_name(cfg.method);
  out.report.n_groups = n_groups;

  NetParams momentum;
  momentum.resize(images.dim(1), n_classes);
  NetParams grads;

  std::vector<double> q(n_groups, 1.0 / static_cast<double>(n_groups));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  std::vector<std::size_t> batch;
  std::vector<int> batch_labels;
  std::vector<double> batch_weights;

  for (std::size_t epoch = 0; epoch < cfg.sgdm.epochs; ++epoch) {
    SeededRng shuffle_rng(cfg.sgdm.seed, kShuffleSalt + epoch);
    for (std::size_t i = n - 1; i > 0; --i) {
      const auto j = static_cast<std::size_t>(shuffle_rng.uniform_int(i + 1));
      std::swap(order[i], order[j]);
    }

    EpochMetrics em;
    em.group_loss.assign(n_groups, 0.0);
    em.group_acc.assign(n_groups, 0.0);
    std::vector<std::size_t> visit_count(n_groups, 0);
    std::vector<std::size_t> correct(n_groups, 0);
    double loss_sum = 0.0;

    for (std::size_t start = 0; start < n; start += cfg.sgdm.batch_size) {
      const std::size_t count = std::min(cfg.sgdm.batch_size, n - start);
      batch.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                   order.begin() + static_cast<std::ptrdiff_t>(start + count));
      std::sort(batch.begin(), batch.end());

      batch_labels.resize(count);
      for (std::size_t b = 0; b < count; ++b)
        batch_labels[b] = labels[batch[b]];

      batch_weights.assign(count, 1.0 / static_cast<double>(count));
      if (cfg.method == RobustMethod::ImportanceWeighting) {
        for (std::size_t b = 0; b < count; ++b)
          batch_weights[b] = iw[batch[b]] / static_cast<double>(count);
      } else if (cfg.method == RobustMethod::GroupDro) {
        // Current-parameter group losses drive the weight update before the
        // gradient step, so the updated weights shape this batch's gradient.
        const auto losses = batch_losses(out.params, images, batch, batch_labels);
        std::vector<double> group_sum(n_groups, 0.0);
        std::vector<std::size_t> group_n(n_groups, 0);
        for (std::size_t b = 0; b < count; ++b) {
          const auto g = static_cast<std::size_t>(group_ids[batch[b]]);
          group_sum[g] += losses[b];
          ++group_n[g];
        }
        if (cfg.hard_max) {
          std::size_t worst = 0;
          double worst_loss = -1.0;
          for (std::size_t g = 0; g < n_groups; ++g) {
            if (group_n[g] == 0) continue;
            const double gl = group_sum[g] / static_cast<double>(group_n[g]);
            if (gl > worst_loss) {
              worst_loss = gl;
              worst = g;
            }
          }
          std::fill(q.begin(), q.end(), 0.0);
          q[worst] = 1.0;
        } else {
          double total = 0.0;
          for (std::size_t g = 0; g < n_groups; ++g) {
            const double gl =
                group_n[g] == 0 ? 0.0 : group_sum[g] / static_cast<double>(group_n[g]);
            q[g] *= std::exp(cfg.eta_q * gl);
            total += q[g];
          }
          for (auto& v : q) v /= total;
        }
        check_simplex(q);
        for (std::size_t b = 0; b < count; ++b) {
          const auto g = static_cast<std::size_t>(group_ids[batch[b]]);
          batch_weights[b] = q[g] / static_cast<double>(group_n[g]);
        }
      }

      const auto res =
          weighted_batch_grads(out.params, images, batch, batch_labels, batch_weights, grads);
      sgdm_step(out.params, grads, cfg.sgdm, momentum);

      for (std::size_t b = 0; b < count; ++b) {
        const auto g = static_cast<std::size_t>(group_ids[batch[b]]);
        loss_sum += res.per_sample_loss[b];
        em.group_loss[g] += res.per_sample_loss[b];
        ++visit_count[g];
        if (res.predictions[b] == batch_labels[b]) ++correct[g];
      }
    }

    em.avg_loss = loss_sum / static_cast<double>(n);
    double worst = 1.0;
    for (std::size_t g = 0; g < n_groups; ++g) {
      if (visit_count[g] == 0) {
        em.group_loss[g] = 0.0;
        em.group_acc[g] = 0.0;
        continue;
      }
      em.group_loss[g] /= static_cast<double>(visit_count[g]);
      em.group_acc[g] =
          static_cast<double>(correct[g]) / static_cast<double>(visit_count[g]);
      worst = std::min(worst, em.group_acc[g]);
    }
    em.worst_group_acc = worst;
    out.report.epochs.push_back(std::move(em));
  }

  if (cfg.method == RobustMethod::GroupDro) out.report.final_q = q;
  return out;
}

TrainOutcome train_erm(const Tensor& images, std::span<const int> labels,
                       std::size_t n_classes, const SgdmConfig& cfg) {
  RobustConfig rc;
  rc.method = RobustMethod::Erm;
  rc.sgdm = cfg;
  std::vector<int> one_group(labels.size(), 0);
  return train_robust(images, labels, one_group, 1, n_classes, rc);
}

TrainOutcome train_group_dro(const Tensor& images, std::span<const int> labels,
                             std::span<const int> group_ids, std::size_t n_groups,
                             std::size_t n_classes, const SgdmConfig& cfg, double eta_q,
                             bool hard_max) {
  RobustConfig rc;
  rc.method = RobustMethod::GroupDro;
  rc.sgdm = cfg;
  rc.eta_q = eta_q;
  rc.hard_max = hard_max;
  return train_robust(images, labels, group_ids, n_groups, n_classes, rc);
}

TrainOutcome train_importance_weighting(const Tensor& images, std::span<const int> labels,
                                        std::span<const int> group_ids,
                                        std::size_t n_groups, std::size_t n_classes,
                                        const SgdmConfig& cfg) {
  RobustConfig rc;
  rc.method = RobustMethod::ImportanceWeighting;
  rc.sgdm = cfg;
  return train_robust(images, labels, group_ids, n_groups, n_classes, rc);
}

void report_save_json(const TrainReport& report, const std::filesystem::path& path) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["method"] = report.method;
  j["n_groups"] = report.n_groups;
  j["checkpoint_path"] = report.checkpoint_path;
  j["final_q"] = report.final_q;
  auto& epochs = j["epochs"] = nlohmann::json::array();
  for (const auto& em : report.epochs) {
    nlohmann::json e;
    e["avg_loss"] = em.avg_loss;
    e["group_loss"] = em.group_loss;
    e["group_acc"] = em.group_acc;
    e["worst_group_acc"] = em.worst_group_acc;
    epochs.push_back(std::move(e));
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(IoErrorKind::OpenFailed, path.string(), "cannot open for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError(IoErrorKind::WriteFailed, path.string(), "write failed");
}

void report_save_csv(const TrainReport& report, const std::filesystem::path& path) {
  std::ostringstream csv;
  csv << "epoch,avg_loss,worst_group_acc";
  for (std::size_t g = 0; g < report.n_groups; ++g)
    csv << ",group" << g << "_loss,group" << g << "_acc";
  csv << '\n';
  csv.setf(std::ios::fmtflags(0), std::ios::floatfield);
  csv.precision(10);
  for (std::size_t e = 0; e < report.epochs.size(); ++e) {
    const auto& em = report.epochs[e];
    csv << e << ',' << em.avg_loss << ',' << em.worst_group_acc;
    for (std::size_t g = 0; g < report.n_groups; ++g)
      csv << ',' << em.group_loss[g] << ',' << em.group_acc[g];
    csv << '\n';
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(IoErrorKind::OpenFailed, path.string(), "cannot open for writing");
  out << csv.str();
  if (!out) throw IoError(IoErrorKind::WriteFailed, path.string(), "write failed");
}

}  // namespace gramclust
