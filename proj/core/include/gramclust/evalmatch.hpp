#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace gramclust {

struct MatchResult {
  /// cluster id -> matched true-env id, -1 for clusters left unmatched
  /// (possible when there are more clusters than true environments).
  std::vector<int> permutation;
  /// samples whose matched pseudo-env equals their true env, over all samples
  double matching_accuracy = 0.0;
  /// number of agreeing samples (the assignment objective value)
  std::size_t matched_samples = 0;
};

/// Optimal injective relabeling of pseudo labels onto true labels via
/// max-weight assignment on the contingency matrix. Labels are dense
/// 0-based ids; label counts are inferred from the data.
MatchResult hungarian_match(std::span<const int> pseudo, std::span<const int> truth);

/// Min-cost assignment on a square n x n cost matrix (row-major); returns
/// row -> column. Exposed for property tests against brute force.
std::vector<int> solve_assignment_min(std::span<const double> cost, std::size_t n);

struct GroupAccuracy {
  double worst = 0.0;
  double avg = 0.0;
  std::vector<double> per_group;
};

/// Per-group and overall accuracy; groups are dense ids in [0, n_groups) and
/// every group must be populated.
GroupAccuracy worst_group_accuracy(std::span<const int> preds, std::span<const int> labels,
                                   std::span<const int> groups, std::size_t n_groups);

}  // namespace gramclust
