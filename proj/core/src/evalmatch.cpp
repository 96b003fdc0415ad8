#include "gramclust/evalmatch.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>
#include <string>

#include "gramclust/errors.hpp"

namespace gramclust {

std::vector<int> solve_assignment_min(std::span<const double> cost, std::size_t n) {
  if (cost.size() != n * n) throw std::invalid_argument("solve_assignment_min: bad matrix size");
  const double inf = std::numeric_limits<double>::infinity();

  // Kuhn's algorithm with potentials, O(n^3), 1-indexed internals.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1, 0);

  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      std::size_t j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> row_to_col(n, -1);
  for (std::size_t j = 1; j <= n; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = static_cast<int>(j - 1);
  return row_to_col;
}

MatchResult hungarian_match(std::span<const int> pseudo, std::span<const int> truth) {
  if (pseudo.size() != truth.size())
    throw std::invalid_argument("hungarian_match: length mismatch");
  if (pseudo.empty()) throw std::invalid_argument("hungarian_match: empty input");

  int max_p = 0, max_t = 0;
  for (std::size_t i = 0; i < pseudo.size(); ++i) {
    if (pseudo[i] < 0 || truth[i] < 0)
      throw std::invalid_argument("hungarian_match: negative label");
    max_p = std::max(max_p, pseudo[i]);
    max_t = std::max(max_t, truth[i]);
  }
  const auto n_pseudo = static_cast<std::size_t>(max_p) + 1;
  const auto n_truth = static_cast<std::size_t>(max_t) + 1;

  std::vector<std::size_t> contingency(n_pseudo * n_truth, 0);
  for (std::size_t i = 0; i < pseudo.size(); ++i)
    ++contingency[static_cast<std::size_t>(pseudo[i]) * n_truth +
                  static_cast<std::size_t>(truth[i])];

  // Pad to square and negate counts so the min-cost solver maximizes
  // agreement; dummy rows and columns cost zero.
  const std::size_t n = std::max(n_pseudo, n_truth);
  std::vector<double> cost(n * n, 0.0);
  for (std::size_t c = 0; c < n_pseudo; ++c)
    for (std::size_t e = 0; e < n_truth; ++e)
      cost[c * n + e] = -static_cast<double>(contingency[c * n_truth + e]);

  const auto row_to_col = solve_assignment_min(cost, n);

  MatchResult res;
  res.permutation.assign(n_pseudo, -1);
  for (std::size_t c = 0; c < n_pseudo; ++c) {
    const int e = row_to_col[c];
    if (e >= 0 && static_cast<std::size_t>(e) < n_truth) {
      res.permutation[c] = e;
      res.matched_samples += contingency[c * n_truth + static_cast<std::size_t>(e)];
    }
  }
  res.matching_accuracy =
      static_cast<double>(res.matched_samples) / static_cast<double>(pseudo.size());
  return res;
}

GroupAccuracy worst_group_accuracy(std::span<const int> preds, std::span<const int> labels,
                                   std::span<const int> groups, std::size_t n_groups) {
  const std::size_t n = preds.size();
  if (labels.size() != n || groups.size() != n)
    throw std::invalid_argument("worst_group_accuracy: length mismatch");
  if (n == 0) throw std::invalid_argument("worst_group_accuracy: empty input");
  if (n_groups == 0) throw std::invalid_argument("worst_group_accuracy: no groups");

  std::vector<std::size_t> count(n_groups, 0), correct(n_groups, 0);
  std::size_t total_correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int g = groups[i];
    if (g < 0 || static_cast<std::size_t>(g) >= n_groups)
      throw std::invalid_argument("worst_group_accuracy: group id out of range");
    ++count[static_cast<std::size_t>(g)];
    if (preds[i] == labels[i]) {
      ++correct[static_cast<std::size_t>(g)];
      ++total_correct;
    }
  }

  GroupAccuracy res;
  res.per_group.resize(n_groups);
  res.worst = 1.0;
  for (std::size_t g = 0; g < n_groups; ++g) {
    if (count[g] == 0)
      throw ConfigError("group " + std::to_string(g) + " has no samples");
    res.per_group[g] = static_cast<double>(correct[g]) / static_cast<double>(count[g]);
    res.worst = std::min(res.worst, res.per_group[g]);
  }
  res.avg = static_cast<double>(total_correct) / static_cast<double>(n);
  return res;
}

}  // namespace gramclust
