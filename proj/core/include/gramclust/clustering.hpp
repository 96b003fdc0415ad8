#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "gramclust/tensor.hpp"

namespace gramclust {

struct KMeansConfig {
  std::size_t k = 2;
  std::size_t max_iter = 300;
  double tol = 1e-6;  // relative inertia improvement below this stops Lloyd
  uint64_t seed = 0;
};

struct KMeansResult {
  Tensor centroids;                     // [k, D]
  std::vector<int> assignments;         // length N, values in [0, k)
  std::vector<std::size_t> counts;      // per-cluster sizes
  double inertia = 0.0;                 // sum of squared distances to assigned centroid
  std::vector<double> inertia_history;  // one entry per completed Lloyd iteration
  std::size_t iterations = 0;
  bool converged = false;
};

/// Seeded k-means++ over the rows of points ([N, D]), then Lloyd iterations
/// until the relative inertia improvement drops below tol or max_iter is hit.
/// Requires at least k distinct rows. Empty clusters are repaired by seizing
/// the point farthest from its assigned centroid.
KMeansResult kmeans(const Tensor& points, const KMeansConfig& cfg);

/// Objective in pairwise form: sum over clusters of the mean pairwise squared
/// distance mass, sum_e (1/|C_e|) * sum_{i,j in C_e} ||x_i - x_j||^2.
/// Equals exactly twice the centroid inertia.
double pairwise_objective(const Tensor& points, const std::vector<int>& assignments,
                          std::size_t k);

/// Centroid-form objective recomputed from scratch for the given assignment.
double inertia_of(const Tensor& points, const Tensor& centroids,
                  const std::vector<int>& assignments);

/// Map each row of vecs to its nearest centroid; ties go to the lowest
/// cluster index.
std::vector<int> assign_to_centroids(const Tensor& centroids, const Tensor& vecs);

/// Persist as <json_path> plus a sibling centroids file (same stem, .grtn).
void clustering_save(const KMeansResult& res, const std::filesystem::path& json_path);
KMeansResult clustering_load(const std::filesystem::path& json_path);

}  // namespace gramclust
