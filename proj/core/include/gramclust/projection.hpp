#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "gramclust/stylefeat.hpp"
#include "gramclust/tensor.hpp"

namespace gramclust {

/// Seeded sign matrix P in {+1,-1}^{rows x cols}. Entries depend only on
/// (seed, row, col) and are materialized lazily one row at a time, so the
/// full matrix is never held in memory.
struct ProjectionMatrix {
  std::size_t rows = 0;  // target dimension l0
  std::size_t cols = 0;  // input dimension D
  uint64_t seed = 0;

  float entry(std::size_t r, std::size_t c) const;

  /// Fill out (length cols) with row r of P.
  void fill_row(std::size_t r, std::span<float> out) const;
};

ProjectionMatrix make_projection(std::size_t target_dim, std::size_t input_dim,
                                 uint64_t seed);

/// Target dimension floor(100 * ln(n)), clamped from below to 8.
/// Requires n >= 2.
std::size_t default_projection_dim(std::size_t n);

/// (1 / sqrt(l0)) * P * f for a single vector of length cols.
std::vector<float> project(const ProjectionMatrix& p, std::span<const float> f);

/// Project every row of a [N, cols] tensor to [N, rows]. Streams P row by
/// row; output is identical to calling project() per sample.
Tensor project_rows(const ProjectionMatrix& p, const Tensor& vecs);

struct DistortionReport {
  double epsilon = 0.0;
  std::size_t pairs_checked = 0;
  std::size_t pairs_within_bound = 0;
};

/// Sample up to max_pairs distinct index pairs from vecs ([N, D]) and count
/// how many satisfy the (1 +- epsilon) distance sandwich after projection.
/// Zero-distance pairs always count as within bound. Pair sampling is
/// seeded from p.seed.
DistortionReport distortion_check(const ProjectionMatrix& p, const Tensor& vecs,
                                  double epsilon, std::size_t max_pairs);

/// Independent per-layer projections derived from one master seed; applies
/// the same target dimension to every block of a style vector and
/// concatenates the projected blocks in layer order.
class StyleProjector {
public:
  StyleProjector() = default;
  StyleProjector(uint64_t master_seed, std::size_t target_dim,
                 std::span<const int> layer_ids, std::span<const std::size_t> block_dims);

  std::size_t output_dim() const { return target_dim_ * mats_.size(); }
  std::size_t target_dim() const { return target_dim_; }
  uint64_t master_seed() const { return master_seed_; }
  const std::vector<ProjectionMatrix>& matrices() const { return mats_; }
  const std::vector<int>& layer_ids() const { return layer_ids_; }
  const std::vector<std::size_t>& block_dims() const { return block_dims_; }

  std::vector<float> project_style(const StyleVector& sv) const;

  /// Project a stack of flattened style vectors [N, sum(block_dims)] to
  /// [N, output_dim()], block by block.
  Tensor project_stack(const Tensor& stack) const;

  void save(const std::filesystem::path& json_path) const;
  static StyleProjector load(const std::filesystem::path& json_path);

private:
  uint64_t master_seed_ = 0;
  std::size_t target_dim_ = 0;
  std::vector<int> layer_ids_;
  std::vector<std::size_t> block_dims_;
  std::vector<ProjectionMatrix> mats_;
};

}  // namespace gramclust
