#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gramclust/tensor.hpp"

namespace gramclust {

/// One layer's activations for one image, flattened to spatial-by-channel:
/// values has shape [M, C] with M spatial positions and C channels.
struct FeatureMap {
  int layer_id = 0;
  Tensor values;

  std::size_t positions() const { return values.dim(0); }
  std::size_t channels() const { return values.dim(1); }
};

/// Concatenation of per-layer feature-statistics blocks. Every nonzero block
/// has unit Euclidean norm; all-zero blocks are kept as zeros and counted in
/// zero_block_count so a degenerate image cannot abort a batch run.
struct StyleVector {
  struct Block {
    int layer_id = 0;
    std::vector<float> values;
  };

  std::vector<Block> blocks;
  std::size_t zero_block_count = 0;

  std::size_t dim() const;
  std::vector<float> concat() const;
};

/// Channel second-moment matrix of a feature map: (1/M) * phi^T phi,
/// shape [C, C]. Symmetric by construction and positive semi-definite.
Tensor gram(const FeatureMap& fm);

/// Per-layer vectorized Gram matrices, each block normalized to unit length,
/// concatenated in the given layer order. Layers must be distinct.
StyleVector style_vector(std::span<const FeatureMap> fms);

/// Per-layer channel-wise spatial means then population variances
/// (divide by M), block-normalized. A single spatial position yields a
/// zero variance half.
StyleVector meanvar_vector(std::span<const FeatureMap> fms);

/// Spatially averaged channel vector of the final layer, normalized.
StyleVector penultimate_vector(const FeatureMap& fm);

/// Block layout sidecar describing a saved style vector (or a stack of them).
struct StyleSidecar {
  std::string style;                 // "gram" | "meanvar" | "penultimate"
  std::vector<int> layer_ids;
  std::vector<std::size_t> block_offsets;
  std::vector<std::size_t> block_dims;
};

/// Save one style vector as a GRTN [D] tensor plus a JSON sidecar at
/// <path>.json listing layer ids and block offsets.
void style_vector_save(const StyleVector& sv, const std::string& style,
                       const std::filesystem::path& path);

StyleSidecar style_sidecar_load(const std::filesystem::path& json_path);
void style_sidecar_save(const StyleSidecar& sc, const std::filesystem::path& json_path);

}  // namespace gramclust
