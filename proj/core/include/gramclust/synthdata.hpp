#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gramclust/tensor.hpp"

namespace gramclust {

/// How environments imprint themselves on the texture field.
/// OrientationAndMixing gives each environment its own grating orientations
/// and its own cross-channel mixing. MixingOnly shares one grating pair
/// across all environments and varies only the mixing, so per-channel means
/// and variances are equal across environments by construction.
enum class TextureMode {
  OrientationAndMixing,
  MixingOnly,
};

std::string texture_mode_name(TextureMode m);
TextureMode texture_mode_from_name(const std::string& name);

struct SynthConfig {
  std::size_t n_train = 4000;
  std::size_t n_val = 1000;
  std::size_t n_test = 1000;
  std::size_t image_size = 16;  // H = W
  std::size_t channels = 3;
  std::size_t n_classes = 2;  // K
  std::size_t n_envs = 2;     // E
  double majority_frac = 0.95;  // P(env == class-aligned env)
  double class_signal_strength = 8.0;
  double env_texture_strength = 8.0;
  double gain_jitter = 0.3;  // per-channel texture gain drawn from [1-j, 1+j]
  double sample_gain_jitter = 0.0;  // whole-image gain, coin-flipped between 1-j and 1+j
  double noise_std = 0.8;
  TextureMode texture_mode = TextureMode::OrientationAndMixing;
  uint64_t seed = 0;
};

/// Throws ConfigError on out-of-range fields.
void validate(const SynthConfig& cfg);

struct GroupedDataset {
  Tensor images;  // [N, C, H, W]
  std::vector<int> labels;       // y in [0, K)
  std::vector<int> envs;         // e in [0, E)
  std::vector<int> pseudo_envs;  // empty until discovery assigns them
  std::string split;

  std::size_t size() const { return labels.size(); }
  bool has_pseudo() const { return !pseudo_envs.empty(); }

  /// View of image i as a fresh [C, H, W] tensor.
  Tensor image(std::size_t i) const;
};

struct SynthBundle {
  SynthConfig config;
  GroupedDataset train;
  GroupedDataset val;
  GroupedDataset test_ind;    // same correlation strength as train
  GroupedDataset test_shift;  // no class-environment correlation
};

/// Seeded generation of all four splits. Class labels rotate round-robin so
/// classes are exactly balanced; each sample's environment is its
/// class-aligned one with probability majority_frac, else uniform over the
/// others. Throws ConfigError if any positive-probability (env, class) group
/// ends up empty in some split.
SynthBundle generate(const SynthConfig& cfg);

/// Counts per (env, class) cell, indexed env * n_classes + y. Sum equals
/// ds.size(). With use_pseudo, envs come from ds.pseudo_envs (error if absent).
std::vector<std::size_t> group_counts(const GroupedDataset& ds, std::size_t n_envs,
                                      std::size_t n_classes, bool use_pseudo);

/// Directory layout: images.grtn (all splits stacked), labels.csv
/// (index, y, e, split), manifest.json (config echo).
void bundle_save(const SynthBundle& bundle, const std::filesystem::path& dir);
SynthBundle bundle_load(const std::filesystem::path& dir);

}  // namespace gramclust
