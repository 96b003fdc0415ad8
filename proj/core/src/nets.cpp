#include "gramclust/nets.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "gramclust/errors.hpp"
#include "gramclust/parallel.hpp"
#include "gramclust/rng.hpp"

namespace gramclust {

namespace {

constexpr uint64_t kInitSalt = 0x100;
constexpr std::size_t kReduceBlock = 64;

const char* kArchitecture = "conv3x3x8-relu-conv3x3x16-relu-conv3x3x32-relu-gap-linear";

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void check_image_stack(const NetParams& p, const Tensor& images) {
  if (images.rank() != 4) throw std::invalid_argument("expected [N, C, H, W] images");
  if (images.dim(1) != p.in_channels)
    throw std::invalid_argument("image channel count does not match net");
}

void check_single_image(const NetParams& p, const Tensor& image) {
  if (image.rank() != 3) throw std::invalid_argument("expected [C, H, W] image");
  if (image.dim(0) != p.in_channels)
    throw std::invalid_argument("image channel count does not match net");
}

}  // namespace

void validate(const SgdmConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("lr must be positive");
  if (cfg.l2 < 0.0) throw ConfigError("l2 must be non-negative");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0)
    throw ConfigError("momentum must lie in [0, 1)");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
}

NetParams init_net(std::size_t in_channels, std::size_t n_classes, uint64_t seed) {
  if (in_channels == 0) throw ConfigError("in_channels must be positive");
  if (n_classes < 2) throw ConfigError("n_classes must be at least 2");
  NetParams p;
  p.resize(in_channels, n_classes);
  for (std::size_t l = 0; l < 3; ++l) {
    SeededRng rng(seed, kInitSalt + l);
    const std::size_t fan_in = NetParams::conv_in_channels(l, in_channels) * 9;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& w : p.conv_w[l]) w = static_cast<float>(rng.uniform(-bound, bound));
  }
  {
    SeededRng rng(seed, kInitSalt + 3);
    const double bound = std::sqrt(6.0 / static_cast<double>(kConvChannels[2]));
    for (auto& w : p.fc_w) w = static_cast<float>(rng.uniform(-bound, bound));
  }
  return p;
}

void sgdm_step(NetParams& params, const NetParams& grads, const SgdmConfig& cfg,
               NetParams& momentum) {
  if (params.param_count() != grads.param_count() ||
      params.param_count() != momentum.param_count())
    throw std::invalid_argument("sgdm_step: parameter layout mismatch");

  auto update = [&](std::vector<float>& theta, const std::vector<float>& g,
                    std::vector<float>& v) {
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double vi = cfg.momentum * static_cast<double>(v[i]) +
                        (static_cast<double>(g[i]) + cfg.l2 * static_cast<double>(theta[i]));
      v[i] = static_cast<float>(vi);
      theta[i] = static_cast<float>(static_cast<double>(theta[i]) - cfg.lr * vi);
    }
  };
  for (std::size_t l = 0; l < 3; ++l) {
    update(params.conv_w[l], grads.conv_w[l], momentum.conv_w[l]);
    update(params.conv_b[l], grads.conv_b[l], momentum.conv_b[l]);
  }
  update(params.fc_w, grads.fc_w, momentum.fc_w);
  update(params.fc_b, grads.fc_b, momentum.fc_b);
}

std::vector<float> forward(const NetParams& p, const Tensor& image) {
  check_single_image(p, image);
  NetActs acts;
  net_forward(p, image.data().data(), image.dim(1), image.dim(2), acts);
  return acts.logits;
}

std::vector<int> predict(const NetParams& p, const Tensor& images) {
  check_image_stack(p, images);
  const std::size_t n = images.dim(0);
  const std::size_t h = images.dim(2);
  const std::size_t w = images.dim(3);
  const std::size_t img_len = p.in_channels * h * w;
  const float* data = images.data().data();
  std::vector<int> out(n);
  parallel_for(n, [&](std::size_t i) {
    NetActs acts;
    net_forward(p, data + i * img_len, h, w, acts);
    std::size_t best = 0;
    for (std::size_t j = 1; j < p.n_classes; ++j)
      if (acts.logits[j] > acts.logits[best]) best = j;
    out[i] = static_cast<int>(best);
  });
  return out;
}

double mean_loss(const NetParams& p, const Tensor& images, std::span<const int> labels) {
  check_image_stack(p, images);
  const std::size_t n = images.dim(0);
  if (labels.size() != n) throw std::invalid_argument("mean_loss: label count mismatch");
  const std::size_t h = images.dim(2);
  const std::size_t w = images.dim(3);
  const std::size_t img_len = p.in_channels * h * w;
  const float* data = images.data().data();

  std::vector<double> losses(n);
  parallel_for(n, [&](std::size_t i) {
    NetActs acts;
    net_forward(p, data + i * img_len, h, w, acts);
    std::vector<float> dl(p.n_classes);
    losses[i] = netmath::softmax_xent(acts.logits.data(), p.n_classes, labels[i], dl.data());
  });
  double total = 0.0;
  for (const auto l : losses) total += l;
  return total / static_cast<double>(n);
}

std::vector<double> batch_losses(const NetParams& p, const Tensor& images,
                                 std::span<const std::size_t> indices,
                                 std::span<const int> labels) {
  check_image_stack(p, images);
  if (labels.size() != indices.size())
    throw std::invalid_argument("batch_losses: length mismatch");
  const std::size_t h = images.dim(2);
  const std::size_t w = images.dim(3);
  const std::size_t img_len = p.in_channels * h * w;
  const float* data = images.data().data();

  std::vector<double> out(indices.size());
  parallel_for(indices.size(), [&](std::size_t i) {
    NetActs acts;
    net_forward(p, data + indices[i] * img_len, h, w, acts);
    std::vector<float> dl(p.n_classes);
    out[i] = netmath::softmax_xent(acts.logits.data(), p.n_classes, labels[i], dl.data());
  });
  return out;
}

std::vector<FeatureMap> extract_features(const NetParams& p, const Tensor& image,
                                         std::span<const int> layer_ids) {
  check_single_image(p, image);
  for (const auto id : layer_ids)
    if (id < 1 || id > kNumConvLayers)
      throw std::invalid_argument("extract_features: unknown layer id " + std::to_string(id));

  const std::size_t h = image.dim(1);
  const std::size_t w = image.dim(2);
  NetActs acts;
  net_forward(p, image.data().data(), h, w, acts);

  std::vector<FeatureMap> out;
  out.reserve(layer_ids.size());
  const std::size_t hw = h * w;
  for (const auto id : layer_ids) {
    const auto l = static_cast<std::size_t>(id - 1);
    const std::size_t c = kConvChannels[l];
    Tensor values({hw, c});
    float* dst = values.mutable_data().data();
    const float* src = acts.conv_out[l].data();  // [c, hw]
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t m = 0; m < hw; ++m) dst[m * c + ch] = src[ch * hw + m];
    out.push_back(FeatureMap{id, std::move(values)});
  }
  return out;
}

WeightedBatchResult weighted_batch_grads(const NetParams& p, const Tensor& images,
                                         std::span<const std::size_t> indices,
                                         std::span<const int> labels,
                                         std::span<const double> weights,
                                         NetParams& grads) {
  check_image_stack(p, images);
  const std::size_t n = indices.size();
  if (labels.size() != n || weights.size() != n)
    throw std::invalid_argument("weighted_batch_grads: length mismatch");
  const std::size_t h = images.dim(2);
  const std::size_t w = images.dim(3);
  const std::size_t img_len = p.in_channels * h * w;
  const float* data = images.data().data();

  grads.resize(p.in_channels, p.n_classes);

  WeightedBatchResult res;
  res.per_sample_loss.resize(n);
  res.predictions.resize(n);

  // Double accumulators so the final gradient is independent of how samples
  // were grouped during reduction.
  NetParamsT<double> acc;
  acc.resize(p.in_channels, p.n_classes);

  std::vector<NetParams> sample_grads;
  for (std::size_t start = 0; start < n; start += kReduceBlock) {
    const std::size_t count = std::min(kReduceBlock, n - start);
    sample_grads.assign(count, NetParams{});
    parallel_for(count, [&](std::size_t b) {
      const std::size_t i = start + b;
      sample_grads[b].resize(p.in_channels, p.n_classes);
      NetActs acts;
      const float* img = data + indices[i] * img_len;
      net_forward(p, img, h, w, acts);
      std::vector<float> dlogits(p.n_classes);
      const float loss = netmath::softmax_xent(acts.logits.data(), p.n_classes,
                                               labels[i], dlogits.data());
      res.per_sample_loss[i] = loss;
      std::size_t best = 0;
      for (std::size_t j = 1; j < p.n_classes; ++j)
        if (acts.logits[j] > acts.logits[best]) best = j;
      res.predictions[i] = static_cast<int>(best);
      const auto wgt = static_cast<float>(weights[i]);
      for (auto& g : dlogits) g *= wgt;
      net_backward(p, img, h, w, acts, dlogits.data(), sample_grads[b]);
    });
    // Fixed-order reduction, one sample at a time.
    for (std::size_t b = 0; b < count; ++b) {
      for (std::size_t l = 0; l < 3; ++l) {
        for (std::size_t i = 0; i < acc.conv_w[l].size(); ++i)
          acc.conv_w[l][i] += static_cast<double>(sample_grads[b].conv_w[l][i]);
        for (std::size_t i = 0; i < acc.conv_b[l].size(); ++i)
          acc.conv_b[l][i] += static_cast<double>(sample_grads[b].conv_b[l][i]);
      }
      for (std::size_t i = 0; i < acc.fc_w.size(); ++i)
        acc.fc_w[i] += static_cast<double>(sample_grads[b].fc_w[i]);
      for (std::size_t i = 0; i < acc.fc_b.size(); ++i)
        acc.fc_b[i] += static_cast<double>(sample_grads[b].fc_b[i]);
    }
  }

  for (std::size_t l = 0; l < 3; ++l) {
    for (std::size_t i = 0; i < acc.conv_w[l].size(); ++i)
      grads.conv_w[l][i] = static_cast<float>(acc.conv_w[l][i]);
    for (std::size_t i = 0; i < acc.conv_b[l].size(); ++i)
      grads.conv_b[l][i] = static_cast<float>(acc.conv_b[l][i]);
  }
  for (std::size_t i = 0; i < acc.fc_w.size(); ++i)
    grads.fc_w[i] = static_cast<float>(acc.fc_w[i]);
  for (std::size_t i = 0; i < acc.fc_b.size(); ++i)
    grads.fc_b[i] = static_cast<float>(acc.fc_b[i]);

  for (std::size_t i = 0; i < n; ++i)
    res.loss += weights[i] * res.per_sample_loss[i];
  return res;
}

LossAndGrads loss_and_grads(const NetParams& p, const Tensor& images,
                            std::span<const int> labels) {
  check_image_stack(p, images);
  const std::size_t n = images.dim(0);
  if (n == 0) throw std::invalid_argument("loss_and_grads: empty batch");
  if (labels.size() != n) throw std::invalid_argument("loss_and_grads: label count mismatch");

  std::vector<std::size_t> indices(n);
  for (std::size_t i = 0; i < n; ++i) indices[i] = i;
  std::vector<double> weights(n, 1.0 / static_cast<double>(n));

  LossAndGrads out;
  const auto res = weighted_batch_grads(p, images, indices, labels, weights, out.grads);
  out.loss = res.loss;
  return out;
}

void checkpoint_save(const NetParams& p, const std::filesystem::path& dir,
                     uint64_t seed, std::size_t epoch) {
  std::filesystem::create_directories(dir);
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t c_in = NetParams::conv_in_channels(l, p.in_channels);
    tensor_save(Tensor({kConvChannels[l], c_in, 3, 3}, p.conv_w[l]),
                dir / ("conv" + std::to_string(l + 1) + "_w.grtn"));
    tensor_save(Tensor({kConvChannels[l]}, p.conv_b[l]),
                dir / ("conv" + std::to_string(l + 1) + "_b.grtn"));
  }
  tensor_save(Tensor({p.n_classes, kConvChannels[2]}, p.fc_w), dir / "fc_w.grtn");
  tensor_save(Tensor({p.n_classes}, p.fc_b), dir / "fc_b.grtn");

  nlohmann::json j;
  j["schema_version"] = 1;
  j["architecture"] = kArchitecture;
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx",
                static_cast<unsigned long long>(fnv1a(kArchitecture)));
  j["architecture_hash"] = hash;
  j["in_channels"] = p.in_channels;
  j["n_classes"] = p.n_classes;
  j["seed"] = seed;
  j["epoch"] = epoch;
  const auto man_path = dir / "manifest.json";
  std::ofstream man(man_path, std::ios::trunc);
  if (!man) throw IoError(IoErrorKind::OpenFailed, man_path.string(), "cannot open for writing");
  man << j.dump(2) << '\n';
  if (!man) throw IoError(IoErrorKind::WriteFailed, man_path.string(), "write failed");
}

NetParams checkpoint_load(const std::filesystem::path& dir) {
  const auto man_path = dir / "manifest.json";
  std::ifstream man(man_path);
  if (!man) throw IoError(IoErrorKind::OpenFailed, man_path.string(), "cannot open for reading");
  nlohmann::json j;
  try {
    man >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoErrorKind::BadMagic, man_path.string(), e.what());
  }
  std::size_t in_channels = 0, n_classes = 0;
  std::string arch;
  try {
    arch = j.at("architecture").get<std::string>();
    in_channels = j.at("in_channels").get<std::size_t>();
    n_classes = j.at("n_classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoErrorKind::TruncatedPayload, man_path.string(), e.what());
  }
  if (arch != kArchitecture)
    throw IoError(IoErrorKind::BadVersion, man_path.string(),
                  "unexpected architecture '" + arch + "'");

  NetParams p;
  p.resize(in_channels, n_classes);
  auto load_into = [&](const std::string& name, std::vector<float>& dst) {
    const Tensor t = tensor_load(dir / (name + ".grtn"));
    if (t.numel() != dst.size())
      throw IoError(IoErrorKind::SizeMismatch, (dir / (name + ".grtn")).string(),
                    "parameter size mismatch");
    std::memcpy(dst.data(), t.data().data(), dst.size() * sizeof(float));
  };
  for (std::size_t l = 0; l < 3; ++l) {
    load_into("conv" + std::to_string(l + 1) + "_w", p.conv_w[l]);
    load_into("conv" + std::to_string(l + 1) + "_b", p.conv_b[l]);
  }
  load_into("fc_w", p.fc_w);
  load_into("fc_b", p.fc_b);
  return p;
}

}  // namespace gramclust
