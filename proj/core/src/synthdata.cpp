#include "gramclust/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "gramclust/errors.hpp"
#include "gramclust/parallel.hpp"
#include "gramclust/rng.hpp"

namespace gramclust {

namespace {

constexpr std::size_t kStampSize = 5;
constexpr uint64_t kStampSalt = 0x600;

struct Freq {
  int fx = 0;
  int fy = 0;
};

// Strongly oriented gratings first: all integer frequency pairs below the
// Nyquist band, highest and most anisotropic leading. Distinct pairs are
// exactly orthogonal over the full grid, each with spatial mean zero and
// power M/2 for any phase.
std::vector<Freq> frequency_table(std::size_t image_size) {
  const int fmax = static_cast<int>(image_size) / 2 - 1;
  std::vector<Freq> out;
  for (int a = 1; a <= fmax; ++a)
    for (int b = 1; b <= fmax; ++b) out.push_back({a, b});
  std::sort(out.begin(), out.end(), [](const Freq& l, const Freq& r) {
    const int lm = std::max(l.fx, l.fy), rm = std::max(r.fx, r.fy);
    if (lm != rm) return lm > rm;
    const int ld = std::abs(l.fx - l.fy), rd = std::abs(r.fx - r.fy);
    if (ld != rd) return ld > rd;
    if (l.fx != r.fx) return l.fx < r.fx;
    return l.fy < r.fy;
  });
  return out;
}

struct EnvTexture {
  Freq f1, f2;
  std::vector<double> mix_a;  // per-channel coefficient on grating 1
  std::vector<double> mix_b;  // per-channel coefficient on grating 2
};

// Unit-norm mixing rows: the first two channels carry the gratings straight
// through; remaining channels blend them at a per-environment angle, which
// moves the environment signature into cross-channel covariance while
// keeping per-channel power fixed.
void fill_mixing(EnvTexture& tex, std::size_t channels, std::size_t env,
                 std::size_t n_envs) {
  const double theta =
      std::numbers::pi * (2.0 * static_cast<double>(env) + 1.0) /
      (2.0 * static_cast<double>(n_envs));
  tex.mix_a.assign(channels, 0.0);
  tex.mix_b.assign(channels, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    if (c == 0 && channels >= 2) {
      tex.mix_a[c] = 1.0;
    } else if (c == 1 && channels >= 3) {
      tex.mix_b[c] = 1.0;
    } else {
      tex.mix_a[c] = std::cos(theta);
      tex.mix_b[c] = std::sin(theta);
    }
  }
}

std::vector<EnvTexture> env_textures(const SynthConfig& cfg) {
  const auto freqs = frequency_table(cfg.image_size);
  const std::size_t need =
      cfg.texture_mode == TextureMode::MixingOnly ? 2 : 2 * cfg.n_envs;
  if (freqs.size() < need)
    throw ConfigError("image_size too small to give every environment its own gratings");
  std::vector<EnvTexture> out(cfg.n_envs);
  for (std::size_t e = 0; e < cfg.n_envs; ++e) {
    if (cfg.texture_mode == TextureMode::MixingOnly) {
      out[e].f1 = freqs[0];
      out[e].f2 = freqs[1];
    } else {
      out[e].f1 = freqs[2 * e];
      out[e].f2 = freqs[2 * e + 1];
    }
    fill_mixing(out[e], cfg.channels, e, cfg.n_envs);
  }
  return out;
}

// Per-class localized low-frequency pattern: seeded random values smoothed
// by two box blurs, scaled to unit peak.
std::vector<float> class_stamp(uint64_t seed, int label) {
  SeededRng rng(seed, kStampSalt + static_cast<uint64_t>(label));
  const std::size_t s = kStampSize;
  std::vector<double> a(s * s);
  for (auto& v : a) v = rng.next_double() * 2.0 - 1.0;

  std::vector<double> b(s * s);
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        double acc = 0.0;
        int cnt = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = static_cast<int>(y) + dy;
            const int xx = static_cast<int>(x) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<int>(s) || xx >= static_cast<int>(s))
              continue;
            acc += a[static_cast<std::size_t>(yy) * s + static_cast<std::size_t>(xx)];
            ++cnt;
          }
        }
        b[y * s + x] = acc / cnt;
      }
    }
    std::swap(a, b);
  }

  double peak = 0.0;
  for (const auto v : a) peak = std::max(peak, std::abs(v));
  if (peak == 0.0) peak = 1.0;
  std::vector<float> out(s * s);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(a[i] / peak);
  return out;
}

int aligned_env(int label, std::size_t n_envs) {
  return label % static_cast<int>(n_envs);
}

GroupedDataset make_split(const SynthConfig& cfg, const std::string& split,
                          std::size_t split_index, std::size_t n, double rho,
                          const std::vector<EnvTexture>& textures,
                          const std::vector<std::vector<float>>& stamps) {
  GroupedDataset ds;
  ds.split = split;
  const std::size_t C = cfg.channels;
  const std::size_t S = cfg.image_size;
  ds.images = Tensor({n, C, S, S});
  ds.labels.assign(n, 0);
  ds.envs.assign(n, 0);

  float* img = ds.images.mutable_data().data();
  const double two_pi = 2.0 * std::numbers::pi;

  parallel_for(n, [&](std::size_t i) {
    SeededRng rng(cfg.seed, (static_cast<uint64_t>(split_index) << 32) | i);
    const int y = static_cast<int>(i % cfg.n_classes);
    const int ay = aligned_env(y, cfg.n_envs);
    int e = ay;
    if (rng.next_double() >= rho) {
      auto pick = static_cast<int>(rng.uniform_int(cfg.n_envs - 1));
      e = pick >= ay ? pick + 1 : pick;
    }
    ds.labels[i] = y;
    ds.envs[i] = e;

    const auto& tex = textures[static_cast<std::size_t>(e)];
    const double phi1 = rng.next_double() * two_pi;
    const double phi2 = rng.next_double() * two_pi;
    std::vector<double> gain(C);
    for (std::size_t c = 0; c < C; ++c)
      gain[c] = 1.0 + cfg.gain_jitter * (2.0 * rng.next_double() - 1.0);

    // Per-channel grating coefficients. In mixing-only mode every channel
    // draws an angle on the unit circle — shared across channels with an
    // env-specific probability — so each channel's marginal distribution is
    // identical across environments and only cross-channel coherence moves.
    std::vector<double> ca(C), cb(C);
    if (cfg.texture_mode == TextureMode::MixingOnly) {
      const double coher =
          cfg.n_envs <= 1 ? 1.0
                          : 1.0 - static_cast<double>(e) /
                                      static_cast<double>(cfg.n_envs - 1);
      const double theta_base = rng.next_double() * two_pi;
      for (std::size_t c = 0; c < C; ++c) {
        const double theta = rng.next_double() < coher
                                 ? theta_base
                                 : rng.next_double() * two_pi;
        ca[c] = std::cos(theta);
        cb[c] = std::sin(theta);
      }
    } else {
      for (std::size_t c = 0; c < C; ++c) {
        ca[c] = tex.mix_a[c];
        cb[c] = tex.mix_b[c];
      }
    }

    const auto px = static_cast<std::size_t>(rng.uniform_int(S - kStampSize + 1));
    const auto py = static_cast<std::size_t>(rng.uniform_int(S - kStampSize + 1));
    const float* stamp = stamps[static_cast<std::size_t>(y)].data();
    const double sample_gain =
        1.0 + (rng.next_double() < 0.5 ? -1.0 : 1.0) * cfg.sample_gain_jitter;

    float* base = img + i * C * S * S;
    for (std::size_t h = 0; h < S; ++h) {
      for (std::size_t w = 0; w < S; ++w) {
        const double a1 = two_pi * (tex.f1.fx * static_cast<double>(w) +
                                    tex.f1.fy * static_cast<double>(h)) /
                              static_cast<double>(S) +
                          phi1;
        const double a2 = two_pi * (tex.f2.fx * static_cast<double>(w) +
                                    tex.f2.fy * static_cast<double>(h)) /
                              static_cast<double>(S) +
                          phi2;
        const double g1 = std::sin(a1);
        const double g2 = std::sin(a2);
        double stamp_v = 0.0;
        if (h >= py && h < py + kStampSize && w >= px && w < px + kStampSize)
          stamp_v = cfg.class_signal_strength *
                    stamp[(h - py) * kStampSize + (w - px)];
        for (std::size_t c = 0; c < C; ++c) {
          const double texture =
              cfg.env_texture_strength * gain[c] * (ca[c] * g1 + cb[c] * g2);
          base[c * S * S + h * S + w] = static_cast<float>(
              sample_gain * (texture + stamp_v + cfg.noise_std * rng.normal()));
        }
      }
    }
  });

  return ds;
}

void check_groups_populated(const GroupedDataset& ds, const SynthConfig& cfg,
                            double rho) {
  const auto counts = group_counts(ds, cfg.n_envs, cfg.n_classes, false);
  for (std::size_t e = 0; e < cfg.n_envs; ++e) {
    for (std::size_t y = 0; y < cfg.n_classes; ++y) {
      const bool aligned = static_cast<int>(e) == aligned_env(static_cast<int>(y), cfg.n_envs);
      const bool possible = aligned ? rho > 0.0 : rho < 1.0;
      if (possible && counts[e * cfg.n_classes + y] == 0)
        throw ConfigError("split '" + ds.split + "' has no samples in group (env " +
                          std::to_string(e) + ", class " + std::to_string(y) +
                          "); increase sample counts");
    }
  }
}

}  // namespace

std::string texture_mode_name(TextureMode m) {
  switch (m) {
    case TextureMode::OrientationAndMixing:
      return "orientation_and_mixing";
    case TextureMode::MixingOnly:
      return "mixing_only";
  }
  throw std::invalid_argument("texture_mode_name: bad value");
}

TextureMode texture_mode_from_name(const std::string& name) {
  if (name == "orientation_and_mixing") return TextureMode::OrientationAndMixing;
  if (name == "mixing_only") return TextureMode::MixingOnly;
  throw ConfigError("unknown texture_mode '" + name + "'");
}

void validate(const SynthConfig& cfg) {
  if (cfg.n_classes < 2) throw ConfigError("n_classes must be at least 2");
  if (cfg.n_envs < 2) throw ConfigError("n_envs must be at least 2");
  const double lo = 1.0 / static_cast<double>(cfg.n_envs);
  if (cfg.majority_frac < lo - 1e-12 || cfg.majority_frac > 1.0)
    throw ConfigError("majority_frac must lie in [1/n_envs, 1]");
  if (cfg.image_size < kStampSize + 3)
    throw ConfigError("image_size must be at least " + std::to_string(kStampSize + 3));
  if (cfg.channels < 1) throw ConfigError("channels must be positive");
  if (cfg.texture_mode == TextureMode::MixingOnly && cfg.channels < 2)
    throw ConfigError("mixing_only texture needs at least 2 channels");
  if (cfg.n_train == 0 || cfg.n_val == 0 || cfg.n_test == 0)
    throw ConfigError("sample counts must be positive");
  if (cfg.class_signal_strength < 0 || cfg.env_texture_strength < 0)
    throw ConfigError("signal strengths must be non-negative");
  if (cfg.gain_jitter < 0 || cfg.gain_jitter >= 1.0)
    throw ConfigError("gain_jitter must lie in [0, 1)");
  if (cfg.sample_gain_jitter < 0 || cfg.sample_gain_jitter >= 1.0)
    throw ConfigError("sample_gain_jitter must lie in [0, 1)");
  if (cfg.noise_std < 0) throw ConfigError("noise_std must be non-negative");
}

Tensor GroupedDataset::image(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("GroupedDataset::image: index out of range");
  const std::size_t per = images.dim(1) * images.dim(2) * images.dim(3);
  Tensor out({images.dim(1), images.dim(2), images.dim(3)});
  std::memcpy(out.mutable_data().data(), images.data().data() + i * per,
              per * sizeof(float));
  return out;
}

SynthBundle generate(const SynthConfig& cfg) {
  validate(cfg);
  const auto textures = env_textures(cfg);
  std::vector<std::vector<float>> stamps;
  stamps.reserve(cfg.n_classes);
  for (std::size_t y = 0; y < cfg.n_classes; ++y)
    stamps.push_back(class_stamp(cfg.seed, static_cast<int>(y)));

  const double shift_rho = 1.0 / static_cast<double>(cfg.n_envs);

  SynthBundle b;
  b.config = cfg;
  b.train = make_split(cfg, "train", 0, cfg.n_train, cfg.majority_frac, textures, stamps);
  b.val = make_split(cfg, "val", 1, cfg.n_val, cfg.majority_frac, textures, stamps);
  b.test_ind = make_split(cfg, "test_ind", 2, cfg.n_test, cfg.majority_frac, textures, stamps);
  b.test_shift = make_split(cfg, "test_shift", 3, cfg.n_test, shift_rho, textures, stamps);

  check_groups_populated(b.train, cfg, cfg.majority_frac);
  check_groups_populated(b.val, cfg, cfg.majority_frac);
  check_groups_populated(b.test_ind, cfg, cfg.majority_frac);
  check_groups_populated(b.test_shift, cfg, shift_rho);
  return b;
}

std::vector<std::size_t> group_counts(const GroupedDataset& ds, std::size_t n_envs,
                                      std::size_t n_classes, bool use_pseudo) {
  const auto& envs = use_pseudo ? ds.pseudo_envs : ds.envs;
  if (use_pseudo && ds.pseudo_envs.empty())
    throw ConfigError("pseudo environment labels requested but absent");
  if (envs.size() != ds.labels.size())
    throw std::invalid_argument("group_counts: label/env length mismatch");
  std::vector<std::size_t> counts(n_envs * n_classes, 0);
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    const auto e = static_cast<std::size_t>(envs[i]);
    const auto y = static_cast<std::size_t>(ds.labels[i]);
    if (e >= n_envs || y >= n_classes)
      throw std::invalid_argument("group_counts: label out of range");
    counts[e * n_classes + y] += 1;
  }
  return counts;
}

void bundle_save(const SynthBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const GroupedDataset* splits[] = {&bundle.train, &bundle.val, &bundle.test_ind,
                                    &bundle.test_shift};

  std::size_t total = 0;
  for (const auto* s : splits) total += s->size();
  const auto& cfg = bundle.config;
  Tensor all({total, cfg.channels, cfg.image_size, cfg.image_size});
  float* dst = all.mutable_data().data();
  const std::size_t per = cfg.channels * cfg.image_size * cfg.image_size;

  std::ostringstream csv;
  csv << "index,y,e,split\n";
  std::size_t row = 0;
  for (const auto* s : splits) {
    std::memcpy(dst + row * per, s->images.data().data(),
                s->size() * per * sizeof(float));
    for (std::size_t i = 0; i < s->size(); ++i, ++row)
      csv << row << ',' << s->labels[i] << ',' << s->envs[i] << ',' << s->split << '\n';
  }

  tensor_save(all, dir / "images.grtn");

  const auto csv_path = dir / "labels.csv";
  std::ofstream csv_out(csv_path, std::ios::trunc);
  if (!csv_out) throw IoError(IoErrorKind::OpenFailed, csv_path.string(), "cannot open for writing");
  csv_out << csv.str();
  if (!csv_out) throw IoError(IoErrorKind::WriteFailed, csv_path.string(), "write failed");

  nlohmann::json j;
  j["schema_version"] = 1;
  j["n_train"] = cfg.n_train;
  j["n_val"] = cfg.n_val;
  j["n_test"] = cfg.n_test;
  j["image_size"] = cfg.image_size;
  j["channels"] = cfg.channels;
  j["n_classes"] = cfg.n_classes;
  j["n_envs"] = cfg.n_envs;
  j["majority_frac"] = cfg.majority_frac;
  j["class_signal_strength"] = cfg.class_signal_strength;
  j["env_texture_strength"] = cfg.env_texture_strength;
  j["gain_jitter"] = cfg.gain_jitter;
  j["sample_gain_jitter"] = cfg.sample_gain_jitter;
  j["noise_std"] = cfg.noise_std;
  j["texture_mode"] = texture_mode_name(cfg.texture_mode);
  j["seed"] = cfg.seed;
  const auto man_path = dir / "manifest.json";
  std::ofstream man(man_path, std::ios::trunc);
  if (!man) throw IoError(IoErrorKind::OpenFailed, man_path.string(), "cannot open for writing");
  man << j.dump(2) << '\n';
  if (!man) throw IoError(IoErrorKind::WriteFailed, man_path.string(), "write failed");
}

SynthBundle bundle_load(const std::filesystem::path& dir) {
  const auto man_path = dir / "manifest.json";
  std::ifstream man(man_path);
  if (!man) throw IoError(IoErrorKind::OpenFailed, man_path.string(), "cannot open for reading");
  nlohmann::json j;
  try {
    man >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoErrorKind::BadMagic, man_path.string(), e.what());
  }

  SynthConfig cfg;
  try {
    cfg.n_train = j.at("n_train").get<std::size_t>();
    cfg.n_val = j.at("n_val").get<std::size_t>();
    cfg.n_test = j.at("n_test").get<std::size_t>();
    cfg.image_size = j.at("image_size").get<std::size_t>();
    cfg.channels = j.at("channels").get<std::size_t>();
    cfg.n_classes = j.at("n_classes").get<std::size_t>();
    cfg.n_envs = j.at("n_envs").get<std::size_t>();
    cfg.majority_frac = j.at("majority_frac").get<double>();
    cfg.class_signal_strength = j.at("class_signal_strength").get<double>();
    cfg.env_texture_strength = j.at("env_texture_strength").get<double>();
    cfg.gain_jitter = j.at("gain_jitter").get<double>();
  if (j.contains("sample_gain_jitter"))
    cfg.sample_gain_jitter = j.at("sample_gain_jitter").get<double>();
    cfg.noise_std = j.at("noise_std").get<double>();
    cfg.texture_mode = texture_mode_from_name(j.at("texture_mode").get<std::string>());
    cfg.seed = j.at("seed").get<uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoErrorKind::TruncatedPayload, man_path.string(), e.what());
  }

  const Tensor all = tensor_load(dir / "images.grtn");
  if (all.rank() != 4 || all.dim(1) != cfg.channels || all.dim(2) != cfg.image_size ||
      all.dim(3) != cfg.image_size)
    throw IoError(IoErrorKind::SizeMismatch, (dir / "images.grtn").string(),
                  "image tensor shape does not match manifest");
  const std::size_t per = cfg.channels * cfg.image_size * cfg.image_size;

  const auto csv_path = dir / "labels.csv";
  std::ifstream csv(csv_path);
  if (!csv) throw IoError(IoErrorKind::OpenFailed, csv_path.string(), "cannot open for reading");

  SynthBundle b;
  b.config = cfg;
  GroupedDataset* by_name[4] = {&b.train, &b.val, &b.test_ind, &b.test_shift};
  const std::string names[4] = {"train", "val", "test_ind", "test_shift"};
  std::vector<std::size_t> rows[4];

  std::string line;
  std::getline(csv, line);  // header
  std::size_t row = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string idx_s, y_s, e_s, split_s;
    if (!std::getline(ss, idx_s, ',') || !std::getline(ss, y_s, ',') ||
        !std::getline(ss, e_s, ',') || !std::getline(ss, split_s))
      throw IoError(IoErrorKind::TruncatedPayload, csv_path.string(),
                    "malformed row " + std::to_string(row));
    int which = -1;
    for (int s = 0; s < 4; ++s)
      if (split_s == names[s]) which = s;
    if (which < 0)
      throw IoError(IoErrorKind::TruncatedPayload, csv_path.string(),
                    "unknown split '" + split_s + "'");
    auto* ds = by_name[which];
    ds->labels.push_back(std::stoi(y_s));
    ds->envs.push_back(std::stoi(e_s));
    rows[which].push_back(static_cast<std::size_t>(std::stoull(idx_s)));
    ++row;
  }
  if (row != all.dim(0))
    throw IoError(IoErrorKind::SizeMismatch, csv_path.string(),
                  "row count does not match image count");

  for (int s = 0; s < 4; ++s) {
    auto* ds = by_name[s];
    ds->split = names[s];
    ds->images = Tensor({ds->size(), cfg.channels, cfg.image_size, cfg.image_size});
    float* dst = ds->images.mutable_data().data();
    for (std::size_t i = 0; i < ds->size(); ++i) {
      if (rows[s][i] >= all.dim(0))
        throw IoError(IoErrorKind::SizeMismatch, csv_path.string(),
                      "row index out of range");
      std::memcpy(dst + i * per, all.data().data() + rows[s][i] * per,
                  per * sizeof(float));
    }
  }
  return b;
}

}  // namespace gramclust
