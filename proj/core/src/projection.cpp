#include "gramclust/projection.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "gramclust/errors.hpp"
#include "gramclust/parallel.hpp"
#include "gramclust/rng.hpp"

namespace gramclust {

namespace {

constexpr uint64_t kLayerSeedSalt = 0x400;

}  // namespace

float ProjectionMatrix::entry(std::size_t r, std::size_t c) const {
  return sign_entry(seed, r, c);
}

void ProjectionMatrix::fill_row(std::size_t r, std::span<float> out) const {
  if (out.size() != cols) throw std::invalid_argument("fill_row: bad span length");
  for (std::size_t c = 0; c < cols; ++c) out[c] = sign_entry(seed, r, c);
}

ProjectionMatrix make_projection(std::size_t target_dim, std::size_t input_dim,
                                 uint64_t seed) {
  if (target_dim == 0) throw std::invalid_argument("projection: target_dim must be positive");
  if (input_dim == 0) throw std::invalid_argument("projection: input_dim must be positive");
  return ProjectionMatrix{target_dim, input_dim, seed};
}

std::size_t default_projection_dim(std::size_t n) {
  if (n < 2) throw std::invalid_argument("default_projection_dim: need at least 2 points");
  auto dim = static_cast<std::size_t>(std::floor(100.0 * std::log(static_cast<double>(n))));
  return dim < 8 ? 8 : dim;
}

std::vector<float> project(const ProjectionMatrix& p, std::span<const float> f) {
  if (f.size() != p.cols) throw std::invalid_argument("project: vector length mismatch");
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.rows));
  std::vector<float> out(p.rows);
  std::vector<float> row(p.cols);
  for (std::size_t r = 0; r < p.rows; ++r) {
    p.fill_row(r, row);
    double acc = 0.0;
    for (std::size_t c = 0; c < p.cols; ++c) acc += static_cast<double>(row[c]) * f[c];
    out[r] = static_cast<float>(acc * scale);
  }
  return out;
}

Tensor project_rows(const ProjectionMatrix& p, const Tensor& vecs) {
  if (vecs.rank() != 2) throw std::invalid_argument("project_rows: expected rank-2 input");
  const std::size_t n = vecs.dim(0);
  const std::size_t d = vecs.dim(1);
  if (d != p.cols) throw std::invalid_argument("project_rows: column count mismatch");

  Tensor out({n, p.rows});
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.rows));
  const float* in = vecs.data().data();
  float* dst = out.mutable_data().data();

  // Stream one sign row at a time and apply it to every sample, so the
  // projection matrix never has to exist in full.
  std::vector<float> row(d);
  for (std::size_t r = 0; r < p.rows; ++r) {
    p.fill_row(r, row);
    parallel_for(n, [&](std::size_t i) {
      const float* x = in + i * d;
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += static_cast<double>(row[c]) * x[c];
      dst[i * p.rows + r] = static_cast<float>(acc * scale);
    });
  }
  return out;
}

DistortionReport distortion_check(const ProjectionMatrix& p, const Tensor& vecs,
                                  double epsilon, std::size_t max_pairs) {
  if (vecs.rank() != 2) throw std::invalid_argument("distortion_check: expected rank-2 input");
  if (epsilon <= 0.0) throw std::invalid_argument("distortion_check: epsilon must be positive");
  const std::size_t n = vecs.dim(0);
  if (n < 2) throw std::invalid_argument("distortion_check: need at least 2 rows");

  const std::size_t total_pairs = n * (n - 1) / 2;
  const std::size_t want = max_pairs < total_pairs ? max_pairs : total_pairs;

  SeededRng rng(p.seed, 0x500);
  std::unordered_set<uint64_t> seen;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(want);
  if (want == total_pairs) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
  } else {
    while (pairs.size() < want) {
      auto i = static_cast<std::size_t>(rng.uniform_int(n));
      auto j = static_cast<std::size_t>(rng.uniform_int(n));
      if (i == j) continue;
      if (i > j) std::swap(i, j);
      const uint64_t key = (static_cast<uint64_t>(i) << 32) | static_cast<uint64_t>(j);
      if (!seen.insert(key).second) continue;
      pairs.emplace_back(i, j);
    }
  }

  const Tensor proj = project_rows(p, vecs);
  const float* in = vecs.data().data();
  const float* pr = proj.data().data();
  const std::size_t d = vecs.dim(1);
  const std::size_t k = p.rows;

  DistortionReport rep;
  rep.epsilon = epsilon;
  rep.pairs_checked = pairs.size();
  const double lo = 1.0 - epsilon;
  const double hi = 1.0 + epsilon;
  for (const auto& [i, j] : pairs) {
    double orig = 0.0;
    const float* a = in + i * d;
    const float* b = in + j * d;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = static_cast<double>(a[c]) - static_cast<double>(b[c]);
      orig += diff * diff;
    }
    double got = 0.0;
    const float* pa = pr + i * k;
    const float* pb = pr + j * k;
    for (std::size_t c = 0; c < k; ++c) {
      const double diff = static_cast<double>(pa[c]) - static_cast<double>(pb[c]);
      got += diff * diff;
    }
    if (orig == 0.0) {
      ++rep.pairs_within_bound;
      continue;
    }
    // Bound is on distances, not squared distances.
    const double ratio = std::sqrt(got / orig);
    if (ratio >= lo && ratio <= hi) ++rep.pairs_within_bound;
  }
  return rep;
}

StyleProjector::StyleProjector(uint64_t master_seed, std::size_t target_dim,
                               std::span<const int> layer_ids,
                               std::span<const std::size_t> block_dims)
    : master_seed_(master_seed),
      target_dim_(target_dim),
      layer_ids_(layer_ids.begin(), layer_ids.end()),
      block_dims_(block_dims.begin(), block_dims.end()) {
  if (target_dim_ == 0) throw std::invalid_argument("StyleProjector: target_dim must be positive");
  if (layer_ids_.empty()) throw std::invalid_argument("StyleProjector: need at least one layer");
  if (layer_ids_.size() != block_dims_.size())
    throw std::invalid_argument("StyleProjector: layer_ids/block_dims length mismatch");
  mats_.reserve(layer_ids_.size());
  for (std::size_t l = 0; l < layer_ids_.size(); ++l) {
    const uint64_t seed =
        derive_seed(master_seed_, kLayerSeedSalt + static_cast<uint64_t>(layer_ids_[l]));
    mats_.push_back(make_projection(target_dim_, block_dims_[l], seed));
  }
}

std::vector<float> StyleProjector::project_style(const StyleVector& sv) const {
  if (sv.blocks.size() != mats_.size())
    throw std::invalid_argument("project_style: block count mismatch");
  std::vector<float> out;
  out.reserve(output_dim());
  for (std::size_t l = 0; l < mats_.size(); ++l) {
    if (sv.blocks[l].layer_id != layer_ids_[l])
      throw std::invalid_argument("project_style: layer id mismatch");
    if (sv.blocks[l].values.size() != block_dims_[l])
      throw std::invalid_argument("project_style: block dimension mismatch");
    const auto proj = project(mats_[l], sv.blocks[l].values);
    out.insert(out.end(), proj.begin(), proj.end());
  }
  return out;
}

Tensor StyleProjector::project_stack(const Tensor& stack) const {
  if (stack.rank() != 2) throw std::invalid_argument("project_stack: expected rank-2 input");
  std::size_t total = 0;
  for (const auto d : block_dims_) total += d;
  if (stack.dim(1) != total)
    throw std::invalid_argument("project_stack: column count mismatch");

  const std::size_t n = stack.dim(0);
  Tensor out({n, output_dim()});
  float* dst = out.mutable_data().data();
  const float* src = stack.data().data();
  const std::size_t out_stride = output_dim();

  std::size_t col_off = 0;
  for (std::size_t l = 0; l < mats_.size(); ++l) {
    const auto& p = mats_[l];
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.rows));
    std::vector<float> row(p.cols);
    for (std::size_t r = 0; r < p.rows; ++r) {
      p.fill_row(r, row);
      parallel_for(n, [&](std::size_t i) {
        const float* x = src + i * total + col_off;
        double acc = 0.0;
        for (std::size_t c = 0; c < p.cols; ++c)
          acc += static_cast<double>(row[c]) * x[c];
        dst[i * out_stride + l * target_dim_ + r] = static_cast<float>(acc * scale);
      });
    }
    col_off += block_dims_[l];
  }
  return out;
}

void StyleProjector::save(const std::filesystem::path& json_path) const {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["master_seed"] = master_seed_;
  j["target_dim"] = target_dim_;
  j["layer_ids"] = layer_ids_;
  j["block_dims"] = block_dims_;
  std::ofstream out(json_path, std::ios::trunc);
  if (!out) throw IoError(IoErrorKind::OpenFailed, json_path.string(), "cannot open for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError(IoErrorKind::WriteFailed, json_path.string(), "write failed");
}

StyleProjector StyleProjector::load(const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw IoError(IoErrorKind::OpenFailed, json_path.string(), "cannot open for reading");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoErrorKind::BadMagic, json_path.string(), e.what());
  }
  try {
    const auto layer_ids = j.at("layer_ids").get<std::vector<int>>();
    const auto block_dims = j.at("block_dims").get<std::vector<std::size_t>>();
    return StyleProjector(j.at("master_seed").get<uint64_t>(),
                          j.at("target_dim").get<std::size_t>(), layer_ids, block_dims);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoErrorKind::TruncatedPayload, json_path.string(), e.what());
  }
}

}  // namespace gramclust
