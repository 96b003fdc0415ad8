#include "gramclust/stylefeat.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "gramclust/errors.hpp"

namespace gramclust {

namespace {

void validate_feature_map(const FeatureMap& fm) {
  if (fm.values.rank() != 2)
    throw std::invalid_argument("FeatureMap values must have shape [M, C]");
  if (fm.values.dim(0) < 1 || fm.values.dim(1) < 1)
    throw std::invalid_argument("FeatureMap needs M >= 1 and C >= 1");
}

void check_distinct_layers(std::span<const FeatureMap> fms) {
  if (fms.empty())
    throw std::invalid_argument("at least one feature map required");
  std::set<int> seen;
  for (const auto& fm : fms) {
    if (!seen.insert(fm.layer_id).second)
      throw std::invalid_argument("duplicate layer_id " + std::to_string(fm.layer_id));
  }
}

/// Normalize in place to unit L2 norm; returns false (and leaves zeros) for
/// an all-zero block.
bool normalize_block(std::vector<float>& v) {
  double ss = 0.0;
  for (float x : v) ss += double(x) * double(x);
  if (ss == 0.0) return false;
  const double inv = 1.0 / std::sqrt(ss);
  for (float& x : v) x = static_cast<float>(x * inv);
  return true;
}

}  // namespace

std::size_t StyleVector::dim() const {
  std::size_t d = 0;
  for (const auto& b : blocks) d += b.values.size();
  return d;
}

std::vector<float> StyleVector::concat() const {
  std::vector<float> out;
  out.reserve(dim());
  for (const auto& b : blocks) out.insert(out.end(), b.values.begin(), b.values.end());
  return out;
}

Tensor gram(const FeatureMap& fm) {
  validate_feature_map(fm);
  const std::size_t M = fm.positions();
  const std::size_t C = fm.channels();
  const auto phi = fm.values.data();

  // Upper triangle accumulated in double, then mirrored so symmetry is exact.
  std::vector<double> acc(C * C, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    const float* row = phi.data() + m * C;
    for (std::size_t a = 0; a < C; ++a) {
      const double ra = row[a];
      double* out = acc.data() + a * C;
      for (std::size_t b = a; b < C; ++b) out[b] += ra * double(row[b]);
    }
  }
  const double inv_m = 1.0 / double(M);
  Tensor g({C, C});
  auto gd = g.mutable_data();
  for (std::size_t a = 0; a < C; ++a) {
    for (std::size_t b = a; b < C; ++b) {
      const float v = static_cast<float>(acc[a * C + b] * inv_m);
      gd[a * C + b] = v;
      gd[b * C + a] = v;
    }
  }
  return g;
}

StyleVector style_vector(std::span<const FeatureMap> fms) {
  check_distinct_layers(fms);
  StyleVector sv;
  sv.blocks.reserve(fms.size());
  for (const auto& fm : fms) {
    Tensor g = gram(fm);
    StyleVector::Block block;
    block.layer_id = fm.layer_id;
    block.values.assign(g.data().begin(), g.data().end());
    if (!normalize_block(block.values)) ++sv.zero_block_count;
    sv.blocks.push_back(std::move(block));
  }
  return sv;
}

StyleVector meanvar_vector(std::span<const FeatureMap> fms) {
  check_distinct_layers(fms);
  StyleVector sv;
  sv.blocks.reserve(fms.size());
  for (const auto& fm : fms) {
    validate_feature_map(fm);
    const std::size_t M = fm.positions();
    const std::size_t C = fm.channels();
    const auto phi = fm.values.data();

    std::vector<double> mean(C, 0.0), sqsum(C, 0.0);
    for (std::size_t m = 0; m < M; ++m) {
      const float* row = phi.data() + m * C;
      for (std::size_t c = 0; c < C; ++c) {
        mean[c] += row[c];
        sqsum[c] += double(row[c]) * double(row[c]);
      }
    }
    StyleVector::Block block;
    block.layer_id = fm.layer_id;
    block.values.resize(2 * C);
    for (std::size_t c = 0; c < C; ++c) {
      const double mu = mean[c] / double(M);
      block.values[c] = static_cast<float>(mu);
      // Population variance; exactly zero when M == 1.
      const double var = M < 2 ? 0.0 : std::max(0.0, sqsum[c] / double(M) - mu * mu);
      block.values[C + c] = static_cast<float>(var);
    }
    if (!normalize_block(block.values)) ++sv.zero_block_count;
    sv.blocks.push_back(std::move(block));
  }
  return sv;
}

StyleVector penultimate_vector(const FeatureMap& fm) {
  validate_feature_map(fm);
  const std::size_t M = fm.positions();
  const std::size_t C = fm.channels();
  const auto phi = fm.values.data();

  StyleVector sv;
  StyleVector::Block block;
  block.layer_id = fm.layer_id;
  block.values.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t m = 0; m < M; ++m) s += phi[m * C + c];
    block.values[c] = static_cast<float>(s / double(M));
  }
  if (!normalize_block(block.values)) ++sv.zero_block_count;
  sv.blocks.push_back(std::move(block));
  return sv;
}

void style_sidecar_save(const StyleSidecar& sc, const std::filesystem::path& json_path) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["style"] = sc.style;
  j["layer_ids"] = sc.layer_ids;
  j["block_offsets"] = sc.block_offsets;
  j["block_dims"] = sc.block_dims;
  std::ofstream out(json_path);
  if (!out)
    throw IoError(IoErrorKind::OpenFailed, json_path.string(), "cannot open for writing");
  out << j.dump(2) << "\n";
}

StyleSidecar style_sidecar_load(const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in)
    throw IoError(IoErrorKind::OpenFailed, json_path.string(), "cannot open for reading");
  nlohmann::json j;
  in >> j;
  StyleSidecar sc;
  sc.style = j.at("style").get<std::string>();
  sc.layer_ids = j.at("layer_ids").get<std::vector<int>>();
  sc.block_offsets = j.at("block_offsets").get<std::vector<std::size_t>>();
  sc.block_dims = j.at("block_dims").get<std::vector<std::size_t>>();
  return sc;
}

void style_vector_save(const StyleVector& sv, const std::string& style,
                       const std::filesystem::path& path) {
  std::vector<float> flat = sv.concat();
  tensor_save(Tensor({flat.size()}, std::move(flat)), path);

  StyleSidecar sc;
  sc.style = style;
  std::size_t offset = 0;
  for (const auto& b : sv.blocks) {
    sc.layer_ids.push_back(b.layer_id);
    sc.block_offsets.push_back(offset);
    sc.block_dims.push_back(b.values.size());
    offset += b.values.size();
  }
  style_sidecar_save(sc, path.string() + ".json");
}

}  // namespace gramclust
