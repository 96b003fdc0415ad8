#include "gramclust/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "gramclust/errors.hpp"
#include "gramclust/parallel.hpp"
#include "gramclust/rng.hpp"

namespace gramclust {

namespace {

constexpr uint64_t kKMeansStream = 0x200;

double sq_dist(const float* a, const float* b, std::size_t d) {
  double acc = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    const double diff = static_cast<double>(a[c]) - static_cast<double>(b[c]);
    acc += diff * diff;
  }
  return acc;
}

std::size_t count_distinct_rows(const Tensor& points, std::size_t limit) {
  const std::size_t n = points.dim(0);
  const std::size_t d = points.dim(1);
  const float* data = points.data().data();
  std::unordered_set<uint64_t> hashes;
  std::vector<std::size_t> candidates;  // rows whose hash was first seen
  std::size_t distinct = 0;
  for (std::size_t i = 0; i < n && distinct < limit; ++i) {
    uint64_t h = 0xcbf29ce484222325ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(data + i * d);
    for (std::size_t b = 0; b < d * sizeof(float); ++b) {
      h ^= bytes[b];
      h *= 0x100000001b3ULL;
    }
    if (!hashes.insert(h).second) {
      // Hash collision or true duplicate: compare against known candidates.
      bool dup = false;
      for (const auto j : candidates) {
        if (std::memcmp(data + i * d, data + j * d, d * sizeof(float)) == 0) {
          dup = true;
          break;
        }
      }
      if (dup) continue;
    }
    candidates.push_back(i);
    ++distinct;
  }
  return distinct;
}

// Seeded k-means++: first centroid uniform, each next centroid drawn with
// probability proportional to squared distance to the nearest chosen one.
Tensor plus_plus_init(const Tensor& points, std::size_t k, SeededRng& rng) {
  const std::size_t n = points.dim(0);
  const std::size_t d = points.dim(1);
  const float* data = points.data().data();

  Tensor centroids({k, d});
  float* cent = centroids.mutable_data().data();

  const auto first = static_cast<std::size_t>(rng.uniform_int(n));
  std::memcpy(cent, data + first * d, d * sizeof(float));

  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(data + i * d, cent, d);

  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += d2[i];
    std::size_t pick;
    if (total <= 0.0) {
      pick = static_cast<std::size_t>(rng.uniform_int(n));
    } else {
      const double target = rng.next_double() * total;
      double run = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        run += d2[i];
        if (run >= target) {
          pick = i;
          break;
        }
      }
    }
    std::memcpy(cent + c * d, data + pick * d, d * sizeof(float));
    for (std::size_t i = 0; i < n; ++i) {
      const double nd = sq_dist(data + i * d, cent + c * d, d);
      if (nd < d2[i]) d2[i] = nd;
    }
  }
  return centroids;
}

}  // namespace

double inertia_of(const Tensor& points, const Tensor& centroids,
                  const std::vector<int>& assignments) {
  const std::size_t n = points.dim(0);
  const std::size_t d = points.dim(1);
  const float* data = points.data().data();
  const float* cent = centroids.data().data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    total += sq_dist(data + i * d, cent + static_cast<std::size_t>(assignments[i]) * d, d);
  return total;
}

double pairwise_objective(const Tensor& points, const std::vector<int>& assignments,
                          std::size_t k) {
  if (points.rank() != 2) throw std::invalid_argument("pairwise_objective: expected rank-2 points");
  const std::size_t n = points.dim(0);
  if (assignments.size() != n)
    throw std::invalid_argument("pairwise_objective: assignment length mismatch");
  const std::size_t d = points.dim(1);
  const float* data = points.data().data();

  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < n; ++i) {
    const int a = assignments[i];
    if (a < 0 || static_cast<std::size_t>(a) >= k)
      throw std::invalid_argument("pairwise_objective: assignment out of range");
    members[static_cast<std::size_t>(a)].push_back(i);
  }

  double total = 0.0;
  for (std::size_t e = 0; e < k; ++e) {
    const auto& m = members[e];
    if (m.empty()) continue;
    double cluster_sum = 0.0;
    for (std::size_t a = 0; a < m.size(); ++a)
      for (std::size_t b = 0; b < m.size(); ++b)
        cluster_sum += sq_dist(data + m[a] * d, data + m[b] * d, d);
    total += cluster_sum / static_cast<double>(m.size());
  }
  return total;
}

KMeansResult kmeans(const Tensor& points, const KMeansConfig& cfg) {
  if (points.rank() != 2) throw std::invalid_argument("kmeans: expected rank-2 points");
  const std::size_t n = points.dim(0);
  const std::size_t d = points.dim(1);
  if (cfg.k == 0) throw std::invalid_argument("kmeans: k must be positive");
  if (n < cfg.k) throw std::invalid_argument("kmeans: fewer points than clusters");
  if (cfg.max_iter == 0) throw std::invalid_argument("kmeans: max_iter must be positive");
  if (count_distinct_rows(points, cfg.k) < cfg.k)
    throw std::invalid_argument("kmeans: fewer distinct points than clusters");

  const float* data = points.data().data();
  SeededRng rng(cfg.seed, kKMeansStream);

  KMeansResult res;
  res.centroids = plus_plus_init(points, cfg.k, rng);
  res.assignments.assign(n, 0);
  res.counts.assign(cfg.k, 0);

  std::vector<double> sums(cfg.k * d);
  std::vector<double> point_d2(n);
  double prev_inertia = std::numeric_limits<double>::infinity();

  for (std::size_t iter = 0; iter < cfg.max_iter; ++iter) {
    // Assignment step: each index writes only its own slot, so the result is
    // independent of the thread count.
    float* cent = res.centroids.mutable_data().data();
    int* assign = res.assignments.data();
    parallel_for(n, [&](std::size_t i) {
      const float* x = data + i * d;
      double best = std::numeric_limits<double>::infinity();
      int best_c = 0;
      for (std::size_t c = 0; c < cfg.k; ++c) {
        const double dist = sq_dist(x, cent + c * d, d);
        if (dist < best) {
          best = dist;
          best_c = static_cast<int>(c);
        }
      }
      assign[i] = best_c;
      point_d2[i] = best;
    });

    // Repair empty clusters by seizing the globally farthest point, in
    // cluster-index order; seized points cannot be seized again.
    std::fill(res.counts.begin(), res.counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i)
      ++res.counts[static_cast<std::size_t>(assign[i])];
    std::vector<bool> seized(n, false);
    for (std::size_t c = 0; c < cfg.k; ++c) {
      if (res.counts[c] != 0) continue;
      std::size_t far_i = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (seized[i]) continue;
        if (res.counts[static_cast<std::size_t>(assign[i])] <= 1) continue;
        if (point_d2[i] > far_d) {
          far_d = point_d2[i];
          far_i = i;
        }
      }
      if (far_i == n) throw std::runtime_error("kmeans: cannot repair empty cluster");
      --res.counts[static_cast<std::size_t>(assign[far_i])];
      assign[far_i] = static_cast<int>(c);
      res.counts[c] = 1;
      seized[far_i] = true;
      std::memcpy(cent + c * d, data + far_i * d, d * sizeof(float));
      point_d2[far_i] = 0.0;
    }

    // Update step: accumulate in double, sequential fixed order.
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(assign[i]);
      const float* x = data + i * d;
      double* s = sums.data() + c * d;
      for (std::size_t col = 0; col < d; ++col) s[col] += static_cast<double>(x[col]);
    }
    for (std::size_t c = 0; c < cfg.k; ++c) {
      const double inv = 1.0 / static_cast<double>(res.counts[c]);
      for (std::size_t col = 0; col < d; ++col)
        cent[c * d + col] = static_cast<float>(sums[c * d + col] * inv);
    }

    const double inertia = inertia_of(points, res.centroids, res.assignments);
    res.inertia_history.push_back(inertia);
    res.iterations = iter + 1;
    res.inertia = inertia;

    if (std::isfinite(prev_inertia)) {
      const double denom = prev_inertia > 0.0 ? prev_inertia : 1.0;
      if ((prev_inertia - inertia) / denom < cfg.tol) {
        res.converged = true;
        break;
      }
    }
    prev_inertia = inertia;
  }

  return res;
}

std::vector<int> assign_to_centroids(const Tensor& centroids, const Tensor& vecs) {
  if (centroids.rank() != 2 || vecs.rank() != 2)
    throw std::invalid_argument("assign_to_centroids: expected rank-2 tensors");
  if (centroids.dim(1) != vecs.dim(1))
    throw std::invalid_argument("assign_to_centroids: dimension mismatch");
  const std::size_t n = vecs.dim(0);
  const std::size_t k = centroids.dim(0);
  const std::size_t d = vecs.dim(1);
  const float* data = vecs.data().data();
  const float* cent = centroids.data().data();

  std::vector<int> out(n);
  parallel_for(n, [&](std::size_t i) {
    const float* x = data + i * d;
    double best = std::numeric_limits<double>::infinity();
    int best_c = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double dist = sq_dist(x, cent + c * d, d);
      if (dist < best) {
        best = dist;
        best_c = static_cast<int>(c);
      }
    }
    out[i] = best_c;
  });
  return out;
}

void clustering_save(const KMeansResult& res, const std::filesystem::path& json_path) {
  auto grtn_path = json_path;
  grtn_path.replace_extension(".grtn");
  tensor_save(res.centroids, grtn_path);

  nlohmann::json j;
  j["schema_version"] = 1;
  j["k"] = res.centroids.dim(0);
  j["centroids_file"] = grtn_path.filename().string();
  j["assignments"] = res.assignments;
  j["counts"] = res.counts;
  j["inertia"] = res.inertia;
  j["inertia_history"] = res.inertia_history;
  j["iterations"] = res.iterations;
  j["converged"] = res.converged;
  std::ofstream out(json_path, std::ios::trunc);
  if (!out) throw IoError(IoErrorKind::OpenFailed, json_path.string(), "cannot open for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError(IoErrorKind::WriteFailed, json_path.string(), "write failed");
}

KMeansResult clustering_load(const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw IoError(IoErrorKind::OpenFailed, json_path.string(), "cannot open for reading");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoErrorKind::BadMagic, json_path.string(), e.what());
  }
  KMeansResult res;
  try {
    const auto centroids_file = j.at("centroids_file").get<std::string>();
    res.centroids = tensor_load(json_path.parent_path() / centroids_file);
    res.assignments = j.at("assignments").get<std::vector<int>>();
    res.counts = j.at("counts").get<std::vector<std::size_t>>();
    res.inertia = j.at("inertia").get<double>();
    res.inertia_history = j.at("inertia_history").get<std::vector<double>>();
    res.iterations = j.at("iterations").get<std::size_t>();
    res.converged = j.at("converged").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoErrorKind::TruncatedPayload, json_path.string(), e.what());
  }
  return res;
}

}  // namespace gramclust
