#include "csvd/cluster_index.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "binary.hpp"
#include "csvd/error.hpp"
#include "csvd/parallel.hpp"
#include "geometry.hpp"

namespace csvd {

namespace {

constexpr std::uint32_t kIndexVersion = 1;
constexpr std::size_t kAssignBlock = 256;

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double t = a[j] - b[j];
    s += t * t;
  }
  return s;
}

// Greedy k-means++: each step draws 2 + ln(k) D^2-weighted candidates and
// keeps the one that lowers the potential most. Plain k-means++ often drops
// a mode on well-separated data; the greedy variant almost never does.
std::vector<double> kmeanspp_seed(std::span<const double> points, std::size_t dim, std::size_t k,
                                  std::mt19937_64& rng) {
  const std::size_t n = points.size() / dim;
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  std::vector<double> centers;
  centers.reserve(k * dim);
  std::vector<bool> chosen(n, false);
  auto take = [&](std::size_t i) {
    chosen[i] = true;
    centers.insert(centers.end(), points.begin() + i * dim, points.begin() + (i + 1) * dim);
  };
  auto row = [&](std::size_t i) { return points.subspan(i * dim, dim); };

  take(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
  std::vector<double> d2(n);
  const auto first = std::span<const double>(centers).first(dim);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(row(i), first);

  auto draw = [&]() {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    if (!(total > 0.0)) {
      // Fewer distinct points than k: duplicates become centers.
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) return i;
      return std::size_t{0};
    }
    const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += d2[i];
      if (acc > u && d2[i] > 0.0) return i;
    }
    for (std::size_t i = n; i-- > 0;)  // u landed on the rounding tail
      if (d2[i] > 0.0) return i;
    return std::size_t{0};
  };

  std::vector<std::vector<double>> cand_d2(trials, std::vector<double>(n));
  std::vector<double> cand_pot(trials);
  std::vector<std::size_t> cand(trials);
  for (std::size_t c = 1; c < k; ++c) {
    for (auto& t : cand) t = draw();
    parallel_for(trials, [&](std::size_t t) {
      const auto center = row(cand[t]);
      double pot = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        cand_d2[t][i] = std::min(d2[i], squared_distance(row(i), center));
        pot += cand_d2[t][i];
      }
      cand_pot[t] = pot;
    });
    std::size_t best = 0;
    for (std::size_t t = 1; t < trials; ++t)
      if (cand_pot[t] < cand_pot[best]) best = t;
    take(cand[best]);
    d2.swap(cand_d2[best]);
  }
  return centers;
}

void normalize(std::span<double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  if (s == 0.0) return;
  const double inv = 1.0 / std::sqrt(s);
  for (double& x : v) x *= inv;
}

std::vector<double> index_space_row(const EmbeddingTable& table, ClusteringMode mode, TokenId i) {
  const auto row = table.row(i);
  std::vector<double> out(row.begin(), row.end());
  if (mode == ClusteringMode::kBiasAugmented) out.push_back(table.bias[i]);
  return out;
}

struct ClusterStats {
  double centroid_norm;
  double radius;
  double angular;
  double norm_max;
  double norm_min;
  std::vector<BiasEntry> topm;
};

// Every derived statistic, computed the same way at build and at validation.
ClusterStats compute_stats(const EmbeddingTable& table, ClusteringMode mode,
                           std::span<const double> centroid, std::span<const TokenId> members,
                           std::size_t depth) {
  ClusterStats s{};
  s.centroid_norm = std::sqrt(detail::dot(centroid, centroid));
  s.norm_min = std::numeric_limits<double>::infinity();
  const auto direction = centroid.first(table.hidden_dim);
  const bool has_direction = s.centroid_norm > 0.0 &&
                             std::any_of(direction.begin(), direction.end(),
                                         [](double x) { return x != 0.0; });
  for (TokenId id : members) {
    const auto p = index_space_row(table, mode, id);
    s.radius = std::max(s.radius, std::sqrt(squared_distance(p, centroid)));
    const auto row = table.row(id);
    double n2 = 0.0;
    for (float w : row) n2 += static_cast<double>(w) * w;
    const double norm = std::sqrt(n2);
    s.norm_max = std::max(s.norm_max, norm);
    s.norm_min = std::min(s.norm_min, norm);
    if (norm > 0.0 && has_direction)
      s.angular = std::max(s.angular, detail::angle_between(row, direction));
  }
  if (!has_direction) s.angular = M_PI;

  std::vector<BiasEntry> biases;
  biases.reserve(members.size());
  for (TokenId id : members) biases.push_back({static_cast<double>(table.bias[id]), id});
  const std::size_t keep = std::min<std::size_t>(depth, biases.size());
  std::partial_sort(biases.begin(), biases.begin() + keep, biases.end(),
                    [](const BiasEntry& a, const BiasEntry& b) {
                      return a.value != b.value ? a.value > b.value : a.token < b.token;
                    });
  biases.resize(keep);
  s.topm = std::move(biases);
  return s;
}

double max_member_bias(const EmbeddingTable& table, std::span<const TokenId> members) {
  double m = -std::numeric_limits<double>::infinity();
  for (TokenId id : members) m = std::max(m, static_cast<double>(table.bias[id]));
  return m;
}

}  // namespace

const char* to_string(ClusteringMode mode) {
  switch (mode) {
    case ClusteringMode::kEuclidean: return "euclidean";
    case ClusteringMode::kSpherical: return "spherical";
    case ClusteringMode::kBiasAugmented: return "bias_augmented";
  }
  return "unknown";
}

ClusteringMode parse_clustering_mode(const std::string& s) {
  if (s == "euclidean") return ClusteringMode::kEuclidean;
  if (s == "spherical") return ClusteringMode::kSpherical;
  if (s == "bias_augmented") return ClusteringMode::kBiasAugmented;
  throw Error(ErrorCode::kInvalidArgument, "unknown clustering mode '" + s + "'");
}

const char* to_string(ViolationKind kind) {
  switch (kind) {
    case ViolationKind::kRadius: return "radius";
    case ViolationKind::kCentroidNorm: return "centroid_norm";
    case ViolationKind::kAngularRadius: return "angular_radius";
    case ViolationKind::kRowNorm: return "row_norm";
    case ViolationKind::kMaxBias: return "max_bias";
    case ViolationKind::kBiasTable: return "bias_table";
    case ViolationKind::kPartition: return "partition";
    case ViolationKind::kPermutation: return "permutation";
  }
  return "unknown";
}

std::size_t ClusterIndex::cluster_of(TokenId token) const {
  const std::uint64_t pos = inverse.at(token);
  auto it = std::upper_bound(clusters.begin(), clusters.end(), pos,
                             [](std::uint64_t p, const ClusterMeta& c) { return p < c.end; });
  return static_cast<std::size_t>(it - clusters.begin());
}

void ClusterIndex::rebuild_inverse() {
  inverse.assign(vocab_size, std::numeric_limits<std::uint64_t>::max());
  for (std::uint64_t pos = 0; pos < permutation.size(); ++pos)
    if (permutation[pos] < vocab_size) inverse[permutation[pos]] = pos;
}

std::uint64_t default_cluster_count(std::uint64_t vocab_size) {
  if (vocab_size >= 120000 && vocab_size <= 136000) return 2000;
  const auto c = static_cast<std::uint64_t>(std::llround(0.015 * static_cast<double>(vocab_size)));
  return std::clamp<std::uint64_t>(c, 1, vocab_size);
}

std::vector<std::uint32_t> kmeans_assign(std::span<const double> points, std::size_t dim,
                                         std::size_t k, std::uint32_t iters, bool spherical,
                                         std::uint64_t seed) {
  const std::size_t n = dim == 0 ? 0 : points.size() / dim;
  if (k < 1 || k > n) throw Error(ErrorCode::kInvalidArgument, "cluster count must be in [1, n]");
  if (iters < 1) throw Error(ErrorCode::kInvalidArgument, "iters must be >= 1");

  std::mt19937_64 rng(seed);
  std::vector<double> centers = kmeanspp_seed(points, dim, k, rng);
  if (spherical)
    for (std::size_t c = 0; c < k; ++c) normalize(std::span(centers).subspan(c * dim, dim));

  std::vector<std::uint32_t> assign(n, std::numeric_limits<std::uint32_t>::max());
  std::vector<double> dist(n, 0.0);
  const std::size_t blocks = (n + kAssignBlock - 1) / kAssignBlock;

  for (std::uint32_t it = 0; it < iters; ++it) {
    std::vector<std::uint8_t> block_changed(blocks, 0);
    parallel_for(blocks, [&](std::size_t b) {
      const std::size_t hi = std::min(n, (b + 1) * kAssignBlock);
      for (std::size_t i = b * kAssignBlock; i < hi; ++i) {
        const auto p = points.subspan(i * dim, dim);
        std::uint32_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
          const double d = squared_distance(p, std::span<const double>(centers).subspan(c * dim, dim));
          if (d < best_d) {
            best_d = d;
            best = static_cast<std::uint32_t>(c);
          }
        }
        if (assign[i] != best) block_changed[b] = 1;
        assign[i] = best;
        dist[i] = best_d;
      }
    });
    bool changed = std::any_of(block_changed.begin(), block_changed.end(),
                               [](std::uint8_t f) { return f != 0; });

    std::vector<std::size_t> counts(k, 0);
    for (auto a : assign) ++counts[a];
    // Empty clusters take the point farthest from its own center, drawn
    // from a cluster that can spare one.
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i)
        if (counts[assign[i]] > 1 && (far == n || dist[i] > dist[far])) far = i;
      --counts[assign[far]];
      assign[far] = static_cast<std::uint32_t>(c);
      dist[far] = 0.0;
      counts[c] = 1;
      changed = true;
    }

    std::fill(centers.begin(), centers.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto dst = std::span(centers).subspan(assign[i] * dim, dim);
      const auto p = points.subspan(i * dim, dim);
      for (std::size_t j = 0; j < dim; ++j) dst[j] += p[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      auto dst = std::span(centers).subspan(c * dim, dim);
      for (double& x : dst) x /= static_cast<double>(counts[c]);
      if (spherical) normalize(dst);
    }
    if (!changed) break;
  }
  return assign;
}

ClusterIndex build_index(const EmbeddingTable& table, const BuildParams& params) {
  table.validate();
  const std::uint64_t V = table.vocab_size;
  const std::uint64_t k = params.num_clusters == 0 ? default_cluster_count(V) : params.num_clusters;
  if (k < 1 || k > V)
    throw Error(ErrorCode::kInvalidArgument,
                "cluster count " + std::to_string(k) + " outside [1, " + std::to_string(V) + "]");
  if (params.iters < 1) throw Error(ErrorCode::kInvalidArgument, "iters must be >= 1");

  ClusterIndex index;
  index.mode = params.mode;
  index.vocab_size = V;
  index.hidden_dim = table.hidden_dim;
  index.bias_depth = params.bias_depth;
  index.source_fingerprint = table.fingerprint();
  const std::size_t dim = index.centroid_dim();

  std::vector<double> points;
  points.reserve(V * dim);
  for (TokenId i = 0; i < V; ++i) {
    auto p = index_space_row(table, params.mode, i);
    if (params.mode == ClusteringMode::kSpherical) normalize(p);
    points.insert(points.end(), p.begin(), p.end());
  }
  const auto assign = kmeans_assign(points, dim, k, params.iters,
                                    params.mode == ClusteringMode::kSpherical, params.seed);

  std::vector<std::vector<TokenId>> groups(k);
  for (TokenId i = 0; i < V; ++i) groups[assign[i]].push_back(i);  // ascending ids
  std::sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) {
    return a.size() != b.size() ? a.size() > b.size() : a.front() < b.front();
  });

  std::uint64_t pos = 0;
  for (const auto& members : groups) {
    ClusterMeta meta;
    meta.centroid.assign(dim, 0.0);
    for (TokenId id : members) {
      const auto p = index_space_row(table, params.mode, id);
      for (std::size_t j = 0; j < dim; ++j) meta.centroid[j] += p[j];
    }
    for (double& x : meta.centroid) x /= static_cast<double>(members.size());

    auto stats = compute_stats(table, params.mode, meta.centroid, members, params.bias_depth);
    meta.centroid_norm = stats.centroid_norm;
    meta.radius = stats.radius;
    meta.angular_radius = stats.angular;
    meta.row_norm_max = stats.norm_max;
    meta.row_norm_min = stats.norm_min;
    meta.max_bias = max_member_bias(table, members);
    meta.bias_topm = std::move(stats.topm);
    meta.begin = pos;
    meta.end = pos + members.size();
    pos = meta.end;
    index.permutation.insert(index.permutation.end(), members.begin(), members.end());
    index.clusters.push_back(std::move(meta));
  }
  index.rebuild_inverse();
  return index;
}

double member_distance(const ClusterIndex& index, const EmbeddingTable& table, std::size_t c,
                       TokenId token) {
  const auto p = index_space_row(table, index.mode, token);
  return std::sqrt(squared_distance(p, index.clusters.at(c).centroid));
}

IndexValidation validate_index(const ClusterIndex& index, const EmbeddingTable& table) {
  if (index.source_fingerprint != table.fingerprint())
    throw Error(ErrorCode::kFingerprintMismatch,
                "index built from " + to_hex(index.source_fingerprint) + ", table is " +
                    to_hex(table.fingerprint()));
  IndexValidation report;
  auto flag = [&](ViolationKind kind, std::size_t c, std::string detail) {
    report.violations.push_back({kind, c, std::move(detail)});
  };
  const std::uint64_t V = table.vocab_size;

  if (index.vocab_size != V || index.hidden_dim != table.hidden_dim ||
      index.permutation.size() != V) {
    flag(ViolationKind::kPermutation, 0, "index shape does not match table");
    return report;
  }
  std::vector<std::uint8_t> seen(V, 0);
  bool bijective = true;
  for (TokenId t : index.permutation) {
    if (t >= V || seen[t]) {
      bijective = false;
      break;
    }
    seen[t] = 1;
  }
  if (!bijective) {
    flag(ViolationKind::kPermutation, 0, "permutation is not a bijection on [0, V)");
    return report;
  }

  std::uint64_t expect_begin = 0;
  for (std::size_t c = 0; c < index.clusters.size(); ++c) {
    const auto& m = index.clusters[c];
    if (m.begin != expect_begin || m.end <= m.begin || m.end > V) {
      flag(ViolationKind::kPartition, c,
           "range [" + std::to_string(m.begin) + ", " + std::to_string(m.end) +
               ") breaks the contiguous partition");
      return report;
    }
    expect_begin = m.end;
  }
  if (expect_begin != V) {
    flag(ViolationKind::kPartition, index.clusters.size(), "ranges do not cover [0, V)");
    return report;
  }

  const std::size_t dim = index.centroid_dim();
  for (std::size_t c = 0; c < index.clusters.size(); ++c) {
    const auto& m = index.clusters[c];
    const auto members = index.members(c);
    if (!std::is_sorted(members.begin(), members.end()) ||
        std::adjacent_find(members.begin(), members.end()) != members.end())
      flag(ViolationKind::kPartition, c, "members not in ascending token order");
    if (m.centroid.size() != dim) {
      flag(ViolationKind::kRadius, c, "centroid has wrong dimension");
      continue;
    }
    const auto s = compute_stats(table, index.mode, m.centroid, members, index.bias_depth);
    if (s.radius != m.radius)
      flag(ViolationKind::kRadius, c,
           "stored " + std::to_string(m.radius) + ", recomputed " + std::to_string(s.radius));
    if (s.centroid_norm != m.centroid_norm)
      flag(ViolationKind::kCentroidNorm, c, "stored norm differs from recomputation");
    if (s.angular != m.angular_radius)
      flag(ViolationKind::kAngularRadius, c,
           "stored " + std::to_string(m.angular_radius) + ", recomputed " +
               std::to_string(s.angular));
    if (s.norm_max != m.row_norm_max || s.norm_min != m.row_norm_min)
      flag(ViolationKind::kRowNorm, c, "row norm extremes differ from recomputation");
    if (max_member_bias(table, members) != m.max_bias)
      flag(ViolationKind::kMaxBias, c, "stored max bias differs from recomputation");
    bool table_ok = s.topm.size() == m.bias_topm.size();
    for (std::size_t r = 0; table_ok && r < s.topm.size(); ++r)
      table_ok = s.topm[r].value == m.bias_topm[r].value && s.topm[r].token == m.bias_topm[r].token;
    if (!table_ok || m.bias_topm.empty() || m.bias_topm.front().value != m.max_bias)
      flag(ViolationKind::kBiasTable, c, "top-m bias table differs from recomputation");
  }
  return report;
}

std::vector<std::uint8_t> serialize_index(const ClusterIndex& index) {
  detail::ByteWriter w;
  w.magic("CSVI");
  w.put<std::uint32_t>(kIndexVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(index.mode));
  w.put<std::uint64_t>(index.clusters.size());
  w.put<std::uint64_t>(index.vocab_size);
  w.put<std::uint64_t>(index.hidden_dim);
  w.put<std::uint16_t>(index.bias_depth);
  w.put_all<std::uint8_t>(index.source_fingerprint);
  for (const auto& m : index.clusters) {
    w.put_all<double>(m.centroid);
    w.put<double>(m.centroid_norm);
    w.put<double>(m.radius);
    w.put<double>(m.angular_radius);
    w.put<double>(m.max_bias);
    for (std::size_t r = 0; r < index.bias_depth; ++r) {
      if (r < m.bias_topm.size()) {
        w.put<double>(m.bias_topm[r].value);
        w.put<std::uint64_t>(m.bias_topm[r].token);
      } else {  // padding for clusters smaller than m
        w.put<double>(-std::numeric_limits<double>::infinity());
        w.put<std::uint64_t>(std::numeric_limits<std::uint64_t>::max());
      }
    }
    w.put<std::uint64_t>(m.begin);
    w.put<std::uint64_t>(m.end);
    w.put<double>(m.row_norm_max);
    w.put<double>(m.row_norm_min);
  }
  w.put_all<std::uint64_t>(index.permutation);
  return w.take();
}

ClusterIndex parse_index(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic("CSVI");
  const auto version = r.get<std::uint32_t>();
  if (version != kIndexVersion)
    throw Error(ErrorCode::kVersionMismatch, "CSVI version " + std::to_string(version));
  ClusterIndex index;
  const auto mode = r.get<std::uint8_t>();
  if (mode > 2) throw Error(ErrorCode::kInvalidArgument, "unknown clustering mode byte");
  index.mode = static_cast<ClusteringMode>(mode);
  const auto C = r.get<std::uint64_t>();
  index.vocab_size = r.get<std::uint64_t>();
  index.hidden_dim = r.get<std::uint64_t>();
  index.bias_depth = r.get<std::uint16_t>();
  r.get_all<std::uint8_t>(index.source_fingerprint);
  if (C < 1 || C > index.vocab_size)
    throw Error(ErrorCode::kInvalidArgument, "cluster count outside [1, V]");
  const std::size_t dim = index.centroid_dim();
  const std::size_t record = 8 * (dim + 4 + 2 * index.bias_depth + 2 + 2);
  if (C > r.remaining() / record) r.need(r.remaining() + 1);
  index.clusters.resize(C);
  for (auto& m : index.clusters) {
    m.centroid.resize(dim);
    r.get_all<double>(m.centroid);
    m.centroid_norm = r.get<double>();
    m.radius = r.get<double>();
    m.angular_radius = r.get<double>();
    m.max_bias = r.get<double>();
    for (std::size_t t = 0; t < index.bias_depth; ++t) {
      const auto value = r.get<double>();
      const auto token = r.get<std::uint64_t>();
      if (token != std::numeric_limits<std::uint64_t>::max()) m.bias_topm.push_back({value, token});
    }
    m.begin = r.get<std::uint64_t>();
    m.end = r.get<std::uint64_t>();
    m.row_norm_max = r.get<double>();
    m.row_norm_min = r.get<double>();
  }
  if (index.vocab_size > r.remaining() / 8) r.need(r.remaining() + 1);
  index.permutation.resize(index.vocab_size);
  r.get_all<std::uint64_t>(index.permutation);
  r.expect_end();
  index.rebuild_inverse();
  return index;
}

ClusterIndex load_index(const std::filesystem::path& path) { return parse_index(read_file(path)); }

void save_index(const ClusterIndex& index, const std::filesystem::path& path) {
  write_file(path, serialize_index(index));
}

}  // namespace csvd
