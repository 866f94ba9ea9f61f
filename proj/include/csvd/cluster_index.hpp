#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "csvd/tensor_io.hpp"

namespace csvd {

enum class ClusteringMode : std::uint8_t {
  kEuclidean = 0,
  kSpherical = 1,
  /// Clusters the (d+1)-dim rows [W_i, b_i]; bounds then use the query [h, 1].
  kBiasAugmented = 2,
};

const char* to_string(ClusteringMode mode);
ClusteringMode parse_clustering_mode(const std::string& s);

struct BiasEntry {
  double value = 0.0;
  TokenId token = 0;
};

struct ClusterMeta {
  /// Arithmetic mean of the member rows (length d, or d+1 when bias-augmented).
  std::vector<double> centroid;
  double centroid_norm = 0.0;
  /// max ||W_i - mu_c|| over members, in the centroid's space.
  double radius = 0.0;
  /// max angle between a nonzero member row and the centroid direction.
  double angular_radius = 0.0;
  double max_bias = 0.0;
  /// Up to m largest biases, descending, ties by lower token id.
  std::vector<BiasEntry> bias_topm;
  /// [begin, end) into the permuted token order.
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
  /// Extremes of ||W_i|| over members; the cone bound needs both.
  double row_norm_max = 0.0;
  double row_norm_min = 0.0;

  std::uint64_t size() const { return end - begin; }
};

struct ClusterIndex {
  ClusteringMode mode = ClusteringMode::kEuclidean;
  std::uint64_t vocab_size = 0;
  std::uint64_t hidden_dim = 0;
  std::uint16_t bias_depth = 0;
  Fingerprint source_fingerprint{};
  std::vector<ClusterMeta> clusters;
  /// permutation[pos] = original token id.
  std::vector<TokenId> permutation;
  /// inverse[token] = pos. Rebuilt on load.
  std::vector<std::uint64_t> inverse;

  std::size_t num_clusters() const { return clusters.size(); }
  std::size_t centroid_dim() const {
    return hidden_dim + (mode == ClusteringMode::kBiasAugmented ? 1 : 0);
  }
  std::span<const TokenId> members(std::size_t c) const {
    return {permutation.data() + clusters[c].begin, clusters[c].size()};
  }
  /// Cluster holding `token` (binary search over the ranges).
  std::size_t cluster_of(TokenId token) const;
  void rebuild_inverse();
};

struct BuildParams {
  std::uint64_t num_clusters = 0;  // 0 = default_cluster_count(V)
  ClusteringMode mode = ClusteringMode::kEuclidean;
  std::uint32_t iters = 32;
  std::uint16_t bias_depth = 3;
  std::uint64_t seed = 0;
};

/// 2000 for V around 128K, otherwise round(0.015 V), clamped to [1, V].
std::uint64_t default_cluster_count(std::uint64_t vocab_size);

/// k-means++ seeded Lloyd iterations. Returns per-point assignments in
/// [0, k). Points are rows of a row-major n x dim matrix. With `spherical`
/// set, centers are renormalized after each update (points are expected to
/// be unit length already). Clusters are never left empty.
std::vector<std::uint32_t> kmeans_assign(std::span<const double> points, std::size_t dim,
                                         std::size_t k, std::uint32_t iters, bool spherical,
                                         std::uint64_t seed);

ClusterIndex build_index(const EmbeddingTable& table, const BuildParams& params);

enum class ViolationKind {
  kRadius,
  kCentroidNorm,
  kAngularRadius,
  kRowNorm,
  kMaxBias,
  kBiasTable,
  kPartition,
  kPermutation,
};

const char* to_string(ViolationKind kind);

struct Violation {
  ViolationKind kind;
  std::size_t cluster = 0;
  std::string detail;
};

struct IndexValidation {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

/// Brute-force recomputation of every stored statistic. Throws
/// Error(kFingerprintMismatch) if the index was built from another table.
IndexValidation validate_index(const ClusterIndex& index, const EmbeddingTable& table);

/// Euclidean distance from member row to centroid, in the index's space.
double member_distance(const ClusterIndex& index, const EmbeddingTable& table, std::size_t c,
                       TokenId token);

std::vector<std::uint8_t> serialize_index(const ClusterIndex& index);
ClusterIndex parse_index(std::span<const std::uint8_t> bytes);
ClusterIndex load_index(const std::filesystem::path& path);
void save_index(const ClusterIndex& index, const std::filesystem::path& path);

}  // namespace csvd
