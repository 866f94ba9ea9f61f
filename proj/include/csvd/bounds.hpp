#pragma once

#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "csvd/cluster_index.hpp"

namespace csvd {

enum class BoundMode {
  /// <mu_c, h> + R_c |h| + max bias. Valid for every clustering mode.
  kEuclidean,
  /// Cone bound rho_c |h| cos(max(0, phi_c - theta_c)) + max bias.
  kSpherical,
  /// |h| (|mu_c| cos theta_c + sin theta_c) + max bias. Not sound in
  /// general; available for comparison only and refused by the decoder.
  kSphericalUncertified,
};

const char* to_string(BoundMode mode);
BoundMode parse_bound_mode(const std::string& s);

struct BoundVector {
  std::vector<double> values;
  BoundMode mode = BoundMode::kEuclidean;
  double query_norm = 0.0;
  /// Safety margin already included in every value.
  double slack = 0.0;

  std::size_t size() const { return values.size(); }
};

/// <mu_c, h> + R_c |h| in the index's space (query augmented with a trailing
/// 1 for bias-augmented indices).
double geometric_term(const ClusterIndex& index, std::size_t c, std::span<const double> h,
                      double h_norm);

/// `h` has length d; for a bias-augmented index a length d+1 query whose
/// last entry is 1 is also accepted. `h_norm` is the norm of `h` as passed.
BoundVector euclidean_bounds(const ClusterIndex& index, std::span<const double> h, double h_norm,
                             double slack = 0.0);

/// Requires a spherical index. Clusters with a zero centroid use the
/// euclidean form.
BoundVector spherical_bounds(const ClusterIndex& index, std::span<const double> h,
                             double slack = 0.0);

BoundVector spherical_uncertified_bounds(const ClusterIndex& index, std::span<const double> h,
                                         double slack = 0.0);

BoundVector compute_bounds(const ClusterIndex& index, std::span<const double> h, double h_norm,
                           BoundMode mode, double slack = 0.0);

/// Writes out.values[c] for each listed cluster only; `out` must already be
/// sized to the cluster count. Values are identical to compute_bounds.
void compute_bounds_for(const ClusterIndex& index, std::span<const double> h, double h_norm,
                        BoundMode mode, double slack, std::span<const std::size_t> clusters,
                        BoundVector& out);

/// Euclidean bound for cluster c with the bias term replaced by the largest
/// bias among members not in `exclude`. Returns -inf when every member is
/// excluded. Scans the members only when the top-m table is exhausted.
double refined_bias_bound(const ClusterIndex& index, const EmbeddingTable& table, std::size_t c,
                          std::span<const double> h, double h_norm,
                          const std::unordered_set<TokenId>& exclude);

/// 4 float-epsilons of the largest possible logit magnitude for this query.
double fp32_slack(const ClusterIndex& index, double h_norm);

}  // namespace csvd
