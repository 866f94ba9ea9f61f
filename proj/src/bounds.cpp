#include "csvd/bounds.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <limits>
#include <numeric>

#include "csvd/error.hpp"
#include "geometry.hpp"

namespace csvd {

namespace {

// Evaluates U_c one cluster at a time so full and per-shard evaluation share
// the exact same arithmetic.
class ClusterBounder {
 public:
  ClusterBounder(const ClusterIndex& index, std::span<const double> h, double h_norm,
                 BoundMode mode, double slack)
      : index_(index), mode_(mode), slack_(slack) {
    const std::size_t d = index.hidden_dim;
    if (mode != BoundMode::kEuclidean && index.mode != ClusteringMode::kSpherical)
      throw Error(ErrorCode::kConfig, "spherical bounds need a spherical index");
    if (mode != BoundMode::kEuclidean) h_norm = l2_norm(h);
    h_ = h;
    h_norm_ = h_norm;
    q_ = h;
    q_norm_ = h_norm;
    if (index.mode == ClusteringMode::kBiasAugmented && h.size() == d + 1) {
      if (h[d] != 1.0) throw Error(ErrorCode::kDimensionMismatch, "augmented query must end with 1");
      return;
    }
    if (h.size() != d)
      throw Error(ErrorCode::kDimensionMismatch,
                  "query length " + std::to_string(h.size()) + ", index dimension " +
                      std::to_string(d));
    if (index.mode == ClusteringMode::kBiasAugmented) {
      storage_.assign(h.begin(), h.end());
      storage_.push_back(1.0);
      q_ = storage_;
      q_norm_ = std::sqrt(h_norm * h_norm + 1.0);
    }
  }

  double query_norm() const { return h_norm_; }

  double geometric(std::size_t c) const {
    const auto& m = index_.clusters[c];
    return detail::dot(m.centroid, q_) + m.radius * q_norm_;
  }

  double operator()(std::size_t c) const {
    const auto& m = index_.clusters[c];
    switch (mode_) {
      case BoundMode::kEuclidean: {
        const double bias =
            index_.mode == ClusteringMode::kBiasAugmented ? 0.0 : m.max_bias;
        return geometric(c) + bias + slack_;
      }
      case BoundMode::kSpherical: {
        if (h_norm_ == 0.0) return m.max_bias + slack_;
        if (m.centroid_norm == 0.0) return geometric(c) + m.max_bias + slack_;
        const double phi = detail::angle_between(h_, std::span<const double>(m.centroid));
        const double cosv = std::cos(std::max(0.0, phi - m.angular_radius));
        // A negative cosine is least negative at the shortest member row.
        const double rho = cosv >= 0.0 ? m.row_norm_max : m.row_norm_min;
        return rho * h_norm_ * cosv + m.max_bias + slack_;
      }
      case BoundMode::kSphericalUncertified:
        return h_norm_ * (m.centroid_norm * std::cos(m.angular_radius) +
                          std::sin(m.angular_radius)) +
               m.max_bias + slack_;
    }
    return 0.0;
  }

 private:
  const ClusterIndex& index_;
  BoundMode mode_;
  double slack_;
  std::span<const double> h_;
  double h_norm_ = 0.0;
  std::vector<double> storage_;
  std::span<const double> q_;
  double q_norm_ = 0.0;
};

}  // namespace

const char* to_string(BoundMode mode) {
  switch (mode) {
    case BoundMode::kEuclidean: return "euclidean";
    case BoundMode::kSpherical: return "spherical";
    case BoundMode::kSphericalUncertified: return "spherical_uncertified";
  }
  return "unknown";
}

BoundMode parse_bound_mode(const std::string& s) {
  if (s == "euclidean") return BoundMode::kEuclidean;
  if (s == "spherical") return BoundMode::kSpherical;
  if (s == "spherical_uncertified") return BoundMode::kSphericalUncertified;
  throw Error(ErrorCode::kInvalidArgument, "unknown bound mode '" + s + "'");
}

double geometric_term(const ClusterIndex& index, std::size_t c, std::span<const double> h,
                      double h_norm) {
  if (c >= index.num_clusters()) throw Error(ErrorCode::kInvalidArgument, "cluster id out of range");
  return ClusterBounder(index, h, h_norm, BoundMode::kEuclidean, 0.0).geometric(c);
}

void compute_bounds_for(const ClusterIndex& index, std::span<const double> h, double h_norm,
                        BoundMode mode, double slack, std::span<const std::size_t> clusters,
                        BoundVector& out) {
  if (!(slack >= 0.0)) throw Error(ErrorCode::kConfig, "slack must be nonnegative");
  const ClusterBounder bound(index, h, h_norm, mode, slack);
  if (out.values.size() != index.num_clusters())
    throw Error(ErrorCode::kDimensionMismatch, "bound vector not sized to the cluster count");
  out.mode = mode;
  out.query_norm = bound.query_norm();
  out.slack = slack;
  for (std::size_t c : clusters) out.values.at(c) = bound(c);
}

BoundVector compute_bounds(const ClusterIndex& index, std::span<const double> h, double h_norm,
                           BoundMode mode, double slack) {
  BoundVector out;
  out.values.resize(index.num_clusters());
  std::vector<std::size_t> all(index.num_clusters());
  std::iota(all.begin(), all.end(), std::size_t{0});
  compute_bounds_for(index, h, h_norm, mode, slack, all, out);
  return out;
}

BoundVector euclidean_bounds(const ClusterIndex& index, std::span<const double> h, double h_norm,
                             double slack) {
  return compute_bounds(index, h, h_norm, BoundMode::kEuclidean, slack);
}

BoundVector spherical_bounds(const ClusterIndex& index, std::span<const double> h, double slack) {
  return compute_bounds(index, h, 0.0, BoundMode::kSpherical, slack);
}

BoundVector spherical_uncertified_bounds(const ClusterIndex& index, std::span<const double> h,
                                         double slack) {
  return compute_bounds(index, h, 0.0, BoundMode::kSphericalUncertified, slack);
}

double refined_bias_bound(const ClusterIndex& index, const EmbeddingTable& table, std::size_t c,
                          std::span<const double> h, double h_norm,
                          const std::unordered_set<TokenId>& exclude) {
  if (index.mode == ClusteringMode::kBiasAugmented)
    throw Error(ErrorCode::kConfig, "bias-augmented indices fold the bias into the geometry");
  const auto& m = index.clusters.at(c);
  double best = -std::numeric_limits<double>::infinity();
  bool found = false;
  for (const auto& e : m.bias_topm)
    if (!exclude.contains(e.token)) {
      best = e.value;
      found = true;
      break;
    }
  if (!found && m.bias_topm.size() < m.size()) {
    for (TokenId t : index.members(c))
      if (!exclude.contains(t)) best = std::max(best, static_cast<double>(table.bias[t]));
  }
  if (best == -std::numeric_limits<double>::infinity()) return best;
  return geometric_term(index, c, h, h_norm) + best;
}

double fp32_slack(const ClusterIndex& index, double h_norm) {
  double reach = 0.0;
  for (const auto& m : index.clusters)
    reach = std::max(reach, (m.centroid_norm + m.radius) * h_norm + std::abs(m.max_bias));
  return 4.0 * FLT_EPSILON * reach;
}

}  // namespace csvd
