#include "csvd/certify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "csvd/error.hpp"

namespace csvd {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  const double lo = std::min(a, b);
  return hi + std::log1p(std::exp(lo - hi));
}

void check_eps(double eps) {
  if (!(eps > 0.0 && eps < 1.0))
    throw Error(ErrorCode::kConfig, "epsilon must lie in (0, 1), got " + std::to_string(eps));
}

}  // namespace

const char* to_string(CertKind kind) {
  switch (kind) {
    case CertKind::kTopkExact: return "topk_exact";
    case CertKind::kSoftmaxEps: return "softmax_eps";
    case CertKind::kToppMass: return "topp_mass";
    case CertKind::kUncertified: return "uncertified";
  }
  return "unknown";
}

CertKind parse_cert_kind(const std::string& s) {
  if (s == "topk" || s == "topk_exact") return CertKind::kTopkExact;
  if (s == "softmax" || s == "softmax_eps") return CertKind::kSoftmaxEps;
  if (s == "topp" || s == "topp_mass") return CertKind::kToppMass;
  if (s == "uncertified") return CertKind::kUncertified;
  throw Error(ErrorCode::kInvalidArgument, "unknown certification kind '" + s + "'");
}

double log_sum_exp(std::span<const double> xs) {
  if (xs.empty()) return kNegInf;
  const double m = *std::max_element(xs.begin(), xs.end());
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

CertState::CertState(std::size_t num_clusters, std::size_t k)
    : opened_(num_clusters, 0), k_(k), log_z_(kNegInf), log_residual_(kNegInf) {
  if (k == 0) throw Error(ErrorCode::kConfig, "k must be >= 1");
  topk_heap_.reserve(k);
}

void CertState::open_cluster(std::size_t c, std::span<const TokenId> ids,
                             std::span<const double> logits) {
  if (c >= opened_.size() || opened_[c])
    throw Error(ErrorCode::kInvalidArgument, "cluster " + std::to_string(c) + " already open");
  if (ids.size() != logits.size())
    throw Error(ErrorCode::kDimensionMismatch, "ids and logits differ in length");
  opened_[c] = 1;
  ++num_opened_;
  open_order_.push_back(c);
  ids_.insert(ids_.end(), ids.begin(), ids.end());
  logits_.insert(logits_.end(), logits.begin(), logits.end());

  for (double l : logits) {
    if (topk_heap_.size() < k_) {
      topk_heap_.push_back(l);
      std::push_heap(topk_heap_.begin(), topk_heap_.end(), std::greater<>());
    } else if (l > topk_heap_.front()) {
      std::pop_heap(topk_heap_.begin(), topk_heap_.end(), std::greater<>());
      topk_heap_.back() = l;
      std::push_heap(topk_heap_.begin(), topk_heap_.end(), std::greater<>());
    }
  }

  if (++merges_since_refresh_ >= kRefreshInterval) {
    log_z_ = recompute_log_z();
    merges_since_refresh_ = 0;
  } else {
    log_z_ = log_add(log_z_, log_sum_exp(logits));
  }
}

void CertState::refresh_residual(const BoundVector& bounds, const ClusterIndex& index) {
  if (bounds.size() != opened_.size() || index.num_clusters() != opened_.size())
    throw Error(ErrorCode::kDimensionMismatch, "bound vector does not match cluster count");
  double m = kNegInf;
  for (std::size_t c = 0; c < opened_.size(); ++c)
    if (!opened_[c])
      m = std::max(m, bounds.values[c] + std::log(static_cast<double>(index.clusters[c].size())));
  if (m == kNegInf) {
    log_residual_ = kNegInf;
    return;
  }
  double s = 0.0;
  for (std::size_t c = 0; c < opened_.size(); ++c)
    if (!opened_[c])
      s += std::exp(bounds.values[c] + std::log(static_cast<double>(index.clusters[c].size())) - m);
  log_residual_ = m + std::log(s);
}

double CertState::topk_min() const {
  return topk_heap_.size() < k_ ? kNegInf : topk_heap_.front();
}

double CertState::recompute_log_z() const { return log_sum_exp(logits_); }

double max_unopened_bound(const CertState& state, const BoundVector& bounds) {
  double u = kNegInf;
  for (std::size_t c = 0; c < state.num_clusters(); ++c)
    if (!state.is_open(c)) u = std::max(u, bounds.values[c]);
  return u;
}

TopkCheck topk_certified(const CertState& state, const BoundVector& bounds, std::size_t k) {
  TopkCheck out;
  out.u_max = max_unopened_bound(state, bounds);
  if (state.size() < k || k == 0) {
    out.topk_min = kNegInf;
    return out;
  }
  if (k == state.k()) {
    out.topk_min = state.topk_min();
  } else {
    std::vector<double> copy(state.logits().begin(), state.logits().end());
    std::nth_element(copy.begin(), copy.begin() + static_cast<std::ptrdiff_t>(k - 1), copy.end(),
                     std::greater<>());
    out.topk_min = copy[k - 1];
  }
  // Strict: a tie with an unopened bound is not a certificate.
  out.certified = out.u_max < out.topk_min;
  return out;
}

EpsCheck softmax_eps_certified(const CertState& state, double eps) {
  check_eps(eps);
  EpsCheck out;
  if (state.size() == 0) return out;
  if (state.log_residual() == kNegInf) {
    out.rho = 0.0;
  } else {
    out.rho = 1.0 / (1.0 + std::exp(state.log_z() - state.log_residual()));
  }
  out.certified = out.rho <= eps;
  return out;
}

ToppCheck topp_certified(const CertState& state, double eps) {
  check_eps(eps);
  ToppCheck out;
  if (state.size() == 0) {
    out.delta = std::numeric_limits<double>::infinity();
    return out;
  }
  out.delta = state.log_residual() == kNegInf ? 0.0
                                              : std::exp(state.log_residual() - state.log_z());
  out.certified = out.delta <= eps / (1.0 - eps);
  return out;
}

Tightness tightness(const CertState& state, const BoundVector& bounds) {
  Tightness out;
  const double u_max = max_unopened_bound(state, bounds);
  if (state.size() < 2 || u_max == kNegInf) return out;
  const auto [lo, hi] = std::minmax_element(state.logits().begin(), state.logits().end());
  out.defined = true;
  if (u_max <= *lo) {
    out.dominated = true;
    out.xi = 1.0;
    return out;
  }
  out.xi = (*hi - *lo) / (u_max - *lo);
  return out;
}

}  // namespace csvd
