#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "csvd/bounds.hpp"
#include "csvd/cluster_index.hpp"

namespace csvd {

enum class CertKind { kTopkExact, kSoftmaxEps, kToppMass, kUncertified };

const char* to_string(CertKind kind);
CertKind parse_cert_kind(const std::string& s);

struct CertStatus {
  CertKind kind = CertKind::kUncertified;
  /// rho = R_hat / (Z_S + R_hat) at decision time; an upper bound on TV.
  double epsilon_achieved = 1.0;
  /// Tolerance the certificate was checked against (after any relaxation).
  double epsilon_used = 0.0;
  bool relaxed = false;
  double u_max = 0.0;
  double topk_min = 0.0;
};

/// Sub-vocabulary state for one decoding step. Z_S and R_hat are held in
/// the log domain; Z_S merges cluster blocks incrementally and is rebuilt
/// from scratch every kRefreshInterval merges.
class CertState {
 public:
  static constexpr std::size_t kRefreshInterval = 64;

  CertState(std::size_t num_clusters, std::size_t k);

  void open_cluster(std::size_t c, std::span<const TokenId> ids, std::span<const double> logits);

  /// log sum over unopened clusters of |c| exp(U_c), in cluster-id order.
  /// -inf when everything is open.
  void refresh_residual(const BoundVector& bounds, const ClusterIndex& index);

  bool is_open(std::size_t c) const { return opened_[c] != 0; }
  std::size_t num_opened() const { return num_opened_; }
  std::size_t num_clusters() const { return opened_.size(); }
  std::size_t size() const { return ids_.size(); }
  std::size_t k() const { return k_; }
  std::span<const TokenId> token_ids() const { return ids_; }
  std::span<const double> logits() const { return logits_; }
  /// Opened clusters in the order they were opened.
  std::span<const std::size_t> open_order() const { return open_order_; }

  /// k-th largest logit in S, -inf while |S| < k.
  double topk_min() const;
  double log_z() const { return log_z_; }
  double log_residual() const { return log_residual_; }

  /// Full log-sum-exp of the current sub-logits, max-shifted.
  double recompute_log_z() const;

 private:
  std::vector<std::uint8_t> opened_;
  std::vector<std::size_t> open_order_;
  std::size_t num_opened_ = 0;
  std::size_t k_;
  std::vector<TokenId> ids_;
  std::vector<double> logits_;
  std::vector<double> topk_heap_;  // min-heap of the k largest logits
  double log_z_;
  double log_residual_;
  std::size_t merges_since_refresh_ = 0;
};

/// log(sum exp(x)) with max shift; -inf for an empty span.
double log_sum_exp(std::span<const double> xs);

struct TopkCheck {
  bool certified = false;
  double u_max = 0.0;
  double topk_min = 0.0;
};

/// Certified iff |S| >= k and every unopened bound is strictly below the
/// k-th largest sub-logit.
TopkCheck topk_certified(const CertState& state, const BoundVector& bounds, std::size_t k);

struct EpsCheck {
  bool certified = false;
  double rho = 1.0;
};

/// rho = 1 / (1 + exp(log Z_S - log R_hat)); certified iff rho <= eps.
EpsCheck softmax_eps_certified(const CertState& state, double eps);

struct ToppCheck {
  bool certified = false;
  double delta = 0.0;
};

/// delta = R_hat / Z_S; certified iff delta <= eps / (1 - eps).
ToppCheck topp_certified(const CertState& state, double eps);

struct Tightness {
  double xi = 0.0;
  bool defined = false;
  /// U_max at or below every sub-logit; xi is reported as 1.
  bool dominated = false;
};

/// (max l_S - min l_S) / (U_max - min l_S). Undefined when |S| < 2 or no
/// cluster remains unopened.
Tightness tightness(const CertState& state, const BoundVector& bounds);

/// Largest bound among unopened clusters, -inf if none.
double max_unopened_bound(const CertState& state, const BoundVector& bounds);

}  // namespace csvd
