#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "csvd/bounds.hpp"
#include "csvd/certify.hpp"
#include "csvd/cluster_index.hpp"
#include "csvd/tensor_io.hpp"

namespace csvd {

enum class FallbackKind { kPartialExpand, kRelaxEps, kFullVocab };

const char* to_string(FallbackKind kind);
FallbackKind parse_fallback_kind(const std::string& s);

struct FallbackLevel {
  FallbackKind kind = FallbackKind::kFullVocab;
  std::uint64_t delta_clusters = 4;  // partial_expand
  double relax_factor = 2.0;         // relax_eps

  static FallbackLevel partial_expand(std::uint64_t delta = 4) {
    return {FallbackKind::kPartialExpand, delta, 2.0};
  }
  static FallbackLevel relax_eps(double factor = 2.0) {
    return {FallbackKind::kRelaxEps, 4, factor};
  }
  static FallbackLevel full_vocab() { return {FallbackKind::kFullVocab, 4, 2.0}; }
};

struct AdaptiveBudget {
  bool enabled = false;
  double alpha = 0.01;
  double rho_target = 0.02;
  /// Half-life in steps of the exponential moving average of fallbacks.
  double half_life = 100.0;
};

struct DecodeConfig {
  std::size_t k = 10;
  double epsilon = 0.05;
  /// Checked in order each iteration; the first that holds ends the step.
  std::vector<CertKind> targets{CertKind::kTopkExact, CertKind::kSoftmaxEps};
  /// Token budget K_max. 0 selects default_budget(V).
  std::uint64_t k_max = 0;
  /// Escalation order. full_vocab is appended when absent.
  std::vector<FallbackLevel> fallback{FallbackLevel::partial_expand(4), FallbackLevel::relax_eps(2.0),
                                      FallbackLevel::full_vocab()};
  AdaptiveBudget adaptive;
  BoundMode bound_mode = BoundMode::kEuclidean;
  double slack = 0.0;
  /// Budget multiplier for the first positions of a sequence.
  std::uint32_t warmup_steps = 4;
  double warmup_multiplier = 2.0;

  /// Throws Error(kConfig) when unsatisfiable for a vocabulary of size V.
  void validate(std::uint64_t vocab_size) const;
  std::uint64_t budget(std::uint64_t vocab_size) const;
};

/// ceil(V / 4).
std::uint64_t default_budget(std::uint64_t vocab_size);

struct FlopReport {
  std::uint64_t flops_bounds = 0;
  std::uint64_t flops_sparse = 0;
  std::uint64_t flops_full = 0;
  /// flops_full / (flops_bounds + flops_sparse).
  double speedup_proxy = 1.0;
};

/// One multiply plus one add counted as 2 FLOPs.
FlopReport flop_accounting(std::uint64_t vocab_size, std::uint64_t hidden_dim,
                           std::uint64_t num_clusters, std::uint64_t sub_size);

struct StepStats {
  std::size_t clusters_opened = 0;
  std::size_t sub_size = 0;
  double ratio = 0.0;
  Tightness xi;
  std::size_t heap_pops = 0;
  std::uint64_t budget = 0;
  FlopReport flops;
};

struct DecodeOutcome {
  /// Sub-vocabulary in ascending original token id, with exact logits.
  std::vector<TokenId> token_ids;
  std::vector<double> logits;
  CertStatus status;
  std::optional<FallbackKind> fallback_used;
  StepStats stats;

  bool certified() const { return status.kind != CertKind::kUncertified; }
};

FlopReport flop_accounting(const DecodeOutcome& outcome, const EmbeddingTable& table,
                           const ClusterIndex& index);

/// Decoding engine over an immutable (table, index) pair. Keeps a copy of
/// the weights in cluster-permuted order so each cluster is one contiguous
/// block. The table and index must outlive the engine.
class Engine {
 public:
  Engine(const EmbeddingTable& table, const ClusterIndex& index);

  const EmbeddingTable& table() const { return table_; }
  const ClusterIndex& index() const { return index_; }

  /// Exact logits of cluster c's members, in permuted order.
  void cluster_logits(std::size_t c, std::span<const double> h, std::vector<double>& out) const;

  /// Heap-driven incremental loop: open the highest-bound cluster until a
  /// target certifies or the budget is exceeded, then fall back.
  DecodeOutcome decode_step(std::span<const double> h, const DecodeConfig& cfg,
                            std::uint64_t budget) const;
  DecodeOutcome decode_step(std::span<const double> h, const DecodeConfig& cfg) const;

  /// Select clusters by descending bound while the budget allows, compute
  /// them all, certify once, fall back on failure.
  DecodeOutcome decode_step_batchselect(std::span<const double> h, const DecodeConfig& cfg,
                                        std::uint64_t budget) const;
  DecodeOutcome decode_step_batchselect(std::span<const double> h, const DecodeConfig& cfg) const;

 private:
  const EmbeddingTable& table_;
  const ClusterIndex& index_;
  std::vector<float> weights_;
  std::vector<float> bias_;
};

/// State of one decoding step, shared by the single-worker and sharded
/// paths. Clusters come off a max-heap keyed by (U_c desc, id asc).
class StepDriver {
 public:
  using OpenHook = std::function<void(std::size_t cluster)>;

  StepDriver(const Engine& engine, std::span<const double> h, const DecodeConfig& cfg,
             BoundVector bounds, std::uint64_t budget);

  void set_open_hook(OpenHook hook) { hook_ = std::move(hook); }

  bool heap_empty() const { return heap_.empty(); }
  std::size_t peek() const;
  std::size_t pop();

  /// Computes the cluster's logits and merges them.
  void open(std::size_t c);
  /// Merges logits computed elsewhere (must equal Engine::cluster_logits).
  void open_with_logits(std::size_t c, std::span<const double> logits);

  /// Checks cfg.targets in order at tolerance epsilon * eps_scale.
  std::optional<CertStatus> check(double eps_scale = 1.0, bool eps_kinds_only = false) const;

  DecodeOutcome finish(CertStatus status, std::optional<FallbackKind> fallback) const;
  /// Runs the fallback levels in order; always returns.
  DecodeOutcome run_fallback();

  const CertState& state() const { return state_; }
  const BoundVector& bounds() const { return bounds_; }
  std::uint64_t budget() const { return budget_; }

 private:
  const Engine& engine_;
  std::span<const double> h_;
  const DecodeConfig& cfg_;
  BoundVector bounds_;
  std::uint64_t budget_;
  CertState state_;
  std::vector<std::pair<double, std::size_t>> heap_;
  std::size_t pops_ = 0;
  OpenHook hook_;
};

/// round(K (1 + alpha (rho_fall - rho_target))) clamped to [k, V]. The
/// budget grows while fallbacks run above target and shrinks below it; the
/// opposite sign would drive K away from the target rate.
std::uint64_t adapt_budget(std::uint64_t budget, double rho_fall, const DecodeConfig& cfg,
                           std::uint64_t vocab_size);

/// Sequential budget controller. Tracks the fallback rate as an EMA and,
/// when adaptive, keeps K_max as a real number so that sub-unit updates
/// accumulate instead of being rounded away.
class BudgetController {
 public:
  BudgetController(const DecodeConfig& cfg, std::uint64_t vocab_size);

  /// Budget for the given position within the current sequence.
  std::uint64_t budget(std::size_t position) const;
  void observe(bool fell_back);
  double fallback_rate() const { return ema_; }
  double raw_budget() const { return budget_; }

 private:
  const DecodeConfig& cfg_;
  std::uint64_t vocab_size_;
  double budget_;
  double ema_ = 0.0;
  double decay_;
};

/// Runs consecutive decoding steps, applying warmup and the budget
/// controller. Single owner; not thread-safe.
class DecodeSession {
 public:
  DecodeSession(const Engine& engine, const DecodeConfig& cfg);

  DecodeOutcome step(std::span<const double> h);
  void start_sequence() { position_ = 0; }
  const BudgetController& controller() const { return controller_; }

 private:
  const Engine& engine_;
  const DecodeConfig& cfg_;
  BudgetController controller_;
  std::size_t position_ = 0;
};

}  // namespace csvd

namespace csvd {

/// SHA-256 over token ids, logit bit patterns, status and fallback level of
/// each outcome, in order. Equal digests mean bit-identical outcomes.
Fingerprint digest_outcomes(std::span<const DecodeOutcome> outcomes);

}  // namespace csvd
