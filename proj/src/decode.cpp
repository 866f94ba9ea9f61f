#include "csvd/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "csvd/error.hpp"
#include "geometry.hpp"

namespace csvd {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool heap_less(const std::pair<double, std::size_t>& a, const std::pair<double, std::size_t>& b) {
  // Max-heap on U; equal bounds pop the lower cluster id first.
  return a.first != b.first ? a.first < b.first : a.second > b.second;
}

bool is_eps_kind(CertKind kind) {
  return kind == CertKind::kSoftmaxEps || kind == CertKind::kToppMass;
}

}  // namespace

const char* to_string(FallbackKind kind) {
  switch (kind) {
    case FallbackKind::kPartialExpand: return "partial_expand";
    case FallbackKind::kRelaxEps: return "relax_eps";
    case FallbackKind::kFullVocab: return "full_vocab";
  }
  return "unknown";
}

FallbackKind parse_fallback_kind(const std::string& s) {
  if (s == "partial_expand") return FallbackKind::kPartialExpand;
  if (s == "relax_eps") return FallbackKind::kRelaxEps;
  if (s == "full_vocab") return FallbackKind::kFullVocab;
  throw Error(ErrorCode::kInvalidArgument, "unknown fallback level '" + s + "'");
}

std::uint64_t default_budget(std::uint64_t vocab_size) { return (vocab_size + 3) / 4; }

std::uint64_t DecodeConfig::budget(std::uint64_t vocab_size) const {
  return k_max == 0 ? std::max<std::uint64_t>(default_budget(vocab_size), k) : k_max;
}

void DecodeConfig::validate(std::uint64_t vocab_size) const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kConfig, msg); };
  if (k < 1) fail("k must be >= 1");
  if (k > vocab_size) fail("k = " + std::to_string(k) + " exceeds V = " + std::to_string(vocab_size));
  if (!(epsilon > 0.0 && epsilon < 1.0)) fail("epsilon must lie in (0, 1)");
  if (targets.empty()) fail("at least one certification target is required");
  for (auto t : targets)
    if (t == CertKind::kUncertified) fail("'uncertified' is not a target");
  const auto b = budget(vocab_size);
  if (b < k || b > vocab_size) fail("K_max must satisfy k <= K_max <= V");
  if (!(adaptive.alpha >= 0.0)) fail("alpha must be >= 0");
  if (!(adaptive.rho_target >= 0.0 && adaptive.rho_target <= 1.0)) fail("rho_target must be in [0, 1]");
  if (!(adaptive.half_life > 0.0)) fail("EMA half-life must be positive");
  if (!(warmup_multiplier >= 1.0)) fail("warmup multiplier must be >= 1");
  if (!(slack >= 0.0)) fail("slack must be >= 0");
  if (bound_mode == BoundMode::kSphericalUncertified)
    fail("the uncertified spherical bound cannot drive certification");
  for (const auto& f : fallback) {
    if (f.kind == FallbackKind::kPartialExpand && f.delta_clusters < 1)
      fail("partial_expand needs delta >= 1");
    if (f.kind == FallbackKind::kRelaxEps && !(f.relax_factor > 0.0))
      fail("relax factor must be positive");
  }
}

FlopReport flop_accounting(std::uint64_t vocab_size, std::uint64_t hidden_dim,
                           std::uint64_t num_clusters, std::uint64_t sub_size) {
  FlopReport r;
  r.flops_bounds = 2 * num_clusters * hidden_dim;
  r.flops_sparse = 2 * sub_size * hidden_dim;
  r.flops_full = 2 * vocab_size * hidden_dim;
  const auto spent = r.flops_bounds + r.flops_sparse;
  r.speedup_proxy = spent == 0 ? std::numeric_limits<double>::infinity()
                               : static_cast<double>(r.flops_full) / static_cast<double>(spent);
  return r;
}

FlopReport flop_accounting(const DecodeOutcome& outcome, const EmbeddingTable& table,
                           const ClusterIndex& index) {
  return flop_accounting(table.vocab_size, table.hidden_dim, index.num_clusters(),
                         outcome.token_ids.size());
}

Engine::Engine(const EmbeddingTable& table, const ClusterIndex& index)
    : table_(table), index_(index) {
  if (index.vocab_size != table.vocab_size || index.hidden_dim != table.hidden_dim)
    throw Error(ErrorCode::kDimensionMismatch, "index shape does not match table");
  if (index.source_fingerprint != table.fingerprint())
    throw Error(ErrorCode::kFingerprintMismatch, "index was built from a different table");
  const std::size_t d = table.hidden_dim;
  weights_.resize(table.weights.size());
  bias_.resize(table.vocab_size);
  for (std::size_t pos = 0; pos < index.permutation.size(); ++pos) {
    const TokenId t = index.permutation[pos];
    std::copy_n(table.weights.begin() + static_cast<std::ptrdiff_t>(t * d), d,
                weights_.begin() + static_cast<std::ptrdiff_t>(pos * d));
    bias_[pos] = table.bias[t];
  }
}

void Engine::cluster_logits(std::size_t c, std::span<const double> h,
                            std::vector<double>& out) const {
  const auto& m = index_.clusters.at(c);
  const std::size_t d = table_.hidden_dim;
  if (h.size() != d) throw Error(ErrorCode::kDimensionMismatch, "query length does not match table");
  out.resize(m.size());
  for (std::uint64_t pos = m.begin; pos < m.end; ++pos) {
    const std::span<const float> row(weights_.data() + pos * d, d);
    out[pos - m.begin] = detail::dot(row, h) + static_cast<double>(bias_[pos]);
  }
}

StepDriver::StepDriver(const Engine& engine, std::span<const double> h, const DecodeConfig& cfg,
                       BoundVector bounds, std::uint64_t budget)
    : engine_(engine),
      h_(h),
      cfg_(cfg),
      bounds_(std::move(bounds)),
      budget_(budget),
      state_(engine.index().num_clusters(), cfg.k) {
  const auto& index = engine.index();
  if (bounds_.size() != index.num_clusters())
    throw Error(ErrorCode::kDimensionMismatch, "bound vector does not match cluster count");
  heap_.reserve(index.num_clusters());
  for (std::size_t c = 0; c < index.num_clusters(); ++c) heap_.emplace_back(bounds_.values[c], c);
  std::make_heap(heap_.begin(), heap_.end(), heap_less);
  state_.refresh_residual(bounds_, index);
}

std::size_t StepDriver::peek() const { return heap_.front().second; }

std::size_t StepDriver::pop() {
  std::pop_heap(heap_.begin(), heap_.end(), heap_less);
  const std::size_t c = heap_.back().second;
  heap_.pop_back();
  ++pops_;
  return c;
}

void StepDriver::open(std::size_t c) {
  std::vector<double> logits;
  engine_.cluster_logits(c, h_, logits);
  open_with_logits(c, logits);
}

void StepDriver::open_with_logits(std::size_t c, std::span<const double> logits) {
  state_.open_cluster(c, engine_.index().members(c), logits);
  state_.refresh_residual(bounds_, engine_.index());
  if (hook_) hook_(c);
}

std::optional<CertStatus> StepDriver::check(double eps_scale, bool eps_kinds_only) const {
  if (state_.size() == 0) return std::nullopt;
  const double eps = cfg_.epsilon * eps_scale;
  const double u_max = max_unopened_bound(state_, bounds_);
  const double rho = state_.log_residual() == kNegInf
                         ? 0.0
                         : 1.0 / (1.0 + std::exp(state_.log_z() - state_.log_residual()));
  CertStatus st;
  st.epsilon_achieved = rho;
  st.epsilon_used = eps;
  st.relaxed = eps_scale != 1.0;
  st.u_max = u_max;
  st.topk_min = state_.topk_min();
  for (auto kind : cfg_.targets) {
    if (eps_kinds_only && !is_eps_kind(kind)) continue;
    if (is_eps_kind(kind) && !(eps < 1.0)) continue;
    bool ok = false;
    switch (kind) {
      case CertKind::kTopkExact: ok = topk_certified(state_, bounds_, cfg_.k).certified; break;
      case CertKind::kSoftmaxEps: ok = softmax_eps_certified(state_, eps).certified; break;
      case CertKind::kToppMass: ok = topp_certified(state_, eps).certified; break;
      case CertKind::kUncertified: break;
    }
    if (ok) {
      st.kind = kind;
      return st;
    }
  }
  return std::nullopt;
}

DecodeOutcome StepDriver::finish(CertStatus status, std::optional<FallbackKind> fallback) const {
  const auto& index = engine_.index();
  DecodeOutcome out;
  const auto ids = state_.token_ids();
  const auto logits = state_.logits();
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
  out.token_ids.reserve(ids.size());
  out.logits.reserve(ids.size());
  for (auto i : order) {
    out.token_ids.push_back(ids[i]);
    out.logits.push_back(logits[i]);
  }
  out.status = status;
  out.fallback_used = fallback;
  out.stats.clusters_opened = state_.num_opened();
  out.stats.sub_size = ids.size();
  out.stats.ratio = static_cast<double>(ids.size()) / static_cast<double>(index.vocab_size);
  out.stats.xi = tightness(state_, bounds_);
  out.stats.heap_pops = pops_;
  out.stats.budget = budget_;
  out.stats.flops =
      flop_accounting(index.vocab_size, index.hidden_dim, index.num_clusters(), ids.size());
  return out;
}

DecodeOutcome StepDriver::run_fallback() {
  auto levels = cfg_.fallback;
  if (levels.empty() || levels.back().kind != FallbackKind::kFullVocab)
    levels.push_back(FallbackLevel::full_vocab());
  for (const auto& level : levels) {
    switch (level.kind) {
      case FallbackKind::kPartialExpand: {
        for (std::uint64_t i = 0; i < level.delta_clusters && !heap_empty(); ++i) open(pop());
        if (auto st = check()) return finish(*st, FallbackKind::kPartialExpand);
        break;
      }
      case FallbackKind::kRelaxEps: {
        if (auto st = check(level.relax_factor, true)) return finish(*st, FallbackKind::kRelaxEps);
        break;
      }
      case FallbackKind::kFullVocab: {
        while (!heap_empty()) open(pop());
        CertStatus st;
        st.kind = CertKind::kTopkExact;
        st.epsilon_achieved = 0.0;
        st.epsilon_used = cfg_.epsilon;
        st.u_max = kNegInf;
        st.topk_min = state_.topk_min();
        return finish(st, FallbackKind::kFullVocab);
      }
    }
  }
  throw Error(ErrorCode::kConfig, "fallback chain ended without full_vocab");  // unreachable
}

DecodeOutcome Engine::decode_step(std::span<const double> h, const DecodeConfig& cfg,
                                  std::uint64_t budget) const {
  cfg.validate(table_.vocab_size);
  StepDriver driver(*this, h, cfg,
                    compute_bounds(index_, h, l2_norm(h), cfg.bound_mode, cfg.slack), budget);
  while (true) {
    // Nothing is certified on an empty sub-vocabulary.
    if (auto st = driver.check()) return driver.finish(*st, std::nullopt);
    if (driver.heap_empty()) return driver.run_fallback();
    driver.open(driver.pop());
    if (driver.state().size() > budget) return driver.run_fallback();
  }
}

DecodeOutcome Engine::decode_step(std::span<const double> h, const DecodeConfig& cfg) const {
  return decode_step(h, cfg, cfg.budget(table_.vocab_size));
}

DecodeOutcome Engine::decode_step_batchselect(std::span<const double> h, const DecodeConfig& cfg,
                                              std::uint64_t budget) const {
  cfg.validate(table_.vocab_size);
  StepDriver driver(*this, h, cfg,
                    compute_bounds(index_, h, l2_norm(h), cfg.bound_mode, cfg.slack), budget);
  while (!driver.heap_empty() &&
         driver.state().size() + index_.clusters[driver.peek()].size() <= budget)
    driver.open(driver.pop());
  if (auto st = driver.check()) return driver.finish(*st, std::nullopt);
  return driver.run_fallback();
}

DecodeOutcome Engine::decode_step_batchselect(std::span<const double> h,
                                              const DecodeConfig& cfg) const {
  return decode_step_batchselect(h, cfg, cfg.budget(table_.vocab_size));
}

std::uint64_t adapt_budget(std::uint64_t budget, double rho_fall, const DecodeConfig& cfg,
                           std::uint64_t vocab_size) {
  const double next = static_cast<double>(budget) *
                      (1.0 + cfg.adaptive.alpha * (rho_fall - cfg.adaptive.rho_target));
  const auto rounded = static_cast<std::uint64_t>(std::llround(std::max(0.0, next)));
  return std::clamp<std::uint64_t>(rounded, cfg.k, vocab_size);
}

BudgetController::BudgetController(const DecodeConfig& cfg, std::uint64_t vocab_size)
    : cfg_(cfg),
      vocab_size_(vocab_size),
      budget_(static_cast<double>(cfg.budget(vocab_size))),
      decay_(std::exp2(-1.0 / cfg.adaptive.half_life)) {}

std::uint64_t BudgetController::budget(std::size_t position) const {
  double b = std::round(budget_);
  if (position < cfg_.warmup_steps) b = std::round(b * cfg_.warmup_multiplier);
  return std::clamp<std::uint64_t>(static_cast<std::uint64_t>(b), cfg_.k, vocab_size_);
}

void BudgetController::observe(bool fell_back) {
  ema_ = decay_ * ema_ + (1.0 - decay_) * (fell_back ? 1.0 : 0.0);
  if (!cfg_.adaptive.enabled) return;
  budget_ *= 1.0 + cfg_.adaptive.alpha * (ema_ - cfg_.adaptive.rho_target);
  budget_ = std::clamp(budget_, static_cast<double>(cfg_.k), static_cast<double>(vocab_size_));
}

DecodeSession::DecodeSession(const Engine& engine, const DecodeConfig& cfg)
    : engine_(engine), cfg_(cfg), controller_(cfg, engine.table().vocab_size) {
  cfg.validate(engine.table().vocab_size);
}

DecodeOutcome DecodeSession::step(std::span<const double> h) {
  const auto budget = controller_.budget(position_);
  auto out = engine_.decode_step(h, cfg_, budget);
  controller_.observe(out.fallback_used.has_value());
  ++position_;
  return out;
}

}  // namespace csvd

#include "binary.hpp"

namespace csvd {

Fingerprint digest_outcomes(std::span<const DecodeOutcome> outcomes) {
  detail::ByteWriter w;
  for (const auto& o : outcomes) {
    w.put<std::uint64_t>(o.token_ids.size());
    w.put_all<TokenId>(o.token_ids);
    w.put_all<double>(o.logits);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(o.status.kind));
    w.put<std::uint8_t>(o.status.relaxed ? 1 : 0);
    w.put<double>(o.status.epsilon_achieved);
    w.put<std::uint8_t>(o.fallback_used ? static_cast<std::uint8_t>(*o.fallback_used) + 1 : 0);
  }
  return detail::sha256(w.take());
}

}  // namespace csvd
