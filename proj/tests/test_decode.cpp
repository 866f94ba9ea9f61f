#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>

#include "csvd/bench.hpp"
#include "csvd/decode.hpp"
#include "csvd/error.hpp"
#include "csvd/oracle.hpp"
#include "support.hpp"

namespace csvd {
namespace {

double rho_of(const CertState& s) {
  return s.log_residual() == -INFINITY ? 0.0 : 1.0 / (1.0 + std::exp(s.log_z() - s.log_residual()));
}

struct Workload {
  EmbeddingTable table;
  ClusterIndex index;
  Workload(std::uint64_t V, std::uint64_t d, std::uint64_t C, std::uint64_t seed,
           ClusteringMode mode = ClusteringMode::kEuclidean)
      : table(synth_vocab(V, d, std::max<std::uint64_t>(1, V / 100), 0.05, seed)),
        index(build_index(table, {.num_clusters = C, .mode = mode, .seed = seed})) {}
};

TEST(DecodeStep, SingleClusterOpensEverything) {
  const auto t = test::random_table(200, 8, 3);
  const auto index = build_index(t, {.num_clusters = 1});
  const Engine engine(t, index);
  DecodeConfig cfg;
  cfg.k_max = 200;
  std::mt19937_64 rng(1);
  const auto h = test::random_query(8, rng);
  const auto o = engine.decode_step(h, cfg);
  EXPECT_EQ(o.token_ids.size(), 200u);
  EXPECT_EQ(o.status.kind, CertKind::kTopkExact);
  EXPECT_EQ(o.status.epsilon_achieved, 0.0);
  EXPECT_FALSE(o.fallback_used);
  EXPECT_EQ(o.stats.heap_pops, 1u);
}

TEST(DecodeStep, DominantTokenTerminatesAfterOnePop) {
  // Token 0 points along e1 with a large bias; the other cluster sits far away.
  std::vector<float> w, b;
  for (int i = 0; i < 10; ++i) {
    w.insert(w.end(), {10.0f + 0.01f * i, 0.0f});
    b.push_back(i == 0 ? 1.0f : 0.0f);
  }
  for (int i = 0; i < 10; ++i) {
    w.insert(w.end(), {-10.0f - 0.01f * i, 0.0f});
    b.push_back(0.0f);
  }
  const auto t = test::make_table(20, 2, w, b);
  const auto index = build_index(t, {.num_clusters = 2, .seed = 1});
  const Engine engine(t, index);
  DecodeConfig cfg;
  cfg.k = 1;
  cfg.k_max = 20;
  const std::vector<double> h{1.0, 0.0};
  const auto o = engine.decode_step(h, cfg);
  EXPECT_EQ(o.status.kind, CertKind::kTopkExact);
  EXPECT_EQ(o.stats.heap_pops, 1u);
  EXPECT_EQ(o.token_ids.size(), 10u);
  const auto best = std::max_element(o.logits.begin(), o.logits.end()) - o.logits.begin();
  EXPECT_EQ(o.token_ids[static_cast<std::size_t>(best)], dense_logits(t, h).top_k(1)[0]);

  const auto bs = engine.decode_step_batchselect(h, cfg, 10);
  EXPECT_EQ(bs.status.kind, CertKind::kTopkExact);
  EXPECT_EQ(bs.token_ids, o.token_ids);
}

TEST(DecodeStep, OracleValidatedRun) {
  const Workload w(5000, 64, 75, 1);
  const Engine engine(w.table, w.index);
  DecodeConfig cfg;
  QuerySpec spec;
  const auto q = make_queries(w.index, spec, 1000, 5);
  std::size_t fallbacks = 0;
  double ratio = 0.0;
  ValidationTally tally;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto o = engine.decode_step(q.states[i], cfg);
    const auto problems = check_outcome(w.table, q.states[i], o, cfg.k, &tally);
    ASSERT_TRUE(problems.empty()) << "step " << i << ": " << problems.front();
    fallbacks += o.fallback_used.has_value();
    ratio += o.stats.ratio;
  }
  EXPECT_EQ(tally.steps_validated, 1000u);
  RecordProperty("fallback_rate", std::to_string(fallbacks / 1000.0));
  RecordProperty("mean_ratio", std::to_string(ratio / 1000.0));
}

TEST(DecodeStep, RandomQueriesAllKindsSound) {
  const auto t = test::random_table(1500, 16, 8);
  const auto index = build_index(t, {.num_clusters = 25, .seed = 2});
  const Engine engine(t, index);
  std::mt19937_64 rng(12);
  for (auto targets : std::vector<std::vector<CertKind>>{
           {CertKind::kTopkExact}, {CertKind::kSoftmaxEps}, {CertKind::kToppMass},
           {CertKind::kTopkExact, CertKind::kSoftmaxEps, CertKind::kToppMass}}) {
    DecodeConfig cfg;
    cfg.targets = targets;
    cfg.k = 5;
    cfg.epsilon = 0.1;
    for (int i = 0; i < 100; ++i) {
      const auto h = test::random_query(16, rng, 1.5);
      const auto o = engine.decode_step(h, cfg);
      const auto problems = check_outcome(t, h, o, cfg.k);
      ASSERT_TRUE(problems.empty()) << problems.front();
    }
  }
}

TEST(DecodeStep, LogitsBitEqualOracle) {
  const auto t = test::random_table(600, 33, 4);
  const auto index = build_index(t, {.num_clusters = 12, .seed = 2});
  const Engine engine(t, index);
  std::mt19937_64 rng(2);
  const auto h = test::random_query(33, rng);
  DecodeConfig cfg;
  const auto o = engine.decode_step(h, cfg);
  const auto dense = dense_logits(t, h);
  for (std::size_t i = 0; i < o.token_ids.size(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint64_t>(o.logits[i]),
              std::bit_cast<std::uint64_t>(dense.logits[o.token_ids[i]]));
  EXPECT_TRUE(std::is_sorted(o.token_ids.begin(), o.token_ids.end()));
}

TEST(DecodeStep, BudgetRespectedWithoutFallback) {
  const Workload w(3000, 32, 45, 3);
  const Engine engine(w.table, w.index);
  DecodeConfig cfg;
  cfg.k_max = 150;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    const auto h = test::random_query(32, rng);
    const auto o = engine.decode_step(h, cfg);
    if (!o.fallback_used) { EXPECT_LE(o.token_ids.size(), 150u); }
    if (o.fallback_used == FallbackKind::kFullVocab) { EXPECT_EQ(o.token_ids.size(), 3000u); }
    EXPECT_EQ(o.stats.heap_pops, o.stats.clusters_opened);
    EXPECT_LE(o.stats.clusters_opened, w.index.num_clusters());
  }
}

TEST(DecodeStep, Deterministic) {
  const Workload w(2000, 16, 30, 4);
  const Engine engine(w.table, w.index);
  DecodeConfig cfg;
  const auto q = make_queries(w.index, {}, 50, 9);
  std::vector<DecodeOutcome> a, b;
  for (const auto& h : q.states) a.push_back(engine.decode_step(h, cfg));
  for (const auto& h : q.states) b.push_back(engine.decode_step(h, cfg));
  EXPECT_EQ(digest_outcomes(a), digest_outcomes(b));
}

TEST(DecodeStep, RejectsBadConfig) {
  const Workload w(500, 8, 8, 5);
  const Engine engine(w.table, w.index);
  std::vector<double> h(8, 0.1);
  DecodeConfig cfg;
  cfg.epsilon = 1.5;
  EXPECT_THROW(engine.decode_step(h, cfg), Error);
  cfg = {};
  cfg.k = 0;
  EXPECT_THROW(engine.decode_step(h, cfg), Error);
  cfg = {};
  cfg.k_max = 501;
  EXPECT_THROW(engine.decode_step(h, cfg), Error);
  cfg = {};
  cfg.bound_mode = BoundMode::kSphericalUncertified;
  EXPECT_THROW(engine.decode_step(h, cfg), Error);
}

TEST(Engine, RejectsForeignIndex) {
  const Workload w(500, 8, 8, 5);
  const auto other = synth_vocab(500, 8, 5, 0.05, 6);
  EXPECT_THROW(Engine(other, w.index), Error);
}

TEST(BatchSelect, FullBudgetSelectsAll) {
  const Workload w(1000, 16, 15, 6);
  const Engine engine(w.table, w.index);
  DecodeConfig cfg;
  std::mt19937_64 rng(6);
  const auto o = engine.decode_step_batchselect(test::random_query(16, rng), cfg, 1000);
  EXPECT_EQ(o.token_ids.size(), 1000u);
  EXPECT_TRUE(o.certified());
  EXPECT_FALSE(o.fallback_used);
}

TEST(BatchSelect, NeverSmallerThanIncremental) {
  const Workload w(3000, 32, 45, 7);
  const Engine engine(w.table, w.index);
  DecodeConfig cfg;
  const auto q = make_queries(w.index, {}, 200, 7);
  std::mt19937_64 rng(7);
  int paired = 0;
  for (std::size_t i = 0; i < 200; ++i) {
    const auto h = i % 2 ? q.states[i] : test::random_query(32, rng);
    const auto inc = engine.decode_step(h, cfg);
    const auto bs = engine.decode_step_batchselect(h, cfg);
    ASSERT_TRUE(check_outcome(w.table, h, bs, cfg.k).empty());
    if (inc.fallback_used || bs.fallback_used) continue;
    ++paired;
    EXPECT_GE(bs.token_ids.size(), inc.token_ids.size());
  }
  EXPECT_GT(paired, 50);
}

TEST(Fallback, FullVocabMatchesOracle) {
  const Workload w(800, 8, 20, 8);
  const Engine engine(w.table, w.index);
  DecodeConfig cfg;
  cfg.fallback = {FallbackLevel::full_vocab()};
  cfg.k_max = cfg.k;
  cfg.epsilon = 1e-12;
  std::mt19937_64 rng(8);
  const auto h = test::random_query(8, rng, 0.1);
  const auto o = engine.decode_step(h, cfg);
  ASSERT_EQ(o.fallback_used, FallbackKind::kFullVocab);
  const auto dense = dense_logits(w.table, h);
  ASSERT_EQ(o.token_ids.size(), 800u);
  for (std::size_t i = 0; i < 800; ++i) {
    EXPECT_EQ(o.token_ids[i], i);
    EXPECT_EQ(o.logits[i], dense.logits[i]);
  }
  EXPECT_EQ(o.status.kind, CertKind::kTopkExact);
  EXPECT_EQ(o.status.epsilon_achieved, 0.0);
}

TEST(Fallback, FullVocabAppendedWhenMissing) {
  const Workload w(400, 8, 10, 9);
  const Engine engine(w.table, w.index);
  DecodeConfig cfg;
  cfg.fallback = {};
  cfg.k_max = cfg.k;
  cfg.epsilon = 1e-12;
  std::vector<double> h(8, 0.01);
  const auto o = engine.decode_step(h, cfg);
  EXPECT_EQ(o.fallback_used, FallbackKind::kFullVocab);
}

TEST(Fallback, RelaxEpsCertifiesFlagged) {
  const Workload w(2000, 16, 30, 10);
  const Engine engine(w.table, w.index);
  std::mt19937_64 rng(10);
  const auto h = test::random_query(16, rng, 2.0);
  DecodeConfig probe;
  probe.targets = {CertKind::kSoftmaxEps};
  probe.k = 1;
  // Record rho after the first cluster, then pick eps so it lands in (eps, 2 eps].
  StepDriver driver(engine, h, probe, euclidean_bounds(w.index, h, l2_norm(h)), 2000);
  const auto first = driver.pop();
  driver.open(first);
  const double rho1 = rho_of(driver.state());
  ASSERT_GT(rho1, 0.0);
  ASSERT_LT(rho1, 1.0);
  DecodeConfig cfg = probe;
  cfg.epsilon = rho1 / 1.5;
  cfg.fallback = {FallbackLevel::relax_eps(2.0)};
  ASSERT_GE(w.index.clusters[first].size(), 2u);
  const auto o = engine.decode_step(h, cfg, w.index.clusters[first].size() - 1);
  EXPECT_EQ(o.fallback_used, FallbackKind::kRelaxEps);
  EXPECT_TRUE(o.status.relaxed);
  EXPECT_EQ(o.status.kind, CertKind::kSoftmaxEps);
  EXPECT_DOUBLE_EQ(o.status.epsilon_used, 2.0 * cfg.epsilon);
  EXPECT_EQ(o.status.epsilon_achieved, rho1);
  EXPECT_TRUE(check_outcome(w.table, h, o, cfg.k).empty());
}

TEST(Fallback, PartialExpandReducesRho) {
  const Workload w(2000, 16, 30, 11);
  const Engine engine(w.table, w.index);
  std::mt19937_64 rng(11);
  DecodeConfig cfg;
  for (int trial = 0; trial < 20; ++trial) {
    const auto h = test::random_query(16, rng);
    StepDriver driver(engine, h, cfg, euclidean_bounds(w.index, h, l2_norm(h)), 2000);
    driver.open(driver.pop());
    double prev = rho_of(driver.state());
    for (int i = 0; i < 4; ++i) {
      driver.open(driver.pop());
      const double r = rho_of(driver.state());
      EXPECT_LT(r, prev);
      prev = r;
    }
  }
}

TEST(StepDriver, EmptyStateNeverCertifies) {
  const Workload w(300, 8, 5, 12);
  const Engine engine(w.table, w.index);
  DecodeConfig cfg;
  std::vector<double> h(8, 0.0);
  StepDriver driver(engine, h, cfg, euclidean_bounds(w.index, h, 0.0), 300);
  EXPECT_FALSE(driver.check().has_value());
}

TEST(StepDriver, HeapTieBreaksOnLowerId) {
  // Identical rows: every cluster bound ties.
  std::vector<float> wts(6 * 2, 1.0f);
  const auto t = test::make_table(6, 2, wts, std::vector<float>(6, 0.0f));
  ClusterIndex index = build_index(t, {.num_clusters = 1});
  const Engine engine(t, index);
  DecodeConfig cfg;
  std::vector<double> h{1.0, 1.0};
  BoundVector b;
  b.values = {2.0};
  StepDriver driver(engine, h, cfg, b, 6);
  EXPECT_EQ(driver.pop(), 0u);
}

TEST(Budget, AdaptFormula) {
  DecodeConfig cfg;
  cfg.adaptive.alpha = 0.01;
  cfg.adaptive.rho_target = 0.02;
  EXPECT_EQ(adapt_budget(1000, 0.12, cfg, 50000), 1001u);
  EXPECT_EQ(adapt_budget(1000, 0.0, cfg, 50000), 1000u);  // 999.8 rounds back
  EXPECT_EQ(adapt_budget(1000, 0.02, cfg, 50000), 1000u);
  EXPECT_EQ(adapt_budget(cfg.k, 0.0, cfg, 50000), cfg.k);
  EXPECT_EQ(adapt_budget(49900, 1.0, cfg, 50000), 50000u);
}

TEST(Budget, DefaultIsQuarterVocabulary) {
  EXPECT_EQ(default_budget(5000), 1250u);
  EXPECT_EQ(default_budget(5001), 1251u);
  DecodeConfig cfg;
  EXPECT_EQ(cfg.budget(5000), 1250u);
  cfg.k_max = 77;
  EXPECT_EQ(cfg.budget(5000), 77u);
}

TEST(Budget, ControllerWarmupAndEma) {
  DecodeConfig cfg;
  cfg.k_max = 100;
  BudgetController ctl(cfg, 10000);
  EXPECT_EQ(ctl.budget(0), 200u);
  EXPECT_EQ(ctl.budget(3), 200u);
  EXPECT_EQ(ctl.budget(4), 100u);
  for (int i = 0; i < 100; ++i) ctl.observe(true);
  EXPECT_NEAR(ctl.fallback_rate(), 0.5, 1e-12);  // one half-life
  EXPECT_EQ(ctl.budget(4), 100u) << "static budget when adaptive is off";
}

TEST(Budget, ControllerAccumulatesSubUnitSteps) {
  DecodeConfig cfg;
  cfg.k_max = 100;
  cfg.adaptive.enabled = true;
  BudgetController ctl(cfg, 10000);
  for (int i = 0; i < 2000; ++i) ctl.observe(false);
  // Each step shrinks K by only 0.02%: integer rounding alone would freeze it.
  EXPECT_LT(ctl.budget(10), 100u);
  EXPECT_LT(ctl.raw_budget(), 100.0 * std::pow(0.9998, 1000));
}

TEST(Budget, ControllerGrowsUnderSustainedFallback) {
  DecodeConfig cfg;
  cfg.k_max = 100;
  cfg.adaptive.enabled = true;
  BudgetController ctl(cfg, 10000);
  for (int i = 0; i < 300; ++i) ctl.observe(true);
  EXPECT_GT(ctl.budget(10), 150u);
}

TEST(Budget, SessionAppliesWarmupPerSequence) {
  const Workload w(1000, 16, 15, 13);
  const Engine engine(w.table, w.index);
  DecodeConfig cfg;
  cfg.k_max = 40;
  DecodeSession session(engine, cfg);
  const auto q = make_queries(w.index, {}, 6, 13);
  std::vector<std::uint64_t> budgets;
  for (const auto& h : q.states) budgets.push_back(session.step(h).stats.budget);
  EXPECT_EQ(budgets, (std::vector<std::uint64_t>{80, 80, 80, 80, 40, 40}));
  session.start_sequence();
  EXPECT_EQ(session.step(q.states[0]).stats.budget, 80u);
}

TEST(Flops, Gpt3Shape) {
  const auto r = flop_accounting(50257, 12288, 0, 50257);
  EXPECT_EQ(r.flops_full, 1235116032u);
  EXPECT_NEAR(r.flops_full / 2.0, 6.17e8, 0.01e8);
  EXPECT_EQ(r.speedup_proxy, 1.0);
}

TEST(Flops, ProxyFormula) {
  const auto r = flop_accounting(5000, 64, 75, 100);
  EXPECT_EQ(r.flops_bounds, 2u * 75 * 64);
  EXPECT_EQ(r.flops_sparse, 2u * 100 * 64);
  EXPECT_DOUBLE_EQ(r.speedup_proxy, 5000.0 / 175.0);
}

}  // namespace
}  // namespace csvd
