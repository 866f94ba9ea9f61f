#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "csvd/bounds.hpp"
#include "csvd/certify.hpp"
#include "csvd/error.hpp"
#include "csvd/oracle.hpp"
#include "support.hpp"

namespace csvd {
namespace {

ClusterIndex one_cluster(std::vector<double> mu, double radius, double max_bias) {
  ClusterIndex index;
  index.vocab_size = 1;
  index.hidden_dim = mu.size();
  ClusterMeta m;
  m.centroid_norm = std::sqrt(std::inner_product(mu.begin(), mu.end(), mu.begin(), 0.0));
  m.centroid = std::move(mu);
  m.radius = radius;
  m.max_bias = max_bias;
  m.bias_topm = {{max_bias, 0}};
  m.begin = 0;
  m.end = 1;
  index.clusters.push_back(m);
  index.permutation = {0};
  index.rebuild_inverse();
  return index;
}

std::size_t count_violations(const EmbeddingTable& t, const ClusterIndex& index, BoundMode mode,
                             std::size_t queries, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::size_t bad = 0;
  for (std::size_t q = 0; q < queries; ++q) {
    const auto h = test::random_query(t.hidden_dim, rng, scale);
    const auto dense = dense_logits(t, h);
    const auto u = compute_bounds(index, h, l2_norm(h), mode);
    for (std::size_t c = 0; c < index.num_clusters(); ++c)
      for (TokenId id : index.members(c)) bad += dense.logits[id] > u.values[c];
  }
  return bad;
}

TEST(EuclideanBound, FormulaEvaluation) {
  const auto index = one_cluster({1.0, 0.0}, 0.5, 0.1);
  const std::vector<double> h{2.0, 0.0};
  const auto u = euclidean_bounds(index, h, 2.0);
  EXPECT_DOUBLE_EQ(u.values[0], 3.1);
  EXPECT_DOUBLE_EQ(geometric_term(index, 0, h, 2.0), 3.0);
}

TEST(EuclideanBound, SlackIsAddedAndRecorded) {
  const auto index = one_cluster({1.0, 0.0}, 0.5, 0.1);
  const std::vector<double> h{2.0, 0.0};
  const auto u = euclidean_bounds(index, h, 2.0, 0.25);
  EXPECT_DOUBLE_EQ(u.values[0], 3.35);
  EXPECT_EQ(u.slack, 0.25);
  EXPECT_THROW(euclidean_bounds(index, h, 2.0, -1.0), Error);
}

TEST(EuclideanBound, SingletonEqualsTrueLogit) {
  const auto t = test::make_table(3, 3, {1, 2, 3, -1, 0.5f, 2, 0, 0, 1}, {0, 0, 0});
  const auto index = build_index(t, {.num_clusters = 3, .bias_depth = 1, .seed = 1});
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20; ++i) {
    const auto h = test::random_query(3, rng);
    const auto dense = dense_logits(t, h);
    const auto u = euclidean_bounds(index, h, l2_norm(h));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(u.values[c], dense.logits[index.members(c)[0]]);
  }
}

TEST(EuclideanBound, SoundOnRandomTable) {
  const auto t = test::random_table(2000, 32, 11);
  const auto index = build_index(t, {.num_clusters = 40, .seed = 1});
  EXPECT_EQ(count_violations(t, index, BoundMode::kEuclidean, 1000, 3), 0u);
}

TEST(EuclideanBound, SoundForEveryClusteringMode) {
  const auto t = synth_vocab(1500, 16, 12, 0.4, 2);
  for (auto mode : {ClusteringMode::kEuclidean, ClusteringMode::kSpherical, ClusteringMode::kBiasAugmented}) {
    const auto index = build_index(t, {.num_clusters = 30, .mode = mode, .seed = 2});
    EXPECT_EQ(count_violations(t, index, BoundMode::kEuclidean, 300, 4, 3.0), 0u) << to_string(mode);
  }
}

TEST(EuclideanBound, MonotoneInRadius) {
  auto index = one_cluster({0.3, -0.2, 1.0}, 0.1, 0.0);
  std::mt19937_64 rng(1);
  const auto h = test::random_query(3, rng);
  double prev = euclidean_bounds(index, h, l2_norm(h)).values[0];
  for (double r : {0.2, 0.5, 1.0, 4.0}) {
    index.clusters[0].radius = r;
    const double u = euclidean_bounds(index, h, l2_norm(h)).values[0];
    EXPECT_GE(u, prev);
    prev = u;
  }
}

TEST(EuclideanBound, BiasShiftMovesBoundsAndLogitsTogether) {
  auto t = synth_vocab(400, 8, 4, 0.3, 3);
  const auto index = build_index(t, {.num_clusters = 10, .seed = 3});
  auto shifted = t;
  for (auto& b : shifted.bias) b += 2.0f;
  const auto index2 = build_index(shifted, {.num_clusters = 10, .seed = 3});
  ASSERT_EQ(index.permutation, index2.permutation);
  std::mt19937_64 rng(2);
  const auto h = test::random_query(8, rng);
  const auto u1 = euclidean_bounds(index, h, l2_norm(h));
  const auto u2 = euclidean_bounds(index2, h, l2_norm(h));
  // The shift is applied to f32 biases, so it is exact only to f32 precision.
  for (std::size_t c = 0; c < 10; ++c) EXPECT_NEAR(u2.values[c] - u1.values[c], 2.0, 1e-6);
}

TEST(BiasAugmented, AcceptsPlainAndAugmentedQueries) {
  const auto t = synth_vocab(300, 6, 4, 0.3, 5);
  const auto index = build_index(t, {.num_clusters = 9, .mode = ClusteringMode::kBiasAugmented, .seed = 1});
  std::mt19937_64 rng(3);
  auto h = test::random_query(6, rng);
  const auto plain = euclidean_bounds(index, h, l2_norm(h));
  auto aug = h;
  aug.push_back(1.0);
  const auto augmented = euclidean_bounds(index, aug, l2_norm(aug));
  for (std::size_t c = 0; c < 9; ++c) EXPECT_NEAR(plain.values[c], augmented.values[c], 1e-12);
  aug.back() = 2.0;
  EXPECT_THROW(euclidean_bounds(index, aug, l2_norm(aug)), Error);
}

TEST(SphericalBound, AlignedQueryUnitRows) {
  // Unit rows clustered tightly around e1: centroid direction e1, rho = 1.
  const auto t = test::make_table(1, 2, {1, 0}, {0});
  const auto index = build_index(t, {.num_clusters = 1, .mode = ClusteringMode::kSpherical});
  const std::vector<double> h{3.0, 0.0};
  EXPECT_DOUBLE_EQ(spherical_bounds(index, h).values[0], 3.0);
}

TEST(SphericalBound, ClampInsideCone) {
  const auto t = test::make_table(2, 2, {1, 0.2f, 1, -0.2f}, {0.5f, 0.1f});
  const auto index = build_index(t, {.num_clusters = 1, .mode = ClusteringMode::kSpherical});
  const auto& m = index.clusters[0];
  // phi = small angle below theta: cos term clamps to 1.
  const std::vector<double> h{2.0, 0.1};
  const double expect = m.row_norm_max * l2_norm(h) + m.max_bias;
  EXPECT_DOUBLE_EQ(spherical_bounds(index, h).values[0], expect);
}

TEST(SphericalBound, SoundOnUnitAndRawRows) {
  const auto unit = normalize_rows(synth_vocab(2000, 24, 20, 0.3, 8));
  const auto idx_unit = build_index(unit, {.num_clusters = 40, .mode = ClusteringMode::kSpherical, .seed = 1});
  EXPECT_EQ(count_violations(unit, idx_unit, BoundMode::kSpherical, 500, 9, 2.0), 0u);
  const auto raw = test::random_table(1500, 16, 4);
  const auto idx_raw = build_index(raw, {.num_clusters = 30, .mode = ClusteringMode::kSpherical, .seed = 1});
  EXPECT_EQ(count_violations(raw, idx_raw, BoundMode::kSpherical, 500, 10), 0u);
}

TEST(SphericalBound, RequiresSphericalIndex) {
  const auto t = test::random_table(50, 4, 1);
  const auto index = build_index(t, {.num_clusters = 5, .seed = 1});
  std::vector<double> h{1, 0, 0, 0};
  EXPECT_THROW(spherical_bounds(index, h), Error);
}

TEST(SphericalBound, TighterThanEuclideanOnUnitRows) {
  const auto t = normalize_rows(synth_vocab(3000, 32, 30, 0.15, 12));
  const auto index = build_index(t, {.num_clusters = 45, .mode = ClusteringMode::kSpherical, .seed = 2});
  std::mt19937_64 rng(17);
  double sum_e = 0, sum_s = 0;
  int n = 0;
  for (int q = 0; q < 300; ++q) {
    const auto h = test::random_query(32, rng);
    const auto ue = euclidean_bounds(index, h, l2_norm(h));
    const auto us = spherical_bounds(index, h);
    // Same opened set for both: the three clusters with the largest euclidean bound.
    CertState se(index.num_clusters(), 10), ss(index.num_clusters(), 10);
    std::vector<std::size_t> order(index.num_clusters());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return ue.values[a] > ue.values[b]; });
    const auto dense = dense_logits(t, h);
    for (int r = 0; r < 3; ++r) {
      const auto ids = index.members(order[r]);
      std::vector<double> l;
      for (TokenId id : ids) l.push_back(dense.logits[id]);
      se.open_cluster(order[r], ids, l);
      ss.open_cluster(order[r], ids, l);
    }
    const auto te = tightness(se, ue), ts = tightness(ss, us);
    if (!te.defined || !ts.defined) continue;
    sum_e += te.xi;
    sum_s += ts.xi;
    ++n;
  }
  ASSERT_GT(n, 100);
  EXPECT_GT(sum_s / n, sum_e / n);
  RecordProperty("mean_xi_euclidean", std::to_string(sum_e / n));
  RecordProperty("mean_xi_spherical", std::to_string(sum_s / n));
}

TEST(RefinedBias, EmptyExclusionIsEuclidean) {
  const auto t = synth_vocab(300, 8, 5, 0.2, 3);
  const auto index = build_index(t, {.num_clusters = 8, .seed = 1});
  std::mt19937_64 rng(1);
  const auto h = test::random_query(8, rng);
  const auto u = euclidean_bounds(index, h, l2_norm(h));
  for (std::size_t c = 0; c < 8; ++c)
    EXPECT_EQ(refined_bias_bound(index, t, c, h, l2_norm(h), {}), u.values[c]);
}

TEST(RefinedBias, ExcludingTopHolderUsesSecond) {
  const auto t = synth_vocab(300, 8, 5, 0.2, 3);
  const auto index = build_index(t, {.num_clusters = 8, .seed = 1});
  std::mt19937_64 rng(1);
  const auto h = test::random_query(8, rng);
  for (std::size_t c = 0; c < 8; ++c) {
    const auto& m = index.clusters[c];
    ASSERT_GE(m.bias_topm.size(), 2u);
    const double r = refined_bias_bound(index, t, c, h, l2_norm(h), {m.bias_topm[0].token});
    EXPECT_EQ(r, geometric_term(index, c, h, l2_norm(h)) + m.bias_topm[1].value);
  }
}

TEST(RefinedBias, SoundAfterExcludingTopHolders) {
  const auto t = synth_vocab(1000, 8, 5, 0.4, 4);
  const auto index = build_index(t, {.num_clusters = 20, .bias_depth = 2, .seed = 1});
  std::mt19937_64 rng(6);
  for (int q = 0; q < 100; ++q) {
    const auto h = test::random_query(8, rng);
    const auto dense = dense_logits(t, h);
    for (std::size_t c = 0; c < index.num_clusters(); ++c) {
      std::unordered_set<TokenId> ex;
      for (const auto& e : index.clusters[c].bias_topm) ex.insert(e.token);  // exhausts top-m
      const double r = refined_bias_bound(index, t, c, h, l2_norm(h), ex);
      for (TokenId id : index.members(c))
        if (!ex.contains(id)) { EXPECT_LE(dense.logits[id], r); }
    }
  }
}

TEST(RefinedBias, AllExcludedIsMinusInfinity) {
  const auto t = synth_vocab(40, 4, 2, 0.2, 4);
  const auto index = build_index(t, {.num_clusters = 20, .seed = 1});
  std::vector<double> h{1, 0, 0, 0};
  const auto mem = index.members(0);
  std::unordered_set<TokenId> ex(mem.begin(), mem.end());
  EXPECT_EQ(refined_bias_bound(index, t, 0, h, 1.0, ex), -INFINITY);
}

TEST(UncertifiedSpherical, ComputedButDistinct) {
  const auto t = normalize_rows(synth_vocab(200, 8, 4, 0.3, 1));
  const auto index = build_index(t, {.num_clusters = 6, .mode = ClusteringMode::kSpherical, .seed = 1});
  std::vector<double> h(8, 0.0);
  h[0] = 1.0;
  const auto u = spherical_uncertified_bounds(index, h);
  EXPECT_EQ(u.mode, BoundMode::kSphericalUncertified);
  for (double v : u.values) EXPECT_TRUE(std::isfinite(v));
}

TEST(Fp32Slack, ScalesWithQueryNorm) {
  const auto index = one_cluster({1.0, 0.0}, 0.5, 0.0);
  EXPECT_DOUBLE_EQ(fp32_slack(index, 2.0), 2.0 * fp32_slack(index, 1.0));
  EXPECT_GT(fp32_slack(index, 1.0), 0.0);
}

}  // namespace
}  // namespace csvd
