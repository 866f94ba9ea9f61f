#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "csvd/certify.hpp"
#include "csvd/error.hpp"

namespace csvd {
namespace {

// Index with the given cluster sizes; geometry is irrelevant to certify.
ClusterIndex sized_index(const std::vector<std::uint64_t>& sizes) {
  ClusterIndex index;
  std::uint64_t pos = 0;
  for (auto s : sizes) {
    ClusterMeta m;
    m.begin = pos;
    m.end = pos + s;
    pos += s;
    index.clusters.push_back(m);
  }
  index.vocab_size = pos;
  for (std::uint64_t i = 0; i < pos; ++i) index.permutation.push_back(i);
  index.rebuild_inverse();
  return index;
}

BoundVector bounds_of(std::vector<double> v) {
  BoundVector b;
  b.values = std::move(v);
  return b;
}

TEST(TopkCertified, StrictDominance) {
  const auto index = sized_index({3, 1, 1});
  CertState s(3, 2);
  s.open_cluster(0, std::vector<TokenId>{0, 1, 2}, std::vector<double>{5, 3, 1});
  EXPECT_EQ(s.topk_min(), 3.0);
  auto r = topk_certified(s, bounds_of({9.0, 2.9, 1.0}), 2);
  EXPECT_TRUE(r.certified);
  EXPECT_EQ(r.u_max, 2.9);
  r = topk_certified(s, bounds_of({9.0, 3.0, 1.0}), 2);
  EXPECT_FALSE(r.certified) << "a tie must not certify";
}

TEST(TopkCertified, NeedsKTokens) {
  CertState s(2, 3);
  s.open_cluster(0, std::vector<TokenId>{0, 1}, std::vector<double>{5, 4});
  EXPECT_EQ(s.topk_min(), -INFINITY);
  EXPECT_FALSE(topk_certified(s, bounds_of({0, -100}), 3).certified);
}

TEST(TopkCertified, AllOpenCertifies) {
  CertState s(1, 1);
  s.open_cluster(0, std::vector<TokenId>{0}, std::vector<double>{0.0});
  EXPECT_TRUE(topk_certified(s, bounds_of({100.0}), 1).certified);
}

TEST(CertState, TopkMinTracksKthLargest) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  CertState s(50, 7);
  std::vector<double> all;
  for (std::size_t c = 0; c < 50; ++c) {
    std::vector<double> l(1 + c % 5);
    std::vector<TokenId> ids(l.size());
    for (auto& x : l) x = g(rng);
    s.open_cluster(c, ids, l);
    all.insert(all.end(), l.begin(), l.end());
    std::vector<double> sorted = all;
    std::sort(sorted.rbegin(), sorted.rend());
    EXPECT_EQ(s.topk_min(), sorted.size() >= 7 ? sorted[6] : -INFINITY);
  }
}

TEST(CertState, StreamingLogZMatchesRecomputation) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0.0, 5.0);
  const std::size_t C = 300;
  CertState s(C, 1);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> l(1 + c % 9);
    for (auto& x : l) x = g(rng);
    s.open_cluster(c, std::vector<TokenId>(l.size()), l);
    const double full = s.recompute_log_z();
    EXPECT_NEAR(s.log_z(), full, 1e-10 * std::max(1.0, std::abs(full)));
  }
}

TEST(CertState, ReopeningRejected) {
  CertState s(2, 1);
  s.open_cluster(0, std::vector<TokenId>{0}, std::vector<double>{1});
  EXPECT_THROW(s.open_cluster(0, std::vector<TokenId>{0}, std::vector<double>{1}), Error);
}

TEST(SoftmaxEps, HandArithmetic) {
  const auto index = sized_index({1, 2});
  CertState s(2, 1);
  s.open_cluster(0, std::vector<TokenId>{0}, std::vector<double>{0.0});
  s.refresh_residual(bounds_of({0.0, std::log(0.01)}), index);
  EXPECT_NEAR(std::exp(s.log_residual()), 0.02, 1e-15);
  const auto r = softmax_eps_certified(s, 0.05);
  EXPECT_NEAR(r.rho, 0.02 / 1.02, 1e-15);
  EXPECT_TRUE(r.certified);
  EXPECT_FALSE(softmax_eps_certified(s, 0.019).certified);
}

TEST(SoftmaxEps, ExhaustedResidual) {
  const auto index = sized_index({2});
  CertState s(1, 1);
  s.open_cluster(0, std::vector<TokenId>{0, 1}, std::vector<double>{1.0, -3.0});
  s.refresh_residual(bounds_of({50.0}), index);
  const auto r = softmax_eps_certified(s, 1e-9);
  EXPECT_EQ(r.rho, 0.0);
  EXPECT_TRUE(r.certified);
  EXPECT_EQ(topp_certified(s, 1e-9).delta, 0.0);
}

TEST(SoftmaxEps, RejectsEpsOutsideUnitInterval) {
  CertState s(1, 1);
  EXPECT_THROW(softmax_eps_certified(s, 0.0), Error);
  EXPECT_THROW(softmax_eps_certified(s, 1.0), Error);
  EXPECT_THROW(topp_certified(s, -0.1), Error);
}

TEST(SoftmaxEps, EmptyStateNeverCertifies) {
  CertState s(1, 1);
  EXPECT_FALSE(softmax_eps_certified(s, 0.5).certified);
  EXPECT_FALSE(topp_certified(s, 0.5).certified);
}

TEST(ToppMass, ThresholdFormula) {
  // delta <= eps / (1 - eps); at eps = 0.05 the threshold is 1/19.
  const auto index = sized_index({1, 1});
  CertState s(2, 1);
  s.open_cluster(0, std::vector<TokenId>{0}, std::vector<double>{0.0});
  s.refresh_residual(bounds_of({0.0, std::log(0.0526)}), index);
  EXPECT_TRUE(topp_certified(s, 0.05).certified);
  s.refresh_residual(bounds_of({0.0, std::log(0.0527)}), index);
  EXPECT_FALSE(topp_certified(s, 0.05).certified);
  EXPECT_NEAR(0.05 / 0.95, 0.0526315789473684, 1e-15);
}

TEST(Residual, MonotoneUnderOpening) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  std::vector<std::uint64_t> sizes(40);
  for (auto& s : sizes) s = 1 + rng() % 6;
  const auto index = sized_index(sizes);
  std::vector<double> u(40);
  for (auto& x : u) x = g(rng) + 3.0;
  const auto b = bounds_of(u);
  CertState s(40, 1);
  s.refresh_residual(b, index);
  double prev_r = s.log_residual(), prev_z = s.log_z(), prev_rho = 1.0;
  for (std::size_t c = 0; c < 40; ++c) {
    std::vector<double> l(sizes[c]);
    for (auto& x : l) x = u[c] - std::abs(g(rng));
    s.open_cluster(c, std::vector<TokenId>(l.size()), l);
    s.refresh_residual(b, index);
    EXPECT_LT(s.log_residual(), prev_r);
    EXPECT_GE(s.log_z(), prev_z);
    const double rho = softmax_eps_certified(s, 0.5).rho;
    EXPECT_LE(rho, prev_rho);
    prev_r = s.log_residual();
    prev_z = s.log_z();
    prev_rho = rho;
  }
  EXPECT_EQ(s.log_residual(), -INFINITY);
}

TEST(Residual, ClusterwiseBelowLooseEnvelope) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  const auto index = sized_index({4, 3, 8, 1, 6});
  std::vector<double> u{1.0, 2.5, -1.0, 0.3, 2.0};
  CertState s(5, 1);
  s.open_cluster(1, std::vector<TokenId>{0, 1, 2}, std::vector<double>{2.0, 1.0, 0.0});
  s.refresh_residual(bounds_of(u), index);
  // |S-bar| exp(U_max) over unopened clusters.
  const double loose = std::log(4.0 + 8 + 1 + 6) + 2.0;
  EXPECT_LE(s.log_residual(), loose);
}

TEST(Tightness, FormulaAndDominated) {
  const auto index = sized_index({2, 1});
  CertState s(2, 1);
  s.open_cluster(0, std::vector<TokenId>{0, 1}, std::vector<double>{4.0, 1.0});
  auto t = tightness(s, bounds_of({0.0, 5.0}));
  EXPECT_TRUE(t.defined);
  EXPECT_DOUBLE_EQ(t.xi, 0.75);
  t = tightness(s, bounds_of({0.0, 4.0}));
  EXPECT_DOUBLE_EQ(t.xi, 1.0);
  EXPECT_FALSE(t.dominated);
  t = tightness(s, bounds_of({0.0, 0.5}));
  EXPECT_TRUE(t.dominated);
  EXPECT_EQ(t.xi, 1.0);
}

TEST(Tightness, UndefinedCases) {
  CertState s(1, 1);
  s.open_cluster(0, std::vector<TokenId>{0, 1}, std::vector<double>{4.0, 1.0});
  EXPECT_FALSE(tightness(s, bounds_of({9.0})).defined);
}

TEST(CertKindNames, RoundTrip) {
  for (auto k : {CertKind::kTopkExact, CertKind::kSoftmaxEps, CertKind::kToppMass})
    EXPECT_EQ(parse_cert_kind(to_string(k)), k);
  EXPECT_EQ(parse_cert_kind("topk"), CertKind::kTopkExact);
  EXPECT_THROW(parse_cert_kind("bogus"), Error);
}

}  // namespace
}  // namespace csvd
