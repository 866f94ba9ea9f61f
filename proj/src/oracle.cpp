#include "csvd/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "csvd/error.hpp"

namespace csvd {

namespace {

std::vector<std::uint8_t> membership(std::size_t V, std::span<const TokenId> sub) {
  std::vector<std::uint8_t> in(V, 0);
  for (TokenId t : sub) {
    if (t >= V) throw Error(ErrorCode::kInvalidArgument, "token id out of range");
    if (in[t]) throw Error(ErrorCode::kInvalidArgument, "repeated token id in sub-vocabulary");
    in[t] = 1;
  }
  return in;
}

}  // namespace

std::vector<TokenId> DenseResult::top_k(std::size_t k) const {
  std::vector<TokenId> ids(logits.size());
  std::iota(ids.begin(), ids.end(), TokenId{0});
  k = std::min(k, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                    [&](TokenId a, TokenId b) {
                      return logits[a] != logits[b] ? logits[a] > logits[b] : a < b;
                    });
  ids.resize(k);
  return ids;
}

DenseResult dense_logits(const EmbeddingTable& table, std::span<const double> h) {
  if (h.size() != table.hidden_dim)
    throw Error(ErrorCode::kDimensionMismatch, "query length does not match table");
  DenseResult r;
  r.logits.resize(table.vocab_size);
  const std::size_t d = table.hidden_dim;
  for (std::size_t i = 0; i < table.vocab_size; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      acc += static_cast<double>(table.weights[i * d + j]) * h[j];
    r.logits[i] = acc + static_cast<double>(table.bias[i]);
  }
  const double m = *std::max_element(r.logits.begin(), r.logits.end());
  r.probs.resize(r.logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < r.logits.size(); ++i) {
    r.probs[i] = std::exp(r.logits[i] - m);
    z += r.probs[i];
  }
  for (double& p : r.probs) p /= z;
  r.log_z = m + std::log(z);
  return r;
}

TvResult tv_distance(const DenseResult& full, std::span<const TokenId> sub) {
  if (sub.empty()) throw Error(ErrorCode::kInvalidArgument, "empty sub-vocabulary");
  const auto in = membership(full.logits.size(), sub);

  // p and p~ share each numerator e^l_i, so the difference is taken as
  // e_i * (1/Z_S - 1/Z) per token. Forming p_i and p~_i separately in double
  // would cancel to ~1e-16 absolute and could not resolve a tiny TV to 1e-9
  // relative. Sums run in quad precision.
  using quad = __float128;
  long double m_sub = -INFINITY;
  for (TokenId t : sub) m_sub = std::max<long double>(m_sub, full.logits[t]);
  std::vector<long double> e(full.logits.size());
  quad z_sub = 0, z_all = 0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    e[i] = std::exp(static_cast<long double>(full.logits[i]) - m_sub);
    z_all += e[i];
    if (in[i]) z_sub += e[i];
  }
  const quad gap = 1 / z_sub - 1 / z_all;
  quad l1 = 0;
  for (std::size_t i = 0; i < e.size(); ++i) l1 += in[i] ? e[i] * gap : e[i] / z_all;
  TvResult out;
  out.direct = static_cast<double>(l1 / 2);

  const double m = *std::max_element(full.logits.begin(), full.logits.end());
  double zs = 0.0, rest = 0.0;
  for (std::size_t i = 0; i < full.logits.size(); ++i)
    (in[i] ? zs : rest) += std::exp(full.logits[i] - m);
  out.closed_form = rest / (zs + rest);
  return out;
}

double external_mass(const DenseResult& full, std::span<const TokenId> sub) {
  const auto in = membership(full.logits.size(), sub);
  double mass = 0.0;
  for (std::size_t i = 0; i < full.probs.size(); ++i)
    if (!in[i]) mass += full.probs[i];
  return mass;
}

}  // namespace csvd
