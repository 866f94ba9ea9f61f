#pragma once

#include <span>
#include <vector>

#include "csvd/tensor_io.hpp"

namespace csvd {

/// Dense reference: every logit, exact softmax.
struct DenseResult {
  std::vector<double> logits;
  std::vector<double> probs;
  double log_z = 0.0;

  /// Token ids ordered by (logit desc, id asc), first k.
  std::vector<TokenId> top_k(std::size_t k) const;
};

/// l_i = <W_i, h> + b_i in double, left-to-right over the hidden dimension,
/// then a max-shifted softmax. Deliberately unoptimized.
DenseResult dense_logits(const EmbeddingTable& table, std::span<const double> h);

struct TvResult {
  /// 1/2 sum_i |p_i - p~_i| with p~ renormalized over the sub-vocabulary.
  double direct = 0.0;
  /// R / (Z_S + R) from the same logits.
  double closed_form = 0.0;
};

/// Throws on an empty sub-vocabulary or invalid / repeated ids.
TvResult tv_distance(const DenseResult& full, std::span<const TokenId> sub);

/// True probability mass outside the sub-vocabulary.
double external_mass(const DenseResult& full, std::span<const TokenId> sub);

}  // namespace csvd
