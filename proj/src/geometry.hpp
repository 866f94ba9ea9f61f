#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace csvd::detail {

/// Dot product accumulated left to right in double. Every exact logit in
/// the library goes through this loop order.
inline double dot(std::span<const float> w, std::span<const double> h) {
  double s = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) s += static_cast<double>(w[j]) * h[j];
  return s;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
  return s;
}

/// Angle in [0, pi] via 2 atan2(|a/|a| - b/|b||, |a/|a| + b/|b||); stays
/// accurate near 0 and pi where acos of the cosine does not. Inputs nonzero.
template <typename A, typename B>
double angle_between(std::span<const A> a, std::span<const B> b) {
  double na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) na += static_cast<double>(a[j]) * a[j];
  for (std::size_t j = 0; j < b.size(); ++j) nb += static_cast<double>(b[j]) * b[j];
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  double diff = 0.0, sum = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double x = static_cast<double>(a[j]) / na;
    const double y = static_cast<double>(b[j]) / nb;
    diff += (x - y) * (x - y);
    sum += (x + y) * (x + y);
  }
  return 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum));
}

}  // namespace csvd::detail
