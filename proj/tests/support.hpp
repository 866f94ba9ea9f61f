#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "csvd/tensor_io.hpp"

namespace csvd::test {

inline EmbeddingTable make_table(std::uint64_t V, std::uint64_t d, std::vector<float> w,
                                 std::vector<float> b) {
  EmbeddingTable t;
  t.vocab_size = V;
  t.hidden_dim = d;
  t.weights = std::move(w);
  t.bias = std::move(b);
  return t;
}

/// Unstructured table: N(0,1) rows, uniform [-1,1] biases.
inline EmbeddingTable random_table(std::uint64_t V, std::uint64_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  EmbeddingTable t;
  t.vocab_size = V;
  t.hidden_dim = d;
  t.weights.resize(V * d);
  t.bias.resize(V);
  for (auto& x : t.weights) x = static_cast<float>(g(rng));
  for (auto& x : t.bias) x = static_cast<float>(u(rng));
  return t;
}

inline std::vector<double> random_query(std::uint64_t d, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> h(d);
  for (auto& x : h) x = g(rng);
  return h;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("csvd_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace csvd::test
