#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace csvd {

using TokenId = std::uint64_t;
using Fingerprint = std::array<std::uint8_t, 32>;

std::string to_hex(const Fingerprint& fp);

/// Output-layer weights W (V x d, row-major) and bias b (length V).
///
/// Stored at 32-bit, matching the on-disk format. All arithmetic that feeds
/// bounds or certificates promotes to double.
struct EmbeddingTable {
  std::uint64_t vocab_size = 0;
  std::uint64_t hidden_dim = 0;
  std::vector<float> weights;
  std::vector<float> bias;

  std::span<const float> row(TokenId i) const {
    return {weights.data() + i * hidden_dim, hidden_dim};
  }

  /// Throws Error(kInvalidArgument / kNonFiniteEntry) on a broken invariant.
  void validate() const;

  /// SHA-256 over the serialized CSVD bytes.
  Fingerprint fingerprint() const;
};

/// Hidden states h_t with their L2 norms.
struct QueryBatch {
  std::uint64_t hidden_dim = 0;
  std::vector<std::vector<double>> states;
  std::vector<double> norms;

  std::size_t size() const { return states.size(); }
  void push_back(std::vector<double> h);
};

double l2_norm(std::span<const double> v);

std::vector<std::uint8_t> serialize_table(const EmbeddingTable& table);
EmbeddingTable parse_table(std::span<const std::uint8_t> bytes);
EmbeddingTable load_embedding_table(const std::filesystem::path& path);
void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& path);

/// Queries are written at 32-bit; norms are recomputed on load.
std::vector<std::uint8_t> serialize_queries(const QueryBatch& batch);
QueryBatch parse_queries(std::span<const std::uint8_t> bytes);
QueryBatch load_queries(const std::filesystem::path& path);
void save_queries(const QueryBatch& batch, const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// Gaussian-mixture vocabulary: n_modes centers with N(0, 1) coordinates,
/// each row a uniformly chosen center plus N(0, spread^2) per coordinate
/// noise. Biases are uniform in [-1, 1].
EmbeddingTable synth_vocab(std::uint64_t vocab_size, std::uint64_t hidden_dim,
                           std::uint64_t n_modes, double spread, std::uint64_t seed);

/// Copy with every nonzero row scaled to unit L2 norm.
EmbeddingTable normalize_rows(const EmbeddingTable& table);

}  // namespace csvd
