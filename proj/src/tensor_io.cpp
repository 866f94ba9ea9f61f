#include "csvd/tensor_io.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include "binary.hpp"
#include "csvd/error.hpp"

namespace csvd {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kIo: return "io";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kVersionMismatch: return "version_mismatch";
    case ErrorCode::kTruncatedPayload: return "truncated_payload";
    case ErrorCode::kNonFiniteEntry: return "non_finite_entry";
    case ErrorCode::kUnsupportedDtype: return "unsupported_dtype";
    case ErrorCode::kDimensionMismatch: return "dimension_mismatch";
    case ErrorCode::kFingerprintMismatch: return "fingerprint_mismatch";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kValidation: return "validation";
  }
  return "unknown";
}

namespace detail {

Fingerprint sha256(std::span<const std::uint8_t> bytes) {
  Fingerprint out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != out.size())
    throw Error(ErrorCode::kIo, "sha256 digest failed");
  return out;
}

}  // namespace detail

namespace {

constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

}  // namespace

std::string to_hex(const Fingerprint& fp) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (auto b : fp) {
    s.push_back(kDigits[b >> 4]);
    s.push_back(kDigits[b & 0xF]);
  }
  return s;
}

void EmbeddingTable::validate() const {
  if (vocab_size < 1 || hidden_dim < 1)
    throw Error(ErrorCode::kInvalidArgument, "V and d must be positive");
  if (weights.size() != vocab_size * hidden_dim || bias.size() != vocab_size)
    throw Error(ErrorCode::kInvalidArgument, "weights/bias size does not match V x d");
  for (std::size_t i = 0; i < weights.size(); ++i)
    if (!std::isfinite(weights[i]))
      throw Error(ErrorCode::kNonFiniteEntry, "weight entry " + std::to_string(i));
  for (std::size_t i = 0; i < bias.size(); ++i)
    if (!std::isfinite(bias[i]))
      throw Error(ErrorCode::kNonFiniteEntry, "bias entry " + std::to_string(i));
}

Fingerprint EmbeddingTable::fingerprint() const { return detail::sha256(serialize_table(*this)); }

void QueryBatch::push_back(std::vector<double> h) {
  if (hidden_dim == 0) hidden_dim = h.size();
  if (h.size() != hidden_dim)
    throw Error(ErrorCode::kDimensionMismatch, "query length differs from batch dimension");
  norms.push_back(l2_norm(h));
  states.push_back(std::move(h));
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::vector<std::uint8_t> serialize_table(const EmbeddingTable& table) {
  table.validate();
  detail::ByteWriter w;
  w.magic("CSVD");
  w.put<std::uint32_t>(kFormatVersion);
  w.put<std::uint64_t>(table.vocab_size);
  w.put<std::uint64_t>(table.hidden_dim);
  w.put<std::uint8_t>(kDtypeF32);
  w.zeros(7);
  w.put_all<float>(table.weights);
  w.put_all<float>(table.bias);
  return w.take();
}

EmbeddingTable parse_table(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic("CSVD");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion)
    throw Error(ErrorCode::kVersionMismatch, "CSVD version " + std::to_string(version));
  EmbeddingTable t;
  t.vocab_size = r.get<std::uint64_t>();
  t.hidden_dim = r.get<std::uint64_t>();
  const auto dtype = r.get<std::uint8_t>();
  if (dtype != kDtypeF32)
    throw Error(ErrorCode::kUnsupportedDtype, "dtype " + std::to_string(dtype));
  r.skip(7);
  if (t.vocab_size < 1 || t.hidden_dim < 1)
    throw Error(ErrorCode::kInvalidArgument, "V and d must be positive");
  // Size check before allocating so a corrupt header cannot request terabytes.
  const std::uint64_t count = t.vocab_size * t.hidden_dim;
  if (count / t.hidden_dim != t.vocab_size || count > r.remaining() / sizeof(float))
    r.need(r.remaining() + 1);
  t.weights.resize(count);
  r.get_all<float>(t.weights);
  t.bias.resize(t.vocab_size);
  r.get_all<float>(t.bias);
  r.expect_end();
  t.validate();
  return t;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

EmbeddingTable load_embedding_table(const std::filesystem::path& path) {
  return parse_table(read_file(path));
}

void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& path) {
  write_file(path, serialize_table(table));
}

std::vector<std::uint8_t> serialize_queries(const QueryBatch& batch) {
  detail::ByteWriter w;
  w.magic("CSVH");
  w.put<std::uint32_t>(kFormatVersion);
  w.put<std::uint64_t>(batch.size());
  w.put<std::uint64_t>(batch.hidden_dim);
  for (const auto& h : batch.states)
    for (double x : h) w.put<float>(static_cast<float>(x));
  return w.take();
}

QueryBatch parse_queries(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic("CSVH");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion)
    throw Error(ErrorCode::kVersionMismatch, "CSVH version " + std::to_string(version));
  const auto count = r.get<std::uint64_t>();
  const auto dim = r.get<std::uint64_t>();
  if (dim == 0 || count > r.remaining() / sizeof(float) / dim) r.need(r.remaining() + 1);
  QueryBatch batch;
  batch.hidden_dim = dim;
  std::vector<float> buf(dim);
  for (std::uint64_t q = 0; q < count; ++q) {
    r.get_all<float>(buf);
    std::vector<double> h(buf.begin(), buf.end());
    for (std::size_t j = 0; j < h.size(); ++j)
      if (!std::isfinite(h[j]))
        throw Error(ErrorCode::kNonFiniteEntry,
                    "query " + std::to_string(q) + " entry " + std::to_string(j));
    batch.push_back(std::move(h));
  }
  r.expect_end();
  return batch;
}

QueryBatch load_queries(const std::filesystem::path& path) { return parse_queries(read_file(path)); }

void save_queries(const QueryBatch& batch, const std::filesystem::path& path) {
  write_file(path, serialize_queries(batch));
}

EmbeddingTable synth_vocab(std::uint64_t vocab_size, std::uint64_t hidden_dim,
                           std::uint64_t n_modes, double spread, std::uint64_t seed) {
  if (vocab_size < 1 || hidden_dim < 1)
    throw Error(ErrorCode::kInvalidArgument, "V and d must be positive");
  if (n_modes < 1 || n_modes > vocab_size)
    throw Error(ErrorCode::kInvalidArgument, "n_modes must be in [1, V]");
  if (!(spread >= 0.0) || !std::isfinite(spread))
    throw Error(ErrorCode::kInvalidArgument, "spread must be finite and nonnegative");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<float> centers(n_modes * hidden_dim);
  for (auto& c : centers) c = static_cast<float>(gauss(rng));

  EmbeddingTable t;
  t.vocab_size = vocab_size;
  t.hidden_dim = hidden_dim;
  t.weights.resize(vocab_size * hidden_dim);
  t.bias.resize(vocab_size);

  std::uniform_int_distribution<std::uint64_t> pick(0, n_modes - 1);
  for (std::uint64_t i = 0; i < vocab_size; ++i) {
    const std::uint64_t mode = pick(rng);
    for (std::uint64_t j = 0; j < hidden_dim; ++j) {
      const double noise = spread == 0.0 ? 0.0 : spread * gauss(rng);
      t.weights[i * hidden_dim + j] =
          static_cast<float>(static_cast<double>(centers[mode * hidden_dim + j]) + noise);
    }
  }
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  for (auto& b : t.bias) b = static_cast<float>(unif(rng));
  return t;
}

EmbeddingTable normalize_rows(const EmbeddingTable& table) {
  EmbeddingTable out = table;
  for (std::uint64_t i = 0; i < table.vocab_size; ++i) {
    double s = 0.0;
    for (float w : table.row(i)) s += static_cast<double>(w) * w;
    if (s == 0.0) continue;
    const double inv = 1.0 / std::sqrt(s);
    for (std::uint64_t j = 0; j < table.hidden_dim; ++j)
      out.weights[i * table.hidden_dim + j] =
          static_cast<float>(static_cast<double>(table.weights[i * table.hidden_dim + j]) * inv);
  }
  return out;
}

}  // namespace csvd
