#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "csvd/cluster_index.hpp"
#include "csvd/decode.hpp"
#include "csvd/error.hpp"
#include "csvd/shard_sim.hpp"
#include "json.hpp"

namespace csvd {

inline constexpr int kReportSchemaVersion = 1;

struct SynthSpec {
  std::uint64_t vocab_size = 5000;
  std::uint64_t hidden_dim = 64;
  std::uint64_t n_modes = 50;
  double spread = 0.05;
  std::uint64_t seed = 1;
  bool unit_rows = false;
};

enum class QueryModel { kRandom, kContextual };

struct QuerySpec {
  QueryModel model = QueryModel::kContextual;
  /// Per-coordinate noise added to the chosen centroid (contextual only).
  double spread = 0.5;
  /// Zipf exponent over cluster ids (contextual only).
  double zipf_exponent = 1.1;
  /// Final query norm.
  double scale = 1.0;
};

enum class DecodePath { kIncremental, kBatchSelect, kSharded };

const char* to_string(DecodePath p);
DecodePath parse_decode_path(const std::string& s);

struct ShardSpec {
  std::size_t workers = 1;
  ShardStrategy strategy = ShardStrategy::kRoundRobin;
  double hotness_exponent = 1.1;
};

/// Everything a run depends on. Serialized verbatim into every report and
/// accepted back as a config file.
struct BenchConfig {
  std::optional<std::string> table_path;  // otherwise synth
  SynthSpec synth;
  BuildParams index;
  DecodeConfig decode;
  QuerySpec queries;
  DecodePath path = DecodePath::kIncremental;
  ShardSpec shard;
  std::uint64_t n_steps = 2000;
  std::uint64_t seed = 42;
  /// Warmup restarts every sequence_length steps; 0 = one sequence.
  std::uint64_t sequence_length = 0;
  bool validate = true;
};

/// The default desk-scale workload: V=5000, d=64, 50 modes, C=75
/// (0.015 V), eps=0.05, k=10, 2000 contextual steps.
BenchConfig default_bench_config();

nlohmann::json config_to_json(const BenchConfig& cfg);
/// Fields absent from `j` keep their value in `base`.
BenchConfig config_from_json(const nlohmann::json& j, BenchConfig base = default_bench_config());

struct StepRecord {
  std::uint64_t step = 0;
  double ratio = 0.0;
  double xi = 0.0;
  bool xi_defined = false;
  CertKind cert_kind = CertKind::kUncertified;
  bool relaxed = false;
  std::optional<FallbackKind> fallback;
  double rho = 0.0;
  std::uint64_t flops_sparse = 0;
  std::uint64_t flops_bounds = 0;
  std::size_t clusters_opened = 0;
  std::size_t sub_size = 0;
  std::uint64_t budget = 0;
  double fallback_ema = 0.0;
};

struct Summary {
  double mean = 0.0, p50 = 0.0, p95 = 0.0;
  std::size_t count = 0;
};

Summary summarize(std::vector<double> values);

struct Aggregates {
  Summary ratio;
  Summary xi;
  double rho_cert = 0.0;
  double rho_fall = 0.0;
  double mean_sub_size = 0.0;
  double mean_speedup_proxy = 0.0;
  /// 2Vd / (2Cd + 2 mean|S| d).
  double speedup_proxy_at_mean = 0.0;
  double final_fallback_ema = 0.0;
  std::uint64_t final_budget = 0;
  std::uint64_t count_topk = 0, count_softmax = 0, count_topp = 0, count_relaxed = 0;
  std::uint64_t count_partial = 0, count_relax = 0, count_full = 0;
};

struct ValidationTally {
  std::uint64_t steps_validated = 0;
  std::uint64_t violations = 0;
  std::uint64_t topk_checked = 0, softmax_checked = 0, topp_checked = 0;
  double max_tv_identity_rel_diff = 0.0;
};

/// Per-step means of the communication ledger (sharded path only).
struct ShardSummary {
  double sigma_load = 0.0;
  double mean_bytes_bounds = 0.0;
  double mean_bytes_logits = 0.0;
  double mean_latency_total = 0.0;
  double mean_overhead = 0.0;
};

struct RunReport {
  BenchConfig config;
  std::optional<ShardSummary> shard;
  std::vector<StepRecord> steps;
  Aggregates aggregates;
  ValidationTally validation;
  Fingerprint outcome_digest{};
  std::uint64_t vocab_size = 0, hidden_dim = 0, num_clusters = 0;
  double mean_radius = 0.0;
};

/// Thrown when a returned outcome disagrees with the dense oracle.
class ValidationFailure : public Error {
 public:
  ValidationFailure(const std::string& what, nlohmann::json diagnostic)
      : Error(ErrorCode::kValidation, what), diagnostic_(std::move(diagnostic)) {}
  const nlohmann::json& diagnostic() const { return diagnostic_; }

 private:
  nlohmann::json diagnostic_;
};

/// Checks one outcome against the dense oracle; returns diagnostics for
/// every violated property (empty when sound).
std::vector<std::string> check_outcome(const EmbeddingTable& table, std::span<const double> h,
                                       const DecodeOutcome& outcome, std::size_t k,
                                       ValidationTally* tally = nullptr);

/// Deterministic query stream for a workload.
QueryBatch make_queries(const ClusterIndex& index, const QuerySpec& spec, std::uint64_t n,
                        std::uint64_t seed);

/// Builds the table described by cfg (synthetic or loaded).
EmbeddingTable make_table(const BenchConfig& cfg);

RunReport run_benchmark(const BenchConfig& cfg);
/// Same, over an existing table and index.
RunReport run_benchmark(const BenchConfig& cfg, const EmbeddingTable& table,
                        const ClusterIndex& index);

nlohmann::json report_to_json(const RunReport& report);
std::string report_to_csv(const RunReport& report);
/// Writes report.json and report.csv into dir.
void write_report(const RunReport& report, const std::filesystem::path& dir);

enum class SweepAxis { kClusters, kEpsilon, kBudget, kBoundMode, kShardN };

const char* to_string(SweepAxis a);
SweepAxis parse_sweep_axis(const std::string& s);

struct SweepRow {
  std::string value;
  RunReport report;
};

struct SweepResult {
  SweepAxis axis;
  std::vector<SweepRow> rows;
  /// Expectations that hold by construction (e.g. rho_cert non-decreasing
  /// in eps on a fixed stream). Empty when all hold.
  std::vector<std::string> monotone_violations;
};

SweepResult ablation_sweep(SweepAxis axis, const std::vector<std::string>& values,
                           const BenchConfig& base);
std::string sweep_to_csv(const SweepResult& sweep);

}  // namespace csvd
