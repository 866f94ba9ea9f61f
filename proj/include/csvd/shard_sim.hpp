#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "csvd/cluster_index.hpp"
#include "csvd/decode.hpp"
#include "json.hpp"

namespace csvd {

enum class ShardStrategy { kRoundRobin, kHotnessWeighted, kSemanticGrouped };

const char* to_string(ShardStrategy s);
ShardStrategy parse_shard_strategy(const std::string& s);

struct ShardPlan {
  std::size_t workers = 1;
  ShardStrategy strategy = ShardStrategy::kRoundRobin;
  /// assignment[c] = worker owning cluster c.
  std::vector<std::uint32_t> assignment;
  std::vector<std::uint64_t> tokens_per_worker;
  /// Hotness-weighted tokens when weights were given, else token counts.
  std::vector<double> load_per_worker;
  /// Standard deviation of load divided by its mean.
  double sigma_load = 0.0;

  std::vector<std::size_t> clusters_of(std::size_t worker) const;
};

/// round_robin: c mod N. hotness_weighted: clusters by descending
/// hotness * size go to the least-loaded worker. semantic_grouped: k-means
/// over the centroids, one group per worker.
ShardPlan make_plan(const ClusterIndex& index, std::size_t workers, ShardStrategy strategy,
                    std::optional<std::span<const double>> hotness = std::nullopt,
                    std::uint64_t seed = 0);

nlohmann::json plan_to_json(const ShardPlan& plan);
ShardPlan plan_from_json(const nlohmann::json& j);
void save_plan(const ShardPlan& plan, const std::filesystem::path& path);
ShardPlan load_plan(const std::filesystem::path& path);

/// Abstract cost units: latency = flops / flops_per_unit + bytes / bytes_per_unit.
struct LatencyModel {
  double flops_per_unit = 1.0e6;
  double bytes_per_unit = 1.0e5;
};

struct CommLedger {
  /// C * 4 bytes for the bound all-reduce (0 on one worker).
  std::uint64_t bytes_bounds_phase = 0;
  /// |S_t| * (2d + 4) bytes for the logit all-gather (0 on one worker).
  std::uint64_t bytes_logits_phase = 0;
  std::uint64_t bytes_total = 0;
  double latency_bounds = 0.0;
  double latency_sparse = 0.0;
  double latency_verify = 0.0;
  double latency_comm = 0.0;
  double latency_total = 0.0;
  /// latency_comm / latency_total.
  double overhead = 0.0;
  std::vector<std::uint64_t> worker_flops;
};

struct ShardedOutcome {
  DecodeOutcome outcome;
  CommLedger ledger;
};

/// Phase-locked batch-select decode across plan.workers logical workers,
/// executed in worker-id order. The outcome equals
/// Engine::decode_step_batchselect for any plan.
ShardedOutcome sharded_decode_step(const Engine& engine, const ShardPlan& plan,
                                   std::span<const double> h, const DecodeConfig& cfg,
                                   std::uint64_t budget, const LatencyModel& latency = {});
ShardedOutcome sharded_decode_step(const Engine& engine, const ShardPlan& plan,
                                   std::span<const double> h, const DecodeConfig& cfg,
                                   const LatencyModel& latency = {});

/// Zipf(s) weights over clusters in a seeded random order.
std::vector<double> zipf_hotness(std::size_t num_clusters, double exponent, std::uint64_t seed);

}  // namespace csvd
