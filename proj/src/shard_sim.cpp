#include "csvd/shard_sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "csvd/error.hpp"

namespace csvd {

const char* to_string(ShardStrategy s) {
  switch (s) {
    case ShardStrategy::kRoundRobin: return "round_robin";
    case ShardStrategy::kHotnessWeighted: return "hotness_weighted";
    case ShardStrategy::kSemanticGrouped: return "semantic_grouped";
  }
  return "unknown";
}

ShardStrategy parse_shard_strategy(const std::string& s) {
  if (s == "round_robin") return ShardStrategy::kRoundRobin;
  if (s == "hotness_weighted") return ShardStrategy::kHotnessWeighted;
  if (s == "semantic_grouped") return ShardStrategy::kSemanticGrouped;
  throw Error(ErrorCode::kInvalidArgument, "unknown shard strategy '" + s + "'");
}

std::vector<std::size_t> ShardPlan::clusters_of(std::size_t worker) const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < assignment.size(); ++c)
    if (assignment[c] == worker) out.push_back(c);
  return out;
}

namespace {

void fill_load(const ClusterIndex& index, std::optional<std::span<const double>> hotness,
               ShardPlan& plan) {
  plan.tokens_per_worker.assign(plan.workers, 0);
  plan.load_per_worker.assign(plan.workers, 0.0);
  for (std::size_t c = 0; c < plan.assignment.size(); ++c) {
    const auto size = index.clusters[c].size();
    plan.tokens_per_worker[plan.assignment[c]] += size;
    const double w = hotness ? (*hotness)[c] : 1.0;
    plan.load_per_worker[plan.assignment[c]] += w * static_cast<double>(size);
  }
  const double n = static_cast<double>(plan.workers);
  const double mean =
      std::accumulate(plan.load_per_worker.begin(), plan.load_per_worker.end(), 0.0) / n;
  double var = 0.0;
  for (double l : plan.load_per_worker) var += (l - mean) * (l - mean);
  plan.sigma_load = mean > 0.0 ? std::sqrt(var / n) / mean : 0.0;
}

}  // namespace

ShardPlan make_plan(const ClusterIndex& index, std::size_t workers, ShardStrategy strategy,
                    std::optional<std::span<const double>> hotness, std::uint64_t seed) {
  if (workers < 1) throw Error(ErrorCode::kInvalidArgument, "worker count must be >= 1");
  const std::size_t C = index.num_clusters();
  if (hotness && hotness->size() != C)
    throw Error(ErrorCode::kInvalidArgument, "hotness needs one weight per cluster");

  ShardPlan plan;
  plan.workers = workers;
  plan.strategy = strategy;
  plan.assignment.resize(C);

  switch (strategy) {
    case ShardStrategy::kRoundRobin:
      for (std::size_t c = 0; c < C; ++c) plan.assignment[c] = static_cast<std::uint32_t>(c % workers);
      break;
    case ShardStrategy::kHotnessWeighted: {
      if (!hotness)
        throw Error(ErrorCode::kInvalidArgument, "hotness_weighted needs per-cluster weights");
      std::vector<double> work(C);
      for (std::size_t c = 0; c < C; ++c)
        work[c] = (*hotness)[c] * static_cast<double>(index.clusters[c].size());
      std::vector<std::size_t> order(C);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return work[a] > work[b]; });
      std::vector<double> load(workers, 0.0);
      for (std::size_t c : order) {
        const auto g = static_cast<std::size_t>(std::min_element(load.begin(), load.end()) - load.begin());
        plan.assignment[c] = static_cast<std::uint32_t>(g);
        load[g] += work[c];
      }
      break;
    }
    case ShardStrategy::kSemanticGrouped: {
      const std::size_t groups = std::min(workers, C);
      const std::size_t dim = index.centroid_dim();
      std::vector<double> points;
      points.reserve(C * dim);
      for (const auto& m : index.clusters) points.insert(points.end(), m.centroid.begin(), m.centroid.end());
      const auto assign = kmeans_assign(points, dim, groups, 32, false, seed);
      for (std::size_t c = 0; c < C; ++c) plan.assignment[c] = assign[c];
      break;
    }
  }
  fill_load(index, hotness, plan);
  return plan;
}

nlohmann::json plan_to_json(const ShardPlan& plan) {
  return {
      {"N", plan.workers},
      {"strategy", to_string(plan.strategy)},
      {"assignment", plan.assignment},
      {"load",
       {{"tokens_per_worker", plan.tokens_per_worker},
        {"load_per_worker", plan.load_per_worker},
        {"sigma_load", plan.sigma_load}}},
  };
}

ShardPlan plan_from_json(const nlohmann::json& j) {
  try {
    ShardPlan plan;
    plan.workers = j.at("N").get<std::size_t>();
    plan.strategy = parse_shard_strategy(j.at("strategy").get<std::string>());
    plan.assignment = j.at("assignment").get<std::vector<std::uint32_t>>();
    const auto& load = j.at("load");
    plan.tokens_per_worker = load.at("tokens_per_worker").get<std::vector<std::uint64_t>>();
    plan.load_per_worker = load.at("load_per_worker").get<std::vector<double>>();
    plan.sigma_load = load.at("sigma_load").get<double>();
    if (plan.workers < 1) throw Error(ErrorCode::kInvalidArgument, "plan has no workers");
    for (auto g : plan.assignment)
      if (g >= plan.workers) throw Error(ErrorCode::kInvalidArgument, "assignment names a missing worker");
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("malformed plan: ") + e.what());
  }
}

void save_plan(const ShardPlan& plan, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out << plan_to_json(plan).dump(2) << "\n";
}

ShardPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  try {
    return plan_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("plan is not JSON: ") + e.what());
  }
}

ShardedOutcome sharded_decode_step(const Engine& engine, const ShardPlan& plan,
                                   std::span<const double> h, const DecodeConfig& cfg,
                                   std::uint64_t budget, const LatencyModel& latency) {
  const auto& index = engine.index();
  const std::size_t C = index.num_clusters();
  const std::uint64_t d = index.hidden_dim;
  if (plan.assignment.size() != C)
    throw Error(ErrorCode::kInvalidArgument, "plan does not cover every cluster");
  cfg.validate(index.vocab_size);

  const std::size_t N = plan.workers;
  std::vector<std::vector<std::size_t>> owned(N);
  for (std::size_t c = 0; c < C; ++c) owned.at(plan.assignment[c]).push_back(c);

  CommLedger ledger;
  ledger.worker_flops.assign(N, 0);
  std::vector<std::uint64_t> bound_flops(N, 0), sparse_flops(N, 0);

  // Phase 1: each worker bounds its own clusters; the union is the global vector.
  const double h_norm = l2_norm(h);
  BoundVector bounds;
  bounds.values.assign(C, 0.0);
  for (std::size_t g = 0; g < N; ++g) {
    compute_bounds_for(index, h, h_norm, cfg.bound_mode, cfg.slack, owned[g], bounds);
    bound_flops[g] = 2 * owned[g].size() * d;
  }

  // Global TopClusters selection under the token budget.
  StepDriver driver(engine, h, cfg, std::move(bounds), budget);
  std::vector<std::size_t> selected;
  std::uint64_t selected_tokens = 0;
  while (!driver.heap_empty() && selected_tokens + index.clusters[driver.peek()].size() <= budget) {
    const auto c = driver.pop();
    selected.push_back(c);
    selected_tokens += index.clusters[c].size();
  }

  // Phase 2: owners compute logits for their selected clusters.
  std::map<std::size_t, std::vector<double>> computed;
  for (std::size_t g = 0; g < N; ++g)
    for (std::size_t c : selected)
      if (plan.assignment[c] == g) {
        engine.cluster_logits(c, h, computed[c]);
        sparse_flops[g] += 2 * index.clusters[c].size() * d;
      }

  // Phase 3: merge in global selection order, then certify once.
  for (std::size_t c : selected) driver.open_with_logits(c, computed.at(c));
  driver.set_open_hook([&](std::size_t c) {
    sparse_flops[plan.assignment[c]] += 2 * index.clusters[c].size() * d;
  });
  ShardedOutcome result;
  if (auto st = driver.check())
    result.outcome = driver.finish(*st, std::nullopt);
  else
    result.outcome = driver.run_fallback();

  if (N >= 2) {
    ledger.bytes_bounds_phase = static_cast<std::uint64_t>(C) * 4;
    ledger.bytes_logits_phase = result.outcome.token_ids.size() * (d * 2 + 4);
  }
  ledger.bytes_total = ledger.bytes_bounds_phase + ledger.bytes_logits_phase;
  for (std::size_t g = 0; g < N; ++g) ledger.worker_flops[g] = bound_flops[g] + sparse_flops[g];

  const double max_bound = static_cast<double>(*std::max_element(bound_flops.begin(), bound_flops.end()));
  const double max_sparse = static_cast<double>(*std::max_element(sparse_flops.begin(), sparse_flops.end()));
  const double comm_bounds = static_cast<double>(ledger.bytes_bounds_phase) / latency.bytes_per_unit;
  const double comm_logits = static_cast<double>(ledger.bytes_logits_phase) / latency.bytes_per_unit;
  ledger.latency_bounds = max_bound / latency.flops_per_unit + comm_bounds;
  ledger.latency_sparse = max_sparse / latency.flops_per_unit + comm_logits;
  ledger.latency_verify = 2.0 * static_cast<double>(C) / latency.flops_per_unit;
  ledger.latency_comm = comm_bounds + comm_logits;
  ledger.latency_total = ledger.latency_bounds + ledger.latency_sparse + ledger.latency_verify;
  ledger.overhead = ledger.latency_total > 0.0 ? ledger.latency_comm / ledger.latency_total : 0.0;
  result.ledger = std::move(ledger);
  return result;
}

ShardedOutcome sharded_decode_step(const Engine& engine, const ShardPlan& plan,
                                   std::span<const double> h, const DecodeConfig& cfg,
                                   const LatencyModel& latency) {
  return sharded_decode_step(engine, plan, h, cfg, cfg.budget(engine.table().vocab_size), latency);
}

std::vector<double> zipf_hotness(std::size_t num_clusters, double exponent, std::uint64_t seed) {
  std::vector<std::size_t> rank(num_clusters);
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(rank.begin(), rank.end(), rng);
  std::vector<double> w(num_clusters);
  for (std::size_t c = 0; c < num_clusters; ++c)
    w[c] = 1.0 / std::pow(static_cast<double>(rank[c] + 1), exponent);
  return w;
}

}  // namespace csvd
