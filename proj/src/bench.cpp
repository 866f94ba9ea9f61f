#include "csvd/bench.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "csvd/oracle.hpp"
#include "csvd/parallel.hpp"

namespace csvd {

using nlohmann::json;

const char* to_string(DecodePath p) {
  switch (p) {
    case DecodePath::kIncremental: return "incremental";
    case DecodePath::kBatchSelect: return "batchselect";
    case DecodePath::kSharded: return "sharded";
  }
  return "unknown";
}

DecodePath parse_decode_path(const std::string& s) {
  if (s == "incremental") return DecodePath::kIncremental;
  if (s == "batchselect") return DecodePath::kBatchSelect;
  if (s == "sharded") return DecodePath::kSharded;
  throw Error(ErrorCode::kInvalidArgument, "unknown decode path '" + s + "'");
}

const char* to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::kClusters: return "C";
    case SweepAxis::kEpsilon: return "eps";
    case SweepAxis::kBudget: return "K_max";
    case SweepAxis::kBoundMode: return "bound_mode";
    case SweepAxis::kShardN: return "shard_N";
  }
  return "unknown";
}

SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "C") return SweepAxis::kClusters;
  if (s == "eps" || s == "epsilon") return SweepAxis::kEpsilon;
  if (s == "K_max" || s == "k_max") return SweepAxis::kBudget;
  if (s == "bound_mode") return SweepAxis::kBoundMode;
  if (s == "shard_N" || s == "N") return SweepAxis::kShardN;
  throw Error(ErrorCode::kInvalidArgument, "unknown sweep axis '" + s + "'");
}

BenchConfig default_bench_config() {
  BenchConfig cfg;
  cfg.index.num_clusters = default_cluster_count(cfg.synth.vocab_size);
  cfg.index.seed = 7;
  return cfg;
}

namespace {

json decode_to_json(const DecodeConfig& d) {
  json targets = json::array();
  for (auto t : d.targets) targets.push_back(to_string(t));
  json fallback = json::array();
  for (const auto& f : d.fallback) {
    json level = {{"kind", to_string(f.kind)}};
    if (f.kind == FallbackKind::kPartialExpand) level["delta_clusters"] = f.delta_clusters;
    if (f.kind == FallbackKind::kRelaxEps) level["factor"] = f.relax_factor;
    fallback.push_back(level);
  }
  return {
      {"k", d.k},
      {"epsilon", d.epsilon},
      {"targets", targets},
      {"k_max", d.k_max},
      {"fallback", fallback},
      {"adaptive",
       {{"enabled", d.adaptive.enabled},
        {"alpha", d.adaptive.alpha},
        {"rho_target", d.adaptive.rho_target},
        {"half_life", d.adaptive.half_life}}},
      {"bound_mode", to_string(d.bound_mode)},
      {"slack", d.slack},
      {"warmup_steps", d.warmup_steps},
      {"warmup_multiplier", d.warmup_multiplier},
  };
}

DecodeConfig decode_from_json(const json& j, DecodeConfig d) {
  d.k = j.value("k", d.k);
  d.epsilon = j.value("epsilon", d.epsilon);
  if (j.contains("targets")) {
    d.targets.clear();
    for (const auto& t : j.at("targets")) d.targets.push_back(parse_cert_kind(t.get<std::string>()));
  }
  d.k_max = j.value("k_max", d.k_max);
  if (j.contains("fallback")) {
    d.fallback.clear();
    for (const auto& f : j.at("fallback")) {
      FallbackLevel level;
      level.kind = parse_fallback_kind(f.at("kind").get<std::string>());
      level.delta_clusters = f.value("delta_clusters", level.delta_clusters);
      level.relax_factor = f.value("factor", level.relax_factor);
      d.fallback.push_back(level);
    }
  }
  if (j.contains("adaptive")) {
    const auto& a = j.at("adaptive");
    d.adaptive.enabled = a.value("enabled", d.adaptive.enabled);
    d.adaptive.alpha = a.value("alpha", d.adaptive.alpha);
    d.adaptive.rho_target = a.value("rho_target", d.adaptive.rho_target);
    d.adaptive.half_life = a.value("half_life", d.adaptive.half_life);
  }
  if (j.contains("bound_mode")) d.bound_mode = parse_bound_mode(j.at("bound_mode").get<std::string>());
  d.slack = j.value("slack", d.slack);
  d.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  d.warmup_multiplier = j.value("warmup_multiplier", d.warmup_multiplier);
  return d;
}

std::string fmt_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

json nullable(double x, bool defined) { return defined ? json(x) : json(nullptr); }

json summary_json(const Summary& s) {
  return {{"mean", s.mean}, {"p50", s.p50}, {"p95", s.p95}, {"count", s.count}};
}

// Outcome top-k ordered like the oracle: (logit desc, id asc).
std::vector<std::size_t> outcome_top_k(const DecodeOutcome& o, std::size_t k) {
  std::vector<std::size_t> idx(o.token_ids.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return o.logits[a] != o.logits[b] ? o.logits[a] > o.logits[b]
                                                        : o.token_ids[a] < o.token_ids[b];
                    });
  idx.resize(k);
  return idx;
}

// Slack for comparing a summed probability against a threshold: the
// direct TV sum carries rounding error of order V ulps.
constexpr double kProbabilityRounding = 1e-12;

}  // namespace

json config_to_json(const BenchConfig& cfg) {
  json table;
  if (cfg.table_path) {
    table = {{"source", "file"}, {"path", *cfg.table_path}};
  } else {
    table = {{"source", "synth"},
             {"V", cfg.synth.vocab_size},
             {"d", cfg.synth.hidden_dim},
             {"n_modes", cfg.synth.n_modes},
             {"spread", cfg.synth.spread},
             {"seed", cfg.synth.seed},
             {"unit_rows", cfg.synth.unit_rows}};
  }
  return {
      {"schema_version", kReportSchemaVersion},
      {"table", table},
      {"index",
       {{"C", cfg.index.num_clusters},
        {"mode", to_string(cfg.index.mode)},
        {"iters", cfg.index.iters},
        {"m", cfg.index.bias_depth},
        {"seed", cfg.index.seed}}},
      {"decode", decode_to_json(cfg.decode)},
      {"queries",
       {{"model", cfg.queries.model == QueryModel::kRandom ? "random" : "contextual"},
        {"spread", cfg.queries.spread},
        {"zipf_exponent", cfg.queries.zipf_exponent},
        {"scale", cfg.queries.scale}}},
      {"path", to_string(cfg.path)},
      {"shard",
       {{"N", cfg.shard.workers},
        {"strategy", to_string(cfg.shard.strategy)},
        {"hotness_exponent", cfg.shard.hotness_exponent}}},
      {"n_steps", cfg.n_steps},
      {"seed", cfg.seed},
      {"sequence_length", cfg.sequence_length},
      {"validate", cfg.validate},
  };
}

BenchConfig config_from_json(const json& j, BenchConfig cfg) {
  try {
    if (j.contains("schema_version") && j.at("schema_version").get<int>() != kReportSchemaVersion)
      throw Error(ErrorCode::kVersionMismatch, "config schema_version differs");
    if (j.contains("table")) {
      const auto& t = j.at("table");
      if (t.value("source", std::string("synth")) == "file") {
        cfg.table_path = t.at("path").get<std::string>();
      } else {
        cfg.table_path.reset();
        cfg.synth.vocab_size = t.value("V", cfg.synth.vocab_size);
        cfg.synth.hidden_dim = t.value("d", cfg.synth.hidden_dim);
        cfg.synth.n_modes = t.value("n_modes", cfg.synth.n_modes);
        cfg.synth.spread = t.value("spread", cfg.synth.spread);
        cfg.synth.seed = t.value("seed", cfg.synth.seed);
        cfg.synth.unit_rows = t.value("unit_rows", cfg.synth.unit_rows);
      }
    }
    if (j.contains("index")) {
      const auto& i = j.at("index");
      cfg.index.num_clusters = i.value("C", cfg.index.num_clusters);
      if (i.contains("mode")) cfg.index.mode = parse_clustering_mode(i.at("mode").get<std::string>());
      cfg.index.iters = i.value("iters", cfg.index.iters);
      cfg.index.bias_depth = i.value("m", cfg.index.bias_depth);
      cfg.index.seed = i.value("seed", cfg.index.seed);
    }
    if (j.contains("decode")) cfg.decode = decode_from_json(j.at("decode"), cfg.decode);
    if (j.contains("queries")) {
      const auto& q = j.at("queries");
      if (q.contains("model")) {
        const auto m = q.at("model").get<std::string>();
        if (m == "random") cfg.queries.model = QueryModel::kRandom;
        else if (m == "contextual") cfg.queries.model = QueryModel::kContextual;
        else throw Error(ErrorCode::kInvalidArgument, "unknown query model '" + m + "'");
      }
      cfg.queries.spread = q.value("spread", cfg.queries.spread);
      cfg.queries.zipf_exponent = q.value("zipf_exponent", cfg.queries.zipf_exponent);
      cfg.queries.scale = q.value("scale", cfg.queries.scale);
    }
    if (j.contains("path")) cfg.path = parse_decode_path(j.at("path").get<std::string>());
    if (j.contains("shard")) {
      const auto& s = j.at("shard");
      cfg.shard.workers = s.value("N", cfg.shard.workers);
      if (s.contains("strategy"))
        cfg.shard.strategy = parse_shard_strategy(s.at("strategy").get<std::string>());
      cfg.shard.hotness_exponent = s.value("hotness_exponent", cfg.shard.hotness_exponent);
    }
    cfg.n_steps = j.value("n_steps", cfg.n_steps);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.sequence_length = j.value("sequence_length", cfg.sequence_length);
    cfg.validate = j.value("validate", cfg.validate);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("malformed config: ") + e.what());
  }
  return cfg;
}

Summary summarize(std::vector<double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  auto rank = [&](double q) {
    const auto r = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
    return values[std::clamp<std::size_t>(r, 1, values.size()) - 1];
  };
  s.p50 = rank(0.50);
  s.p95 = rank(0.95);
  return s;
}

std::vector<std::string> check_outcome(const EmbeddingTable& table, std::span<const double> h,
                                       const DecodeOutcome& o, std::size_t k,
                                       ValidationTally* tally) {
  std::vector<std::string> problems;
  const auto dense = dense_logits(table, h);

  if (o.token_ids.empty()) {
    problems.push_back("empty sub-vocabulary");
    return problems;
  }
  for (std::size_t i = 0; i < o.token_ids.size(); ++i) {
    const TokenId t = o.token_ids[i];
    if (t >= table.vocab_size || (i > 0 && o.token_ids[i - 1] >= t)) {
      problems.push_back("token ids not strictly ascending within [0, V)");
      return problems;
    }
    if (std::bit_cast<std::uint64_t>(o.logits[i]) != std::bit_cast<std::uint64_t>(dense.logits[t]))
      problems.push_back("logit of token " + std::to_string(t) + " differs from dense oracle");
  }
  if (o.fallback_used == FallbackKind::kFullVocab && o.token_ids.size() != table.vocab_size)
    problems.push_back("full_vocab fallback returned a partial vocabulary");

  const auto tv = tv_distance(dense, o.token_ids);
  if (tv.direct > o.status.epsilon_achieved * (1.0 + 1e-9) + kProbabilityRounding)
    problems.push_back("TV " + fmt_double(tv.direct) + " exceeds achieved rho " +
                       fmt_double(o.status.epsilon_achieved));
  // Relative agreement below a mass of 1e-6 is dominated by summation
  // rounding, so the denominator is floored there.
  if (tally)
    tally->max_tv_identity_rel_diff =
        std::max(tally->max_tv_identity_rel_diff,
                 std::abs(tv.direct - tv.closed_form) / std::max(tv.closed_form, 1e-6));

  switch (o.status.kind) {
    case CertKind::kTopkExact: {
      if (tally) ++tally->topk_checked;
      const auto truth = dense.top_k(k);
      const auto mine = outcome_top_k(o, k);
      bool same = truth.size() == mine.size();
      for (std::size_t r = 0; same && r < truth.size(); ++r)
        same = dense.logits[truth[r]] == o.logits[mine[r]];
      if (!same) problems.push_back("certified top-k differs from dense oracle top-k");
      break;
    }
    case CertKind::kSoftmaxEps:
      if (tally) ++tally->softmax_checked;
      if (tv.direct > o.status.epsilon_used + kProbabilityRounding)
        problems.push_back("TV " + fmt_double(tv.direct) + " exceeds certified epsilon " +
                           fmt_double(o.status.epsilon_used));
      break;
    case CertKind::kToppMass: {
      if (tally) ++tally->topp_checked;
      const double mass = external_mass(dense, o.token_ids);
      if (mass > o.status.epsilon_used + kProbabilityRounding)
        problems.push_back("external mass " + fmt_double(mass) + " exceeds certified epsilon " +
                           fmt_double(o.status.epsilon_used));
      break;
    }
    case CertKind::kUncertified:
      problems.push_back("outcome returned without certification");
      break;
  }
  if (tally) ++tally->steps_validated;
  if (tally) tally->violations += problems.size();
  return problems;
}

QueryBatch make_queries(const ClusterIndex& index, const QuerySpec& spec, std::uint64_t n,
                        std::uint64_t seed) {
  const std::size_t d = index.hidden_dim;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  std::vector<double> cdf;
  if (spec.model == QueryModel::kContextual) {
    cdf.resize(index.num_clusters());
    double acc = 0.0;
    for (std::size_t c = 0; c < cdf.size(); ++c) {
      acc += 1.0 / std::pow(static_cast<double>(c + 1), spec.zipf_exponent);
      cdf[c] = acc;
    }
    for (double& x : cdf) x /= acc;
  }

  QueryBatch batch;
  batch.hidden_dim = d;
  for (std::uint64_t q = 0; q < n; ++q) {
    std::vector<double> h(d);
    if (spec.model == QueryModel::kContextual) {
      const double u = unif(rng);
      const auto c = std::min<std::size_t>(
          static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin()),
          cdf.size() - 1);
      for (std::size_t j = 0; j < d; ++j) h[j] = index.clusters[c].centroid[j] + spec.spread * gauss(rng);
    } else {
      for (double& x : h) x = gauss(rng);
    }
    const double norm = l2_norm(h);
    if (norm > 0.0)
      for (double& x : h) x *= spec.scale / norm;
    batch.push_back(std::move(h));
  }
  return batch;
}

EmbeddingTable make_table(const BenchConfig& cfg) {
  if (cfg.table_path) return load_embedding_table(*cfg.table_path);
  auto t = synth_vocab(cfg.synth.vocab_size, cfg.synth.hidden_dim, cfg.synth.n_modes,
                       cfg.synth.spread, cfg.synth.seed);
  return cfg.synth.unit_rows ? normalize_rows(t) : t;
}

RunReport run_benchmark(const BenchConfig& cfg) {
  const auto table = make_table(cfg);
  const auto index = build_index(table, cfg.index);
  return run_benchmark(cfg, table, index);
}

RunReport run_benchmark(const BenchConfig& cfg, const EmbeddingTable& table,
                        const ClusterIndex& index) {
  const std::uint64_t V = table.vocab_size;
  cfg.decode.validate(V);
  const Engine engine(table, index);

  RunReport report;
  report.config = cfg;
  report.vocab_size = V;
  report.hidden_dim = table.hidden_dim;
  report.num_clusters = index.num_clusters();
  for (const auto& m : index.clusters) report.mean_radius += m.radius;
  report.mean_radius /= static_cast<double>(index.num_clusters());

  const std::uint64_t n = cfg.n_steps;
  const auto queries = make_queries(index, cfg.queries, n, cfg.seed);

  std::optional<ShardPlan> plan;
  if (cfg.path == DecodePath::kSharded) {
    std::vector<double> hot;
    if (cfg.shard.strategy == ShardStrategy::kHotnessWeighted)
      hot = zipf_hotness(index.num_clusters(), cfg.shard.hotness_exponent, cfg.seed);
    plan = make_plan(index, cfg.shard.workers, cfg.shard.strategy,
                     hot.empty() ? std::nullopt : std::optional<std::span<const double>>(hot),
                     cfg.seed);
  }

  std::vector<CommLedger> ledgers(plan ? n : 0);
  auto run_one = [&](std::size_t i, std::uint64_t budget) {
    const auto& h = queries.states[i];
    switch (cfg.path) {
      case DecodePath::kIncremental: return engine.decode_step(h, cfg.decode, budget);
      case DecodePath::kBatchSelect: return engine.decode_step_batchselect(h, cfg.decode, budget);
      case DecodePath::kSharded: {
        auto r = sharded_decode_step(engine, *plan, h, cfg.decode, budget);
        ledgers[i] = std::move(r.ledger);
        return std::move(r.outcome);
      }
    }
    throw Error(ErrorCode::kConfig, "unknown decode path");
  };
  auto position = [&](std::uint64_t i) {
    return cfg.sequence_length == 0 ? i : i % cfg.sequence_length;
  };

  std::vector<DecodeOutcome> outcomes(n);
  std::vector<std::uint64_t> budgets(n);
  std::vector<double> emas(n);
  BudgetController controller(cfg.decode, V);
  if (cfg.decode.adaptive.enabled) {
    for (std::uint64_t i = 0; i < n; ++i) {
      budgets[i] = controller.budget(position(i));
      outcomes[i] = run_one(i, budgets[i]);
      controller.observe(outcomes[i].fallback_used.has_value());
      emas[i] = controller.fallback_rate();
    }
  } else {
    for (std::uint64_t i = 0; i < n; ++i) budgets[i] = controller.budget(position(i));
    parallel_for(n, [&](std::size_t i) { outcomes[i] = run_one(i, budgets[i]); });
    for (std::uint64_t i = 0; i < n; ++i) {
      controller.observe(outcomes[i].fallback_used.has_value());
      emas[i] = controller.fallback_rate();
    }
  }

  if (cfg.validate) {
    std::vector<ValidationTally> tallies(n);
    std::vector<std::vector<std::string>> problems(n);
    parallel_for(n, [&](std::size_t i) {
      problems[i] = check_outcome(table, queries.states[i], outcomes[i], cfg.decode.k, &tallies[i]);
    });
    for (std::uint64_t i = 0; i < n; ++i) {
      if (!problems[i].empty()) {
        json diag = {{"step", i},
                     {"problems", problems[i]},
                     {"query", queries.states[i]},
                     {"cert_kind", to_string(outcomes[i].status.kind)},
                     {"rho", outcomes[i].status.epsilon_achieved},
                     {"epsilon_used", outcomes[i].status.epsilon_used},
                     {"sub_size", outcomes[i].token_ids.size()},
                     {"config", config_to_json(cfg)}};
        throw ValidationFailure("oracle violation at step " + std::to_string(i) + ": " +
                                    problems[i].front(),
                                diag);
      }
      auto& v = report.validation;
      const auto& t = tallies[i];
      v.steps_validated += t.steps_validated;
      v.violations += t.violations;
      v.topk_checked += t.topk_checked;
      v.softmax_checked += t.softmax_checked;
      v.topp_checked += t.topp_checked;
      v.max_tv_identity_rel_diff = std::max(v.max_tv_identity_rel_diff, t.max_tv_identity_rel_diff);
    }
  }

  auto& agg = report.aggregates;
  std::vector<double> ratios, xis;
  double sub_total = 0.0, speedup_total = 0.0;
  std::uint64_t certified_clean = 0, fell_back = 0;
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto& o = outcomes[i];
    StepRecord r;
    r.step = i;
    r.ratio = o.stats.ratio;
    r.xi = o.stats.xi.xi;
    r.xi_defined = o.stats.xi.defined;
    r.cert_kind = o.status.kind;
    r.relaxed = o.status.relaxed;
    r.fallback = o.fallback_used;
    r.rho = o.status.epsilon_achieved;
    r.flops_sparse = o.stats.flops.flops_sparse;
    r.flops_bounds = o.stats.flops.flops_bounds;
    r.clusters_opened = o.stats.clusters_opened;
    r.sub_size = o.stats.sub_size;
    r.budget = budgets[i];
    r.fallback_ema = emas[i];
    report.steps.push_back(r);

    ratios.push_back(r.ratio);
    if (r.xi_defined) xis.push_back(r.xi);
    sub_total += static_cast<double>(r.sub_size);
    speedup_total += o.stats.flops.speedup_proxy;
    if (o.fallback_used) {
      ++fell_back;
      switch (*o.fallback_used) {
        case FallbackKind::kPartialExpand: ++agg.count_partial; break;
        case FallbackKind::kRelaxEps: ++agg.count_relax; break;
        case FallbackKind::kFullVocab: ++agg.count_full; break;
      }
    } else if (o.certified()) {
      ++certified_clean;
    }
    switch (o.status.kind) {
      case CertKind::kTopkExact: ++agg.count_topk; break;
      case CertKind::kSoftmaxEps: ++agg.count_softmax; break;
      case CertKind::kToppMass: ++agg.count_topp; break;
      case CertKind::kUncertified: break;
    }
    if (o.status.relaxed) ++agg.count_relaxed;
  }
  agg.ratio = summarize(ratios);
  agg.xi = summarize(xis);
  if (n > 0) {
    const double dn = static_cast<double>(n);
    agg.rho_cert = static_cast<double>(certified_clean) / dn;
    agg.rho_fall = static_cast<double>(fell_back) / dn;
    agg.mean_sub_size = sub_total / dn;
    agg.mean_speedup_proxy = speedup_total / dn;
    agg.speedup_proxy_at_mean =
        static_cast<double>(V) / (static_cast<double>(index.num_clusters()) + agg.mean_sub_size);
  }
  if (plan) {
    ShardSummary sh;
    sh.sigma_load = plan->sigma_load;
    for (const auto& l : ledgers) {
      sh.mean_bytes_bounds += static_cast<double>(l.bytes_bounds_phase);
      sh.mean_bytes_logits += static_cast<double>(l.bytes_logits_phase);
      sh.mean_latency_total += l.latency_total;
      sh.mean_overhead += l.overhead;
    }
    if (n > 0) {
      const double dn = static_cast<double>(n);
      sh.mean_bytes_bounds /= dn;
      sh.mean_bytes_logits /= dn;
      sh.mean_latency_total /= dn;
      sh.mean_overhead /= dn;
    }
    report.shard = sh;
  }
  agg.final_fallback_ema = controller.fallback_rate();
  agg.final_budget = controller.budget(cfg.decode.warmup_steps);
  report.outcome_digest = digest_outcomes(outcomes);
  return report;
}

json report_to_json(const RunReport& r) {
  const auto& a = r.aggregates;
  const auto& v = r.validation;
  json steps = json::array();
  for (const auto& s : r.steps)
    steps.push_back({{"step", s.step},
                     {"ratio", s.ratio},
                     {"xi", nullable(s.xi, s.xi_defined)},
                     {"cert_kind", to_string(s.cert_kind)},
                     {"relaxed", s.relaxed},
                     {"fallback", s.fallback ? to_string(*s.fallback) : "none"},
                     {"rho", s.rho},
                     {"flops_sparse", s.flops_sparse},
                     {"flops_bounds", s.flops_bounds},
                     {"clusters_opened", s.clusters_opened},
                     {"sub_size", s.sub_size},
                     {"budget", s.budget},
                     {"fallback_ema", s.fallback_ema}});
  json out = {
      {"schema_version", kReportSchemaVersion},
      {"config", config_to_json(r.config)},
      {"workload",
       {{"V", r.vocab_size},
        {"d", r.hidden_dim},
        {"C", r.num_clusters},
        {"mean_radius", r.mean_radius},
        {"initial_budget", r.config.decode.budget(r.vocab_size)}}},
      {"aggregates",
       {{"ratio", summary_json(a.ratio)},
        {"xi", summary_json(a.xi)},
        {"rho_cert", a.rho_cert},
        {"rho_fall", a.rho_fall},
        {"mean_sub_size", a.mean_sub_size},
        {"mean_speedup_proxy", a.mean_speedup_proxy},
        {"speedup_proxy_at_mean", a.speedup_proxy_at_mean},
        {"final_fallback_ema", a.final_fallback_ema},
        {"final_budget", a.final_budget},
        {"cert_counts",
         {{"topk_exact", a.count_topk},
          {"softmax_eps", a.count_softmax},
          {"topp_mass", a.count_topp},
          {"relaxed", a.count_relaxed}}},
        {"fallback_counts",
         {{"partial_expand", a.count_partial},
          {"relax_eps", a.count_relax},
          {"full_vocab", a.count_full}}}}},
      {"validation",
       {{"enabled", r.config.validate},
        {"steps_validated", v.steps_validated},
        {"violations", v.violations},
        {"topk_checked", v.topk_checked},
        {"softmax_checked", v.softmax_checked},
        {"topp_checked", v.topp_checked},
        {"max_tv_identity_rel_diff", v.max_tv_identity_rel_diff}}},
      {"outcome_digest", to_hex(r.outcome_digest)},
      {"steps", steps},
  };
  if (r.shard)
    out["shard"] = {{"sigma_load", r.shard->sigma_load},
                    {"mean_bytes_bounds_phase", r.shard->mean_bytes_bounds},
                    {"mean_bytes_logits_phase", r.shard->mean_bytes_logits},
                    {"mean_latency_total", r.shard->mean_latency_total},
                    {"mean_comm_overhead", r.shard->mean_overhead}};
  return out;
}

std::string report_to_csv(const RunReport& r) {
  std::ostringstream out;
  out << "step,ratio,xi,cert_kind,fallback,rho,flops_sparse,flops_bounds\n";
  for (const auto& s : r.steps) {
    out << s.step << ',' << fmt_double(s.ratio) << ',' << (s.xi_defined ? fmt_double(s.xi) : "")
        << ',' << to_string(s.cert_kind) << ',' << (s.fallback ? to_string(*s.fallback) : "none")
        << ',' << fmt_double(s.rho) << ',' << s.flops_sparse << ',' << s.flops_bounds << '\n';
  }
  return out.str();
}

void write_report(const RunReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
  const auto text = report_to_json(report).dump(2) + "\n";
  write_file(dir / "report.json",
             std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  const auto csv = report_to_csv(report);
  write_file(dir / "report.csv",
             std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
}

SweepResult ablation_sweep(SweepAxis axis, const std::vector<std::string>& values,
                           const BenchConfig& base) {
  SweepResult result;
  result.axis = axis;
  const auto table = make_table(base);

  BuildParams shared_params = base.index;
  if (axis == SweepAxis::kBoundMode) shared_params.mode = ClusteringMode::kSpherical;
  std::optional<ClusterIndex> shared;
  if (axis != SweepAxis::kClusters) shared = build_index(table, shared_params);

  for (const auto& value : values) {
    BenchConfig cfg = base;
    try {
      switch (axis) {
        case SweepAxis::kClusters: cfg.index.num_clusters = std::stoull(value); break;
        case SweepAxis::kEpsilon: cfg.decode.epsilon = std::stod(value); break;
        case SweepAxis::kBudget: cfg.decode.k_max = std::stoull(value); break;
        case SweepAxis::kBoundMode:
          cfg.decode.bound_mode = parse_bound_mode(value);
          cfg.index.mode = ClusteringMode::kSpherical;
          break;
        case SweepAxis::kShardN:
          cfg.path = DecodePath::kSharded;
          cfg.shard.workers = std::stoull(value);
          break;
      }
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kInvalidArgument, "bad sweep value '" + value + "'");
    }
    if (shared) {
      result.rows.push_back({value, run_benchmark(cfg, table, *shared)});
    } else {
      const auto index = build_index(table, cfg.index);
      result.rows.push_back({value, run_benchmark(cfg, table, index)});
    }
  }

  // Forced orderings on an identical step stream with a fixed budget.
  if (!base.decode.adaptive.enabled &&
      (axis == SweepAxis::kEpsilon || (axis == SweepAxis::kBudget && base.path == DecodePath::kIncremental))) {
    std::vector<std::size_t> order(result.rows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::stod(result.rows[a].value) < std::stod(result.rows[b].value);
    });
    for (std::size_t i = 1; i < order.size(); ++i) {
      const auto& lo = result.rows[order[i - 1]];
      const auto& hi = result.rows[order[i]];
      if (axis == SweepAxis::kEpsilon && hi.report.aggregates.rho_cert < lo.report.aggregates.rho_cert)
        result.monotone_violations.push_back("rho_cert decreased from eps=" + lo.value + " to eps=" + hi.value);
      if (axis == SweepAxis::kBudget && hi.report.aggregates.rho_fall > lo.report.aggregates.rho_fall)
        result.monotone_violations.push_back("rho_fall increased from K_max=" + lo.value + " to K_max=" + hi.value);
    }
  }
  return result;
}

std::string sweep_to_csv(const SweepResult& sweep) {
  std::ostringstream out;
  out << to_string(sweep.axis)
      << ",rho_cert,rho_fall,mean_ratio,p95_ratio,mean_xi,mean_radius,speedup_proxy_at_mean,outcome_digest\n";
  for (const auto& row : sweep.rows) {
    const auto& a = row.report.aggregates;
    out << row.value << ',' << fmt_double(a.rho_cert) << ',' << fmt_double(a.rho_fall) << ','
        << fmt_double(a.ratio.mean) << ',' << fmt_double(a.ratio.p95) << ',' << fmt_double(a.xi.mean)
        << ',' << fmt_double(row.report.mean_radius) << ',' << fmt_double(a.speedup_proxy_at_mean)
        << ',' << to_hex(row.report.outcome_digest) << '\n';
  }
  return out.str();
}

}  // namespace csvd
