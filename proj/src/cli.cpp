#include "csvd/cli.hpp"

#include <cmath>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "csvd/bench.hpp"
#include "csvd/bounds.hpp"
#include "csvd/oracle.hpp"
#include "csvd/parallel.hpp"

namespace csvd {

using nlohmann::json;

namespace {

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kValidation: return kExitViolation;
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kConfig:
    case ErrorCode::kDimensionMismatch: return kExitUsage;
    default: return kExitIo;
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

json read_json(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, path.string() + ": " + e.what());
  }
}

// Overrides shared by bench, shard-sim and ablate. Unset options leave the
// config-file or default value in place.
struct RunFlags {
  std::optional<std::string> table;
  bool synth = false;
  std::optional<std::string> config;
  std::optional<std::uint64_t> vocab, dim, modes, synth_seed;
  std::optional<double> synth_spread;
  std::optional<std::uint64_t> clusters;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> steps, seed, k, k_max, sequence_length;
  std::optional<double> eps;
  std::optional<std::vector<std::string>> targets;
  std::optional<std::string> path, bound_mode, query_model;
  std::optional<std::size_t> workers;
  std::optional<std::string> strategy;
  bool adaptive = false;
  std::optional<double> alpha, rho_target;
  bool no_validate = false;
};

void add_run_flags(CLI::App& app, RunFlags& f, bool with_shard) {
  auto* table = app.add_option("--table", f.table, "Embedding table file (CSVD)");
  app.add_flag("--synth", f.synth, "Use a synthetic Gaussian-mixture table (default)")->excludes(table);
  app.add_option("--config", f.config, "JSON config (same schema as report.json 'config')");
  app.add_option("--V", f.vocab, "Synthetic vocabulary size");
  app.add_option("--d", f.dim, "Synthetic hidden dimension");
  app.add_option("--modes", f.modes, "Synthetic mixture components");
  app.add_option("--spread", f.synth_spread, "Synthetic per-coordinate row noise");
  app.add_option("--synth-seed", f.synth_seed, "Synthetic table seed");
  app.add_option("--C", f.clusters, "Cluster count (0 = 0.015 V)");
  app.add_option("--mode", f.mode, "Clustering mode: euclidean | spherical | bias_augmented");
  app.add_option("--steps", f.steps, "Decode steps");
  app.add_option("--seed", f.seed, "Query stream seed");
  app.add_option("--k", f.k, "Top-k size");
  app.add_option("--eps", f.eps, "Certification epsilon");
  app.add_option("--targets", f.targets, "Certificate kinds in priority order: topk softmax topp")
      ->expected(1, 3);
  app.add_option("--k-max", f.k_max, "Token budget K_max (0 = ceil(V/4))");
  app.add_option("--bound-mode", f.bound_mode, "euclidean | spherical");
  app.add_option("--queries", f.query_model, "Query model: contextual | random");
  app.add_option("--sequence-length", f.sequence_length, "Warmup restarts every n steps (0 = never)");
  app.add_flag("--adaptive", f.adaptive, "Enable the adaptive budget controller");
  app.add_option("--alpha", f.alpha, "Adaptive budget gain");
  app.add_option("--rho-target", f.rho_target, "Adaptive budget target fallback rate");
  app.add_flag("--no-validate", f.no_validate, "Skip the dense-oracle check of every step");
  if (with_shard) {
    app.add_option("--path", f.path, "Decode path: incremental | batchselect | sharded");
    app.add_option("--N", f.workers, "Logical workers (sharded path)");
    app.add_option("--strategy", f.strategy, "round_robin | hotness_weighted | semantic_grouped");
  }
}

BenchConfig resolve_config(const RunFlags& f) {
  BenchConfig cfg = default_bench_config();
  if (f.config) cfg = config_from_json(read_json(*f.config), cfg);
  if (f.table) cfg.table_path = *f.table;
  if (f.synth) cfg.table_path.reset();
  if (f.vocab) cfg.synth.vocab_size = *f.vocab;
  if (f.dim) cfg.synth.hidden_dim = *f.dim;
  if (f.modes) cfg.synth.n_modes = *f.modes;
  if (f.synth_spread) cfg.synth.spread = *f.synth_spread;
  if (f.synth_seed) cfg.synth.seed = *f.synth_seed;
  if (f.clusters) cfg.index.num_clusters = *f.clusters;
  if (f.vocab && !f.clusters && !f.config) cfg.index.num_clusters = 0;
  if (f.mode) cfg.index.mode = parse_clustering_mode(*f.mode);
  if (f.steps) cfg.n_steps = *f.steps;
  if (f.seed) cfg.seed = *f.seed;
  if (f.k) cfg.decode.k = *f.k;
  if (f.eps) cfg.decode.epsilon = *f.eps;
  if (f.targets) {
    cfg.decode.targets.clear();
    for (const auto& t : *f.targets) cfg.decode.targets.push_back(parse_cert_kind(t));
  }
  if (f.k_max) cfg.decode.k_max = *f.k_max;
  if (f.bound_mode) cfg.decode.bound_mode = parse_bound_mode(*f.bound_mode);
  if (f.query_model) {
    if (*f.query_model == "random") cfg.queries.model = QueryModel::kRandom;
    else if (*f.query_model == "contextual") cfg.queries.model = QueryModel::kContextual;
    else throw Error(ErrorCode::kInvalidArgument, "unknown query model '" + *f.query_model + "'");
  }
  if (f.sequence_length) cfg.sequence_length = *f.sequence_length;
  if (f.adaptive) cfg.decode.adaptive.enabled = true;
  if (f.alpha) cfg.decode.adaptive.alpha = *f.alpha;
  if (f.rho_target) cfg.decode.adaptive.rho_target = *f.rho_target;
  if (f.no_validate) cfg.validate = false;
  if (f.path) cfg.path = parse_decode_path(*f.path);
  if (f.workers) cfg.shard.workers = *f.workers;
  if (f.strategy) cfg.shard.strategy = parse_shard_strategy(*f.strategy);
  return cfg;
}

void print_summary(const RunReport& r, std::ostream& out) {
  const auto& a = r.aggregates;
  out << "V=" << r.vocab_size << " d=" << r.hidden_dim << " C=" << r.num_clusters
      << " steps=" << r.steps.size() << "\n"
      << "mean ratio " << a.ratio.mean << " (p95 " << a.ratio.p95 << "), mean |S| " << a.mean_sub_size
      << "\n"
      << "rho_cert " << a.rho_cert << ", rho_fall " << a.rho_fall << ", mean xi " << a.xi.mean << "\n"
      << "speedup proxy " << a.speedup_proxy_at_mean << "\n";
  if (r.shard)
    out << "bytes/step bounds " << r.shard->mean_bytes_bounds << ", logits "
        << r.shard->mean_bytes_logits << ", comm overhead " << r.shard->mean_overhead << "\n";
  if (r.config.validate)
    out << r.validation.steps_validated << " steps validated, " << r.validation.violations
        << " violations\n";
  out << "outcome digest " << to_hex(r.outcome_digest) << "\n";
}

int cmd_synth(std::uint64_t V, std::uint64_t d, std::uint64_t modes, double spread, std::uint64_t seed,
              bool unit_rows, const std::string& out_path) {
  auto table = synth_vocab(V, d, modes, spread, seed);
  if (unit_rows) table = normalize_rows(table);
  save_embedding_table(table, out_path);
  std::cout << "wrote " << out_path << " (V=" << V << ", d=" << d << ", fingerprint "
            << to_hex(table.fingerprint()) << ")\n";
  return kExitOk;
}

int cmd_cluster(const std::string& input, const BuildParams& params, const std::string& out_path) {
  const auto table = load_embedding_table(input);
  if (params.num_clusters > table.vocab_size)
    throw Error(ErrorCode::kInvalidArgument, "--C exceeds the vocabulary size");
  const auto index = build_index(table, params);
  const auto check = validate_index(index, table);
  if (!check.ok()) {
    for (const auto& v : check.violations)
      std::cerr << "violation: " << to_string(v.kind) << " in cluster " << v.cluster << ": " << v.detail
                << "\n";
    return kExitViolation;
  }
  save_index(index, out_path);
  double mean_r = 0.0, max_r = 0.0;
  std::uint64_t largest = 0, singletons = 0;
  for (const auto& m : index.clusters) {
    mean_r += m.radius;
    max_r = std::max(max_r, m.radius);
    largest = std::max(largest, m.size());
    singletons += m.size() == 1;
  }
  mean_r /= static_cast<double>(index.num_clusters());
  std::cout << "C=" << index.num_clusters() << " mode=" << to_string(index.mode)
            << " mean radius " << mean_r << " max radius " << max_r << " largest cluster " << largest
            << " singletons " << singletons << "\nwrote " << out_path << "\n";
  return kExitOk;
}

struct VerifyOptions {
  std::string table, index, dump = "verify_reproducer.json";
  std::uint64_t steps = 1000, seed = 42, k = 10;
  double eps = 0.05;
};

int report_violation(const VerifyOptions& o, const std::string& message, json reproducer) {
  reproducer["message"] = message;
  reproducer["table"] = o.table;
  reproducer["index"] = o.index;
  reproducer["seed"] = o.seed;
  write_text(o.dump, reproducer.dump(2) + "\n");
  std::cout << "violation: " << message << "\nreproducer written to " << o.dump << "\n";
  return kExitViolation;
}

int cmd_verify(const VerifyOptions& o) {
  const auto table = load_embedding_table(o.table);
  const auto index = load_index(o.index);

  const auto check = validate_index(index, table);
  std::cout << "index: " << check.violations.size() << " violations\n";
  if (!check.ok()) {
    const auto& v = check.violations.front();
    return report_violation(o,
                            std::string(to_string(v.kind)) + " in cluster " + std::to_string(v.cluster) +
                                ": " + v.detail,
                            {{"check", "validate_index"},
                             {"kind", to_string(v.kind)},
                             {"cluster", v.cluster},
                             {"detail", v.detail},
                             {"violations", check.violations.size()}});
  }

  std::vector<BoundMode> modes{BoundMode::kEuclidean};
  if (index.mode == ClusteringMode::kSpherical) modes.push_back(BoundMode::kSpherical);
  QuerySpec random_spec;
  random_spec.model = QueryModel::kRandom;
  const auto random_queries = make_queries(index, random_spec, o.steps, o.seed);
  struct BoundHit {
    bool found = false;
    std::size_t cluster = 0;
    TokenId token = 0;
    double logit = 0.0, bound = 0.0;
    BoundMode mode = BoundMode::kEuclidean;
  };
  std::vector<BoundHit> hits(o.steps);
  parallel_for(o.steps, [&](std::size_t q) {
    const auto& h = random_queries.states[q];
    const auto dense = dense_logits(table, h);
    for (auto mode : modes) {
      const auto u = compute_bounds(index, h, l2_norm(h), mode);
      for (std::size_t c = 0; c < index.num_clusters() && !hits[q].found; ++c)
        for (TokenId t : index.members(c))
          if (dense.logits[t] > u.values[c]) {
            hits[q] = {true, c, t, dense.logits[t], u.values[c], mode};
            break;
          }
    }
  });
  std::uint64_t bound_violations = 0;
  for (const auto& hit : hits) bound_violations += hit.found;
  std::cout << "bounds: " << o.steps << " random queries, " << bound_violations << " violations\n";
  for (std::size_t q = 0; q < hits.size(); ++q)
    if (hits[q].found)
      return report_violation(
          o,
          "logit of token " + std::to_string(hits[q].token) + " exceeds bound of cluster " +
              std::to_string(hits[q].cluster),
          {{"check", "bound_soundness"},
           {"query_index", q},
           {"query", random_queries.states[q]},
           {"cluster", hits[q].cluster},
           {"token", hits[q].token},
           {"logit", hits[q].logit},
           {"bound", hits[q].bound},
           {"bound_mode", to_string(hits[q].mode)}});

  BenchConfig cfg = default_bench_config();
  cfg.table_path = o.table;
  cfg.n_steps = o.steps;
  cfg.seed = o.seed;
  cfg.decode.k = o.k;
  cfg.decode.epsilon = o.eps;
  cfg.decode.targets = {CertKind::kTopkExact, CertKind::kSoftmaxEps, CertKind::kToppMass};
  RunReport report;
  try {
    report = run_benchmark(cfg, table, index);
  } catch (const ValidationFailure& e) {
    json diag = e.diagnostic();
    diag["check"] = "decode_oracle";
    return report_violation(o, e.what(), diag);
  }
  std::cout << "decode: " << report.validation.steps_validated << " steps checked against the dense oracle ("
            << report.validation.topk_checked << " topk, " << report.validation.softmax_checked
            << " softmax, " << report.validation.topp_checked << " topp), 0 violations\n";
  if (report.validation.max_tv_identity_rel_diff > 1e-9)
    return report_violation(o, "TV closed form disagrees with the direct sum",
                            {{"check", "tv_identity"},
                             {"max_rel_diff", report.validation.max_tv_identity_rel_diff}});
  std::cout << "tv identity: max relative difference " << report.validation.max_tv_identity_rel_diff
            << "\n";

  const Engine engine(table, index);
  const auto queries = make_queries(index, cfg.queries, std::min<std::uint64_t>(o.steps, 200), o.seed);
  const auto hot = zipf_hotness(index.num_clusters(), 1.1, o.seed);
  std::vector<ShardPlan> plans;
  for (std::size_t n : {2, 4, 8})
    for (auto s : {ShardStrategy::kRoundRobin, ShardStrategy::kHotnessWeighted,
                   ShardStrategy::kSemanticGrouped})
      plans.push_back(make_plan(index, n, s, std::span<const double>(hot), o.seed));
  std::vector<int> bad(queries.size(), -1);
  parallel_for(queries.size(), [&](std::size_t q) {
    const auto ref = engine.decode_step_batchselect(queries.states[q], cfg.decode);
    const auto want = digest_outcomes(std::span(&ref, 1));
    for (std::size_t p = 0; p < plans.size(); ++p) {
      const auto got = sharded_decode_step(engine, plans[p], queries.states[q], cfg.decode).outcome;
      if (digest_outcomes(std::span(&got, 1)) != want) {
        bad[q] = static_cast<int>(p);
        return;
      }
    }
  });
  for (std::size_t q = 0; q < bad.size(); ++q)
    if (bad[q] >= 0) {
      const auto& plan = plans[static_cast<std::size_t>(bad[q])];
      return report_violation(o, "sharded outcome differs from the single-worker outcome",
                              {{"check", "shard_transparency"},
                               {"query_index", q},
                               {"query", queries.states[q]},
                               {"plan", plan_to_json(plan)}});
    }
  std::cout << "shards: " << queries.size() << " steps x " << plans.size()
            << " plans identical to single worker\n0 violations\n";
  return kExitOk;
}

int cmd_bench(const RunFlags& f, const std::string& out_dir) {
  const auto cfg = resolve_config(f);
  const auto report = run_benchmark(cfg);
  write_report(report, out_dir);
  print_summary(report, std::cout);
  std::cout << "wrote " << out_dir << "/report.json and report.csv\n";
  return kExitOk;
}

int cmd_ablate(const RunFlags& f, const std::string& axis, const std::vector<std::string>& values,
               const std::string& out_dir) {
  const auto cfg = resolve_config(f);
  const auto sweep = ablation_sweep(parse_sweep_axis(axis), values, cfg);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + out_dir + ": " + ec.message());
  const auto csv = sweep_to_csv(sweep);
  write_text(std::filesystem::path(out_dir) / "sweep.csv", csv);
  std::cout << csv;
  for (const auto& v : sweep.monotone_violations) std::cout << "violation: " << v << "\n";
  return sweep.monotone_violations.empty() ? kExitOk : kExitViolation;
}

int dispatch(CLI::App& app, int argc, const char* const* argv) {
  app.require_subcommand(1);

  std::uint64_t s_V = 5000, s_d = 64, s_modes = 50, s_seed = 1;
  double s_spread = 0.05;
  bool s_unit = false;
  std::string s_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic Gaussian-mixture embedding table");
  synth->add_option("--V", s_V, "Vocabulary size")->capture_default_str();
  synth->add_option("--d", s_d, "Hidden dimension")->capture_default_str();
  synth->add_option("--modes", s_modes, "Mixture components")->capture_default_str();
  synth->add_option("--spread", s_spread, "Per-coordinate row noise")->capture_default_str();
  synth->add_option("--seed", s_seed, "RNG seed")->capture_default_str();
  synth->add_flag("--unit-rows", s_unit, "Normalize every row to unit length");
  synth->add_option("--out", s_out, "Output table file")->required();

  std::string c_input, c_out, c_mode = "euclidean";
  BuildParams c_params;
  auto* cluster = app.add_subcommand("cluster", "Build, validate and save a cluster index");
  cluster->add_option("--input", c_input, "Embedding table file")->required();
  cluster->add_option("--C", c_params.num_clusters, "Cluster count (0 = default for V)")->capture_default_str();
  cluster->add_option("--mode", c_mode, "euclidean | spherical | bias_augmented")->capture_default_str();
  cluster->add_option("--iters", c_params.iters, "Max Lloyd iterations")->capture_default_str();
  cluster->add_option("--m", c_params.bias_depth, "Per-cluster top bias entries")->capture_default_str();
  cluster->add_option("--seed", c_params.seed, "k-means seed")->capture_default_str();
  cluster->add_option("--out", c_out, "Output index file")->required();

  VerifyOptions v;
  auto* verify = app.add_subcommand("verify", "Run the soundness suite against the dense oracle");
  verify->add_option("--table", v.table, "Embedding table file")->required();
  verify->add_option("--index", v.index, "Cluster index file")->required();
  verify->add_option("--steps", v.steps, "Queries per check")->capture_default_str();
  verify->add_option("--seed", v.seed, "Query seed")->capture_default_str();
  verify->add_option("--k", v.k, "Top-k size")->capture_default_str();
  verify->add_option("--eps", v.eps, "Certification epsilon")->capture_default_str();
  verify->add_option("--dump", v.dump, "Reproducer file written on violation")->capture_default_str();

  RunFlags b_flags;
  std::string b_out = "bench_out";
  auto* bench = app.add_subcommand("bench", "Run a benchmark and write report.json and report.csv");
  add_run_flags(*bench, b_flags, true);
  bench->add_option("--out", b_out, "Output directory")->capture_default_str();

  RunFlags sh_flags;
  std::string sh_out = "shard_out";
  auto* shard = app.add_subcommand("shard-sim", "Sharded decode simulation with communication ledger");
  add_run_flags(*shard, sh_flags, false);
  std::size_t sh_n = 4;
  std::string sh_strategy = "round_robin", sh_plan_out;
  shard->add_option("--N", sh_n, "Logical workers")->capture_default_str();
  shard->add_option("--strategy", sh_strategy, "round_robin | hotness_weighted | semantic_grouped")
      ->capture_default_str();
  shard->add_option("--plan-out", sh_plan_out, "Also write the shard plan as JSON");
  shard->add_option("--out", sh_out, "Output directory")->capture_default_str();

  RunFlags a_flags;
  std::string a_axis, a_out = "ablate_out";
  std::vector<std::string> a_values;
  auto* ablate = app.add_subcommand("ablate", "Sweep one parameter and write sweep.csv");
  add_run_flags(*ablate, a_flags, true);
  ablate->add_option("--axis", a_axis, "C | eps | K_max | bound_mode | shard_N")->required();
  ablate->add_option("--values", a_values, "Values to sweep")->required()->delimiter(',');
  ablate->add_option("--out", a_out, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (*synth) return cmd_synth(s_V, s_d, s_modes, s_spread, s_seed, s_unit, s_out);
  if (*cluster) {
    c_params.mode = parse_clustering_mode(c_mode);
    return cmd_cluster(c_input, c_params, c_out);
  }
  if (*verify) return cmd_verify(v);
  if (*bench) return cmd_bench(b_flags, b_out);
  if (*shard) {
    sh_flags.path = "sharded";
    sh_flags.workers = sh_n;
    sh_flags.strategy = sh_strategy;
    const auto cfg = resolve_config(sh_flags);
    if (!sh_plan_out.empty()) {
      const auto table = make_table(cfg);
      const auto index = build_index(table, cfg.index);
      std::vector<double> hot;
      if (cfg.shard.strategy == ShardStrategy::kHotnessWeighted)
        hot = zipf_hotness(index.num_clusters(), cfg.shard.hotness_exponent, cfg.seed);
      save_plan(make_plan(index, cfg.shard.workers, cfg.shard.strategy,
                          hot.empty() ? std::nullopt : std::optional<std::span<const double>>(hot),
                          cfg.seed),
                sh_plan_out);
    }
    return cmd_bench(sh_flags, sh_out);
  }
  if (*ablate) return cmd_ablate(a_flags, a_axis, a_values, a_out);
  return kExitUsage;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"csvd: certified sub-vocabulary decoding"};
  app.name("csvd");
  try {
    return dispatch(app, argc, argv);
  } catch (const ValidationFailure& e) {
    std::cerr << "violation: " << e.what() << "\n";
    std::cerr << e.diagnostic().dump(2) << "\n";
    return kExitViolation;
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.code()) << "): " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"csvd"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace csvd
