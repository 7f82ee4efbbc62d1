// SPDX-License-Identifier: Apache-2.0
#include "headlrp/cli.hpp"

#include <omp.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "headlrp/attribution.hpp"
#include "headlrp/corpus.hpp"
#include "headlrp/eval.hpp"
#include "headlrp/headmask.hpp"
#include "headlrp/render.hpp"
#include "headlrp/synthetic.hpp"
#include "headlrp/weights_io.hpp"

namespace headlrp {

namespace {

namespace fs = std::filesystem;

// Error classes mapped to exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string weights, corpus, dataset, mask = "mask.json", out;
  double xi_synt = kDefaultXiSynt, xi_pos = kDefaultXiPos;
  std::vector<int> offsets = kDefaultOffsets;
  std::vector<double> k_grid = {10, 20, 30, 40, 50, 60, 70, 80, 90};
  std::vector<double> rho_grid = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::vector<std::string> methods = {"ours", "gae", "rawatt", "rollout", "random"};
  std::string policy = "mask";
  std::string task;
  int jobs = 0;
  bool row_normalize = false;
  bool mask_at_propagation = false;
  std::size_t precision_k = 20;
  // explain
  std::vector<std::size_t> ids;
  long row = -1;
  // synth
  std::uint64_t synth_seed = 7;
  std::size_t synth_examples = 24;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

fs::path out_dir(const RunConfig& rc) {
  fs::path dir = rc.out;
  if (dir.empty()) {
    const char* env = std::getenv("HEADLRP_OUT");
    dir = env && *env ? env : "headlrp_out";
  }
  fs::create_directories(dir);
  return dir;
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError("--" + what + " is required");
  if (!fs::is_regular_file(path)) throw ConfigError(what + " not found: " + path);
}

std::pair<ModelConfig, ModelWeights> load_model(const RunConfig& rc) {
  require_file(rc.weights, "weights");
  auto model = load_weights(rc.weights);
  if (!rc.task.empty() && parse_task(rc.task) != model.first.task) {
    throw ConfigError("--task " + rc.task + " does not match the model's task " + to_string(model.first.task));
  }
  return model;
}

HeadMask load_mask(const RunConfig& rc, const ModelConfig& config) {
  HeadMask mask;
  if (rc.mask == "all-ones") {
    mask = HeadMask::all_ones(config.num_blocks, config.num_heads);
  } else {
    require_file(rc.mask, "mask");
    mask = read_mask(rc.mask);
  }
  if (mask.num_blocks() != config.num_blocks || mask.num_heads() != config.num_heads) {
    throw ConfigError("mask is " + std::to_string(mask.num_blocks()) + "x" + std::to_string(mask.num_heads()) +
                      " but the model has " + std::to_string(config.num_blocks) + "x" +
                      std::to_string(config.num_heads) + " heads");
  }
  return mask;
}

void check_unit(double v, const std::string& name) {
  if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(name + " must lie in [0, 1]");
}

void check_sorted(const std::vector<double>& grid, const std::string& name, double hi) {
  if (grid.empty()) throw ConfigError(name + " must not be empty");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] >= 0.0 && grid[i] <= hi)) throw ConfigError(name + " values must lie in [0, " + std::to_string(hi) + "]");
    if (i > 0 && grid[i] <= grid[i - 1]) throw ConfigError(name + " must be strictly increasing");
  }
}

BenchmarkOptions benchmark_options(const RunConfig& rc) {
  BenchmarkOptions o;
  o.methods.clear();
  for (const auto& m : rc.methods) {
    try {
      o.methods.push_back(parse_method(m));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (o.methods.empty()) throw ConfigError("at least one --method is required");
  check_sorted(rc.k_grid, "--k-grid", 100.0);
  o.k_grid = rc.k_grid;
  o.seeds = rc.seeds;
  try {
    o.policy = parse_policy(rc.policy);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  o.precision_k = rc.precision_k;
  o.attribution.row_normalize = rc.row_normalize;
  o.attribution.mask_at_propagation = rc.mask_at_propagation;
  return o;
}

void check_degeneracy(std::size_t degenerate, std::size_t examples) {
  if (examples > 0 && 2 * degenerate > examples) {
    throw NumericError(std::to_string(degenerate) + " of " + std::to_string(examples) +
                       " examples fell back to uniform attribution");
  }
}

int cmd_build_mask(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  check_unit(rc.xi_synt, "--xi-synt");
  check_unit(rc.xi_pos, "--xi-pos");
  if (rc.offsets.empty()) throw ConfigError("--offsets must not be empty");
  require_file(rc.corpus, "corpus");
  const auto [config, weights] = load_model(rc);
  const ParsedCorpus corpus = read_corpus(rc.corpus);
  const RelationStats stats = compute_relation_stats(corpus);
  for (const auto& w : stats.warnings) err << "warning: " << w << '\n';
  const HeadFrequencies freqs = compute_head_frequencies(config, weights, corpus, rc.offsets);
  const HeadMask mask = combine_masks(build_syntactic_mask(freqs, stats, rc.xi_synt),
                                      build_positional_mask(freqs, rc.xi_pos));
  const fs::path dir = out_dir(rc);
  write_mask(dir / "mask.json", mask, diagnostics_to_json(freqs, stats));
  write_text(dir / "mask.svg", mask_grid_svg(mask));
  write_text(dir / "mask.html", mask_grid_html(mask));
  out << "selected " << mask.count() << " of " << mask.num_blocks() * mask.num_heads() << " heads\n";
  for (std::size_t b = 0; b < mask.num_blocks(); ++b)
    for (std::size_t m = 0; m < mask.num_heads(); ++m) {
      if (!mask.at(b, m)) continue;
      out << "  block " << b << " head " << m << ":";
      for (const auto& r : mask.provenance(b, m)) out << ' ' << r;
      out << '\n';
    }
  out << "wrote " << (dir / "mask.json").string() << '\n';
  return kExitOk;
}

int cmd_explain(const RunConfig& rc, std::ostream& out) {
  const auto [config, weights] = load_model(rc);
  std::vector<std::size_t> ids = rc.ids;
  if (ids.empty()) {
    if (rc.dataset.empty() || rc.row < 0) throw ConfigError("explain needs --ids or --dataset with --row");
    require_file(rc.dataset, "dataset");
    const EvalDataset dataset = read_dataset(rc.dataset, config);
    if (static_cast<std::size_t>(rc.row) >= dataset.examples.size()) {
      throw ConfigError("--row " + std::to_string(rc.row) + " outside the dataset's " +
                        std::to_string(dataset.examples.size()) + " examples");
    }
    ids = dataset.examples[static_cast<std::size_t>(rc.row)].token_ids;
  }
  if (ids.size() > config.max_positions) throw ConfigError("input longer than max_positions");
  for (std::size_t id : ids)
    if (id >= config.vocab_size) throw ConfigError("token id " + std::to_string(id) + " outside vocabulary");
  const HeadMask mask = load_mask(rc, config);
  const BenchmarkOptions opts = benchmark_options(rc);
  const std::uint64_t seed = rc.seeds.empty() ? 0 : rc.seeds.front();

  std::string jsonl;
  std::vector<HeatmapRow> rows;
  std::vector<std::string> tokens;
  for (std::size_t id : ids) tokens.push_back(std::to_string(id));
  for (Method method : opts.methods) {
    const AttributionResult r = attribute(config, weights, ids, method, mask, seed, opts.attribution);
    jsonl += attribution_to_json(ids, r).dump() + "\n";
    rows.push_back({to_string(method), tokens, r.scores});
  }
  const fs::path dir = out_dir(rc);
  write_text(dir / "attribution.jsonl", jsonl);
  write_text(dir / "heatmap.html", token_heatmap_html(rows));
  out << jsonl;
  return kExitOk;
}

EvalDataset load_dataset(const RunConfig& rc, const ModelConfig& config) {
  require_file(rc.dataset, "dataset");
  return read_dataset(rc.dataset, config);
}

int cmd_eval(const RunConfig& rc, std::ostream& out) {
  const auto [config, weights] = load_model(rc);
  const BenchmarkOptions opts = benchmark_options(rc);
  if (std::find(opts.methods.begin(), opts.methods.end(), Method::random) != opts.methods.end() && rc.seeds.empty()) {
    throw ConfigError("method 'random' needs at least one --seed");
  }
  const HeadMask mask = load_mask(rc, config);
  const EvalDataset dataset = load_dataset(rc, config);
  const EvalReport report = run_benchmark(config, weights, dataset, mask, opts);
  const fs::path dir = out_dir(rc);
  write_report(dir / "report.json", dir / "report.csv", report);
  for (const auto& m : report.methods) {
    out << m.method << ": AOPC " << m.aopc_mean << "  LOdds " << m.lodds_mean;
    if (m.has_precision) out << "  precision@" << rc.precision_k << ' ' << m.precision;
    out << '\n';
  }
  out << "wrote " << (dir / "report.csv").string() << '\n';
  check_degeneracy(report.degenerate, report.examples);
  return kExitOk;
}

int cmd_ablate(const RunConfig& rc, std::ostream& out) {
  const auto [config, weights] = load_model(rc);
  BenchmarkOptions opts = benchmark_options(rc);
  check_sorted(rc.rho_grid, "--rho-grid", 1.0);
  if (rc.seeds.empty()) throw ConfigError("ablation needs at least one --seed");
  const HeadMask mask = load_mask(rc, config);
  if (mask.count() == mask.num_blocks() * mask.num_heads()) {
    throw ConfigError("ablation needs a mask with at least one unselected head");
  }
  const EvalDataset dataset = load_dataset(rc, config);
  opts.methods = {Method::gae};
  EvalReport report = run_benchmark(config, weights, dataset, mask, opts);
  report.sweep = corruption_sweep(config, weights, dataset, mask, rc.rho_grid, opts);
  for (const auto& row : report.sweep) report.degenerate = std::max(report.degenerate, row.degenerate);
  const fs::path dir = out_dir(rc);
  write_report(dir / "ablation.json", dir / "ablation.csv", report);
  const MethodReport& gae = report.methods.front();
  write_text(dir / "ablation.svg", ablation_svg(report.sweep, gae.aopc_mean, gae.lodds_mean));
  for (const auto& row : report.sweep) {
    out << "rho " << row.rho << ": AOPC " << row.aopc_mean << " +- " << row.aopc_std << "  LOdds "
        << row.lodds_mean << " +- " << row.lodds_std << '\n';
  }
  out << "gae: AOPC " << gae.aopc_mean << "  LOdds " << gae.lodds_mean << '\n';
  check_degeneracy(report.degenerate, report.examples);
  return kExitOk;
}

int cmd_synth(const RunConfig& rc, std::ostream& out) {
  const Task task = rc.task.empty() ? Task::classification : parse_task(rc.task);
  const auto bundle = synthetic::make_toy_bundle(rc.synth_seed, task, rc.synth_examples);
  const fs::path dir = out_dir(rc);
  synthetic::write_toy_bundle(dir, bundle);
  out << "wrote toy bundle to " << dir.string() << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  RunConfig rc;
  CLI::App app{"Head-restricted relevance propagation for Transformer encoders", "headlrp"};
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "Flat key=value file; command-line flags override it");
  app.require_subcommand(1);

  app.add_option("--weights", rc.weights, "Weights manifest");
  app.add_option("--corpus", rc.corpus, "Dependency-parsed corpus (JSON lines)");
  app.add_option("--dataset", rc.dataset, "Evaluation dataset (JSON lines)");
  app.add_option("--mask", rc.mask, "Head mask JSON, or 'all-ones'");
  app.add_option("--out", rc.out, "Output directory (default: $HEADLRP_OUT, else ./headlrp_out)");
  app.add_option("--xi-synt", rc.xi_synt, "Syntactic head margin");
  app.add_option("--xi-pos", rc.xi_pos, "Positional head threshold");
  app.add_option("--offsets", rc.offsets, "Relative offsets probed for positional heads")->delimiter(',');
  app.add_option("--k-grid", rc.k_grid, "Pruning rates in percent")->delimiter(',');
  app.add_option("--rho-grid", rc.rho_grid, "Mask corruption rates")->delimiter(',');
  app.add_option("--seed", rc.seeds, "Seeds for random masks (repeatable)")->delimiter(',');
  app.add_option("--method", rc.methods, "ours, gae, rawatt, rollout, random (repeatable)")->delimiter(',');
  app.add_option("--policy", rc.policy, "Pruning policy: mask or delete");
  app.add_option("--task", rc.task, "classification or qa (must match the model)");
  app.add_option("--jobs", rc.jobs, "Worker threads (0: OpenMP default)");
  app.add_option("--precision-k", rc.precision_k, "k for precision@k on QA data");
  app.add_flag("--row-normalize", rc.row_normalize, "Row-normalise rollout matrices");
  app.add_flag("--mask-at-propagation", rc.mask_at_propagation, "Gate masked heads during propagation too");

  auto* build = app.add_subcommand("build-mask", "Find syntactic and positional heads");
  auto* explain = app.add_subcommand("explain", "Attribute one input");
  explain->add_option("--ids", rc.ids, "Comma-separated token ids")->delimiter(',');
  explain->add_option("--row", rc.row, "Dataset row to explain");
  auto* eval = app.add_subcommand("eval", "AOPC / LOdds / precision@k benchmark");
  auto* ablate = app.add_subcommand("ablate", "Mask corruption sweep");
  auto* synth = app.add_subcommand("synth", "Write a toy model, corpus and dataset");
  synth->add_option("--synth-seed", rc.synth_seed, "Toy bundle seed");
  synth->add_option("--examples", rc.synth_examples, "Toy dataset size");
  for (auto* sub : {build, explain, eval, ablate, synth}) sub->fallthrough();

  std::vector<std::string> argv_store = {"headlrp"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }
  if (rc.jobs < 0) {
    err << "error: --jobs must be >= 0\n";
    return kExitConfig;
  }
  if (rc.jobs > 0) omp_set_num_threads(rc.jobs);

  try {
    if (*build) return cmd_build_mask(rc, out, err);
    if (*explain) return cmd_explain(rc, out);
    if (*eval) return cmd_eval(rc, out);
    if (*ablate) return cmd_ablate(rc, out);
    if (*synth) return cmd_synth(rc, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const LoadError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitConfig;
}

}  // namespace headlrp
