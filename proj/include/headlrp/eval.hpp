// SPDX-License-Identifier: Apache-2.0
//
// Faithfulness metrics and the benchmark / corruption sweeps built on them.
//
//   AOPC(k)  = mean_i  f_y(x_i) - f_y(x~_i^k)
//   LOdds(k) = mean_i  log( f_y(x~_i^k) / f_y(x_i) )
//
// with y the original prediction, f_y its softmax confidence and x~^k the input
// with its top-k% attributed content tokens pruned.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "headlrp/attribution.hpp"
#include "headlrp/corpus.hpp"
#include "headlrp/headmask.hpp"
#include "headlrp/model.hpp"
#include "json.hpp"

namespace headlrp {

enum class PrunePolicy { mask, remove };

std::string to_string(PrunePolicy policy);
PrunePolicy parse_policy(const std::string& name);

/// Confidences are floored here before taking logarithms.
inline constexpr double kConfidenceFloor = 1e-12;

struct EvalExample {
  std::vector<std::size_t> token_ids;
  std::size_t label = 0;  // classification
  // QA: answer tokens [span_begin, span_end) inside context [context_begin, context_end).
  std::size_t span_begin = 0, span_end = 0;
  std::size_t context_begin = 0, context_end = 0;
};

struct EvalDataset {
  Task task = Task::classification;
  std::vector<EvalExample> examples;
};

/// JSON-lines: {"tokens": [...], "label": k} or
/// {"tokens": [...], "span": [begin, end], "context": [begin, end]} (half-open;
/// context defaults to the whole input). Throws DataError on violations.
EvalDataset read_dataset(const std::filesystem::path& path, const ModelConfig& config);
void write_dataset(const std::filesystem::path& path, const EvalDataset& dataset);
void validate_dataset(const EvalDataset& dataset, const ModelConfig& config);

/// Number of content tokens pruned at k percent: ceil(k/100 * n).
std::size_t prune_count(std::size_t content_tokens, double k_percent);

/// Content positions by descending score, ties to the smaller index.
std::vector<std::size_t> rank_positions(std::span<const double> scores, const std::vector<bool>& eligible);

std::vector<std::size_t> prune(const ModelConfig& config, std::span<const std::size_t> token_ids,
                               std::span<const double> scores, double k_percent,
                               PrunePolicy policy = PrunePolicy::mask);

/// Softmax confidence of the original prediction under `logits`. For QA the
/// start and end probabilities are averaged.
double prediction_confidence(const ModelConfig& config, const Tensor& logits, const Prediction& original);

double aopc_term(double before, double after);
/// Also reports whether a confidence had to be floored.
double lodds_term(double before, double after, bool* floored = nullptr);

struct MetricPoint {
  double aopc = 0.0;
  double lodds = 0.0;
  std::size_t floored = 0;
};

/// AOPC and LOdds at one pruning rate. attributions[i] scores dataset example i.
MetricPoint evaluate_at(const ModelConfig& config, const ModelWeights& weights, const EvalDataset& dataset,
                        const std::vector<std::vector<double>>& attributions, double k_percent,
                        PrunePolicy policy = PrunePolicy::mask);

double aopc(const ModelConfig& config, const ModelWeights& weights, const EvalDataset& dataset,
            const std::vector<std::vector<double>>& attributions, double k_percent,
            PrunePolicy policy = PrunePolicy::mask);
double lodds(const ModelConfig& config, const ModelWeights& weights, const EvalDataset& dataset,
             const std::vector<std::vector<double>>& attributions, double k_percent,
             PrunePolicy policy = PrunePolicy::mask);

struct PrecisionResult {
  double value = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;  // examples with an empty answer span
};

PrecisionResult precision_at_k(const ModelConfig& config, const EvalDataset& dataset,
                               const std::vector<std::vector<double>>& attributions, std::size_t k = 20);

struct BenchmarkOptions {
  std::vector<Method> methods = {Method::ours, Method::gae, Method::rawatt, Method::rollout, Method::random};
  std::vector<double> k_grid = {10, 20, 30, 40, 50, 60, 70, 80, 90};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  PrunePolicy policy = PrunePolicy::mask;
  std::size_t precision_k = 20;
  AttributionOptions attribution;
};

struct MethodReport {
  std::string method;
  std::size_t runs = 1;
  std::vector<double> aopc, lodds;          // per k, mean over runs
  std::vector<double> aopc_std, lodds_std;  // per k, sample stddev over runs (0 for one run)
  double aopc_mean = 0.0, lodds_mean = 0.0;  // mean over the k grid
  double aopc_mean_std = 0.0, lodds_mean_std = 0.0;
  bool has_precision = false;
  double precision = 0.0, precision_std = 0.0;
  std::size_t degenerate = 0;  // examples flagged degenerate (max over runs)
  std::size_t floored = 0;
};

struct SweepRow {
  double rho = 0.0;
  std::size_t runs = 0;
  std::vector<double> aopc_runs, lodds_runs;  // grid-mean per seed
  double aopc_mean = 0.0, aopc_std = 0.0;
  double lodds_mean = 0.0, lodds_std = 0.0;
  std::size_t degenerate = 0;
};

struct EvalReport {
  Task task = Task::classification;
  std::size_t examples = 0;
  std::vector<double> k_grid;
  std::vector<MethodReport> methods;
  std::vector<SweepRow> sweep;
  std::size_t degenerate = 0;  // max over methods and sweep rows

  const MethodReport* find(const std::string& method) const;
};

/// Attribution scores for every example (parallel over examples).
struct DatasetAttributions {
  std::vector<std::vector<double>> scores;
  std::size_t degenerate = 0;
};

DatasetAttributions attribute_dataset(const ModelConfig& config, const ModelWeights& weights,
                                      const EvalDataset& dataset, Method method, const HeadMask& mask,
                                      std::uint64_t seed, const AttributionOptions& options = {});

EvalReport run_benchmark(const ModelConfig& config, const ModelWeights& weights, const EvalDataset& dataset,
                         const HeadMask& mask, const BenchmarkOptions& options = {});

/// One row per rho: corrupt the mask with each seed, rerun the method, average.
std::vector<SweepRow> corruption_sweep(const ModelConfig& config, const ModelWeights& weights,
                                       const EvalDataset& dataset, const HeadMask& mask,
                                       const std::vector<double>& rho_grid, const BenchmarkOptions& options = {});

double sample_stddev(std::span<const double> values);

nlohmann::ordered_json report_to_json(const EvalReport& report);
std::string report_to_csv(const EvalReport& report);
void write_report(const std::filesystem::path& json_path, const std::filesystem::path& csv_path,
                  const EvalReport& report);

}  // namespace headlrp
