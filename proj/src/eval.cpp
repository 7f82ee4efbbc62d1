// SPDX-License-Identifier: Apache-2.0
#include "headlrp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace headlrp {

namespace {

// Runs fn(i) for i in [0, n) in parallel and rethrows the first failure by index.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

double mean(std::span<const double> values) {
  if (values.empty()) return 0.0;
  double total = 0.0;
  for (double v : values) total += v;
  return total / static_cast<double>(values.size());
}

struct Original {
  Prediction prediction;
  double confidence = 0.0;
};

std::vector<Original> original_predictions(const ModelConfig& config, const ModelWeights& weights,
                                           const EvalDataset& dataset) {
  std::vector<Original> out(dataset.examples.size());
  parallel_for(out.size(), [&](std::size_t i) {
    const Tensor logits = forward(config, weights, dataset.examples[i].token_ids).logits;
    out[i].prediction = prediction_from_logits(config, logits);
    out[i].confidence = prediction_confidence(config, logits, out[i].prediction);
  });
  return out;
}

void check_attributions(const EvalDataset& dataset, const std::vector<std::vector<double>>& attributions) {
  if (attributions.size() != dataset.examples.size()) {
    throw std::invalid_argument("attributions cover " + std::to_string(attributions.size()) + " of " +
                                std::to_string(dataset.examples.size()) + " examples");
  }
  for (std::size_t i = 0; i < attributions.size(); ++i) {
    if (attributions[i].size() != dataset.examples[i].token_ids.size()) {
      throw DimensionError("example " + std::to_string(i) + ": " + std::to_string(attributions[i].size()) +
                           " scores for " + std::to_string(dataset.examples[i].token_ids.size()) + " tokens");
    }
  }
}

std::vector<MetricPoint> metric_curve(const ModelConfig& config, const ModelWeights& weights,
                                      const EvalDataset& dataset, const std::vector<Original>& originals,
                                      const std::vector<std::vector<double>>& attributions,
                                      const std::vector<double>& k_grid, PrunePolicy policy) {
  check_attributions(dataset, attributions);
  if (policy == PrunePolicy::remove && config.task == Task::qa) {
    throw std::invalid_argument("policy 'remove' shifts answer positions; use 'mask' for QA");
  }
  const std::size_t n = dataset.examples.size(), nk = k_grid.size();
  std::vector<double> after(n * nk);
  parallel_for(n, [&](std::size_t i) {
    const auto& ids = dataset.examples[i].token_ids;
    for (std::size_t q = 0; q < nk; ++q) {
      const auto pruned = prune(config, ids, attributions[i], k_grid[q], policy);
      after[i * nk + q] = prediction_confidence(config, forward(config, weights, pruned).logits,
                                                originals[i].prediction);
    }
  });
  std::vector<MetricPoint> curve(nk);
  if (n == 0) return curve;
  for (std::size_t q = 0; q < nk; ++q) {
    double a = 0.0, l = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      bool floored = false;
      a += aopc_term(originals[i].confidence, after[i * nk + q]);
      l += lodds_term(originals[i].confidence, after[i * nk + q], &floored);
      curve[q].floored += floored ? 1 : 0;
    }
    curve[q].aopc = a / static_cast<double>(n);
    curve[q].lodds = l / static_cast<double>(n);
  }
  return curve;
}

void check_grid(const std::vector<double>& grid, const std::string& name, double hi) {
  if (grid.empty()) throw std::invalid_argument(name + " is empty");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] >= 0.0 && grid[i] <= hi)) {
      throw std::invalid_argument(name + " value " + std::to_string(grid[i]) + " outside [0, " +
                                  std::to_string(hi) + "]");
    }
    if (i > 0 && grid[i] <= grid[i - 1]) throw std::invalid_argument(name + " must be strictly increasing");
  }
}

}  // namespace

std::string to_string(PrunePolicy policy) { return policy == PrunePolicy::mask ? "mask" : "delete"; }

PrunePolicy parse_policy(const std::string& name) {
  if (name == "mask") return PrunePolicy::mask;
  if (name == "delete" || name == "remove") return PrunePolicy::remove;
  throw std::invalid_argument("unknown pruning policy '" + name + "' (valid: mask, delete)");
}

void validate_dataset(const EvalDataset& dataset, const ModelConfig& config) {
  for (std::size_t i = 0; i < dataset.examples.size(); ++i) {
    const auto& ex = dataset.examples[i];
    const std::string where = "example " + std::to_string(i);
    if (ex.token_ids.empty()) throw DataError(where + ": no tokens");
    if (ex.token_ids.size() > config.max_positions) {
      throw DataError(where + ": " + std::to_string(ex.token_ids.size()) + " tokens exceed max_positions " +
                      std::to_string(config.max_positions));
    }
    for (std::size_t t : ex.token_ids) {
      if (t >= config.vocab_size) throw DataError(where + ": token id " + std::to_string(t) + " outside vocabulary");
    }
    if (dataset.task == Task::classification) {
      if (ex.label >= config.num_classes) {
        throw DataError(where + ": label " + std::to_string(ex.label) + " not below " +
                        std::to_string(config.num_classes));
      }
    } else {
      const std::size_t T = ex.token_ids.size();
      if (ex.context_begin > ex.context_end || ex.context_end > T) throw DataError(where + ": context out of bounds");
      if (ex.span_begin > ex.span_end || ex.span_begin < ex.context_begin || ex.span_end > ex.context_end) {
        throw DataError(where + ": answer span outside the context");
      }
    }
  }
}

EvalDataset read_dataset(const std::filesystem::path& path, const ModelConfig& config) {
  std::ifstream in(path);
  if (!in) throw DataError("dataset not found: " + path.string());
  EvalDataset dataset;
  dataset.task = config.task;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    EvalExample ex;
    try {
      const auto j = nlohmann::json::parse(line);
      ex.token_ids = j.at("tokens").get<std::vector<std::size_t>>();
      if (config.task == Task::classification) {
        ex.label = j.at("label").get<std::size_t>();
      } else {
        const auto span = j.at("span").get<std::vector<std::size_t>>();
        if (span.size() != 2) throw DataError("span must be [begin, end]");
        ex.span_begin = span[0];
        ex.span_end = span[1];
        ex.context_begin = 0;
        ex.context_end = ex.token_ids.size();
        if (j.contains("context")) {
          const auto context = j.at("context").get<std::vector<std::size_t>>();
          if (context.size() != 2) throw DataError("context must be [begin, end]");
          ex.context_begin = context[0];
          ex.context_end = context[1];
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    dataset.examples.push_back(std::move(ex));
  }
  validate_dataset(dataset, config);
  return dataset;
}

void write_dataset(const std::filesystem::path& path, const EvalDataset& dataset) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& ex : dataset.examples) {
    nlohmann::ordered_json j;
    j["tokens"] = ex.token_ids;
    if (dataset.task == Task::classification) {
      j["label"] = ex.label;
    } else {
      j["span"] = {ex.span_begin, ex.span_end};
      j["context"] = {ex.context_begin, ex.context_end};
    }
    out << j.dump() << '\n';
  }
}

std::size_t prune_count(std::size_t content_tokens, double k_percent) {
  if (!(k_percent >= 0.0 && k_percent <= 100.0)) {
    throw std::invalid_argument("pruning rate " + std::to_string(k_percent) + " outside [0, 100]");
  }
  // The small slack keeps e.g. 30% of 10 at 3 despite rounding in k/100.
  const double raw = std::ceil(k_percent / 100.0 * static_cast<double>(content_tokens) - 1e-9);
  return std::min(content_tokens, static_cast<std::size_t>(std::max(0.0, raw)));
}

std::vector<std::size_t> rank_positions(std::span<const double> scores, const std::vector<bool>& eligible) {
  std::vector<std::size_t> order;
  for (std::size_t t = 0; t < scores.size(); ++t)
    if (eligible[t]) order.push_back(t);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

std::vector<std::size_t> prune(const ModelConfig& config, std::span<const std::size_t> token_ids,
                               std::span<const double> scores, double k_percent, PrunePolicy policy) {
  if (scores.size() != token_ids.size()) {
    throw DimensionError("prune: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(token_ids.size()) + " tokens");
  }
  const auto content = content_positions(config, token_ids);
  const auto order = rank_positions(scores, content);
  const std::size_t n = prune_count(order.size(), k_percent);
  std::vector<bool> drop(token_ids.size(), false);
  for (std::size_t i = 0; i < n; ++i) drop[order[i]] = true;
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < token_ids.size(); ++t) {
    if (!drop[t]) {
      out.push_back(token_ids[t]);
    } else if (policy == PrunePolicy::mask) {
      out.push_back(config.mask_token_id);
    }
  }
  return out;
}

double prediction_confidence(const ModelConfig& config, const Tensor& logits, const Prediction& original) {
  auto prob = [](std::span<const double> row, std::size_t index) {
    const double hi = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double v : row) total += std::exp(v - hi);
    return std::exp(row[index] - hi) / total;
  };
  if (config.task == Task::classification) return prob(logits.data(), original.label);
  return 0.5 * (prob(logits.row(0), original.label) + prob(logits.row(1), original.end_label));
}

double aopc_term(double before, double after) { return before - after; }

double lodds_term(double before, double after, bool* floored) {
  const bool low = before < kConfidenceFloor || after < kConfidenceFloor;
  if (floored) *floored = low;
  return std::log(std::max(after, kConfidenceFloor) / std::max(before, kConfidenceFloor));
}

MetricPoint evaluate_at(const ModelConfig& config, const ModelWeights& weights, const EvalDataset& dataset,
                        const std::vector<std::vector<double>>& attributions, double k_percent, PrunePolicy policy) {
  const auto originals = original_predictions(config, weights, dataset);
  return metric_curve(config, weights, dataset, originals, attributions, {k_percent}, policy).front();
}

double aopc(const ModelConfig& config, const ModelWeights& weights, const EvalDataset& dataset,
            const std::vector<std::vector<double>>& attributions, double k_percent, PrunePolicy policy) {
  return evaluate_at(config, weights, dataset, attributions, k_percent, policy).aopc;
}

double lodds(const ModelConfig& config, const ModelWeights& weights, const EvalDataset& dataset,
             const std::vector<std::vector<double>>& attributions, double k_percent, PrunePolicy policy) {
  return evaluate_at(config, weights, dataset, attributions, k_percent, policy).lodds;
}

PrecisionResult precision_at_k(const ModelConfig& config, const EvalDataset& dataset,
                               const std::vector<std::vector<double>>& attributions, std::size_t k) {
  if (dataset.task != Task::qa) throw std::invalid_argument("precision@k needs a QA dataset");
  if (k == 0) throw std::invalid_argument("precision@k needs k >= 1");
  check_attributions(dataset, attributions);
  PrecisionResult result;
  double total = 0.0;
  for (std::size_t i = 0; i < dataset.examples.size(); ++i) {
    const auto& ex = dataset.examples[i];
    std::vector<bool> pool(ex.token_ids.size(), false);
    std::size_t pool_size = 0;
    for (std::size_t t = ex.context_begin; t < ex.context_end; ++t) {
      pool[t] = !config.is_special(ex.token_ids[t]);
      pool_size += pool[t] ? 1 : 0;
    }
    if (ex.span_begin == ex.span_end || pool_size == 0) {
      ++result.skipped;
      continue;
    }
    const auto order = rank_positions(attributions[i], pool);
    const std::size_t top = std::min(k, pool_size);
    std::size_t hits = 0;
    for (std::size_t r = 0; r < top; ++r) hits += (order[r] >= ex.span_begin && order[r] < ex.span_end) ? 1 : 0;
    total += static_cast<double>(hits) / static_cast<double>(top);
    ++result.evaluated;
  }
  if (result.evaluated > 0) result.value = total / static_cast<double>(result.evaluated);
  return result;
}

double sample_stddev(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  const double m = mean(values);
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

DatasetAttributions attribute_dataset(const ModelConfig& config, const ModelWeights& weights,
                                      const EvalDataset& dataset, Method method, const HeadMask& mask,
                                      std::uint64_t seed, const AttributionOptions& options) {
  DatasetAttributions out;
  out.scores.resize(dataset.examples.size());
  std::vector<char> degenerate(dataset.examples.size(), 0);
  parallel_for(dataset.examples.size(), [&](std::size_t i) {
    const AttributionResult r = attribute(config, weights, dataset.examples[i].token_ids, method, mask, seed, options);
    out.scores[i] = r.scores;
    degenerate[i] = r.degenerate ? 1 : 0;
  });
  for (char d : degenerate) out.degenerate += static_cast<std::size_t>(d);
  return out;
}

const MethodReport* EvalReport::find(const std::string& method) const {
  for (const auto& m : methods)
    if (m.method == method) return &m;
  return nullptr;
}

EvalReport run_benchmark(const ModelConfig& config, const ModelWeights& weights, const EvalDataset& dataset,
                         const HeadMask& mask, const BenchmarkOptions& options) {
  check_grid(options.k_grid, "k grid", 100.0);
  if (options.methods.empty()) throw std::invalid_argument("no methods requested");
  const bool needs_seeds = std::find(options.methods.begin(), options.methods.end(), Method::random) !=
                           options.methods.end();
  if (needs_seeds && options.seeds.empty()) throw std::invalid_argument("method 'random' needs at least one seed");
  if (dataset.task != config.task) throw std::invalid_argument("dataset task does not match the model task");

  EvalReport report;
  report.task = dataset.task;
  report.examples = dataset.examples.size();
  report.k_grid = options.k_grid;
  const auto originals = original_predictions(config, weights, dataset);
  const std::size_t nk = options.k_grid.size();

  for (Method method : options.methods) {
    MethodReport mr;
    mr.method = to_string(method);
    const std::vector<std::uint64_t> seeds =
        method == Method::random ? options.seeds : std::vector<std::uint64_t>{options.seeds.empty() ? 0 : options.seeds.front()};
    mr.runs = seeds.size();
    std::vector<std::vector<double>> aopc_runs(nk), lodds_runs(nk);
    std::vector<double> aopc_agg, lodds_agg, precision_runs;
    for (std::uint64_t seed : seeds) {
      const auto attr = attribute_dataset(config, weights, dataset, method, mask, seed, options.attribution);
      mr.degenerate = std::max(mr.degenerate, attr.degenerate);
      const auto curve = metric_curve(config, weights, dataset, originals, attr.scores, options.k_grid, options.policy);
      std::vector<double> a(nk), l(nk);
      for (std::size_t q = 0; q < nk; ++q) {
        a[q] = curve[q].aopc;
        l[q] = curve[q].lodds;
        aopc_runs[q].push_back(a[q]);
        lodds_runs[q].push_back(l[q]);
        mr.floored = std::max(mr.floored, curve[q].floored);
      }
      aopc_agg.push_back(mean(a));
      lodds_agg.push_back(mean(l));
      if (dataset.task == Task::qa) {
        precision_runs.push_back(precision_at_k(config, dataset, attr.scores, options.precision_k).value);
      }
    }
    for (std::size_t q = 0; q < nk; ++q) {
      mr.aopc.push_back(mean(aopc_runs[q]));
      mr.lodds.push_back(mean(lodds_runs[q]));
      mr.aopc_std.push_back(sample_stddev(aopc_runs[q]));
      mr.lodds_std.push_back(sample_stddev(lodds_runs[q]));
    }
    mr.aopc_mean = mean(mr.aopc);
    mr.lodds_mean = mean(mr.lodds);
    mr.aopc_mean_std = sample_stddev(aopc_agg);
    mr.lodds_mean_std = sample_stddev(lodds_agg);
    if (!precision_runs.empty()) {
      mr.has_precision = true;
      mr.precision = mean(precision_runs);
      mr.precision_std = sample_stddev(precision_runs);
    }
    report.degenerate = std::max(report.degenerate, mr.degenerate);
    report.methods.push_back(std::move(mr));
  }
  return report;
}

std::vector<SweepRow> corruption_sweep(const ModelConfig& config, const ModelWeights& weights,
                                       const EvalDataset& dataset, const HeadMask& mask,
                                       const std::vector<double>& rho_grid, const BenchmarkOptions& options) {
  check_grid(options.k_grid, "k grid", 100.0);
  check_grid(rho_grid, "rho grid", 1.0);
  if (options.seeds.empty()) throw std::invalid_argument("corruption sweep needs at least one seed");
  if (mask.count() == mask.num_blocks() * mask.num_heads()) {
    throw std::invalid_argument("corruption sweep needs a mask with at least one unselected head");
  }
  const auto originals = original_predictions(config, weights, dataset);
  std::vector<SweepRow> rows;
  for (double rho : rho_grid) {
    SweepRow row;
    row.rho = rho;
    row.runs = options.seeds.size();
    for (std::uint64_t seed : options.seeds) {
      const HeadMask corrupted = corrupt_mask(mask, rho, seed);
      const auto attr = attribute_dataset(config, weights, dataset, Method::ours, corrupted, seed, options.attribution);
      row.degenerate = std::max(row.degenerate, attr.degenerate);
      const auto curve = metric_curve(config, weights, dataset, originals, attr.scores, options.k_grid, options.policy);
      std::vector<double> a, l;
      for (const auto& p : curve) {
        a.push_back(p.aopc);
        l.push_back(p.lodds);
      }
      row.aopc_runs.push_back(mean(a));
      row.lodds_runs.push_back(mean(l));
    }
    row.aopc_mean = mean(row.aopc_runs);
    row.lodds_mean = mean(row.lodds_runs);
    row.aopc_std = sample_stddev(row.aopc_runs);
    row.lodds_std = sample_stddev(row.lodds_runs);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace headlrp
