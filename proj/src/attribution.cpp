// SPDX-License-Identifier: Apache-2.0
#include "headlrp/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "headlrp/kernels.hpp"

namespace headlrp {

namespace {

Tensor identity(std::size_t n) {
  Tensor eye({n, n});
  for (std::size_t i = 0; i < n; ++i) eye(i, i) = 1.0;
  return eye;
}

void normalize_rows(Tensor& a) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto row = a.row(i);
    double total = 0.0;
    for (double v : row) total += v;
    if (total > 0.0)
      for (double& v : row) v /= total;
  }
}

// Target row of Abar^(B-1) ... Abar^(0), with non-content columns zeroed.
std::vector<double> extract_scores(const ModelConfig& config, const ForwardTrace& trace,
                                   const std::vector<Tensor>& blocks, std::size_t row, bool& degenerate) {
  const std::size_t T = trace.length();
  Tensor product = identity(T);
  for (std::size_t b = blocks.size(); b-- > 0;) product = matmul(product, blocks[b]);
  const auto content = content_positions(config, trace.token_ids);
  std::vector<double> scores(T, 0.0);
  double total = 0.0;
  std::size_t n_content = 0;
  for (std::size_t j = 0; j < T; ++j) {
    if (!content[j]) continue;
    scores[j] = std::max(0.0, product(row, j));
    total += scores[j];
    ++n_content;
  }
  degenerate = !(total > kDegenerateSum);
  if (degenerate && n_content > 0) {
    for (std::size_t j = 0; j < T; ++j) scores[j] = content[j] ? 1.0 / static_cast<double>(n_content) : 0.0;
  }
  return scores;
}

std::size_t output_count(const ForwardTrace& trace) { return trace.output_size(); }

}  // namespace

std::string to_string(Method method) {
  switch (method) {
    case Method::ours: return "ours";
    case Method::gae: return "gae";
    case Method::rawatt: return "rawatt";
    case Method::rollout: return "rollout";
    case Method::random: return "random";
  }
  return "?";
}

const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names = {"ours", "gae", "rawatt", "rollout", "random"};
  return names;
}

Method parse_method(const std::string& name) {
  if (name == "ours") return Method::ours;
  if (name == "gae") return Method::gae;
  if (name == "rawatt") return Method::rawatt;
  if (name == "rollout") return Method::rollout;
  if (name == "random") return Method::random;
  std::string valid;
  for (const auto& n : method_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown method '" + name + "' (valid methods: " + valid + ")");
}

std::string to_string(RenormStatus status) {
  switch (status) {
    case RenormStatus::ok: return "ok";
    case RenormStatus::sign_anomaly: return "sign_anomaly";
    case RenormStatus::degenerate: return "degenerate";
    case RenormStatus::empty: return "empty";
  }
  return "?";
}

std::vector<bool> content_positions(const ModelConfig& config, std::span<const std::size_t> token_ids) {
  std::vector<bool> content(token_ids.size());
  for (std::size_t t = 0; t < token_ids.size(); ++t) content[t] = !config.is_special(token_ids[t]);
  if (config.task == Task::classification && config.cls_index < token_ids.size()) content[config.cls_index] = false;
  return content;
}

MaskedRelevance apply_mask(const Tensor& head_relevance, const HeadMask& mask, std::size_t block) {
  if (head_relevance.rank() != 3 || head_relevance.dim(0) != mask.num_heads() || block >= mask.num_blocks()) {
    throw DimensionError("apply_mask: relevance " + shape_string(head_relevance.shape()) + " does not fit a " +
                         std::to_string(mask.num_blocks()) + "x" + std::to_string(mask.num_heads()) +
                         " mask at block " + std::to_string(block));
  }
  MaskedRelevance out{Tensor(head_relevance.shape()), Tensor(head_relevance.shape())};
  for (std::size_t m = 0; m < mask.num_heads(); ++m) {
    if (!mask.at(block, m)) continue;
    const bool synt = mask.is_syntactic(block, m);
    const bool pos = mask.is_positional(block, m);
    const double to_synt = synt == pos ? 0.5 : (synt ? 1.0 : 0.0);
    const double to_pos = 1.0 - to_synt;
    const Tensor slice = head_relevance.slice(m);
    out.synt.set_slice(m, scale(slice, to_synt));
    out.pos.set_slice(m, scale(slice, to_pos));
  }
  return out;
}

Renormalized renormalize(const MaskedRelevance& masked, double target_total) {
  const double s = masked.synt.sum();
  const double p = masked.pos.sum();
  Renormalized out{masked.synt, masked.pos, RenormStatus::ok};
  const double combined = s + p;
  if ((std::abs(s) < kDegenerateSum && std::abs(p) < kDegenerateSum) || std::abs(combined) < kDegenerateSum) {
    out.status = RenormStatus::degenerate;
    out.synt = Tensor(masked.synt.shape());
    out.pos = Tensor(masked.pos.shape());
    return out;
  }
  if (s * p < 0.0) {
    // |S| + |P| != |S + P| here, so the two factors below cannot restore the
    // total; fall back to one common factor.
    out.status = RenormStatus::sign_anomaly;
    const double factor = target_total / combined;
    out.synt = scale(masked.synt, factor);
    out.pos = scale(masked.pos, factor);
    return out;
  }
  auto factor = [&](double component) {
    if (component == 0.0) return 0.0;
    return std::abs(component) / std::abs(combined) * (target_total / component);
  };
  out.synt = scale(masked.synt, factor(s));
  out.pos = scale(masked.pos, factor(p));
  return out;
}

AttributionResult rollout(const ModelConfig& config, const ForwardTrace& trace, const AttentionGrads& grads,
                          const std::vector<Tensor>& block_relevance, std::size_t target,
                          const AttributionOptions& options) {
  const std::size_t B = config.num_blocks, M = config.num_heads, T = trace.length();
  if (grads.blocks.size() != B || block_relevance.size() != B || trace.blocks.size() != B) {
    throw StateError("rollout: expected " + std::to_string(B) + " blocks of gradients and relevance");
  }
  AttributionResult result;
  result.target = target;
  result.method = Method::ours;
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor& grad = grads.blocks[b];
    const Tensor& rel = block_relevance[b];
    if (grad.shape() != Shape{M, T, T} || rel.shape() != grad.shape()) {
      throw DimensionError("rollout: block " + std::to_string(b) + " gradient " + shape_string(grad.shape()) +
                           " / relevance " + shape_string(rel.shape()) + " mismatch");
    }
    Tensor abar({T, T});
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j) abar(i, j) += grad(m, i, j) * rel(m, i, j);
    for (std::size_t i = 0; i < abar.size(); ++i) abar[i] = std::max(0.0, abar[i] / static_cast<double>(M));
    for (std::size_t i = 0; i < T; ++i) abar(i, i) += 1.0;
    if (options.row_normalize) normalize_rows(abar);
    result.rollout.push_back(std::move(abar));
  }
  result.scores = extract_scores(config, trace, result.rollout, output_row(config, trace, target), result.degenerate);
  return result;
}

AttributionResult explain(const ModelConfig& config, const ModelWeights& weights,
                          std::span<const std::size_t> token_ids, std::size_t target, const HeadMask& mask,
                          const AttributionOptions& options) {
  return explain(config, weights, forward(config, weights, token_ids), target, mask, options);
}

AttributionResult explain(const ModelConfig& config, const ModelWeights& weights, const ForwardTrace& trace,
                          std::size_t target, const HeadMask& mask, const AttributionOptions& options) {
  if (mask.num_blocks() != config.num_blocks || mask.num_heads() != config.num_heads) {
    throw DimensionError("explain: mask is " + std::to_string(mask.num_blocks()) + "x" +
                         std::to_string(mask.num_heads()) + ", model has " + std::to_string(config.num_blocks) +
                         "x" + std::to_string(config.num_heads) + " heads");
  }
  const AttentionGrads grads = backward_attention_grads(config, weights, trace, target);
  PropagationOptions prop;
  if (options.mask_at_propagation) prop.head_gate = mask.gate();
  const Tensor one_hot = init_relevance(target, output_count(trace));
  const RelevanceState state = propagate(config, weights, trace, Tensor(trace.logits.shape(), one_hot.values()), prop);

  std::vector<Tensor> combined;
  std::vector<BlockAttribution> blocks;
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    const BlockRelevance& br = state.blocks[b];
    BlockAttribution info;
    info.head_total = br.heads.sum();
    info.context_total = br.context.sum();
    bool any = false;
    for (std::size_t m = 0; m < config.num_heads; ++m) any = any || mask.at(b, m);
    if (!any) {
      info.status = RenormStatus::empty;
      combined.emplace_back(br.heads.shape());
    } else {
      const Renormalized r = renormalize(apply_mask(br.heads, mask, b), info.context_total);
      info.status = r.status;
      info.synt_total = r.synt.sum();
      info.pos_total = r.pos.sum();
      combined.push_back(add(r.synt, r.pos));
    }
    blocks.push_back(info);
  }
  AttributionResult result = rollout(config, trace, grads, combined, target, options);
  result.blocks = std::move(blocks);
  return result;
}

AttributionResult baseline_gae(const ModelConfig& config, const ModelWeights& weights, const ForwardTrace& trace,
                               std::size_t target, const AttributionOptions& options) {
  const AttentionGrads grads = backward_attention_grads(config, weights, trace, target);
  const RelevanceState state = propagate(config, weights, trace, target);
  std::vector<Tensor> scaled;
  std::vector<BlockAttribution> blocks;
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    const BlockRelevance& br = state.blocks[b];
    BlockAttribution info;
    info.head_total = br.heads.sum();
    info.context_total = br.context.sum();
    if (std::abs(info.head_total) < kDegenerateSum) {
      info.status = RenormStatus::degenerate;
      scaled.emplace_back(br.heads.shape());
    } else {
      scaled.push_back(scale(br.heads, info.context_total / info.head_total));
      info.synt_total = scaled.back().sum();
    }
    blocks.push_back(info);
  }
  AttributionResult result = rollout(config, trace, grads, scaled, target, options);
  result.method = Method::gae;
  result.blocks = std::move(blocks);
  return result;
}

AttributionResult baseline_rawatt(const ModelConfig& config, const ForwardTrace& trace, std::size_t target) {
  if (!trace.complete || trace.blocks.empty()) throw StateError("baseline_rawatt: forward trace is incomplete");
  const std::size_t T = trace.length(), M = config.num_heads;
  const Tensor& last = trace.blocks.back().attention;
  Tensor mean({T, T});
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j) mean(i, j) += last(m, i, j) / static_cast<double>(M);
  AttributionResult result;
  result.method = Method::rawatt;
  result.target = target;
  // One "block" whose product is the attention map itself.
  result.scores = extract_scores(config, trace, {mean}, output_row(config, trace, target), result.degenerate);
  return result;
}

AttributionResult baseline_rollout(const ModelConfig& config, const ForwardTrace& trace, std::size_t target) {
  if (!trace.complete) throw StateError("baseline_rollout: forward trace is incomplete");
  const std::size_t T = trace.length(), M = config.num_heads;
  AttributionResult result;
  result.method = Method::rollout;
  result.target = target;
  for (const auto& bt : trace.blocks) {
    Tensor abar({T, T});
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j) abar(i, j) += bt.attention(m, i, j) / static_cast<double>(M);
    for (std::size_t i = 0; i < T; ++i) abar(i, i) += 1.0;
    for (double& v : abar.data()) v *= 0.5;
    normalize_rows(abar);
    result.rollout.push_back(std::move(abar));
  }
  result.scores = extract_scores(config, trace, result.rollout, output_row(config, trace, target), result.degenerate);
  return result;
}

AttributionResult attribute(const ModelConfig& config, const ModelWeights& weights,
                            std::span<const std::size_t> token_ids, Method method, const HeadMask& mask,
                            std::uint64_t seed, const AttributionOptions& options) {
  const ForwardTrace trace = forward(config, weights, token_ids);
  const Prediction pred = prediction_from_logits(config, trace.logits);
  std::vector<std::size_t> targets;
  if (config.task == Task::classification) {
    targets = {pred.label};
  } else {
    targets = {pred.label, trace.length() + pred.end_label};
  }
  auto run = [&](std::size_t target) {
    switch (method) {
      case Method::ours: return explain(config, weights, trace, target, mask, options);
      case Method::random: return explain(config, weights, trace, target, random_mask(mask, seed), options);
      case Method::gae: return baseline_gae(config, weights, trace, target, options);
      case Method::rawatt: return baseline_rawatt(config, trace, target);
      case Method::rollout: return baseline_rollout(config, trace, target);
    }
    throw std::logic_error("unhandled method");
  };
  AttributionResult result = run(targets.front());
  for (std::size_t i = 1; i < targets.size(); ++i) {
    const AttributionResult other = run(targets[i]);
    for (std::size_t t = 0; t < result.scores.size(); ++t) result.scores[t] += other.scores[t];
    result.degenerate = result.degenerate || other.degenerate;
  }
  if (targets.size() > 1)
    for (double& s : result.scores) s /= static_cast<double>(targets.size());
  result.method = method;
  return result;
}

nlohmann::ordered_json attribution_to_json(std::span<const std::size_t> token_ids, const AttributionResult& result) {
  nlohmann::ordered_json j;
  j["token_ids"] = std::vector<std::size_t>(token_ids.begin(), token_ids.end());
  j["scores"] = result.scores;
  j["method"] = to_string(result.method);
  j["target"] = result.target;
  j["degenerate"] = result.degenerate;
  return j;
}

}  // namespace headlrp
