// SPDX-License-Identifier: Apache-2.0
//
// Token attribution from masked head relevance.
//
// Per block the head relevance R^(n_b) is gated by the head mask, split into a
// syntactic and a positional component by provenance, and rescaled so that the
// two components together carry the relevance that entered the block's
// attention. The block matrix is
//
//   Abar^(b) = ( mean_h  grad A^(b) * (R_synt + R_pos) )^+ + I
//
// and the attribution is the target row of Abar^(B) ... Abar^(1), output-side
// block on the left.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "headlrp/headmask.hpp"
#include "headlrp/lrp.hpp"
#include "headlrp/model.hpp"
#include "json.hpp"

namespace headlrp {

enum class Method { ours, gae, rawatt, rollout, random };

std::string to_string(Method method);
/// Throws std::invalid_argument listing the valid names.
Method parse_method(const std::string& name);
const std::vector<std::string>& method_names();

/// Sums below this are treated as zero when renormalising.
inline constexpr double kDegenerateSum = 1e-12;

struct MaskedRelevance {
  Tensor synt;  // [M x T x T]
  Tensor pos;   // [M x T x T]
};

/// Zeroes heads with mask[block][m] == 0 and splits the survivors by provenance:
/// syntactic-only heads go to `synt`, positional-only to `pos`, and heads
/// flagged both ways (or by neither, e.g. corruption) contribute half to each.
MaskedRelevance apply_mask(const Tensor& head_relevance, const HeadMask& mask, std::size_t block);

enum class RenormStatus {
  ok,
  sign_anomaly,  // component sums of opposite sign; both scaled by target / (S + P)
  degenerate,    // nothing left to rescale
  empty,         // no head of the block is selected
};

std::string to_string(RenormStatus status);

struct Renormalized {
  Tensor synt;
  Tensor pos;
  RenormStatus status = RenormStatus::ok;
};

/// R_synt := R_synt * |S| / |S + P| * target / S  (and likewise for R_pos), where
/// S and P are the component sums and target is the relevance that entered the
/// block's attention. Afterwards sum(R_synt) + sum(R_pos) == target.
Renormalized renormalize(const MaskedRelevance& masked, double target_total);

struct BlockAttribution {
  RenormStatus status = RenormStatus::ok;
  double head_total = 0.0;     // sum R^(n_b) before masking
  double context_total = 0.0;  // sum R^(n_b - 1)
  double synt_total = 0.0;     // after renormalisation
  double pos_total = 0.0;
};

struct AttributionResult {
  std::vector<double> scores;  // one per input token; zero on special tokens
  std::size_t target = 0;
  Method method = Method::ours;
  bool degenerate = false;
  std::vector<Tensor> rollout;  // Abar^(b) per block (diagnostic; empty for raw attention)
  std::vector<BlockAttribution> blocks;
};

struct AttributionOptions {
  /// Row-normalise each Abar^(b) before the product.
  bool row_normalize = false;
  /// Gate head relevance during propagation as well, not only at the rollout.
  bool mask_at_propagation = false;
};

/// Gradient-weighted rollout of per-block head relevance [M x T x T].
AttributionResult rollout(const ModelConfig& config, const ForwardTrace& trace, const AttentionGrads& grads,
                          const std::vector<Tensor>& block_relevance, std::size_t target,
                          const AttributionOptions& options = {});

/// forward -> gradients -> relevance -> mask -> renormalise -> rollout, for one output index.
AttributionResult explain(const ModelConfig& config, const ModelWeights& weights,
                          std::span<const std::size_t> token_ids, std::size_t target, const HeadMask& mask,
                          const AttributionOptions& options = {});

AttributionResult explain(const ModelConfig& config, const ModelWeights& weights, const ForwardTrace& trace,
                          std::size_t target, const HeadMask& mask, const AttributionOptions& options = {});

AttributionResult baseline_rawatt(const ModelConfig& config, const ForwardTrace& trace, std::size_t target);
AttributionResult baseline_rollout(const ModelConfig& config, const ForwardTrace& trace, std::size_t target);
AttributionResult baseline_gae(const ModelConfig& config, const ModelWeights& weights, const ForwardTrace& trace,
                               std::size_t target, const AttributionOptions& options = {});

/// Attribution for the model's own prediction. For QA the start and end
/// indices are explained separately and the two score vectors averaged.
/// `mask` is used by `ours`; `random` draws a rate-matched mask from `seed`.
AttributionResult attribute(const ModelConfig& config, const ModelWeights& weights,
                            std::span<const std::size_t> token_ids, Method method, const HeadMask& mask,
                            std::uint64_t seed = 0, const AttributionOptions& options = {});

/// Positions that may receive attribution (non-special tokens, cls row excluded).
std::vector<bool> content_positions(const ModelConfig& config, std::span<const std::size_t> token_ids);

nlohmann::ordered_json attribution_to_json(std::span<const std::size_t> token_ids, const AttributionResult& result);

}  // namespace headlrp
