// SPDX-License-Identifier: Apache-2.0
//
// Layer-wise relevance propagation through the encoder. Relevance starts as a
// one-hot vector on the target output and is redistributed layer by layer so
// that the total is conserved at every step:
//
//   linear layers    positive-subset rule  R_j = sum_i [x_j w_ji >= 0] x_j w_ji / z_i * R_i
//   two-tensor ops   R_X = X * dL/dX * R / L  (and symmetrically for Y), half of R to each side
//   residual adds    proportional split R_a = R * a / (a + b)
//   layernorm, GELU, softmax   pass-through
//
// Every rule finishes with a rescale so its output total equals its input total.
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "headlrp/model.hpp"
#include "headlrp/tensor.hpp"

namespace headlrp {

/// Signed stabiliser added to every relevance denominator: z + eps * sign(z).
inline constexpr double kRelevanceEpsilon = 1e-9;

Tensor init_relevance(std::size_t target, std::size_t num_outputs);

/// x [t x j], w [j x i], r_in [t x i]  ->  [t x j]. Keeps non-negative contributions only;
/// a unit with none splits by contribution magnitude so no relevance is lost.
Tensor relprop_linear(const Tensor& x, const Tensor& w, const Tensor& r_in);

struct MatmulRelevance {
  Tensor x;  // [t x k]
  Tensor y;  // [k x c]
};

/// Relevance of both operands of X [t x k] . Y [k x c], given r_in [t x c].
/// Each side receives half of sum(r_in).
MatmulRelevance relprop_matmul(const Tensor& x, const Tensor& y, const Tensor& r_in);

struct AddRelevance {
  Tensor a;
  Tensor b;
};

AddRelevance relprop_add(const Tensor& a, const Tensor& b, const Tensor& r_in);

/// Layernorm, GELU and softmax: relevance is carried over element-wise.
Tensor relprop_passthrough(const Tensor& r_in);

/// One recorded redistribution step and the relevance totals either side of it.
struct PropagationStep {
  std::string name;
  double total_in = 0.0;
  double total_out = 0.0;
};

struct BlockRelevance {
  Tensor output;   // at the block output, [T x d]
  Tensor context;  // entering the attention-value product, [T x d]
  Tensor heads;    // on each attention matrix A^(b), [M x T x T]
  Tensor input;    // at the block input, [T x d]
};

struct RelevanceState {
  Tensor initial;                     // R^(0), shaped like the logits
  std::vector<BlockRelevance> blocks;  // forward block order (0 = nearest the embeddings)
  Tensor embedding;                   // at the summed token + position embedding
  std::vector<PropagationStep> steps;  // in propagation order
};

struct PropagationOptions {
  /// Optional B x M gate. When non-empty, relevance entering the attention of
  /// head (b, m) is dropped for gate[b][m] == false and the surviving heads are
  /// rescaled to the block's context total before continuing downward.
  std::vector<std::vector<bool>> head_gate;
};

RelevanceState propagate(const ModelConfig& config, const ModelWeights& weights,
                         const ForwardTrace& trace, std::size_t target);

RelevanceState propagate(const ModelConfig& config, const ModelWeights& weights,
                         const ForwardTrace& trace, const Tensor& initial,
                         const PropagationOptions& options = {});

}  // namespace headlrp
