// SPDX-License-Identifier: Apache-2.0
//
// Post-layernorm BERT-style encoder with a captured forward trace and a
// hand-written reverse pass down to every attention matrix.
//
//   embed(token) + embed(position) -> layernorm
//   B x [ MHSA -> residual add -> layernorm -> FFN(GELU) -> residual add -> layernorm ]
//   classifier on the cls_index row (or start/end heads over every row for QA)
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "headlrp/tensor.hpp"

namespace headlrp {

enum class Task { classification, qa };

std::string to_string(Task task);
Task parse_task(const std::string& name);

struct ModelConfig {
  std::size_t num_blocks = 1;
  std::size_t num_heads = 1;
  std::size_t hidden_dim = 8;
  std::size_t ffn_dim = 16;
  std::size_t vocab_size = 16;
  std::size_t max_positions = 16;
  /// Classification classes. Ignored for QA, where the output has 2 x T logits.
  std::size_t num_classes = 2;
  std::size_t mask_token_id = 0;
  std::size_t cls_index = 0;
  /// Token ids that are never pruned and never receive attribution ([CLS], [SEP], padding).
  std::vector<std::size_t> special_token_ids;
  bool causal = false;
  Task task = Task::classification;
  double layer_norm_eps = 1e-12;

  std::size_t head_dim() const { return hidden_dim / num_heads; }
  bool is_special(std::size_t token_id) const;
  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
};

struct LayerNormParams {
  Tensor gain;  // [d]
  Tensor bias;  // [d]
};

struct BlockWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // [d x d], [d]
  LayerNormParams ln1;
  Tensor w1, b1;  // [d x ffn], [ffn]
  Tensor w2, b2;  // [ffn x d], [d]
  LayerNormParams ln2;
};

struct ModelWeights {
  Tensor token_embedding;     // [vocab x d]
  Tensor position_embedding;  // [max_positions x d]
  LayerNormParams embedding_ln;
  std::vector<BlockWeights> blocks;
  Tensor classifier_weight;  // [d x K], or [d x 2] for QA (start, end)
  Tensor classifier_bias;    // [K] or [2]
};

/// All-zero weights with unit layer-norm gains, shaped for `config`.
ModelWeights zero_weights(const ModelConfig& config);

/// Throws std::invalid_argument naming the first tensor whose shape is wrong or
/// which holds a non-finite value.
void validate_weights(const ModelConfig& config, const ModelWeights& weights);

struct BlockTrace {
  Tensor input;             // x^(n_b), [T x d]
  Tensor q, k, v;           // [T x d]; head m owns columns [m*d_h, (m+1)*d_h)
  Tensor attention;         // A^(b), [M x T x T]
  Tensor context;           // attention-weighted values, [T x d]
  Tensor attention_output;  // context projection, [T x d]
  Tensor residual1;         // input + attention_output
  Tensor hidden1;           // layernorm(residual1)
  Tensor ffn_pre;           // [T x ffn]
  Tensor ffn_act;           // gelu(ffn_pre)
  Tensor ffn_out;           // [T x d]
  Tensor residual2;         // hidden1 + ffn_out
  Tensor output;            // layernorm(residual2)
};

struct ForwardTrace {
  std::vector<std::size_t> token_ids;
  Tensor embedded;  // token + position embedding, before layernorm
  std::vector<BlockTrace> blocks;
  Tensor final_hidden;  // [T x d]
  /// [K] for classification; [2 x T] (start row, end row) for QA.
  Tensor logits;
  std::size_t predicted = 0;
  bool complete = false;

  std::size_t length() const { return token_ids.size(); }
  std::size_t output_size() const { return logits.size(); }
};

/// Gradients of one scalar output w.r.t. each post-softmax attention matrix.
struct AttentionGrads {
  std::vector<Tensor> blocks;  // [M x T x T] each
};

ForwardTrace forward(const ModelConfig& config, const ModelWeights& weights,
                     std::span<const std::size_t> token_ids);

/// Sequence row whose hidden state feeds output index `target` (the cls row for
/// classification, the start/end position for QA).
std::size_t output_row(const ModelConfig& config, const ForwardTrace& trace, std::size_t target);

/// d logit_target / d A^(b) for every block, attention entries treated as free
/// variables where they multiply the values.
AttentionGrads backward_attention_grads(const ModelConfig& config, const ModelWeights& weights,
                                        const ForwardTrace& trace, std::size_t target);

/// Same as above for the scalar  sum_i seed[i] * logits[i].
AttentionGrads backward_attention_grads(const ModelConfig& config, const ModelWeights& weights,
                                        const ForwardTrace& trace, const Tensor& output_seed);

struct Prediction {
  Tensor logits;
  std::size_t label = 0;
  double confidence = 0.0;
  // QA only: the end-position prediction.
  std::size_t end_label = 0;
  double end_confidence = 0.0;
};

/// Softmax confidence of the arg-max class (ties to the smallest index).
Prediction predict(const ModelConfig& config, const ModelWeights& weights,
                   std::span<const std::size_t> token_ids);
Prediction prediction_from_logits(const ModelConfig& config, const Tensor& logits);

}  // namespace headlrp
