// SPDX-License-Identifier: Apache-2.0
#include "headlrp/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "headlrp/kernels.hpp"

namespace headlrp {

std::string to_string(Task task) { return task == Task::qa ? "qa" : "classification"; }

Task parse_task(const std::string& name) {
  if (name == "classification") return Task::classification;
  if (name == "qa") return Task::qa;
  throw std::invalid_argument("unknown task '" + name + "' (expected classification|qa)");
}

bool ModelConfig::is_special(std::size_t token_id) const {
  return std::find(special_token_ids.begin(), special_token_ids.end(), token_id) !=
         special_token_ids.end();
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (num_blocks == 0 || num_heads == 0 || hidden_dim == 0 || ffn_dim == 0 || vocab_size == 0 ||
      max_positions == 0 || num_classes == 0) {
    fail("all dimensions must be positive");
  }
  if (hidden_dim % num_heads != 0) {
    fail("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by num_heads " +
         std::to_string(num_heads));
  }
  if (mask_token_id >= vocab_size) fail("mask_token_id outside the vocabulary");
  if (cls_index >= max_positions) fail("cls_index outside max_positions");
  for (auto id : special_token_ids) {
    if (id >= vocab_size) fail("special token id " + std::to_string(id) + " outside the vocabulary");
  }
  if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be positive");
}

namespace {

std::size_t classifier_width(const ModelConfig& config) {
  return config.task == Task::qa ? 2 : config.num_classes;
}

LayerNormParams unit_layer_norm(std::size_t d) {
  return {Tensor::filled({d}, 1.0), Tensor({d})};
}

void expect_shape(const Tensor& t, const Shape& shape, const std::string& name) {
  if (t.shape() != shape) {
    throw std::invalid_argument("weights: tensor '" + name + "' has shape " + shape_string(t.shape()) +
                                ", expected " + shape_string(shape));
  }
  if (!t.all_finite()) throw std::invalid_argument("weights: tensor '" + name + "' is not finite");
}

Tensor layer_norm_backward(const Tensor& x, const Tensor& gain, double eps, const Tensor& grad_out) {
  const std::size_t d = x.cols();
  Tensor grad_in(x.shape());
  std::vector<double> xhat(d), dxhat(d);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto in = x.row(i);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (in[j] - mean) * inv;
      dxhat[j] = grad_out(i, j) * gain[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      grad_in(i, j) = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
  }
  return grad_in;
}

Tensor causal_softmax_rows(const Tensor& scores) {
  Tensor out(scores.shape());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    double peak = scores(i, 0);
    for (std::size_t j = 1; j <= i; ++j) peak = std::max(peak, scores(i, j));
    double total = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      out(i, j) = std::exp(scores(i, j) - peak);
      total += out(i, j);
    }
    for (std::size_t j = 0; j <= i; ++j) out(i, j) /= total;
  }
  return out;
}

}  // namespace

ModelWeights zero_weights(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.hidden_dim, f = config.ffn_dim;
  ModelWeights w;
  w.token_embedding = Tensor({config.vocab_size, d});
  w.position_embedding = Tensor({config.max_positions, d});
  w.embedding_ln = unit_layer_norm(d);
  w.blocks.resize(config.num_blocks);
  for (auto& b : w.blocks) {
    b.wq = Tensor({d, d}); b.bq = Tensor({d});
    b.wk = Tensor({d, d}); b.bk = Tensor({d});
    b.wv = Tensor({d, d}); b.bv = Tensor({d});
    b.wo = Tensor({d, d}); b.bo = Tensor({d});
    b.ln1 = unit_layer_norm(d);
    b.w1 = Tensor({d, f}); b.b1 = Tensor({f});
    b.w2 = Tensor({f, d}); b.b2 = Tensor({d});
    b.ln2 = unit_layer_norm(d);
  }
  w.classifier_weight = Tensor({d, classifier_width(config)});
  w.classifier_bias = Tensor({classifier_width(config)});
  return w;
}

void validate_weights(const ModelConfig& config, const ModelWeights& w) {
  config.validate();
  const std::size_t d = config.hidden_dim, f = config.ffn_dim;
  expect_shape(w.token_embedding, {config.vocab_size, d}, "token_embedding");
  expect_shape(w.position_embedding, {config.max_positions, d}, "position_embedding");
  expect_shape(w.embedding_ln.gain, {d}, "embedding_ln.gain");
  expect_shape(w.embedding_ln.bias, {d}, "embedding_ln.bias");
  if (w.blocks.size() != config.num_blocks) {
    throw std::invalid_argument("weights: " + std::to_string(w.blocks.size()) + " blocks, config expects " +
                                std::to_string(config.num_blocks));
  }
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    const auto& b = w.blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    expect_shape(b.wq, {d, d}, p + "attn.wq");
    expect_shape(b.bq, {d}, p + "attn.bq");
    expect_shape(b.wk, {d, d}, p + "attn.wk");
    expect_shape(b.bk, {d}, p + "attn.bk");
    expect_shape(b.wv, {d, d}, p + "attn.wv");
    expect_shape(b.bv, {d}, p + "attn.bv");
    expect_shape(b.wo, {d, d}, p + "attn.wo");
    expect_shape(b.bo, {d}, p + "attn.bo");
    expect_shape(b.ln1.gain, {d}, p + "ln1.gain");
    expect_shape(b.ln1.bias, {d}, p + "ln1.bias");
    expect_shape(b.w1, {d, f}, p + "ffn.w1");
    expect_shape(b.b1, {f}, p + "ffn.b1");
    expect_shape(b.w2, {f, d}, p + "ffn.w2");
    expect_shape(b.b2, {d}, p + "ffn.b2");
    expect_shape(b.ln2.gain, {d}, p + "ln2.gain");
    expect_shape(b.ln2.bias, {d}, p + "ln2.bias");
  }
  expect_shape(w.classifier_weight, {d, classifier_width(config)}, "classifier.weight");
  expect_shape(w.classifier_bias, {classifier_width(config)}, "classifier.bias");
}

ForwardTrace forward(const ModelConfig& config, const ModelWeights& weights,
                     std::span<const std::size_t> token_ids) {
  config.validate();
  const std::size_t T = token_ids.size();
  const std::size_t d = config.hidden_dim, M = config.num_heads, dh = config.head_dim();
  if (T == 0) throw std::invalid_argument("forward: empty input");
  if (T > config.max_positions) {
    throw std::invalid_argument("forward: input length " + std::to_string(T) + " exceeds max_positions " +
                                std::to_string(config.max_positions));
  }
  if (config.task == Task::classification && config.cls_index >= T) {
    throw std::invalid_argument("forward: cls_index " + std::to_string(config.cls_index) +
                                " outside input of length " + std::to_string(T));
  }
  for (std::size_t t = 0; t < T; ++t) {
    if (token_ids[t] >= config.vocab_size) {
      throw std::invalid_argument("forward: token id " + std::to_string(token_ids[t]) + " at position " +
                                  std::to_string(t) + " outside vocabulary of " +
                                  std::to_string(config.vocab_size));
    }
  }

  ForwardTrace trace;
  trace.token_ids.assign(token_ids.begin(), token_ids.end());
  trace.embedded = Tensor({T, d});
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      trace.embedded(t, j) = weights.token_embedding(token_ids[t], j) + weights.position_embedding(t, j);
    }
  }
  Tensor x = layer_norm(trace.embedded, weights.embedding_ln.gain, weights.embedding_ln.bias,
                        config.layer_norm_eps);

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  trace.blocks.reserve(config.num_blocks);
  for (const auto& bw : weights.blocks) {
    BlockTrace bt;
    bt.input = x;
    bt.q = add_row_bias(matmul(x, bw.wq), bw.bq);
    bt.k = add_row_bias(matmul(x, bw.wk), bw.bk);
    bt.v = add_row_bias(matmul(x, bw.wv), bw.bv);
    bt.attention = Tensor({M, T, T});
    bt.context = Tensor({T, d});
    for (std::size_t m = 0; m < M; ++m) {
      const Tensor qm = column_block(bt.q, m * dh, dh);
      const Tensor km = column_block(bt.k, m * dh, dh);
      const Tensor vm = column_block(bt.v, m * dh, dh);
      const Tensor scores = scale(matmul(qm, transpose(km)), inv_sqrt_dh);
      const Tensor a = config.causal ? causal_softmax_rows(scores) : softmax_rows(scores);
      bt.attention.set_slice(m, a);
      set_column_block(bt.context, m * dh, matmul(a, vm));
    }
    bt.attention_output = add_row_bias(matmul(bt.context, bw.wo), bw.bo);
    bt.residual1 = add(bt.input, bt.attention_output);
    bt.hidden1 = layer_norm(bt.residual1, bw.ln1.gain, bw.ln1.bias, config.layer_norm_eps);
    bt.ffn_pre = add_row_bias(matmul(bt.hidden1, bw.w1), bw.b1);
    bt.ffn_act = gelu(bt.ffn_pre);
    bt.ffn_out = add_row_bias(matmul(bt.ffn_act, bw.w2), bw.b2);
    bt.residual2 = add(bt.hidden1, bt.ffn_out);
    bt.output = layer_norm(bt.residual2, bw.ln2.gain, bw.ln2.bias, config.layer_norm_eps);
    x = bt.output;
    trace.blocks.push_back(std::move(bt));
  }
  trace.final_hidden = x;

  if (config.task == Task::classification) {
    Tensor cls_row({1, d});
    for (std::size_t j = 0; j < d; ++j) cls_row(0, j) = x(config.cls_index, j);
    const Tensor out = add_row_bias(matmul(cls_row, weights.classifier_weight), weights.classifier_bias);
    trace.logits = Tensor({config.num_classes}, out.values());
  } else {
    trace.logits = transpose(add_row_bias(matmul(x, weights.classifier_weight), weights.classifier_bias));
  }
  trace.predicted = prediction_from_logits(config, trace.logits).label;
  trace.complete = true;
  return trace;
}

std::size_t output_row(const ModelConfig& config, const ForwardTrace& trace, std::size_t target) {
  if (target >= trace.output_size()) {
    throw std::out_of_range("output index " + std::to_string(target) + " outside " +
                            std::to_string(trace.output_size()) + " outputs");
  }
  return config.task == Task::qa ? target % trace.length() : config.cls_index;
}

AttentionGrads backward_attention_grads(const ModelConfig& config, const ModelWeights& weights,
                                        const ForwardTrace& trace, std::size_t target) {
  if (!trace.complete) throw StateError("backward_attention_grads: forward trace is incomplete");
  if (target >= trace.output_size()) {
    throw std::out_of_range("target " + std::to_string(target) + " outside " +
                            std::to_string(trace.output_size()) + " outputs");
  }
  Tensor seed(trace.logits.shape());
  seed[target] = 1.0;
  return backward_attention_grads(config, weights, trace, seed);
}

AttentionGrads backward_attention_grads(const ModelConfig& config, const ModelWeights& weights,
                                        const ForwardTrace& trace, const Tensor& output_seed) {
  if (!trace.complete || trace.blocks.size() != config.num_blocks) {
    throw StateError("backward_attention_grads: forward trace is incomplete");
  }
  if (output_seed.shape() != trace.logits.shape()) {
    throw DimensionError("backward_attention_grads: seed " + shape_string(output_seed.shape()) +
                         " does not match logits " + shape_string(trace.logits.shape()));
  }
  const std::size_t T = trace.length(), d = config.hidden_dim, M = config.num_heads, dh = config.head_dim();
  const Tensor& wc = weights.classifier_weight;

  Tensor grad({T, d});
  if (config.task == Task::classification) {
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < config.num_classes; ++c) acc += wc(j, c) * output_seed[c];
      grad(config.cls_index, j) = acc;
    }
  } else {
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) grad(t, j) = wc(j, 0) * output_seed(0, t) + wc(j, 1) * output_seed(1, t);
  }

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionGrads result;
  result.blocks.resize(config.num_blocks);
  for (std::size_t bi = config.num_blocks; bi-- > 0;) {
    const BlockTrace& bt = trace.blocks[bi];
    const BlockWeights& bw = weights.blocks[bi];

    const Tensor g_res2 = layer_norm_backward(bt.residual2, bw.ln2.gain, config.layer_norm_eps, grad);
    Tensor g_ffn_pre = matmul(g_res2, transpose(bw.w2));
    for (std::size_t i = 0; i < g_ffn_pre.size(); ++i) g_ffn_pre[i] *= gelu_derivative(bt.ffn_pre[i]);
    const Tensor g_h1 = add(g_res2, matmul(g_ffn_pre, transpose(bw.w1)));
    const Tensor g_res1 = layer_norm_backward(bt.residual1, bw.ln1.gain, config.layer_norm_eps, g_h1);
    const Tensor g_ctx = matmul(g_res1, transpose(bw.wo));

    Tensor g_q({T, d}), g_k({T, d}), g_v({T, d});
    Tensor g_attention({M, T, T});
    for (std::size_t m = 0; m < M; ++m) {
      const Tensor a = bt.attention.slice(m);
      const Tensor qm = column_block(bt.q, m * dh, dh);
      const Tensor km = column_block(bt.k, m * dh, dh);
      const Tensor vm = column_block(bt.v, m * dh, dh);
      const Tensor g_ctx_m = column_block(g_ctx, m * dh, dh);

      const Tensor g_a = matmul(g_ctx_m, transpose(vm));
      g_attention.set_slice(m, g_a);
      set_column_block(g_v, m * dh, matmul(transpose(a), g_ctx_m));

      Tensor g_scores({T, T});
      for (std::size_t i = 0; i < T; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < T; ++j) dot += a(i, j) * g_a(i, j);
        for (std::size_t j = 0; j < T; ++j) g_scores(i, j) = a(i, j) * (g_a(i, j) - dot) * inv_sqrt_dh;
      }
      set_column_block(g_q, m * dh, matmul(g_scores, km));
      set_column_block(g_k, m * dh, matmul(transpose(g_scores), qm));
    }
    result.blocks[bi] = std::move(g_attention);

    Tensor g_x = g_res1;
    g_x = add(g_x, matmul(g_q, transpose(bw.wq)));
    g_x = add(g_x, matmul(g_k, transpose(bw.wk)));
    g_x = add(g_x, matmul(g_v, transpose(bw.wv)));
    grad = std::move(g_x);
  }
  return result;
}

Prediction prediction_from_logits(const ModelConfig& config, const Tensor& logits) {
  auto best_of = [](std::span<const double> row, std::size_t& label, double& confidence) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
      if (row[j] > row[best]) best = j;
    double total = 0.0;
    for (double v : row) total += std::exp(v - row[best]);
    label = best;
    confidence = 1.0 / total;
  };
  Prediction p;
  p.logits = logits;
  if (config.task == Task::classification) {
    best_of(logits.data(), p.label, p.confidence);
  } else {
    best_of(logits.row(0), p.label, p.confidence);
    best_of(logits.row(1), p.end_label, p.end_confidence);
  }
  return p;
}

Prediction predict(const ModelConfig& config, const ModelWeights& weights,
                   std::span<const std::size_t> token_ids) {
  return prediction_from_logits(config, forward(config, weights, token_ids).logits);
}

}  // namespace headlrp
