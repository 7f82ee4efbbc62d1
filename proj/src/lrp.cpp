// SPDX-License-Identifier: Apache-2.0
#include "headlrp/lrp.hpp"

#include <cmath>
#include <stdexcept>

#include "headlrp/kernels.hpp"

namespace headlrp {

namespace {

double stabilise(double z) { return z + (z >= 0.0 ? kRelevanceEpsilon : -kRelevanceEpsilon); }

// Rescales `t` so its total equals `target`; leaves it alone when it holds no mass.
void rescale_to(Tensor& t, double target) {
  const double total = t.sum();
  if (total == 0.0) return;
  const double factor = target / total;
  for (double& v : t.data()) v *= factor;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

}  // namespace

Tensor init_relevance(std::size_t target, std::size_t num_outputs) {
  if (target >= num_outputs) {
    throw std::out_of_range("target " + std::to_string(target) + " outside " + std::to_string(num_outputs) +
                            " outputs");
  }
  Tensor r({num_outputs});
  r[target] = 1.0;
  return r;
}

Tensor relprop_linear(const Tensor& x, const Tensor& w, const Tensor& r_in) {
  require(x.rank() == 2 && w.rank() == 2 && r_in.rank() == 2 && x.cols() == w.rows() &&
              r_in.rows() == x.rows() && r_in.cols() == w.cols(),
          "relprop_linear: shapes " + shape_string(x.shape()) + ", " + shape_string(w.shape()) + ", " +
              shape_string(r_in.shape()) + " do not chain");
  const std::size_t rows = x.rows(), in = x.cols(), out = w.cols();
  Tensor r_out({rows, in});
  double lost = 0.0;
  for (std::size_t t = 0; t < rows; ++t) {
    double row_in = 0.0, row_out = 0.0;
    for (std::size_t i = 0; i < out; ++i) {
      const double r = r_in(t, i);
      row_in += r;
      if (r == 0.0) continue;
      double z = 0.0, z_abs = 0.0;
      for (std::size_t j = 0; j < in; ++j) {
        const double c = x(t, j) * w(j, i);
        if (c >= 0.0) z += c;
        z_abs += std::abs(c);
      }
      // A unit whose contributions are all negative splits by magnitude instead.
      const bool by_magnitude = z == 0.0 && z_abs > 0.0;
      const double scale_i = r / stabilise(by_magnitude ? z_abs : z);
      for (std::size_t j = 0; j < in; ++j) {
        const double c = x(t, j) * w(j, i);
        if (by_magnitude || c >= 0.0) {
          const double share = (by_magnitude ? std::abs(c) : c) * scale_i;
          r_out(t, j) += share;
          row_out += share;
        }
      }
    }
    // Units without a positive path drop their share; the row keeps its total.
    if (row_out != 0.0) {
      const double factor = row_in / row_out;
      for (double& v : r_out.row(t)) v *= factor;
    } else {
      lost += row_in;
    }
  }
  if (lost != 0.0) rescale_to(r_out, r_in.sum());
  return r_out;
}

MatmulRelevance relprop_matmul(const Tensor& x, const Tensor& y, const Tensor& r_in) {
  require(x.rank() == 2 && y.rank() == 2 && r_in.rank() == 2 && x.cols() == y.rows() &&
              r_in.rows() == x.rows() && r_in.cols() == y.cols(),
          "relprop_matmul: shapes " + shape_string(x.shape()) + ", " + shape_string(y.shape()) + ", " +
              shape_string(r_in.shape()) + " do not chain");
  const std::size_t t_dim = x.rows(), k_dim = x.cols(), c_dim = y.cols();
  const Tensor product = matmul(x, y);
  Tensor ratio({t_dim, c_dim});
  for (std::size_t t = 0; t < t_dim; ++t)
    for (std::size_t i = 0; i < c_dim; ++i) ratio(t, i) = r_in(t, i) / stabilise(product(t, i));

  // X_j * dL_i/dX_j * R_i / L_i with L = X Y gives X_tj * sum_i Y_ji * ratio_ti.
  MatmulRelevance out{matmul(ratio, transpose(y)), matmul(transpose(x), ratio)};
  for (std::size_t t = 0; t < t_dim; ++t)
    for (std::size_t j = 0; j < k_dim; ++j) out.x(t, j) *= x(t, j);
  for (std::size_t j = 0; j < k_dim; ++j)
    for (std::size_t i = 0; i < c_dim; ++i) out.y(j, i) *= y(j, i);

  const double half = 0.5 * r_in.sum();
  rescale_to(out.x, half);
  rescale_to(out.y, half);
  return out;
}

AddRelevance relprop_add(const Tensor& a, const Tensor& b, const Tensor& r_in) {
  require(a.shape() == b.shape() && a.shape() == r_in.shape(),
          "relprop_add: shapes " + shape_string(a.shape()) + ", " + shape_string(b.shape()) + ", " +
              shape_string(r_in.shape()) + " differ");
  AddRelevance out{Tensor(a.shape()), Tensor(b.shape())};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double share = r_in[i] / stabilise(a[i] + b[i]);
    out.a[i] = a[i] * share;
    out.b[i] = b[i] * share;
  }
  const double total = out.a.sum() + out.b.sum();
  if (total != 0.0) {
    const double factor = r_in.sum() / total;
    for (double& v : out.a.data()) v *= factor;
    for (double& v : out.b.data()) v *= factor;
  }
  return out;
}

Tensor relprop_passthrough(const Tensor& r_in) { return r_in; }

RelevanceState propagate(const ModelConfig& config, const ModelWeights& weights,
                         const ForwardTrace& trace, std::size_t target) {
  if (!trace.complete) throw StateError("propagate: forward trace is incomplete");
  const Tensor one_hot = init_relevance(target, trace.output_size());
  return propagate(config, weights, trace, Tensor(trace.logits.shape(), one_hot.values()));
}

RelevanceState propagate(const ModelConfig& config, const ModelWeights& weights,
                         const ForwardTrace& trace, const Tensor& initial,
                         const PropagationOptions& options) {
  if (!trace.complete || trace.blocks.size() != config.num_blocks) {
    throw StateError("propagate: forward trace is incomplete");
  }
  if (initial.shape() != trace.logits.shape()) {
    throw DimensionError("propagate: initial relevance " + shape_string(initial.shape()) +
                         " does not match logits " + shape_string(trace.logits.shape()));
  }
  if (!options.head_gate.empty() && options.head_gate.size() != config.num_blocks) {
    throw DimensionError("propagate: head gate has " + std::to_string(options.head_gate.size()) +
                         " blocks, model has " + std::to_string(config.num_blocks));
  }
  const std::size_t T = trace.length(), d = config.hidden_dim, M = config.num_heads, dh = config.head_dim();

  RelevanceState state;
  state.initial = initial;
  state.blocks.resize(config.num_blocks);
  auto record = [&state](std::string name, double in, double out) {
    state.steps.push_back({std::move(name), in, out});
  };

  Tensor relevance({T, d});
  if (config.task == Task::classification) {
    Tensor cls_row({1, d});
    for (std::size_t j = 0; j < d; ++j) cls_row(0, j) = trace.final_hidden(config.cls_index, j);
    const Tensor r = relprop_linear(cls_row, weights.classifier_weight,
                                    Tensor({1, initial.size()}, initial.values()));
    for (std::size_t j = 0; j < d; ++j) relevance(config.cls_index, j) = r(0, j);
  } else {
    relevance = relprop_linear(trace.final_hidden, weights.classifier_weight, transpose(initial));
  }
  record("classifier", initial.sum(), relevance.sum());

  for (std::size_t bi = config.num_blocks; bi-- > 0;) {
    const BlockTrace& bt = trace.blocks[bi];
    const BlockWeights& bw = weights.blocks[bi];
    BlockRelevance& br = state.blocks[bi];
    const std::string p = "block" + std::to_string(bi) + ".";
    br.output = relevance;

    const Tensor r_res2 = relprop_passthrough(relevance);
    record(p + "ln2", relevance.sum(), r_res2.sum());
    const AddRelevance ffn_split = relprop_add(bt.hidden1, bt.ffn_out, r_res2);
    record(p + "residual2", r_res2.sum(), ffn_split.a.sum() + ffn_split.b.sum());
    const Tensor r_act = relprop_linear(bt.ffn_act, bw.w2, ffn_split.b);
    record(p + "ffn.w2", ffn_split.b.sum(), r_act.sum());
    const Tensor r_pre = relprop_passthrough(r_act);
    record(p + "gelu", r_act.sum(), r_pre.sum());
    const Tensor r_h1_ffn = relprop_linear(bt.hidden1, bw.w1, r_pre);
    record(p + "ffn.w1", r_pre.sum(), r_h1_ffn.sum());
    const Tensor r_h1 = add(ffn_split.a, r_h1_ffn);
    const Tensor r_res1 = relprop_passthrough(r_h1);
    record(p + "ln1", r_h1.sum(), r_res1.sum());
    const AddRelevance attn_split = relprop_add(bt.input, bt.attention_output, r_res1);
    record(p + "residual1", r_res1.sum(), attn_split.a.sum() + attn_split.b.sum());
    Tensor r_ctx = relprop_linear(bt.context, bw.wo, attn_split.b);
    record(p + "attn.wo", attn_split.b.sum(), r_ctx.sum());
    br.context = r_ctx;

    if (!options.head_gate.empty()) {
      const auto& gate = options.head_gate[bi];
      if (gate.size() != M) throw DimensionError("propagate: head gate row has wrong width");
      const double before = r_ctx.sum();
      bool any = false;
      for (std::size_t m = 0; m < M; ++m) {
        if (gate[m]) {
          any = true;
          continue;
        }
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t j = 0; j < dh; ++j) r_ctx(t, m * dh + j) = 0.0;
      }
      // A fully gated block keeps its flow; there is nothing to rescale onto.
      if (any) rescale_to(r_ctx, before);
      else r_ctx = br.context;
      record(p + "head_gate", before, r_ctx.sum());
    }

    br.heads = Tensor({M, T, T});
    Tensor r_q({T, d}), r_k({T, d}), r_v({T, d});
    double heads_in = 0.0, heads_out = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      const Tensor r_ctx_m = column_block(r_ctx, m * dh, dh);
      const MatmulRelevance av = relprop_matmul(bt.attention.slice(m), column_block(bt.v, m * dh, dh), r_ctx_m);
      br.heads.set_slice(m, av.x);
      set_column_block(r_v, m * dh, av.y);
      const Tensor r_scores = relprop_passthrough(av.x);
      const MatmulRelevance qk = relprop_matmul(column_block(bt.q, m * dh, dh),
                                                transpose(column_block(bt.k, m * dh, dh)), r_scores);
      set_column_block(r_q, m * dh, qk.x);
      set_column_block(r_k, m * dh, transpose(qk.y));
      heads_in += r_ctx_m.sum();
      heads_out += qk.x.sum() + qk.y.sum() + av.y.sum();
    }
    record(p + "attention", heads_in, heads_out);

    const Tensor r_x_q = relprop_linear(bt.input, bw.wq, r_q);
    const Tensor r_x_k = relprop_linear(bt.input, bw.wk, r_k);
    const Tensor r_x_v = relprop_linear(bt.input, bw.wv, r_v);
    record(p + "attn.qkv", r_q.sum() + r_k.sum() + r_v.sum(), r_x_q.sum() + r_x_k.sum() + r_x_v.sum());
    br.input = add(add(attn_split.a, r_x_q), add(r_x_k, r_x_v));
    record(p + "block", br.output.sum(), br.input.sum());
    relevance = br.input;
  }
  state.embedding = relprop_passthrough(relevance);
  record("embedding_ln", relevance.sum(), state.embedding.sum());
  return state;
}

}  // namespace headlrp
