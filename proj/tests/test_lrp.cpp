// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "headlrp/lrp.hpp"
#include "headlrp/synthetic.hpp"

using namespace headlrp;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double mean = 0.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(mean, 1.0);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

// Positive-subset rule written out per output unit, followed by the per-row
// rescale that restores each row's incoming total.
Tensor linear_oracle(const Tensor& x, const Tensor& w, const Tensor& r) {
  Tensor out({x.rows(), x.cols()});
  for (std::size_t t = 0; t < x.rows(); ++t) {
    std::vector<double> row(x.cols(), 0.0);
    double incoming = 0.0;
    for (std::size_t i = 0; i < w.cols(); ++i) {
      incoming += r(t, i);
      double z = 0.0, z_abs = 0.0;
      for (std::size_t j = 0; j < x.cols(); ++j) {
        z += std::max(0.0, x(t, j) * w(j, i));
        z_abs += std::abs(x(t, j) * w(j, i));
      }
      for (std::size_t j = 0; j < x.cols(); ++j) {
        const double c = x(t, j) * w(j, i);
        if (z == 0.0) row[j] += std::abs(c) / (z_abs + 1e-9) * r(t, i);
        else if (c >= 0.0) row[j] += c / (z + 1e-9) * r(t, i);
      }
    }
    double s = 0.0;
    for (double v : row) s += v;
    for (std::size_t j = 0; j < x.cols(); ++j) out(t, j) = row[j] * incoming / s;
  }
  return out;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

}  // namespace

TEST_CASE("init_relevance") {
  const Tensor r = init_relevance(2, 4);
  CHECK(r == Tensor::vector({0, 0, 1, 0}));
  CHECK_THROWS(init_relevance(4, 4));
}

TEST_CASE("relprop_linear") {
  const Tensor r = relprop_linear(Tensor::from_rows({{1, 2}}), Tensor::from_rows({{1}, {1}}), Tensor::from_rows({{3}}));
  CHECK(r(0, 0) == doctest::Approx(1.0));
  CHECK(r(0, 1) == doctest::Approx(2.0));
  // Negative contributions are excluded.
  const Tensor neg = relprop_linear(Tensor::from_rows({{1, -2}}), Tensor::from_rows({{1}, {1}}), Tensor::from_rows({{1}}));
  CHECK(neg(0, 0) == doctest::Approx(1.0));
  CHECK(neg(0, 1) == 0.0);
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({3, 5}, rng), w = random_tensor({5, 4}, rng), rin = random_tensor({3, 4}, rng, 0.3);
    const Tensor got = relprop_linear(x, w, rin), want = linear_oracle(x, w, rin);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-9);
    CHECK(rel_err(got.sum(), rin.sum()) < 1e-12);
  }
  CHECK_THROWS_AS(relprop_linear(Tensor({2, 3}), Tensor({4, 2}), Tensor({2, 2})), DimensionError);
}

TEST_CASE("relprop_linear splits units without a positive path by magnitude") {
  const Tensor x = Tensor::from_rows({{1, 1}, {-1, -3}});
  const Tensor w = Tensor::from_rows({{1}, {1}});
  const Tensor r = relprop_linear(x, w, Tensor::from_rows({{1}, {1}}));
  CHECK(r.sum() == doctest::Approx(2.0));
  CHECK(r(0, 0) == doctest::Approx(0.5));
  CHECK(r(1, 0) == doctest::Approx(0.25));
  CHECK(r(1, 1) == doctest::Approx(0.75));
  const Tensor dead = relprop_linear(Tensor::from_rows({{2, -1}}), Tensor::from_rows({{-1}, {1}}), Tensor::from_rows({{1}}));
  CHECK(dead(0, 0) == doctest::Approx(2.0 / 3.0));
  CHECK(dead(0, 1) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("relprop_matmul") {
  const auto r = relprop_matmul(Tensor::from_rows({{1, 2}}), Tensor::from_rows({{3}, {4}}), Tensor::from_rows({{11}}));
  CHECK(r.x(0, 0) == doctest::Approx(1.5));
  CHECK(r.x(0, 1) == doctest::Approx(4.0));
  CHECK(r.y(0, 0) == doctest::Approx(1.5));
  CHECK(r.y(1, 0) == doctest::Approx(4.0));
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({4, 3}, rng), y = random_tensor({3, 5}, rng), rin = random_tensor({4, 5}, rng, 0.5);
    const auto got = relprop_matmul(x, y, rin);
    // Direct evaluation of X_tj Y_ji R_ti / L_ti, then the half split.
    Tensor rx({4, 3}), ry({3, 5});
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t i = 0; i < 5; ++i) {
        double l = 0.0;
        for (std::size_t j = 0; j < 3; ++j) l += x(t, j) * y(j, i);
        const double share = rin(t, i) / (l + (l >= 0 ? 1e-9 : -1e-9));
        for (std::size_t j = 0; j < 3; ++j) {
          rx(t, j) += x(t, j) * y(j, i) * share;
          ry(j, i) += x(t, j) * y(j, i) * share;
        }
      }
    const double fx = 0.5 * rin.sum() / rx.sum(), fy = 0.5 * rin.sum() / ry.sum();
    for (std::size_t i = 0; i < rx.size(); ++i) CHECK(std::abs(got.x[i] - rx[i] * fx) < 1e-9 * std::max(1.0, std::abs(rx[i] * fx)));
    for (std::size_t i = 0; i < ry.size(); ++i) CHECK(std::abs(got.y[i] - ry[i] * fy) < 1e-9 * std::max(1.0, std::abs(ry[i] * fy)));
    CHECK(rel_err(got.x.sum() + got.y.sum(), rin.sum()) < 1e-12);
  }
}

TEST_CASE("relprop_add") {
  const auto r = relprop_add(Tensor::vector({1}), Tensor::vector({3}), Tensor::vector({4}));
  CHECK(r.a[0] == doctest::Approx(1.0));
  CHECK(r.b[0] == doctest::Approx(3.0));
  CHECK_THROWS(relprop_add(Tensor({2}), Tensor({3}), Tensor({2})));
}

TEST_CASE("propagation conserves relevance step by step") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const Task task = trial % 3 == 2 ? Task::qa : Task::classification;
    ModelConfig c = synthetic::small_config(1 + trial % 3, 2, 8, 12, 10, 3, task);
    c.causal = trial % 4 == 3;
    const ModelWeights w = synthetic::random_weights(c, 100 + trial);
    const auto ids = synthetic::random_tokens(c, 3 + trial % 6, rng);
    const ForwardTrace trace = forward(c, w, ids);
    const std::size_t target = static_cast<std::size_t>(trial) % trace.output_size();
    const RelevanceState s = propagate(c, w, trace, target);
    for (const auto& step : s.steps) {
      INFO(step.name);
      CHECK(rel_err(step.total_out, step.total_in) < 1e-6);
    }
    CHECK(std::abs(s.blocks.front().input.sum() - 1.0) < 1e-5);
    CHECK(std::abs(s.embedding.sum() - 1.0) < 1e-5);
    CHECK(s.steps.front().name == "classifier");
    CHECK(s.steps.back().name == "embedding_ln");
  }
}

TEST_CASE("propagation is homogeneous in the initial relevance") {
  const ModelConfig c = synthetic::small_config(2, 2, 8, 8, 9, 3);
  const ModelWeights w = synthetic::random_weights(c, 8);
  const ForwardTrace trace = forward(c, w, std::vector<std::size_t>{1, 5, 2, 7});
  const RelevanceState one = propagate(c, w, trace, Tensor::vector({0, 1, 0}));
  const RelevanceState three = propagate(c, w, trace, Tensor::vector({0, 3, 0}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < one.blocks[b].heads.size(); ++i)
      CHECK(std::abs(three.blocks[b].heads[i] - 3 * one.blocks[b].heads[i]) < 1e-9);
  const RelevanceState by_index = propagate(c, w, trace, 1);
  CHECK(by_index.blocks[0].heads == one.blocks[0].heads);
}

TEST_CASE("head relevance is half of the context relevance") {
  const ModelConfig c = synthetic::small_config(2, 2, 8, 8, 9, 3);
  const ModelWeights w = synthetic::random_weights(c, 9);
  const ForwardTrace trace = forward(c, w, std::vector<std::size_t>{1, 5, 2, 7, 3});
  const RelevanceState s = propagate(c, w, trace, 0);
  for (const auto& br : s.blocks) CHECK(br.heads.sum() == doctest::Approx(0.5 * br.context.sum()).epsilon(1e-9));
}

TEST_CASE("head gate zeroes gated heads and conserves") {
  const ModelConfig c = synthetic::small_config(2, 2, 8, 8, 9, 3);
  const ModelWeights w = synthetic::random_weights(c, 10);
  const ForwardTrace trace = forward(c, w, std::vector<std::size_t>{1, 5, 2, 7});
  PropagationOptions opts;
  opts.head_gate = {{true, false}, {false, false}};
  const RelevanceState s = propagate(c, w, trace, Tensor::vector({1, 0, 0}), opts);
  const Tensor slice = s.blocks[0].heads.slice(1);
  for (double v : slice.data()) CHECK(v == 0.0);
  for (const auto& step : s.steps) CHECK(rel_err(step.total_out, step.total_in) < 1e-6);
  opts.head_gate = {{true}};
  CHECK_THROWS(propagate(c, w, trace, Tensor::vector({1, 0, 0}), opts));
}

TEST_CASE("propagate rejects bad state") {
  const ModelConfig c = synthetic::small_config(1, 2, 8, 8, 9, 3);
  const ModelWeights w = synthetic::random_weights(c, 1);
  CHECK_THROWS_AS(propagate(c, w, ForwardTrace{}, 0), StateError);
  const ForwardTrace trace = forward(c, w, std::vector<std::size_t>{1, 2});
  CHECK_THROWS_AS(propagate(c, w, trace, Tensor::vector({1, 0})), DimensionError);
}
