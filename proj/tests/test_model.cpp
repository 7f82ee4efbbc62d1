// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "headlrp/model.hpp"
#include "headlrp/synthetic.hpp"
#include "reference.hpp"

using namespace headlrp;

namespace {

// Largest relative error of the analytic attention gradients against central
// differences on the reference forward.
double gradient_error(const ModelConfig& config, const ModelWeights& weights, const std::vector<std::size_t>& ids,
                      std::size_t target) {
  const ForwardTrace trace = forward(config, weights, ids);
  const AttentionGrads grads = backward_attention_grads(config, weights, trace, target);
  const std::size_t T = ids.size();
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t b = 0; b < config.num_blocks; ++b)
    for (std::size_t m = 0; m < config.num_heads; ++m)
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j) {
          auto shifted = [&](double delta) {
            return reftest::reference_logits(config, weights, ids, [&](std::size_t blk, auto& att) {
              if (blk == b) att[m][i][j] += delta;
            })[target];
          };
          const double fd = (shifted(h) - shifted(-h)) / (2 * h);
          const double g = grads.blocks[b](m, i, j);
          worst = std::max(worst, std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-3}));
        }
  return worst;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = synthetic::small_config(2, 2, 8, 8, 10, 3);
  CHECK_NOTHROW(c.validate());
  c.num_heads = 3;
  CHECK_THROWS(c.validate());
  c = synthetic::small_config(2, 2, 8, 8, 10, 3);
  c.mask_token_id = 10;
  CHECK_THROWS(c.validate());
  CHECK(parse_task("qa") == Task::qa);
  CHECK_THROWS(parse_task("regression"));
}

TEST_CASE("forward matches the scalar reference") {
  for (Task task : {Task::classification, Task::qa}) {
    for (bool causal : {false, true}) {
      ModelConfig c = synthetic::small_config(2, 2, 8, 12, 11, 3, task);
      c.causal = causal;
      const ModelWeights w = synthetic::random_weights(c, 11);
      std::mt19937_64 rng(3);
      const auto ids = synthetic::random_tokens(c, 6, rng);
      const ForwardTrace trace = forward(c, w, ids);
      const auto ref = reftest::reference_logits(c, w, ids);
      REQUIRE(ref.size() == trace.logits.size());
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(ref[i] - trace.logits[i]) < 1e-10);
      const auto att = reftest::reference_attention(c, w, ids);
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t m = 0; m < 2; ++m)
          for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(att[b][m][i][j] - trace.blocks[b].attention(m, i, j)) < 1e-12);
      CHECK(trace.complete);
      if (task == Task::qa) CHECK(trace.logits.shape() == Shape{2, 6});
    }
  }
}

TEST_CASE("forward rejects bad input") {
  const ModelConfig c = synthetic::small_config(1, 2, 8, 8, 5, 2);
  const ModelWeights w = synthetic::random_weights(c, 1);
  CHECK_THROWS(forward(c, w, std::vector<std::size_t>{}));
  CHECK_THROWS(forward(c, w, std::vector<std::size_t>{1, 7}));
  CHECK_THROWS(forward(c, w, std::vector<std::size_t>(17, 1)));
  ModelWeights broken = w;
  broken.blocks[0].wq = Tensor({8, 7});
  CHECK_THROWS(validate_weights(c, broken));
}

TEST_CASE("attention gradients match central differences") {
  for (Task task : {Task::classification, Task::qa}) {
    for (bool causal : {false, true}) {
      ModelConfig c = synthetic::small_config(2, 2, 8, 16, 13, 3, task);
      c.causal = causal;
      const ModelWeights w = synthetic::random_weights(c, 21 + (causal ? 1 : 0));
      std::mt19937_64 rng(5);
      const auto ids = synthetic::random_tokens(c, 5, rng);
      const std::size_t target = task == Task::qa ? 7 : 1;
      CHECK(gradient_error(c, w, ids, target) < 1e-6);
    }
  }
}

TEST_CASE("gradient with an arbitrary seed is linear in the seed") {
  const ModelConfig c = synthetic::small_config(2, 2, 8, 8, 9, 3);
  const ModelWeights w = synthetic::random_weights(c, 4);
  const std::vector<std::size_t> ids = {1, 4, 2, 8};
  const ForwardTrace trace = forward(c, w, ids);
  const auto g0 = backward_attention_grads(c, w, trace, 0);
  const auto g2 = backward_attention_grads(c, w, trace, 2);
  const auto mix = backward_attention_grads(c, w, trace, Tensor::vector({2.0, 0.0, -1.0}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < mix.blocks[b].size(); ++i)
      CHECK(std::abs(mix.blocks[b][i] - (2 * g0.blocks[b][i] - g2.blocks[b][i])) < 1e-12);
  CHECK_THROWS(backward_attention_grads(c, w, trace, 3));
  CHECK_THROWS(backward_attention_grads(c, w, ForwardTrace{}, 0));
}

TEST_CASE("predict") {
  const ModelConfig c = synthetic::small_config(1, 2, 8, 8, 9, 3);
  const Prediction p = prediction_from_logits(c, Tensor::vector({1.0, 3.0, 3.0}));
  CHECK(p.label == 1);
  const double z = std::exp(1.0) + 2 * std::exp(3.0);
  CHECK(p.confidence == doctest::Approx(std::exp(3.0) / z));
  ModelConfig qa = c;
  qa.task = Task::qa;
  const Prediction q = prediction_from_logits(qa, Tensor::from_rows({{0, 2, 1}, {5, 0, 0}}));
  CHECK(q.label == 1);
  CHECK(q.end_label == 0);
}

TEST_CASE("output_row") {
  ModelConfig c = synthetic::small_config(1, 2, 8, 8, 9, 3, Task::qa);
  const ModelWeights w = synthetic::random_weights(c, 2);
  const ForwardTrace trace = forward(c, w, std::vector<std::size_t>{1, 2, 3, 4});
  CHECK(output_row(c, trace, 2) == 2);
  CHECK(output_row(c, trace, 6) == 2);
  CHECK_THROWS(output_row(c, trace, 8));
}
