// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "headlrp/attribution.hpp"
#include "headlrp/eval.hpp"
#include "headlrp/kernels.hpp"
#include "headlrp/synthetic.hpp"

using namespace headlrp;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double mean = 0.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(mean, 1.0);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

struct Setup {
  ModelConfig config;
  ModelWeights weights;
  std::vector<std::size_t> ids;
};

Setup random_setup(std::uint64_t seed, Task task = Task::classification) {
  std::mt19937_64 rng(seed);
  Setup s;
  s.config = synthetic::small_config(2, 2, 8, 12, 10, 3, task);
  s.config.special_token_ids = {1};
  s.weights = synthetic::random_weights(s.config, seed);
  s.ids = synthetic::random_tokens(s.config, 4 + seed % 6, rng);
  s.ids[0] = 1;
  return s;
}

}  // namespace

TEST_CASE("method names") {
  for (const auto& name : method_names()) CHECK(to_string(parse_method(name)) == name);
  try {
    (void)parse_method("lime");
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("ours, gae, rawatt, rollout, random") != std::string::npos);
  }
}

TEST_CASE("apply_mask") {
  std::mt19937_64 rng(1);
  const Tensor rel = random_tensor({2, 3, 3}, rng);
  const MaskedRelevance all = apply_mask(rel, HeadMask::all_ones(1, 2), 0);
  CHECK(add(all.synt, all.pos) == rel);
  const MaskedRelevance none = apply_mask(rel, HeadMask(1, 2), 0);
  CHECK(none.synt.sum() == 0.0);
  CHECK(none.pos.sum() == 0.0);
  HeadMask first(1, 2);
  first.set(0, 0, "synt:amod");
  const MaskedRelevance one = apply_mask(rel, first, 0);
  CHECK(one.synt.slice(0) == rel.slice(0));
  const Tensor off = one.synt.slice(1);
  for (double v : off.data()) CHECK(v == 0.0);
  for (double v : one.pos.data()) CHECK(v == 0.0);
  HeadMask both(1, 2);
  both.set(0, 1, "synt:amod");
  both.set(0, 1, "pos:+1");
  const MaskedRelevance half = apply_mask(rel, both, 0);
  CHECK(half.synt.slice(1) == scale(rel.slice(1), 0.5));
  CHECK(half.pos.slice(1) == scale(rel.slice(1), 0.5));
  CHECK_THROWS_AS(apply_mask(rel, HeadMask(1, 3), 0), DimensionError);
}

TEST_CASE("renormalize") {
  // Component sums (2, 2) and target 1: each factor is |2|/|4| * 1/2.
  const Renormalized r = renormalize({Tensor::vector({2.0}), Tensor::vector({1.0, 1.0})}, 1.0);
  CHECK(r.status == RenormStatus::ok);
  CHECK(r.synt.sum() == doctest::Approx(0.5));
  CHECK(r.pos.sum() == doctest::Approx(0.5));
  const Renormalized single = renormalize({Tensor::vector({0.25, 0.5}), Tensor({1})}, 2.0);
  CHECK(single.synt.sum() == doctest::Approx(2.0));
  CHECK(single.pos.sum() == 0.0);
  const Renormalized zero = renormalize({Tensor({2}), Tensor({2})}, 1.0);
  CHECK(zero.status == RenormStatus::degenerate);
  const Renormalized anomaly = renormalize({Tensor::vector({3.0}), Tensor::vector({-1.0})}, 1.0);
  CHECK(anomaly.status == RenormStatus::sign_anomaly);
  CHECK(anomaly.synt.sum() + anomaly.pos.sum() == doctest::Approx(1.0));
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor s = random_tensor({2, 3, 3}, rng, 0.2), p = random_tensor({2, 3, 3}, rng, 0.2);
    const double target = std::normal_distribution<double>(0.5, 0.5)(rng);
    const Renormalized out = renormalize({s, p}, target);
    if (out.status == RenormStatus::degenerate) continue;
    CHECK(std::abs(out.synt.sum() + out.pos.sum() - target) <= 1e-9 * std::max(1.0, std::abs(target)));
  }
}

TEST_CASE("rollout on a hand-built single block") {
  ModelConfig c = synthetic::small_config(1, 1, 2, 2, 3, 2);
  ForwardTrace trace;
  trace.token_ids = {0, 1};
  trace.blocks.resize(1);
  trace.logits = Tensor({2});
  trace.complete = true;
  AttentionGrads grads{{Tensor({1, 2, 2}, {1.0, 2.0, -1.0, 0.5})}};
  const Tensor rel({1, 2, 2}, {0.5, 0.25, 2.0, 1.0});
  // Abar = max(0, grad * rel) + I = [[1.5, 0.5], [0, 1.5]]; cls row 0 with column 0 zeroed.
  const AttributionResult r = rollout(c, trace, grads, {rel}, 0);
  REQUIRE(r.rollout.size() == 1);
  CHECK(r.rollout[0](0, 0) == 1.5);
  CHECK(r.rollout[0](0, 1) == 0.5);
  CHECK(r.rollout[0](1, 0) == 0.0);
  CHECK(r.scores == std::vector<double>{0.0, 0.5});
  CHECK_FALSE(r.degenerate);
}

TEST_CASE("rollout edge cases") {
  const Setup s = random_setup(3);
  const ForwardTrace trace = forward(s.config, s.weights, s.ids);
  const std::size_t T = s.ids.size();
  AttentionGrads zero{{Tensor({2, T, T}), Tensor({2, T, T})}};
  std::mt19937_64 rng(4);
  const std::vector<Tensor> rel = {random_tensor({2, T, T}, rng), random_tensor({2, T, T}, rng)};
  const AttributionResult r = rollout(s.config, trace, zero, rel, 0);
  CHECK(r.degenerate);
  for (const auto& a : r.rollout) CHECK(a == rollout(s.config, trace, zero, rel, 0).rollout.front());
  CHECK_THROWS_AS(rollout(s.config, trace, AttentionGrads{{zero.blocks[0]}}, rel, 0), StateError);

  // Positive rescaling of relevance with the inverse rescaling of gradients.
  const AttentionGrads grads = backward_attention_grads(s.config, s.weights, trace, 0);
  AttentionGrads scaled_grads = grads;
  std::vector<Tensor> scaled_rel;
  for (std::size_t b = 0; b < 2; ++b) {
    scaled_grads.blocks[b] = scale(grads.blocks[b], 1.0 / 4.0);
    scaled_rel.push_back(scale(rel[b], 4.0));
  }
  const auto a = rollout(s.config, trace, grads, rel, 0).scores;
  const auto b = rollout(s.config, trace, scaled_grads, scaled_rel, 0).scores;
  for (std::size_t t = 0; t < T; ++t) CHECK(std::abs(a[t] - b[t]) < 1e-12);
}

TEST_CASE("explain with the all-ones mask equals GAE") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Task task = seed % 4 == 3 ? Task::qa : Task::classification;
    const Setup s = random_setup(seed, task);
    const ForwardTrace trace = forward(s.config, s.weights, s.ids);
    const std::size_t target = seed % trace.output_size();
    const AttributionResult ours = explain(s.config, s.weights, trace, target, HeadMask::all_ones(2, 2));
    const AttributionResult gae = baseline_gae(s.config, s.weights, trace, target);
    REQUIRE(ours.scores.size() == gae.scores.size());
    for (std::size_t t = 0; t < ours.scores.size(); ++t) CHECK(std::abs(ours.scores[t] - gae.scores[t]) <= 1e-9);
  }
}

TEST_CASE("explain properties") {
  const Setup s = random_setup(5);
  HeadMask mask(2, 2);
  mask.set(0, 1, "synt:nsubj");
  mask.set(1, 0, "pos:+1");
  const AttributionResult a = explain(s.config, s.weights, s.ids, 0, mask);
  const AttributionResult b = explain(s.config, s.weights, s.ids, 0, mask);
  CHECK(a.scores == b.scores);
  CHECK(a.scores.size() == s.ids.size());
  for (double v : a.scores) {
    CHECK(v >= 0.0);
    CHECK(std::isfinite(v));
  }
  CHECK(a.scores[0] == 0.0);
  for (const auto& blk : a.blocks) {
    if (blk.status == RenormStatus::ok || blk.status == RenormStatus::sign_anomaly)
      CHECK(std::abs(blk.synt_total + blk.pos_total - blk.context_total) <= 1e-9 * std::max(1.0, std::abs(blk.context_total)));
  }
  // Masking at propagation time is available and still well formed.
  const AttributionResult gated = explain(s.config, s.weights, s.ids, 0, mask, {false, true});
  for (double v : gated.scores) CHECK(v >= 0.0);
  CHECK_THROWS_AS(explain(s.config, s.weights, s.ids, 0, HeadMask(3, 2)), DimensionError);
}

TEST_CASE("single token input") {
  ModelConfig c = synthetic::small_config(1, 2, 8, 8, 5, 2);
  const ModelWeights w = synthetic::random_weights(c, 1);
  const AttributionResult r = explain(c, w, std::vector<std::size_t>{3}, 0, HeadMask::all_ones(1, 2));
  CHECK(r.scores.size() == 1);
}

TEST_CASE("raw attention and rollout baselines") {
  const Setup s = random_setup(6);
  const ForwardTrace trace = forward(s.config, s.weights, s.ids);
  const std::size_t T = s.ids.size();
  const AttributionResult raw = baseline_rawatt(s.config, trace, 0);
  const auto content = content_positions(s.config, s.ids);
  for (std::size_t j = 0; j < T; ++j) {
    const Tensor& a = trace.blocks.back().attention;
    const double want = content[j] ? 0.5 * (a(0, 0, j) + a(1, 0, j)) : 0.0;
    CHECK(std::abs(raw.scores[j] - want) < 1e-12);
  }
  // Two-block rollout against a hand product.
  const AttributionResult roll = baseline_rollout(s.config, trace, 0);
  std::vector<std::vector<double>> abar[2];
  for (std::size_t b = 0; b < 2; ++b) {
    abar[b].assign(T, std::vector<double>(T));
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j) {
        const Tensor& a = trace.blocks[b].attention;
        abar[b][i][j] = 0.5 * (0.5 * (a(0, i, j) + a(1, i, j)) + (i == j ? 1.0 : 0.0));
      }
  }
  for (std::size_t j = 0; j < T; ++j) {
    double want = 0.0;
    for (std::size_t k = 0; k < T; ++k) want += abar[1][0][k] * abar[0][k][j];
    if (!content[j]) want = 0.0;
    CHECK(std::abs(roll.scores[j] - want) < 1e-12);
  }
}

TEST_CASE("uniform attention gives uniform raw scores") {
  ModelConfig c = synthetic::small_config(1, 2, 8, 8, 5, 2);
  ModelWeights w = synthetic::random_weights(c, 1);
  w.blocks[0].wq = Tensor({8, 8});
  w.blocks[0].bq = Tensor({8});
  const AttributionResult r = baseline_rawatt(c, forward(c, w, std::vector<std::size_t>{1, 2, 3, 4}), 0);
  CHECK(r.scores[1] == doctest::Approx(0.25));
  CHECK(r.scores[3] == doctest::Approx(0.25));
}

TEST_CASE("planted head receives the top score") {
  int ours_hits = 0, occlusion_hits = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto p = synthetic::make_planted_instance(seed);
    const auto r = attribute(p.config, p.weights, p.token_ids, Method::ours, p.mask);
    const auto top = rank_positions(r.scores, content_positions(p.config, p.token_ids)).front();
    ours_hits += top == p.label_position ? 1 : 0;
    // Occlusion oracle: masking the label token costs the most confidence.
    const Prediction base = predict(p.config, p.weights, p.token_ids);
    std::size_t worst = 0;
    double drop = -1.0;
    for (std::size_t t = 1; t < p.token_ids.size(); ++t) {
      auto ids = p.token_ids;
      ids[t] = p.config.mask_token_id;
      const double d = base.confidence - prediction_confidence(p.config, forward(p.config, p.weights, ids).logits, base);
      if (d > drop) {
        drop = d;
        worst = t;
      }
    }
    occlusion_hits += worst == p.label_position ? 1 : 0;
  }
  CHECK(ours_hits == 20);
  CHECK(occlusion_hits == 20);
}

TEST_CASE("QA attribution averages start and end") {
  const Setup s = random_setup(7, Task::qa);
  const AttributionResult r = attribute(s.config, s.weights, s.ids, Method::gae, HeadMask::all_ones(2, 2));
  const ForwardTrace trace = forward(s.config, s.weights, s.ids);
  const Prediction p = prediction_from_logits(s.config, trace.logits);
  const auto a = baseline_gae(s.config, s.weights, trace, p.label).scores;
  const auto b = baseline_gae(s.config, s.weights, trace, s.ids.size() + p.end_label).scores;
  for (std::size_t t = 0; t < a.size(); ++t) CHECK(r.scores[t] == doctest::Approx(0.5 * (a[t] + b[t])));
}

TEST_CASE("attribution JSON record") {
  const Setup s = random_setup(8);
  const AttributionResult r = attribute(s.config, s.weights, s.ids, Method::rawatt, HeadMask(2, 2));
  const auto j = attribution_to_json(s.ids, r);
  CHECK(j["method"] == "rawatt");
  CHECK(j["scores"].size() == s.ids.size());
  CHECK(j.contains("degenerate"));
  CHECK(j.contains("target"));
}
