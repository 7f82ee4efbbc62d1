// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic models, corpora and datasets with known ground truth.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "headlrp/corpus.hpp"
#include "headlrp/eval.hpp"
#include "headlrp/headmask.hpp"
#include "headlrp/model.hpp"

namespace headlrp::synthetic {

ModelConfig small_config(std::size_t blocks, std::size_t heads, std::size_t hidden, std::size_t ffn,
                         std::size_t vocab, std::size_t classes, Task task = Task::classification);

/// Every weight ~ N(0, scale^2); layer-norm gains ~ 1 + N(0, (scale/4)^2).
ModelWeights random_weights(const ModelConfig& config, std::uint64_t seed, double scale = 0.5);

std::vector<std::size_t> random_tokens(const ModelConfig& config, std::size_t length, std::mt19937_64& rng);

/// Adds N(0, sigma^2) to every parameter.
void perturb(ModelWeights& weights, double sigma, std::mt19937_64& rng);

/// A 2-block, 4-head model whose block-0 head 0 attends from nouns to the
/// first verb and whose block-0 head 1 attends to the next token; every other
/// head is uniform. The corpus has 20 nsubj arcs with head-minus-dependent
/// offsets {+1 x6, +2 x5, +3 x5, -1 x4}, two of them behind a distractor verb.
struct MaskFixture {
  ModelConfig config;
  ModelWeights weights;
  ParsedCorpus corpus;
  std::size_t synt_block = 0, synt_head = 0;
  std::size_t pos_block = 0, pos_head = 1;
};

namespace vocab {
inline constexpr std::size_t mask = 0, filler = 1, noun = 2, verb = 3, other_a = 4, other_b = 5, other_c = 6;
}

MaskFixture make_mask_fixture();

/// One instance of the label-routing model: block-0 head 0 copies a POS/NEG
/// label token into [CLS], three more heads attend to position 1 but carry no
/// value, everything else is near zero. Weights carry N(0, 0.02^2) noise.
struct PlantedInstance {
  ModelConfig config;
  ModelWeights weights;
  std::vector<std::size_t> token_ids;
  std::size_t label_position = 0;
  std::size_t label = 0;  // 0 for POS, 1 for NEG
  HeadMask mask;          // block-0 head 0 only
};

namespace planted {
inline constexpr std::size_t mask = 0, cls = 1, pos = 2, neg = 3, first_filler = 4, vocab_size = 12;
}

PlantedInstance make_planted_instance(std::uint64_t seed, double noise = 0.02);

/// Mask-fixture heads with random value/output/FFN/classifier weights, its
/// corpus, and a dataset labelled by the model's own predictions.
struct ToyBundle {
  ModelConfig config;
  ModelWeights weights;
  ParsedCorpus corpus;
  EvalDataset dataset;
};

ToyBundle make_toy_bundle(std::uint64_t seed, Task task = Task::classification, std::size_t examples = 24);

/// Writes model.manifest (+ model.bin), corpus.jsonl and dataset.jsonl.
void write_toy_bundle(const std::filesystem::path& dir, const ToyBundle& bundle);

}  // namespace headlrp::synthetic
