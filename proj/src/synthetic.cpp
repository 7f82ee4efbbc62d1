// SPDX-License-Identifier: Apache-2.0
#include "headlrp/synthetic.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>

#include "headlrp/weights_io.hpp"

namespace headlrp::synthetic {

namespace {

// Row i of the 8 x 8 Sylvester-Hadamard matrix. Rows 1..7 sum to zero.
double hadamard_entry(std::size_t i, std::size_t j) {
  return std::popcount(static_cast<unsigned>(i & j)) % 2 == 0 ? 1.0 : -1.0;
}

void fill_normal(Tensor& t, double mean, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(mean, sd);
  for (double& v : t.data()) v = dist(rng);
}

constexpr double kOmega = 2.0 * std::numbers::pi / 40.0;

}  // namespace

ModelConfig small_config(std::size_t blocks, std::size_t heads, std::size_t hidden, std::size_t ffn,
                         std::size_t vocab, std::size_t classes, Task task) {
  ModelConfig c;
  c.num_blocks = blocks;
  c.num_heads = heads;
  c.hidden_dim = hidden;
  c.ffn_dim = ffn;
  c.vocab_size = vocab;
  c.max_positions = 16;
  c.num_classes = classes;
  c.task = task;
  c.validate();
  return c;
}

ModelWeights random_weights(const ModelConfig& config, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  ModelWeights w = zero_weights(config);
  for_each_tensor(w, [&](const std::string& name, Tensor& t) {
    const bool gain = name.ends_with(".gain");
    fill_normal(t, gain ? 1.0 : 0.0, gain ? scale / 4.0 : scale, rng);
  });
  return w;
}

std::vector<std::size_t> random_tokens(const ModelConfig& config, std::size_t length, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dist(0, config.vocab_size - 1);
  std::vector<std::size_t> ids(length);
  for (auto& id : ids) id = dist(rng);
  return ids;
}

void perturb(ModelWeights& weights, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  for_each_tensor(weights, [&](const std::string&, Tensor& t) {
    for (double& v : t.data()) v += dist(rng);
  });
}

MaskFixture make_mask_fixture() {
  MaskFixture f;
  f.config = small_config(2, 4, 16, 16, 7, 2);
  f.config.mask_token_id = vocab::mask;
  ModelWeights& w = f.weights = zero_weights(f.config);

  // Token dims 0..7: a distinct zero-sum Hadamard row per type. Position dims
  // 8..15: mirrored cos/sin pairs. Every embedding then has zero mean and norm
  // 4, so the embedding layer norm is the identity and attention scores
  // depend on token type and position only.
  const std::size_t rows[7] = {6, 2, 4, 1, 3, 5, 7};
  for (std::size_t id = 0; id < 7; ++id)
    for (std::size_t j = 0; j < 8; ++j) w.token_embedding(id, j) = hadamard_entry(rows[id], j);
  const double a = std::numbers::sqrt2;
  for (std::size_t t = 0; t < f.config.max_positions; ++t) {
    const double x = kOmega * static_cast<double>(t);
    const double pe[8] = {std::cos(x), std::sin(x), -std::cos(x), -std::sin(x),
                          std::cos(2 * x), std::sin(2 * x), -std::cos(2 * x), -std::sin(2 * x)};
    for (std::size_t j = 0; j < 8; ++j) w.position_embedding(t, 8 + j) = a * pe[j];
  }

  BlockWeights& b0 = w.blocks[0];
  // Head 0: nouns query, verbs answer.
  const double beta = 20.0;
  for (std::size_t j = 0; j < 8; ++j) {
    b0.wq(j, 0) = beta * hadamard_entry(rows[vocab::noun], j) / 8.0;
    b0.wk(j, 0) = hadamard_entry(rows[vocab::verb], j) / 8.0;
  }
  // Head 1: the query is the key of the next position (rotation by omega).
  const double gamma = 3.0;
  b0.wq(8, 4) = gamma * std::cos(kOmega);
  b0.wq(9, 4) = -gamma * std::sin(kOmega);
  b0.wq(8, 5) = gamma * std::sin(kOmega);
  b0.wq(9, 5) = gamma * std::cos(kOmega);
  b0.wk(8, 4) = gamma;
  b0.wk(9, 5) = gamma;

  const int offsets[20] = {1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3, -1, -1, -1, -1};
  const std::vector<std::string> names = {"[MASK]", "so", "dog", "runs", "very", "quite", "rather"};
  for (std::size_t i = 0; i < 20; ++i) {
    const std::size_t length = 12 + i % 3;
    const std::size_t noun = 2 + i % 5;
    const std::size_t verb = static_cast<std::size_t>(static_cast<int>(noun) + offsets[i]);
    const bool distractor = i == 6 || i == 11;
    ParsedSentence s;
    for (std::size_t t = 0; t < length; ++t) {
      std::size_t id = vocab::other_a + (i + t) % 3;
      if (t == 0) id = vocab::filler;
      if (t == noun) id = vocab::noun;
      if (t == verb || (distractor && t == 1)) id = vocab::verb;
      s.token_ids.push_back(id);
      s.words.push_back(names[id]);
      s.alignment.push_back(static_cast<int>(t));
    }
    s.arcs.push_back({noun, static_cast<int>(verb), "nsubj"});
    s.arcs.push_back({verb, kRootWord, "root"});
    f.corpus.sentences.push_back(std::move(s));
  }
  return f;
}

PlantedInstance make_planted_instance(std::uint64_t seed, double noise) {
  std::mt19937_64 rng(seed);
  PlantedInstance p;
  p.config = small_config(2, 4, 16, 16, planted::vocab_size, 2);
  p.config.mask_token_id = planted::mask;
  p.config.special_token_ids = {planted::cls};
  ModelWeights& w = p.weights = zero_weights(p.config);

  // dim 0: [CLS]; dim 1: label; dims 2/3: POS/NEG; dims 4,5: filler identity;
  // dims 6/7: the routed label features; dim 8: position 1.
  w.token_embedding(planted::mask, 4) = 1.0;
  w.token_embedding(planted::cls, 0) = 1.0;
  w.token_embedding(planted::pos, 1) = 1.0;
  w.token_embedding(planted::pos, 2) = 1.0;
  w.token_embedding(planted::neg, 1) = 1.0;
  w.token_embedding(planted::neg, 3) = 1.0;
  std::normal_distribution<double> unit(0.0, 1.0), small(0.0, 0.3);
  for (std::size_t id = planted::first_filler; id < planted::vocab_size; ++id) {
    w.token_embedding(id, 4) = unit(rng);
    w.token_embedding(id, 5) = unit(rng);
  }
  for (std::size_t t = 0; t < p.config.max_positions; ++t)
    for (std::size_t j = 9; j < 16; ++j) w.position_embedding(t, j) = small(rng);
  w.position_embedding(1, 8) = 1.0;

  BlockWeights& b0 = w.blocks[0];
  b0.wq(0, 0) = 3.0;  // [CLS] asks ...
  b0.wk(1, 0) = 3.0;  // ... for the label token
  b0.wv(2, 0) = 1.0;
  b0.wv(3, 1) = 1.0;
  b0.wo(0, 6) = 2.0;
  b0.wo(1, 7) = 2.0;
  for (std::size_t head = 1; head < 4; ++head) {
    b0.bq[4 * head] = 3.0;
    b0.wk(8, 4 * head) = 3.0;
  }
  w.classifier_weight(6, 0) = 1.0;
  w.classifier_weight(7, 1) = 1.0;
  perturb(w, noise, rng);

  const std::size_t length = std::uniform_int_distribution<std::size_t>(6, 12)(rng);
  p.label_position = std::uniform_int_distribution<std::size_t>(2, length - 1)(rng);
  p.label = std::uniform_int_distribution<std::size_t>(0, 1)(rng);
  std::uniform_int_distribution<std::size_t> filler(planted::first_filler, planted::vocab_size - 1);
  p.token_ids.push_back(planted::cls);
  for (std::size_t t = 1; t < length; ++t)
    p.token_ids.push_back(t == p.label_position ? (p.label == 0 ? planted::pos : planted::neg) : filler(rng));

  p.mask = HeadMask(2, 4);
  p.mask.set(0, 0, "synt:nsubj");
  return p;
}

ToyBundle make_toy_bundle(std::uint64_t seed, Task task, std::size_t examples) {
  std::mt19937_64 rng(seed);
  MaskFixture f = make_mask_fixture();
  ToyBundle bundle;
  bundle.config = f.config;
  bundle.config.task = task;
  bundle.corpus = std::move(f.corpus);
  ModelWeights w = zero_weights(bundle.config);
  w.token_embedding = f.weights.token_embedding;
  w.position_embedding = f.weights.position_embedding;
  for (std::size_t b = 0; b < bundle.config.num_blocks; ++b) {
    BlockWeights& dst = w.blocks[b];
    const BlockWeights& src = f.weights.blocks[b];
    dst.wq = src.wq;
    dst.bq = src.bq;
    dst.wk = src.wk;
    dst.bk = src.bk;
    // Attention patterns are fixed by the embeddings (block 0) or uniform
    // (block 1), so the value path and FFN can be random.
    for (Tensor* t : {&dst.wv, &dst.bv, &dst.wo, &dst.bo, &dst.w1, &dst.b1, &dst.w2, &dst.b2})
      fill_normal(*t, 0.0, 0.5, rng);
  }
  fill_normal(w.classifier_weight, 0.0, 1.0, rng);
  fill_normal(w.classifier_bias, 0.0, 0.1, rng);
  bundle.weights = std::move(w);

  bundle.dataset.task = task;
  std::uniform_int_distribution<std::size_t> length_dist(task == Task::qa ? 6 : 4, 14);
  std::uniform_int_distribution<std::size_t> word(vocab::noun, vocab::other_c);
  for (std::size_t i = 0; i < examples; ++i) {
    EvalExample ex;
    ex.token_ids.push_back(vocab::filler);
    const std::size_t length = length_dist(rng);
    while (ex.token_ids.size() < length) ex.token_ids.push_back(word(rng));
    const Prediction pred = predict(bundle.config, bundle.weights, ex.token_ids);
    if (task == Task::classification) {
      ex.label = pred.label;
    } else {
      ex.context_begin = 3;
      ex.context_end = length;
      ex.span_begin = std::clamp(pred.label, ex.context_begin, length - 1);
      ex.span_end = std::clamp(pred.end_label, ex.span_begin, length - 1) + 1;
    }
    bundle.dataset.examples.push_back(std::move(ex));
  }
  return bundle;
}

void write_toy_bundle(const std::filesystem::path& dir, const ToyBundle& bundle) {
  std::filesystem::create_directories(dir);
  save_weights(dir / "model.manifest", bundle.config, bundle.weights);
  write_corpus(dir / "corpus.jsonl", bundle.corpus);
  write_dataset(dir / "dataset.jsonl", bundle.dataset);
}

}  // namespace headlrp::synthetic
