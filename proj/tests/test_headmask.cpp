// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "headlrp/headmask.hpp"
#include "headlrp/synthetic.hpp"

using namespace headlrp;

namespace {

// "the big dog barks": tokens [CLS] the big do ##g barks
ParsedSentence dog_sentence() {
  ParsedSentence s;
  s.words = {"the", "big", "dog", "barks"};
  s.token_ids = {1, 5, 6, 7, 8, 9};
  s.alignment = {kSpecialToken, 0, 1, 2, 2, 3};
  s.arcs = {{0, 2, "det"}, {1, 2, "amod"}, {2, 3, "nsubj"}, {3, kRootWord, "root"}};
  return s;
}

// One-hot attention rows: row r attends to targets[r].
Tensor pointing(std::size_t M, const std::vector<std::vector<std::size_t>>& targets) {
  const std::size_t T = targets.front().size();
  Tensor a({M, T, T});
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t r = 0; r < T; ++r) a(m, r, targets[m][r]) = 1.0;
  return a;
}

}  // namespace

TEST_CASE("corpus reading and validation") {
  const auto dir = std::filesystem::temp_directory_path() / "headlrp_test_corpus";
  std::filesystem::create_directories(dir);
  ParsedCorpus corpus;
  corpus.sentences.push_back(dog_sentence());
  write_corpus(dir / "c.jsonl", corpus);
  const ParsedCorpus back = read_corpus(dir / "c.jsonl");
  REQUIRE(back.sentences.size() == 1);
  CHECK(back.sentences[0].alignment == corpus.sentences[0].alignment);
  CHECK(back.sentences[0].word_span(2) == std::pair<std::size_t, std::size_t>{3, 5});
  CHECK(canonical_relation("obj") == "dobj");
  CHECK(canonical_relation("nsubj:pass") == "nsubj");
  try {
    (void)read_corpus(dir / "missing.jsonl");
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("corpus not found: ") == 0);
  }
  ParsedSentence bad = dog_sentence();
  bad.alignment = {kSpecialToken, 0, 2, 1, 2, 3};
  CHECK_THROWS_AS(validate_sentence(bad, 0), DataError);
  bad = dog_sentence();
  bad.arcs.push_back({0, 7, "amod"});
  CHECK_THROWS_AS(validate_sentence(bad, 0), DataError);
  std::ofstream(dir / "broken.jsonl") << "{\"tokens\": [1,2], \"alignment\": [0]}\n";
  CHECK_THROWS_AS(read_corpus(dir / "broken.jsonl"), DataError);
}

TEST_CASE("relation statistics") {
  ParsedCorpus corpus;
  corpus.sentences.push_back(dog_sentence());
  const RelationStats stats = compute_relation_stats(corpus);
  const auto* amod = stats.find("amod");
  REQUIRE(amod != nullptr);
  CHECK(amod->distribution[kMaxOffset + 1] == 1.0);
  CHECK(amod->token_distribution[kMaxOffset + 1] == 1.0);
  CHECK(stats.find("dobj") == nullptr);
  CHECK(stats.warnings.size() == 2);
  CHECK_THROWS_AS(compute_relation_stats(ParsedCorpus{}), DataError);
}

TEST_CASE("head hit counting on hand-built attention") {
  const ParsedSentence s = dog_sentence();
  // Head 0: every row points to the next token (last row to itself).
  // Head 1: the first subword of "dog" points to "barks", "big" to "do".
  const Tensor att = pointing(2, {{1, 2, 3, 4, 5, 5}, {1, 1, 3, 5, 1, 1}});
  const HeadHitCounts counts = count_head_hits(s, {att}, 2, {-1, 1});
  CHECK(counts.tokens == 5);
  CHECK(counts.arcs[0] == 1);  // nsubj
  CHECK(counts.arcs[2] == 1);  // amod
  CHECK(counts.offset_hits[1][0] == 4);
  CHECK(counts.dependent_to_head[0][1] == 1);
  CHECK(counts.dependent_to_head[2][1] == 1);
  CHECK(counts.dependent_to_head[2][0] == 1);  // "big" + 1 lands in "dog"
  const HeadFrequencies f = frequencies_from_counts(counts);
  CHECK(f.pos(1, 0, 0) == doctest::Approx(0.8));
  CHECK(f.synt(0, 0, 1) == 1.0);
  HeadHitCounts doubled = counts;
  doubled += counts;
  CHECK(frequencies_from_counts(doubled).pos(1, 0, 0) == doctest::Approx(0.8));
}

TEST_CASE("special columns are never the arg-max") {
  const ParsedSentence s = dog_sentence();
  Tensor att({1, 6, 6});
  for (std::size_t r = 0; r < 6; ++r) {
    att(0, r, 0) = 0.9;  // [CLS]
    att(0, r, 2) = 0.1;
  }
  const HeadHitCounts counts = count_head_hits(s, {att}, 1, {1});
  CHECK(counts.offset_hits[0][0] == 1);  // only row 1 -> 2
}

TEST_CASE("thresholds are strict") {
  HeadFrequencies f;
  f.num_blocks = 1;
  f.num_heads = 2;
  f.relations = {"nsubj", "dobj", "amod", "advmod"};
  f.relation_counts = {10, 0, 0, 0};
  f.syntactic = {{0.4, 0.41}, {0, 0}, {0, 0}, {0, 0}};
  f.dependent_to_head = f.syntactic;
  f.head_to_dependent = f.syntactic;
  f.offsets = {1};
  f.token_count = 10;
  f.positional = {{0.8, 0.81}};
  RelationStats stats;
  RelationStats::Relation rel;
  rel.name = "nsubj";
  rel.count = 10;
  rel.distribution[kMaxOffset + 1] = 0.3;
  stats.relations.push_back(rel);
  const HeadMask synt = build_syntactic_mask(f, stats, 0.1);
  CHECK_FALSE(synt.at(0, 0));
  CHECK(synt.at(0, 1));
  CHECK(synt.provenance(0, 1) == std::vector<std::string>{"synt:nsubj"});
  const HeadMask pos = build_positional_mask(f, 0.8);
  CHECK_FALSE(pos.at(0, 0));
  CHECK(pos.at(0, 1));
  const HeadMask both = combine_masks(synt, pos);
  CHECK(both.count() == 1);
  CHECK(both.is_syntactic(0, 1));
  CHECK(both.is_positional(0, 1));
}

TEST_CASE("planted fixture yields exactly the two planted heads") {
  const auto fx = synthetic::make_mask_fixture();
  const RelationStats stats = compute_relation_stats(fx.corpus);
  REQUIRE(stats.find("nsubj") != nullptr);
  CHECK(stats.find("nsubj")->peak() == doctest::Approx(0.3));
  const HeadFrequencies f = compute_head_frequencies(fx.config, fx.weights, fx.corpus);
  CHECK(f.synt(0, fx.synt_block, fx.synt_head) == doctest::Approx(0.9));
  const HeadMask mask = combine_masks(build_syntactic_mask(f, stats), build_positional_mask(f));
  CHECK(mask.count() == 2);
  CHECK(mask.at(fx.synt_block, fx.synt_head));
  CHECK(mask.at(fx.pos_block, fx.pos_head));
  CHECK(mask.provenance(fx.pos_block, fx.pos_head) == std::vector<std::string>{"pos:+1"});
}

TEST_CASE("random and corrupted masks") {
  HeadMask mask(3, 4);
  mask.set(0, 1, "synt:amod");
  mask.set(2, 3, "pos:-1");
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const HeadMask r = random_mask(mask, seed);
    CHECK(r.count() == mask.count());
    CHECK(r == random_mask(mask, seed));
  }
  std::size_t previous = mask.count();
  HeadMask last = mask;
  for (double rho : {0.0, 0.1, 0.25, 0.5, 0.75, 1.0}) {
    const HeadMask c = corrupt_mask(mask, rho, 3);
    CHECK(c.count() >= previous);
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t m = 0; m < 4; ++m)
        if (last.at(b, m)) CHECK(c.at(b, m));
    previous = c.count();
    last = c;
  }
  CHECK(corrupt_mask(mask, 0.0, 3) == mask);
  CHECK(corrupt_mask(mask, 1.0, 3).count() == 12);
  CHECK(corrupt_mask(mask, 0.3, 3).count() == 2 + 3);
  CHECK_THROWS(corrupt_mask(mask, 1.5, 0));
}

TEST_CASE("mask JSON round trip") {
  HeadMask mask(2, 3);
  mask.set(0, 2, "synt:nsubj");
  mask.set(0, 2, "pos:+1");
  mask.set(1, 0, "pos:-2");
  const HeadMask back = mask_from_json(nlohmann::json::parse(mask_to_json(mask).dump()));
  CHECK(back == mask);
  auto j = nlohmann::json::parse(mask_to_json(mask).dump());
  j.erase("provenance");
  const HeadMask bare = mask_from_json(j);
  CHECK(bare.provenance(1, 0) == std::vector<std::string>{"file"});
  j["mask"][0][0] = 2;
  CHECK_THROWS_AS(mask_from_json(j), DataError);
  const auto path = std::filesystem::temp_directory_path() / "headlrp_mask_test.json";
  write_mask(path, mask);
  CHECK(read_mask(path) == mask);
}
