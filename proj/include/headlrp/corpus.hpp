// SPDX-License-Identifier: Apache-2.0
//
// Dependency-parsed corpus, one JSON object per line:
//
//   {"words": ["The", "car", "is", "red"],          (optional)
//    "tokens": [0, 17, 23, 9, 31, 1],               model token ids
//    "alignment": [-1, 0, 1, 2, 3, -1],             token -> word index, -1 for special tokens
//    "arcs": [[1, 3, "nsubj"], [0, 1, "det"]]}      [dependent word, head word (-1 = root), relation]
//
// Word indices are 0-based. Relation labels use universal-dependency names;
// "obj" is read as "dobj" and subtypes ("nsubj:pass") collapse to their base.
#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace headlrp {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kSpecialToken = -1;
inline constexpr int kRootWord = -1;

struct Arc {
  std::size_t dependent = 0;
  int head = kRootWord;
  std::string relation;
};

struct ParsedSentence {
  std::vector<std::string> words;
  std::vector<std::size_t> token_ids;
  std::vector<int> alignment;
  std::vector<Arc> arcs;

  std::size_t word_count() const;
  /// First and one-past-last token of `word`; tokens of a word are contiguous.
  std::pair<std::size_t, std::size_t> word_span(std::size_t word) const;
  bool is_special(std::size_t token) const { return alignment[token] == kSpecialToken; }
};

struct ParsedCorpus {
  std::vector<ParsedSentence> sentences;
};

std::string canonical_relation(const std::string& label);

/// Throws DataError naming `index` when the alignment or arcs are inconsistent.
void validate_sentence(const ParsedSentence& sentence, std::size_t index);

ParsedCorpus read_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, const ParsedCorpus& corpus);

}  // namespace headlrp
