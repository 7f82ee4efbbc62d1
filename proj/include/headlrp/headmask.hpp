// SPDX-License-Identifier: Apache-2.0
//
// Identification of syntactic and positional attention heads.
//
// A head (b, m) is syntactic for relation k when the fraction of relation-k
// arcs on which its attention arg-max lands on the partner word exceeds the
// relation's most likely relative position by more than xi_synt. It is
// positional when its arg-max sits at a fixed relative offset on more than
// xi_pos of all tokens. The head mask is the union of both.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "headlrp/corpus.hpp"
#include "headlrp/model.hpp"
#include "json.hpp"

namespace headlrp {

inline const std::array<std::string, 4> kCoreRelations = {"nsubj", "dobj", "amod", "advmod"};

/// Word offsets (head - dependent) are clipped to [-kMaxOffset, +kMaxOffset].
inline constexpr int kMaxOffset = 10;
inline constexpr std::size_t kOffsetBuckets = 2 * kMaxOffset + 1;

inline constexpr double kDefaultXiSynt = 0.1;
inline constexpr double kDefaultXiPos = 0.8;
inline const std::vector<int> kDefaultOffsets = {-2, -1, 1, 2};

struct RelationStats {
  struct Relation {
    std::string name;
    std::size_t count = 0;
    /// Word-level distribution over clipped offsets; index = offset + kMaxOffset.
    std::array<double, kOffsetBuckets> distribution{};
    /// Same statistic between first subwords, for diagnostics.
    std::array<double, kOffsetBuckets> token_distribution{};
    double peak() const;
  };
  std::vector<Relation> relations;    // core relations with at least one arc
  std::vector<std::string> warnings;  // relations dropped for lack of arcs

  const Relation* find(const std::string& name) const;
};

RelationStats compute_relation_stats(const ParsedCorpus& corpus);

/// Integer hit counts behind the frequencies. Merging is element-wise addition.
struct HeadHitCounts {
  std::size_t num_blocks = 0, num_heads = 0;
  std::vector<int> offsets;
  std::vector<std::size_t> arcs;                                // per core relation
  std::vector<std::vector<std::size_t>> dependent_to_head;      // [k][b*M+m]
  std::vector<std::vector<std::size_t>> head_to_dependent;      // [k][b*M+m]
  std::size_t tokens = 0;
  std::vector<std::vector<std::size_t>> offset_hits;            // [i][b*M+m]

  HeadHitCounts(std::size_t blocks, std::size_t heads, std::vector<int> offsets);
  HeadHitCounts& operator+=(const HeadHitCounts& other);
};

struct HeadFrequencies {
  std::size_t num_blocks = 0, num_heads = 0;
  std::vector<std::string> relations;  // kCoreRelations order
  std::vector<std::size_t> relation_counts;
  std::vector<std::vector<double>> syntactic;          // max over both arc directions
  std::vector<std::vector<double>> dependent_to_head;
  std::vector<std::vector<double>> head_to_dependent;
  std::vector<int> offsets;
  std::size_t token_count = 0;
  std::vector<std::vector<double>> positional;  // [i][b*M+m]

  double synt(std::size_t k, std::size_t b, std::size_t m) const { return syntactic[k][b * num_heads + m]; }
  double pos(std::size_t i, std::size_t b, std::size_t m) const { return positional[i][b * num_heads + m]; }
};

/// Hit counts of one sentence given its per-block attention tensors [M x T x T].
HeadHitCounts count_head_hits(const ParsedSentence& sentence, const std::vector<Tensor>& attention,
                              std::size_t num_heads, const std::vector<int>& offsets);

HeadFrequencies frequencies_from_counts(const HeadHitCounts& counts);

/// Runs the model over every sentence (in parallel) and merges the counts.
HeadFrequencies compute_head_frequencies(const ModelConfig& config, const ModelWeights& weights,
                                         const ParsedCorpus& corpus,
                                         const std::vector<int>& offsets = kDefaultOffsets);

class HeadMask {
 public:
  HeadMask() = default;
  HeadMask(std::size_t num_blocks, std::size_t num_heads);
  static HeadMask all_ones(std::size_t num_blocks, std::size_t num_heads);

  std::size_t num_blocks() const { return num_blocks_; }
  std::size_t num_heads() const { return num_heads_; }
  bool at(std::size_t b, std::size_t m) const { return bits_[b * num_heads_ + m] != 0; }
  const std::vector<std::string>& provenance(std::size_t b, std::size_t m) const {
    return provenance_[b * num_heads_ + m];
  }
  /// Sets the entry and records why.
  void set(std::size_t b, std::size_t m, const std::string& reason);

  std::size_t count() const;
  double rate() const;
  bool is_syntactic(std::size_t b, std::size_t m) const;
  bool is_positional(std::size_t b, std::size_t m) const;
  std::vector<std::vector<bool>> gate() const;

  friend bool operator==(const HeadMask&, const HeadMask&) = default;

 private:
  std::size_t num_blocks_ = 0, num_heads_ = 0;
  std::vector<std::uint8_t> bits_;
  std::vector<std::vector<std::string>> provenance_;
};

HeadMask build_syntactic_mask(const HeadFrequencies& freqs, const RelationStats& stats,
                              double xi_synt = kDefaultXiSynt);
HeadMask build_positional_mask(const HeadFrequencies& freqs, double xi_pos = kDefaultXiPos);
HeadMask combine_masks(const HeadMask& a, const HeadMask& b);

/// Uniformly random mask with exactly reference.count() entries set.
HeadMask random_mask(const HeadMask& reference, std::uint64_t seed);

/// Switches ceil(rho * zeros) zero entries to one. For a fixed seed the flipped
/// set grows monotonically with rho.
HeadMask corrupt_mask(const HeadMask& mask, double rho, std::uint64_t seed);

std::string offset_label(int offset);

nlohmann::ordered_json mask_to_json(const HeadMask& mask);
HeadMask mask_from_json(const nlohmann::json& j);
nlohmann::ordered_json diagnostics_to_json(const HeadFrequencies& freqs, const RelationStats& stats);

void write_mask(const std::filesystem::path& path, const HeadMask& mask,
                const nlohmann::ordered_json& diagnostics = nullptr);
HeadMask read_mask(const std::filesystem::path& path);

}  // namespace headlrp
