// SPDX-License-Identifier: Apache-2.0
#include "headlrp/headmask.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace headlrp {

namespace {

std::size_t relation_index(const std::string& name) {
  const auto it = std::find(kCoreRelations.begin(), kCoreRelations.end(), name);
  return it == kCoreRelations.end() ? kCoreRelations.size()
                                    : static_cast<std::size_t>(it - kCoreRelations.begin());
}

std::size_t offset_bucket(long offset) {
  return static_cast<std::size_t>(std::clamp<long>(offset, -kMaxOffset, kMaxOffset) + kMaxOffset);
}

void require_same_grid(const HeadMask& a, const HeadMask& b, const char* what) {
  if (a.num_blocks() != b.num_blocks() || a.num_heads() != b.num_heads()) {
    throw DimensionError(std::string(what) + ": masks are " + std::to_string(a.num_blocks()) + "x" +
                         std::to_string(a.num_heads()) + " and " + std::to_string(b.num_blocks()) + "x" +
                         std::to_string(b.num_heads()));
  }
}

bool has_prefix(const std::vector<std::string>& tags, const std::string& prefix) {
  return std::any_of(tags.begin(), tags.end(), [&](const std::string& t) { return t.rfind(prefix, 0) == 0; });
}

}  // namespace

// ---------------------------------------------------------------- relation statistics

double RelationStats::Relation::peak() const {
  return *std::max_element(distribution.begin(), distribution.end());
}

const RelationStats::Relation* RelationStats::find(const std::string& name) const {
  for (const auto& r : relations)
    if (r.name == name) return &r;
  return nullptr;
}

RelationStats compute_relation_stats(const ParsedCorpus& corpus) {
  if (corpus.sentences.empty()) throw DataError("relation statistics: corpus is empty");
  std::vector<std::array<std::size_t, kOffsetBuckets>> word_counts(kCoreRelations.size()),
      token_counts(kCoreRelations.size());
  std::vector<std::size_t> totals(kCoreRelations.size(), 0);
  for (const auto& s : corpus.sentences) {
    for (const Arc& arc : s.arcs) {
      const std::size_t k = relation_index(arc.relation);
      if (k == kCoreRelations.size() || arc.head == kRootWord) continue;
      const auto dep = static_cast<long>(arc.dependent);
      const long head = arc.head;
      ++word_counts[k][offset_bucket(head - dep)];
      const long dep_first = static_cast<long>(s.word_span(arc.dependent).first);
      const long head_first = static_cast<long>(s.word_span(static_cast<std::size_t>(arc.head)).first);
      ++token_counts[k][offset_bucket(head_first - dep_first)];
      ++totals[k];
    }
  }
  RelationStats stats;
  for (std::size_t k = 0; k < kCoreRelations.size(); ++k) {
    if (totals[k] == 0) {
      stats.warnings.push_back("relation " + kCoreRelations[k] + " has no arcs in the corpus; dropped");
      continue;
    }
    RelationStats::Relation rel;
    rel.name = kCoreRelations[k];
    rel.count = totals[k];
    for (std::size_t i = 0; i < kOffsetBuckets; ++i) {
      rel.distribution[i] = static_cast<double>(word_counts[k][i]) / static_cast<double>(totals[k]);
      rel.token_distribution[i] = static_cast<double>(token_counts[k][i]) / static_cast<double>(totals[k]);
    }
    stats.relations.push_back(rel);
  }
  return stats;
}

// ---------------------------------------------------------------- head frequencies

HeadHitCounts::HeadHitCounts(std::size_t blocks, std::size_t heads, std::vector<int> offs)
    : num_blocks(blocks),
      num_heads(heads),
      offsets(std::move(offs)),
      arcs(kCoreRelations.size(), 0),
      dependent_to_head(kCoreRelations.size(), std::vector<std::size_t>(blocks * heads, 0)),
      head_to_dependent(kCoreRelations.size(), std::vector<std::size_t>(blocks * heads, 0)),
      offset_hits(offsets.size(), std::vector<std::size_t>(blocks * heads, 0)) {}

HeadHitCounts& HeadHitCounts::operator+=(const HeadHitCounts& other) {
  if (other.num_blocks != num_blocks || other.num_heads != num_heads || other.offsets != offsets) {
    throw DimensionError("head hit counts: merging incompatible counts");
  }
  auto merge = [](std::vector<std::vector<std::size_t>>& dst, const std::vector<std::vector<std::size_t>>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i)
      for (std::size_t j = 0; j < dst[i].size(); ++j) dst[i][j] += src[i][j];
  };
  for (std::size_t k = 0; k < arcs.size(); ++k) arcs[k] += other.arcs[k];
  merge(dependent_to_head, other.dependent_to_head);
  merge(head_to_dependent, other.head_to_dependent);
  merge(offset_hits, other.offset_hits);
  tokens += other.tokens;
  return *this;
}

HeadHitCounts count_head_hits(const ParsedSentence& sentence, const std::vector<Tensor>& attention,
                              std::size_t num_heads, const std::vector<int>& offsets) {
  HeadHitCounts counts(attention.size(), num_heads, offsets);
  const std::size_t T = sentence.token_ids.size();
  std::vector<std::size_t> content;
  for (std::size_t t = 0; t < T; ++t)
    if (!sentence.is_special(t)) content.push_back(t);
  if (content.empty()) return counts;
  counts.tokens = content.size();

  struct Probe {
    std::size_t k, row, lo, hi;
    bool dependent_row;
  };
  std::vector<Probe> probes;
  for (const Arc& arc : sentence.arcs) {
    const std::size_t k = relation_index(arc.relation);
    if (k == kCoreRelations.size() || arc.head == kRootWord) continue;
    ++counts.arcs[k];
    const auto dep = sentence.word_span(arc.dependent);
    const auto head = sentence.word_span(static_cast<std::size_t>(arc.head));
    probes.push_back({k, dep.first, head.first, head.second, true});
    probes.push_back({k, head.first, dep.first, dep.second, false});
  }

  std::vector<std::size_t> best(T);
  for (std::size_t b = 0; b < attention.size(); ++b) {
    if (attention[b].shape() != Shape{num_heads, T, T}) {
      throw DimensionError("count_head_hits: attention " + shape_string(attention[b].shape()) +
                           " does not match sentence length " + std::to_string(T));
    }
    for (std::size_t m = 0; m < num_heads; ++m) {
      const std::size_t slot = b * num_heads + m;
      for (std::size_t r = 0; r < T; ++r) {
        std::size_t arg = content.front();
        for (std::size_t c : content)
          if (attention[b](m, r, c) > attention[b](m, r, arg)) arg = c;
        best[r] = arg;
      }
      for (std::size_t r : content) {
        for (std::size_t i = 0; i < offsets.size(); ++i) {
          if (static_cast<long>(best[r]) - static_cast<long>(r) == offsets[i]) ++counts.offset_hits[i][slot];
        }
      }
      for (const Probe& p : probes) {
        if (best[p.row] >= p.lo && best[p.row] < p.hi) {
          auto& hits = p.dependent_row ? counts.dependent_to_head : counts.head_to_dependent;
          ++hits[p.k][slot];
        }
      }
    }
  }
  return counts;
}

HeadFrequencies frequencies_from_counts(const HeadHitCounts& counts) {
  HeadFrequencies f;
  f.num_blocks = counts.num_blocks;
  f.num_heads = counts.num_heads;
  f.relations.assign(kCoreRelations.begin(), kCoreRelations.end());
  f.relation_counts = counts.arcs;
  f.offsets = counts.offsets;
  f.token_count = counts.tokens;
  const std::size_t slots = counts.num_blocks * counts.num_heads;
  auto ratio = [](std::size_t hits, std::size_t total) {
    return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
  };
  for (std::size_t k = 0; k < kCoreRelations.size(); ++k) {
    std::vector<double> d2h(slots), h2d(slots), best(slots);
    for (std::size_t s = 0; s < slots; ++s) {
      d2h[s] = ratio(counts.dependent_to_head[k][s], counts.arcs[k]);
      h2d[s] = ratio(counts.head_to_dependent[k][s], counts.arcs[k]);
      best[s] = std::max(d2h[s], h2d[s]);
    }
    f.dependent_to_head.push_back(std::move(d2h));
    f.head_to_dependent.push_back(std::move(h2d));
    f.syntactic.push_back(std::move(best));
  }
  for (std::size_t i = 0; i < counts.offsets.size(); ++i) {
    std::vector<double> row(slots);
    for (std::size_t s = 0; s < slots; ++s) row[s] = ratio(counts.offset_hits[i][s], counts.tokens);
    f.positional.push_back(std::move(row));
  }
  return f;
}

HeadFrequencies compute_head_frequencies(const ModelConfig& config, const ModelWeights& weights,
                                         const ParsedCorpus& corpus, const std::vector<int>& offsets) {
  if (corpus.sentences.empty()) throw DataError("head frequencies: corpus is empty");
  const auto n = static_cast<std::ptrdiff_t>(corpus.sentences.size());
  std::vector<HeadHitCounts> per_sentence(corpus.sentences.size(),
                                          HeadHitCounts(config.num_blocks, config.num_heads, offsets));
  std::vector<std::exception_ptr> errors(corpus.sentences.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    try {
      const auto& s = corpus.sentences[idx];
      validate_sentence(s, idx);
      ForwardTrace trace;
      try {
        trace = forward(config, weights, s.token_ids);
      } catch (const std::invalid_argument& e) {
        throw DataError("sentence " + std::to_string(idx) + ": " + e.what());
      }
      std::vector<Tensor> attention;
      for (auto& bt : trace.blocks) attention.push_back(std::move(bt.attention));
      per_sentence[idx] = count_head_hits(s, attention, config.num_heads, offsets);
    } catch (...) {
      errors[idx] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  HeadHitCounts total(config.num_blocks, config.num_heads, offsets);
  for (const auto& c : per_sentence) total += c;
  return frequencies_from_counts(total);
}

// ---------------------------------------------------------------- masks

HeadMask::HeadMask(std::size_t num_blocks, std::size_t num_heads)
    : num_blocks_(num_blocks),
      num_heads_(num_heads),
      bits_(num_blocks * num_heads, 0),
      provenance_(num_blocks * num_heads) {}

HeadMask HeadMask::all_ones(std::size_t num_blocks, std::size_t num_heads) {
  HeadMask mask(num_blocks, num_heads);
  for (std::size_t b = 0; b < num_blocks; ++b)
    for (std::size_t m = 0; m < num_heads; ++m) mask.set(b, m, "all");
  return mask;
}

void HeadMask::set(std::size_t b, std::size_t m, const std::string& reason) {
  if (b >= num_blocks_ || m >= num_heads_) throw std::out_of_range("head mask index out of range");
  const std::size_t slot = b * num_heads_ + m;
  bits_[slot] = 1;
  auto& tags = provenance_[slot];
  if (std::find(tags.begin(), tags.end(), reason) == tags.end()) {
    tags.push_back(reason);
    std::sort(tags.begin(), tags.end());
  }
}

std::size_t HeadMask::count() const { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1)); }

double HeadMask::rate() const {
  return bits_.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(bits_.size());
}

bool HeadMask::is_syntactic(std::size_t b, std::size_t m) const { return has_prefix(provenance(b, m), "synt:"); }
bool HeadMask::is_positional(std::size_t b, std::size_t m) const { return has_prefix(provenance(b, m), "pos:"); }

std::vector<std::vector<bool>> HeadMask::gate() const {
  std::vector<std::vector<bool>> g(num_blocks_, std::vector<bool>(num_heads_));
  for (std::size_t b = 0; b < num_blocks_; ++b)
    for (std::size_t m = 0; m < num_heads_; ++m) g[b][m] = at(b, m);
  return g;
}

std::string offset_label(int offset) { return (offset > 0 ? "+" : "") + std::to_string(offset); }

HeadMask build_syntactic_mask(const HeadFrequencies& freqs, const RelationStats& stats, double xi_synt) {
  HeadMask mask(freqs.num_blocks, freqs.num_heads);
  for (std::size_t k = 0; k < freqs.relations.size(); ++k) {
    const auto* rel = stats.find(freqs.relations[k]);
    if (rel == nullptr || freqs.relation_counts[k] == 0) continue;
    const double threshold = rel->peak() + xi_synt;
    for (std::size_t b = 0; b < freqs.num_blocks; ++b)
      for (std::size_t m = 0; m < freqs.num_heads; ++m)
        if (freqs.synt(k, b, m) > threshold) mask.set(b, m, "synt:" + rel->name);
  }
  return mask;
}

HeadMask build_positional_mask(const HeadFrequencies& freqs, double xi_pos) {
  HeadMask mask(freqs.num_blocks, freqs.num_heads);
  if (freqs.token_count == 0) return mask;
  for (std::size_t i = 0; i < freqs.offsets.size(); ++i)
    for (std::size_t b = 0; b < freqs.num_blocks; ++b)
      for (std::size_t m = 0; m < freqs.num_heads; ++m)
        if (freqs.pos(i, b, m) > xi_pos) mask.set(b, m, "pos:" + offset_label(freqs.offsets[i]));
  return mask;
}

HeadMask combine_masks(const HeadMask& a, const HeadMask& b) {
  require_same_grid(a, b, "combine_masks");
  HeadMask out(a.num_blocks(), a.num_heads());
  for (std::size_t bi = 0; bi < a.num_blocks(); ++bi) {
    for (std::size_t m = 0; m < a.num_heads(); ++m) {
      for (const auto& tag : a.provenance(bi, m)) out.set(bi, m, tag);
      for (const auto& tag : b.provenance(bi, m)) out.set(bi, m, tag);
    }
  }
  return out;
}

HeadMask random_mask(const HeadMask& reference, std::uint64_t seed) {
  const std::size_t B = reference.num_blocks(), M = reference.num_heads();
  std::vector<std::size_t> slots(B * M);
  std::iota(slots.begin(), slots.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(slots.begin(), slots.end(), rng);
  HeadMask out(B, M);
  for (std::size_t i = 0; i < reference.count(); ++i) out.set(slots[i] / M, slots[i] % M, "random");
  return out;
}

HeadMask corrupt_mask(const HeadMask& mask, double rho, std::uint64_t seed) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("corrupt_mask: rho must lie in [0, 1]");
  const std::size_t M = mask.num_heads();
  std::vector<std::size_t> zeros;
  for (std::size_t b = 0; b < mask.num_blocks(); ++b)
    for (std::size_t m = 0; m < M; ++m)
      if (!mask.at(b, m)) zeros.push_back(b * M + m);
  std::mt19937_64 rng(seed);
  std::shuffle(zeros.begin(), zeros.end(), rng);
  // The small slack keeps products like 0.3 * 10 from rounding up past 3.
  const auto flips = static_cast<std::size_t>(
      std::min<double>(static_cast<double>(zeros.size()), std::ceil(rho * static_cast<double>(zeros.size()) - 1e-9)));
  HeadMask out = mask;
  for (std::size_t i = 0; i < flips; ++i) out.set(zeros[i] / M, zeros[i] % M, "corrupt");
  return out;
}

// ---------------------------------------------------------------- serialisation

nlohmann::ordered_json mask_to_json(const HeadMask& mask) {
  nlohmann::ordered_json j;
  j["num_blocks"] = mask.num_blocks();
  j["num_heads"] = mask.num_heads();
  j["count"] = mask.count();
  j["rate"] = mask.rate();
  auto grid = nlohmann::ordered_json::array();
  auto provenance = nlohmann::ordered_json::array();
  for (std::size_t b = 0; b < mask.num_blocks(); ++b) {
    auto row = nlohmann::ordered_json::array();
    for (std::size_t m = 0; m < mask.num_heads(); ++m) {
      row.push_back(mask.at(b, m) ? 1 : 0);
      if (mask.at(b, m)) {
        provenance.push_back({{"block", b}, {"head", m}, {"reasons", mask.provenance(b, m)}});
      }
    }
    grid.push_back(std::move(row));
  }
  j["mask"] = std::move(grid);
  j["provenance"] = std::move(provenance);
  return j;
}

HeadMask mask_from_json(const nlohmann::json& j) {
  try {
    const auto B = j.at("num_blocks").get<std::size_t>();
    const auto M = j.at("num_heads").get<std::size_t>();
    HeadMask mask(B, M);
    const auto& grid = j.at("mask");
    if (grid.size() != B) throw DataError("mask grid has " + std::to_string(grid.size()) + " rows, expected " + std::to_string(B));
    for (std::size_t b = 0; b < B; ++b) {
      if (grid[b].size() != M) throw DataError("mask grid row " + std::to_string(b) + " has wrong width");
      for (std::size_t m = 0; m < M; ++m) {
        const int v = grid[b][m].get<int>();
        if (v != 0 && v != 1) throw DataError("mask entries must be 0 or 1");
      }
    }
    if (j.contains("provenance")) {
      for (const auto& p : j.at("provenance")) {
        const auto b = p.at("block").get<std::size_t>();
        const auto m = p.at("head").get<std::size_t>();
        if (b >= B || m >= M || grid[b][m].get<int>() != 1) throw DataError("provenance for an unset head");
        for (const auto& r : p.at("reasons")) mask.set(b, m, r.get<std::string>());
      }
    }
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t m = 0; m < M; ++m)
        if (grid[b][m].get<int>() == 1 && !mask.at(b, m)) mask.set(b, m, "file");
    return mask;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("mask file: ") + e.what());
  }
}

nlohmann::ordered_json diagnostics_to_json(const HeadFrequencies& freqs, const RelationStats& stats) {
  nlohmann::ordered_json j;
  auto relations = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < freqs.relations.size(); ++k) {
    nlohmann::ordered_json r;
    r["relation"] = freqs.relations[k];
    r["arcs"] = freqs.relation_counts[k];
    if (const auto* rel = stats.find(freqs.relations[k])) {
      r["word_offset_peak"] = rel->peak();
      r["token_offset_peak"] = *std::max_element(rel->token_distribution.begin(), rel->token_distribution.end());
      r["word_offset_distribution"] = rel->distribution;
    }
    r["alpha"] = freqs.syntactic[k];
    r["alpha_dependent_to_head"] = freqs.dependent_to_head[k];
    r["alpha_head_to_dependent"] = freqs.head_to_dependent[k];
    relations.push_back(std::move(r));
  }
  j["syntactic"] = std::move(relations);
  auto positional = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < freqs.offsets.size(); ++i) {
    positional.push_back({{"offset", freqs.offsets[i]}, {"alpha", freqs.positional[i]}});
  }
  j["positional"] = std::move(positional);
  j["tokens"] = freqs.token_count;
  j["warnings"] = stats.warnings;
  return j;
}

void write_mask(const std::filesystem::path& path, const HeadMask& mask, const nlohmann::ordered_json& diagnostics) {
  auto j = mask_to_json(mask);
  if (!diagnostics.is_null()) j["diagnostics"] = diagnostics;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

HeadMask read_mask(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("mask not found: " + path.string());
  try {
    return mask_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace headlrp
