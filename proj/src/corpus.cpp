// SPDX-License-Identifier: Apache-2.0
#include "headlrp/corpus.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"

namespace headlrp {

std::size_t ParsedSentence::word_count() const {
  if (!words.empty()) return words.size();
  int last = -1;
  for (int w : alignment) last = std::max(last, w);
  return static_cast<std::size_t>(last + 1);
}

std::pair<std::size_t, std::size_t> ParsedSentence::word_span(std::size_t word) const {
  std::size_t first = alignment.size(), last = 0;
  for (std::size_t t = 0; t < alignment.size(); ++t) {
    if (alignment[t] == static_cast<int>(word)) {
      first = std::min(first, t);
      last = t + 1;
    }
  }
  if (first == alignment.size()) return {0, 0};
  return {first, last};
}

std::string canonical_relation(const std::string& label) {
  std::string base = label.substr(0, label.find(':'));
  if (base == "obj") return "dobj";
  return base;
}

void validate_sentence(const ParsedSentence& s, std::size_t index) {
  const std::string where = "sentence " + std::to_string(index);
  if (s.token_ids.empty()) throw DataError(where + ": no tokens");
  if (s.alignment.size() != s.token_ids.size()) {
    throw DataError(where + ": alignment has " + std::to_string(s.alignment.size()) + " entries for " +
                    std::to_string(s.token_ids.size()) + " tokens");
  }
  const auto words = static_cast<int>(s.word_count());
  std::vector<int> last_token(static_cast<std::size_t>(words), -1);
  for (std::size_t t = 0; t < s.alignment.size(); ++t) {
    const int w = s.alignment[t];
    if (w == kSpecialToken) continue;
    if (w < 0 || w >= words) {
      throw DataError(where + ": token " + std::to_string(t) + " aligned to missing word " + std::to_string(w));
    }
    const int prev = last_token[static_cast<std::size_t>(w)];
    if (prev != -1 && prev != static_cast<int>(t) - 1) {
      throw DataError(where + ": tokens of word " + std::to_string(w) + " are not contiguous");
    }
    last_token[static_cast<std::size_t>(w)] = static_cast<int>(t);
  }
  for (const Arc& arc : s.arcs) {
    if (static_cast<int>(arc.dependent) >= words || (arc.head != kRootWord && (arc.head < 0 || arc.head >= words))) {
      throw DataError(where + ": arc " + std::to_string(arc.dependent) + "->" + std::to_string(arc.head) +
                      " references a missing word");
    }
    if (last_token[arc.dependent] == -1 || (arc.head != kRootWord && last_token[static_cast<std::size_t>(arc.head)] == -1)) {
      throw DataError(where + ": arc " + std::to_string(arc.dependent) + "->" + std::to_string(arc.head) +
                      " touches a word with no tokens");
    }
  }
}

ParsedCorpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("corpus not found: " + path.string());
  ParsedCorpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ParsedSentence s;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("words")) s.words = j.at("words").get<std::vector<std::string>>();
      s.token_ids = j.at("tokens").get<std::vector<std::size_t>>();
      s.alignment = j.at("alignment").get<std::vector<int>>();
      for (const auto& a : j.value("arcs", nlohmann::json::array())) {
        if (!a.is_array() || a.size() != 3) throw DataError("arc must be [dependent, head, relation]");
        s.arcs.push_back({a[0].get<std::size_t>(), a[1].get<int>(), canonical_relation(a[2].get<std::string>())});
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    validate_sentence(s, corpus.sentences.size());
    corpus.sentences.push_back(std::move(s));
  }
  return corpus;
}

void write_corpus(const std::filesystem::path& path, const ParsedCorpus& corpus) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& s : corpus.sentences) {
    nlohmann::ordered_json j;
    if (!s.words.empty()) j["words"] = s.words;
    j["tokens"] = s.token_ids;
    j["alignment"] = s.alignment;
    auto arcs = nlohmann::ordered_json::array();
    for (const Arc& a : s.arcs) arcs.push_back({a.dependent, a.head, a.relation});
    j["arcs"] = std::move(arcs);
    out << j.dump() << '\n';
  }
}

}  // namespace headlrp
