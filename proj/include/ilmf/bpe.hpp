#pragma once

// Byte-pair encoding learner and applier with a suffix end-of-word marker,
// plus the joint vocabulary shared by source and target side.

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ilmf/error.hpp"
#include "ilmf/ids.hpp"

namespace ilmf {

inline constexpr const char* kEndOfWord = "</w>";

namespace detail {

inline std::vector<std::string> whitespace_split(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

// Split a word into UTF-8 code point strings; bytes that do not form a valid
// sequence pass through one byte at a time.
inline std::vector<std::string> utf8_chars(const std::string& word) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < word.size()) {
    const unsigned char c = static_cast<unsigned char>(word[i]);
    size_t len = 1;
    if ((c & 0x80) == 0x00) len = 1;
    else if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    if (i + len > word.size()) len = 1;
    for (size_t k = 1; k < len; ++k)
      if ((static_cast<unsigned char>(word[i + k]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    out.push_back(word.substr(i, len));
    i += len;
  }
  return out;
}

inline std::vector<std::string> word_symbols(const std::string& word) {
  std::vector<std::string> syms = utf8_chars(word);
  if (!syms.empty()) syms.back() += kEndOfWord;
  return syms;
}

// Greedy left-to-right replay of one merge over a symbol sequence.
inline void apply_merge(std::vector<std::string>& syms,
                        const std::pair<std::string, std::string>& m) {
  size_t w = 0;
  size_t r = 0;
  while (r < syms.size()) {
    if (r + 1 < syms.size() && syms[r] == m.first && syms[r + 1] == m.second) {
      syms[w++] = m.first + m.second;
      r += 2;
    } else {
      if (w != r) syms[w] = std::move(syms[r]);
      ++w;
      ++r;
    }
  }
  syms.resize(w);
}

}  // namespace detail

struct BpeModel {
  std::vector<std::pair<std::string, std::string>> merges;
  std::string end_of_word_marker = kEndOfWord;

  // Segment one whitespace-tokenized line into subword tokens.
  std::vector<std::string> apply(const std::string& line) const {
    std::vector<std::string> out;
    for (const std::string& word : detail::whitespace_split(line)) {
      std::vector<std::string> syms = detail::word_symbols(word);
      for (const auto& m : merges) detail::apply_merge(syms, m);
      out.insert(out.end(), syms.begin(), syms.end());
    }
    return out;
  }
};

// Inverse of apply: concatenate subwords, turning each end-of-word marker
// into a space. Exact on lines with single-space separated words.
inline std::string bpe_detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (const std::string& t : tokens) {
    if (t.size() >= 4 && t.compare(t.size() - 4, 4, kEndOfWord) == 0) {
      out += t.substr(0, t.size() - 4);
      out += ' ';
    } else {
      out += t;
    }
  }
  if (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

// Learn merges greedily by highest pair frequency over word-frequency
// weighted symbol sequences. Adjacent pairs are counted per position
// (overlaps included); ties break toward the lexicographically smaller pair;
// learning stops early once no pair occurs at least twice.
inline BpeModel learn_bpe(const std::vector<std::string>& corpus, int num_merges) {
  std::map<std::string, long long> word_freq;
  for (const std::string& line : corpus)
    for (const std::string& w : detail::whitespace_split(line)) word_freq[w] += 1;
  if (word_freq.empty()) throw InputError("learn_bpe: corpus is empty after whitespace splitting");

  std::vector<std::pair<std::vector<std::string>, long long>> words;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) words.push_back({detail::word_symbols(w), f});

  BpeModel model;
  for (int step = 0; step < num_merges; ++step) {
    std::map<std::pair<std::string, std::string>, long long> counts;
    for (const auto& [syms, f] : words)
      for (size_t i = 0; i + 1 < syms.size(); ++i)
        counts[{syms[i], syms[i + 1]}] += f;
    std::pair<std::string, std::string> best;
    long long best_count = 0;
    for (const auto& [pair, c] : counts) {
      if (c > best_count) {  // std::map iterates pairs in ascending order,
        best = pair;         // so the first maximum is the lexicographic tie-winner
        best_count = c;
      }
    }
    if (best_count < 2) break;
    model.merges.push_back(best);
    for (auto& [syms, f] : words) detail::apply_merge(syms, best);
  }
  return model;
}

inline void save_bpe(const BpeModel& model, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write BPE model to " + path);
  os << "# ilmf bpe v1\n";
  for (const auto& [l, r] : model.merges) os << l << " " << r << "\n";
}

inline BpeModel load_bpe(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read BPE model from " + path);
  std::string line;
  if (!std::getline(is, line) || line.rfind("# ilmf bpe", 0) != 0)
    throw FormatError("BPE model file " + path + " is missing its version comment");
  BpeModel model;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const size_t sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size())
      throw FormatError("malformed merge line in " + path + ": '" + line + "'");
    model.merges.push_back({line.substr(0, sp), line.substr(sp + 1)});
  }
  return model;
}

class Vocabulary {
 public:
  Vocabulary() {
    add_reserved();
  }

  // Build from BPE-tokenized corpus lines; subword types are assigned ids in
  // lexicographic order after the reserved block, so the mapping depends only
  // on the token set.
  static Vocabulary build(const std::vector<std::vector<std::string>>& tokenized_corpus) {
    std::map<std::string, int> types;
    for (const auto& line : tokenized_corpus)
      for (const std::string& t : line) types[t];
    Vocabulary v;
    for (const auto& [tok, _] : types) v.add(tok);
    return v;
  }

  int add(const std::string& token) {
    auto it = token_to_id_.find(token);
    if (it != token_to_id_.end()) return it->second;
    const int id = static_cast<int>(id_to_token_.size());
    token_to_id_.emplace(token, id);
    id_to_token_.push_back(token);
    return id;
  }

  int size() const { return static_cast<int>(id_to_token_.size()); }

  int id_of(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }

  const std::string& token_of(int id) const {
    if (id < 0 || id >= size())
      throw IndexError("vocabulary id " + std::to_string(id) + " out of range (size " +
                       std::to_string(size()) + ")");
    return id_to_token_[static_cast<size_t>(id)];
  }

  std::vector<int> encode(const std::vector<std::string>& tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const std::string& t : tokens) ids.push_back(id_of(t));
    return ids;
  }

  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> tokens;
    tokens.reserve(ids.size());
    for (int id : ids) tokens.push_back(token_of(id));
    return tokens;
  }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write vocabulary to " + path);
    for (int id = kNumReservedIds; id < size(); ++id) os << id_to_token_[static_cast<size_t>(id)] << "\n";
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read vocabulary from " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(is, line))
      if (!line.empty()) v.add(line);
    return v;
  }

 private:
  void add_reserved() {
    add("<pad>");
    add("<bos>");
    add("<eos>");
    add("<unk>");
  }

  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

}  // namespace ilmf
