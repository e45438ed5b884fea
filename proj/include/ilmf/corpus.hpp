#pragma once

// Corpus ingestion, batching and the seeded synthetic domain-shift task.
// Text corpora hold raw lines; id corpora hold tokenized sequences without
// <bos>/<eos> (the models add those).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "ilmf/bpe.hpp"
#include "ilmf/error.hpp"
#include "ilmf/rng.hpp"

namespace ilmf {

struct ParallelText {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string domain_tag;
};

struct MonoText {
  std::vector<std::string> sentences;
  std::string domain_tag;
};

struct ParallelCorpus {
  std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
  std::string domain_tag;
};

struct MonoCorpus {
  std::vector<std::vector<int>> sentences;
  std::string domain_tag;
};

// ---- file io ----------------------------------------------------------------

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  for (const std::string& l : lines) os << l << "\n";
}

// Line i of each file forms pair i; the lines stay raw text for downstream
// tokenization.
inline ParallelText load_parallel(const std::string& src_path, const std::string& tgt_path,
                                  std::string domain_tag = "") {
  auto src = read_lines(src_path);
  auto tgt = read_lines(tgt_path);
  if (src.size() != tgt.size())
    throw AlignmentError("parallel files disagree: " + src_path + " has " +
                         std::to_string(src.size()) + " lines, " + tgt_path + " has " +
                         std::to_string(tgt.size()));
  ParallelText c;
  c.domain_tag = std::move(domain_tag);
  c.pairs.reserve(src.size());
  for (size_t i = 0; i < src.size(); ++i)
    c.pairs.push_back({std::move(src[i]), std::move(tgt[i])});
  return c;
}

inline MonoText load_mono(const std::string& path, std::string domain_tag = "") {
  MonoText m;
  m.sentences = read_lines(path);
  m.domain_tag = std::move(domain_tag);
  return m;
}

// ---- tokenization glue --------------------------------------------------------

inline std::vector<int> encode_line(const BpeModel& bpe, const Vocabulary& vocab,
                                    const std::string& line) {
  return vocab.encode(bpe.apply(line));
}

inline std::string decode_ids(const BpeModel&, const Vocabulary& vocab,
                              const std::vector<int>& ids) {
  return bpe_detokenize(vocab.decode(ids));
}

inline ParallelCorpus encode_parallel(const BpeModel& bpe, const Vocabulary& vocab,
                                      const ParallelText& text) {
  ParallelCorpus c;
  c.domain_tag = text.domain_tag;
  c.pairs.reserve(text.pairs.size());
  for (size_t i = 0; i < text.pairs.size(); ++i) {
    auto f = encode_line(bpe, vocab, text.pairs[i].first);
    auto e = encode_line(bpe, vocab, text.pairs[i].second);
    if (f.empty() || e.empty())
      throw InputError("sentence pair " + std::to_string(i + 1) + " is empty after tokenization");
    c.pairs.push_back({std::move(f), std::move(e)});
  }
  return c;
}

inline MonoCorpus encode_mono(const BpeModel& bpe, const Vocabulary& vocab,
                              const MonoText& text) {
  MonoCorpus c;
  c.domain_tag = text.domain_tag;
  c.sentences.reserve(text.sentences.size());
  for (size_t i = 0; i < text.sentences.size(); ++i) {
    auto e = encode_line(bpe, vocab, text.sentences[i]);
    if (e.empty())
      throw InputError("sentence " + std::to_string(i + 1) + " is empty after tokenization");
    c.sentences.push_back(std::move(e));
  }
  return c;
}

// ---- batching -----------------------------------------------------------------

struct Batch {
  std::vector<int> source;       // rows * max_src, padded with kPadId
  std::vector<int> target;       // rows * max_tgt
  std::vector<int> src_lengths;
  std::vector<int> tgt_lengths;
  std::vector<uint8_t> src_mask;  // 1 where a real token sits
  std::vector<uint8_t> tgt_mask;
  int rows = 0;
  int max_src = 0;
  int max_tgt = 0;
  std::vector<size_t> indices;    // positions in the source corpus

  std::vector<int> source_row(int r) const {
    return {source.begin() + static_cast<long>(r) * max_src,
            source.begin() + static_cast<long>(r) * max_src + src_lengths[static_cast<size_t>(r)]};
  }
  std::vector<int> target_row(int r) const {
    return {target.begin() + static_cast<long>(r) * max_tgt,
            target.begin() + static_cast<long>(r) * max_tgt + tgt_lengths[static_cast<size_t>(r)]};
  }
};

// Length-bucketed batches, shuffled by `rng`; every sentence appears exactly
// once. The per-batch budget counts source plus target tokens.
inline std::vector<Batch> make_batches(const ParallelCorpus& corpus, int max_tokens_per_batch,
                                       Rng& rng) {
  std::vector<size_t> idx(corpus.pairs.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  // Bucket by length while keeping the shuffled order within equal lengths.
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    const auto la = corpus.pairs[a].first.size() + corpus.pairs[a].second.size();
    const auto lb = corpus.pairs[b].first.size() + corpus.pairs[b].second.size();
    return la < lb;
  });

  std::vector<std::vector<size_t>> groups;
  std::vector<size_t> cur;
  int cur_tokens = 0;
  for (size_t i : idx) {
    const int t = static_cast<int>(corpus.pairs[i].first.size() + corpus.pairs[i].second.size());
    if (t > max_tokens_per_batch)
      throw InputError("sentence pair " + std::to_string(i + 1) + " has " + std::to_string(t) +
                       " tokens, above the batch budget of " + std::to_string(max_tokens_per_batch));
    if (!cur.empty() && cur_tokens + t > max_tokens_per_batch) {
      groups.push_back(std::move(cur));
      cur.clear();
      cur_tokens = 0;
    }
    cur.push_back(i);
    cur_tokens += t;
  }
  if (!cur.empty()) groups.push_back(std::move(cur));
  rng.shuffle(groups);

  std::vector<Batch> batches;
  batches.reserve(groups.size());
  for (auto& g : groups) {
    Batch b;
    b.rows = static_cast<int>(g.size());
    b.indices = g;
    for (size_t i : g) {
      b.max_src = std::max(b.max_src, static_cast<int>(corpus.pairs[i].first.size()));
      b.max_tgt = std::max(b.max_tgt, static_cast<int>(corpus.pairs[i].second.size()));
    }
    b.source.assign(static_cast<size_t>(b.rows) * b.max_src, kPadId);
    b.target.assign(static_cast<size_t>(b.rows) * b.max_tgt, kPadId);
    b.src_mask.assign(b.source.size(), 0);
    b.tgt_mask.assign(b.target.size(), 0);
    for (int r = 0; r < b.rows; ++r) {
      const auto& [f, e] = corpus.pairs[g[static_cast<size_t>(r)]];
      b.src_lengths.push_back(static_cast<int>(f.size()));
      b.tgt_lengths.push_back(static_cast<int>(e.size()));
      for (size_t j = 0; j < f.size(); ++j) {
        b.source[static_cast<size_t>(r) * b.max_src + j] = f[j];
        b.src_mask[static_cast<size_t>(r) * b.max_src + j] = 1;
      }
      for (size_t j = 0; j < e.size(); ++j) {
        b.target[static_cast<size_t>(r) * b.max_tgt + j] = e[j];
        b.tgt_mask[static_cast<size_t>(r) * b.max_tgt + j] = 1;
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

// ---- synthetic domain-shift task ----------------------------------------------

// A dictionary-translation task with windowed reordering and two unigram
// domains: parallel training data comes from domain A, while monolingual,
// validation and test data come from domain B.
struct SyntheticTaskSpec {
  int vocab_size_src = 48;
  int vocab_size_tgt = 48;
  std::vector<int> dictionary;          // source word index -> target word index, injective
  int reorder_rule = 2;                 // adjacent non-overlapping windows of this size reverse
  std::vector<double> domain_a_unigram; // over source word indices, sums to 1
  std::vector<double> domain_b_unigram;
  int min_len = 3;
  int max_len = 20;
  uint64_t seed = 1;

  void validate() const {
    if (vocab_size_src <= 0 || vocab_size_tgt <= 0)
      throw ContractError("synthetic task: vocabulary sizes must be positive");
    if (static_cast<int>(dictionary.size()) != vocab_size_src)
      throw ContractError("synthetic task: dictionary must cover every source word");
    std::vector<bool> seen(static_cast<size_t>(vocab_size_tgt), false);
    for (int t : dictionary) {
      if (t < 0 || t >= vocab_size_tgt) throw ContractError("synthetic task: dictionary image out of range");
      if (seen[static_cast<size_t>(t)]) throw ContractError("synthetic task: dictionary must be injective");
      seen[static_cast<size_t>(t)] = true;
    }
    if (reorder_rule < 1) throw ContractError("synthetic task: reorder window must be >= 1");
    for (const auto* u : {&domain_a_unigram, &domain_b_unigram}) {
      if (static_cast<int>(u->size()) != vocab_size_src)
        throw ContractError("synthetic task: unigram length must match source vocabulary");
      double s = 0.0;
      for (double p : *u) {
        if (p < 0.0) throw ContractError("synthetic task: unigram entries must be nonnegative");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-9) throw ContractError("synthetic task: unigram must sum to 1");
    }
    if (min_len < 1 || max_len < min_len)
      throw ContractError("synthetic task: bad sentence length range");
  }
};

namespace detail {

inline std::vector<double> zipf_weights(int n, double exponent, bool reversed) {
  std::vector<double> w(static_cast<size_t>(n));
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const int rank = reversed ? n - i : i + 1;
    w[static_cast<size_t>(i)] = 1.0 / std::pow(static_cast<double>(rank), exponent);
    sum += w[static_cast<size_t>(i)];
  }
  for (double& x : w) x /= sum;
  return w;
}

// Domain unigram with a shared head: the first `shared_words` ids carry
// `shared_mass` with identical probabilities in every domain (the synthetic
// stand-in for function words and other cross-domain regularities), while
// the remaining content words split the rest along a Zipf curve whose order
// is domain-specific (reversed = the other domain's rare words).
inline std::vector<double> domain_unigram(int vocab, int shared_words, double shared_mass,
                                          double exponent, bool reversed) {
  std::vector<double> w(static_cast<size_t>(vocab), 0.0);
  const std::vector<double> head = zipf_weights(shared_words, 1.0, false);
  for (int i = 0; i < shared_words; ++i) w[static_cast<size_t>(i)] = shared_mass * head[static_cast<size_t>(i)];
  const int content = vocab - shared_words;
  const std::vector<double> tail = zipf_weights(content, exponent, reversed);
  for (int i = 0; i < content; ++i)
    w[static_cast<size_t>(shared_words + i)] = (1.0 - shared_mass) * tail[static_cast<size_t>(i)];
  return w;
}

inline std::string synth_word(const char* prefix, int index, int vocab) {
  int width = 1;
  for (int v = vocab - 1; v >= 10; v /= 10) ++width;
  std::string num = std::to_string(index);
  return prefix + std::string(static_cast<size_t>(width) - num.size(), '0') + num;
}

}  // namespace detail

// Default desk-scale task: a shared function-word head plus mirrored Zipf
// content tails (domain A's rare content words are domain B's frequent
// ones), identity dictionary, window-2 reordering.
inline SyntheticTaskSpec default_synthetic_spec(uint64_t seed = 1, int vocab = 192,
                                                int shared_words = 32, double shared_mass = 0.5,
                                                double zipf_exponent = 1.1) {
  SyntheticTaskSpec spec;
  spec.seed = seed;
  shared_words = std::max(1, std::min(shared_words, vocab / 4));
  spec.vocab_size_src = vocab;
  spec.vocab_size_tgt = vocab;
  spec.dictionary.resize(static_cast<size_t>(vocab));
  for (int i = 0; i < vocab; ++i) spec.dictionary[static_cast<size_t>(i)] = i;
  spec.domain_a_unigram =
      detail::domain_unigram(vocab, shared_words, shared_mass, zipf_exponent, false);
  spec.domain_b_unigram =
      detail::domain_unigram(vocab, shared_words, shared_mass, zipf_exponent, true);
  return spec;
}

struct SyntheticData {
  ParallelText train;   // domain A
  MonoText mono;        // domain B, target side
  ParallelText valid;   // domain B
  ParallelText test;    // domain B
  double target_unigram_kl = 0.0;  // KL(A-target || B-target), empirical
};

namespace detail {

inline std::vector<int> sample_source(const SyntheticTaskSpec& spec,
                                      const std::vector<double>& unigram, Rng& rng) {
  const int len = spec.min_len +
                  static_cast<int>(rng.uniform_int(static_cast<uint64_t>(spec.max_len - spec.min_len + 1)));
  std::vector<int> words(static_cast<size_t>(len));
  for (int& w : words) w = static_cast<int>(rng.pick(unigram));
  return words;
}

inline std::vector<int> translate_words(const SyntheticTaskSpec& spec,
                                        const std::vector<int>& src) {
  std::vector<int> tgt(src.size());
  for (size_t i = 0; i < src.size(); ++i) tgt[i] = spec.dictionary[static_cast<size_t>(src[i])];
  const size_t w = static_cast<size_t>(spec.reorder_rule);
  for (size_t start = 0; start < tgt.size(); start += w) {
    const size_t end = std::min(start + w, tgt.size());
    std::reverse(tgt.begin() + static_cast<long>(start), tgt.begin() + static_cast<long>(end));
  }
  return tgt;
}

inline std::string words_to_line(const char* prefix, const std::vector<int>& words, int vocab) {
  std::string line;
  for (size_t i = 0; i < words.size(); ++i) {
    if (i) line += ' ';
    line += synth_word(prefix, words[i], vocab);
  }
  return line;
}

}  // namespace detail

// Pure function of (spec, counts): each section draws from its own child
// stream, so section sizes never influence one another.
inline SyntheticData generate_synthetic(const SyntheticTaskSpec& spec, int n_pairs, int n_mono,
                                        int n_valid, int n_test) {
  spec.validate();
  if (n_pairs < 0 || n_mono < 0 || n_valid < 0 || n_test < 0)
    throw ContractError("generate_synthetic: counts must be nonnegative");
  SyntheticData data;
  data.train.domain_tag = "A";
  data.mono.domain_tag = "B";
  data.valid.domain_tag = "B";
  data.test.domain_tag = "B";

  Rng master(spec.seed);
  std::vector<double> a_tgt_counts(static_cast<size_t>(spec.vocab_size_tgt), 0.0);
  std::vector<double> b_tgt_counts(static_cast<size_t>(spec.vocab_size_tgt), 0.0);

  auto make_pair = [&](const std::vector<double>& unigram, Rng& rng,
                       std::vector<double>* tgt_counts) {
    const auto src = detail::sample_source(spec, unigram, rng);
    const auto tgt = detail::translate_words(spec, src);
    if (tgt_counts)
      for (int wdx : tgt) (*tgt_counts)[static_cast<size_t>(wdx)] += 1.0;
    return std::pair<std::string, std::string>{
        detail::words_to_line("s", src, spec.vocab_size_src),
        detail::words_to_line("t", tgt, spec.vocab_size_tgt)};
  };

  {
    Rng rng = master.child("parallel_a");
    data.train.pairs.reserve(static_cast<size_t>(n_pairs));
    for (int i = 0; i < n_pairs; ++i)
      data.train.pairs.push_back(make_pair(spec.domain_a_unigram, rng, &a_tgt_counts));
  }
  {
    Rng rng = master.child("mono_b");
    data.mono.sentences.reserve(static_cast<size_t>(n_mono));
    for (int i = 0; i < n_mono; ++i)
      data.mono.sentences.push_back(make_pair(spec.domain_b_unigram, rng, &b_tgt_counts).second);
  }
  {
    Rng rng = master.child("valid_b");
    for (int i = 0; i < n_valid; ++i)
      data.valid.pairs.push_back(make_pair(spec.domain_b_unigram, rng, nullptr));
  }
  {
    Rng rng = master.child("test_b");
    for (int i = 0; i < n_test; ++i)
      data.test.pairs.push_back(make_pair(spec.domain_b_unigram, rng, nullptr));
  }

  // Empirical KL between the two target unigram distributions (add-one
  // smoothed); the default task keeps this well above 0.1.
  double a_total = 0.0, b_total = 0.0;
  for (double c : a_tgt_counts) a_total += c + 1.0;
  for (double c : b_tgt_counts) b_total += c + 1.0;
  double kl = 0.0;
  for (size_t i = 0; i < a_tgt_counts.size(); ++i) {
    const double pa = (a_tgt_counts[i] + 1.0) / a_total;
    const double pb = (b_tgt_counts[i] + 1.0) / b_total;
    kl += pa * std::log(pa / pb);
  }
  data.target_unigram_kl = kl;
  return data;
}

// Uniform subsample without replacement, used when a monolingual file is
// larger than requested.
inline std::vector<std::string> subsample_lines(std::vector<std::string> lines, size_t n,
                                                Rng& rng) {
  if (n >= lines.size()) return lines;
  rng.shuffle(lines);
  lines.resize(n);
  return lines;
}

}  // namespace ilmf
