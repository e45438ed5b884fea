#pragma once

// Corpus BLEU and perplexity.

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ilmf/error.hpp"
#include "ilmf/ids.hpp"
#include "ilmf/scorer.hpp"

namespace ilmf {

struct BleuReport {
  double bleu_percent = 0.0;
  double precisions[4] = {0, 0, 0, 0};
  double brevity_penalty = 1.0;
  long long hyp_length = 0;
  long long ref_length = 0;

  std::string line() const {
    std::ostringstream os;
    os.precision(4);
    os << std::fixed << "BLEU = " << bleu_percent << " (";
    for (int i = 0; i < 4; ++i) os << (i ? "/" : "") << precisions[i] * 100.0;
    os << ", BP=" << brevity_penalty << ", hyp_len=" << hyp_length
       << ", ref_len=" << ref_length << ")";
    return os.str();
  }
};

// The fixed scoring tokenizer: split on whitespace, then each of the
// characters . , ! ? ; : " becomes its own token. Versioned with the BLEU
// implementation; both hypothesis and reference sides go through it.
inline std::vector<std::string> bleu_tokenize(const std::string& line) {
  static const std::string punct = ".,!?;:\"";
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (char c : line) {
    if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      flush();
    } else if (punct.find(c) != std::string::npos) {
      flush();
      out.push_back(std::string(1, c));
    } else {
      cur += c;
    }
  }
  flush();
  return out;
}

// Corpus-level BLEU: clipped n-gram precisions (n = 1..4) pooled over the
// corpus, geometric mean, multiplied by the brevity penalty
// exp(1 - ref/hyp) when hyp < ref. No smoothing: a zero clipped count for
// any order gives BLEU = 0.
inline BleuReport corpus_bleu(const std::vector<std::string>& hypotheses,
                              const std::vector<std::string>& references) {
  if (hypotheses.size() != references.size())
    throw AlignmentError("corpus_bleu: " + std::to_string(hypotheses.size()) +
                         " hypotheses vs " + std::to_string(references.size()) +
                         " references");
  long long match[4] = {0, 0, 0, 0};
  long long total[4] = {0, 0, 0, 0};
  long long hyp_len = 0, ref_len = 0;
  using Ngram = std::vector<std::string>;
  for (size_t s = 0; s < hypotheses.size(); ++s) {
    const auto hyp = bleu_tokenize(hypotheses[s]);
    const auto ref = bleu_tokenize(references[s]);
    hyp_len += static_cast<long long>(hyp.size());
    ref_len += static_cast<long long>(ref.size());
    for (int n = 1; n <= 4; ++n) {
      std::map<Ngram, long long> ref_counts;
      for (size_t i = 0; i + n <= ref.size(); ++i)
        ref_counts[Ngram(ref.begin() + i, ref.begin() + i + n)] += 1;
      std::map<Ngram, long long> hyp_counts;
      for (size_t i = 0; i + n <= hyp.size(); ++i)
        hyp_counts[Ngram(hyp.begin() + i, hyp.begin() + i + n)] += 1;
      for (const auto& [ng, c] : hyp_counts) {
        total[n - 1] += c;
        auto it = ref_counts.find(ng);
        if (it != ref_counts.end()) match[n - 1] += std::min(c, it->second);
      }
    }
  }
  BleuReport rep;
  rep.hyp_length = hyp_len;
  rep.ref_length = ref_len;
  double log_prec_sum = 0.0;
  bool zero = false;
  for (int n = 0; n < 4; ++n) {
    rep.precisions[n] = total[n] > 0 ? static_cast<double>(match[n]) / static_cast<double>(total[n]) : 0.0;
    if (match[n] == 0)
      zero = true;
    else
      log_prec_sum += std::log(rep.precisions[n]);
  }
  rep.brevity_penalty =
      (hyp_len < ref_len && hyp_len > 0)
          ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len))
          : 1.0;
  rep.bleu_percent = (zero || hyp_len == 0)
                         ? 0.0
                         : 100.0 * rep.brevity_penalty * std::exp(log_prec_sum / 4.0);
  return rep;
}

// exp of the mean per-token negative log-probability over the corpus, with
// <eos> counted for every sentence. `sources` conditions the scorer when
// present (pass {} for unconditional scorers).
inline double perplexity(const StepScorer& scorer,
                         const std::vector<std::vector<int>>& sentences,
                         const std::vector<std::vector<int>>& sources = {}) {
  if (sentences.empty()) throw InputError("perplexity: empty corpus");
  if (!sources.empty() && sources.size() != sentences.size())
    throw AlignmentError("perplexity: source/sentence counts disagree");
  double total_logprob = 0.0;
  long long total_tokens = 0;
  static const std::vector<int> no_source;
  for (size_t i = 0; i < sentences.size(); ++i) {
    std::vector<int> with_eos = sentences[i];
    with_eos.push_back(kEosId);
    total_logprob += scorer.score_tokens(sources.empty() ? no_source : sources[i], with_eos);
    total_tokens += static_cast<long long>(with_eos.size());
  }
  return std::exp(-total_logprob / static_cast<double>(total_tokens));
}

}  // namespace ilmf
