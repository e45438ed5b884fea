#pragma once

// Stepwise log-probability sources. Beam search, perplexity evaluation and
// the ILM variants all speak this interface; states are immutable and
// type-erased so hypotheses can share and fork them freely.

#include <cmath>
#include <memory>
#include <vector>

#include "ilmf/error.hpp"

namespace ilmf {

class StepScorer {
 public:
  using State = std::shared_ptr<const void>;

  virtual ~StepScorer() = default;

  virtual int vocab_size() const = 0;

  // Begin a sentence: the returned state sits just after <bos>, and
  // `logprobs` receives the distribution of the first target token.
  // Unconditional scorers (language models, ILMs) ignore the source content.
  virtual State start(const std::vector<int>& source,
                      std::vector<double>& logprobs) const = 0;

  // Consume `token` and fill the distribution of the following token.
  virtual State advance(const State& state, int token,
                        std::vector<double>& logprobs) const = 0;

  // Total log-probability of a target sequence that ends with <eos>.
  double score_tokens(const std::vector<int>& source,
                      const std::vector<int>& target_with_eos) const {
    if (target_with_eos.empty())
      throw ContractError("score_tokens: empty target sequence");
    std::vector<double> lp;
    State st = start(source, lp);
    double total = 0.0;
    for (size_t i = 0; i < target_with_eos.size(); ++i) {
      const int tok = target_with_eos[i];
      if (tok < 0 || tok >= vocab_size())
        throw IndexError("score_tokens: token id out of range");
      total += lp[static_cast<size_t>(tok)];
      if (i + 1 < target_with_eos.size()) st = advance(st, tok, lp);
    }
    return total;
  }
};

// Fixed uniform distribution; handy as a stub and for sanity checks.
class UniformScorer : public StepScorer {
 public:
  explicit UniformScorer(int vocab) : vocab_(vocab), lp_(-std::log(static_cast<double>(vocab))) {}
  int vocab_size() const override { return vocab_; }
  State start(const std::vector<int>&, std::vector<double>& logprobs) const override {
    logprobs.assign(static_cast<size_t>(vocab_), lp_);
    return nullptr;
  }
  State advance(const State&, int, std::vector<double>& logprobs) const override {
    logprobs.assign(static_cast<size_t>(vocab_), lp_);
    return nullptr;
  }

 private:
  int vocab_;
  double lp_;
};

}  // namespace ilmf
