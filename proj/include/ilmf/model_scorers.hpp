#pragma once

// StepScorer adapters over transformer models. States bundle the shared
// per-sentence cross feed with an incremental decoder state; advancing
// copies the decoder state and shares the feed.

#include <memory>
#include <vector>

#include "ilmf/ids.hpp"
#include "ilmf/scorer.hpp"
#include "ilmf/transformer.hpp"

namespace ilmf {

namespace detail {
struct ModelScorerState {
  std::shared_ptr<const PreparedFeed> feed;
  DecoderStepState dec;
};
}  // namespace detail

class MtStepScorer : public StepScorer {
 public:
  explicit MtStepScorer(const TransformerModel& model) : model_(model) {
    if (model.is_lm()) throw ContractError("MtStepScorer: model is a language model");
  }

  int vocab_size() const override { return model_.config().vocab_size; }

  State start(const std::vector<int>& source, std::vector<double>& logprobs) const override {
    NoGradGuard ng;
    auto st = std::make_shared<detail::ModelScorerState>();
    {
      EncoderOutputs enc = model_.encode(source);
      st->feed = std::make_shared<PreparedFeed>(model_.prepare_feed(CrossFeed::encoder(enc)));
    }
    st->dec = model_.start_state(*st->feed);
    model_.decode_step_inplace(st->dec, kBosId, *st->feed, logprobs);
    return st;
  }

  State advance(const State& state, int token, std::vector<double>& logprobs) const override {
    auto prev = std::static_pointer_cast<const detail::ModelScorerState>(state);
    auto st = std::make_shared<detail::ModelScorerState>(*prev);
    model_.decode_step_inplace(st->dec, token, *st->feed, logprobs);
    return st;
  }

 private:
  const TransformerModel& model_;
};

class LmStepScorer : public StepScorer {
 public:
  explicit LmStepScorer(const TransformerModel& model) : model_(model) {
    if (!model.is_lm()) throw ContractError("LmStepScorer: model has an encoder");
  }

  int vocab_size() const override { return model_.config().vocab_size; }

  State start(const std::vector<int>&, std::vector<double>& logprobs) const override {
    auto st = std::make_shared<detail::ModelScorerState>();
    st->feed = std::make_shared<PreparedFeed>();  // CrossKind::None
    st->dec = model_.start_state(*st->feed);
    model_.decode_step_inplace(st->dec, kBosId, *st->feed, logprobs);
    return st;
  }

  State advance(const State& state, int token, std::vector<double>& logprobs) const override {
    auto prev = std::static_pointer_cast<const detail::ModelScorerState>(state);
    auto st = std::make_shared<detail::ModelScorerState>(*prev);
    model_.decode_step_inplace(st->dec, token, *st->feed, logprobs);
    return st;
  }

 private:
  const TransformerModel& model_;
};

}  // namespace ilmf
