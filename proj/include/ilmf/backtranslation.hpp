#pragma once

// Back-translation baseline: train a reverse model on the swapped parallel
// data, translate target-side monolingual text into synthetic sources with
// plain beam search, then train the final forward model on real plus
// synthetic pairs.

#include <string>
#include <vector>

#include "ilmf/beam.hpp"
#include "ilmf/corpus.hpp"
#include "ilmf/train.hpp"

namespace ilmf {

struct BtPipelineConfig {
  TransformerConfig model_config;  // shared by reverse and final model
  TrainConfig reverse_train;
  TrainConfig final_train;
  BeamConfig synth_beam;   // beam 12, no fusion
  int upsample_real = 1;   // real data repeated this many times in the mix
  uint64_t seed = 1;       // model inits and the combined-corpus shuffle
  int threads = 1;

  void validate() const {
    if (upsample_real < 1) throw ContractError("upsample factor must be at least 1");
  }
};

inline ParallelCorpus reverse_pairs(const ParallelCorpus& corpus) {
  ParallelCorpus rev;
  rev.domain_tag = corpus.domain_tag;
  rev.pairs.reserve(corpus.pairs.size());
  for (const auto& [f, e] : corpus.pairs) rev.pairs.push_back({e, f});
  return rev;
}

// Train on the swapped pairs (same joint vocabulary).
inline TrainResult train_reverse(TransformerModel& reverse_model, const ParallelCorpus& parallel,
                                 const ParallelCorpus& valid, const TrainConfig& cfg) {
  return train(reverse_model, reverse_pairs(parallel), reverse_pairs(valid), cfg);
}

// Source side = beam translation of each monolingual sentence, no fusion;
// target side = the monolingual sentence, byte for byte.
inline ParallelCorpus synthesize(const MonoCorpus& mono, const TransformerModel& reverse_model,
                                 const BeamConfig& beam, int threads = 1) {
  ParallelCorpus synth;
  synth.domain_tag = mono.domain_tag;
  synth.pairs.resize(mono.sentences.size());
  FusionWeights plain;  // (0, 0)
  const auto hyps = translate_corpus(mono.sentences, reverse_model, nullptr, plain, beam, threads);
  for (size_t i = 0; i < mono.sentences.size(); ++i) {
    std::vector<int> src = hyps[i].tokens;
    if (!src.empty() && src.back() == kEosId) src.pop_back();
    if (src.empty()) src.push_back(kUnkId);  // never emit an empty source line
    synth.pairs[i] = {std::move(src), mono.sentences[i]};
  }
  return synth;
}

struct BtPipelineResult {
  Checkpoint reverse_checkpoint;
  Checkpoint final_checkpoint;
  ParallelCorpus synthetic;
  size_t combined_size = 0;
  TrainResult reverse_train;
  TrainResult final_train;
};

// The full pipeline. Checkpoint selection of the final model uses the
// original (real) validation set. With no monolingual data and an upsample
// factor of 1 the combined corpus is the real corpus verbatim, so the final
// model matches plain training at the same seeds.
inline BtPipelineResult run_pipeline(const ParallelCorpus& parallel, const MonoCorpus& mono,
                                     const ParallelCorpus& valid, const BtPipelineConfig& cfg) {
  cfg.validate();
  BtPipelineResult result;

  Rng reverse_init = Rng(cfg.seed).child("reverse_init");
  TransformerModel reverse_model(cfg.model_config, reverse_init);
  result.reverse_train = train_reverse(reverse_model, parallel, valid, cfg.reverse_train);
  result.reverse_checkpoint = result.reverse_train.best;

  if (!mono.sentences.empty())
    result.synthetic = synthesize(mono, reverse_model, cfg.synth_beam, cfg.threads);
  result.synthetic.domain_tag = mono.domain_tag;

  ParallelCorpus combined;
  combined.domain_tag = parallel.domain_tag;
  if (result.synthetic.pairs.empty() && cfg.upsample_real == 1) {
    combined = parallel;
  } else {
    combined.pairs.reserve(parallel.pairs.size() * static_cast<size_t>(cfg.upsample_real) +
                           result.synthetic.pairs.size());
    for (int r = 0; r < cfg.upsample_real; ++r)
      combined.pairs.insert(combined.pairs.end(), parallel.pairs.begin(), parallel.pairs.end());
    combined.pairs.insert(combined.pairs.end(), result.synthetic.pairs.begin(),
                          result.synthetic.pairs.end());
    Rng shuffle_rng = Rng(cfg.seed).child("bt_shuffle");
    shuffle_rng.shuffle(combined.pairs);
  }

  result.combined_size = combined.pairs.size();

  Rng final_init = Rng(cfg.seed).child("final_init");
  TransformerModel final_model(cfg.model_config, final_init);
  result.final_train = train(final_model, combined, valid, cfg.final_train);
  result.final_checkpoint = result.final_train.best;
  return result;
}

}  // namespace ilmf
