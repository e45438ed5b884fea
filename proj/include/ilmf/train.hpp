#pragma once

// Training loop: Adam on label-smoothed cross-entropy, per-epoch validation
// perplexity, early stopping, and selection of the checkpoint with the
// lowest validation perplexity.

#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "ilmf/corpus.hpp"
#include "ilmf/optim.hpp"
#include "ilmf/transformer.hpp"

namespace ilmf {

struct TrainConfig {
  int max_epochs = 20;
  int patience = 3;  // epochs without validation improvement before stopping
  int max_tokens_per_batch = 800;
  AdamConfig adam;
  uint64_t seed = 1;
  bool verbose = false;
};

struct EpochStats {
  int epoch = 0;
  double train_loss_per_token = 0.0;
  double valid_ppl = 0.0;
};

struct TrainResult {
  Checkpoint best;
  int best_epoch = 0;
  double best_valid_ppl = std::numeric_limits<double>::infinity();
  std::vector<EpochStats> history;
};

namespace detail {

// Group example indices into token-budgeted, length-bucketed batches,
// shuffled by rng. Shared by parallel and monolingual training.
inline std::vector<std::vector<size_t>> batch_indices(const std::vector<int>& lengths,
                                                      int max_tokens, Rng& rng) {
  std::vector<size_t> idx(lengths.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](size_t a, size_t b) { return lengths[a] < lengths[b]; });
  std::vector<std::vector<size_t>> groups;
  std::vector<size_t> cur;
  int cur_tokens = 0;
  for (size_t i : idx) {
    const int t = lengths[i];
    if (t > max_tokens)
      throw InputError("sentence " + std::to_string(i + 1) + " has " + std::to_string(t) +
                       " tokens, above the batch budget of " + std::to_string(max_tokens));
    if (!cur.empty() && cur_tokens + t > max_tokens) {
      groups.push_back(std::move(cur));
      cur.clear();
      cur_tokens = 0;
    }
    cur.push_back(i);
    cur_tokens += t;
  }
  if (!cur.empty()) groups.push_back(std::move(cur));
  rng.shuffle(groups);
  return groups;
}

// Generic epoch loop over per-example losses. `loss_fn` returns the summed
// label-smoothed cross-entropy of one example; `target_tokens` its token
// count including <eos>.
struct TrainProblem {
  std::vector<int> lengths;                 // batching key per example
  std::vector<long long> target_tokens;     // loss normalizer per example
  std::function<Tensor(size_t, Rng*)> loss_fn;
  std::function<double()> valid_ppl_fn;
  std::string name = "model";
};

inline TrainResult run_training(const TransformerModel& model,
                                const std::vector<Tensor>& trainable,
                                const TrainProblem& problem, const TrainConfig& cfg,
                                std::function<Checkpoint()> snapshot) {
  Rng shuffle_rng = Rng(cfg.seed).child("shuffle");
  Rng dropout_rng = Rng(cfg.seed).child("dropout");
  std::vector<Tensor> params = trainable;
  AdamState adam = AdamState::init_for(params);

  TrainResult result;
  result.best_valid_ppl = problem.valid_ppl_fn();
  result.best_epoch = 0;
  result.best = snapshot();
  if (cfg.verbose)
    std::cerr << "[train " << problem.name << "] epoch 0 valid_ppl=" << result.best_valid_ppl
              << "\n";

  long long step = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto groups = batch_indices(problem.lengths, cfg.max_tokens_per_batch, shuffle_rng);
    double epoch_loss = 0.0;
    long long epoch_tokens = 0;
    for (const auto& group : groups) {
      long long batch_tokens = 0;
      for (size_t i : group) batch_tokens += problem.target_tokens[i];
      for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();
      for (size_t i : group) {
        Tensor loss = problem.loss_fn(i, &dropout_rng);
        const double lv = loss.value();
        if (!std::isfinite(lv))
          throw TrainingError("non-finite loss at update " + std::to_string(step + 1) +
                              " (epoch " + std::to_string(epoch) + ")");
        epoch_loss += lv;
        backward(scale(loss, 1.0 / static_cast<double>(batch_tokens)));
      }
      epoch_tokens += batch_tokens;
      adam_step(params, adam, cfg.adam);
      ++step;
    }
    const double valid_ppl = problem.valid_ppl_fn();
    result.history.push_back(
        {epoch, epoch_tokens ? epoch_loss / static_cast<double>(epoch_tokens) : 0.0, valid_ppl});
    if (cfg.verbose)
      std::cerr << "[train " << problem.name << "] epoch " << epoch
                << " loss/token=" << result.history.back().train_loss_per_token
                << " valid_ppl=" << valid_ppl << "\n";
    if (valid_ppl < result.best_valid_ppl) {
      result.best_valid_ppl = valid_ppl;
      result.best_epoch = epoch;
      result.best = snapshot();
    }
    if (epoch - result.best_epoch >= cfg.patience) break;
  }

  // Leave the model loaded with the selected parameters.
  (void)model;
  return result;
}

inline void restore_params(const TransformerModel& model, const Checkpoint& ckpt) {
  for (const auto& [name, t] : model.parameters())
    const_cast<Tensor&>(t).data() = ckpt.require(name).data();
}

}  // namespace detail

// Teacher-forced validation perplexity (plain NLL, <eos> counted).
inline double valid_perplexity(const TransformerModel& model, const ParallelCorpus& valid) {
  if (valid.pairs.empty()) throw InputError("validation corpus is empty");
  double total = 0.0;
  long long tokens = 0;
  for (const auto& [f, e] : valid.pairs) {
    std::vector<int> with_eos = e;
    with_eos.push_back(kEosId);
    total += model.score_sequence(f, with_eos);
    tokens += static_cast<long long>(with_eos.size());
  }
  return std::exp(-total / static_cast<double>(tokens));
}

inline double lm_valid_perplexity(const TransformerModel& model, const MonoCorpus& valid) {
  if (valid.sentences.empty()) throw InputError("validation corpus is empty");
  double total = 0.0;
  long long tokens = 0;
  for (const auto& e : valid.sentences) {
    std::vector<int> with_eos = e;
    with_eos.push_back(kEosId);
    total += model.lm_score_sequence(with_eos);
    tokens += static_cast<long long>(with_eos.size());
  }
  return std::exp(-total / static_cast<double>(tokens));
}

// Train an encoder-decoder model. The model ends up holding the parameters
// of the returned (lowest validation perplexity) checkpoint.
inline TrainResult train(TransformerModel& model, const ParallelCorpus& train_corpus,
                         const ParallelCorpus& valid_corpus, const TrainConfig& cfg) {
  if (train_corpus.pairs.empty()) throw InputError("training corpus is empty");
  detail::TrainProblem problem;
  problem.name = "mt";
  problem.lengths.reserve(train_corpus.pairs.size());
  problem.target_tokens.reserve(train_corpus.pairs.size());
  for (const auto& [f, e] : train_corpus.pairs) {
    problem.lengths.push_back(static_cast<int>(f.size() + e.size()));
    problem.target_tokens.push_back(static_cast<long long>(e.size()) + 1);
  }
  problem.loss_fn = [&](size_t i, Rng* rng) {
    return model.pair_loss(train_corpus.pairs[i].first, train_corpus.pairs[i].second, rng);
  };
  problem.valid_ppl_fn = [&] { return valid_perplexity(model, valid_corpus); };
  auto result = detail::run_training(
      model, model.parameter_tensors(), problem, cfg, [&] {
        return model.to_checkpoint({{"kind", "mt"}});
      });
  result.best.config["meta.epoch"] = std::to_string(result.best_epoch);
  result.best.config["meta.valid_ppl"] = std::to_string(result.best_valid_ppl);
  detail::restore_params(model, result.best);
  return result;
}

// Train a decoder-only language model on monolingual target text.
inline TrainResult train_lm(TransformerModel& model, const MonoCorpus& train_corpus,
                            const MonoCorpus& valid_corpus, const TrainConfig& cfg) {
  if (!model.is_lm()) throw ContractError("train_lm: model has an encoder");
  if (train_corpus.sentences.empty()) throw InputError("training corpus is empty");
  detail::TrainProblem problem;
  problem.name = "lm";
  for (const auto& e : train_corpus.sentences) {
    problem.lengths.push_back(static_cast<int>(e.size()));
    problem.target_tokens.push_back(static_cast<long long>(e.size()) + 1);
  }
  problem.loss_fn = [&](size_t i, Rng* rng) {
    return model.lm_loss(train_corpus.sentences[i], rng);
  };
  problem.valid_ppl_fn = [&] { return lm_valid_perplexity(model, valid_corpus); };
  auto result = detail::run_training(
      model, model.parameter_tensors(), problem, cfg, [&] {
        return model.to_checkpoint({{"kind", "lm"}});
      });
  result.best.config["meta.epoch"] = std::to_string(result.best_epoch);
  result.best.config["meta.valid_ppl"] = std::to_string(result.best_valid_ppl);
  detail::restore_params(model, result.best);
  return result;
}

}  // namespace ilmf
