#pragma once

// The five internal-language-model approximations: a separate LM trained on
// the parallel target side, source ablations of the translation model
// (h = 0, h = h_avg, c = c_avg), and a causal mini-self-attention module
// trained in place of the cross-attention with everything else frozen.
// Every variant scores target tokens without looking at source content.

#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "ilmf/checkpoint.hpp"
#include "ilmf/corpus.hpp"
#include "ilmf/metrics.hpp"
#include "ilmf/model_scorers.hpp"
#include "ilmf/train.hpp"
#include "ilmf/transformer.hpp"

namespace ilmf {

// Position-wise running means over the parallel training data: encoder
// outputs per source position, and per decoder layer the cross-attention
// module output per target position.
struct AvgStats {
  int d_model = 0;
  std::vector<std::vector<double>> h_avg;  // [src pos][d]
  std::vector<long long> h_counts;
  ForcedContextTable c_avg;                // [layer][tgt pos][d]
  std::vector<std::vector<long long>> c_counts;

  Checkpoint to_checkpoint() const {
    Checkpoint c;
    c.config["ilm.kind"] = "avg_stats";
    c.config["ilm.d_model"] = std::to_string(d_model);
    c.config["ilm.n_dec_layers"] = std::to_string(c_avg.layers.size());
    if (!h_avg.empty()) {
      std::vector<double> flat;
      for (const auto& row : h_avg) flat.insert(flat.end(), row.begin(), row.end());
      c.add("ilm.h_avg.values",
            Tensor::of(std::move(flat), {static_cast<int>(h_avg.size()), d_model}));
      std::vector<double> counts(h_counts.begin(), h_counts.end());
      c.add("ilm.h_avg.counts", Tensor::of(std::move(counts), {static_cast<int>(h_counts.size())}));
    }
    for (size_t l = 0; l < c_avg.layers.size(); ++l) {
      const auto& rows = c_avg.layers[l];
      if (rows.empty()) continue;
      std::vector<double> flat;
      for (const auto& row : rows) flat.insert(flat.end(), row.begin(), row.end());
      const std::string prefix = "ilm.c_avg.layer" + std::to_string(l);
      c.add(prefix + ".values",
            Tensor::of(std::move(flat), {static_cast<int>(rows.size()), d_model}));
      std::vector<double> counts(c_counts[l].begin(), c_counts[l].end());
      c.add(prefix + ".counts",
            Tensor::of(std::move(counts), {static_cast<int>(c_counts[l].size())}));
    }
    return c;
  }

  static AvgStats from_checkpoint(const Checkpoint& c) {
    AvgStats s;
    s.d_model = static_cast<int>(c.config_num("ilm.d_model", 0));
    const int layers = static_cast<int>(c.config_num("ilm.n_dec_layers", 0));
    if (const Tensor* hv = c.find("ilm.h_avg.values")) {
      const Tensor& hc = c.require("ilm.h_avg.counts");
      const int p = hv->dim(0);
      for (int i = 0; i < p; ++i)
        s.h_avg.push_back(std::vector<double>(hv->ptr() + static_cast<size_t>(i) * s.d_model,
                                              hv->ptr() + static_cast<size_t>(i + 1) * s.d_model));
      for (int i = 0; i < p; ++i) s.h_counts.push_back(static_cast<long long>(hc.ptr()[i]));
    }
    s.c_avg.layers.resize(static_cast<size_t>(layers));
    s.c_counts.resize(static_cast<size_t>(layers));
    for (int l = 0; l < layers; ++l) {
      const std::string prefix = "ilm.c_avg.layer" + std::to_string(l);
      if (const Tensor* cv = c.find(prefix + ".values")) {
        const Tensor& cc = c.require(prefix + ".counts");
        const int p = cv->dim(0);
        for (int i = 0; i < p; ++i)
          s.c_avg.layers[static_cast<size_t>(l)].push_back(
              std::vector<double>(cv->ptr() + static_cast<size_t>(i) * s.d_model,
                                  cv->ptr() + static_cast<size_t>(i + 1) * s.d_model));
        for (int i = 0; i < p; ++i)
          s.c_counts[static_cast<size_t>(l)].push_back(static_cast<long long>(cc.ptr()[i]));
      }
    }
    return s;
  }
};

// Single pass over the parallel corpus in eval mode; numerically stable
// incremental means, independent of iteration order up to rounding.
inline AvgStats extract_averages(const TransformerModel& model, const ParallelCorpus& corpus) {
  if (corpus.pairs.empty()) throw InputError("extract_averages: empty corpus");
  NoGradGuard ng;
  AvgStats stats;
  stats.d_model = model.config().d_model;
  const int d = stats.d_model;
  const size_t layers = static_cast<size_t>(model.config().n_dec_layers);
  stats.c_avg.layers.resize(layers);
  stats.c_counts.resize(layers);

  auto update_mean = [d](std::vector<std::vector<double>>& means,
                         std::vector<long long>& counts, size_t pos, const double* row) {
    if (means.size() <= pos) {
      means.resize(pos + 1, std::vector<double>(static_cast<size_t>(d), 0.0));
      counts.resize(pos + 1, 0);
    }
    counts[pos] += 1;
    const double inv = 1.0 / static_cast<double>(counts[pos]);
    for (int i = 0; i < d; ++i) means[pos][static_cast<size_t>(i)] += (row[i] - means[pos][static_cast<size_t>(i)]) * inv;
  };

  for (const auto& [f, e] : corpus.pairs) {
    EncoderOutputs enc = model.encode(f);
    for (int j = 0; j < enc.length; ++j)
      update_mean(stats.h_avg, stats.h_counts, static_cast<size_t>(j),
                  enc.h.ptr() + static_cast<size_t>(j) * d);

    std::vector<int> inputs(e.size() + 1);
    inputs[0] = kBosId;
    std::copy(e.begin(), e.end(), inputs.begin() + 1);
    DecoderForwardOut fw = model.decoder_forward(inputs, CrossFeed::encoder(enc), true);
    for (size_t l = 0; l < layers; ++l) {
      const Tensor& ctx = fw.contexts[l];
      for (int i = 0; i < ctx.dim(0); ++i)
        update_mean(stats.c_avg.layers[l], stats.c_counts[l], static_cast<size_t>(i),
                    ctx.ptr() + static_cast<size_t>(i) * d);
    }
  }
  return stats;
}

// ---- mini self-attention ------------------------------------------------------

struct MiniSelfAttnParams {
  MiniAttnStack stack;
  std::vector<std::pair<std::string, Tensor>> named;

  static MiniSelfAttnParams init(const TransformerConfig& cfg, Rng& rng) {
    MiniSelfAttnParams p;
    const int d = cfg.d_model;
    const double bound = std::sqrt(6.0 / static_cast<double>(d + d));
    auto matrix = [&] {
      Tensor t = Tensor::zeros({d, d}, true);
      for (double& v : t.data()) v = rng.uniform(-bound, bound);
      return t;
    };
    auto bias = [&] { return Tensor::zeros({d}, true); };
    for (int l = 0; l < cfg.n_dec_layers; ++l) {
      AttentionParams a{matrix(), bias(), matrix(), bias(), matrix(), bias(), matrix(), bias()};
      const std::string prefix = "ilm.mini." + std::to_string(l);
      p.named.push_back({prefix + ".wq", a.wq});
      p.named.push_back({prefix + ".bq", a.bq});
      p.named.push_back({prefix + ".wk", a.wk});
      p.named.push_back({prefix + ".bk", a.bk});
      p.named.push_back({prefix + ".wv", a.wv});
      p.named.push_back({prefix + ".bv", a.bv});
      p.named.push_back({prefix + ".wo", a.wo});
      p.named.push_back({prefix + ".bo", a.bo});
      p.stack.push_back(std::move(a));
    }
    return p;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& [n, t] : named) out.push_back(t);
    return out;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint c;
    c.config["ilm.kind"] = "mini_self_attn";
    c.config["ilm.n_dec_layers"] = std::to_string(stack.size());
    for (const auto& [n, t] : named) c.add(n, Tensor::of(t.data(), t.shape()));
    return c;
  }

  static MiniSelfAttnParams from_checkpoint(const Checkpoint& c, const TransformerConfig& cfg) {
    Rng dummy(0);
    MiniSelfAttnParams p = init(cfg, dummy);
    for (auto& [name, t] : p.named) {
      const Tensor& src = c.require(name);
      if (src.shape() != t.shape())
        throw FormatError("mini checkpoint tensor '" + name + "' has the wrong shape");
      const_cast<Tensor&>(t).data() = src.data();
    }
    return p;
  }
};

// Temporarily drops requires_grad on all model parameters, so a recorded
// forward trains only the replacement module.
class FreezeGuard {
 public:
  explicit FreezeGuard(const TransformerModel& model) : model_(model) {
    for (const auto& [n, t] : model_.parameters()) {
      prev_.push_back(t.requires_grad());
      const_cast<Tensor&>(t).set_requires_grad(false);
    }
  }
  ~FreezeGuard() {
    size_t i = 0;
    for (const auto& [n, t] : model_.parameters())
      const_cast<Tensor&>(t).set_requires_grad(prev_[i++]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  const TransformerModel& model_;
  std::vector<bool> prev_;
};

// ---- the variant selector -------------------------------------------------------

struct SeparateLmIlm {
  std::shared_ptr<const TransformerModel> lm;
};
struct HZeroIlm {};
struct HAvgIlm {
  std::shared_ptr<const AvgStats> stats;
};
struct CAvgIlm {
  std::shared_ptr<const AvgStats> stats;
};
struct MiniSelfAttnIlm {
  std::shared_ptr<const MiniSelfAttnParams> params;
};

using IlmVariant = std::variant<SeparateLmIlm, HZeroIlm, HAvgIlm, CAvgIlm, MiniSelfAttnIlm>;

inline std::string ilm_variant_name(const IlmVariant& v) {
  if (std::holds_alternative<SeparateLmIlm>(v)) return "separate-lm";
  if (std::holds_alternative<HZeroIlm>(v)) return "h0";
  if (std::holds_alternative<HAvgIlm>(v)) return "havg";
  if (std::holds_alternative<CAvgIlm>(v)) return "cavg";
  return "mini-self-attn";
}

inline void check_variant_ready(const IlmVariant& v) {
  if (const auto* s = std::get_if<SeparateLmIlm>(&v)) {
    if (!s->lm) throw ContractError("separate-lm variant has no language model payload");
  } else if (const auto* h = std::get_if<HAvgIlm>(&v)) {
    if (!h->stats || h->stats->h_avg.empty())
      throw ContractError("h_avg variant has empty statistics");
  } else if (const auto* c = std::get_if<CAvgIlm>(&v)) {
    if (!c->stats || c->stats->c_avg.layers.empty() || c->stats->c_avg.layers[0].empty())
      throw ContractError("c_avg variant has empty statistics");
  } else if (const auto* m = std::get_if<MiniSelfAttnIlm>(&v)) {
    if (!m->params || m->params->stack.empty())
      throw ContractError("mini-self-attn variant has no parameters");
  }
}

// Stepwise ILM scorer. Only the source LENGTH can influence the output
// (h = h_avg feeds a J-row prefix); no variant sees source content. For the
// unconditional use on monolingual corpora pass an empty source: h_avg then
// feeds its full recorded prefix.
class IlmStepScorer : public StepScorer {
 public:
  IlmStepScorer(const IlmVariant& variant, const TransformerModel& model)
      : variant_(variant), model_(model) {
    check_variant_ready(variant_);
    if (const auto* s = std::get_if<SeparateLmIlm>(&variant_))
      lm_scorer_ = std::make_unique<LmStepScorer>(*s->lm);
  }

  int vocab_size() const override { return model_.config().vocab_size; }

  State start(const std::vector<int>& source, std::vector<double>& logprobs) const override {
    if (lm_scorer_) return lm_scorer_->start(source, logprobs);
    NoGradGuard ng;
    auto st = std::make_shared<detail::ModelScorerState>();
    st->feed = std::make_shared<PreparedFeed>(prepare(static_cast<int>(source.size())));
    st->dec = model_.start_state(*st->feed);
    model_.decode_step_inplace(st->dec, kBosId, *st->feed, logprobs);
    return st;
  }

  State advance(const State& state, int token, std::vector<double>& logprobs) const override {
    if (lm_scorer_) return lm_scorer_->advance(state, token, logprobs);
    auto prev = std::static_pointer_cast<const detail::ModelScorerState>(state);
    auto st = std::make_shared<detail::ModelScorerState>(*prev);
    model_.decode_step_inplace(st->dec, token, *st->feed, logprobs);
    return st;
  }

 private:
  PreparedFeed prepare(int source_length) const {
    const int d = model_.config().d_model;
    if (std::holds_alternative<HZeroIlm>(variant_)) {
      // All-zero encoder outputs: a single zero row stands in for any J
      // exactly (uniform attention over identical rows), so the result is
      // bitwise independent of the source length.
      return model_.prepare_feed(CrossFeed::const_matrix(Tensor::zeros({1, d})));
    }
    if (const auto* h = std::get_if<HAvgIlm>(&variant_)) {
      const auto& avg = h->stats->h_avg;
      const int recorded = static_cast<int>(avg.size());
      const int rows = source_length > 0 ? source_length : recorded;
      std::vector<double> flat;
      flat.reserve(static_cast<size_t>(rows) * d);
      for (int j = 0; j < rows; ++j) {
        const auto& row = avg[static_cast<size_t>(std::min(j, recorded - 1))];
        flat.insert(flat.end(), row.begin(), row.end());
      }
      return model_.prepare_feed(CrossFeed::const_matrix(Tensor::of(std::move(flat), {rows, d})));
    }
    if (const auto* c = std::get_if<CAvgIlm>(&variant_))
      return model_.prepare_feed(CrossFeed::forced_contexts(c->stats->c_avg));
    const auto& m = std::get<MiniSelfAttnIlm>(variant_);
    return model_.prepare_feed(CrossFeed::mini_attn(m.params->stack));
  }

  IlmVariant variant_;
  const TransformerModel& model_;
  std::unique_ptr<LmStepScorer> lm_scorer_;
};

// One scoring step given an explicit prefix; the stateful scorer above is
// what decoding uses. J is the source length (h = h_avg only).
inline std::vector<double> ilm_score_step(const IlmVariant& variant,
                                          const TransformerModel& model,
                                          const std::vector<int>& prefix, int prev_token,
                                          int source_length) {
  IlmStepScorer scorer(variant, model);
  std::vector<int> source(static_cast<size_t>(std::max(source_length, 0)), kUnkId);
  std::vector<double> lp;
  StepScorer::State st = scorer.start(source, lp);
  for (int tok : prefix) st = scorer.advance(st, tok, lp);
  if (prev_token != kBosId) st = scorer.advance(st, prev_token, lp);
  return lp;
}

// ---- training the two learned variants -------------------------------------------

// Separate LM on the target side of the parallel training data.
inline TrainResult train_separate_lm(TransformerModel& lm, const ParallelCorpus& parallel,
                                     const MonoCorpus& valid, const TrainConfig& cfg) {
  MonoCorpus targets;
  targets.domain_tag = parallel.domain_tag;
  targets.sentences.reserve(parallel.pairs.size());
  for (const auto& [f, e] : parallel.pairs) targets.sentences.push_back(e);
  return train_lm(lm, targets, valid, cfg);
}

// Perplexity of the modified decoder used as a language model.
inline double mini_valid_perplexity(const TransformerModel& model, const MiniAttnStack& stack,
                                    const std::vector<std::vector<int>>& valid) {
  NoGradGuard ng;
  double total = 0.0;
  long long tokens = 0;
  for (const auto& e : valid) {
    std::vector<int> with_eos = e;
    with_eos.push_back(kEosId);
    total += model.forced_score(with_eos, CrossFeed::mini_attn(stack));
    tokens += static_cast<long long>(with_eos.size());
  }
  return std::exp(-total / static_cast<double>(tokens));
}

struct MiniTrainResult {
  MiniSelfAttnParams params;
  TrainResult train;
};

// Train the replacement attention on target-side text while every original
// model parameter stays frozen (and bit-identical). Runs the main Adam
// schedule at half the peak rate.
inline MiniTrainResult train_mini_self_attn(const TransformerModel& model,
                                            const MonoCorpus& target_corpus,
                                            const MonoCorpus& valid, const TrainConfig& cfg) {
  if (model.is_lm()) throw ContractError("train_mini_self_attn: model must be an NMT model");
  if (target_corpus.sentences.empty()) throw InputError("train_mini_self_attn: empty corpus");
  Rng init_rng = Rng(cfg.seed).child("mini_init");
  MiniTrainResult out{MiniSelfAttnParams::init(model.config(), init_rng), {}};
  MiniSelfAttnParams& mini = out.params;

  FreezeGuard freeze(model);
  TrainConfig mini_cfg = cfg;
  mini_cfg.adam.peak_lr = cfg.adam.peak_lr * 0.5;

  detail::TrainProblem problem;
  problem.name = "mini-ilm";
  for (const auto& e : target_corpus.sentences) {
    problem.lengths.push_back(static_cast<int>(e.size()));
    problem.target_tokens.push_back(static_cast<long long>(e.size()) + 1);
  }
  problem.loss_fn = [&](size_t i, Rng* rng) {
    return model.forced_loss(target_corpus.sentences[i], CrossFeed::mini_attn(mini.stack), rng);
  };
  problem.valid_ppl_fn = [&] { return mini_valid_perplexity(model, mini.stack, valid.sentences); };

  out.train = detail::run_training(model, mini.tensors(), problem, mini_cfg,
                                   [&] { return mini.to_checkpoint(); });
  for (auto& [name, t] : mini.named)
    const_cast<Tensor&>(t).data() = out.train.best.require(name).data();
  return out;
}

// ---- perplexity of a variant -------------------------------------------------------

// exp of mean per-token NLL over target sentences, <eos> included.
// `source_lengths` conditions h = h_avg when scoring the target side of a
// parallel set; leave empty for monolingual corpora.
inline double ilm_perplexity(const IlmVariant& variant, const TransformerModel& model,
                             const std::vector<std::vector<int>>& targets,
                             const std::vector<int>& source_lengths = {}) {
  if (targets.empty()) throw InputError("ilm_perplexity: empty corpus");
  if (!source_lengths.empty() && source_lengths.size() != targets.size())
    throw AlignmentError("ilm_perplexity: source length list does not match corpus");
  IlmStepScorer scorer(variant, model);
  std::vector<std::vector<int>> sources;
  if (!source_lengths.empty()) {
    sources.reserve(source_lengths.size());
    for (int j : source_lengths) sources.push_back(std::vector<int>(static_cast<size_t>(j), kUnkId));
  }
  return perplexity(scorer, targets, sources);
}

}  // namespace ilmf
