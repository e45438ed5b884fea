#pragma once

// Beam search over the fused log-linear score
//   log P_MT + lambda1 * log P_LM - lambda2 * log P_ILM.
// lambda1 = lambda2 = 0 is the pure translation model, lambda2 = 0 is
// shallow fusion; a scorer with weight zero is never even started.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ilmf/error.hpp"
#include "ilmf/ids.hpp"
#include "ilmf/ilm.hpp"
#include "ilmf/model_scorers.hpp"
#include "ilmf/scorer.hpp"

namespace ilmf {

struct FusionWeights {
  double lambda1 = 0.0;  // external language model
  double lambda2 = 0.0;  // internal language model, subtracted
  std::optional<IlmVariant> variant;

  void validate() const {
    if (lambda1 < 0.0 || lambda2 < 0.0)
      throw ContractError("fusion weights must be nonnegative");
    if (lambda2 > 0.0 && !variant)
      throw ContractError("lambda2 > 0 requires an ILM variant");
  }
};

struct BeamConfig {
  int beam_size = 12;
  double max_len_a = 2.0;  // max target length = a * J + b
  double max_len_b = 10.0;
  double length_norm_alpha = 1.0;  // final ranking divides by length^alpha
  bool forbid_reserved = false;    // model-level decoding never emits <pad>/<bos>

  void validate() const {
    if (beam_size < 1) throw ContractError("beam size must be at least 1");
  }

  int max_target_len(int source_len) const {
    const double m = max_len_a * source_len + max_len_b;
    return std::max(1, static_cast<int>(m));
  }
};

struct Hypothesis {
  std::vector<int> tokens;  // ends with <eos> when finished
  double log_mt = 0.0;
  double log_lm = 0.0;
  double log_ilm = 0.0;
  double fused = 0.0;
  double normalized = 0.0;  // fused / length^alpha
  bool finished = false;
};

struct BeamResult {
  Hypothesis best;
  std::vector<Hypothesis> nbest;
};

// Elementwise fused combination. Empty lm/ilm vectors stand for an absent
// model and require the matching weight to be zero; a weight of exactly
// zero contributes nothing, keeping the reduction to pure MT bit-exact.
inline std::vector<double> fused_step_score(const std::vector<double>& log_mt,
                                            const std::vector<double>& log_lm,
                                            const std::vector<double>& log_ilm,
                                            const FusionWeights& w) {
  if (!log_lm.empty() && log_lm.size() != log_mt.size())
    throw DimensionError("fused_step_score: LM vector length " + std::to_string(log_lm.size()) +
                         " does not match MT vector length " + std::to_string(log_mt.size()));
  if (!log_ilm.empty() && log_ilm.size() != log_mt.size())
    throw DimensionError("fused_step_score: ILM vector length " + std::to_string(log_ilm.size()) +
                         " does not match MT vector length " + std::to_string(log_mt.size()));
  if (w.lambda1 != 0.0 && log_lm.empty())
    throw ContractError("fused_step_score: lambda1 != 0 but no LM scores");
  if (w.lambda2 != 0.0 && log_ilm.empty())
    throw ContractError("fused_step_score: lambda2 != 0 but no ILM scores");
  std::vector<double> out = log_mt;
  if (w.lambda1 != 0.0)
    for (size_t i = 0; i < out.size(); ++i) out[i] += w.lambda1 * log_lm[i];
  if (w.lambda2 != 0.0)
    for (size_t i = 0; i < out.size(); ++i) out[i] -= w.lambda2 * log_ilm[i];
  return out;
}

namespace detail {

struct BeamHyp {
  std::vector<int> tokens;
  double log_mt = 0.0, log_lm = 0.0, log_ilm = 0.0;
  double fused = 0.0;
  StepScorer::State mt_state, lm_state, ilm_state;
  std::vector<double> mt_lp, lm_lp, ilm_lp;  // next-token distributions
};

inline bool lex_less(const std::vector<int>& a, int a_tail, const std::vector<int>& b,
                     int b_tail) {
  const size_t na = a.size() + 1, nb = b.size() + 1;
  for (size_t i = 0; i < std::min(na, nb); ++i) {
    const int av = i < a.size() ? a[i] : a_tail;
    const int bv = i < b.size() ? b[i] : b_tail;
    if (av != bv) return av < bv;
  }
  return na < nb;
}

}  // namespace detail

// Beam search over abstract scorers. `lm`/`ilm` may be null when the
// matching weight is zero; they are never invoked otherwise.
inline BeamResult beam_search_scorers(const std::vector<int>& source, const StepScorer& mt,
                                      const StepScorer* lm, const StepScorer* ilm,
                                      const FusionWeights& weights, const BeamConfig& config) {
  weights.validate();
  config.validate();
  if (source.empty()) throw InputError("beam_search: empty source sentence");
  const bool use_lm = weights.lambda1 != 0.0;
  const bool use_ilm = weights.lambda2 != 0.0;
  if (use_lm && !lm) throw ContractError("beam_search: lambda1 != 0 but no LM supplied");
  if (use_ilm && !ilm) throw ContractError("beam_search: lambda2 != 0 but no ILM supplied");
  const int vocab = mt.vocab_size();
  const int max_len = config.max_target_len(static_cast<int>(source.size()));

  std::vector<detail::BeamHyp> live(1);
  {
    detail::BeamHyp& h = live[0];
    h.mt_state = mt.start(source, h.mt_lp);
    if (use_lm) h.lm_state = lm->start(source, h.lm_lp);
    if (use_ilm) h.ilm_state = ilm->start(source, h.ilm_lp);
  }

  std::vector<Hypothesis> finished;
  const double alpha = config.length_norm_alpha;
  auto normalize = [alpha](double fused, size_t len) {
    return fused / std::pow(static_cast<double>(len), alpha);
  };

  struct Cand {
    size_t hyp;
    int token;
    double fused_after;
  };

  while (!live.empty()) {
    std::vector<Cand> cands;
    cands.reserve(live.size() * static_cast<size_t>(vocab));
    for (size_t hi = 0; hi < live.size(); ++hi) {
      const detail::BeamHyp& h = live[hi];
      const std::vector<double> fused = fused_step_score(h.mt_lp, h.lm_lp, h.ilm_lp, weights);
      const bool force_eos = static_cast<int>(h.tokens.size()) == max_len - 1;
      if (force_eos) {
        cands.push_back({hi, kEosId, h.fused + fused[kEosId]});
      } else {
        for (int t = 0; t < vocab; ++t) {
          if (config.forbid_reserved && (t == kPadId || t == kBosId)) continue;
          cands.push_back({hi, t, h.fused + fused[t]});
        }
      }
    }
    std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
      if (a.fused_after != b.fused_after) return a.fused_after > b.fused_after;
      return detail::lex_less(live[a.hyp].tokens, a.token, live[b.hyp].tokens, b.token);
    });

    std::vector<detail::BeamHyp> next;
    next.reserve(static_cast<size_t>(config.beam_size));
    for (const Cand& c : cands) {
      const detail::BeamHyp& h = live[c.hyp];
      if (c.token == kEosId) {
        // Finished hypotheses step out of the beam.
        Hypothesis done;
        done.tokens = h.tokens;
        done.tokens.push_back(kEosId);
        done.log_mt = h.log_mt + h.mt_lp[kEosId];
        done.log_lm = h.log_lm + (use_lm ? h.lm_lp[kEosId] : 0.0);
        done.log_ilm = h.log_ilm + (use_ilm ? h.ilm_lp[kEosId] : 0.0);
        done.fused = c.fused_after;
        done.normalized = normalize(done.fused, done.tokens.size());
        done.finished = true;
        finished.push_back(std::move(done));
        continue;
      }
      if (static_cast<int>(next.size()) >= config.beam_size) continue;
      detail::BeamHyp n;
      n.tokens = h.tokens;
      n.tokens.push_back(c.token);
      n.log_mt = h.log_mt + h.mt_lp[static_cast<size_t>(c.token)];
      n.log_lm = h.log_lm + (use_lm ? h.lm_lp[static_cast<size_t>(c.token)] : 0.0);
      n.log_ilm = h.log_ilm + (use_ilm ? h.ilm_lp[static_cast<size_t>(c.token)] : 0.0);
      n.fused = c.fused_after;
      n.mt_state = mt.advance(h.mt_state, c.token, n.mt_lp);
      if (use_lm) n.lm_state = lm->advance(h.lm_state, c.token, n.lm_lp);
      if (use_ilm) n.ilm_state = ilm->advance(h.ilm_state, c.token, n.ilm_lp);
      next.push_back(std::move(n));
    }
    live = std::move(next);
  }

  std::sort(finished.begin(), finished.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.normalized != b.normalized) return a.normalized > b.normalized;
    return std::lexicographical_compare(a.tokens.begin(), a.tokens.end(), b.tokens.begin(),
                                        b.tokens.end());
  });
  BeamResult result;
  result.best = finished.front();
  const size_t n = std::min(finished.size(), static_cast<size_t>(config.beam_size));
  result.nbest.assign(finished.begin(), finished.begin() + static_cast<long>(n));
  return result;
}

// Model-level entry: wires up the MT scorer, the external LM scorer when
// lambda1 > 0, and the ILM variant scorer when lambda2 > 0.
inline BeamResult beam_search(const std::vector<int>& source, const TransformerModel& mt_model,
                              const TransformerModel* lm_model, const FusionWeights& weights,
                              const BeamConfig& config) {
  weights.validate();
  MtStepScorer mt(mt_model);
  std::unique_ptr<LmStepScorer> lm;
  if (weights.lambda1 != 0.0) {
    if (!lm_model) throw ContractError("beam_search: lambda1 != 0 but no LM model");
    lm = std::make_unique<LmStepScorer>(*lm_model);
  }
  std::unique_ptr<IlmStepScorer> ilm;
  if (weights.lambda2 != 0.0)
    ilm = std::make_unique<IlmStepScorer>(*weights.variant, mt_model);
  BeamConfig cfg = config;
  cfg.forbid_reserved = true;
  // Keep the forced-eos position inside the model's positional table.
  const int cap = mt_model.config().max_positions - 1;
  if (cfg.max_target_len(static_cast<int>(source.size())) > cap) {
    cfg.max_len_a = 0.0;
    cfg.max_len_b = static_cast<double>(cap);
  }
  return beam_search_scorers(source, mt, lm.get(), ilm.get(), weights, cfg);
}

// Per-sentence beam search over a corpus; sentence order is preserved and
// failures carry the 1-based sentence index. `threads` caps the worker
// count; results do not depend on it.
inline std::vector<Hypothesis> translate_corpus(const std::vector<std::vector<int>>& sources,
                                                const TransformerModel& mt_model,
                                                const TransformerModel* lm_model,
                                                const FusionWeights& weights,
                                                const BeamConfig& config, int threads = 1) {
  std::vector<Hypothesis> out(sources.size());
  std::vector<std::string> errors(sources.size());
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(sources.size())));
  auto run_range = [&](size_t begin, size_t stride) {
    for (size_t i = begin; i < sources.size(); i += stride) {
      try {
        out[i] = beam_search(sources[i], mt_model, lm_model, weights, config).best;
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  if (workers == 1) {
    run_range(0, 1);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back(run_range, static_cast<size_t>(w), static_cast<size_t>(workers));
    for (auto& t : pool) t.join();
  }
  for (size_t i = 0; i < errors.size(); ++i)
    if (!errors[i].empty())
      throw InputError("sentence " + std::to_string(i + 1) + ": " + errors[i]);
  return out;
}

}  // namespace ilmf
