// Acceptance suite: runs every gate criterion end to end and prints one
// PASS/FAIL line per criterion. Exit status is the number of failures.
//
// The heavy criteria replicate the experimental structure at desk scale on
// the synthetic domain-shift task: parallel training data comes from domain
// A while the monolingual, validation and test data come from domain B.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ilmf/backtranslation.hpp"
#include "ilmf/beam.hpp"
#include "ilmf/corpus.hpp"
#include "ilmf/ilm.hpp"
#include "ilmf/metrics.hpp"
#include "ilmf/train.hpp"
#include "ilmf/tuning.hpp"

using namespace ilmf;

namespace {

int g_failures = 0;

double now_seconds() {
  using clock = std::chrono::steady_clock;
  static const clock::time_point start = clock::now();
  return std::chrono::duration<double>(clock::now() - start).count();
}

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": " << name;
  if (!detail.empty()) std::cout << " [" << detail << "]";
  std::cout << "\n" << std::flush;
  if (!pass) ++g_failures;
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Desk-scale experiment configuration (criteria 7 and 8).
// ---------------------------------------------------------------------------

struct ExperimentScale {
  // task
  std::function<SyntheticTaskSpec(uint64_t)> task = [](uint64_t seed) {
    return default_synthetic_spec(seed);
  };
  int n_pairs = 10000;
  int n_mono = 50000;
  int n_valid = 500;
  int n_test = 1000;
  int bpe_merges = 1200;
  // model
  int d_model = 32;
  int n_heads = 2;
  int layers = 1;
  int d_ffn = 64;
  // training
  int mt_epochs = 8;
  int lm_epochs = 4;
  int ilm_epochs = 6;

  TransformerConfig model_config(int vocab) const {
    TransformerConfig cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = d_model;
    cfg.n_heads = n_heads;
    cfg.n_enc_layers = layers;
    cfg.n_dec_layers = layers;
    cfg.d_ffn = d_ffn;
    cfg.dropout = 0.1;
    cfg.label_smoothing = 0.2;
    cfg.max_positions = 128;
    return cfg;
  }

  TrainConfig train_config(uint64_t seed, int epochs) const {
    TrainConfig cfg;
    cfg.max_epochs = epochs;
    cfg.patience = 3;
    cfg.max_tokens_per_batch = 800;
    cfg.adam.peak_lr = 3e-3;
    cfg.adam.warmup_steps = 400;
    cfg.seed = seed;
    return cfg;
  }
};

// Everything one seed of the experiment produces.
struct SeedRun {
  BpeModel bpe;
  Vocabulary vocab;
  ParallelCorpus train, valid, test;
  MonoCorpus mono;
  MonoCorpus ilm_train_targets;  // parallel target side minus the held-out tail
  MonoCorpus ilm_valid_targets;  // in-domain tail used for ILM early stopping
  std::vector<int> valid_src_lengths;
  std::vector<std::string> valid_refs, test_refs;

  std::shared_ptr<TransformerModel> mt;
  std::shared_ptr<TransformerModel> ext_lm;  // domain-B monolingual LM
  std::shared_ptr<TransformerModel> sep_lm;  // parallel-target-side LM (ILM payload)
  std::shared_ptr<AvgStats> stats;
  std::shared_ptr<MiniSelfAttnParams> mini;

  bool frozen_params_unchanged = false;  // witnessed while training the mini module
};

SeedRun build_seed_run(const ExperimentScale& ds, uint64_t seed, bool with_external_lm,
                       bool verbose) {
  SeedRun run;
  auto log = [&](const std::string& msg) {
    if (verbose)
      std::cerr << "  [seed " << seed << " t=" << fmt(now_seconds(), 0) << "s] " << msg << "\n";
  };

  SyntheticData data = generate_synthetic(ds.task(seed), ds.n_pairs, ds.n_mono, ds.n_valid,
                                          ds.n_test);
  log("data generated, target-unigram KL " + fmt(data.target_unigram_kl, 2));

  std::vector<std::string> bpe_corpus;
  for (const auto& [f, e] : data.train.pairs) {
    bpe_corpus.push_back(f);
    bpe_corpus.push_back(e);
  }
  run.bpe = learn_bpe(bpe_corpus, ds.bpe_merges);
  std::vector<std::vector<std::string>> tokenized;
  for (const std::string& line : bpe_corpus) tokenized.push_back(run.bpe.apply(line));
  run.vocab = Vocabulary::build(tokenized);

  run.train = encode_parallel(run.bpe, run.vocab, data.train);
  run.valid = encode_parallel(run.bpe, run.vocab, data.valid);
  run.test = encode_parallel(run.bpe, run.vocab, data.test);
  run.mono = encode_mono(run.bpe, run.vocab, data.mono);
  for (const auto& [f, e] : data.valid.pairs) run.valid_refs.push_back(e);
  for (const auto& [f, e] : data.test.pairs) run.test_refs.push_back(e);
  for (const auto& [f, e] : run.valid.pairs)
    run.valid_src_lengths.push_back(static_cast<int>(f.size()));

  // In-domain split for ILM early stopping: the tail of the training targets.
  const size_t holdout = std::min<size_t>(500, run.train.pairs.size() / 5);
  const size_t cut = run.train.pairs.size() - holdout;
  for (size_t i = 0; i < run.train.pairs.size(); ++i) {
    if (i < cut)
      run.ilm_train_targets.sentences.push_back(run.train.pairs[i].second);
    else
      run.ilm_valid_targets.sentences.push_back(run.train.pairs[i].second);
  }

  const int vocab_size = run.vocab.size();
  {
    Rng init = Rng(seed).child("mt_init");
    run.mt = std::make_shared<TransformerModel>(ds.model_config(vocab_size), init);
    TrainResult res =
        train(*run.mt, run.train, run.valid, ds.train_config(seed * 31 + 1, ds.mt_epochs));
    log("mt trained, valid ppl " + fmt(res.best_valid_ppl, 2) + " (epoch " +
        std::to_string(res.best_epoch) + ")");
  }
  if (with_external_lm) {
    TransformerConfig lm_cfg = ds.model_config(vocab_size);
    lm_cfg.n_enc_layers = 0;
    Rng init = Rng(seed).child("lm_init");
    run.ext_lm = std::make_shared<TransformerModel>(lm_cfg, init);
    MonoCorpus lm_valid;
    for (const auto& [f, e] : run.valid.pairs) lm_valid.sentences.push_back(e);
    TrainResult res =
        train_lm(*run.ext_lm, run.mono, lm_valid, ds.train_config(seed * 31 + 2, ds.lm_epochs));
    log("external lm trained, valid ppl " + fmt(res.best_valid_ppl, 2));
  }
  {
    TransformerConfig lm_cfg = ds.model_config(vocab_size);
    lm_cfg.n_enc_layers = 0;
    Rng init = Rng(seed).child("seplm_init");
    run.sep_lm = std::make_shared<TransformerModel>(lm_cfg, init);
    ParallelCorpus head;
    head.pairs.assign(run.train.pairs.begin(), run.train.pairs.begin() + static_cast<long>(cut));
    TrainResult res = train_separate_lm(*run.sep_lm, head, run.ilm_valid_targets,
                                        ds.train_config(seed * 31 + 3, ds.ilm_epochs));
    log("separate lm trained, in-domain ppl " + fmt(res.best_valid_ppl, 2));
  }
  run.stats = std::make_shared<AvgStats>(extract_averages(*run.mt, run.train));
  log("averages extracted over " + std::to_string(run.train.pairs.size()) + " pairs");
  {
    std::vector<std::vector<double>> before;
    for (const auto& [n, t] : run.mt->parameters()) before.push_back(t.data());
    MiniTrainResult res =
        train_mini_self_attn(*run.mt, run.ilm_train_targets, run.ilm_valid_targets,
                             ds.train_config(seed * 31 + 4, ds.ilm_epochs));
    run.mini = std::make_shared<MiniSelfAttnParams>(std::move(res.params));
    run.frozen_params_unchanged = true;
    size_t i = 0;
    for (const auto& [n, t] : run.mt->parameters())
      if (t.data() != before[i++]) run.frozen_params_unchanged = false;
    log("mini ilm trained, in-domain ppl " + fmt(res.train.best_valid_ppl, 2));
  }
  return run;
}

std::vector<std::string> decode_to_text(const SeedRun& run, const TransformerModel& mt,
                                        const std::vector<std::vector<int>>& sources,
                                        const FusionWeights& weights, const BeamConfig& beam) {
  const auto hyps = translate_corpus(sources, mt, run.ext_lm.get(), weights, beam);
  std::vector<std::string> out;
  out.reserve(hyps.size());
  for (const Hypothesis& h : hyps) {
    std::vector<int> ids = h.tokens;
    if (!ids.empty() && ids.back() == kEosId) ids.pop_back();
    out.push_back(decode_ids(run.bpe, run.vocab, ids));
  }
  return out;
}

double test_bleu(const SeedRun& run, const TransformerModel& mt, const FusionWeights& weights,
                 const BeamConfig& beam) {
  std::vector<std::vector<int>> sources;
  for (const auto& [f, e] : run.test.pairs) sources.push_back(f);
  return corpus_bleu(decode_to_text(run, mt, sources, weights, beam), run.test_refs).bleu_percent;
}

// ---------------------------------------------------------------------------
// criterion 1: full-model gradients against central finite differences
// ---------------------------------------------------------------------------

void criterion_1() {
  const double t0 = now_seconds();
  TransformerConfig cfg;
  cfg.vocab_size = 14;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_enc_layers = 1;
  cfg.n_dec_layers = 1;
  cfg.d_ffn = 24;
  cfg.dropout = 0.0;
  cfg.label_smoothing = 0.1;
  cfg.max_positions = 32;
  Rng rng(101);
  TransformerModel model(cfg, rng);
  const std::vector<int> f{4, 5, 6, 7};
  const std::vector<int> e{8, 9, 10};

  auto forward = [&] { return model.pair_loss(f, e, nullptr); };
  Tensor loss = forward();
  model.zero_grad();
  backward(loss);

  double worst = 0.0;
  const double step = 1e-5;
  size_t n_params = 0;
  for (const auto& [name, p] : model.parameters()) {
    const std::vector<double> grad = p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0);
    auto& data = const_cast<Tensor&>(p).data();
    n_params += data.size();
    for (size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + step;
      const double up = forward().value();
      data[i] = orig - step;
      const double down = forward().value();
      data[i] = orig;
      const double fd = (up - down) / (2.0 * step);
      const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-5});
      worst = std::max(worst, std::abs(fd - grad[i]) / denom);
    }
  }
  const double elapsed = now_seconds() - t0;
  report(1, "gradient correctness (d_model=16, 1+1 layers, central differences)",
         worst < 1e-4 && elapsed < 60.0,
         std::to_string(n_params) + " params, worst rel err " + fmt(worst, 8) + ", " +
             fmt(elapsed, 1) + "s");
}

// ---------------------------------------------------------------------------
// criteria 2, 4, 5, 6 share one small trained setup
// ---------------------------------------------------------------------------

struct SmallSetup {
  SeedRun run;
  BeamConfig beam;
};

SmallSetup build_small_setup() {
  ExperimentScale ds;
  ds.task = [](uint64_t seed) { return default_synthetic_spec(seed, 48, 8, 0.5, 1.3); };
  ds.n_pairs = 1500;
  ds.n_mono = 3000;
  ds.n_valid = 150;
  ds.n_test = 100;
  ds.bpe_merges = 400;
  ds.mt_epochs = 4;
  ds.lm_epochs = 3;
  ds.ilm_epochs = 3;
  SmallSetup s{build_seed_run(ds, 7, true, false), {}};
  s.beam.beam_size = 12;
  return s;
}

// Counting wrapper to witness that a scorer is never consulted.
class CountingScorer : public StepScorer {
 public:
  explicit CountingScorer(const StepScorer& inner) : inner_(inner) {}
  int vocab_size() const override { return inner_.vocab_size(); }
  State start(const std::vector<int>& source, std::vector<double>& lp) const override {
    ++calls_;
    return inner_.start(source, lp);
  }
  State advance(const State& st, int tok, std::vector<double>& lp) const override {
    ++calls_;
    return inner_.advance(st, tok, lp);
  }
  int calls() const { return calls_; }

 private:
  const StepScorer& inner_;
  mutable int calls_ = 0;
};

void criterion_2(const SmallSetup& s) {
  int checked = 0, identical_zero = 0, identical_sf = 0;

  FusionWeights zero;
  zero.variant = MiniSelfAttnIlm{s.run.mini};  // supplied but weightless
  FusionWeights pure;
  FusionWeights sf;
  sf.lambda1 = 0.15;
  sf.variant = MiniSelfAttnIlm{s.run.mini};

  MtStepScorer mt(*s.run.mt);
  LmStepScorer lm(*s.run.ext_lm);
  IlmStepScorer ilm(*zero.variant, *s.run.mt);
  CountingScorer counted_ilm(ilm);
  BeamConfig scored_cfg = s.beam;
  scored_cfg.forbid_reserved = true;  // mirror the model-level entry point

  // 100 synthetic sentences: the validation sources.
  for (size_t i = 0; i < 100; ++i) {
    const std::vector<int>& f = s.run.valid.pairs[i % s.run.valid.pairs.size()].first;
    ++checked;

    BeamResult with_extras = beam_search(f, *s.run.mt, s.run.ext_lm.get(), zero, s.beam);
    BeamResult plain = beam_search(f, *s.run.mt, nullptr, pure, s.beam);
    if (with_extras.best.tokens == plain.best.tokens) ++identical_zero;

    BeamResult sf_model = beam_search(f, *s.run.mt, s.run.ext_lm.get(), sf, s.beam);
    BeamResult sf_scored = beam_search_scorers(f, mt, &lm, &counted_ilm, sf, scored_cfg);
    if (sf_model.best.tokens == sf_scored.best.tokens) ++identical_sf;
  }
  report(2, "fusion reductions on 100 sentences ((0,0) = pure MT; (l1,0) = shallow fusion)",
         checked == 100 && identical_zero == 100 && identical_sf == 100 &&
             counted_ilm.calls() == 0,
         "pure-MT matches " + std::to_string(identical_zero) + "/100, SF matches " +
             std::to_string(identical_sf) + "/100, ILM invocations " +
             std::to_string(counted_ilm.calls()));
}

// ---------------------------------------------------------------------------
// criterion 3: beam-search enumeration oracle on stub scorers
// ---------------------------------------------------------------------------

class HashStub : public StepScorer {
 public:
  HashStub(uint64_t seed, int vocab) : seed_(seed), vocab_(vocab) {}
  int vocab_size() const override { return vocab_; }
  State start(const std::vector<int>&, std::vector<double>& lp) const override {
    auto h = std::make_shared<uint64_t>(seed_);
    fill(*h, lp);
    return h;
  }
  State advance(const State& st, int tok, std::vector<double>& lp) const override {
    auto h = std::make_shared<uint64_t>(mix(*std::static_pointer_cast<const uint64_t>(st),
                                            static_cast<uint64_t>(tok) + 0x9e37ULL));
    fill(*h, lp);
    return h;
  }

 private:
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    return z ^ (z >> 27);
  }
  void fill(uint64_t h, std::vector<double>& lp) const {
    lp.resize(static_cast<size_t>(vocab_));
    for (int t = 0; t < vocab_; ++t) {
      const uint64_t v = mix(h, static_cast<uint64_t>(t) * 0x100000001b3ULL);
      lp[static_cast<size_t>(t)] = -8.0 * (static_cast<double>(v >> 11) * 0x1.0p-53);
    }
  }
  uint64_t seed_;
  int vocab_;
};

struct EnumBest {
  std::vector<int> tokens;
  double normalized = 0.0;
  bool have = false;
};

void enumerate_space(const StepScorer& mt, const StepScorer* lm, const StepScorer* ilm,
                     const FusionWeights& w, const BeamConfig& cfg, int max_len,
                     const StepScorer::State& mt_st, const StepScorer::State& lm_st,
                     const StepScorer::State& ilm_st, const std::vector<double>& mt_lp,
                     const std::vector<double>& lm_lp, const std::vector<double>& ilm_lp,
                     std::vector<int>& prefix, double fused, EnumBest& best) {
  const auto fused_vec = fused_step_score(mt_lp, lm_lp, ilm_lp, w);
  {
    std::vector<int> tokens = prefix;
    tokens.push_back(kEosId);
    const double total = fused + fused_vec[kEosId];
    const double norm =
        total / std::pow(static_cast<double>(tokens.size()), cfg.length_norm_alpha);
    const bool better = !best.have || norm > best.normalized ||
                        (norm == best.normalized &&
                         std::lexicographical_compare(tokens.begin(), tokens.end(),
                                                      best.tokens.begin(), best.tokens.end()));
    if (better) {
      best.tokens = tokens;
      best.normalized = norm;
      best.have = true;
    }
  }
  if (static_cast<int>(prefix.size()) == max_len - 1) return;
  for (int t = 0; t < mt.vocab_size(); ++t) {
    if (t == kEosId) continue;
    std::vector<double> mt_next, lm_next, ilm_next;
    StepScorer::State m = mt.advance(mt_st, t, mt_next);
    StepScorer::State l = lm ? lm->advance(lm_st, t, lm_next) : nullptr;
    StepScorer::State i = ilm ? ilm->advance(ilm_st, t, ilm_next) : nullptr;
    prefix.push_back(t);
    enumerate_space(mt, lm, ilm, w, cfg, max_len, m, l, i, mt_next, lm_next, ilm_next, prefix,
                    fused + fused_vec[static_cast<size_t>(t)], best);
    prefix.pop_back();
  }
}

void criterion_3() {
  struct Combo {
    int vocab;
    int max_len;
  };
  // every live depth holds at most (vocab-1)^(max_len-1) <= 12 prefixes, so
  // beam 12 covers the whole space
  const std::vector<Combo> combos{{3, 4}, {4, 3}, {3, 3}, {4, 2}, {3, 2}};
  int failures = 0;
  for (uint64_t trial = 1; trial <= 200; ++trial) {
    const Combo combo = combos[trial % combos.size()];
    HashStub mt(trial * 7 + 1, combo.vocab);
    HashStub lm(trial * 7 + 2, combo.vocab);
    HashStub ilm(trial * 7 + 3, combo.vocab);
    FusionWeights w;
    w.lambda1 = 0.1 * static_cast<double>(trial % 6);
    w.lambda2 = 0.1 * static_cast<double>(trial % 4);
    if (w.lambda2 > 0) w.variant = HZeroIlm{};
    BeamConfig cfg;
    cfg.beam_size = 12;
    cfg.max_len_a = 0;
    cfg.max_len_b = combo.max_len;
    cfg.length_norm_alpha = (trial % 3 == 0) ? 0.0 : 1.0;
    const std::vector<int> source{0};

    BeamResult got = beam_search_scorers(source, mt, w.lambda1 != 0 ? &lm : nullptr,
                                         w.lambda2 != 0 ? &ilm : nullptr, w, cfg);

    EnumBest want;
    std::vector<double> mt_lp, lm_lp, ilm_lp;
    StepScorer::State mt_st = mt.start(source, mt_lp);
    StepScorer::State lm_st = w.lambda1 != 0 ? lm.start(source, lm_lp) : nullptr;
    StepScorer::State ilm_st = w.lambda2 != 0 ? ilm.start(source, ilm_lp) : nullptr;
    std::vector<int> prefix;
    enumerate_space(mt, w.lambda1 != 0 ? &lm : nullptr, w.lambda2 != 0 ? &ilm : nullptr, w, cfg,
                    combo.max_len, mt_st, lm_st, ilm_st, mt_lp, lm_lp, ilm_lp, prefix, 0.0, want);

    if (got.best.tokens != want.tokens) ++failures;
  }
  report(3, "beam-12 equals exhaustive argmax on 200 random stub scorers", failures == 0,
         std::to_string(failures) + " mismatches");
}

// ---------------------------------------------------------------------------
// criterion 4: ILM source independence, bitwise
// ---------------------------------------------------------------------------

std::vector<std::vector<double>> ilm_trace(const IlmVariant& variant, const TransformerModel& mt,
                                           const std::vector<int>& source,
                                           const std::vector<int>& prefix) {
  IlmStepScorer scorer(variant, mt);
  std::vector<std::vector<double>> trace;
  std::vector<double> lp;
  StepScorer::State st = scorer.start(source, lp);
  trace.push_back(lp);
  for (int tok : prefix) {
    st = scorer.advance(st, tok, lp);
    trace.push_back(lp);
  }
  return trace;
}

void criterion_4(const SmallSetup& s) {
  const std::vector<std::pair<std::string, IlmVariant>> variants{
      {"separate-lm", SeparateLmIlm{s.run.sep_lm}},
      {"h0", HZeroIlm{}},
      {"havg", HAvgIlm{s.run.stats}},
      {"cavg", CAvgIlm{s.run.stats}},
      {"mini-self-attn", MiniSelfAttnIlm{s.run.mini}}};
  const int vocab = s.run.vocab.size();
  Rng gen(404);
  auto random_ids = [&](int len) {
    std::vector<int> ids(static_cast<size_t>(len));
    for (int& id : ids)
      id = kNumReservedIds +
           static_cast<int>(gen.uniform_int(static_cast<uint64_t>(vocab - kNumReservedIds)));
    return ids;
  };

  bool equal_length_ok = true, any_length_ok = true;
  for (const auto& [name, variant] : variants) {
    for (int trial = 0; trial < 50; ++trial) {
      const int len = 1 + static_cast<int>(gen.uniform_int(14));
      const auto prefix = random_ids(1 + static_cast<int>(gen.uniform_int(4)));
      if (ilm_trace(variant, *s.run.mt, random_ids(len), prefix) !=
          ilm_trace(variant, *s.run.mt, random_ids(len), prefix))
        equal_length_ok = false;
    }
    if (name == "havg") continue;  // may depend on the source length
    for (int trial = 0; trial < 50; ++trial) {
      const auto prefix = random_ids(1 + static_cast<int>(gen.uniform_int(4)));
      const int len_a = 1 + static_cast<int>(gen.uniform_int(14));
      const int len_b = 1 + static_cast<int>(gen.uniform_int(14));
      if (ilm_trace(variant, *s.run.mt, random_ids(len_a), prefix) !=
          ilm_trace(variant, *s.run.mt, random_ids(len_b), prefix))
        any_length_ok = false;
    }
  }
  report(4, "ILM source independence (bitwise, 50 random source pairs per variant)",
         equal_length_ok && any_length_ok,
         std::string("equal-length ") + (equal_length_ok ? "ok" : "violated") +
             ", cross-length " + (any_length_ok ? "ok" : "violated"));
}

void criterion_5(const SmallSetup& s) {
  report(5, "freeze contract: mini-self-attn training leaves the NMT model bit-identical",
         s.run.frozen_params_unchanged, "");
}

// ---------------------------------------------------------------------------
// criterion 6: tuning lower bounds and argmax recomputation
// ---------------------------------------------------------------------------

void criterion_6(const SmallSetup& s) {
  ParallelCorpus tune_valid;
  tune_valid.pairs.assign(
      s.run.valid.pairs.begin(),
      s.run.valid.pairs.begin() + std::min<size_t>(s.run.valid.pairs.size(), 100));

  GridDecodeContext ctx;
  ctx.valid = &tune_valid;
  ctx.mt = s.run.mt.get();
  ctx.lm = s.run.ext_lm.get();
  ctx.variant = MiniSelfAttnIlm{s.run.mini};
  ctx.beam = s.beam;
  ctx.bpe = &s.run.bpe;
  ctx.vocab = &s.run.vocab;

  GridSpec spec;
  spec.lambda1_values = {0.0, 0.15, 0.3};
  spec.lambda2_values = {0.0, 0.3};
  spec.sf_extra_lambda1 = {0.05};
  GridResult res = grid_search(ctx, spec);

  double baseline = -1.0, best_sf = -1.0;
  for (const GridCell& c : res.cells) {
    if (c.lambda1 == 0.0 && c.lambda2 == 0.0) baseline = c.bleu;
    if (c.lambda2 == 0.0) best_sf = std::max(best_sf, c.bleu);
  }
  const bool bounds = res.best.bleu >= best_sf && best_sf >= baseline;

  const std::string path = "/tmp/ilmf_acceptance_heatmap.csv";
  export_heatmap_csv(res, path);
  const auto cells = parse_heatmap_csv(path);
  bool argmax_ok = cells.size() == res.cells.size();
  if (argmax_ok) {
    GridCell best = cells.front();
    for (const GridCell& c : cells) {
      if (c.bleu > best.bleu ||
          (c.bleu == best.bleu && (c.lambda2 < best.lambda2 ||
                                   (c.lambda2 == best.lambda2 && c.lambda1 < best.lambda1))))
        best = c;
    }
    argmax_ok = best.lambda1 == res.best.lambda1 && best.lambda2 == res.best.lambda2 &&
                best.bleu == res.best.bleu;
  }
  std::remove(path.c_str());
  report(6, "tuning lower bounds and heatmap argmax recomputation", bounds && argmax_ok,
         "baseline " + fmt(baseline, 2) + " <= best SF " + fmt(best_sf, 2) + " <= tuned " +
             fmt(res.best.bleu, 2) + (argmax_ok ? ", csv argmax ok" : ", csv argmax WRONG"));
}

// ---------------------------------------------------------------------------
// criteria 7 and 8: desk-scale replication of the published orderings
// ---------------------------------------------------------------------------

struct TrendOutcome {
  bool ppl_ordering = false;
  double sep_ppl = 0, h0_ppl = 0, havg_ppl = 0, cavg_ppl = 0, mini_ppl = 0;
  double bleu_base = 0, bleu_sf = 0, bleu_ilm = 0, bleu_bt = 0;
  bool bleu_ordering = false;
  double seed_seconds = 0;
};

TrendOutcome run_trend_seed(const ExperimentScale& ds, uint64_t seed) {
  const double t0 = now_seconds();
  TrendOutcome out;
  SeedRun run = build_seed_run(ds, seed, true, true);

  std::vector<std::vector<int>> valid_targets;
  for (const auto& [f, e] : run.valid.pairs) valid_targets.push_back(e);

  out.sep_ppl =
      ilm_perplexity(SeparateLmIlm{run.sep_lm}, *run.mt, valid_targets, run.valid_src_lengths);
  out.h0_ppl = ilm_perplexity(HZeroIlm{}, *run.mt, valid_targets, run.valid_src_lengths);
  out.havg_ppl =
      ilm_perplexity(HAvgIlm{run.stats}, *run.mt, valid_targets, run.valid_src_lengths);
  out.cavg_ppl =
      ilm_perplexity(CAvgIlm{run.stats}, *run.mt, valid_targets, run.valid_src_lengths);
  out.mini_ppl = ilm_perplexity(MiniSelfAttnIlm{run.mini}, *run.mt, valid_targets,
                                run.valid_src_lengths);
  out.ppl_ordering = std::min(out.sep_ppl, out.mini_ppl) <
                     std::min({out.h0_ppl, out.havg_ppl, out.cavg_ppl});
  std::cerr << "  [seed " << seed << "] ILM ppl: sep " << fmt(out.sep_ppl, 1) << ", h0 "
            << fmt(out.h0_ppl, 1) << ", havg " << fmt(out.havg_ppl, 1) << ", cavg "
            << fmt(out.cavg_ppl, 1) << ", mini " << fmt(out.mini_ppl, 1) << "\n";

  // tune shallow fusion and fused weights on half of the validation set
  BeamConfig beam;
  ParallelCorpus tune_valid;
  tune_valid.pairs.assign(run.valid.pairs.begin(),
                          run.valid.pairs.begin() + run.valid.pairs.size() / 2);
  GridDecodeContext ctx;
  ctx.valid = &tune_valid;
  ctx.mt = run.mt.get();
  ctx.lm = run.ext_lm.get();
  ctx.variant = MiniSelfAttnIlm{run.mini};
  ctx.beam = beam;
  ctx.bpe = &run.bpe;
  ctx.vocab = &run.vocab;
  const CellEvaluator eval = ctx.evaluator();

  double best_sf_l1 = 0.0, best_sf_bleu = -1.0;
  for (double l1 : {0.05, 0.1, 0.2, 0.3, 0.4}) {
    const double b = eval(l1, 0.0);
    if (b > best_sf_bleu) {
      best_sf_bleu = b;
      best_sf_l1 = l1;
    }
  }
  double best_l1 = 0.3, best_l2 = 0.3, best_fused_bleu = -1.0;
  for (double l1 : {0.3, 0.5, 0.7}) {
    for (double l2 : {0.2, 0.4, 0.6}) {
      const double b = eval(l1, l2);
      if (b > best_fused_bleu) {
        best_fused_bleu = b;
        best_l1 = l1;
        best_l2 = l2;
      }
    }
  }
  std::cerr << "  [seed " << seed << "] tuned SF l1=" << best_sf_l1 << " ("
            << fmt(best_sf_bleu, 2) << "), fused (" << best_l1 << "," << best_l2 << ") ("
            << fmt(best_fused_bleu, 2) << ")\n";

  FusionWeights none;
  out.bleu_base = test_bleu(run, *run.mt, none, beam);
  FusionWeights sf;
  sf.lambda1 = best_sf_l1;
  out.bleu_sf = test_bleu(run, *run.mt, sf, beam);
  FusionWeights fused;
  fused.lambda1 = best_l1;
  fused.lambda2 = best_l2;
  fused.variant = MiniSelfAttnIlm{run.mini};
  out.bleu_ilm = test_bleu(run, *run.mt, fused, beam);

  // back-translation on the same data
  BtPipelineConfig bt;
  bt.model_config = ds.model_config(run.vocab.size());
  bt.reverse_train = ds.train_config(seed * 31 + 5, ds.mt_epochs);
  bt.final_train = ds.train_config(seed * 31 + 6, ds.mt_epochs);
  bt.synth_beam = beam;
  bt.seed = seed * 31 + 7;
  BtPipelineResult bt_res = run_pipeline(run.train, run.mono, run.valid, bt);
  TransformerModel bt_model = TransformerModel::from_checkpoint(bt_res.final_checkpoint);
  out.bleu_bt = test_bleu(run, bt_model, none, beam);

  const double margin = 0.3;
  out.bleu_ordering = out.bleu_base + margin <= out.bleu_sf &&
                      out.bleu_sf + margin <= out.bleu_ilm &&
                      out.bleu_bt + margin >= out.bleu_ilm;
  out.seed_seconds = now_seconds() - t0;
  std::cerr << "  [seed " << seed << "] BLEU: base " << fmt(out.bleu_base, 2) << " | sf "
            << fmt(out.bleu_sf, 2) << " | sf+ilm " << fmt(out.bleu_ilm, 2) << " | bt "
            << fmt(out.bleu_bt, 2) << "  (" << fmt(out.seed_seconds / 60.0, 1) << " min)\n";
  return out;
}

void criteria_7_8() {
  ExperimentScale ds;
  const std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  int ppl_pass = 0, bleu_pass = 0;
  bool within_budget = true;
  std::ostringstream ppl_detail, bleu_detail;
  for (uint64_t seed : seeds) {
    TrendOutcome out = run_trend_seed(ds, seed);
    ppl_pass += out.ppl_ordering ? 1 : 0;
    bleu_pass += out.bleu_ordering ? 1 : 0;
    within_budget = within_budget && out.seed_seconds < 3 * 3600.0;
    ppl_detail << (out.ppl_ordering ? "+" : "-");
    bleu_detail << (out.bleu_ordering ? "+" : "-");
  }
  report(7, "ILM perplexity ordering min(separate,mini) < min(h0,havg,cavg) on 4+/5 seeds",
         ppl_pass >= 4, std::to_string(ppl_pass) + "/5 seeds [" + ppl_detail.str() + "]");
  report(8, "test BLEU ordering baseline < SF < SF+ILM(mini) <= BT (margin 0.3) on 4+/5 seeds",
         bleu_pass >= 4 && within_budget,
         std::to_string(bleu_pass) + "/5 seeds [" + bleu_detail.str() + "]" +
             (within_budget ? "" : ", budget exceeded"));
}

// ---------------------------------------------------------------------------
// criterion 9: BLEU unit correctness
// ---------------------------------------------------------------------------

void criterion_9() {
  const double brevity_case = corpus_bleu({"a b c d"}, {"a b c d e"}).bleu_percent;
  const bool ok1 = std::abs(brevity_case - 77.88) <= 0.01;
  const double identity = corpus_bleu({"x y z w", "a b"}, {"x y z w", "a b"}).bleu_percent;
  const bool ok2 = identity == 100.0;
  const double zero = corpus_bleu({"a b c d e"}, {"a b c x e"}).bleu_percent;
  const bool ok3 = zero == 0.0;
  report(9, "BLEU unit correctness (77.88 brevity case, identity 100, zero 4-gram 0)",
         ok1 && ok2 && ok3, fmt(brevity_case, 4) + ", " + fmt(identity, 1) + ", " + fmt(zero, 1));
}

// ---------------------------------------------------------------------------
// criterion 10: lossless plumbing
// ---------------------------------------------------------------------------

void criterion_10() {
  // BPE round trip on 1000 random lines
  Rng rng(1010);
  const std::string alphabet = "abcdefghijklmnopqrstuvwxyz";
  auto random_line = [&] {
    std::string line;
    const int words = 1 + static_cast<int>(rng.uniform_int(10));
    for (int w = 0; w < words; ++w) {
      if (w) line += ' ';
      const int len = 1 + static_cast<int>(rng.uniform_int(7));
      for (int c = 0; c < len; ++c)
        line += alphabet[static_cast<size_t>(rng.uniform_int(alphabet.size()))];
    }
    return line;
  };
  std::vector<std::string> corpus;
  for (int i = 0; i < 300; ++i) corpus.push_back(random_line());
  BpeModel bpe = learn_bpe(corpus, 200);
  int round_trips = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::string line = random_line();
    if (bpe_detokenize(bpe.apply(line)) == line) ++round_trips;
  }
  const bool bpe_ok = round_trips == 1000;

  // checkpoint save/load bit identity
  TransformerConfig cfg;
  cfg.vocab_size = 20;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_enc_layers = 1;
  cfg.n_dec_layers = 1;
  cfg.d_ffn = 24;
  Rng mrng(1011);
  TransformerModel model(cfg, mrng);
  const std::string path1 = "/tmp/ilmf_acceptance_c10a.ckpt";
  const std::string path2 = "/tmp/ilmf_acceptance_c10b.ckpt";
  save_checkpoint(model.to_checkpoint(), path1);
  save_checkpoint(TransformerModel::from_checkpoint(load_checkpoint(path1)).to_checkpoint(),
                  path2);
  auto slurp = [](const std::string& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream buf;
    buf << is.rdbuf();
    return buf.str();
  };
  const bool ckpt_ok = slurp(path1) == slurp(path2) && !slurp(path1).empty();
  std::remove(path1.c_str());
  std::remove(path2.c_str());

  // synthetic generation reproducibility
  SyntheticTaskSpec spec = default_synthetic_spec(77);
  SyntheticData a = generate_synthetic(spec, 200, 100, 50, 50);
  SyntheticData b = generate_synthetic(spec, 200, 100, 50, 50);
  const bool synth_ok = a.train.pairs == b.train.pairs && a.mono.sentences == b.mono.sentences &&
                        a.valid.pairs == b.valid.pairs && a.test.pairs == b.test.pairs;

  // full pipeline reproducibility at small scale
  auto tiny_pipeline = [&] {
    SyntheticTaskSpec tiny = default_synthetic_spec(78, 48, 8, 0.5, 1.3);
    SyntheticData data = generate_synthetic(tiny, 250, 120, 40, 0);
    std::vector<std::string> lines;
    for (const auto& [f, e] : data.train.pairs) {
      lines.push_back(f);
      lines.push_back(e);
    }
    BpeModel tok = learn_bpe(lines, 300);
    std::vector<std::vector<std::string>> tokenized;
    for (const std::string& l : lines) tokenized.push_back(tok.apply(l));
    Vocabulary vocab = Vocabulary::build(tokenized);
    ParallelCorpus train_c = encode_parallel(tok, vocab, data.train);
    ParallelCorpus valid_c = encode_parallel(tok, vocab, data.valid);
    MonoCorpus mono_c = encode_mono(tok, vocab, data.mono);
    BtPipelineConfig bt;
    bt.model_config.vocab_size = vocab.size();
    bt.model_config.d_model = 16;
    bt.model_config.n_heads = 2;
    bt.model_config.n_enc_layers = 1;
    bt.model_config.n_dec_layers = 1;
    bt.model_config.d_ffn = 24;
    bt.model_config.dropout = 0.1;
    bt.reverse_train.max_epochs = 1;
    bt.reverse_train.seed = 21;
    bt.final_train.max_epochs = 1;
    bt.final_train.seed = 22;
    bt.synth_beam.beam_size = 3;
    bt.seed = 23;
    BtPipelineResult res = run_pipeline(train_c, mono_c, valid_c, bt);
    std::string blob;
    for (const auto& [n, t] : res.final_checkpoint.tensors)
      for (double v : t.data()) blob.append(reinterpret_cast<const char*>(&v), sizeof(v));
    return blob;
  };
  const bool pipeline_ok = tiny_pipeline() == tiny_pipeline();

  report(10, "lossless plumbing (BPE round trip, checkpoint bytes, seeded reproducibility)",
         bpe_ok && ckpt_ok && synth_ok && pipeline_ok,
         std::string("bpe ") + std::to_string(round_trips) + "/1000, ckpt " +
             (ckpt_ok ? "ok" : "DIFF") + ", synth " + (synth_ok ? "ok" : "DIFF") + ", pipeline " +
             (pipeline_ok ? "ok" : "DIFF"));
}

}  // namespace

int main() {
  std::cout << "acceptance suite\n" << std::flush;
  criterion_1();
  criterion_3();
  criterion_9();
  criterion_10();

  std::cerr << "building small trained setup for criteria 2, 4, 5, 6...\n";
  SmallSetup small = build_small_setup();
  criterion_2(small);
  criterion_4(small);
  criterion_5(small);
  criterion_6(small);

  std::cerr << "running desk-scale trend replication (criteria 7, 8; 5 seeds)...\n";
  criteria_7_8();

  std::cout << (g_failures == 0 ? "all criteria passed"
                                : "FAILURES: " + std::to_string(g_failures))
            << "\n";
  return g_failures;
}
