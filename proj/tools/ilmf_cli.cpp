// Command-line workbench wiring the full experimental pipeline: data
// generation, joint BPE, NMT/LM training, ILM preparation, weight tuning,
// fused decoding, back-translation and evaluation. Every command resolves
// its settings from an optional key=value config file overridden by flags,
// logs the resolved configuration to stderr, and communicates with other
// commands only through the files named on its command line.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ilmf/backtranslation.hpp"
#include "ilmf/beam.hpp"
#include "ilmf/config.hpp"
#include "ilmf/corpus.hpp"
#include "ilmf/ilm.hpp"
#include "ilmf/metrics.hpp"
#include "ilmf/train.hpp"
#include "ilmf/tuning.hpp"

namespace {

using namespace ilmf;

struct Common {
  std::string config_path;
  uint64_t seed = 1;
  int threads = 1;

  KvConfig load() const {
    KvConfig cfg;
    if (!config_path.empty()) cfg = KvConfig::from_file(config_path);
    return cfg;
  }
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--config", common.config_path, "key=value config file");
  cmd->add_option("--seed", common.seed, "master seed for this command");
  cmd->add_option("--threads", common.threads, "worker cap for parallel sections");
}

void log_config(const std::string& name, const KvConfig& cfg, const Common& common) {
  std::cerr << "# " << name << " seed=" << common.seed << " threads=" << common.threads << "\n";
  for (const auto& [k, v] : cfg.values()) std::cerr << "#   " << k << "=" << v << "\n";
}

struct Tokenizer {
  BpeModel bpe;
  Vocabulary vocab;
};

Tokenizer load_tokenizer(const std::string& bpe_path, const std::string& vocab_path) {
  return {load_bpe(bpe_path), Vocabulary::load(vocab_path)};
}

uint64_t fnv1a_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot hash " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char c;
  while (is.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::string> detok_all(const Tokenizer& tok, const std::vector<Hypothesis>& hyps) {
  std::vector<std::string> out;
  out.reserve(hyps.size());
  for (const Hypothesis& h : hyps) {
    std::vector<int> ids = h.tokens;
    if (!ids.empty() && ids.back() == kEosId) ids.pop_back();
    out.push_back(decode_ids(tok.bpe, tok.vocab, ids));
  }
  return out;
}

IlmVariant load_variant(const std::string& name, const std::string& ilm_lm_path,
                        const std::string& avg_path, const std::string& mini_path,
                        const TransformerConfig& model_cfg) {
  if (name == "h0") return HZeroIlm{};
  if (name == "separate-lm") {
    if (ilm_lm_path.empty()) throw ConfigError("--ilm separate-lm requires --ilm-lm PATH");
    auto lm = std::make_shared<TransformerModel>(
        TransformerModel::from_checkpoint(load_checkpoint(ilm_lm_path)));
    return SeparateLmIlm{lm};
  }
  if (name == "havg" || name == "cavg") {
    if (avg_path.empty()) throw ConfigError("--ilm " + name + " requires --avg PATH");
    auto stats = std::make_shared<AvgStats>(AvgStats::from_checkpoint(load_checkpoint(avg_path)));
    if (name == "havg") return HAvgIlm{stats};
    return CAvgIlm{stats};
  }
  if (name == "mini-self-attn") {
    if (mini_path.empty()) throw ConfigError("--ilm mini-self-attn requires --mini PATH");
    auto params = std::make_shared<MiniSelfAttnParams>(
        MiniSelfAttnParams::from_checkpoint(load_checkpoint(mini_path), model_cfg));
    return MiniSelfAttnIlm{params};
  }
  throw ConfigError("unknown ILM variant '" + name +
                    "' (expected separate-lm|h0|havg|cavg|mini-self-attn)");
}

void write_scores_file(const std::string& path, const std::vector<Hypothesis>& hyps) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << std::setprecision(17);
  for (const Hypothesis& h : hyps)
    os << h.fused << "\t" << h.log_mt << "\t" << h.log_lm << "\t" << h.log_ilm << "\t"
       << h.tokens.size() << "\n";
}

// ---- commands -------------------------------------------------------------

int cmd_bpe_learn(const Common& common, const std::vector<std::string>& inputs, int merges_flag,
                  const std::string& out_bpe, const std::string& out_vocab) {
  KvConfig cfg = common.load();
  if (merges_flag > 0) cfg.set("bpe.merges", std::to_string(merges_flag));
  const int merges = cfg.integer("bpe.merges", 500);
  log_config("bpe-learn", cfg, common);

  std::vector<std::string> corpus;
  for (const std::string& path : inputs) {
    auto lines = read_lines(path);
    corpus.insert(corpus.end(), lines.begin(), lines.end());
  }
  BpeModel model = learn_bpe(corpus, merges);
  save_bpe(model, out_bpe);

  std::vector<std::vector<std::string>> tokenized;
  tokenized.reserve(corpus.size());
  for (const std::string& line : corpus) tokenized.push_back(model.apply(line));
  Vocabulary vocab = Vocabulary::build(tokenized);
  vocab.save(out_vocab);
  std::cout << "merges=" << model.merges.size() << " vocab=" << vocab.size() << "\n";
  return 0;
}

int cmd_bpe_apply(const std::string& bpe_path, const std::string& in_path,
                  const std::string& out_path) {
  BpeModel model = load_bpe(bpe_path);
  std::vector<std::string> out;
  for (const std::string& line : read_lines(in_path)) {
    std::string joined;
    for (const std::string& t : model.apply(line)) {
      if (!joined.empty()) joined += ' ';
      joined += t;
    }
    out.push_back(joined);
  }
  write_lines(out_path, out);
  std::cout << "lines=" << out.size() << "\n";
  return 0;
}

int cmd_make_data(const Common& common, const std::string& out_dir) {
  KvConfig cfg = common.load();
  log_config("make-data", cfg, common);
  SyntheticTaskSpec spec = synth_spec_from(cfg, common.seed);
  const int n_pairs = cfg.integer("data.n_pairs", 10000);
  const int n_mono = cfg.integer("data.n_mono", 50000);
  const int n_valid = cfg.integer("data.n_valid", 500);
  const int n_test = cfg.integer("data.n_test", 1000);
  SyntheticData data = generate_synthetic(spec, n_pairs, n_mono, n_valid, n_test);
  if (data.target_unigram_kl <= 0.1)
    std::cerr << "warning: domain KL divergence " << data.target_unigram_kl
              << " is at or below 0.1; the domain shift is weak\n";

  auto path = [&](const char* name) { return out_dir + "/" + name; };
  auto split = [&](const std::vector<std::pair<std::string, std::string>>& pairs,
                   const char* src_name, const char* tgt_name) {
    std::vector<std::string> src, tgt;
    src.reserve(pairs.size());
    tgt.reserve(pairs.size());
    for (const auto& [f, e] : pairs) {
      src.push_back(f);
      tgt.push_back(e);
    }
    write_lines(path(src_name), src);
    write_lines(path(tgt_name), tgt);
  };
  split(data.train.pairs, "train.src", "train.tgt");
  split(data.valid.pairs, "valid.src", "valid.tgt");
  split(data.test.pairs, "test.src", "test.tgt");
  write_lines(path("mono.tgt"), data.mono.sentences);

  std::ofstream meta(path("task.meta"));
  meta << "seed=" << common.seed << "\n"
       << "n_pairs=" << n_pairs << "\nn_mono=" << n_mono << "\nn_valid=" << n_valid
       << "\nn_test=" << n_test << "\ntarget_unigram_kl=" << data.target_unigram_kl << "\n";
  std::cout << "pairs=" << n_pairs << " mono=" << n_mono << " kl=" << data.target_unigram_kl
            << "\n";
  return 0;
}

int cmd_train_mt(const Common& common, const std::string& train_src, const std::string& train_tgt,
                 const std::string& valid_src, const std::string& valid_tgt,
                 const std::string& bpe_path, const std::string& vocab_path,
                 const std::string& out_path) {
  KvConfig cfg = common.load();
  log_config("train-mt", cfg, common);
  Tokenizer tok = load_tokenizer(bpe_path, vocab_path);
  ParallelCorpus train_corpus =
      encode_parallel(tok.bpe, tok.vocab, load_parallel(train_src, train_tgt));
  ParallelCorpus valid_corpus =
      encode_parallel(tok.bpe, tok.vocab, load_parallel(valid_src, valid_tgt));

  TransformerConfig mc = model_config_from(cfg, tok.vocab.size());
  TrainConfig tc = train_config_from(cfg, Rng(common.seed).child("train").state());
  Rng init_rng = Rng(common.seed).child("model_init");
  TransformerModel model(mc, init_rng);
  TrainResult res = train(model, train_corpus, valid_corpus, tc);
  save_checkpoint(res.best, out_path);
  std::cout << "best_epoch=" << res.best_epoch << " valid_ppl=" << res.best_valid_ppl << "\n";
  return 0;
}

int cmd_train_lm(const Common& common, const std::string& train_path,
                 const std::string& valid_path, const std::string& bpe_path,
                 const std::string& vocab_path, const std::string& out_path) {
  KvConfig cfg = common.load();
  log_config("train-lm", cfg, common);
  Tokenizer tok = load_tokenizer(bpe_path, vocab_path);
  MonoCorpus train_corpus = encode_mono(tok.bpe, tok.vocab, load_mono(train_path));
  MonoCorpus valid_corpus = encode_mono(tok.bpe, tok.vocab, load_mono(valid_path));

  // lm.* keys override model.* for the decoder-only architecture
  const std::string prefix = cfg.has("lm.d_model") || cfg.has("lm.n_dec_layers") ? "lm." : "model.";
  TransformerConfig mc = model_config_from(cfg, tok.vocab.size(), prefix);
  mc.n_enc_layers = 0;
  TrainConfig tc = train_config_from(cfg, Rng(common.seed).child("train").state());
  Rng init_rng = Rng(common.seed).child("lm_init");
  TransformerModel model(mc, init_rng);
  TrainResult res = train_lm(model, train_corpus, valid_corpus, tc);
  save_checkpoint(res.best, out_path);
  std::cout << "best_epoch=" << res.best_epoch << " valid_ppl=" << res.best_valid_ppl << "\n";
  return 0;
}

int cmd_ilm_avg(const std::string& model_path, const std::string& train_src,
                const std::string& train_tgt, const std::string& bpe_path,
                const std::string& vocab_path, const std::string& out_path) {
  Tokenizer tok = load_tokenizer(bpe_path, vocab_path);
  TransformerModel model = TransformerModel::from_checkpoint(load_checkpoint(model_path));
  ParallelCorpus corpus = encode_parallel(tok.bpe, tok.vocab, load_parallel(train_src, train_tgt));
  AvgStats stats = extract_averages(model, corpus);
  save_checkpoint(stats.to_checkpoint(), out_path);
  std::cout << "h_positions=" << stats.h_avg.size() << " c_layers=" << stats.c_avg.layers.size()
            << "\n";
  return 0;
}

int cmd_ilm_train_mini(const Common& common, const std::string& model_path,
                       const std::string& train_tgt, const std::string& valid_tgt,
                       const std::string& bpe_path, const std::string& vocab_path,
                       const std::string& out_path) {
  KvConfig cfg = common.load();
  log_config("ilm-train-mini", cfg, common);
  Tokenizer tok = load_tokenizer(bpe_path, vocab_path);
  TransformerModel model = TransformerModel::from_checkpoint(load_checkpoint(model_path));
  MonoCorpus targets = encode_mono(tok.bpe, tok.vocab, load_mono(train_tgt));
  MonoCorpus valid = encode_mono(tok.bpe, tok.vocab, load_mono(valid_tgt));
  TrainConfig tc = train_config_from(cfg, Rng(common.seed).child("mini").state());
  MiniTrainResult res = train_mini_self_attn(model, targets, valid, tc);
  save_checkpoint(res.params.to_checkpoint(), out_path);
  std::cout << "best_epoch=" << res.train.best_epoch << " valid_ppl=" << res.train.best_valid_ppl
            << "\n";
  return 0;
}

int cmd_ilm_ppl(const std::string& model_path, const std::string& variant_name,
                const std::string& ilm_lm_path, const std::string& avg_path,
                const std::string& mini_path, const std::string& corpus_path,
                const std::string& src_path, const std::string& bpe_path,
                const std::string& vocab_path) {
  Tokenizer tok = load_tokenizer(bpe_path, vocab_path);
  TransformerModel model = TransformerModel::from_checkpoint(load_checkpoint(model_path));
  IlmVariant variant =
      load_variant(variant_name, ilm_lm_path, avg_path, mini_path, model.config());
  MonoCorpus corpus = encode_mono(tok.bpe, tok.vocab, load_mono(corpus_path));
  std::vector<int> source_lengths;
  if (!src_path.empty()) {
    MonoCorpus sources = encode_mono(tok.bpe, tok.vocab, load_mono(src_path));
    if (sources.sentences.size() != corpus.sentences.size())
      throw AlignmentError("--src and --corpus line counts disagree");
    for (const auto& f : sources.sentences)
      source_lengths.push_back(static_cast<int>(f.size()));
  }
  const double ppl = ilm_perplexity(variant, model, corpus.sentences, source_lengths);
  std::cout << "variant=" << variant_name << " ppl=" << ppl << "\n";
  return 0;
}

int cmd_tune(const Common& common, const std::string& model_path, const std::string& lm_path,
             const std::string& variant_name, const std::string& ilm_lm_path,
             const std::string& avg_path, const std::string& mini_path,
             const std::string& valid_src, const std::string& valid_tgt,
             const std::string& bpe_path, const std::string& vocab_path,
             const std::string& out_path, const std::string& heatmap_path) {
  KvConfig cfg = common.load();
  log_config("tune", cfg, common);
  Tokenizer tok = load_tokenizer(bpe_path, vocab_path);
  TransformerModel mt = TransformerModel::from_checkpoint(load_checkpoint(model_path));
  ParallelCorpus valid = encode_parallel(tok.bpe, tok.vocab, load_parallel(valid_src, valid_tgt));
  std::shared_ptr<TransformerModel> lm;
  if (!lm_path.empty())
    lm = std::make_shared<TransformerModel>(
        TransformerModel::from_checkpoint(load_checkpoint(lm_path)));

  GridDecodeContext ctx;
  ctx.valid = &valid;
  ctx.mt = &mt;
  ctx.lm = lm.get();
  if (!variant_name.empty())
    ctx.variant = load_variant(variant_name, ilm_lm_path, avg_path, mini_path, mt.config());
  ctx.beam = beam_config_from(cfg);
  ctx.bpe = &tok.bpe;
  ctx.vocab = &tok.vocab;
  ctx.threads = common.threads;

  GridSpec spec = grid_spec_from(cfg);
  GridResult res = grid_search(ctx, spec);
  TunedWeights tw;
  tw.lambda1 = res.best.lambda1;
  tw.lambda2 = res.best.lambda2;
  tw.variant = variant_name.empty() ? "none" : variant_name;
  save_weights(tw, out_path);
  if (!heatmap_path.empty()) export_heatmap_csv(res, heatmap_path);
  std::cout << "lambda1=" << res.best.lambda1 << " lambda2=" << res.best.lambda2
            << " bleu=" << res.best.bleu << "\n";
  return 0;
}

int cmd_decode(const Common& common, const std::string& model_path, const std::string& lm_path,
               double lambda1, double lambda2, const std::string& variant_name,
               const std::string& ilm_lm_path, const std::string& avg_path,
               const std::string& mini_path, const std::string& weights_path, int beam_flag,
               const std::string& in_path, const std::string& out_path,
               const std::string& scores_path, const std::string& bpe_path,
               const std::string& vocab_path) {
  KvConfig cfg = common.load();
  if (beam_flag > 0) cfg.set("beam.size", std::to_string(beam_flag));
  log_config("decode", cfg, common);

  TransformerModel mt = TransformerModel::from_checkpoint(load_checkpoint(model_path));
  FusionWeights weights;
  std::string resolved_variant = variant_name;
  if (!weights_path.empty()) {
    TunedWeights tw = load_weights(weights_path);
    weights.lambda1 = tw.lambda1;
    weights.lambda2 = tw.lambda2;
    if (resolved_variant.empty() && tw.variant != "none") resolved_variant = tw.variant;
  } else {
    weights.lambda1 = lambda1;
    weights.lambda2 = lambda2;
  }
  std::shared_ptr<TransformerModel> lm;
  if (weights.lambda1 != 0.0) {
    if (lm_path.empty()) throw ConfigError("lambda1 > 0 requires --lm PATH");
    lm = std::make_shared<TransformerModel>(
        TransformerModel::from_checkpoint(load_checkpoint(lm_path)));
  }
  if (weights.lambda2 != 0.0) {
    if (resolved_variant.empty())
      throw ConfigError("lambda2 > 0 requires --ilm VARIANT (or a variant in --weights)");
    weights.variant =
        load_variant(resolved_variant, ilm_lm_path, avg_path, mini_path, mt.config());
  }
  weights.validate();

  BeamConfig beam = beam_config_from(cfg);
  Tokenizer tok = load_tokenizer(bpe_path, vocab_path);
  MonoCorpus sources = encode_mono(tok.bpe, tok.vocab, load_mono(in_path));
  const auto hyps =
      translate_corpus(sources.sentences, mt, lm.get(), weights, beam, common.threads);
  write_lines(out_path, detok_all(tok, hyps));
  if (!scores_path.empty()) write_scores_file(scores_path, hyps);
  std::cout << "sentences=" << hyps.size() << "\n";
  return 0;
}

int cmd_backtranslate(const Common& common, const std::string& train_src,
                      const std::string& train_tgt, const std::string& mono_path,
                      const std::string& valid_src, const std::string& valid_tgt,
                      const std::string& bpe_path, const std::string& vocab_path,
                      const std::string& out_prefix) {
  KvConfig cfg = common.load();
  log_config("backtranslate", cfg, common);
  Tokenizer tok = load_tokenizer(bpe_path, vocab_path);
  ParallelCorpus parallel =
      encode_parallel(tok.bpe, tok.vocab, load_parallel(train_src, train_tgt));
  ParallelCorpus valid = encode_parallel(tok.bpe, tok.vocab, load_parallel(valid_src, valid_tgt));
  MonoCorpus mono = encode_mono(tok.bpe, tok.vocab, load_mono(mono_path));
  const int n_mono = cfg.integer("bt.n_mono", static_cast<int>(mono.sentences.size()));
  if (n_mono < static_cast<int>(mono.sentences.size())) {
    Rng sub_rng = Rng(common.seed).child("mono_subsample");
    sub_rng.shuffle(mono.sentences);
    mono.sentences.resize(static_cast<size_t>(n_mono));
  }

  BtPipelineConfig bt;
  bt.model_config = model_config_from(cfg, tok.vocab.size());
  bt.reverse_train = train_config_from(cfg, Rng(common.seed).child("reverse_train").state());
  bt.final_train = train_config_from(cfg, Rng(common.seed).child("final_train").state());
  bt.synth_beam = beam_config_from(cfg);
  bt.upsample_real = cfg.integer("bt.upsample", 1);
  bt.seed = common.seed;
  bt.threads = common.threads;

  BtPipelineResult res = run_pipeline(parallel, mono, valid, bt);
  save_checkpoint(res.reverse_checkpoint, out_prefix + ".reverse.ckpt");
  save_checkpoint(res.final_checkpoint, out_prefix + ".final.ckpt");

  std::vector<std::string> synth_src, synth_tgt;
  for (const auto& [f, e] : res.synthetic.pairs) {
    synth_src.push_back(decode_ids(tok.bpe, tok.vocab, f));
    synth_tgt.push_back(decode_ids(tok.bpe, tok.vocab, e));
  }
  write_lines(out_prefix + ".synth.src", synth_src);
  write_lines(out_prefix + ".synth.tgt", synth_tgt);
  std::ofstream prov(out_prefix + ".provenance");
  prov << "seed=" << common.seed << "\n"
       << "reverse_checkpoint_fnv1a=" << std::hex << fnv1a_file(out_prefix + ".reverse.ckpt")
       << std::dec << "\n"
       << "mono_sentences=" << mono.sentences.size() << "\n"
       << "upsample_real=" << bt.upsample_real << "\n"
       << "combined_pairs=" << res.combined_size << "\n";
  std::cout << "synthetic=" << res.synthetic.pairs.size()
            << " final_valid_ppl=" << res.final_train.best_valid_ppl << "\n";
  return 0;
}

int cmd_evaluate(const std::string& hyp_path, const std::string& ref_path) {
  BleuReport rep = corpus_bleu(read_lines(hyp_path), read_lines(ref_path));
  std::cout << rep.line() << "\n";
  std::cout << "bleu=" << rep.bleu_percent << "\n";
  for (int i = 0; i < 4; ++i) std::cout << "p" << (i + 1) << "=" << rep.precisions[i] << "\n";
  std::cout << "bp=" << rep.brevity_penalty << "\nhyp_len=" << rep.hyp_length
            << "\nref_len=" << rep.ref_length << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"internal-language-model fusion workbench"};
  app.require_subcommand(1);

  Common c_learn;
  std::vector<std::string> learn_inputs;
  int learn_merges = 0;
  std::string learn_out_bpe, learn_out_vocab;
  auto* learn = app.add_subcommand("bpe-learn", "learn joint BPE merges and the vocabulary");
  add_common(learn, c_learn);
  learn->add_option("--in", learn_inputs, "training text files (source and target)")->required();
  learn->add_option("--merges", learn_merges, "number of merge operations");
  learn->add_option("--out-bpe", learn_out_bpe, "output merges file")->required();
  learn->add_option("--out-vocab", learn_out_vocab, "output vocabulary file")->required();

  std::string apply_model, apply_in, apply_out;
  auto* apply = app.add_subcommand("bpe-apply", "segment text into subword tokens");
  apply->add_option("--model", apply_model, "merges file")->required();
  apply->add_option("--in", apply_in, "input text")->required();
  apply->add_option("--out", apply_out, "output tokenized text")->required();

  Common c_data;
  std::string data_out;
  auto* mkdata = app.add_subcommand("make-data", "generate the synthetic domain-shift task");
  add_common(mkdata, c_data);
  mkdata->add_option("--out", data_out, "output directory (must exist)")->required();

  Common c_mt;
  std::string mt_train_src, mt_train_tgt, mt_valid_src, mt_valid_tgt, mt_bpe, mt_vocab, mt_out;
  auto* train_mt_cmd = app.add_subcommand("train-mt", "train the translation model");
  add_common(train_mt_cmd, c_mt);
  train_mt_cmd->add_option("--train-src", mt_train_src)->required();
  train_mt_cmd->add_option("--train-tgt", mt_train_tgt)->required();
  train_mt_cmd->add_option("--valid-src", mt_valid_src)->required();
  train_mt_cmd->add_option("--valid-tgt", mt_valid_tgt)->required();
  train_mt_cmd->add_option("--bpe", mt_bpe)->required();
  train_mt_cmd->add_option("--vocab", mt_vocab)->required();
  train_mt_cmd->add_option("--out", mt_out)->required();

  Common c_lm;
  std::string lm_train, lm_valid, lm_bpe, lm_vocab, lm_out;
  auto* train_lm_cmd = app.add_subcommand("train-lm", "train the external language model");
  add_common(train_lm_cmd, c_lm);
  train_lm_cmd->add_option("--train", lm_train)->required();
  train_lm_cmd->add_option("--valid", lm_valid)->required();
  train_lm_cmd->add_option("--bpe", lm_bpe)->required();
  train_lm_cmd->add_option("--vocab", lm_vocab)->required();
  train_lm_cmd->add_option("--out", lm_out)->required();

  std::string avg_model, avg_src, avg_tgt, avg_bpe, avg_vocab, avg_out;
  auto* ilm_avg = app.add_subcommand("ilm-avg", "extract h/c averages over the training data");
  ilm_avg->add_option("--model", avg_model)->required();
  ilm_avg->add_option("--train-src", avg_src)->required();
  ilm_avg->add_option("--train-tgt", avg_tgt)->required();
  ilm_avg->add_option("--bpe", avg_bpe)->required();
  ilm_avg->add_option("--vocab", avg_vocab)->required();
  ilm_avg->add_option("--out", avg_out)->required();

  Common c_mini;
  std::string mini_model, mini_tgt, mini_valid, mini_bpe, mini_vocab, mini_out;
  auto* train_mini =
      app.add_subcommand("ilm-train-mini", "train the replacement self-attention ILM");
  add_common(train_mini, c_mini);
  train_mini->add_option("--model", mini_model)->required();
  train_mini->add_option("--train-tgt", mini_tgt)->required();
  train_mini->add_option("--valid-tgt", mini_valid)->required();
  train_mini->add_option("--bpe", mini_bpe)->required();
  train_mini->add_option("--vocab", mini_vocab)->required();
  train_mini->add_option("--out", mini_out)->required();

  std::string ppl_model, ppl_variant, ppl_ilm_lm, ppl_avg, ppl_mini, ppl_corpus, ppl_src, ppl_bpe,
      ppl_vocab;
  auto* ilm_ppl = app.add_subcommand("ilm-ppl", "perplexity of an ILM variant on a corpus");
  ilm_ppl->add_option("--model", ppl_model)->required();
  ilm_ppl->add_option("--ilm", ppl_variant, "separate-lm|h0|havg|cavg|mini-self-attn")->required();
  ilm_ppl->add_option("--ilm-lm", ppl_ilm_lm, "separate-lm payload checkpoint");
  ilm_ppl->add_option("--avg", ppl_avg, "average statistics checkpoint");
  ilm_ppl->add_option("--mini", ppl_mini, "mini-self-attn checkpoint");
  ilm_ppl->add_option("--corpus", ppl_corpus, "target-side text")->required();
  ilm_ppl->add_option("--src", ppl_src, "aligned source text (h=havg uses its lengths)");
  ilm_ppl->add_option("--bpe", ppl_bpe)->required();
  ilm_ppl->add_option("--vocab", ppl_vocab)->required();

  Common c_tune;
  std::string tune_model, tune_lm, tune_variant, tune_ilm_lm, tune_avg, tune_mini;
  std::string tune_valid_src, tune_valid_tgt, tune_bpe, tune_vocab, tune_out, tune_heatmap;
  auto* tune = app.add_subcommand("tune", "grid search over fusion weights on the validation set");
  add_common(tune, c_tune);
  tune->add_option("--model", tune_model)->required();
  tune->add_option("--lm", tune_lm, "external LM checkpoint");
  tune->add_option("--ilm", tune_variant, "ILM variant for lambda2 > 0 cells");
  tune->add_option("--ilm-lm", tune_ilm_lm);
  tune->add_option("--avg", tune_avg);
  tune->add_option("--mini", tune_mini);
  tune->add_option("--valid-src", tune_valid_src)->required();
  tune->add_option("--valid-tgt", tune_valid_tgt)->required();
  tune->add_option("--bpe", tune_bpe)->required();
  tune->add_option("--vocab", tune_vocab)->required();
  tune->add_option("--out", tune_out, "tuned weights file")->required();
  tune->add_option("--heatmap", tune_heatmap, "heatmap CSV path");

  Common c_dec;
  std::string dec_model, dec_lm, dec_variant, dec_ilm_lm, dec_avg, dec_mini, dec_weights;
  std::string dec_in, dec_out, dec_scores, dec_bpe, dec_vocab;
  double dec_l1 = 0.0, dec_l2 = 0.0;
  int dec_beam = 0;
  auto* decode = app.add_subcommand("decode", "fused beam-search translation");
  add_common(decode, c_dec);
  decode->add_option("--model", dec_model)->required();
  decode->add_option("--lm", dec_lm);
  decode->add_option("--lambda1", dec_l1, "external LM weight");
  decode->add_option("--lambda2", dec_l2, "ILM subtraction weight");
  decode->add_option("--ilm", dec_variant);
  decode->add_option("--ilm-lm", dec_ilm_lm);
  decode->add_option("--avg", dec_avg);
  decode->add_option("--mini", dec_mini);
  decode->add_option("--weights", dec_weights, "tuned weights file (overrides --lambda*)");
  decode->add_option("--beam", dec_beam, "beam size (default 12)");
  decode->add_option("--in", dec_in)->required();
  decode->add_option("--out", dec_out)->required();
  decode->add_option("--scores", dec_scores, "per-line score side file");
  decode->add_option("--bpe", dec_bpe)->required();
  decode->add_option("--vocab", dec_vocab)->required();

  Common c_bt;
  std::string bt_train_src, bt_train_tgt, bt_mono, bt_valid_src, bt_valid_tgt, bt_bpe, bt_vocab,
      bt_out;
  auto* bt = app.add_subcommand("backtranslate", "reverse model, synthesis and final training");
  add_common(bt, c_bt);
  bt->add_option("--train-src", bt_train_src)->required();
  bt->add_option("--train-tgt", bt_train_tgt)->required();
  bt->add_option("--mono", bt_mono)->required();
  bt->add_option("--valid-src", bt_valid_src)->required();
  bt->add_option("--valid-tgt", bt_valid_tgt)->required();
  bt->add_option("--bpe", bt_bpe)->required();
  bt->add_option("--vocab", bt_vocab)->required();
  bt->add_option("--out", bt_out, "output prefix")->required();

  std::string eval_hyp, eval_ref;
  auto* evaluate = app.add_subcommand("evaluate", "corpus BLEU of hypotheses against references");
  evaluate->add_option("--hyp", eval_hyp)->required();
  evaluate->add_option("--ref", eval_ref)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (learn->parsed())
      return cmd_bpe_learn(c_learn, learn_inputs, learn_merges, learn_out_bpe, learn_out_vocab);
    if (apply->parsed()) return cmd_bpe_apply(apply_model, apply_in, apply_out);
    if (mkdata->parsed()) return cmd_make_data(c_data, data_out);
    if (train_mt_cmd->parsed())
      return cmd_train_mt(c_mt, mt_train_src, mt_train_tgt, mt_valid_src, mt_valid_tgt, mt_bpe,
                          mt_vocab, mt_out);
    if (train_lm_cmd->parsed())
      return cmd_train_lm(c_lm, lm_train, lm_valid, lm_bpe, lm_vocab, lm_out);
    if (ilm_avg->parsed())
      return cmd_ilm_avg(avg_model, avg_src, avg_tgt, avg_bpe, avg_vocab, avg_out);
    if (train_mini->parsed())
      return cmd_ilm_train_mini(c_mini, mini_model, mini_tgt, mini_valid, mini_bpe, mini_vocab,
                                mini_out);
    if (ilm_ppl->parsed())
      return cmd_ilm_ppl(ppl_model, ppl_variant, ppl_ilm_lm, ppl_avg, ppl_mini, ppl_corpus,
                         ppl_src, ppl_bpe, ppl_vocab);
    if (tune->parsed())
      return cmd_tune(c_tune, tune_model, tune_lm, tune_variant, tune_ilm_lm, tune_avg, tune_mini,
                      tune_valid_src, tune_valid_tgt, tune_bpe, tune_vocab, tune_out,
                      tune_heatmap);
    if (decode->parsed())
      return cmd_decode(c_dec, dec_model, dec_lm, dec_l1, dec_l2, dec_variant, dec_ilm_lm,
                        dec_avg, dec_mini, dec_weights, dec_beam, dec_in, dec_out, dec_scores,
                        dec_bpe, dec_vocab);
    if (bt->parsed())
      return cmd_backtranslate(c_bt, bt_train_src, bt_train_tgt, bt_mono, bt_valid_src,
                               bt_valid_tgt, bt_bpe, bt_vocab, bt_out);
    if (evaluate->parsed()) return cmd_evaluate(eval_hyp, eval_ref);
  } catch (const ilmf::Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
