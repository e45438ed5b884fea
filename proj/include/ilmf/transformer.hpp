#pragma once

// Scaled-down pre-norm transformer: encoder-decoder NMT model and, with
// zero encoder layers, a decoder-only language model. Two execution paths
// share the same numeric kernels:
//
//   * a full-sequence path built on recorded tensor ops (training, teacher-
//     forced scoring, statistics extraction), and
//   * an incremental raw-vector path with per-layer key/value caches
//     (beam search and stepwise scoring).
//
// Stepwise log-probabilities of a forced sequence reproduce the full-
// sequence scores exactly; the test suite asserts this.

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ilmf/checkpoint.hpp"
#include "ilmf/error.hpp"
#include "ilmf/ids.hpp"
#include "ilmf/optim.hpp"
#include "ilmf/rng.hpp"
#include "ilmf/tensor.hpp"

namespace ilmf {

struct TransformerConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_heads = 4;
  int n_enc_layers = 2;  // 0 builds a decoder-only language model
  int n_dec_layers = 2;
  int d_ffn = 128;
  double dropout = 0.3;
  double label_smoothing = 0.2;
  int max_positions = 512;
  bool share_decoder_in_out_embeddings = true;
  bool share_source_target_embeddings = false;

  bool is_lm() const { return n_enc_layers == 0; }

  void validate() const {
    if (vocab_size <= kNumReservedIds)
      throw ContractError("transformer: vocab_size must exceed the reserved ids");
    if (d_model <= 0 || n_heads <= 0 || d_ffn <= 0 || n_dec_layers <= 0 || n_enc_layers < 0)
      throw ContractError("transformer: dimensions must be positive");
    if (d_model % n_heads != 0)
      throw ContractError("transformer: d_model must be divisible by n_heads");
    if (dropout < 0.0 || dropout >= 1.0 || label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw ContractError("transformer: dropout and label_smoothing must lie in [0,1)");
    if (max_positions <= 1) throw ContractError("transformer: max_positions too small");
  }

  std::map<std::string, std::string> to_kv() const {
    std::map<std::string, std::string> kv;
    kv["model.vocab_size"] = std::to_string(vocab_size);
    kv["model.d_model"] = std::to_string(d_model);
    kv["model.n_heads"] = std::to_string(n_heads);
    kv["model.n_enc_layers"] = std::to_string(n_enc_layers);
    kv["model.n_dec_layers"] = std::to_string(n_dec_layers);
    kv["model.d_ffn"] = std::to_string(d_ffn);
    kv["model.dropout"] = std::to_string(dropout);
    kv["model.label_smoothing"] = std::to_string(label_smoothing);
    kv["model.max_positions"] = std::to_string(max_positions);
    kv["model.share_decoder_in_out_embeddings"] = share_decoder_in_out_embeddings ? "1" : "0";
    kv["model.share_source_target_embeddings"] = share_source_target_embeddings ? "1" : "0";
    return kv;
  }

  static TransformerConfig from_kv(const std::map<std::string, std::string>& kv) {
    TransformerConfig c;
    auto num = [&](const char* key, double fallback) {
      auto it = kv.find(key);
      return it == kv.end() ? fallback : std::stod(it->second);
    };
    c.vocab_size = static_cast<int>(num("model.vocab_size", 0));
    c.d_model = static_cast<int>(num("model.d_model", c.d_model));
    c.n_heads = static_cast<int>(num("model.n_heads", c.n_heads));
    c.n_enc_layers = static_cast<int>(num("model.n_enc_layers", c.n_enc_layers));
    c.n_dec_layers = static_cast<int>(num("model.n_dec_layers", c.n_dec_layers));
    c.d_ffn = static_cast<int>(num("model.d_ffn", c.d_ffn));
    c.dropout = num("model.dropout", c.dropout);
    c.label_smoothing = num("model.label_smoothing", c.label_smoothing);
    c.max_positions = static_cast<int>(num("model.max_positions", c.max_positions));
    c.share_decoder_in_out_embeddings = num("model.share_decoder_in_out_embeddings", 1) != 0;
    c.share_source_target_embeddings = num("model.share_source_target_embeddings", 0) != 0;
    return c;
  }
};

struct LayerNormParams {
  Tensor gain, bias;
};
struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};
struct FfnParams {
  Tensor w1, b1, w2, b2;
};
struct EncoderLayer {
  LayerNormParams ln_self;
  AttentionParams self;
  LayerNormParams ln_ffn;
  FfnParams ffn;
};
struct DecoderLayer {
  LayerNormParams ln_self;
  AttentionParams self;
  std::optional<LayerNormParams> ln_cross;  // absent on language models
  std::optional<AttentionParams> cross;
  LayerNormParams ln_ffn;
  FfnParams ffn;
};

struct EncoderOutputs {
  Tensor h;  // (J, d_model)
  int length = 0;
};

// Replacement attention stack: one set of cross-attention-shaped projections
// per decoder layer, run as causal self-attention.
using MiniAttnStack = std::vector<AttentionParams>;

// Per-layer, per-target-position replacement for the cross-attention module
// output; positions beyond the recorded maximum reuse the last entry.
struct ForcedContextTable {
  std::vector<std::vector<std::vector<double>>> layers;  // [layer][pos][d]

  const std::vector<double>& at(size_t layer, int pos) const {
    const auto& rows = layers[layer];
    if (rows.empty()) throw ContractError("forced context table has no recorded positions");
    const size_t p = std::min(static_cast<size_t>(pos), rows.size() - 1);
    return rows[p];
  }
};

enum class CrossKind { None, Encoder, ConstMatrix, ForcedContext, MiniAttn };

// What the decoder's second sublayer consumes. ConstMatrix stands in for
// encoder outputs (h = 0 or h = h_avg); a matrix whose rows are all equal is
// collapsed to a single row, which is exact for attention (uniform weights
// over identical rows) and keeps the result independent of the claimed
// source length bit for bit.
struct CrossFeed {
  CrossKind kind = CrossKind::None;
  const EncoderOutputs* enc = nullptr;
  Tensor matrix;
  int source_length = 0;
  const ForcedContextTable* forced = nullptr;
  const MiniAttnStack* mini = nullptr;

  static CrossFeed none() { return {}; }

  static CrossFeed encoder(const EncoderOutputs& e) {
    CrossFeed f;
    f.kind = CrossKind::Encoder;
    f.enc = &e;
    f.source_length = e.length;
    return f;
  }

  static CrossFeed const_matrix(Tensor m) {
    if (m.rank() != 2) throw DimensionError("cross feed matrix must be rank-2");
    CrossFeed f;
    f.kind = CrossKind::ConstMatrix;
    f.source_length = m.dim(0);
    const int rows = m.dim(0), cols = m.dim(1);
    bool all_equal = true;
    for (int r = 1; r < rows && all_equal; ++r)
      for (int c = 0; c < cols; ++c)
        if (m.ptr()[static_cast<size_t>(r) * cols + c] != m.ptr()[static_cast<size_t>(c)]) {
          all_equal = false;
          break;
        }
    if (all_equal && rows > 1) {
      f.matrix = Tensor::of(std::vector<double>(m.ptr(), m.ptr() + cols), {1, cols});
    } else {
      f.matrix = std::move(m);
    }
    return f;
  }

  static CrossFeed forced_contexts(const ForcedContextTable& t) {
    CrossFeed f;
    f.kind = CrossKind::ForcedContext;
    f.forced = &t;
    return f;
  }

  static CrossFeed mini_attn(const MiniAttnStack& m) {
    CrossFeed f;
    f.kind = CrossKind::MiniAttn;
    f.mini = &m;
    return f;
  }
};

// ---- incremental decoding state ---------------------------------------------

struct StepKv {
  std::vector<double> keys;    // len * d_model
  std::vector<double> values;
  int len = 0;
};

struct DecoderStepState {
  int position = 0;  // tokens consumed so far, <bos> included
  std::vector<StepKv> self_kv;
  std::vector<StepKv> mini_kv;
  std::vector<std::vector<double>> last_contexts;  // cross module output at the last step
};

// Cross-attention keys/values projected once per source; shared by every
// hypothesis decoding that source.
struct PreparedFeed {
  CrossKind kind = CrossKind::None;
  int source_length = 0;
  int rows = 0;
  std::vector<std::vector<double>> k;  // per decoder layer, rows * d_model
  std::vector<std::vector<double>> v;
  const ForcedContextTable* forced = nullptr;
  const MiniAttnStack* mini = nullptr;
};

struct DecoderForwardOut {
  Tensor logits;     // (T, vocab)
  Tensor log_probs;  // (T, vocab)
  std::vector<Tensor> contexts;  // per layer (T, d), when requested
};

class TransformerModel {
 public:
  TransformerModel(TransformerConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    init_params(rng);
    build_pos_table();
  }

  const TransformerConfig& config() const { return cfg_; }
  bool is_lm() const { return cfg_.is_lm(); }

  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

  std::vector<Tensor> parameter_tensors() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& [n, t] : params_) out.push_back(t);
    return out;
  }

  void zero_grad() const {
    for (const auto& [n, t] : params_) const_cast<Tensor&>(t).zero_grad();
  }

  // ---- persistence ----

  // Deep copy: the checkpoint stays fixed while training keeps mutating the
  // live parameters.
  Checkpoint to_checkpoint(std::map<std::string, std::string> meta = {}) const {
    Checkpoint c;
    c.config = cfg_.to_kv();
    for (auto& [k, v] : meta) c.config["meta." + k] = v;
    for (const auto& [name, t] : params_)
      c.add(name, Tensor::of(t.data(), t.shape()));
    return c;
  }

  static TransformerModel from_checkpoint(const Checkpoint& ckpt) {
    TransformerConfig cfg = TransformerConfig::from_kv(ckpt.config);
    Rng dummy(0);
    TransformerModel m(cfg, dummy);
    for (auto& [name, t] : m.params_) {
      const Tensor& src = ckpt.require(name);
      if (src.shape() != t.shape())
        throw FormatError("checkpoint tensor '" + name + "' has shape " +
                          detail::shape_str(src.shape()) + ", expected " +
                          detail::shape_str(t.shape()));
      const_cast<Tensor&>(t).data() = src.data();
    }
    return m;
  }

  // ---- encoder ----

  EncoderOutputs encode(const std::vector<int>& source, Rng* dropout_rng = nullptr) const {
    if (is_lm()) throw ContractError("encode: model is a decoder-only language model");
    if (source.empty()) throw InputError("encode: empty source sentence");
    check_length(static_cast<int>(source.size()));
    check_ids(source);
    const bool training = dropout_rng != nullptr;
    Tensor x = embed_positions(src_embed_, source, training ? dropout_rng : nullptr);
    for (const EncoderLayer& layer : enc_) {
      x = add(x, maybe_dropout(self_attention(x, layer.ln_self, layer.self, false), dropout_rng));
      x = add(x, maybe_dropout(feed_forward(x, layer.ln_ffn, layer.ffn), dropout_rng));
    }
    x = layer_norm(x, enc_final_ln_.gain, enc_final_ln_.bias);
    return {x, static_cast<int>(source.size())};
  }

  // ---- full-sequence decoder ----

  // `inputs` starts with <bos>. Contexts, when requested, are the
  // cross-attention module outputs before the residual add.
  DecoderForwardOut decoder_forward(const std::vector<int>& inputs, const CrossFeed& feed,
                                    bool want_contexts = false,
                                    Rng* dropout_rng = nullptr) const {
    if (inputs.empty() || inputs.front() != kBosId)
      throw ContractError("decoder_forward: input must start with <bos>");
    check_length(static_cast<int>(inputs.size()));
    check_ids(inputs);
    check_feed(feed);
    const int t = static_cast<int>(inputs.size());

    // Cross inputs shared by all layers.
    Tensor cross_src;
    if (feed.kind == CrossKind::Encoder) cross_src = feed.enc->h;
    if (feed.kind == CrossKind::ConstMatrix) cross_src = feed.matrix;

    DecoderForwardOut out;
    Tensor x = embed_positions(tgt_embed_, inputs, dropout_rng);
    const Tensor causal = causal_mask(t);
    for (size_t li = 0; li < dec_.size(); ++li) {
      const DecoderLayer& layer = dec_[li];
      x = add(x, maybe_dropout(self_attention(x, layer.ln_self, layer.self, true, &causal),
                               dropout_rng));
      switch (feed.kind) {
        case CrossKind::None:
          break;
        case CrossKind::Encoder:
        case CrossKind::ConstMatrix: {
          Tensor c = cross_attention(x, cross_src, *layer.ln_cross, *layer.cross);
          if (want_contexts) out.contexts.push_back(c);
          x = add(x, maybe_dropout(c, dropout_rng));
          break;
        }
        case CrossKind::ForcedContext: {
          std::vector<double> rows(static_cast<size_t>(t) * cfg_.d_model);
          for (int i = 0; i < t; ++i) {
            const auto& c = feed.forced->at(li, i);
            std::copy(c.begin(), c.end(), rows.begin() + static_cast<size_t>(i) * cfg_.d_model);
          }
          Tensor c = Tensor::of(std::move(rows), {t, cfg_.d_model});
          if (want_contexts) out.contexts.push_back(c);
          x = add(x, c);
          break;
        }
        case CrossKind::MiniAttn: {
          Tensor c = self_attention(x, *layer.ln_cross, (*feed.mini)[li], true, &causal);
          if (want_contexts) out.contexts.push_back(c);
          x = add(x, maybe_dropout(c, dropout_rng));
          break;
        }
      }
      x = add(x, maybe_dropout(feed_forward(x, layer.ln_ffn, layer.ffn), dropout_rng));
    }
    x = layer_norm(x, dec_final_ln_.gain, dec_final_ln_.bias);
    out.logits = matmul_nt(x, output_matrix());
    out.log_probs = log_softmax(out.logits, 1);
    return out;
  }

  // Sum of label-smoothed cross-entropies over e plus <eos>, teacher-forced.
  Tensor pair_loss(const std::vector<int>& f, const std::vector<int>& e,
                   Rng* dropout_rng) const {
    EncoderOutputs enc = encode(f, dropout_rng);
    CrossFeed feed = CrossFeed::encoder(enc);
    return forced_loss(e, feed, dropout_rng);
  }

  Tensor lm_loss(const std::vector<int>& e, Rng* dropout_rng) const {
    if (!is_lm()) throw ContractError("lm_loss: model has an encoder");
    return forced_loss(e, CrossFeed::none(), dropout_rng);
  }

  Tensor forced_loss(const std::vector<int>& e, const CrossFeed& feed, Rng* dropout_rng) const {
    if (e.empty()) throw InputError("forced_loss: empty target sentence");
    std::vector<int> inputs(e.size() + 1);
    inputs[0] = kBosId;
    std::copy(e.begin(), e.end(), inputs.begin() + 1);
    std::vector<int> labels = e;
    labels.push_back(kEosId);
    DecoderForwardOut fw = decoder_forward(inputs, feed, false, dropout_rng);
    return label_smoothed_ce_rows(fw.logits, labels, cfg_.label_smoothing);
  }

  // log P(e | f) with e ending in <eos>; dropout off, nothing recorded.
  double score_sequence(const std::vector<int>& f, const std::vector<int>& e_with_eos) const {
    NoGradGuard ng;
    EncoderOutputs enc = encode(f);
    CrossFeed feed = CrossFeed::encoder(enc);
    return forced_score(e_with_eos, feed);
  }

  double lm_score_sequence(const std::vector<int>& e_with_eos) const {
    NoGradGuard ng;
    if (!is_lm()) throw ContractError("lm_score_sequence: model has an encoder");
    return forced_score(e_with_eos, CrossFeed::none());
  }

  double forced_score(const std::vector<int>& e_with_eos, const CrossFeed& feed) const {
    NoGradGuard ng;
    if (e_with_eos.empty() || e_with_eos.back() != kEosId)
      throw ContractError("score_sequence: target must end with <eos>");
    std::vector<int> inputs(e_with_eos.size());
    inputs[0] = kBosId;
    std::copy(e_with_eos.begin(), e_with_eos.end() - 1, inputs.begin() + 1);
    DecoderForwardOut fw = decoder_forward(inputs, feed);
    double total = 0.0;
    const int v = cfg_.vocab_size;
    for (size_t i = 0; i < e_with_eos.size(); ++i)
      total += fw.log_probs.ptr()[i * static_cast<size_t>(v) +
                                  static_cast<size_t>(e_with_eos[i])];
    return total;
  }

  // ---- incremental decoding ----

  PreparedFeed prepare_feed(const CrossFeed& feed) const {
    NoGradGuard ng;
    check_feed(feed);
    PreparedFeed pf;
    pf.kind = feed.kind;
    pf.source_length = feed.source_length;
    pf.forced = feed.forced;
    pf.mini = feed.mini;
    if (feed.kind == CrossKind::Encoder || feed.kind == CrossKind::ConstMatrix) {
      const Tensor& src = feed.kind == CrossKind::Encoder ? feed.enc->h : feed.matrix;
      pf.rows = src.dim(0);
      for (const DecoderLayer& layer : dec_) {
        Tensor k = add(matmul(src, layer.cross->wk), layer.cross->bk);
        Tensor v = add(matmul(src, layer.cross->wv), layer.cross->bv);
        pf.k.push_back(k.data());
        pf.v.push_back(v.data());
      }
    }
    return pf;
  }

  DecoderStepState start_state(const PreparedFeed& feed) const {
    DecoderStepState st;
    st.self_kv.resize(dec_.size());
    if (feed.kind == CrossKind::MiniAttn) st.mini_kv.resize(dec_.size());
    st.last_contexts.resize(dec_.size());
    return st;
  }

  // Reusable scratch for the incremental step; sized on first use and kept
  // warm per thread.
  struct StepWorkspace {
    std::vector<double> x, xn, q, k, v, ctx, proj, hidden, logits, scores;
  };

  // Consume `prev_token` (position state.position) and emit log-probs of the
  // next token. The first call consumes <bos>.
  void decode_step_inplace(DecoderStepState& state, int prev_token, const PreparedFeed& feed,
                           std::vector<double>& logprobs) const {
    NoGradGuard ng;
    if (prev_token < 0 || prev_token >= cfg_.vocab_size)
      throw IndexError("decode_step: token id out of range");
    if (state.position >= cfg_.max_positions)
      throw LengthError("decode_step: exceeded max positions (" +
                        std::to_string(cfg_.max_positions) + ")");
    if (static_cast<int>(state.self_kv.size()) != static_cast<int>(dec_.size()))
      throw ContractError("decode_step: state does not match this model");
    for (const StepKv& kv : state.self_kv)
      if (kv.len != state.position)
        throw ContractError("decode_step: cache length disagrees with position");

    const int d = cfg_.d_model;
    const int heads = cfg_.n_heads;
    const int dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const int pos = state.position;

    thread_local StepWorkspace ws;
    std::vector<double>& x = ws.x;
    x.resize(static_cast<size_t>(d));
    const double* erow = tgt_embed_.ptr() + static_cast<size_t>(prev_token) * d;
    const double s = std::sqrt(static_cast<double>(d));
    const double* prow = pos_table_.data() + static_cast<size_t>(pos) * d;
    for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] = erow[i] * s + prow[i];

    std::vector<double>&xn = ws.xn, &q = ws.q, &k = ws.k, &v = ws.v, &ctx = ws.ctx,
                       &proj = ws.proj;
    xn.resize(static_cast<size_t>(d));
    q.resize(static_cast<size_t>(d));
    k.resize(static_cast<size_t>(d));
    v.resize(static_cast<size_t>(d));
    ctx.resize(static_cast<size_t>(d));
    proj.resize(static_cast<size_t>(d));
    std::vector<double>& scores = ws.scores;

    for (size_t li = 0; li < dec_.size(); ++li) {
      const DecoderLayer& layer = dec_[li];
      // self-attention over the cache plus the current position
      detail::layer_norm_line(x.data(), d, layer.ln_self.gain.ptr(), layer.ln_self.bias.ptr(),
                              kLnEps, xn.data());
      step_project(xn, layer.self.wq, layer.self.bq, q);
      step_project(xn, layer.self.wk, layer.self.bk, k);
      step_project(xn, layer.self.wv, layer.self.bv, v);
      StepKv& cache = state.self_kv[li];
      cache.keys.insert(cache.keys.end(), k.begin(), k.end());
      cache.values.insert(cache.values.end(), v.begin(), v.end());
      cache.len += 1;
      attend(q, cache.keys, cache.values, cache.len, heads, dh, inv_sqrt_dh, scores, ctx);
      step_project(ctx, layer.self.wo, layer.self.bo, proj);
      for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];

      // cross sublayer
      switch (feed.kind) {
        case CrossKind::None:
          break;
        case CrossKind::Encoder:
        case CrossKind::ConstMatrix: {
          detail::layer_norm_line(x.data(), d, layer.ln_cross->gain.ptr(),
                                  layer.ln_cross->bias.ptr(), kLnEps, xn.data());
          step_project(xn, layer.cross->wq, layer.cross->bq, q);
          attend(q, feed.k[li], feed.v[li], feed.rows, heads, dh, inv_sqrt_dh, scores, ctx);
          step_project(ctx, layer.cross->wo, layer.cross->bo, proj);
          state.last_contexts[li] = proj;
          for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];
          break;
        }
        case CrossKind::ForcedContext: {
          const auto& c = feed.forced->at(li, pos);
          state.last_contexts[li] = c;
          for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += c[static_cast<size_t>(i)];
          break;
        }
        case CrossKind::MiniAttn: {
          const AttentionParams& mini = (*feed.mini)[li];
          detail::layer_norm_line(x.data(), d, layer.ln_cross->gain.ptr(),
                                  layer.ln_cross->bias.ptr(), kLnEps, xn.data());
          step_project(xn, mini.wq, mini.bq, q);
          step_project(xn, mini.wk, mini.bk, k);
          step_project(xn, mini.wv, mini.bv, v);
          StepKv& mcache = state.mini_kv[li];
          mcache.keys.insert(mcache.keys.end(), k.begin(), k.end());
          mcache.values.insert(mcache.values.end(), v.begin(), v.end());
          mcache.len += 1;
          attend(q, mcache.keys, mcache.values, mcache.len, heads, dh, inv_sqrt_dh, scores, ctx);
          step_project(ctx, mini.wo, mini.bo, proj);
          state.last_contexts[li] = proj;
          for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];
          break;
        }
      }

      // feed-forward
      detail::layer_norm_line(x.data(), d, layer.ln_ffn.gain.ptr(), layer.ln_ffn.bias.ptr(),
                              kLnEps, xn.data());
      std::vector<double>& hidden = ws.hidden;
      hidden.resize(static_cast<size_t>(cfg_.d_ffn));
      step_project_any(xn.data(), d, layer.ffn.w1, layer.ffn.b1, cfg_.d_ffn, hidden.data());
      for (double& h : hidden) h = h > 0.0 ? h : 0.0;
      step_project_any(hidden.data(), cfg_.d_ffn, layer.ffn.w2, layer.ffn.b2, d, proj.data());
      for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];
    }

    detail::layer_norm_line(x.data(), d, dec_final_ln_.gain.ptr(), dec_final_ln_.bias.ptr(),
                            kLnEps, xn.data());
    const Tensor& emb = output_matrix();
    const int vocab = cfg_.vocab_size;
    std::vector<double>& logits = ws.logits;
    logits.resize(static_cast<size_t>(vocab));
    for (int t = 0; t < vocab; ++t)
      logits[static_cast<size_t>(t)] =
          detail::dot(xn.data(), emb.ptr() + static_cast<size_t>(t) * d, d);
    logprobs.resize(static_cast<size_t>(vocab));
    detail::log_softmax_line(logits.data(), vocab, logprobs.data());
    state.position += 1;
  }

  std::pair<std::vector<double>, DecoderStepState> decode_step(
      const DecoderStepState& state, int prev_token, const PreparedFeed& feed) const {
    DecoderStepState next = state;
    std::vector<double> logprobs;
    decode_step_inplace(next, prev_token, feed, logprobs);
    return {std::move(logprobs), std::move(next)};
  }

  // Stepwise scoring entry that prepares the feed itself; beam search keeps
  // its own PreparedFeed instead.
  std::vector<double> lm_step_logprobs(const std::vector<int>& prefix) const {
    if (!is_lm()) throw ContractError("lm_step_logprobs: model has an encoder");
    PreparedFeed feed;
    feed.kind = CrossKind::None;
    DecoderStepState st = start_state(feed);
    std::vector<double> lp;
    decode_step_inplace(st, kBosId, feed, lp);
    for (int tok : prefix) decode_step_inplace(st, tok, feed, lp);
    return lp;
  }

  const std::vector<double>& positional_table() const { return pos_table_; }

  static constexpr double kLnEps = 1e-6;

 private:
  // ---- construction ----

  Tensor make_matrix(int rows, int cols, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Tensor t = Tensor::zeros({rows, cols}, true);
    for (double& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
  }

  Tensor make_embedding(int rows, int cols, Rng& rng) {
    Tensor t = Tensor::zeros({rows, cols}, true);
    const double std = 1.0 / std::sqrt(static_cast<double>(cols));
    for (double& v : t.data()) v = rng.normal(0.0, std);
    return t;
  }

  Tensor make_bias(int n) { return Tensor::zeros({n}, true); }

  LayerNormParams make_ln(const std::string& name) {
    LayerNormParams ln;
    ln.gain = Tensor::full({cfg_.d_model}, 1.0);
    ln.gain.set_requires_grad(true);
    ln.bias = make_bias(cfg_.d_model);
    reg(name + ".gain", ln.gain);
    reg(name + ".bias", ln.bias);
    return ln;
  }

  AttentionParams make_attention(const std::string& name, Rng& rng) {
    AttentionParams a;
    a.wq = make_matrix(cfg_.d_model, cfg_.d_model, rng);
    a.bq = make_bias(cfg_.d_model);
    a.wk = make_matrix(cfg_.d_model, cfg_.d_model, rng);
    a.bk = make_bias(cfg_.d_model);
    a.wv = make_matrix(cfg_.d_model, cfg_.d_model, rng);
    a.bv = make_bias(cfg_.d_model);
    a.wo = make_matrix(cfg_.d_model, cfg_.d_model, rng);
    a.bo = make_bias(cfg_.d_model);
    reg(name + ".wq", a.wq);
    reg(name + ".bq", a.bq);
    reg(name + ".wk", a.wk);
    reg(name + ".bk", a.bk);
    reg(name + ".wv", a.wv);
    reg(name + ".bv", a.bv);
    reg(name + ".wo", a.wo);
    reg(name + ".bo", a.bo);
    return a;
  }

  FfnParams make_ffn(const std::string& name, Rng& rng) {
    FfnParams f;
    f.w1 = make_matrix(cfg_.d_model, cfg_.d_ffn, rng);
    f.b1 = make_bias(cfg_.d_ffn);
    f.w2 = make_matrix(cfg_.d_ffn, cfg_.d_model, rng);
    f.b2 = make_bias(cfg_.d_model);
    reg(name + ".w1", f.w1);
    reg(name + ".b1", f.b1);
    reg(name + ".w2", f.w2);
    reg(name + ".b2", f.b2);
    return f;
  }

  void reg(const std::string& name, const Tensor& t) { params_.push_back({name, t}); }

  void init_params(Rng& rng) {
    if (!is_lm()) {
      if (cfg_.share_source_target_embeddings) {
        tgt_embed_ = make_embedding(cfg_.vocab_size, cfg_.d_model, rng);
        src_embed_ = tgt_embed_;
        reg("embed.weight", tgt_embed_);
      } else {
        src_embed_ = make_embedding(cfg_.vocab_size, cfg_.d_model, rng);
        reg("encoder.embed.weight", src_embed_);
        tgt_embed_ = make_embedding(cfg_.vocab_size, cfg_.d_model, rng);
        reg("decoder.embed.weight", tgt_embed_);
      }
    } else {
      tgt_embed_ = make_embedding(cfg_.vocab_size, cfg_.d_model, rng);
      reg("decoder.embed.weight", tgt_embed_);
    }
    if (!cfg_.share_decoder_in_out_embeddings) {
      out_proj_ = make_embedding(cfg_.vocab_size, cfg_.d_model, rng);
      reg("decoder.output.weight", *out_proj_);
    }
    for (int i = 0; i < cfg_.n_enc_layers; ++i) {
      const std::string p = "enc." + std::to_string(i);
      EncoderLayer layer;
      layer.ln_self = make_ln(p + ".ln_self");
      layer.self = make_attention(p + ".self", rng);
      layer.ln_ffn = make_ln(p + ".ln_ffn");
      layer.ffn = make_ffn(p + ".ffn", rng);
      enc_.push_back(std::move(layer));
    }
    if (!is_lm()) enc_final_ln_ = make_ln("enc.final_ln");
    for (int i = 0; i < cfg_.n_dec_layers; ++i) {
      const std::string p = "dec." + std::to_string(i);
      DecoderLayer layer;
      layer.ln_self = make_ln(p + ".ln_self");
      layer.self = make_attention(p + ".self", rng);
      if (!is_lm()) {
        layer.ln_cross = make_ln(p + ".ln_cross");
        layer.cross = make_attention(p + ".cross", rng);
      }
      layer.ln_ffn = make_ln(p + ".ln_ffn");
      layer.ffn = make_ffn(p + ".ffn", rng);
      dec_.push_back(std::move(layer));
    }
    dec_final_ln_ = make_ln("dec.final_ln");
  }

  void build_pos_table() {
    const int d = cfg_.d_model;
    pos_table_.assign(static_cast<size_t>(cfg_.max_positions) * d, 0.0);
    for (int p = 0; p < cfg_.max_positions; ++p)
      for (int i = 0; i < d; i += 2) {
        const double angle =
            static_cast<double>(p) /
            std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
        pos_table_[static_cast<size_t>(p) * d + i] = std::sin(angle);
        if (i + 1 < d) pos_table_[static_cast<size_t>(p) * d + i + 1] = std::cos(angle);
      }
  }

  // ---- shared forward pieces ----

  const Tensor& output_matrix() const {
    return cfg_.share_decoder_in_out_embeddings ? tgt_embed_ : *out_proj_;
  }

  void check_ids(const std::vector<int>& ids) const {
    for (int id : ids)
      if (id < 0 || id >= cfg_.vocab_size)
        throw IndexError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                         std::to_string(cfg_.vocab_size));
  }

  void check_length(int t) const {
    if (t > cfg_.max_positions)
      throw LengthError("sequence of length " + std::to_string(t) +
                        " exceeds max_positions " + std::to_string(cfg_.max_positions));
  }

  void check_feed(const CrossFeed& feed) const {
    if (is_lm() && feed.kind != CrossKind::None)
      throw ContractError("language model decoders take no cross feed");
    if (!is_lm() && feed.kind == CrossKind::None)
      throw ContractError("NMT decoder requires a cross feed");
    if (feed.kind == CrossKind::ConstMatrix && feed.matrix.dim(1) != cfg_.d_model)
      throw DimensionError("cross feed matrix width must equal d_model");
    if (feed.kind == CrossKind::MiniAttn &&
        static_cast<int>(feed.mini->size()) != cfg_.n_dec_layers)
      throw ContractError("mini attention stack must cover every decoder layer");
    if (feed.kind == CrossKind::ForcedContext &&
        static_cast<int>(feed.forced->layers.size()) != cfg_.n_dec_layers)
      throw ContractError("forced context table must cover every decoder layer");
  }

  Tensor maybe_dropout(Tensor t, Rng* rng) const {
    if (!rng || cfg_.dropout <= 0.0) return t;
    return dropout(t, cfg_.dropout, *rng, true);
  }

  Tensor embed_positions(const Tensor& table, const std::vector<int>& ids, Rng* dropout_rng) const {
    const int t = static_cast<int>(ids.size());
    const int d = cfg_.d_model;
    Tensor x = scale(embedding(table, ids), std::sqrt(static_cast<double>(d)));
    std::vector<double> rows(static_cast<size_t>(t) * d);
    std::copy(pos_table_.begin(), pos_table_.begin() + static_cast<long>(rows.size()), rows.begin());
    x = add(x, Tensor::of(std::move(rows), {t, d}));
    return maybe_dropout(x, dropout_rng);
  }

  Tensor causal_mask(int t) const {
    Tensor m = Tensor::zeros({t, t});
    for (int i = 0; i < t; ++i)
      for (int j = i + 1; j < t; ++j)
        m.ptr()[static_cast<size_t>(i) * t + j] = kMaskValue;
    return m;
  }

  Tensor multi_head(const Tensor& q, const Tensor& k, const Tensor& v,
                    const Tensor* mask) const {
    const int heads = cfg_.n_heads;
    const int dh = cfg_.d_model / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
      Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
      Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
      Tensor s = scale(matmul_nt(qh, kh), inv);
      if (mask) s = add(s, *mask);
      outs.push_back(matmul(softmax(s, 1), vh));
    }
    return concat_cols(outs);
  }

  Tensor self_attention(const Tensor& x, const LayerNormParams& ln, const AttentionParams& a,
                        bool causal, const Tensor* mask = nullptr) const {
    Tensor xn = layer_norm(x, ln.gain, ln.bias);
    Tensor q = add(matmul(xn, a.wq), a.bq);
    Tensor k = add(matmul(xn, a.wk), a.bk);
    Tensor v = add(matmul(xn, a.wv), a.bv);
    Tensor local_mask;
    const Tensor* m = mask;
    if (causal && !m) {
      local_mask = causal_mask(x.dim(0));
      m = &local_mask;
    }
    Tensor c = multi_head(q, k, v, causal ? m : nullptr);
    return add(matmul(c, a.wo), a.bo);
  }

  Tensor cross_attention(const Tensor& x, const Tensor& src, const LayerNormParams& ln,
                         const AttentionParams& a) const {
    Tensor xn = layer_norm(x, ln.gain, ln.bias);
    Tensor q = add(matmul(xn, a.wq), a.bq);
    Tensor k = add(matmul(src, a.wk), a.bk);
    Tensor v = add(matmul(src, a.wv), a.bv);
    return add(matmul(multi_head(q, k, v, nullptr), a.wo), a.bo);
  }

  Tensor feed_forward(const Tensor& x, const LayerNormParams& ln, const FfnParams& f) const {
    Tensor xn = layer_norm(x, ln.gain, ln.bias);
    Tensor h = relu(add(matmul(xn, f.w1), f.b1));
    return add(matmul(h, f.w2), f.b2);
  }

  // ---- incremental kernels ----

  // y = x * W + b with the bias added after the accumulation, matching the
  // full path's matmul-then-add order.
  void step_project(const std::vector<double>& x, const Tensor& w, const Tensor& b,
                    std::vector<double>& y) const {
    step_project_any(x.data(), cfg_.d_model, w, b, cfg_.d_model, y.data());
  }

  static void step_project_any(const double* x, int in_dim, const Tensor& w, const Tensor& b,
                               int out_dim, double* y) {
    detail::mat_vec(x, w.ptr(), nullptr, in_dim, out_dim, y);
    const double* bp = b.ptr();
    for (int i = 0; i < out_dim; ++i) y[i] += bp[i];
  }

  static void attend(const std::vector<double>& q, const std::vector<double>& keys,
                     const std::vector<double>& values, int rows, int heads, int dh,
                     double inv_sqrt_dh, std::vector<double>& scores,
                     std::vector<double>& ctx) {
    const int d = heads * dh;
    ctx.assign(static_cast<size_t>(d), 0.0);
    scores.resize(static_cast<size_t>(rows));
    for (int h = 0; h < heads; ++h) {
      const int off = h * dh;
      for (int j = 0; j < rows; ++j)
        scores[static_cast<size_t>(j)] =
            detail::dot(q.data() + off, keys.data() + static_cast<size_t>(j) * d + off, dh) *
            inv_sqrt_dh;
      detail::softmax_line(scores.data(), rows);
      for (int j = 0; j < rows; ++j) {
        const double w = scores[static_cast<size_t>(j)];
        const double* vrow = values.data() + static_cast<size_t>(j) * d + off;
        for (int i = 0; i < dh; ++i) ctx[static_cast<size_t>(off + i)] += w * vrow[i];
      }
    }
  }

  static constexpr double kMaskValue = -1e30;

  TransformerConfig cfg_;
  Tensor src_embed_, tgt_embed_;
  std::optional<Tensor> out_proj_;
  std::vector<EncoderLayer> enc_;
  LayerNormParams enc_final_ln_;
  std::vector<DecoderLayer> dec_;
  LayerNormParams dec_final_ln_;
  std::vector<double> pos_table_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace ilmf
