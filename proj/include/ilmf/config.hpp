#pragma once

// Flat key=value configuration with section prefixes ("model.d_model=64").
// Files are UTF-8 text, one pair per line, '#' comments; command-line flags
// override file values.

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ilmf/beam.hpp"
#include "ilmf/corpus.hpp"
#include "ilmf/error.hpp"
#include "ilmf/train.hpp"
#include "ilmf/transformer.hpp"
#include "ilmf/tuning.hpp"

namespace ilmf {

class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    KvConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      size_t begin = line.find_first_not_of(" \t\r");
      if (begin == std::string::npos) continue;
      size_t end = line.find_last_not_of(" \t\r");
      line = line.substr(begin, end - begin + 1);
      const size_t eq = line.find('=');
      if (eq == std::string::npos || eq == 0)
        throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value, got '" +
                          line + "'");
      cfg.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string str(const std::string& key, const std::string& fallback = "") const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double num(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(it->second);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " is not a number: '" + it->second + "'");
    }
  }

  int integer(const std::string& key, int fallback) const {
    return static_cast<int>(num(key, fallback));
  }

  bool flag(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "1" || it->second == "true") return true;
    if (it->second == "0" || it->second == "false") return false;
    throw ConfigError("config key " + key + " is not a boolean: '" + it->second + "'");
  }

  std::string dump() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
    return os.str();
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// ---- typed section builders -------------------------------------------------

inline TransformerConfig model_config_from(const KvConfig& cfg, int vocab_size,
                                           const std::string& prefix = "model.") {
  TransformerConfig m;
  m.vocab_size = vocab_size;
  m.d_model = cfg.integer(prefix + "d_model", m.d_model);
  m.n_heads = cfg.integer(prefix + "n_heads", m.n_heads);
  m.n_enc_layers = cfg.integer(prefix + "n_enc_layers", m.n_enc_layers);
  m.n_dec_layers = cfg.integer(prefix + "n_dec_layers", m.n_dec_layers);
  m.d_ffn = cfg.integer(prefix + "d_ffn", m.d_ffn);
  m.dropout = cfg.num(prefix + "dropout", m.dropout);
  m.label_smoothing = cfg.num(prefix + "label_smoothing", m.label_smoothing);
  m.max_positions = cfg.integer(prefix + "max_positions", m.max_positions);
  m.share_decoder_in_out_embeddings =
      cfg.flag(prefix + "share_decoder_in_out_embeddings", m.share_decoder_in_out_embeddings);
  m.share_source_target_embeddings =
      cfg.flag(prefix + "share_source_target_embeddings", m.share_source_target_embeddings);
  return m;
}

inline TrainConfig train_config_from(const KvConfig& cfg, uint64_t seed,
                                     const std::string& prefix = "train.") {
  TrainConfig t;
  t.max_epochs = cfg.integer(prefix + "max_epochs", t.max_epochs);
  t.patience = cfg.integer(prefix + "patience", t.patience);
  t.max_tokens_per_batch = cfg.integer(prefix + "max_tokens_per_batch", t.max_tokens_per_batch);
  t.adam.peak_lr = cfg.num(prefix + "peak_lr", t.adam.peak_lr);
  t.adam.warmup_steps = cfg.integer(prefix + "warmup_steps", t.adam.warmup_steps);
  t.adam.beta1 = cfg.num(prefix + "beta1", t.adam.beta1);
  t.adam.beta2 = cfg.num(prefix + "beta2", t.adam.beta2);
  t.adam.epsilon = cfg.num(prefix + "epsilon", t.adam.epsilon);
  t.seed = seed;
  t.verbose = cfg.flag(prefix + "verbose", t.verbose);
  return t;
}

inline BeamConfig beam_config_from(const KvConfig& cfg, const std::string& prefix = "beam.") {
  BeamConfig b;
  b.beam_size = cfg.integer(prefix + "size", b.beam_size);
  b.max_len_a = cfg.num(prefix + "max_len_a", b.max_len_a);
  b.max_len_b = cfg.num(prefix + "max_len_b", b.max_len_b);
  b.length_norm_alpha = cfg.num(prefix + "length_norm_alpha", b.length_norm_alpha);
  return b;
}

inline SyntheticTaskSpec synth_spec_from(const KvConfig& cfg, uint64_t seed,
                                         const std::string& prefix = "synthetic.") {
  const int vocab = cfg.integer(prefix + "vocab_size", 192);
  const int shared_words = cfg.integer(prefix + "shared_words", 32);
  const double shared_mass = cfg.num(prefix + "shared_mass", 0.5);
  const double zipf = cfg.num(prefix + "zipf_exponent", 1.1);
  SyntheticTaskSpec s = default_synthetic_spec(seed, vocab, shared_words, shared_mass, zipf);
  s.reorder_rule = cfg.integer(prefix + "reorder_rule", s.reorder_rule);
  s.min_len = cfg.integer(prefix + "min_len", s.min_len);
  s.max_len = cfg.integer(prefix + "max_len", s.max_len);
  return s;
}

inline GridSpec grid_spec_from(const KvConfig& cfg, const std::string& prefix = "grid.") {
  auto parse_axis = [&](const std::string& key, const std::vector<double>& fallback) {
    if (!cfg.has(key)) return fallback;
    std::vector<double> vals;
    std::istringstream ss(cfg.str(key));
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) vals.push_back(std::stod(item));
    return vals;
  };
  GridSpec s = GridSpec::defaults();
  s.lambda1_values = parse_axis(prefix + "lambda1", s.lambda1_values);
  s.lambda2_values = parse_axis(prefix + "lambda2", s.lambda2_values);
  s.sf_extra_lambda1 = parse_axis(prefix + "sf_extra_lambda1", s.sf_extra_lambda1);
  if (cfg.has(prefix + "refine_radius")) {
    GridSpec::Refine r;
    r.radius = cfg.num(prefix + "refine_radius", 0.1);
    r.step = cfg.num(prefix + "refine_step", 0.05);
    s.refine = r;
  }
  return s;
}

}  // namespace ilmf
