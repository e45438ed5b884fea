#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ilmf/train.hpp"

using namespace ilmf;

namespace {

TransformerConfig tiny_config(int vocab) {
  TransformerConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_enc_layers = 1;
  cfg.n_dec_layers = 1;
  cfg.d_ffn = 24;
  cfg.dropout = 0.0;
  cfg.label_smoothing = 0.1;
  cfg.max_positions = 32;
  return cfg;
}

ParallelCorpus one_pair_corpus(int copies) {
  ParallelCorpus c;
  for (int i = 0; i < copies; ++i) c.pairs.push_back({{4, 5, 6}, {7, 8}});
  return c;
}

}  // namespace

TEST_CASE("zero epochs returns the initialization") {
  Rng rng(1);
  TransformerModel model(tiny_config(10), rng);
  const auto before = model.to_checkpoint();
  TrainConfig cfg;
  cfg.max_epochs = 0;
  cfg.seed = 3;
  TrainResult res = train(model, one_pair_corpus(4), one_pair_corpus(1), cfg);
  CHECK(res.best_epoch == 0);
  for (size_t i = 0; i < before.tensors.size(); ++i)
    CHECK(res.best.tensors[i].second.data() == before.tensors[i].second.data());
}

TEST_CASE("checkpoint selection returns the epoch with lowest validation perplexity") {
  // Scripted validation curve: the loop must hand back the epoch-3 snapshot
  // even though training continues afterwards.
  Rng rng(2);
  TransformerModel model(tiny_config(10), rng);
  const std::vector<double> scripted{50.0, 40.0, 30.0, 10.0, 20.0, 25.0, 30.0};
  size_t call = 0;
  int snapshot_epoch = -1;
  int epoch_counter = 0;

  detail::TrainProblem problem;
  problem.name = "scripted";
  problem.lengths = {2};
  problem.target_tokens = {3};
  Tensor dummy = Tensor::zeros({1}, true);
  problem.loss_fn = [&](size_t, Rng*) {
    ++epoch_counter;
    return sum(mul(dummy, dummy));
  };
  problem.valid_ppl_fn = [&] { return scripted[std::min(call++, scripted.size() - 1)]; };

  TrainConfig cfg;
  cfg.max_epochs = 6;
  cfg.patience = 3;
  cfg.seed = 1;
  TrainResult res = detail::run_training(model, {dummy}, problem, cfg, [&] {
    Checkpoint c;
    c.config["epoch_marker"] = std::to_string(epoch_counter);
    c.add("dummy", Tensor::of(dummy.data(), dummy.shape()));
    return c;
  });
  (void)snapshot_epoch;
  // scripted[0] is epoch 0 (init), scripted[3] = 10 is epoch 3.
  CHECK(res.best_epoch == 3);
  CHECK(res.best_valid_ppl == 10.0);
  // stopped after patience epochs without improvement: epochs 4,5,6 ran.
  CHECK(res.history.size() == 6);
}

TEST_CASE("early stopping honors patience") {
  Rng rng(3);
  TransformerModel model(tiny_config(10), rng);
  size_t call = 0;
  detail::TrainProblem problem;
  problem.name = "flat";
  problem.lengths = {2};
  problem.target_tokens = {3};
  Tensor dummy = Tensor::zeros({1}, true);
  problem.loss_fn = [&](size_t, Rng*) { return sum(mul(dummy, dummy)); };
  problem.valid_ppl_fn = [&] {
    ++call;
    return 100.0;  // never improves over the initial value
  };
  TrainConfig cfg;
  cfg.max_epochs = 50;
  cfg.patience = 2;
  TrainResult res = detail::run_training(model, {dummy}, problem, cfg,
                                         [] { return Checkpoint{}; });
  CHECK(res.history.size() == 2);
  CHECK(res.best_epoch == 0);
}

TEST_CASE("overfitting a single repeated pair") {
  TransformerConfig mc = tiny_config(10);
  mc.label_smoothing = 0.0;  // the smoothed loss has a positive floor
  Rng rng(4);
  TransformerModel model(mc, rng);
  ParallelCorpus train_corpus = one_pair_corpus(10);
  TrainConfig cfg;
  cfg.max_epochs = 200;
  cfg.patience = 200;
  cfg.max_tokens_per_batch = 200;
  cfg.adam.peak_lr = 5e-3;
  cfg.adam.warmup_steps = 20;
  cfg.seed = 5;

  const double initial_loss = model.pair_loss({4, 5, 6}, {7, 8}, nullptr).value();
  TrainResult res = train(model, train_corpus, one_pair_corpus(1), cfg);
  const double final_loss = model.pair_loss({4, 5, 6}, {7, 8}, nullptr).value();
  CHECK(final_loss < 0.1 * initial_loss);

  // the overfit model assigns the pair a total log-probability above -0.5
  CHECK(model.score_sequence({4, 5, 6}, {7, 8, kEosId}) > -0.5);
  CHECK(res.best_valid_ppl < 1.5);
}

TEST_CASE("overfit language model reaches perplexity below 1.5") {
  TransformerConfig cfg = tiny_config(10);
  cfg.n_enc_layers = 0;
  cfg.label_smoothing = 0.0;
  Rng rng(6);
  TransformerModel lm(cfg, rng);
  MonoCorpus corpus;
  for (int i = 0; i < 10; ++i) corpus.sentences.push_back({4, 7, 8, 5});
  TrainConfig tc;
  tc.max_epochs = 200;
  tc.patience = 200;
  tc.adam.peak_lr = 5e-3;
  tc.adam.warmup_steps = 20;
  tc.seed = 7;
  train_lm(lm, corpus, corpus, tc);
  CHECK(lm_valid_perplexity(lm, corpus) < 1.5);
}

TEST_CASE("divergence reports the failing update") {
  Rng rng(8);
  TransformerModel model(tiny_config(10), rng);
  detail::TrainProblem problem;
  problem.name = "nan";
  problem.lengths = {2, 2};
  problem.target_tokens = {3, 3};
  Tensor dummy = Tensor::zeros({1}, true);
  int calls = 0;
  problem.loss_fn = [&](size_t, Rng*) {
    if (++calls >= 2) return Tensor::scalar(std::nan(""));
    return sum(mul(dummy, dummy));
  };
  problem.valid_ppl_fn = [] { return 10.0; };
  TrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.max_tokens_per_batch = 2;  // one sentence per batch
  try {
    detail::run_training(model, {dummy}, problem, cfg, [] { return Checkpoint{}; });
    FAIL("expected training error");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("update 2") != std::string::npos);
  }
}

TEST_CASE("training is deterministic under a fixed seed") {
  auto run = [] {
    Rng rng(11);
    TransformerModel model(tiny_config(10), rng);
    ParallelCorpus corpus;
    Rng gen(12);
    for (int i = 0; i < 12; ++i) {
      std::vector<int> f(2 + gen.uniform_int(3));
      std::vector<int> e(2 + gen.uniform_int(3));
      for (auto& t : f) t = 4 + static_cast<int>(gen.uniform_int(6));
      for (auto& t : e) t = 4 + static_cast<int>(gen.uniform_int(6));
      corpus.pairs.push_back({f, e});
    }
    TransformerConfig mc = tiny_config(10);
    mc.dropout = 0.1;  // exercise the dropout stream too
    Rng rng2(11);
    TransformerModel m2(mc, rng2);
    TrainConfig cfg;
    cfg.max_epochs = 2;
    cfg.patience = 5;
    cfg.seed = 13;
    train(m2, corpus, corpus, cfg);
    return m2.to_checkpoint();
  };
  Checkpoint a = run();
  Checkpoint b = run();
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (size_t i = 0; i < a.tensors.size(); ++i)
    CHECK(a.tensors[i].second.data() == b.tensors[i].second.data());
}
