#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "dbean/trainer.hpp"
#include "dbean/ttt.hpp"
#include "synthetic.hpp"

using namespace dbean;

namespace {

ModelConfig small_model(std::int32_t vocab) {
  ModelConfig mc;
  mc.vocab_size = vocab;
  mc.embed_dim = 8;
  mc.hidden = 8;
  mc.att_hidden = 4;
  mc.max_len = 16;
  return mc;
}

// A lightly trained model so adaptation operates on non-degenerate weights.
TrainState trained_state(const testutil::SyntheticCorpus& corpus,
                         std::uint64_t seed) {
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 8;
  tc.lr_initial = 0.05f;
  tc.seed = seed;
  TrainState state(small_model(corpus.vocab_size), tc);
  for (std::size_t e = 0; e < tc.epochs; ++e) train_epoch(state, corpus.examples, tc);
  return state;
}

}  // namespace

TEST_CASE("steps=0 equals plain inference exactly") {
  auto corpus = testutil::make_synthetic(4, 16, 21);
  auto state = trained_state(corpus, 21);
  AdaptConfig cfg;
  cfg.steps = 0;
  cfg.lr = 0.01f;
  for (const auto& ex : corpus.examples) {
    auto [probs, summary] = adapt_and_classify(ex, state.params, cfg);
    auto plain = forward(ex, state.params).probs;
    CHECK(probs == plain);
    CHECK_FALSE(summary.adapted);
  }
}

TEST_CASE("parameters are byte-identical before and after every example") {
  auto corpus = testutil::make_synthetic(4, 16, 22);
  auto state = trained_state(corpus, 22);
  AdaptConfig cfg;
  cfg.steps = 2;
  cfg.lr = 0.01f;
  for (const auto& ex : corpus.examples) {
    ParamSnapshot<float> before(state.params);
    auto emb_before = state.params.embedding.data;
    adapt_and_classify(ex, state.params, cfg);
    CHECK(before.matches(state.params));
    CHECK(emb_before == state.params.embedding.data);
  }
}

TEST_CASE("embedding bytes never change even mid-adaptation") {
  auto corpus = testutil::make_synthetic(2, 16, 23);
  auto state = trained_state(corpus, 23);
  auto emb = state.params.embedding.data;
  const auto& ex = corpus.examples.front();
  REQUIRE(ex.true_len >= 2);
  // run the update steps without restoring and inspect the table directly
  ssl_grad_step(ex, state.params, 0.01f, 5.0f);
  ssl_grad_step(ex, state.params, 0.01f, 5.0f);
  CHECK(emb == state.params.embedding.data);
}

TEST_CASE("short sequences skip adaptation as a defined no-op") {
  auto corpus = testutil::make_synthetic(2, 16, 24);
  auto state = trained_state(corpus, 24);
  TokenizedExample ex = pad_truncate({5}, 1, 0, 16);
  AdaptConfig cfg;
  cfg.steps = 2;
  cfg.lr = 0.01f;
  auto [probs, summary] = adapt_and_classify(ex, state.params, cfg);
  CHECK_FALSE(summary.adapted);
  CHECK(probs == forward(ex, state.params).probs);
}

TEST_CASE("ssl loss is non-increasing across the two steps for small lr") {
  auto corpus = testutil::make_synthetic(6, 16, 25);
  auto state = trained_state(corpus, 25);
  for (const auto& ex : corpus.examples) {
    if (ex.true_len < 2) continue;
    // halving search for a learning rate that descends
    bool descended = false;
    for (float lr = 1e-2f; lr >= 1e-6f; lr *= 0.5f) {
      AdaptConfig cfg;
      cfg.steps = 2;
      cfg.lr = lr;
      auto [probs, summary] = adapt_and_classify(ex, state.params, cfg);
      (void)probs;
      if (summary.adapted && summary.ssl_losses.size() == 2 &&
          summary.ssl_losses[1] <= summary.ssl_losses[0] &&
          summary.ssl_loss_after <= summary.ssl_losses[1]) {
        descended = true;
        break;
      }
    }
    CHECK(descended);
  }
}

TEST_CASE("adapt_evaluate") {
  auto corpus = testutil::make_synthetic(5, 16, 26);
  auto state = trained_state(corpus, 26);

  SECTION("steps=0 gives identical accuracies") {
    AdaptConfig cfg;
    cfg.steps = 0;
    auto report = adapt_evaluate(state.params, corpus.examples, cfg);
    CHECK(report.adapted.accuracy == report.base.accuracy);
    CHECK(report.adapted.confusion == report.base.confusion);
    CHECK(report.restore_verified);
  }
  SECTION("full run restores the model and reports ssl deltas") {
    AdaptConfig cfg;
    cfg.steps = 2;
    cfg.lr = 1e-3f;
    auto report = adapt_evaluate(state.params, corpus.examples, cfg);
    CHECK(report.restore_verified);
    CHECK(report.n_adapted > 0);
    CHECK(report.n_fallback == 0);
    CHECK(std::isfinite(report.mean_ssl_delta));
    CHECK(report.adapted.n_examples == corpus.examples.size());
  }
}

TEST_CASE("non-finite adaptation falls back to the un-adapted output") {
  auto corpus = testutil::make_synthetic(2, 16, 27);
  auto state = trained_state(corpus, 27);
  const auto& ex = corpus.examples.front();
  REQUIRE(ex.true_len >= 2);
  auto plain = forward(ex, state.params).probs;
  AdaptConfig cfg;
  cfg.steps = 2;
  cfg.lr = std::numeric_limits<float>::infinity();  // forces a blow-up
  cfg.clip_norm = 0.0f;                             // disable clipping
  auto [probs, summary] = adapt_and_classify(ex, state.params, cfg);
  CHECK(summary.fell_back);
  CHECK_FALSE(summary.adapted);
  CHECK(probs == plain);
  ParamSnapshot<float> now(state.params);
  CHECK(now.matches(state.params));
}
