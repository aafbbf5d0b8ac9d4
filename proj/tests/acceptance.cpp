// Acceptance gate: one test per criterion, each printing a single
// "CRITERION n: PASS/FAIL/SKIPPED" line.  Criteria that need the real
// AG News corpus read it from $DBEAN_AGNEWS_DIR (train.csv / test.csv);
// the bag-of-means comparison additionally needs $DBEAN_WORD2VEC.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dbean/baselines.hpp"
#include "dbean/harness.hpp"
#include "dbean/model.hpp"
#include "dbean/tensor.hpp"
#include "dbean/text.hpp"
#include "dbean/trainer.hpp"
#include "dbean/ttt.hpp"
#include "synthetic.hpp"

using namespace dbean;

namespace {

const char* agnews_dir() { return std::getenv("DBEAN_AGNEWS_DIR"); }
const char* word2vec_path() { return std::getenv("DBEAN_WORD2VEC"); }

void verdict(int n, bool ok, const std::string& detail) {
  std::cout << "CRITERION " << n << ": " << (ok ? "PASS" : "FAIL") << " ("
            << detail << ")" << std::endl;
}

void skipped(int n, const std::string& why) {
  std::cout << "CRITERION " << n << ": SKIPPED (" << why << ")" << std::endl;
}

struct AgNewsData {
  std::vector<AgNewsRecord> train;
  std::vector<AgNewsRecord> test;
};

AgNewsData load_real_data() {
  const std::string dir = agnews_dir();
  AgNewsData d;
  d.train = load_agnews_csv(dir + "/train.csv", true);
  d.test = load_agnews_csv(dir + "/test.csv", true);
  return d;
}

std::vector<std::vector<std::string>> word_docs(
    const std::vector<AgNewsRecord>& records) {
  std::vector<std::vector<std::string>> docs;
  docs.reserve(records.size());
  for (const auto& rec : records) {
    docs.push_back(split_whitespace(clean_text(rec.text())));
  }
  return docs;
}

double run_count_baseline(const AgNewsData& d, bool use_tfidf) {
  auto train_docs = word_docs(d.train);
  auto test_docs = word_docs(d.test);
  auto vocab = build_bow_vocab(train_docs, 50000);
  std::vector<SparseVec> train_feats, test_feats;
  train_feats.reserve(train_docs.size());
  test_feats.reserve(test_docs.size());
  for (const auto& doc : train_docs) train_feats.push_back(bow_featurize(doc, vocab));
  for (const auto& doc : test_docs) test_feats.push_back(bow_featurize(doc, vocab));
  if (use_tfidf) {
    TfidfTransform tfidf;
    tfidf.fit(train_feats, vocab.size());
    for (auto& f : train_feats) f = tfidf.transform(f);
    for (auto& f : test_feats) f = tfidf.transform(f);
  }
  std::vector<std::int32_t> train_labels, test_labels;
  for (const auto& r : d.train) train_labels.push_back(r.label);
  for (const auto& r : d.test) test_labels.push_back(r.label);
  auto model = logreg_train(train_feats, train_labels, vocab.size(), 4,
                            /*epochs=*/5, /*lr=*/0.5f, /*seed=*/7);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_feats.size(); ++i) {
    if (static_cast<std::int32_t>(model.predict(test_feats[i])) == test_labels[i]) {
      ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test_feats.size());
}

// Cache the expensive full-corpus runs so criteria 1 and 2 share them.
double full_bow_accuracy() {
  static double acc = -1.0;
  if (acc < 0.0) acc = run_count_baseline(load_real_data(), false);
  return acc;
}

double full_tfidf_accuracy() {
  static double acc = -1.0;
  if (acc < 0.0) acc = run_count_baseline(load_real_data(), true);
  return acc;
}

std::vector<TokenizedExample> tokenize_records(
    const std::vector<AgNewsRecord>& records, const Vocabulary& vocab,
    std::size_t max_len) {
  BpeEncoder encoder(vocab);
  std::vector<TokenizedExample> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    out.push_back(pad_truncate(encoder.encode(clean_text(rec.text())), rec.label,
                               vocab.pad_id, max_len));
  }
  return out;
}

}  // namespace

TEST_CASE("criterion 1: bag-of-words accuracy on the full corpus") {
  if (!agnews_dir()) {
    skipped(1, "DBEAN_AGNEWS_DIR not set; full corpus unavailable");
    SKIP("corpus unavailable");
  }
  const double acc = full_bow_accuracy();
  const bool ok = acc >= 0.8731 && acc <= 0.9031;
  verdict(1, ok, "accuracy " + std::to_string(acc) + ", target 0.8881 +/- 0.015");
  CHECK(ok);
}

TEST_CASE("criterion 2: tf-idf accuracy and ordering vs bag-of-words") {
  if (!agnews_dir()) {
    skipped(2, "DBEAN_AGNEWS_DIR not set; full corpus unavailable");
    SKIP("corpus unavailable");
  }
  const double bow = full_bow_accuracy();
  const double tfidf = full_tfidf_accuracy();
  const bool ok = tfidf >= 0.8814 && tfidf <= 0.9114 && tfidf > bow;
  verdict(2, ok, "tfidf " + std::to_string(tfidf) + " vs bow " +
                     std::to_string(bow) + ", target 0.8964 +/- 0.015 and > bow");
  CHECK(ok);
}

TEST_CASE("criterion 3: bag-of-means ranks below bag-of-words") {
  if (!agnews_dir() || !word2vec_path()) {
    skipped(3, "needs DBEAN_AGNEWS_DIR and DBEAN_WORD2VEC");
    SKIP("corpus or embeddings unavailable");
  }
  auto d = load_real_data();
  auto train_docs = word_docs(d.train);
  auto test_docs = word_docs(d.test);

  std::unordered_map<std::string, std::int64_t> freq;
  for (const auto& doc : train_docs)
    for (const auto& w : doc) ++freq[w];
  std::vector<std::string> embedded;
  for (const auto& [w, c] : freq)
    if (c > 5) embedded.push_back(w);
  std::sort(embedded.begin(), embedded.end());

  Vocabulary wvocab;
  wvocab.add(kPadToken);
  wvocab.add(kUnkToken);
  for (const auto& w : embedded) wvocab.add(w);
  auto emb = load_word2vec_text<float>(word2vec_path(), wvocab, 300, 7);

  Tensor2D<float> vectors(embedded.size(), 300);
  for (std::size_t i = 0; i < embedded.size(); ++i) {
    const auto row = static_cast<std::size_t>(wvocab.lookup(embedded[i]));
    std::copy(&emb.data[row * 300], &emb.data[row * 300] + 300,
              &vectors.data[i * 300]);
  }
  auto km = kmeans_fit(vectors, 5000, 7);
  std::unordered_map<std::string, std::uint32_t> word_cluster;
  for (std::size_t i = 0; i < embedded.size(); ++i) {
    word_cluster[embedded[i]] = km.assign(&vectors.data[i * 300]);
  }
  const std::size_t k = km.centroids.rows;
  std::vector<SparseVec> train_feats, test_feats;
  for (const auto& doc : train_docs)
    train_feats.push_back(bom_featurize(doc, word_cluster, k));
  for (const auto& doc : test_docs)
    test_feats.push_back(bom_featurize(doc, word_cluster, k));
  std::vector<std::int32_t> train_labels, test_labels;
  for (const auto& r : d.train) train_labels.push_back(r.label);
  for (const auto& r : d.test) test_labels.push_back(r.label);
  auto model = logreg_train(train_feats, train_labels, k, 4, 5, 0.5f, 7);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_feats.size(); ++i) {
    if (static_cast<std::int32_t>(model.predict(test_feats[i])) == test_labels[i]) {
      ++correct;
    }
  }
  const double bom = static_cast<double>(correct) / static_cast<double>(test_feats.size());
  const double bow = full_bow_accuracy();
  const bool ok = bom < bow;
  verdict(3, ok, "bom " + std::to_string(bom) + " < bow " + std::to_string(bow));
  CHECK(ok);
}

TEST_CASE("criterion 4a: finite-difference gradient check") {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig mc;
  mc.vocab_size = 10;
  mc.embed_dim = 3;
  mc.hidden = 4;
  mc.att_hidden = 2;
  mc.max_len = 8;
  ModelParams<double> params(mc, 5);
  auto ex = pad_truncate({3, 9, 1, 4, 6}, 2, 0, mc.max_len);
  const double ssl_weight = 0.1;
  params.ensure_grads();
  auto tr = forward(ex, params);
  backward(tr, ex, 2, params, 1.0, ssl_weight);
  auto report = finite_diff_grad_check<double>(
      [&]() { return total_loss(ex, params, 2, ssl_weight); },
      params.param_list(), 1e-5);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool ok = report.max_relative_error <= 1e-4 && secs < 10.0;
  verdict(4, ok, "4a gradcheck max rel err " +
                     std::to_string(report.max_relative_error) + " in " +
                     std::to_string(secs) + "s");
  CHECK(ok);
}

TEST_CASE("criterion 4b: 64-example overfit sanity") {
  const auto t0 = std::chrono::steady_clock::now();
  auto corpus = testutil::make_synthetic(16, 32, 41);  // 64 balanced examples
  ModelConfig mc;
  mc.vocab_size = corpus.vocab_size;
  mc.embed_dim = 16;
  mc.hidden = 64;
  mc.att_hidden = 32;
  mc.max_len = 32;
  TrainConfig tc;
  tc.epochs = 300;
  tc.batch_size = 8;
  tc.lr_initial = 0.05f;
  tc.lr_decay = 0.995f;
  tc.seed = 41;
  TrainState state(mc, tc);
  std::size_t epochs_used = 0;
  double train_acc = 0.0;
  for (std::size_t e = 0; e < tc.epochs; ++e) {
    auto summary = train_epoch(state, corpus.examples, tc);
    ++epochs_used;
    train_acc = summary.train_accuracy;
    if (train_acc == 1.0) break;
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool ok = train_acc == 1.0 && secs < 300.0;
  verdict(4, ok, "4b overfit reached " + std::to_string(train_acc) + " after " +
                     std::to_string(epochs_used) + " epochs in " +
                     std::to_string(secs) + "s");
  CHECK(ok);
}

TEST_CASE("criterion 4c: desk-scale run vs same-subset bag-of-words") {
  if (!agnews_dir()) {
    skipped(4, "4c needs DBEAN_AGNEWS_DIR for the 3k-per-class subset");
    SKIP("corpus unavailable");
  }
  auto d = load_real_data();
  auto subset = subsample(d.train, 3000, 11);

  std::vector<std::string> corpus;
  corpus.reserve(subset.size());
  for (const auto& rec : subset) corpus.push_back(clean_text(rec.text()));
  auto vocab = bpe_train(corpus, 2000);

  TrainConfig tc;
  tc.epochs = 5;
  tc.seed = 11;
  auto train_examples = tokenize_records(subset, vocab, tc.max_len);
  auto test_examples = tokenize_records(d.test, vocab, tc.max_len);
  ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.embed_dim = tc.embed_dim;
  mc.hidden = tc.hidden;
  mc.att_hidden = tc.att_hidden;
  mc.max_len = tc.max_len;
  TrainState state(mc, tc);
  for (std::size_t e = 0; e < tc.epochs; ++e) train_epoch(state, train_examples, tc);
  auto report = evaluate(state.params, test_examples);

  AgNewsData sub{subset, d.test};
  const double bow = run_count_baseline(sub, false);
  const bool ok = report.accuracy >= 0.60;
  const bool soft = report.accuracy >= bow - 0.01;
  verdict(4, ok, "4c model " + std::to_string(report.accuracy) + " vs subset bow " +
                     std::to_string(bow) +
                     (soft ? "" : " [soft expectation missed]"));
  CHECK(ok);
}

TEST_CASE("criterion 5: test-time adaptation invariants over a full pass") {
  auto corpus = testutil::make_synthetic(8, 16, 51);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 8;
  tc.seed = 51;
  ModelConfig mc;
  mc.vocab_size = corpus.vocab_size;
  mc.embed_dim = 8;
  mc.hidden = 8;
  mc.att_hidden = 4;
  mc.max_len = 16;
  TrainState state(mc, tc);
  for (std::size_t e = 0; e < tc.epochs; ++e) train_epoch(state, corpus.examples, tc);

  // (i) byte-identical parameters around every example
  bool restore_ok = true;
  {
    AdaptConfig cfg;
    cfg.steps = 2;
    cfg.lr = 1e-3f;
    auto report = adapt_evaluate(state.params, corpus.examples, cfg);
    restore_ok = report.restore_verified && report.n_fallback == 0;
  }
  // (ii) steps=0 equals plain inference
  bool zero_ok = true;
  {
    AdaptConfig cfg;
    cfg.steps = 0;
    for (const auto& ex : corpus.examples) {
      auto [probs, summary] = adapt_and_classify(ex, state.params, cfg);
      if (probs != forward(ex, state.params).probs || summary.adapted) {
        zero_ok = false;
        break;
      }
    }
  }
  // (iii) non-increasing self-supervised loss across the 2 steps with a
  // halving-search learning rate, on at least 95% of examples
  std::size_t eligible = 0, descended = 0;
  for (const auto& ex : corpus.examples) {
    if (ex.true_len < 2) continue;
    ++eligible;
    for (float lr = 1e-2f; lr >= 1e-6f; lr *= 0.5f) {
      AdaptConfig cfg;
      cfg.steps = 2;
      cfg.lr = lr;
      auto [probs, summary] = adapt_and_classify(ex, state.params, cfg);
      (void)probs;
      if (summary.adapted && summary.ssl_losses.size() == 2 &&
          summary.ssl_losses[1] <= summary.ssl_losses[0] &&
          summary.ssl_loss_after <= summary.ssl_losses[1]) {
        ++descended;
        break;
      }
    }
  }
  const double frac = eligible == 0
                          ? 0.0
                          : static_cast<double>(descended) / static_cast<double>(eligible);
  const bool ok = restore_ok && zero_ok && frac >= 0.95;
  verdict(5, ok, std::string("restore ") + (restore_ok ? "ok" : "BROKEN") +
                     ", steps=0 " + (zero_ok ? "exact" : "DIFFERS") +
                     ", descent fraction " + std::to_string(frac));
  CHECK(ok);
}

TEST_CASE("criterion 6: forward cost grows at most linearly in length") {
  ModelConfig mc;
  mc.vocab_size = 50;
  mc.embed_dim = 32;
  mc.hidden = 128;
  mc.att_hidden = 32;
  mc.max_len = 512;
  ModelParams<float> params(mc, 1);
  Rng rng(6);
  auto median_time = [&](std::size_t len) {
    std::vector<std::int32_t> ids(len);
    for (auto& id : ids) id = 2 + static_cast<std::int32_t>(rng.below(48));
    auto ex = pad_truncate(ids, 0, 0, mc.max_len);
    std::vector<double> times;
    for (int i = 0; i < 100; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      auto tr = forward(ex, params);
      const auto t1 = std::chrono::steady_clock::now();
      REQUIRE(std::isfinite(static_cast<double>(tr.probs[0])));
      times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
  };
  const double t256 = median_time(256);
  const double t512 = median_time(512);
  const double ratio = t512 / t256;
  const bool ok = ratio <= 2.4;
  verdict(6, ok, "median T=512 / T=256 ratio " + std::to_string(ratio));
  CHECK(ok);
}

TEST_CASE("criterion 7: identical configs reproduce every number bit-for-bit") {
  auto run_once = [](const std::string& ckpt_path) {
    auto corpus = testutil::make_synthetic(8, 16, 71);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 8;
    tc.seed = 71;
    ModelConfig mc;
    mc.vocab_size = corpus.vocab_size;
    mc.embed_dim = 8;
    mc.hidden = 8;
    mc.att_hidden = 4;
    mc.max_len = 16;
    TrainState state(mc, tc);
    for (std::size_t e = 0; e < tc.epochs; ++e) train_epoch(state, corpus.examples, tc);
    auto report = evaluate(state.params, corpus.examples);
    save_checkpoint(state, ckpt_path, "acc7");
    return std::make_tuple(state.loss_history, report.accuracy, report.confusion);
  };
  auto [loss_a, acc_a, conf_a] = run_once("acc7_a.ckpt");
  auto [loss_b, acc_b, conf_b] = run_once("acc7_b.ckpt");

  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const bool bytes_equal = slurp("acc7_a.ckpt") == slurp("acc7_b.ckpt");
  std::remove("acc7_a.ckpt");
  std::remove("acc7_b.ckpt");
  const bool ok = loss_a == loss_b && acc_a == acc_b && conf_a == conf_b &&
                  bytes_equal;
  verdict(7, ok, std::string("losses/accuracy/confusion/checkpoint ") +
                     (ok ? "all bit-identical" : "MISMATCH"));
  CHECK(ok);
}

TEST_CASE("criterion 8: invariant suite") {
  bool ok = true;
  std::string detail;

  // attention and probability normalization within 1e-6
  {
    ModelConfig mc;
    mc.vocab_size = 30;
    mc.embed_dim = 8;
    mc.hidden = 8;
    mc.att_hidden = 4;
    mc.max_len = 16;
    ModelParams<float> params(mc, 81);
    Rng rng(82);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::int32_t> ids(1 + rng.below(15));
      for (auto& id : ids) id = 2 + static_cast<std::int32_t>(rng.below(28));
      auto ex = pad_truncate(ids, 0, 0, mc.max_len);
      auto tr = forward(ex, params);
      double att_sum = 0.0, prob_sum = 0.0;
      for (std::size_t t = 0; t < tr.true_len; ++t) att_sum += tr.att[t];
      for (float p : tr.probs) prob_sum += p;
      if (std::abs(att_sum - 1.0) > 1e-6 || std::abs(prob_sum - 1.0) > 1e-6) {
        ok = false;
        detail += " normalization";
        break;
      }
    }
  }
  // shared recurrence weights: one matrix drives both directions
  {
    ModelConfig mc;
    mc.vocab_size = 10;
    mc.embed_dim = 4;
    mc.hidden = 4;
    mc.att_hidden = 2;
    mc.max_len = 8;
    ModelParams<float> params(mc, 83);
    auto names_ok = [&]() {
      std::size_t w_count = 0;
      for (const auto& p : params.param_list()) {
        if (std::string(p.name).rfind("W_f", 0) == 0 ||
            std::string(p.name).rfind("W_b", 0) == 0) {
          return false;  // separate per-direction matrices would break sharing
        }
        if (std::string(p.name) == "W") ++w_count;
      }
      return w_count == 1;
    }();
    // perturbing the single matrix must change both passes; bump a weight on
    // an input column so every timestep of both directions sees it
    auto ex = pad_truncate({3, 4, 5}, 0, 0, mc.max_len);
    auto base = forward(ex, params);
    params.W.at(0, static_cast<std::size_t>(mc.hidden)) += 0.5f;
    auto bumped = forward(ex, params);
    const bool both_moved = base.h_f != bumped.h_f && base.h_b != bumped.h_b;
    if (!names_ok || !both_moved) {
      ok = false;
      detail += " weight-sharing";
    }
  }
  // padded positions contribute zero gradient to their embedding rows
  {
    ModelConfig mc;
    mc.vocab_size = 12;
    mc.embed_dim = 4;
    mc.hidden = 4;
    mc.att_hidden = 2;
    mc.max_len = 8;
    ModelParams<float> params(mc, 84);
    params.ensure_grads();
    params.zero_grads();
    auto ex = pad_truncate({4, 7, 9}, 1, 0, mc.max_len);
    auto tr = forward(ex, params);
    backward(tr, ex, 1, params, 1.0f, 0.1f);
    for (std::size_t col = 0; col < static_cast<std::size_t>(mc.embed_dim); ++col) {
      if (params.embedding.grad[0 * mc.embed_dim + col] != 0.0f ||
          params.embedding.grad[11 * mc.embed_dim + col] != 0.0f) {
        ok = false;
        detail += " pad-gradient";
        break;
      }
    }
  }
  // k-means inertia never increases across Lloyd iterations
  {
    Rng rng(85);
    Tensor2D<float> pts(60, 3);
    for (auto& v : pts.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    auto km = kmeans_fit(pts, 6, 85);
    for (std::size_t i = 1; i < km.inertia_trace.size(); ++i) {
      if (km.inertia_trace[i] > km.inertia_trace[i - 1] + 1e-9) {
        ok = false;
        detail += " kmeans-inertia";
        break;
      }
    }
  }
  // checkpoint roundtrip is bit-exact
  {
    ModelConfig mc;
    mc.vocab_size = 10;
    mc.embed_dim = 4;
    mc.hidden = 4;
    mc.att_hidden = 2;
    mc.max_len = 8;
    TrainConfig tc;
    tc.seed = 86;
    TrainState state(mc, tc);
    save_checkpoint(state, "acc8.ckpt", "acc8");
    auto loaded = load_checkpoint("acc8.ckpt");
    std::remove("acc8.ckpt");
    auto a = state.params.param_list();
    auto b = loaded.params.param_list();
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (std::memcmp(a[i].tensor->data.data(), b[i].tensor->data.data(),
                      a[i].tensor->data.size() * sizeof(float)) != 0) {
        ok = false;
        detail += " checkpoint-roundtrip";
        break;
      }
    }
  }
  verdict(8, ok, ok ? "all invariants hold" : "failing:" + detail);
  CHECK(ok);
}
