// Command-line front end: tokenizer training, model training, evaluation,
// test-time-adapted evaluation, classical baselines, gradient checking and
// the forward-scaling benchmark.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dbean/baselines.hpp"
#include "dbean/harness.hpp"
#include "dbean/model.hpp"
#include "dbean/tensor.hpp"
#include "dbean/text.hpp"
#include "dbean/trainer.hpp"
#include "dbean/ttt.hpp"

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json g_file_config;

template <typename T>
void cfg_override(const CLI::Option* opt, const char* key, T& value) {
  if (opt->count() == 0 && g_file_config.contains(key)) {
    value = g_file_config.at(key).get<T>();
  }
}

std::vector<dbean::AgNewsRecord> load_records(const std::string& path,
                                              bool strict) {
  try {
    return dbean::load_agnews_csv(path, strict);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
}

std::vector<dbean::TokenizedExample> tokenize_records(
    const std::vector<dbean::AgNewsRecord>& records,
    const dbean::Vocabulary& vocab, std::size_t max_len) {
  dbean::BpeEncoder encoder(vocab);
  std::vector<dbean::TokenizedExample> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    out.push_back(dbean::pad_truncate(encoder.encode(dbean::clean_text(rec.text())),
                                      rec.label, vocab.pad_id, max_len));
  }
  return out;
}

std::vector<std::vector<std::string>> word_docs(
    const std::vector<dbean::AgNewsRecord>& records) {
  std::vector<std::vector<std::string>> docs;
  docs.reserve(records.size());
  for (const auto& rec : records) {
    docs.push_back(dbean::split_whitespace(dbean::clean_text(rec.text())));
  }
  return docs;
}

void append_run_log(const std::string& path, const ordered_json& line) {
  if (path.empty()) return;
  std::ofstream out(path, std::ios::app);
  out << line.dump() << "\n";
}

int cmd_tokenize_train(const std::string& train_path, std::size_t merges,
                       const std::string& out_path, bool strict) {
  auto records = load_records(train_path, strict);
  std::vector<std::string> corpus;
  corpus.reserve(records.size());
  for (const auto& rec : records) corpus.push_back(dbean::clean_text(rec.text()));
  auto vocab = dbean::bpe_train(corpus, merges);
  dbean::save_vocabulary(vocab, out_path);
  std::cout << "vocabulary: " << vocab.size() << " tokens, "
            << vocab.merges.size() << " merges -> " << out_path << "\n";
  return kExitOk;
}

int cmd_train(const std::string& train_path, const std::string& vocab_path,
              const std::string& out_path, const dbean::TrainConfig& tc,
              std::size_t per_class, const std::string& word2vec_path,
              const std::string& run_log, bool strict,
              const std::string& fingerprint) {
  auto vocab = dbean::load_vocabulary(vocab_path);
  auto records = load_records(train_path, strict);
  if (per_class > 0) records = dbean::subsample(records, per_class, tc.seed);
  auto examples = tokenize_records(records, vocab, tc.max_len);

  dbean::ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.embed_dim = tc.embed_dim;
  mc.hidden = tc.hidden;
  mc.att_hidden = tc.att_hidden;
  mc.max_len = tc.max_len;

  dbean::TrainState state(mc, tc);
  if (!word2vec_path.empty()) {
    state.params.embedding = dbean::load_word2vec_text<float>(
        word2vec_path, vocab, mc.embed_dim, tc.seed);
  }
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    auto summary = dbean::train_epoch(state, examples, tc);
    ordered_json line = {{"epoch", epoch},
                         {"mean_loss", summary.mean_loss},
                         {"train_accuracy", summary.train_accuracy},
                         {"lr", state.current_lr},
                         {"fingerprint", fingerprint}};
    std::cout << line.dump() << "\n";
    append_run_log(run_log, line);
  }
  dbean::save_checkpoint(state, out_path, fingerprint);
  std::cout << "checkpoint -> " << out_path << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& test_path, const std::string& vocab_path,
             const std::string& ckpt_path, const std::string& out_path,
             bool strict, const std::string& fingerprint) {
  auto vocab = dbean::load_vocabulary(vocab_path);
  auto state = dbean::load_checkpoint(ckpt_path);
  auto records = load_records(test_path, strict);
  auto examples = tokenize_records(records, vocab, state.params.cfg.max_len);
  auto report = dbean::evaluate(state.params, examples);
  report.config_fingerprint = fingerprint;
  dbean::emit_report(dbean::report_to_json(report), out_path);
  return kExitOk;
}

int cmd_adapt_eval(const std::string& test_path, const std::string& vocab_path,
                   const std::string& ckpt_path, const std::string& out_path,
                   std::size_t steps, float lr, bool lr_given, bool strict,
                   const std::string& fingerprint) {
  auto vocab = dbean::load_vocabulary(vocab_path);
  auto state = dbean::load_checkpoint(ckpt_path);
  auto records = load_records(test_path, strict);
  auto examples = tokenize_records(records, vocab, state.params.cfg.max_len);

  dbean::AdaptConfig cfg;
  cfg.steps = steps;
  cfg.lr = lr_given ? lr : state.current_lr;  // final rate from training
  auto report = dbean::adapt_evaluate(state.params, examples, cfg);

  ordered_json j;
  j["adapted_accuracy"] = report.adapted.accuracy;
  j["base_accuracy"] = report.base.accuracy;
  j["mean_ssl_delta"] = report.mean_ssl_delta;
  j["restore_verified"] = report.restore_verified;
  j["n_adapted"] = report.n_adapted;
  j["n_fallback"] = report.n_fallback;
  j["adapt_lr"] = cfg.lr;
  j["n_examples"] = report.adapted.n_examples;
  j["config_fingerprint"] = fingerprint;
  dbean::emit_report(j, out_path);
  std::cout << "adapted " << report.adapted.accuracy << " base "
            << report.base.accuracy << " restore_verified "
            << (report.restore_verified ? "true" : "false") << "\n";
  if (!report.restore_verified) return kExitNumeric;
  return kExitOk;
}

int cmd_baseline(const std::string& variant, const std::string& train_path,
                 const std::string& test_path, const std::string& out_path,
                 std::size_t top_k, std::size_t k, std::size_t epochs, float lr,
                 std::uint64_t seed, std::size_t per_class,
                 const std::string& word2vec_path, bool strict,
                 const std::string& fingerprint) {
  auto train_records = load_records(train_path, strict);
  auto test_records = load_records(test_path, strict);
  if (per_class > 0) train_records = dbean::subsample(train_records, per_class, seed);

  const auto t0 = std::chrono::steady_clock::now();
  auto train_docs = word_docs(train_records);
  auto test_docs = word_docs(test_records);
  std::vector<std::int32_t> train_labels, test_labels;
  for (const auto& r : train_records) train_labels.push_back(r.label);
  for (const auto& r : test_records) test_labels.push_back(r.label);

  std::vector<dbean::SparseVec> train_feats, test_feats;
  std::size_t n_features = 0;

  if (variant == "bow" || variant == "tfidf") {
    auto vocab = dbean::build_bow_vocab(train_docs, top_k);
    n_features = vocab.size();
    for (const auto& d : train_docs) train_feats.push_back(dbean::bow_featurize(d, vocab));
    for (const auto& d : test_docs) test_feats.push_back(dbean::bow_featurize(d, vocab));
    if (variant == "tfidf") {
      dbean::TfidfTransform tfidf;
      tfidf.fit(train_feats, n_features);
      for (auto& f : train_feats) f = tfidf.transform(f);
      for (auto& f : test_feats) f = tfidf.transform(f);
    }
  } else {  // bom
    // embed words appearing more than five times in the training set
    std::unordered_map<std::string, std::int64_t> freq;
    for (const auto& d : train_docs)
      for (const auto& w : d) ++freq[w];
    std::vector<std::string> embedded;
    for (const auto& [w, c] : freq)
      if (c > 5) embedded.push_back(w);
    std::sort(embedded.begin(), embedded.end());
    if (embedded.empty()) throw DataError("bom: no word appears more than five times");

    dbean::Vocabulary wvocab;
    wvocab.add(dbean::kPadToken);
    wvocab.add(dbean::kUnkToken);
    for (const auto& w : embedded) wvocab.add(w);
    auto emb = dbean::load_word2vec_text<float>(word2vec_path, wvocab, 300, seed);

    dbean::Tensor2D<float> vectors(embedded.size(), 300);
    for (std::size_t i = 0; i < embedded.size(); ++i) {
      const auto row = static_cast<std::size_t>(wvocab.lookup(embedded[i]));
      std::copy(&emb.data[row * 300], &emb.data[row * 300] + 300,
                &vectors.data[i * 300]);
    }
    auto km = dbean::kmeans_fit(vectors, k, seed);
    std::unordered_map<std::string, std::uint32_t> word_cluster;
    for (std::size_t i = 0; i < embedded.size(); ++i) {
      word_cluster[embedded[i]] = km.assign(&vectors.data[i * 300]);
    }
    n_features = km.centroids.rows;
    for (const auto& d : train_docs)
      train_feats.push_back(dbean::bom_featurize(d, word_cluster, n_features));
    for (const auto& d : test_docs)
      test_feats.push_back(dbean::bom_featurize(d, word_cluster, n_features));
  }

  auto model = dbean::logreg_train(train_feats, train_labels, n_features, 4,
                                   epochs, lr, seed);
  dbean::ClassificationReport report;
  for (std::size_t i = 0; i < test_feats.size(); ++i) {
    report.record(test_labels[i],
                  static_cast<std::int32_t>(model.predict(test_feats[i])));
  }
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report.finalize();
  report.config_fingerprint = fingerprint;
  auto j = dbean::report_to_json(report);
  j["baseline"] = variant;
  dbean::emit_report(j, out_path);
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed) {
  dbean::ModelConfig mc;
  mc.vocab_size = 10;
  mc.embed_dim = 3;
  mc.hidden = 4;
  mc.att_hidden = 2;
  mc.max_len = 8;
  dbean::ModelParams<double> params(mc, seed);
  auto ex = dbean::pad_truncate({3, 9, 1, 4, 6}, 2, 0, mc.max_len);
  const double ssl_weight = 0.1;

  params.ensure_grads();
  auto tr = dbean::forward(ex, params);
  dbean::backward(tr, ex, 2, params, 1.0, ssl_weight);
  auto report = dbean::finite_diff_grad_check<double>(
      [&]() { return dbean::total_loss(ex, params, 2, ssl_weight); },
      params.param_list(), 1e-5);

  std::cout << "gradcheck max relative error " << report.max_relative_error
            << " (worst " << report.worst.name << "[" << report.worst.flat_index
            << "])\n";
  return report.max_relative_error <= 1e-4 ? kExitOk : kExitNumeric;
}

int cmd_bench_scaling(std::size_t trials, std::size_t hidden) {
  dbean::ModelConfig mc;
  mc.vocab_size = 50;
  mc.embed_dim = 32;
  mc.hidden = hidden;
  mc.att_hidden = 32;
  mc.max_len = 512;
  dbean::ModelParams<float> params(mc, 1);
  dbean::Rng rng(2);

  auto time_forward = [&](std::size_t len) {
    std::vector<std::int32_t> ids(len);
    for (auto& id : ids) id = 2 + static_cast<std::int32_t>(rng.below(48));
    auto ex = dbean::pad_truncate(ids, 0, 0, mc.max_len);
    std::vector<double> times;
    times.reserve(trials);
    for (std::size_t i = 0; i < trials; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      auto tr = dbean::forward(ex, params);
      const auto t1 = std::chrono::steady_clock::now();
      if (!std::isfinite(static_cast<double>(tr.probs[0]))) return -1.0;
      times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
  };

  const double t256 = time_forward(256);
  const double t512 = time_forward(512);
  if (t256 <= 0.0 || t512 <= 0.0) return kExitNumeric;
  const double ratio = t512 / t256;
  std::cout << "median forward time T=256 " << t256 << "s T=512 " << t512
            << "s ratio " << ratio << "\n";
  return ratio <= 2.4 ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DBEAN text classification toolkit"};
  app.require_subcommand(1);

  // shared settings
  std::string config_path;
  std::uint64_t seed = 0;
  bool desk = false, strict = false;
  std::string out_path;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path,
                    "JSON config file (flags override)");
    sub->add_option("--seed", seed, "RNG seed");
    sub->add_flag("--desk", desk, "desk-scale defaults");
    sub->add_flag("--strict", strict, "validate official split sizes");
    sub->add_option("--out", out_path, "output path");
  };

  // tokenize-train
  auto* tok = app.add_subcommand("tokenize-train", "train the BPE vocabulary");
  std::string train_path, test_path, vocab_path, ckpt_path, word2vec_path,
      run_log;
  std::size_t merges = 10000;
  add_common(tok);
  tok->add_option("--train", train_path, "training csv")->required();
  auto* opt_merges = tok->add_option("--merges", merges, "BPE merge count");

  // train
  auto* train = app.add_subcommand("train", "train the classifier");
  dbean::TrainConfig tc;
  std::size_t per_class = 0;
  add_common(train);
  train->add_option("--train", train_path, "training csv")->required();
  train->add_option("--vocab", vocab_path, "vocabulary file")->required();
  auto* o_epochs = train->add_option("--epochs", tc.epochs);
  auto* o_batch = train->add_option("--batch-size", tc.batch_size);
  auto* o_lr = train->add_option("--lr", tc.lr_initial);
  auto* o_decay = train->add_option("--lr-decay", tc.lr_decay);
  auto* o_clip = train->add_option("--clip-norm", tc.clip_norm);
  auto* o_ssl = train->add_option("--ssl-weight", tc.ssl_weight);
  auto* o_hidden = train->add_option("--hidden", tc.hidden);
  auto* o_att = train->add_option("--att-hidden", tc.att_hidden);
  auto* o_embed = train->add_option("--embed-dim", tc.embed_dim);
  auto* o_maxlen = train->add_option("--max-len", tc.max_len);
  auto* o_perclass = train->add_option("--per-class", per_class,
                                       "balanced subsample size per class");
  train->add_option("--word2vec", word2vec_path, "pretrained embeddings");
  train->add_option("--run-log", run_log, "per-epoch JSON lines file");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--test", test_path, "test csv")->required();
  eval->add_option("--vocab", vocab_path)->required();
  eval->add_option("--ckpt", ckpt_path)->required();

  // adapt-eval
  auto* adapt = app.add_subcommand("adapt-eval",
                                   "evaluate with test-time adaptation");
  std::size_t steps = 2;
  float adapt_lr = 0.0f;
  add_common(adapt);
  adapt->add_option("--test", test_path)->required();
  adapt->add_option("--vocab", vocab_path)->required();
  adapt->add_option("--ckpt", ckpt_path)->required();
  adapt->add_option("--steps", steps, "adaptation steps");
  auto* o_adapt_lr =
      adapt->add_option("--lr", adapt_lr, "adaptation learning rate "
                                          "(default: final training rate)");

  // baseline
  auto* baseline = app.add_subcommand("baseline", "classical baselines");
  std::string variant;
  std::size_t top_k = 50000, clusters = 5000, lr_epochs = 5;
  float lr_baseline = 0.5f;
  baseline->add_option("variant", variant, "bow | tfidf | bom")
      ->required()
      ->check(CLI::IsMember({"bow", "tfidf", "bom"}));
  add_common(baseline);
  baseline->add_option("--train", train_path)->required();
  baseline->add_option("--test", test_path)->required();
  auto* o_topk = baseline->add_option("--top-k", top_k, "vocabulary size");
  auto* o_k = baseline->add_option("--k", clusters, "cluster count");
  auto* o_bepochs = baseline->add_option("--epochs", lr_epochs);
  auto* o_blr = baseline->add_option("--lr", lr_baseline);
  auto* o_bperclass = baseline->add_option("--per-class", per_class);
  baseline->add_option("--word2vec", word2vec_path);

  // gradcheck / bench-scaling
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check");
  add_common(gradcheck);
  auto* bench = app.add_subcommand("bench-scaling", "forward time vs length");
  std::size_t trials = 100, bench_hidden = 128;
  add_common(bench);
  bench->add_option("--trials", trials);
  bench->add_option("--hidden", bench_hidden);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw DataError("cannot open config: " + config_path);
      g_file_config = json::parse(in);
    }

    // file-config values apply where no flag was given
    cfg_override(opt_merges, "merges", merges);
    cfg_override(o_epochs, "epochs", tc.epochs);
    cfg_override(o_batch, "batch_size", tc.batch_size);
    cfg_override(o_lr, "lr", tc.lr_initial);
    cfg_override(o_decay, "lr_decay", tc.lr_decay);
    cfg_override(o_clip, "clip_norm", tc.clip_norm);
    cfg_override(o_ssl, "ssl_weight", tc.ssl_weight);
    cfg_override(o_hidden, "hidden", tc.hidden);
    cfg_override(o_att, "att_hidden", tc.att_hidden);
    cfg_override(o_embed, "embed_dim", tc.embed_dim);
    cfg_override(o_maxlen, "max_len", tc.max_len);
    cfg_override(o_perclass, "per_class", per_class);
    cfg_override(o_bperclass, "per_class", per_class);
    cfg_override(o_topk, "top_k", top_k);
    cfg_override(o_k, "k", clusters);
    cfg_override(o_bepochs, "epochs", lr_epochs);
    cfg_override(o_blr, "lr", lr_baseline);
    if (g_file_config.contains("seed") &&
        !app.get_subcommands().front()->count("--seed")) {
      seed = g_file_config.at("seed").get<std::uint64_t>();
    }
    tc.seed = seed;
    tc.validate();
    if (desk && o_k->count() == 0 && !g_file_config.contains("k")) {
      clusters = 500;
    }

    ordered_json cfg_json = {{"command", app.get_subcommands().front()->get_name()},
                             {"seed", seed},
                             {"desk", desk},
                             {"strict", strict}};
    for (auto& [key, value] : g_file_config.items()) cfg_json[key] = value;

    if (tok->parsed()) {
      cfg_json["merges"] = merges;
      return cmd_tokenize_train(train_path, merges, out_path, strict);
    }
    if (train->parsed()) {
      cfg_json["epochs"] = tc.epochs;
      cfg_json["batch_size"] = tc.batch_size;
      cfg_json["lr"] = tc.lr_initial;
      cfg_json["lr_decay"] = tc.lr_decay;
      cfg_json["ssl_weight"] = tc.ssl_weight;
      cfg_json["hidden"] = tc.hidden;
      cfg_json["att_hidden"] = tc.att_hidden;
      cfg_json["embed_dim"] = tc.embed_dim;
      cfg_json["max_len"] = tc.max_len;
      cfg_json["per_class"] = per_class;
      return cmd_train(train_path, vocab_path, out_path, tc, per_class,
                       word2vec_path, run_log, strict,
                       dbean::config_fingerprint(cfg_json));
    }
    if (eval->parsed()) {
      return cmd_eval(test_path, vocab_path, ckpt_path, out_path, strict,
                      dbean::config_fingerprint(cfg_json));
    }
    if (adapt->parsed()) {
      cfg_json["steps"] = steps;
      return cmd_adapt_eval(test_path, vocab_path, ckpt_path, out_path, steps,
                            adapt_lr, o_adapt_lr->count() > 0, strict,
                            dbean::config_fingerprint(cfg_json));
    }
    if (baseline->parsed()) {
      cfg_json["variant"] = variant;
      cfg_json["top_k"] = top_k;
      cfg_json["k"] = clusters;
      cfg_json["epochs"] = lr_epochs;
      cfg_json["lr"] = lr_baseline;
      cfg_json["per_class"] = per_class;
      return cmd_baseline(variant, train_path, test_path, out_path, top_k,
                          clusters, lr_epochs, lr_baseline, seed, per_class,
                          word2vec_path, strict,
                          dbean::config_fingerprint(cfg_json));
    }
    if (gradcheck->parsed()) return cmd_gradcheck(seed);
    if (bench->parsed()) return cmd_bench_scaling(trials, bench_hidden);
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
}
