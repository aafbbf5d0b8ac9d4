#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dbean/harness.hpp"
#include "dbean/model.hpp"
#include "dbean/rng.hpp"
#include "dbean/tensor.hpp"
#include "dbean/text.hpp"

namespace dbean {

inline constexpr const char* kCheckpointMagic = "DBEAN-CKPT-1";

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  float lr_initial = 0.05f;
  float lr_decay = 0.9f;  // multiplicative per epoch
  float clip_norm = 5.0f;
  std::uint64_t seed = 0;
  float ssl_weight = 0.1f;
  std::size_t hidden = 128;
  std::size_t att_hidden = 64;
  std::size_t embed_dim = 300;
  std::size_t max_len = 512;

  void validate() const {
    if (lr_initial <= 0.0f) throw std::invalid_argument("lr_initial must be > 0");
    if (lr_decay <= 0.0f || lr_decay > 1.0f)
      throw std::invalid_argument("lr_decay must be in (0, 1]");
    if (ssl_weight < 0.0f) throw std::invalid_argument("ssl_weight must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be > 0");
  }
};

struct EpochSummary {
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
};

struct TrainState {
  ModelParams<float> params;
  std::size_t epoch = 0;
  float current_lr = 0.0f;
  Rng rng;
  std::vector<double> loss_history;  // one mean loss per epoch

  TrainState() = default;
  TrainState(const ModelConfig& mc, const TrainConfig& tc)
      : params(mc, tc.seed), current_lr(tc.lr_initial), rng(tc.seed ^ 0x9e3779b97f4a7c15ull) {}
};

inline float final_learning_rate(const TrainConfig& cfg) {
  if (cfg.epochs == 0) throw std::invalid_argument("final_learning_rate: epochs == 0");
  return cfg.lr_initial *
         static_cast<float>(std::pow(static_cast<double>(cfg.lr_decay),
                                     static_cast<double>(cfg.epochs - 1)));
}

// One seeded-shuffle pass: per batch forward/backward with mean scaling, then
// a clipped SGD step at the current learning rate.
inline EpochSummary train_epoch(TrainState& state,
                                const std::vector<TokenizedExample>& data,
                                const TrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train_epoch: empty data");
  state.current_lr =
      cfg.lr_initial * static_cast<float>(std::pow(
                           static_cast<double>(cfg.lr_decay),
                           static_cast<double>(state.epoch)));

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  state.rng.shuffle(order);

  auto param_list = state.params.param_list();
  state.params.ensure_grads();

  double loss_sum = 0.0;
  std::size_t correct = 0, seen = 0, batch_index = 0;
  for (std::size_t start = 0; start < order.size();
       start += cfg.batch_size, ++batch_index) {
    const std::size_t end = std::min(start + cfg.batch_size, order.size());
    const float inv = 1.0f / static_cast<float>(end - start);
    double batch_loss = 0.0;
    for (std::size_t k = start; k < end; ++k) {
      const TokenizedExample& ex = data[order[k]];
      ForwardTrace<float> tr = forward(ex, state.params);
      const auto label = static_cast<std::size_t>(ex.label);
      double loss = static_cast<double>(cross_entropy(tr.probs, label));
      if (cfg.ssl_weight > 0.0f && ex.true_len >= 2) {
        loss += static_cast<double>(cfg.ssl_weight) *
                static_cast<double>(ssl_loss_from_states(ex, state.params, tr.h_b));
      }
      batch_loss += loss;
      std::size_t pred = 0;
      for (std::size_t c = 1; c < tr.probs.size(); ++c)
        if (tr.probs[c] > tr.probs[pred]) pred = c;
      if (pred == label) ++correct;
      backward(tr, ex, label, state.params, inv, cfg.ssl_weight * inv);
    }
    batch_loss /= (end - start);
    if (!std::isfinite(batch_loss)) {
      throw std::runtime_error("train_epoch: non-finite loss in batch " +
                               std::to_string(batch_index));
    }
    loss_sum += batch_loss * (end - start);
    seen += end - start;
    sgd_step(param_list, state.current_lr, cfg.clip_norm);
  }

  EpochSummary summary;
  summary.mean_loss = loss_sum / static_cast<double>(seen);
  summary.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
  state.loss_history.push_back(summary.mean_loss);
  ++state.epoch;
  return summary;
}

template <typename S>
std::size_t predict_class(const TokenizedExample& ex, const ModelParams<S>& params) {
  ForwardTrace<S> tr = forward(ex, params);
  std::size_t pred = 0;
  for (std::size_t c = 1; c < tr.probs.size(); ++c)
    if (tr.probs[c] > tr.probs[pred]) pred = c;
  return pred;
}

template <typename S>
ClassificationReport evaluate(const ModelParams<S>& params,
                              const std::vector<TokenizedExample>& data) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty data");
  ClassificationReport report;
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& ex : data) {
    report.record(ex.label, static_cast<std::int32_t>(predict_class(ex, params)));
  }
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report.finalize();
  return report;
}

// Checkpoint layout: one JSON header line, then the raw little-endian f32
// payload of every parameter tensor in param_list order.
inline void save_checkpoint(TrainState& state, const std::string& path,
                            const std::string& fingerprint = "") {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);

  auto params = state.params.param_list();
  nlohmann::ordered_json header;
  header["version"] = kCheckpointMagic;
  header["config"] = {{"vocab_size", state.params.cfg.vocab_size},
                      {"embed_dim", state.params.cfg.embed_dim},
                      {"hidden", state.params.cfg.hidden},
                      {"att_hidden", state.params.cfg.att_hidden},
                      {"num_classes", state.params.cfg.num_classes},
                      {"max_len", state.params.cfg.max_len}};
  nlohmann::ordered_json shapes = nlohmann::ordered_json::array();
  for (const auto& p : params) {
    shapes.push_back({{"name", p.name},
                      {"rows", p.tensor->rows},
                      {"cols", p.tensor->cols}});
  }
  header["shapes"] = shapes;
  header["epoch"] = state.epoch;
  header["current_lr"] = state.current_lr;
  header["loss_history"] = state.loss_history;
  header["rng"] = state.rng.serialize();
  header["fingerprint"] = fingerprint;
  out << header.dump() << "\n";

  for (const auto& p : params) {
    static_assert(sizeof(float) == 4);
    out.write(reinterpret_cast<const char*>(p.tensor->data.data()),
              static_cast<std::streamsize>(p.tensor->data.size() * 4));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

inline TrainState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const std::exception&) {
    throw std::runtime_error("checkpoint header is not valid JSON: " + path);
  }
  if (!header.contains("version") || header["version"] != kCheckpointMagic) {
    throw std::runtime_error("bad checkpoint magic in " + path);
  }

  TrainState state;
  auto& cfg = state.params.cfg;
  const auto& jc = header["config"];
  cfg.vocab_size = jc["vocab_size"].get<std::int32_t>();
  cfg.embed_dim = jc["embed_dim"].get<std::size_t>();
  cfg.hidden = jc["hidden"].get<std::size_t>();
  cfg.att_hidden = jc["att_hidden"].get<std::size_t>();
  cfg.num_classes = jc["num_classes"].get<std::size_t>();
  cfg.max_len = jc["max_len"].get<std::size_t>();

  auto params = state.params.param_list();
  const auto& shapes = header["shapes"];
  if (shapes.size() != params.size()) {
    throw std::runtime_error("checkpoint parameter count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& s = shapes[i];
    if (s["name"].get<std::string>() != params[i].name) {
      throw std::runtime_error("checkpoint parameter order mismatch at " +
                               params[i].name);
    }
    *params[i].tensor = Tensor2D<float>(s["rows"].get<std::size_t>(),
                                        s["cols"].get<std::size_t>());
    in.read(reinterpret_cast<char*>(params[i].tensor->data.data()),
            static_cast<std::streamsize>(params[i].tensor->data.size() * 4));
    if (in.gcount() !=
        static_cast<std::streamsize>(params[i].tensor->data.size() * 4)) {
      throw std::runtime_error("truncated checkpoint payload at " +
                               params[i].name);
    }
  }
  state.epoch = header["epoch"].get<std::size_t>();
  state.current_lr = header["current_lr"].get<float>();
  state.loss_history = header["loss_history"].get<std::vector<double>>();
  state.rng.deserialize(header["rng"].get<std::string>());
  return state;
}

}  // namespace dbean
