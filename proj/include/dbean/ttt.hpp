#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "dbean/model.hpp"
#include "dbean/tensor.hpp"
#include "dbean/text.hpp"
#include "dbean/trainer.hpp"

namespace dbean {

struct AdaptConfig {
  std::size_t steps = 2;
  float lr = 0.0f;  // callers usually pass final_learning_rate(train_cfg)
  float clip_norm = 5.0f;
};

// Byte-exact copy of the adaptable (non-embedding) parameters.
template <typename S = float>
class ParamSnapshot {
 public:
  explicit ParamSnapshot(ModelParams<S>& params) {
    for (auto& p : params.param_list(/*include_embedding=*/false)) {
      saved_.push_back(p.tensor->data);
    }
  }

  void restore(ModelParams<S>& params) const {
    auto list = params.param_list(false);
    for (std::size_t i = 0; i < list.size(); ++i) list[i].tensor->data = saved_[i];
  }

  bool matches(ModelParams<S>& params) const {
    auto list = params.param_list(false);
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto& a = saved_[i];
      const auto& b = list[i].tensor->data;
      if (a.size() != b.size()) return false;
      if (std::memcmp(a.data(), b.data(), a.size() * sizeof(S)) != 0) return false;
    }
    return true;
  }

 private:
  std::vector<std::vector<S>> saved_;
};

struct AdaptSummary {
  std::vector<double> ssl_losses;  // loss before each update step
  double ssl_loss_after = 0.0;     // loss after the final step
  bool adapted = false;            // false when skipped or fallen back
  bool fell_back = false;          // non-finite adaptation loss
};

// One SGD step on the self-supervised objective; embedding table frozen.
// Returns the loss at the pre-update parameters.
template <typename S>
double ssl_grad_step(const TokenizedExample& ex, ModelParams<S>& params, S lr,
                     S clip_norm) {
  auto h_b = run_backward_path(ex, params);
  const double loss = static_cast<double>(ssl_loss_from_states(ex, params, h_b));
  std::vector<std::vector<S>> d_h_b(ex.true_len,
                                    std::vector<S>(params.cfg.hidden, S(0)));
  ssl_backward_direct(ex, params, h_b, S(1), d_h_b, /*embedding_grads=*/false);
  backward_path_bptt(ex, params, h_b, d_h_b, /*embedding_grads=*/false);
  auto adaptable = params.param_list(false);
  sgd_step(adaptable, lr, clip_norm);
  return loss;
}

// The test-time procedure: forward pass with the original parameters, a short
// self-supervised update on the reversed pass, classification that combines
// the original forward states with the adapted backward states, then byte
// exact restoration of the original parameters.
template <typename S>
std::pair<std::vector<S>, AdaptSummary> adapt_and_classify(
    const TokenizedExample& ex, ModelParams<S>& params, const AdaptConfig& cfg) {
  AdaptSummary summary;

  auto h_f = run_forward_path(ex, params);

  if (cfg.steps == 0 || ex.true_len < 2) {
    ForwardTrace<S> tr;
    tr.true_len = ex.true_len;
    tr.h_f = std::move(h_f);
    tr.h_b = run_backward_path(ex, params);
    tr = finish_forward(ex, params, std::move(tr));
    return {tr.probs, summary};
  }

  ParamSnapshot<S> snapshot(params);
  bool ok = true;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    double loss;
    try {
      loss = ssl_grad_step(ex, params, static_cast<S>(cfg.lr),
                           static_cast<S>(cfg.clip_norm));
    } catch (const std::runtime_error&) {
      ok = false;  // non-finite gradient
      break;
    }
    if (!std::isfinite(loss)) {
      ok = false;
      break;
    }
    summary.ssl_losses.push_back(loss);
  }
  if (ok) {
    summary.ssl_loss_after = static_cast<double>(ssl_loss(ex, params));
    if (!std::isfinite(summary.ssl_loss_after)) ok = false;
  }

  if (!ok) {
    snapshot.restore(params);
    summary.fell_back = true;
    summary.ssl_losses.clear();
    ForwardTrace<S> tr;
    tr.true_len = ex.true_len;
    tr.h_f = std::move(h_f);
    tr.h_b = run_backward_path(ex, params);
    tr = finish_forward(ex, params, std::move(tr));
    return {tr.probs, summary};
  }

  ForwardTrace<S> tr;
  tr.true_len = ex.true_len;
  tr.h_f = std::move(h_f);                       // original forward states
  tr.h_b = run_backward_path(ex, params);        // adapted backward states
  tr = finish_forward(ex, params, std::move(tr));
  snapshot.restore(params);
  summary.adapted = true;
  return {tr.probs, summary};
}

struct AdaptReport {
  ClassificationReport adapted;
  ClassificationReport base;
  double mean_ssl_delta = 0.0;  // mean (first-step loss - post-update loss)
  std::size_t n_adapted = 0;
  std::size_t n_fallback = 0;
  bool restore_verified = false;
};

// Runs the whole test set both ways and verifies the model comes back
// byte-identical.
template <typename S>
AdaptReport adapt_evaluate(ModelParams<S>& params,
                           const std::vector<TokenizedExample>& data,
                           const AdaptConfig& cfg) {
  ParamSnapshot<S> before(params);
  std::vector<S> embedding_before = params.embedding.data;

  AdaptReport report;
  double delta_sum = 0.0;
  for (const auto& ex : data) {
    auto [probs, summary] = adapt_and_classify(ex, params, cfg);
    std::size_t pred = 0;
    for (std::size_t c = 1; c < probs.size(); ++c)
      if (probs[c] > probs[pred]) pred = c;
    report.adapted.record(ex.label, static_cast<std::int32_t>(pred));
    report.base.record(ex.label,
                       static_cast<std::int32_t>(predict_class(ex, params)));
    if (summary.adapted) {
      ++report.n_adapted;
      delta_sum += summary.ssl_losses.front() - summary.ssl_loss_after;
    }
    if (summary.fell_back) ++report.n_fallback;
  }
  report.adapted.finalize();
  report.base.finalize();
  if (report.n_adapted > 0) {
    report.mean_ssl_delta = delta_sum / static_cast<double>(report.n_adapted);
  }
  report.restore_verified =
      before.matches(params) && embedding_before == params.embedding.data;
  return report;
}

}  // namespace dbean
