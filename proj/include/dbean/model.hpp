#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbean/tensor.hpp"
#include "dbean/text.hpp"

namespace dbean {

struct ModelConfig {
  std::int32_t vocab_size = 0;
  std::size_t embed_dim = 300;
  std::size_t hidden = 128;
  std::size_t att_hidden = 64;
  std::size_t num_classes = 4;
  std::size_t max_len = 512;
};

// All DBEAN weights. W is stored exactly once and drives both recurrence
// directions; there is no second copy to drift out of sync.
template <typename S = float>
struct ModelParams {
  ModelConfig cfg;
  Tensor2D<S> W;          // hidden x (hidden + embed_dim), shared both directions
  Tensor2D<S> b_f;        // hidden x 1
  Tensor2D<S> b_b;        // hidden x 1
  Tensor2D<S> W_a;        // 1 x 4*hidden, attention scorer over adjacent fused states
  Tensor2D<S> alpha_raw;  // 1 x 1; the attention scale is exp(alpha_raw)
  Tensor2D<S> W_d;        // att_hidden x (2*hidden + 1)
  Tensor2D<S> W_o;        // num_classes x (2*hidden + att_hidden)
  Tensor2D<S> b_o;        // num_classes x 1
  Tensor2D<S> W_ssl;      // embed_dim x hidden, next-embedding prediction head
  Tensor2D<S> embedding;  // vocab_size x embed_dim

  ModelParams() = default;

  ModelParams(const ModelConfig& c, std::uint64_t seed) : cfg(c) {
    Rng rng(seed);
    auto init = [&](std::size_t r, std::size_t cols, std::size_t fan_in) {
      const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
      return Tensor2D<S>::random_uniform(r, cols, static_cast<S>(-b),
                                         static_cast<S>(b), rng);
    };
    const std::size_t h = c.hidden, d = c.embed_dim, ha = c.att_hidden,
                      nc = c.num_classes;
    W = init(h, h + d, h + d);
    b_f = Tensor2D<S>(h, 1);
    b_b = Tensor2D<S>(h, 1);
    W_a = init(1, 4 * h, 4 * h);
    alpha_raw = Tensor2D<S>(1, 1);
    alpha_raw.data[0] = static_cast<S>(std::log(1.0 / std::sqrt(2.0 * h)));
    W_d = init(ha, 2 * h + 1, 2 * h + 1);
    W_o = init(nc, 2 * h + ha, 2 * h + ha);
    b_o = Tensor2D<S>(nc, 1);
    W_ssl = init(d, h, h);
    embedding = Tensor2D<S>::random_uniform(
        static_cast<std::size_t>(c.vocab_size), d, S(-0.05), S(0.05), rng);
  }

  S alpha() const { return std::exp(alpha_raw.data[0]); }

  std::vector<NamedParam<S>> param_list(bool include_embedding = true) {
    std::vector<NamedParam<S>> list = {
        {"W", &W},     {"b_f", &b_f}, {"b_b", &b_b},
        {"W_a", &W_a}, {"alpha_raw", &alpha_raw},
        {"W_d", &W_d}, {"W_o", &W_o}, {"b_o", &b_o},
        {"W_ssl", &W_ssl}};
    if (include_embedding) list.push_back({"embedding", &embedding});
    return list;
  }

  void ensure_grads() {
    for (auto& p : param_list()) p.tensor->ensure_grad();
  }
  void zero_grads() {
    for (auto& p : param_list()) p.tensor->zero_grad();
  }

  bool all_finite() {
    for (auto& p : param_list())
      if (!p.tensor->all_finite()) return false;
    return true;
  }
};

template <typename S = float>
struct ForwardTrace {
  std::size_t true_len = 0;
  std::vector<std::vector<S>> h_f;       // [t] forward state, t = 0..T-1
  std::vector<std::vector<S>> h_b;       // [t] backward state re-aligned to t
  std::vector<std::vector<S>> fused;     // [t] = concat(h_f[t], h_b[t])
  std::vector<S> scores;                 // pre-softmax attention scores
  std::vector<S> att;                    // attention weights, sum 1
  std::vector<std::vector<S>> h_att_steps;
  std::vector<S> h_att;                  // attention-pooled refinement
  std::vector<S> h_fusion_global;        // concat(h_f[T-1], h_b[0])
  std::vector<S> logits;
  std::vector<S> probs;                  // class distribution Y
};

// y = tanh(W * concat(h_prev, x) + b)
template <typename S>
std::vector<S> elman_step(const std::vector<S>& h_prev, const std::vector<S>& x,
                          const Tensor2D<S>& W, const Tensor2D<S>& b) {
  if (W.cols != h_prev.size() + x.size() || W.rows != b.rows) {
    throw std::invalid_argument(
        "elman_step: shape mismatch W=" + W.shape_str() + " h_prev=" +
        std::to_string(h_prev.size()) + " x=" + std::to_string(x.size()));
  }
  const std::size_t h = W.rows, nh = h_prev.size();
  std::vector<S> out(h);
  for (std::size_t i = 0; i < h; ++i) {
    const S* wrow = &W.data[i * W.cols];
    S acc = b.data[i];
    for (std::size_t j = 0; j < nh; ++j) acc += wrow[j] * h_prev[j];
    for (std::size_t j = 0; j < x.size(); ++j) acc += wrow[nh + j] * x[j];
    out[i] = std::tanh(acc);
  }
  return out;
}

template <typename S>
std::vector<S> embedding_row(const ModelParams<S>& params, std::int32_t id) {
  const std::size_t d = params.cfg.embed_dim;
  const S* row = &params.embedding.data[static_cast<std::size_t>(id) * d];
  return std::vector<S>(row, row + d);
}

// Chronological pass over unmasked positions only; pads never touch the state.
template <typename S>
std::vector<std::vector<S>> run_forward_path(const TokenizedExample& ex,
                                             const ModelParams<S>& params) {
  if (ex.true_len == 0) {
    throw std::invalid_argument("run_forward_path: empty example");
  }
  std::vector<std::vector<S>> states(ex.true_len);
  std::vector<S> h(params.cfg.hidden, S(0));
  for (std::size_t t = 0; t < ex.true_len; ++t) {
    h = elman_step(h, embedding_row(params, ex.ids[t]), params.W, params.b_f);
    states[t] = h;
  }
  return states;
}

// Reversed pass with the shared W and the backward bias, stored re-aligned:
// states[t] is the backward state computed at original position t+1, i.e. the
// recurrence h_b(t) = tanh(W [h_b(t+1); x_t] + b_b) run from the far end.
template <typename S>
std::vector<std::vector<S>> run_backward_path(const TokenizedExample& ex,
                                              const ModelParams<S>& params) {
  if (ex.true_len == 0) {
    throw std::invalid_argument("run_backward_path: empty example");
  }
  std::vector<std::vector<S>> states(ex.true_len);
  std::vector<S> h(params.cfg.hidden, S(0));
  for (std::size_t t = ex.true_len; t-- > 0;) {
    h = elman_step(h, embedding_row(params, ex.ids[t]), params.W, params.b_b);
    states[t] = h;
  }
  return states;
}

// fused[t] = [h_f[t]; h_b[t]]; the global fusion vector is [h_f[T-1]; h_b[0]].
template <typename S>
void fuse(const std::vector<std::vector<S>>& h_f,
          const std::vector<std::vector<S>>& h_b,
          std::vector<std::vector<S>>& fused_out,
          std::vector<S>& global_out) {
  if (h_f.size() != h_b.size()) {
    throw std::invalid_argument("fuse: path length mismatch " +
                                std::to_string(h_f.size()) + " vs " +
                                std::to_string(h_b.size()));
  }
  const std::size_t T = h_f.size();
  fused_out.resize(T);
  for (std::size_t t = 0; t < T; ++t) fused_out[t] = concat_vec(h_f[t], h_b[t]);
  global_out = concat_vec(h_f[T - 1], h_b[0]);
}

// score_t = alpha * W_a [fused[t]; fused[t-1]], fused[-1] := 0; softmax across
// the unmasked positions.
template <typename S>
void attention_weights(const std::vector<std::vector<S>>& fused,
                       const Tensor2D<S>& W_a, S alpha,
                       std::vector<S>& scores_out, std::vector<S>& att_out) {
  const std::size_t T = fused.size();
  if (T == 0) throw std::invalid_argument("attention_weights: empty sequence");
  const std::size_t two_h = fused[0].size();
  if (W_a.cols != 2 * two_h) {
    throw std::invalid_argument("attention_weights: W_a shape " + W_a.shape_str() +
                                " does not match fused dim " + std::to_string(two_h));
  }
  scores_out.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    S acc = S(0);
    for (std::size_t j = 0; j < two_h; ++j) acc += W_a.data[j] * fused[t][j];
    if (t > 0) {
      for (std::size_t j = 0; j < two_h; ++j)
        acc += W_a.data[two_h + j] * fused[t - 1][j];
    }
    scores_out[t] = alpha * acc;
  }
  att_out = softmax_vec(scores_out);
}

// Per-step refinement h_att_t = tanh(W_d [fused[t]; A_t]) pooled by the
// attention weights into a single vector.
template <typename S>
void refine(const std::vector<std::vector<S>>& fused, const std::vector<S>& att,
            const Tensor2D<S>& W_d, std::vector<std::vector<S>>& steps_out,
            std::vector<S>& pooled_out) {
  const std::size_t T = fused.size();
  const std::size_t ha = W_d.rows;
  steps_out.resize(T);
  pooled_out.assign(ha, S(0));
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<S> in = fused[t];
    in.push_back(att[t]);
    if (W_d.cols != in.size()) {
      throw std::invalid_argument("refine: W_d shape " + W_d.shape_str() +
                                  " does not match input dim " +
                                  std::to_string(in.size()));
    }
    auto& step = steps_out[t];
    step.resize(ha);
    for (std::size_t i = 0; i < ha; ++i) {
      const S* row = &W_d.data[i * W_d.cols];
      S acc = S(0);
      for (std::size_t j = 0; j < in.size(); ++j) acc += row[j] * in[j];
      step[i] = std::tanh(acc);
      pooled_out[i] += att[t] * step[i];
    }
  }
}

template <typename S>
void classify(const std::vector<S>& h_fusion_global, const std::vector<S>& h_att,
              const Tensor2D<S>& W_o, const Tensor2D<S>& b_o,
              std::vector<S>& logits_out, std::vector<S>& probs_out) {
  const std::vector<S> in = concat_vec(h_fusion_global, h_att);
  if (W_o.cols != in.size()) {
    throw std::invalid_argument("classify: W_o shape " + W_o.shape_str() +
                                " does not match input dim " +
                                std::to_string(in.size()));
  }
  logits_out.resize(W_o.rows);
  for (std::size_t i = 0; i < W_o.rows; ++i) {
    const S* row = &W_o.data[i * W_o.cols];
    S acc = b_o.data[i];
    for (std::size_t j = 0; j < in.size(); ++j) acc += row[j] * in[j];
    logits_out[i] = acc;
  }
  probs_out = softmax_vec(logits_out);
}

template <typename S>
ForwardTrace<S> forward(const TokenizedExample& ex, const ModelParams<S>& params) {
  ForwardTrace<S> tr;
  tr.true_len = ex.true_len;
  tr.h_f = run_forward_path(ex, params);
  tr.h_b = run_backward_path(ex, params);
  return finish_forward(ex, params, std::move(tr));
}

// Fusion, attention and classification given already-computed path states.
// Split out so test-time adaptation can recombine original forward states with
// adapted backward states.
template <typename S>
ForwardTrace<S> finish_forward(const TokenizedExample& ex,
                               const ModelParams<S>& params, ForwardTrace<S> tr) {
  (void)ex;
  fuse(tr.h_f, tr.h_b, tr.fused, tr.h_fusion_global);
  attention_weights(tr.fused, params.W_a, params.alpha(), tr.scores, tr.att);
  refine(tr.fused, tr.att, params.W_d, tr.h_att_steps, tr.h_att);
  classify(tr.h_fusion_global, tr.h_att, params.W_o, params.b_o, tr.logits,
           tr.probs);
  return tr;
}

// Self-supervised objective on the backward path: the state at position t
// predicts the embedding of the next token along the reversed sequence
// (position t-1). Mean squared residual over the T-1 predictions.
template <typename S>
S ssl_loss_from_states(const TokenizedExample& ex, const ModelParams<S>& params,
                       const std::vector<std::vector<S>>& h_b) {
  const std::size_t T = ex.true_len;
  if (T < 2) return S(0);
  const std::size_t d = params.cfg.embed_dim, h = params.cfg.hidden;
  double total = 0.0;
  for (std::size_t t = 1; t < T; ++t) {
    const S* target =
        &params.embedding.data[static_cast<std::size_t>(ex.ids[t - 1]) * d];
    for (std::size_t i = 0; i < d; ++i) {
      const S* row = &params.W_ssl.data[i * h];
      S pred = S(0);
      for (std::size_t j = 0; j < h; ++j) pred += row[j] * h_b[t][j];
      const double r = static_cast<double>(pred - target[i]);
      total += r * r;
    }
  }
  return static_cast<S>(total / static_cast<double>(T - 1));
}

template <typename S>
S ssl_loss(const TokenizedExample& ex, const ModelParams<S>& params) {
  if (ex.true_len < 2) return S(0);
  return ssl_loss_from_states(ex, params, run_backward_path(ex, params));
}

// BPTT through the chronological pass. d_states carries dL/dh_f[t]; W, b_f and
// touched embedding rows accumulate gradients.
template <typename S>
void forward_path_bptt(const TokenizedExample& ex, ModelParams<S>& params,
                       const std::vector<std::vector<S>>& h_f,
                       const std::vector<std::vector<S>>& d_states,
                       bool embedding_grads = true) {
  const std::size_t h = params.cfg.hidden, d = params.cfg.embed_dim;
  params.W.ensure_grad();
  params.b_f.ensure_grad();
  if (embedding_grads) params.embedding.ensure_grad();
  std::vector<S> carry(h, S(0));
  std::vector<S> dpre(h);
  for (std::size_t t = ex.true_len; t-- > 0;) {
    for (std::size_t i = 0; i < h; ++i) {
      const S y = h_f[t][i];
      dpre[i] = (S(1) - y * y) * (d_states[t][i] + carry[i]);
      params.b_f.grad[i] += dpre[i];
    }
    const std::vector<S>* prev = t > 0 ? &h_f[t - 1] : nullptr;
    const std::size_t row0 =
        static_cast<std::size_t>(ex.ids[t]) * d;
    std::fill(carry.begin(), carry.end(), S(0));
    for (std::size_t i = 0; i < h; ++i) {
      const S g = dpre[i];
      if (g == S(0)) continue;
      S* wgrow = &params.W.grad[i * params.W.cols];
      const S* wrow = &params.W.data[i * params.W.cols];
      if (prev) {
        for (std::size_t j = 0; j < h; ++j) wgrow[j] += g * (*prev)[j];
      }
      for (std::size_t j = 0; j < h; ++j) carry[j] += wrow[j] * g;
      const S* x = &params.embedding.data[row0];
      for (std::size_t j = 0; j < d; ++j) {
        wgrow[h + j] += g * x[j];
        if (embedding_grads) params.embedding.grad[row0 + j] += wrow[h + j] * g;
      }
    }
  }
}

// BPTT through the reversed pass; the recurrence runs from position T-1 down
// to 0, so gradient flows in increasing t.
template <typename S>
void backward_path_bptt(const TokenizedExample& ex, ModelParams<S>& params,
                        const std::vector<std::vector<S>>& h_b,
                        const std::vector<std::vector<S>>& d_states,
                        bool embedding_grads = true) {
  const std::size_t h = params.cfg.hidden, d = params.cfg.embed_dim;
  params.W.ensure_grad();
  params.b_b.ensure_grad();
  if (embedding_grads) params.embedding.ensure_grad();
  std::vector<S> carry(h, S(0));
  std::vector<S> dpre(h);
  const std::size_t T = ex.true_len;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < h; ++i) {
      const S y = h_b[t][i];
      dpre[i] = (S(1) - y * y) * (d_states[t][i] + carry[i]);
      params.b_b.grad[i] += dpre[i];
    }
    const std::vector<S>* next = t + 1 < T ? &h_b[t + 1] : nullptr;
    const std::size_t row0 = static_cast<std::size_t>(ex.ids[t]) * d;
    std::fill(carry.begin(), carry.end(), S(0));
    for (std::size_t i = 0; i < h; ++i) {
      const S g = dpre[i];
      if (g == S(0)) continue;
      S* wgrow = &params.W.grad[i * params.W.cols];
      const S* wrow = &params.W.data[i * params.W.cols];
      if (next) {
        for (std::size_t j = 0; j < h; ++j) wgrow[j] += g * (*next)[j];
      }
      for (std::size_t j = 0; j < h; ++j) carry[j] += wrow[j] * g;
      const S* x = &params.embedding.data[row0];
      for (std::size_t j = 0; j < d; ++j) {
        wgrow[h + j] += g * x[j];
        if (embedding_grads) params.embedding.grad[row0 + j] += wrow[h + j] * g;
      }
    }
  }
}

// Adds the ssl objective's direct gradients: W_ssl, the prediction targets in
// the embedding table, and dL/dh_b[t] for the subsequent path BPTT.
template <typename S>
void ssl_backward_direct(const TokenizedExample& ex, ModelParams<S>& params,
                         const std::vector<std::vector<S>>& h_b, S weight,
                         std::vector<std::vector<S>>& d_h_b,
                         bool embedding_grads = true) {
  const std::size_t T = ex.true_len;
  if (T < 2 || weight == S(0)) return;
  const std::size_t d = params.cfg.embed_dim, h = params.cfg.hidden;
  params.W_ssl.ensure_grad();
  if (embedding_grads) params.embedding.ensure_grad();
  const S scale = weight * S(2) / static_cast<S>(T - 1);
  for (std::size_t t = 1; t < T; ++t) {
    const std::size_t trow =
        static_cast<std::size_t>(ex.ids[t - 1]) * d;
    for (std::size_t i = 0; i < d; ++i) {
      const S* row = &params.W_ssl.data[i * h];
      S pred = S(0);
      for (std::size_t j = 0; j < h; ++j) pred += row[j] * h_b[t][j];
      const S dr = scale * (pred - params.embedding.data[trow + i]);
      if (dr == S(0)) continue;
      S* grow = &params.W_ssl.grad[i * h];
      for (std::size_t j = 0; j < h; ++j) {
        grow[j] += dr * h_b[t][j];
        d_h_b[t][j] += row[j] * dr;
      }
      if (embedding_grads) params.embedding.grad[trow + i] -= dr;
    }
  }
}

// Full backward pass: cross-entropy at ce_scale plus the ssl objective at
// ssl_weight, accumulated into the parameter grad buffers.
template <typename S>
void backward(const ForwardTrace<S>& tr, const TokenizedExample& ex,
              std::size_t label, ModelParams<S>& params, S ce_scale = S(1),
              S ssl_weight = S(0), bool embedding_grads = true) {
  const std::size_t T = tr.true_len;
  const std::size_t h = params.cfg.hidden, ha = params.cfg.att_hidden;
  const std::size_t nc = params.cfg.num_classes;
  params.W_a.ensure_grad();
  params.alpha_raw.ensure_grad();
  params.W_d.ensure_grad();
  params.W_o.ensure_grad();
  params.b_o.ensure_grad();

  // softmax + CE
  std::vector<S> dlogits(nc);
  for (std::size_t i = 0; i < nc; ++i) {
    dlogits[i] = ce_scale * (tr.probs[i] - (i == label ? S(1) : S(0)));
  }

  // classifier
  const std::vector<S> cls_in = concat_vec(tr.h_fusion_global, tr.h_att);
  std::vector<S> d_cls_in(cls_in.size(), S(0));
  for (std::size_t i = 0; i < nc; ++i) {
    const S g = dlogits[i];
    params.b_o.grad[i] += g;
    S* grow = &params.W_o.grad[i * params.W_o.cols];
    const S* row = &params.W_o.data[i * params.W_o.cols];
    for (std::size_t j = 0; j < cls_in.size(); ++j) {
      grow[j] += g * cls_in[j];
      d_cls_in[j] += row[j] * g;
    }
  }
  std::vector<S> d_hfg(d_cls_in.begin(), d_cls_in.begin() + 2 * h);
  std::vector<S> d_pool(d_cls_in.begin() + 2 * h, d_cls_in.end());

  // pooling: h_att = sum_t A_t * h_att_steps[t]
  std::vector<S> dA(T, S(0));
  std::vector<std::vector<S>> d_fused(T, std::vector<S>(2 * h, S(0)));
  for (std::size_t t = 0; t < T; ++t) {
    // step gradient through pooling
    std::vector<S> d_step(ha);
    for (std::size_t i = 0; i < ha; ++i) {
      d_step[i] = tr.att[t] * d_pool[i];
      dA[t] += tr.h_att_steps[t][i] * d_pool[i];
    }
    // refine: step = tanh(W_d [fused[t]; A_t])
    std::vector<S> in = tr.fused[t];
    in.push_back(tr.att[t]);
    for (std::size_t i = 0; i < ha; ++i) {
      const S y = tr.h_att_steps[t][i];
      const S dpre = (S(1) - y * y) * d_step[i];
      if (dpre == S(0)) continue;
      S* grow = &params.W_d.grad[i * params.W_d.cols];
      const S* row = &params.W_d.data[i * params.W_d.cols];
      for (std::size_t j = 0; j < in.size(); ++j) grow[j] += dpre * in[j];
      for (std::size_t j = 0; j < 2 * h; ++j) d_fused[t][j] += row[j] * dpre;
      dA[t] += row[2 * h] * dpre;
    }
  }

  // softmax over attention scores
  S dot = S(0);
  for (std::size_t t = 0; t < T; ++t) dot += tr.att[t] * dA[t];
  std::vector<S> ds(T);
  for (std::size_t t = 0; t < T; ++t) ds[t] = tr.att[t] * (dA[t] - dot);

  // scores: score_t = alpha * W_a [fused[t]; fused[t-1]]
  const S alpha = params.alpha();
  S d_alpha = S(0);
  for (std::size_t t = 0; t < T; ++t) {
    if (ds[t] == S(0)) continue;
    d_alpha += ds[t] * (tr.scores[t] / alpha);
    const S g = alpha * ds[t];
    for (std::size_t j = 0; j < 2 * h; ++j) {
      params.W_a.grad[j] += g * tr.fused[t][j];
      d_fused[t][j] += params.W_a.data[j] * g;
    }
    if (t > 0) {
      for (std::size_t j = 0; j < 2 * h; ++j) {
        params.W_a.grad[2 * h + j] += g * tr.fused[t - 1][j];
        d_fused[t - 1][j] += params.W_a.data[2 * h + j] * g;
      }
    }
  }
  params.alpha_raw.grad[0] += d_alpha * alpha;  // alpha = exp(alpha_raw)

  // global fusion vector and per-step fusion splits
  std::vector<std::vector<S>> d_h_f(T, std::vector<S>(h, S(0)));
  std::vector<std::vector<S>> d_h_b(T, std::vector<S>(h, S(0)));
  for (std::size_t j = 0; j < h; ++j) {
    d_h_f[T - 1][j] += d_hfg[j];
    d_h_b[0][j] += d_hfg[h + j];
  }
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < h; ++j) {
      d_h_f[t][j] += d_fused[t][j];
      d_h_b[t][j] += d_fused[t][h + j];
    }
  }

  ssl_backward_direct(ex, params, tr.h_b, ssl_weight, d_h_b, embedding_grads);

  forward_path_bptt(ex, params, tr.h_f, d_h_f, embedding_grads);
  backward_path_bptt(ex, params, tr.h_b, d_h_b, embedding_grads);
}

// Scalar objective used by training and by the finite-difference oracle.
template <typename S>
double total_loss(const TokenizedExample& ex, const ModelParams<S>& params,
                  std::size_t label, S ssl_weight = S(0)) {
  ForwardTrace<S> tr = forward(ex, params);
  double loss = static_cast<double>(cross_entropy(tr.probs, label));
  if (ssl_weight > S(0) && ex.true_len >= 2) {
    loss += static_cast<double>(ssl_weight) *
            static_cast<double>(ssl_loss_from_states(ex, params, tr.h_b));
  }
  return loss;
}

}  // namespace dbean
