#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbean/rng.hpp"

namespace dbean {

// Dense row-major matrix with an optional gradient buffer of the same shape.
// Scalar is float in production and double when running gradient checks.
template <typename S = float>
struct Tensor2D {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<S> data;
  std::vector<S> grad;  // empty until ensure_grad()

  Tensor2D() = default;
  Tensor2D(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, S(0)) {}

  static Tensor2D zeros(std::size_t r, std::size_t c) { return Tensor2D(r, c); }

  static Tensor2D random_uniform(std::size_t r, std::size_t c, S lo, S hi, Rng& rng) {
    Tensor2D t(r, c);
    for (auto& v : t.data) v = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  S& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  S at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::size_t size() const { return data.size(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
  void zero_grad() { grad.assign(data.size(), S(0)); }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }
};

template <typename S>
Tensor2D<S> matmul(const Tensor2D<S>& a, const Tensor2D<S>& b) {
  if (a.cols != b.rows) {
    throw std::invalid_argument("matmul: shape mismatch " + a.shape_str() +
                                " * " + b.shape_str());
  }
  Tensor2D<S> c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const S aik = a.at(i, k);
      if (aik == S(0)) continue;
      const S* brow = &b.data[k * b.cols];
      S* crow = &c.data[i * c.cols];
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

// dL/dA = dC * B^T, dL/dB = A^T * dC; accumulates into grad buffers.
template <typename S>
void matmul_backward(Tensor2D<S>& a, Tensor2D<S>& b, const Tensor2D<S>& grad_c) {
  a.ensure_grad();
  b.ensure_grad();
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      const S g = grad_c.at(i, j);
      if (g == S(0)) continue;
      for (std::size_t k = 0; k < a.cols; ++k) {
        a.grad[i * a.cols + k] += g * b.at(k, j);
        b.grad[k * b.cols + j] += a.at(i, k) * g;
      }
    }
  }
}

template <typename S>
std::vector<S> concat_vec(const std::vector<S>& a, const std::vector<S>& b) {
  std::vector<S> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

// Splits the incoming gradient back onto the two operands.
template <typename S>
void concat_vec_backward(const std::vector<S>& grad_out, std::vector<S>& grad_a,
                         std::vector<S>& grad_b) {
  const std::size_t na = grad_a.size();
  for (std::size_t i = 0; i < na; ++i) grad_a[i] += grad_out[i];
  for (std::size_t i = 0; i < grad_b.size(); ++i) grad_b[i] += grad_out[na + i];
}

template <typename S>
Tensor2D<S> tanh_act(const Tensor2D<S>& x) {
  Tensor2D<S> y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.data.size(); ++i)
    y.data[i] = std::tanh(x.data[i]);
  return y;
}

// grad_x += (1 - y^2) * grad_y, with y the forward output.
template <typename S>
void tanh_backward(const std::vector<S>& y, const std::vector<S>& grad_y,
                   std::vector<S>& grad_x) {
  for (std::size_t i = 0; i < y.size(); ++i)
    grad_x[i] += (S(1) - y[i] * y[i]) * grad_y[i];
}

template <typename S>
std::vector<S> softmax_vec(const std::vector<S>& x) {
  if (x.empty()) throw std::invalid_argument("softmax_vec: empty input");
  S mx = x[0];
  for (S v : x) mx = std::max(mx, v);
  std::vector<S> y(x.size());
  S sum = S(0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  for (auto& v : y) v /= sum;
  return y;
}

inline constexpr double kProbFloor = 1e-12;

template <typename S>
S cross_entropy(const std::vector<S>& probs, std::size_t label) {
  if (label >= probs.size()) {
    throw std::out_of_range("cross_entropy: label " + std::to_string(label) +
                            " out of range for " + std::to_string(probs.size()) +
                            " classes");
  }
  const double p = std::max(static_cast<double>(probs[label]), kProbFloor);
  return static_cast<S>(-std::log(p));
}

template <typename S>
struct NamedParam {
  std::string name;
  Tensor2D<S>* tensor = nullptr;
};

// Global-norm clip then vanilla SGD; zeroes grads afterwards.
template <typename S>
void sgd_step(const std::vector<NamedParam<S>>& params, S lr, S clip_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (p.tensor->grad.empty()) continue;
    for (S g : p.tensor->grad) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw std::runtime_error("sgd_step: non-finite gradient in " + p.name);
      }
      sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  const double norm = std::sqrt(sq);
  double scale = 1.0;
  if (clip_norm > S(0) && norm > static_cast<double>(clip_norm)) {
    scale = static_cast<double>(clip_norm) / norm;
  }
  for (const auto& p : params) {
    if (p.tensor->grad.empty()) continue;
    for (std::size_t i = 0; i < p.tensor->data.size(); ++i) {
      p.tensor->data[i] -= lr * static_cast<S>(scale * p.tensor->grad[i]);
    }
    p.tensor->zero_grad();
  }
}

struct ParamError {
  std::string name;
  std::size_t flat_index = 0;
  double relative_error = 0.0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  ParamError worst;
  std::vector<ParamError> per_parameter;  // max error per parameter tensor
};

// Central differences against already-populated analytic grads. loss_fn must
// be deterministic and read the parameters in place.
template <typename S>
GradCheckReport finite_diff_grad_check(const std::function<double()>& loss_fn,
                                       const std::vector<NamedParam<S>>& params,
                                       double epsilon = 1e-4) {
  GradCheckReport report;
  for (const auto& p : params) {
    ParamError pe{p.name, 0, 0.0};
    p.tensor->ensure_grad();
    for (std::size_t i = 0; i < p.tensor->data.size(); ++i) {
      const S saved = p.tensor->data[i];
      p.tensor->data[i] = saved + static_cast<S>(epsilon);
      const double lp = loss_fn();
      p.tensor->data[i] = saved - static_cast<S>(epsilon);
      const double lm = loss_fn();
      p.tensor->data[i] = saved;
      const double numeric = (lp - lm) / (2.0 * epsilon);
      const double analytic = static_cast<double>(p.tensor->grad[i]);
      const double denom = std::max(std::abs(numeric) + std::abs(analytic), 1e-8);
      const double rel = std::abs(numeric - analytic) / denom;
      if (rel > pe.relative_error) {
        pe.relative_error = rel;
        pe.flat_index = i;
      }
    }
    if (pe.relative_error > report.max_relative_error) {
      report.max_relative_error = pe.relative_error;
      report.worst = pe;
    }
    report.per_parameter.push_back(pe);
  }
  return report;
}

}  // namespace dbean
