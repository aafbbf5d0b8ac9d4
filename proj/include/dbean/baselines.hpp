#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dbean/rng.hpp"
#include "dbean/tensor.hpp"

namespace dbean {

inline constexpr const char* kSparseMagic = "DBEAN-SPARSE-1";

using SparseVec = std::vector<std::pair<std::uint32_t, float>>;

struct BowVocab {
  std::vector<std::string> words;  // column order
  std::unordered_map<std::string, std::uint32_t> word_to_col;

  std::size_t size() const { return words.size(); }
};

// Top-K words by training-set frequency, ties broken lexicographically.
inline BowVocab build_bow_vocab(const std::vector<std::vector<std::string>>& docs,
                                std::size_t top_k = 50000) {
  std::unordered_map<std::string, std::int64_t> freq;
  for (const auto& doc : docs)
    for (const auto& w : doc) ++freq[w];
  std::vector<std::pair<std::string, std::int64_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (ranked.size() > top_k) ranked.resize(top_k);
  BowVocab vocab;
  vocab.words.reserve(ranked.size());
  for (const auto& [w, _] : ranked) {
    vocab.word_to_col.emplace(w, static_cast<std::uint32_t>(vocab.words.size()));
    vocab.words.push_back(w);
  }
  return vocab;
}

// Raw term counts over vocab columns; out-of-vocabulary words dropped.
inline SparseVec bow_featurize(const std::vector<std::string>& doc_words,
                               const BowVocab& vocab) {
  std::unordered_map<std::uint32_t, float> counts;
  for (const auto& w : doc_words) {
    auto it = vocab.word_to_col.find(w);
    if (it != vocab.word_to_col.end()) counts[it->second] += 1.0f;
  }
  SparseVec out(counts.begin(), counts.end());
  std::sort(out.begin(), out.end());
  return out;
}

// Smoothed idf fitted on the training counts; rows are L2-normalized.
class TfidfTransform {
 public:
  void fit(const std::vector<SparseVec>& train_counts, std::size_t n_features) {
    std::vector<std::int64_t> df(n_features, 0);
    for (const auto& doc : train_counts)
      for (const auto& [col, _] : doc) ++df[col];
    const double n = static_cast<double>(train_counts.size());
    idf_.resize(n_features);
    for (std::size_t j = 0; j < n_features; ++j) {
      idf_[j] = static_cast<float>(
          std::log((1.0 + n) / (1.0 + static_cast<double>(df[j]))) + 1.0);
    }
  }

  SparseVec transform(const SparseVec& counts) const {
    SparseVec out = counts;
    double sq = 0.0;
    for (auto& [col, v] : out) {
      v *= idf_.at(col);
      sq += static_cast<double>(v) * v;
    }
    if (sq > 0.0) {
      const float inv = static_cast<float>(1.0 / std::sqrt(sq));
      for (auto& [_, v] : out) v *= inv;
    }
    return out;
  }

  const std::vector<float>& idf() const { return idf_; }

 private:
  std::vector<float> idf_;
};

struct KMeansModel {
  Tensor2D<float> centroids;          // k x dim
  std::vector<double> inertia_trace;  // objective after each Lloyd iteration

  std::uint32_t assign(const float* v) const {
    std::uint32_t best = 0;
    double best_d = std::numeric_limits<double>::max();
    for (std::size_t c = 0; c < centroids.rows; ++c) {
      const float* cen = &centroids.data[c * centroids.cols];
      double d = 0.0;
      for (std::size_t j = 0; j < centroids.cols; ++j) {
        const double diff = static_cast<double>(v[j]) - cen[j];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = static_cast<std::uint32_t>(c);
      }
    }
    return best;
  }
};

// Lloyd's algorithm with seeded k-means++ init. Empty clusters are reseeded
// from the point farthest from its centroid. k is reduced to the vector count
// when there are fewer vectors than clusters.
inline KMeansModel kmeans_fit(const Tensor2D<float>& vectors, std::size_t k,
                              std::uint64_t seed, std::size_t max_iter = 50) {
  const std::size_t n = vectors.rows, dim = vectors.cols;
  if (n == 0) throw std::invalid_argument("kmeans_fit: no vectors");
  k = std::min(k, n);

  Rng rng(seed);
  KMeansModel model;
  model.centroids = Tensor2D<float>(k, dim);

  auto sq_dist = [&](const float* a, const float* b) {
    double d = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double diff = static_cast<double>(a[j]) - b[j];
      d += diff * diff;
    }
    return d;
  };
  auto point = [&](std::size_t i) { return &vectors.data[i * dim]; };
  auto centroid = [&](std::size_t c) { return &model.centroids.data[c * dim]; };

  // k-means++ seeding
  std::vector<double> min_d(n, std::numeric_limits<double>::max());
  std::size_t first = static_cast<std::size_t>(rng.below(n));
  std::copy(point(first), point(first) + dim, centroid(0));
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      min_d[i] = std::min(min_d[i], sq_dist(point(i), centroid(c - 1)));
      total += min_d[i];
    }
    std::size_t chosen = n - 1;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += min_d[i];
        if (acc >= target) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = static_cast<std::size_t>(rng.below(n));
    }
    std::copy(point(chosen), point(chosen) + dim, centroid(c));
  }

  std::vector<std::uint32_t> assign(n, 0);
  std::vector<double> dist(n, 0.0);
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    bool changed = iter == 0;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t best = 0;
      double best_d = std::numeric_limits<double>::max();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = sq_dist(point(i), centroid(c));
        if (d < best_d) {
          best_d = d;
          best = static_cast<std::uint32_t>(c);
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
      dist[i] = best_d;
      inertia += best_d;
    }
    model.inertia_trace.push_back(inertia);
    if (!changed) break;

    std::vector<double> sums(k * dim, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double* row = &sums[assign[i] * dim];
      const float* p = point(i);
      for (std::size_t j = 0; j < dim; ++j) row[j] += p[j];
      ++counts[assign[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // reseed from the farthest point
        std::size_t far = 0;
        for (std::size_t i = 1; i < n; ++i)
          if (dist[i] > dist[far]) far = i;
        std::copy(point(far), point(far) + dim, centroid(c));
        dist[far] = 0.0;
        continue;
      }
      float* cen = centroid(c);
      for (std::size_t j = 0; j < dim; ++j) {
        cen[j] = static_cast<float>(sums[c * dim + j] / counts[c]);
      }
    }
  }
  return model;
}

// L1-normalized histogram of cluster assignments over the doc's in-model
// words; all-zero when no word is in the model.
inline SparseVec bom_featurize(
    const std::vector<std::string>& doc_words,
    const std::unordered_map<std::string, std::uint32_t>& word_cluster,
    std::size_t k) {
  (void)k;
  std::unordered_map<std::uint32_t, float> hist;
  std::size_t total = 0;
  for (const auto& w : doc_words) {
    auto it = word_cluster.find(w);
    if (it == word_cluster.end()) continue;
    hist[it->second] += 1.0f;
    ++total;
  }
  SparseVec out(hist.begin(), hist.end());
  std::sort(out.begin(), out.end());
  if (total > 0) {
    for (auto& [_, v] : out) v /= static_cast<float>(total);
  }
  return out;
}

struct LogRegModel {
  Tensor2D<float> weights;  // num_classes x n_features
  std::vector<float> bias;  // num_classes

  std::vector<float> predict_probs(const SparseVec& x) const {
    std::vector<float> logits(bias);
    for (const auto& [col, v] : x) {
      for (std::size_t c = 0; c < weights.rows; ++c) {
        logits[c] += weights.at(c, col) * v;
      }
    }
    return softmax_vec(logits);
  }

  std::size_t predict(const SparseVec& x) const {
    auto p = predict_probs(x);
    std::size_t best = 0;
    for (std::size_t c = 1; c < p.size(); ++c)
      if (p[c] > p[best]) best = c;
    return best;
  }
};

// Multinomial logistic regression by seeded mini-batch SGD over sparse rows.
inline LogRegModel logreg_train(const std::vector<SparseVec>& features,
                                const std::vector<std::int32_t>& labels,
                                std::size_t n_features, std::size_t n_classes,
                                std::size_t epochs, float lr,
                                std::uint64_t seed,
                                std::size_t batch_size = 32) {
  if (features.size() != labels.size()) {
    throw std::invalid_argument("logreg_train: features/labels size mismatch");
  }
  LogRegModel model;
  model.weights = Tensor2D<float>(n_classes, n_features);
  model.bias.assign(n_classes, 0.0f);

  Rng rng(seed);
  std::vector<std::size_t> order(features.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<float> logits(n_classes), grad_logits(n_classes);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(start + batch_size, order.size());
      const float scale = lr / static_cast<float>(end - start);
      // accumulate the batch update directly; rows are sparse so per-example
      // application is cheap
      for (std::size_t t = start; t < end; ++t) {
        const SparseVec& x = features[order[t]];
        const auto label = static_cast<std::size_t>(labels[order[t]]);
        logits = model.bias;
        for (const auto& [col, v] : x) {
          if (static_cast<std::size_t>(col) >= n_features) {
            throw std::invalid_argument("logreg_train: feature index " +
                                        std::to_string(col) + " out of range " +
                                        std::to_string(n_features));
          }
          for (std::size_t c = 0; c < n_classes; ++c)
            logits[c] += model.weights.at(c, col) * v;
        }
        auto probs = softmax_vec(logits);
        for (std::size_t c = 0; c < n_classes; ++c) {
          grad_logits[c] = probs[c] - (c == label ? 1.0f : 0.0f);
          model.bias[c] -= scale * grad_logits[c];
        }
        for (const auto& [col, v] : x) {
          for (std::size_t c = 0; c < n_classes; ++c) {
            model.weights.at(c, col) -= scale * grad_logits[c] * v;
          }
        }
      }
    }
  }
  return model;
}

// Versioned sparse triplet cache: row col value records.
inline void save_sparse_matrix(const std::vector<SparseVec>& rows,
                               std::size_t n_cols, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write sparse matrix: " + path);
  out << kSparseMagic << "\n" << rows.size() << " " << n_cols << "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (const auto& [col, v] : rows[i]) out << i << " " << col << " " << v << "\n";
  }
}

inline std::vector<SparseVec> load_sparse_matrix(const std::string& path,
                                                 std::size_t* n_cols_out = nullptr) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read sparse matrix: " + path);
  std::string magic;
  std::getline(in, magic);
  if (magic != kSparseMagic) {
    throw std::runtime_error("bad sparse matrix magic in " + path);
  }
  std::size_t n_rows = 0, n_cols = 0;
  in >> n_rows >> n_cols;
  if (n_cols_out) *n_cols_out = n_cols;
  std::vector<SparseVec> rows(n_rows);
  std::size_t r, c;
  float v;
  while (in >> r >> c >> v) {
    if (r >= n_rows || c >= n_cols) {
      throw std::runtime_error("sparse matrix index out of bounds in " + path);
    }
    rows[r].emplace_back(static_cast<std::uint32_t>(c), v);
  }
  return rows;
}

}  // namespace dbean
