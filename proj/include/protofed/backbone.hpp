#pragma once

#include "protofed/rng.hpp"
#include "protofed/types.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace protofed {

struct Candidate {
  int item_id = -1;
  int label = 0;       // exactly one positive per evaluation query
  double score = 0.0;  // filled by scoring
};

// Frozen bilinear scorer: the prompt rows and history-item embeddings are
// mean-pooled, passed through a fixed mixing matrix, and dotted with the
// candidate embedding. Linear in the prompt, which keeps prompt gradients
// exact.
class FrozenScorer {
 public:
  FrozenScorer() = default;

  // Builds from an explicit item-embedding table (rows are items).
  static FrozenScorer from_table(Matrix item_embeddings, std::uint64_t seed) {
    FrozenScorer s;
    s.items_ = std::move(item_embeddings);
    int d = int(s.items_.cols());
    RngStream rng = RngStream::derive(seed, "scorer_mixing");
    Matrix g = rng.gaussian_matrix(d, d);
    Eigen::HouseholderQR<Matrix> qr(g);
    s.mixing_ = qr.householderQ() * Matrix::Identity(d, d);  // orthogonal
    return s;
  }

  // Seeded random unit-norm item embeddings.
  static FrozenScorer seeded(int n_items, int d, std::uint64_t seed) {
    RngStream rng = RngStream::derive(seed, "scorer_items");
    Matrix items(n_items, d);
    for (int i = 0; i < n_items; ++i)
      items.row(i) = rng.unit_vector(d).transpose();
    return from_table(std::move(items), seed);
  }

  int n_items() const { return int(items_.rows()); }
  int d() const { return int(items_.cols()); }
  const Matrix& item_embeddings() const { return items_; }
  const Matrix& mixing() const { return mixing_; }

  Vector item_embedding(int item_id) const {
    require_arg(item_id >= 0 && item_id < n_items(), "unknown item id");
    return items_.row(item_id).transpose();
  }

  // Mean-pool of [prompt rows; history embeddings].
  Vector pooled(const std::vector<int>& history, const Matrix& prompt) const {
    require_arg(prompt.cols() == items_.cols(), "score: prompt width mismatch");
    Vector sum = prompt.colwise().sum().transpose();
    for (int id : history) sum += item_embedding(id);
    return sum / double(prompt.rows() + long(history.size()));
  }

  double score(const std::vector<int>& history, const Matrix& prompt,
               int candidate) const {
    return (mixing_ * pooled(history, prompt)).dot(item_embedding(candidate));
  }

  // Precomputed left factor for scoring many candidates of one query:
  // score_i = <mixing * pooled, e_i>.
  Vector query_vector(const std::vector<int>& history,
                      const Matrix& prompt) const {
    return mixing_ * pooled(history, prompt);
  }

  double score_with_query(const Vector& query_vec, int candidate) const {
    return query_vec.dot(item_embedding(candidate));
  }

  // d(score)/d(prompt): every prompt row receives mixing^T e_c / n_pooled.
  Matrix prompt_score_gradient(const std::vector<int>& history,
                               const Matrix& prompt, int candidate) const {
    Vector g = mixing_.transpose() * item_embedding(candidate) /
               double(prompt.rows() + long(history.size()));
    Matrix out(prompt.rows(), prompt.cols());
    out.rowwise() = g.transpose();
    return out;
  }

  // Chain-rule helper: given d(loss)/d(score_i) for a candidate batch,
  // returns d(loss)/d(prompt).
  Matrix prompt_loss_gradient(const std::vector<int>& history,
                              const Matrix& prompt,
                              const std::vector<Candidate>& candidates,
                              const std::vector<double>& dscore) const {
    require_arg(candidates.size() == dscore.size(),
                "prompt_loss_gradient: size mismatch");
    Vector acc = Vector::Zero(prompt.cols());
    for (std::size_t i = 0; i < candidates.size(); ++i)
      acc += dscore[i] * item_embedding(candidates[i].item_id);
    Vector g = mixing_.transpose() * acc /
               double(prompt.rows() + long(history.size()));
    Matrix out(prompt.rows(), prompt.cols());
    out.rowwise() = g.transpose();
    return out;
  }

 private:
  Matrix items_;   // n_items x d, frozen
  Matrix mixing_;  // d x d, frozen orthogonal
};

struct LossResult {
  double value = 0.0;
  std::vector<double> grad;  // d(loss)/d(score) per element
};

// Pointwise binary cross-entropy over (score, label) pairs, computed with the
// stable softplus form; gradient is sigma(s) - y.
inline LossResult bce_loss(const std::vector<std::pair<double, int>>& scores_labels) {
  LossResult out;
  out.grad.reserve(scores_labels.size());
  for (const auto& [s, y] : scores_labels) {
    require_arg(y == 0 || y == 1, "bce_loss: labels must be binary");
    // -y log sigma(s) - (1-y) log(1 - sigma(s)) = max(s,0) - s y + log1p(exp(-|s|))
    out.value += std::max(s, 0.0) - s * double(y) + std::log1p(std::exp(-std::abs(s)));
    double sig = 1.0 / (1.0 + std::exp(-std::min(std::max(s, -500.0), 500.0)));
    out.grad.push_back(sig - double(y));
  }
  return out;
}

// Pairwise BPR: sum -log sigma(s_pos - s_neg). Gradient entries come in
// (d/ds_pos, d/ds_neg) pairs, flattened in order.
inline LossResult bpr_loss(const std::vector<std::pair<double, double>>& pairs) {
  LossResult out;
  out.grad.reserve(pairs.size() * 2);
  for (const auto& [sp, sn] : pairs) {
    double diff = sp - sn;
    out.value += std::max(-diff, 0.0) + std::log1p(std::exp(-std::abs(diff)));
    double sig = 1.0 / (1.0 + std::exp(-std::min(std::max(diff, -500.0), 500.0)));
    out.grad.push_back(sig - 1.0);  // d/ds_pos
    out.grad.push_back(1.0 - sig);  // d/ds_neg
  }
  return out;
}

// Descending score order; ties broken by ascending item id.
inline std::vector<int> rank(const std::vector<Candidate>& candidates) {
  std::vector<int> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (candidates[a].score != candidates[b].score)
      return candidates[a].score > candidates[b].score;
    return candidates[a].item_id < candidates[b].item_id;
  });
  return order;
}

// 1-based rank of the positive candidate under rank().
inline int positive_rank(const std::vector<Candidate>& candidates) {
  std::vector<int> order = rank(candidates);
  for (std::size_t i = 0; i < order.size(); ++i)
    if (candidates[order[i]].label == 1) return int(i) + 1;
  return int(order.size()) + 1;
}

}  // namespace protofed
