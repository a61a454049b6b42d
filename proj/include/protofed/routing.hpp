#pragma once

#include "protofed/types.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace protofed {

enum class Similarity { inner_product, cosine };

struct RoutingResult {
  std::vector<int> indices;     // Top-M prototype indices, best first
  std::vector<double> weights;  // softmax over retained scores, sums to 1
  std::vector<double> scores;   // pre-softmax s_k = sim(h, v_k) / tau
};

// Exhaustive Top-M retrieval over the encoded prototypes followed by a
// temperature softmax restricted to the retained indices. Ties go to the
// lower index.
inline RoutingResult route(const Vector& query_embedding,
                           const std::vector<Vector>& encoded, int top_m,
                           double tau,
                           Similarity sim = Similarity::inner_product) {
  require_arg(top_m > 0, "route: top_m must be positive");
  require_arg(tau > 0.0, "route: tau must be positive");
  require_arg(!encoded.empty(), "route: empty prototype library");

  const int k_total = int(encoded.size());
  std::vector<double> raw(k_total);
  double qn = query_embedding.norm();
  for (int k = 0; k < k_total; ++k) {
    require_arg(encoded[k].size() == query_embedding.size(),
                "route: dimension mismatch");
    double s = query_embedding.dot(encoded[k]);
    if (sim == Similarity::cosine) {
      double denom = qn * encoded[k].norm();
      s = denom > 0.0 ? s / denom : 0.0;
    }
    raw[k] = s;
  }

  std::vector<int> order(k_total);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (raw[a] != raw[b]) return raw[a] > raw[b];
    return a < b;
  });

  const int m = std::min(top_m, k_total);
  RoutingResult out;
  out.indices.assign(order.begin(), order.begin() + m);
  out.scores.resize(m);
  for (int i = 0; i < m; ++i) out.scores[i] = raw[out.indices[i]] / tau;

  double mx = *std::max_element(out.scores.begin(), out.scores.end());
  out.weights.resize(m);
  double z = 0.0;
  for (int i = 0; i < m; ++i) {
    out.weights[i] = std::exp(out.scores[i] - mx);
    z += out.weights[i];
  }
  for (double& w : out.weights) w /= z;
  return out;
}

}  // namespace protofed
