#pragma once

#include "protofed/types.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

namespace protofed {

inline constexpr std::array<int, 3> kRankCutoffs = {5, 10, 20};

// Single relevant item: NDCG@K = 1/log2(1+rank) inside the cutoff, 0 outside.
inline double ndcg_at(int rank_1based, int k) {
  require_arg(rank_1based >= 1, "ndcg_at: rank is 1-based");
  if (rank_1based > k) return 0.0;
  return 1.0 / std::log2(1.0 + double(rank_1based));
}

inline double hit_rate_at(int rank_1based, int k) {
  require_arg(rank_1based >= 1, "hit_rate_at: rank is 1-based");
  return rank_1based <= k ? 1.0 : 0.0;
}

inline double mrr_at(int rank_1based, int k) {
  require_arg(rank_1based >= 1, "mrr_at: rank is 1-based");
  return rank_1based <= k ? 1.0 / double(rank_1based) : 0.0;
}

// A[s][t] = NDCG@10 on slice s after training through slice t. The lower
// triangle is filled during the run; the first superdiagonal A[s][s-1] feeds
// forward transfer, and scratch[s] holds the zero-prompt reference.
struct AccuracyMatrix {
  int T = 0;
  Matrix A;                      // T x T, NaN where undefined
  std::vector<double> scratch;   // per-slice zero-prompt accuracy

  explicit AccuracyMatrix(int n_slices = 0) { reset(n_slices); }

  void reset(int n_slices) {
    T = n_slices;
    A = Matrix::Constant(T, T, std::numeric_limits<double>::quiet_NaN());
    scratch.assign(T, std::numeric_limits<double>::quiet_NaN());
  }

  void set(int slice, int trained_through, double value) {
    require_arg(slice >= 0 && slice < T && trained_through >= 0 &&
                    trained_through < T,
                "accuracy matrix: index out of range");
    A(slice, trained_through) = value;
  }

  double at(int slice, int trained_through) const {
    double v = A(slice, trained_through);
    require_state(!std::isnan(v), "accuracy matrix: entry not populated");
    return v;
  }

  bool complete() const {
    for (int s = 0; s < T; ++s)
      for (int t = s; t < T; ++t)
        if (std::isnan(A(s, t))) return false;
    return true;
  }
};

// AF = mean_{s<T} (max_{t' <= T-1} A_s^{t'} - A_s^T), 0-based internally.
inline double average_forgetting(const AccuracyMatrix& m) {
  require_state(m.T >= 2 && m.complete(), "AF: matrix incomplete");
  double acc = 0.0;
  for (int s = 0; s < m.T - 1; ++s) {
    double peak = -std::numeric_limits<double>::infinity();
    for (int t = s; t <= m.T - 2; ++t) peak = std::max(peak, m.at(s, t));
    acc += peak - m.at(s, m.T - 1);
  }
  return acc / double(m.T - 1);
}

// BWT = mean_{s<T} (A_s^T - A_s^s).
inline double backward_transfer(const AccuracyMatrix& m) {
  require_state(m.T >= 2 && m.complete(), "BWT: matrix incomplete");
  double acc = 0.0;
  for (int s = 0; s < m.T - 1; ++s) acc += m.at(s, m.T - 1) - m.at(s, s);
  return acc / double(m.T - 1);
}

// FWT = mean_{s>=2} (A_s^{s-1} - scratch_s).
inline double forward_transfer(const AccuracyMatrix& m) {
  require_state(m.T >= 2, "FWT: need at least two slices");
  double acc = 0.0;
  for (int s = 1; s < m.T; ++s) {
    double before = m.at(s, s - 1);
    double scratch = m.scratch[s];
    require_state(!std::isnan(scratch), "FWT: scratch accuracy missing");
    acc += before - scratch;
  }
  return acc / double(m.T - 1);
}

// First recorded step whose value reaches 95% of the converged plateau
// (mean of the last 10% of the trajectory). Flat series return the first
// step; an unreachable threshold returns the int32 max sentinel.
inline long steps_to_95(const std::vector<std::pair<long, double>>& trajectory) {
  require_arg(!trajectory.empty(), "steps_to_95: empty trajectory");
  std::size_t tail = std::max<std::size_t>(1, trajectory.size() / 10);
  double plateau = 0.0;
  for (std::size_t i = trajectory.size() - tail; i < trajectory.size(); ++i)
    plateau += trajectory[i].second;
  plateau /= double(tail);
  double threshold = 0.95 * plateau;
  for (const auto& [step, v] : trajectory)
    if (v >= threshold) return step;
  return std::numeric_limits<int32_t>::max();
}

// Per-query record kept from the current-slice evaluations; feeds the
// freshness metrics and exposure accounting.
struct QueryRecord {
  int user = -1;
  int slice = -1;
  int rank = 0;                  // 1-based rank of the positive
  std::vector<int> top_items;    // top-10 item ids in rank order
};

struct SliceAccuracy {
  double hr[3] = {0, 0, 0};     // K in {5, 10, 20}
  double ndcg[3] = {0, 0, 0};
  double mrr[3] = {0, 0, 0};
  long queries = 0;
};

struct MetricsReport {
  std::vector<SliceAccuracy> per_slice;  // freshness: slice t evaluated at t
  double af = 0.0;
  double bwt = 0.0;
  double fwt = 0.0;
  std::vector<long> steps_to_95_per_slice;
  double mean_steps_to_95 = 0.0;
  double disparity_item = 0.0;
  double disparity_user = 0.0;
  double ndcg10_mean = 0.0;      // mean over slices of A_t^t
  double ndcg10_final_mean = 0.0;  // mean over slices of A_s^T (retention)
  // Efficiency counters. Wall-clock lives in run_info, not in metric files.
  long trainable_params_per_client = 0;
  long upload_bytes_total = 0;
  long upload_count = 0;
  double epsilon_per_release = 0.0;
  double epsilon_composed = 0.0;
};

struct ExposureStrata {
  std::vector<bool> head_item;        // top decile by interaction count
  std::vector<bool> high_activity;    // top tercile of users
  std::vector<bool> low_activity;     // bottom tercile of users
};

// Item-side: |mean head exposure - mean tail exposure| over top-10 lists.
// User-side: |mean HR@10 of high-activity - low-activity| query groups.
inline void exposure_disparity(const std::vector<QueryRecord>& queries,
                               const ExposureStrata& strata,
                               MetricsReport& report) {
  if (queries.empty()) return;
  std::vector<long> exposure(strata.head_item.size(), 0);
  long total_exposure = 0;
  for (const QueryRecord& q : queries) {
    for (int item : q.top_items) {
      exposure[item]++;
      total_exposure++;
    }
  }
  double head_sum = 0.0, tail_sum = 0.0;
  long head_n = 0, tail_n = 0;
  for (std::size_t i = 0; i < exposure.size(); ++i) {
    if (strata.head_item[i]) {
      head_sum += exposure[i];
      head_n++;
    } else {
      tail_sum += exposure[i];
      tail_n++;
    }
  }
  if (head_n > 0 && tail_n > 0)
    report.disparity_item =
        std::abs(head_sum / double(head_n) - tail_sum / double(tail_n));

  double hi_sum = 0.0, lo_sum = 0.0;
  long hi_n = 0, lo_n = 0;
  for (const QueryRecord& q : queries) {
    double hr = hit_rate_at(q.rank, 10);
    if (strata.high_activity[q.user]) {
      hi_sum += hr;
      hi_n++;
    } else if (strata.low_activity[q.user]) {
      lo_sum += hr;
      lo_n++;
    }
  }
  if (hi_n > 0 && lo_n > 0)
    report.disparity_user = std::abs(hi_sum / double(hi_n) - lo_sum / double(lo_n));
}

}  // namespace protofed
