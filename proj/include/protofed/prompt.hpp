#pragma once

#include "protofed/alignment.hpp"
#include "protofed/encoder.hpp"
#include "protofed/server.hpp"
#include "protofed/types.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace protofed {

struct StabilityConfig {
  double eta_s = 5e-3;        // short-term step
  double eta_l = 1e-3;        // long-term step
  double lambda_p = 1e-4;     // l1 sparsity weight
  double lambda_s_max = 0.5;  // ceiling of the adaptive stability weight
  double kappa_drift = 1.0;   // drift sensitivity in the adaptive weight
  double gamma = 0.5;         // InfoNCE weight

  void validate() const {
    require_arg(eta_s > 0.0 && eta_l > 0.0, "stability: steps must be positive");
    require_arg(lambda_p >= 0.0 && lambda_s_max >= 0.0 && gamma >= 0.0,
                "stability: weights must be nonnegative");
    require_arg(kappa_drift > 0.0, "stability: kappa must be positive");
  }
};

// Rolling summary of query-embedding drift. Within a slice the current mean
// is an exponential moving average; at slice end the jump magnitude is
// recorded and the previous mean advances.
struct DriftTracker {
  Vector rolling_mean_prev;
  Vector rolling_mean_curr;
  long window = 0;  // queries averaged into the current mean
  std::vector<double> drift_history;
  double ema_decay = 0.9;

  void observe(const Vector& query_embedding) {
    if (window == 0) {
      rolling_mean_curr = query_embedding;
      rolling_mean_prev = query_embedding;
    } else {
      rolling_mean_curr = ema_decay * rolling_mean_curr +
                          (1.0 - ema_decay) * query_embedding;
    }
    ++window;
  }

  void end_slice() {
    if (window == 0) return;
    drift_history.push_back((rolling_mean_curr - rolling_mean_prev).norm());
    rolling_mean_prev = rolling_mean_curr;
  }

  Vector delta() const {
    if (window == 0) return Vector();
    return rolling_mean_curr - rolling_mean_prev;
  }

  double current_drift() const {
    return window == 0 ? 0.0 : (rolling_mean_curr - rolling_mean_prev).norm();
  }

  // Mean recorded slice-to-slice drift magnitude.
  double drift_mean() const {
    if (drift_history.empty()) return 0.0;
    double s = 0.0;
    for (double d : drift_history) s += d;
    return s / double(drift_history.size());
  }
};

struct DualPromptState {
  Matrix p_long;
  Matrix p_short;
  Vector alpha_params;  // a, length d_phi
  DriftTracker drift;

  static DualPromptState zeros(int prompt_rows, int d, int d_phi) {
    DualPromptState s;
    s.p_long = Matrix::Zero(prompt_rows, d);
    s.p_short = Matrix::Zero(prompt_rows, d);
    s.alpha_params = Vector::Zero(d_phi);
    return s;
  }

  void check_shapes() const {
    require_arg(p_long.rows() == p_short.rows() &&
                    p_long.cols() == p_short.cols(),
                "dual prompt state: shape mismatch");
  }
};

// Element-wise soft threshold: sign(z) * max(|z| - tau, 0). The exact
// proximal operator of tau * l1.
template <typename Derived>
inline auto soft_thresh(const Eigen::MatrixBase<Derived>& z, double tau) {
  require_arg(tau >= 0.0, "soft_thresh: tau must be nonnegative");
  return z.unaryExpr([tau](double v) {
    double m = std::abs(v) - tau;
    return m > 0.0 ? (v > 0.0 ? m : -m) : 0.0;
  });
}

// p_long + alpha * p_short + sum_k w_k c_k.
inline Matrix compose_prompt(
    const DualPromptState& state, double alpha,
    const std::vector<std::pair<double, const Matrix*>>& retrieved) {
  state.check_shapes();
  require_arg(alpha >= 0.0, "compose_prompt: alpha must be nonnegative");
  Matrix out = state.p_long + alpha * state.p_short;
  if (!retrieved.empty()) {
    double wsum = 0.0;
    for (const auto& [w, c] : retrieved) {
      require_arg(w >= 0.0, "compose_prompt: negative weight");
      require_arg(c->rows() == out.rows() && c->cols() == out.cols(),
                  "compose_prompt: prototype shape mismatch");
      wsum += w;
    }
    require_arg(std::abs(wsum - 1.0) <= 1e-6,
                "compose_prompt: retrieval weights must sum to 1");
    for (const auto& [w, c] : retrieved) out += w * (*c);
  }
  return out;
}

// Fast sparse update: p_short <- SoftThresh(p_short - eta_s * grad, eta_s * lambda_p).
inline void short_update(DualPromptState& state, const Matrix& grad_rec,
                         const StabilityConfig& cfg) {
  require_arg(grad_rec.rows() == state.p_short.rows() &&
                  grad_rec.cols() == state.p_short.cols(),
              "short_update: gradient shape mismatch");
  state.p_short =
      soft_thresh(state.p_short - cfg.eta_s * grad_rec, cfg.eta_s * cfg.lambda_p);
}

struct AlignmentParams {
  BregmanGenerator generator;
  double tau_a = 0.1;
};

// Slow anchored update: one explicit gradient step on L_rec + lambda_s * A,
// with the nearest-prototype assignment recomputed here and held constant
// inside the gradient.
inline void long_update(DualPromptState& state, const Matrix& grad_rec_long,
                        const PrototypeLibrary& library, const Encoder& phi,
                        double lambda_s, const StabilityConfig& cfg,
                        const AlignmentParams& align = {}) {
  require_arg(lambda_s >= 0.0, "long_update: lambda_s must be nonnegative");
  require_arg(grad_rec_long.rows() == state.p_long.rows() &&
                  grad_rec_long.cols() == state.p_long.cols(),
              "long_update: gradient shape mismatch");
  Matrix grad = grad_rec_long;
  if (lambda_s > 0.0) {
    require_state(!library.empty(),
                  "long_update: alignment requested with empty library");
    Vector z = phi.encode_prompt(state.p_long);
    AlignResult ar = align_value_and_grad(z, library.encoded, align.generator,
                                          cfg.gamma, align.tau_a);
    grad += lambda_s * phi.prompt_gradient(state.p_long, ar.grad);
  }
  state.p_long -= cfg.eta_l * grad;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// Session-adaptive short-term scale sigma(a^T (e_curr - e_prev)), clamped
// away from the saturation endpoints.
inline double session_alpha(const DualPromptState& state) {
  Vector d = state.drift.delta();
  if (d.size() == 0) return 0.5;
  require_arg(d.size() == state.alpha_params.size(),
              "session_alpha: dimension mismatch");
  double a = sigmoid(state.alpha_params.dot(d));
  return std::min(std::max(a, 1e-12), 1.0 - 1e-12);
}

// User-adaptive stability weight: lambda_max * exp(-kappa * mean drift).
// Highly drifting users get weaker alignment.
inline double adaptive_lambda_s(double drift_mean, const StabilityConfig& cfg) {
  require_arg(drift_mean >= 0.0, "adaptive_lambda_s: drift must be nonnegative");
  return cfg.lambda_s_max * std::exp(-cfg.kappa_drift * drift_mean);
}

}  // namespace protofed
