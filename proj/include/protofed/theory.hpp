#pragma once

#include "protofed/prompt.hpp"
#include "protofed/rng.hpp"
#include "protofed/types.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace protofed::theory {

// Online quadratic stream: per round t the objective is
//   F_t(w) = 0.5 ||A w - b_t||^2 + lambda_p ||s||_1 + (lambda_s/2) ||u - c_t||^2
// where w = (u, s) splits into the long block (first d_long coords) and the
// short block. The feasible set is the Euclidean ball of the given radius
// (diameter D = 2 radius) unless the radius is infinite.
struct QuadraticStream {
  Matrix A;                 // shared across rounds
  std::vector<Vector> b;    // one per round
  std::vector<Vector> c;    // anchor per round, length d_long
  int d_long = 0;
  double lambda_s = 0.0;
  double lambda_p = 0.0;
  double eta = 0.1;
  double radius = std::numeric_limits<double>::infinity();
  Vector w0;

  int dim() const { return int(A.cols()); }
  int rounds() const { return int(b.size()); }
  bool constrained() const { return std::isfinite(radius); }

  void validate() const {
    require_arg(rounds() >= 1 && c.size() == b.size(), "stream: round mismatch");
    require_arg(d_long >= 0 && d_long <= dim(), "stream: bad block split");
    require_arg(eta > 0.0 && lambda_s >= 0.0 && lambda_p >= 0.0,
                "stream: bad parameters");
    require_arg(int(w0.size()) == dim(), "stream: w0 dimension");
  }

  // Hessian of the smooth part: A^T A + lambda_s on the long block.
  Matrix smooth_hessian() const {
    Matrix h = A.transpose() * A;
    for (int i = 0; i < d_long; ++i) h(i, i) += lambda_s;
    return h;
  }

  double f_value(int t, const Vector& w) const {
    double v = 0.5 * (A * w - b[t]).squaredNorm();
    if (lambda_s > 0.0)
      v += 0.5 * lambda_s * (w.head(d_long) - c[t]).squaredNorm();
    if (lambda_p > 0.0)
      v += lambda_p * w.tail(dim() - d_long).cwiseAbs().sum();
    return v;
  }

  // Gradient of F_t at w in (-b A^T + ...) form; linear term only.
  Vector smooth_linear_term(int t) const {
    Vector rhs = A.transpose() * b[t];
    rhs.head(d_long) += lambda_s * c[t];
    return rhs;
  }
};

struct ProxResult {
  Vector w;
  bool on_boundary = false;
  double multiplier = 0.0;  // ball-constraint multiplier
};

namespace detail {

// Solves min 0.5 w^T M w - rhs^T w subject to ||w|| <= radius for symmetric
// positive definite M, by eigendecomposition plus a 1-D search on the
// multiplier (tolerance 1e-10).
inline ProxResult solve_ball_quadratic(const Matrix& M, const Vector& rhs,
                                       double radius) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(M);
  require_state(eig.info() == Eigen::Success, "prox: eigensolver failed");
  const Vector& lam = eig.eigenvalues();
  require_state(lam.minCoeff() > 0.0, "prox: singular system");
  Vector y = eig.eigenvectors().transpose() * rhs;

  auto norm2_at = [&](double nu) {
    double s = 0.0;
    for (int i = 0; i < y.size(); ++i) {
      double z = y[i] / (lam[i] + nu);
      s += z * z;
    }
    return s;
  };

  ProxResult out;
  if (!std::isfinite(radius) || norm2_at(0.0) <= radius * radius) {
    out.w = eig.eigenvectors() * (y.array() / lam.array()).matrix();
    return out;
  }

  double lo = 0.0, hi = 1.0;
  while (norm2_at(hi) > radius * radius) hi *= 2.0;
  for (int it = 0; it < 200 && (hi - lo) > 1e-10 * std::max(1.0, lo); ++it) {
    double mid = 0.5 * (lo + hi);
    if (norm2_at(mid) > radius * radius) lo = mid;
    else hi = mid;
  }
  double nu = 0.5 * (lo + hi);
  out.on_boundary = true;
  out.multiplier = nu;
  out.w = eig.eigenvectors() * (y.array() / (lam.array() + nu)).matrix();
  return out;
}

}  // namespace detail

// One proximal step: argmin_{w in W} F_t(w) + (1/2 eta) ||w - w_prev||^2.
// The smooth path (lambda_p = 0) is solved exactly through the linear
// system; the l1 path requires a diagonal A (separable objective) and is
// solved coordinatewise by soft thresholding.
inline ProxResult prox_step(const QuadraticStream& st, int t,
                            const Vector& w_prev) {
  st.validate();
  require_arg(t >= 0 && t < st.rounds(), "prox_step: round out of range");

  if (st.lambda_p == 0.0) {
    Matrix M = st.smooth_hessian();
    M.diagonal().array() += 1.0 / st.eta;
    Vector rhs = st.smooth_linear_term(t) + w_prev / st.eta;
    return detail::solve_ball_quadratic(M, rhs, st.radius);
  }

  // l1 path: coordinatewise closed form, unconstrained.
  require_arg(!st.constrained(), "prox_step: l1 path is unconstrained");
  require_arg(st.A.rows() == st.A.cols(), "prox_step: l1 path needs square A");
  for (int i = 0; i < st.A.rows(); ++i)
    for (int j = 0; j < st.A.cols(); ++j)
      require_arg(i == j || st.A(i, j) == 0.0,
                  "prox_step: l1 path needs a diagonal A");

  const int d = st.dim();
  ProxResult out;
  out.w = Vector(d);
  for (int i = 0; i < d; ++i) {
    double a = st.A(i, i);
    double quad = a * a + 1.0 / st.eta;
    double lin = a * st.b[t][i] + w_prev[i] / st.eta;
    if (i < st.d_long) {
      quad += st.lambda_s;
      lin += st.lambda_s * st.c[t][i];
    }
    double target = lin / quad;
    if (i < st.d_long) {
      out.w[i] = target;
    } else {
      double tau = st.lambda_p / quad;
      double m = std::abs(target) - tau;
      out.w[i] = m > 0.0 ? (target > 0.0 ? m : -m) : 0.0;
    }
  }
  return out;
}

// Per-round constrained minimizer of F_t alone (the dynamic comparator).
inline Vector round_minimizer(const QuadraticStream& st, int t) {
  require_arg(st.lambda_p == 0.0, "round_minimizer: smooth path only");
  Matrix M = st.smooth_hessian();
  Vector rhs = st.smooth_linear_term(t);
  return detail::solve_ball_quadratic(M, rhs, st.radius).w;
}

// Slack of F(x+) - F(u) <= (1/2 eta)(||u-x||^2 - ||u-x+||^2 - ||x+-x||^2);
// nonnegative slack certifies the inequality.
inline double check_three_point(const QuadraticStream& st, int t,
                                const Vector& x, const Vector& x_plus,
                                const Vector& u) {
  double lhs = st.f_value(t, x_plus) - st.f_value(t, u);
  double rhs = ((u - x).squaredNorm() - (u - x_plus).squaredNorm() -
                (x_plus - x).squaredNorm()) /
               (2.0 * st.eta);
  return rhs - lhs;
}

struct RegretCertificate {
  double lhs = 0.0;          // sum of per-round regrets
  double rhs = 0.0;          // (1/2 eta)||u_1 - w_0||^2 + (D/eta) V_T
  double slack = 0.0;        // rhs - lhs
  double path_length = 0.0;  // V_T of the comparator
  double min_three_point_slack = std::numeric_limits<double>::infinity();
  std::vector<double> three_point_slacks;
  bool holds(double tol = -1e-8) const {
    return slack >= tol && min_three_point_slack >= tol;
  }
};

enum class ComparatorKind { per_round_minimizers, custom };

// Runs the proximal update over the stream and certifies the dynamic regret
// bound against the chosen comparator sequence.
inline RegretCertificate run_regret_experiment(
    const QuadraticStream& st,
    ComparatorKind comparator = ComparatorKind::per_round_minimizers,
    const std::vector<Vector>* custom_comparators = nullptr) {
  st.validate();
  require_arg(st.constrained(), "regret experiment needs a bounded domain");

  std::vector<Vector> u(st.rounds());
  if (comparator == ComparatorKind::custom) {
    require_arg(custom_comparators != nullptr &&
                    int(custom_comparators->size()) == st.rounds(),
                "regret: bad custom comparator sequence");
    for (int t = 0; t < st.rounds(); ++t) {
      u[t] = (*custom_comparators)[t];
      require_arg(u[t].norm() <= st.radius + 1e-12,
                  "regret: comparator outside the feasible set");
    }
  } else {
    for (int t = 0; t < st.rounds(); ++t) u[t] = round_minimizer(st, t);
  }

  RegretCertificate cert;
  Vector w_prev = st.w0;
  for (int t = 0; t < st.rounds(); ++t) {
    ProxResult pr = prox_step(st, t, w_prev);
    double tp = check_three_point(st, t, w_prev, pr.w, u[t]);
    cert.three_point_slacks.push_back(tp);
    cert.min_three_point_slack = std::min(cert.min_three_point_slack, tp);
    cert.lhs += st.f_value(t, pr.w) - st.f_value(t, u[t]);
    if (t > 0) cert.path_length += (u[t] - u[t - 1]).norm();
    w_prev = pr.w;
  }
  double diameter = 2.0 * st.radius;
  cert.rhs = (u[0] - st.w0).squaredNorm() / (2.0 * st.eta) +
             diameter / st.eta * cert.path_length;
  cert.slack = cert.rhs - cert.lhs;
  return cert;
}

// ---------------------------------------------------------------------------
// Anchor-induced contraction of the optimal path
// ---------------------------------------------------------------------------

struct ContractionReport {
  double kappa = 0.0;        // ||(H + lambda_s I)^{-1} H||_op
  double alpha = 0.0;        // ||lambda_s (H + lambda_s I)^{-1}||_op
  double kappa_bound = 0.0;  // L / (mu + lambda_s)
  double alpha_bound = 0.0;  // lambda_s / (mu + lambda_s)
  double mu = 0.0;
  double L = 0.0;
  double min_step_slack = std::numeric_limits<double>::infinity();
  double path_sum_slack = 0.0;
  double max_decomposition_error = 0.0;
  double anchored_path = 0.0;    // V_T of the anchored optima
  double free_path = 0.0;        // V_T of the unanchored optima
  double anchor_path = 0.0;      // V_T of the anchors
  bool holds(double tol = -1e-8) const {
    return min_step_slack >= tol && path_sum_slack >= tol &&
           kappa <= kappa_bound + 1e-12 && alpha <= alpha_bound + 1e-12;
  }
};

// Closed-form verification of the contraction proposition: with A = H^{1/2},
// u_t^o = H^{-1} A b_t and u_t^* = (H + lambda_s I)^{-1} (A b_t + lambda_s c_t),
// each step satisfies ||u_t^* - u_{t-1}^*|| <= kappa ||u_t^o - u_{t-1}^o|| +
// alpha ||c_t - c_{t-1}||, with the operator norms computed by symmetric
// eigendecomposition.
inline ContractionReport check_contraction(const Matrix& H, double lambda_s,
                                           const std::vector<Vector>& b_seq,
                                           const std::vector<Vector>& c_seq) {
  require_arg(H.rows() == H.cols(), "contraction: H must be square");
  require_arg(b_seq.size() == c_seq.size() && b_seq.size() >= 2,
              "contraction: need at least two rounds");
  require_arg(lambda_s >= 0.0, "contraction: lambda_s must be nonnegative");

  Eigen::SelfAdjointEigenSolver<Matrix> eig(H);
  require_state(eig.info() == Eigen::Success, "contraction: eigensolver failed");
  const Vector& lam = eig.eigenvalues();
  require_arg(lam.minCoeff() > 0.0, "contraction: H must be positive definite");

  ContractionReport rep;
  rep.mu = lam.minCoeff();
  rep.L = lam.maxCoeff();
  double kappa = 0.0, alpha = 0.0;
  for (int i = 0; i < lam.size(); ++i) {
    kappa = std::max(kappa, lam[i] / (lam[i] + lambda_s));
    alpha = std::max(alpha, lambda_s / (lam[i] + lambda_s));
  }
  rep.kappa = kappa;
  rep.alpha = alpha;
  rep.kappa_bound = rep.L / (rep.mu + lambda_s);
  rep.alpha_bound = lambda_s / (rep.mu + lambda_s);

  const Matrix& Q = eig.eigenvectors();
  Matrix a_half = Q * lam.cwiseSqrt().asDiagonal() * Q.transpose();  // H^{1/2}
  Matrix h_inv = Q * lam.cwiseInverse().asDiagonal() * Q.transpose();
  Matrix reg_inv =
      Q * (lam.array() + lambda_s).inverse().matrix().asDiagonal() * Q.transpose();

  const int T = int(b_seq.size());
  std::vector<Vector> u_free(T), u_anchor(T);
  for (int t = 0; t < T; ++t) {
    Vector atb = a_half * b_seq[t];
    u_free[t] = h_inv * atb;
    u_anchor[t] = reg_inv * (atb + lambda_s * c_seq[t]);
  }

  for (int t = 1; t < T; ++t) {
    double step_star = (u_anchor[t] - u_anchor[t - 1]).norm();
    double step_free = (u_free[t] - u_free[t - 1]).norm();
    double step_anchor = (c_seq[t] - c_seq[t - 1]).norm();
    rep.min_step_slack = std::min(
        rep.min_step_slack, kappa * step_free + alpha * step_anchor - step_star);
    rep.anchored_path += step_star;
    rep.free_path += step_free;
    rep.anchor_path += step_anchor;

    // Decomposition identity: the anchored difference equals the two-term sum.
    Vector decomp = reg_inv * H * (u_free[t] - u_free[t - 1]) +
                    lambda_s * reg_inv * (c_seq[t] - c_seq[t - 1]);
    double scale = std::max(1.0, (u_anchor[t] - u_anchor[t - 1]).norm());
    rep.max_decomposition_error =
        std::max(rep.max_decomposition_error,
                 ((u_anchor[t] - u_anchor[t - 1]) - decomp).norm() / scale);
  }
  rep.path_sum_slack =
      kappa * rep.free_path + alpha * rep.anchor_path - rep.anchored_path;
  return rep;
}

// ---------------------------------------------------------------------------
// Randomized certification suites
// ---------------------------------------------------------------------------

struct SuiteSummary {
  int instances = 0;
  int failures = 0;
  double min_slack = std::numeric_limits<double>::infinity();
  std::uint64_t worst_seed = 0;
  bool passed(double tol = -1e-8) const { return failures == 0 && min_slack >= tol; }
};

inline QuadraticStream random_stream(std::uint64_t seed, int max_rounds = 50,
                                     int max_dim = 10) {
  RngStream rng = RngStream::derive(seed, "theory_stream");
  QuadraticStream st;
  int d = 2 + int(rng.uniform_index(max_dim - 1));
  int T = 1 + int(rng.uniform_index(max_rounds));
  st.d_long = 1 + int(rng.uniform_index(d));
  // A = H^{1/2} for a well-conditioned random PD matrix.
  Matrix G = rng.gaussian_matrix(d, d);
  Matrix H = G.transpose() * G + (0.1 + rng.uniform()) * Matrix::Identity(d, d);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(H);
  st.A = eig.eigenvectors() * eig.eigenvalues().cwiseSqrt().asDiagonal() *
         eig.eigenvectors().transpose();
  st.lambda_s = rng.uniform() < 0.2 ? 0.0 : rng.uniform(0.0, 2.0);
  st.eta = rng.uniform(0.02, 1.0);
  st.radius = rng.uniform(0.5, 4.0);
  st.w0 = st.radius * rng.uniform() * rng.unit_vector(d);
  Vector b = rng.gaussian_vector(d);
  Vector c = rng.gaussian_vector(st.d_long, 0.5);
  for (int t = 0; t < T; ++t) {
    b += rng.gaussian_vector(d, 0.3);  // drifting targets
    c += rng.gaussian_vector(st.d_long, 0.2);
    st.b.push_back(b);
    st.c.push_back(c);
  }
  return st;
}

inline SuiteSummary run_regret_suite(int instances, std::uint64_t seed,
                                     double tol = -1e-8) {
  SuiteSummary s;
  s.instances = instances;
  for (int i = 0; i < instances; ++i) {
    std::uint64_t inst_seed = seed + i;
    QuadraticStream st = random_stream(inst_seed);
    RegretCertificate cert = run_regret_experiment(st);
    double worst = std::min(cert.slack, cert.min_three_point_slack);
    if (worst < s.min_slack) {
      s.min_slack = worst;
      s.worst_seed = inst_seed;
    }
    if (!cert.holds(tol)) ++s.failures;
  }
  return s;
}

inline SuiteSummary run_contraction_suite(int instances, std::uint64_t seed,
                                          double tol = -1e-8) {
  SuiteSummary s;
  s.instances = instances;
  for (int i = 0; i < instances; ++i) {
    std::uint64_t inst_seed = seed + i;
    RngStream rng = RngStream::derive(inst_seed, "theory_contraction");
    int d = 2 + int(rng.uniform_index(9));
    // Random PD spectrum with condition number at most 1e3.
    double lam_min = 1e-2 + rng.uniform();
    Vector lam(d);
    for (int k = 0; k < d; ++k)
      lam[k] = lam_min * std::exp(rng.uniform() * std::log(1e3));
    Matrix G = rng.gaussian_matrix(d, d);
    Eigen::HouseholderQR<Matrix> qr(G);
    Matrix Q = qr.householderQ() * Matrix::Identity(d, d);
    Matrix H = Q * lam.asDiagonal() * Q.transpose();
    H = 0.5 * (H + H.transpose());
    double lambda_s = rng.uniform() < 0.15 ? 0.0 : rng.uniform(0.0, 5.0);

    int T = 5 + int(rng.uniform_index(26));
    std::vector<Vector> b_seq, c_seq;
    Vector b = rng.gaussian_vector(d);
    Vector c = rng.gaussian_vector(d);
    for (int t = 0; t < T; ++t) {
      b += rng.gaussian_vector(d, 0.4);
      c += rng.gaussian_vector(d, 0.3);
      b_seq.push_back(b);
      c_seq.push_back(c);
    }
    ContractionReport rep = check_contraction(H, lambda_s, b_seq, c_seq);
    double worst = std::min(rep.min_step_slack, rep.path_sum_slack);
    if (worst < s.min_slack) {
      s.min_slack = worst;
      s.worst_seed = inst_seed;
    }
    if (!rep.holds(tol)) ++s.failures;
  }
  return s;
}

}  // namespace protofed::theory
