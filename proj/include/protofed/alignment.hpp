#pragma once

#include "protofed/types.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace protofed {

enum class BregmanKind { squared_euclidean, negative_entropy };

// D_Psi(x||y) = Psi(x) - Psi(y) - <grad Psi(y), x - y> for strictly convex
// Psi. squared_euclidean: Psi = 0.5||.||^2. negative_entropy: Psi = sum x log x
// on the positive orthant (generalized KL).
struct BregmanGenerator {
  BregmanKind kind = BregmanKind::squared_euclidean;

  double psi(const Vector& x) const {
    if (kind == BregmanKind::squared_euclidean) return 0.5 * x.squaredNorm();
    check_domain(x);
    return (x.array() * x.array().log()).sum();
  }

  Vector grad_psi(const Vector& x) const {
    if (kind == BregmanKind::squared_euclidean) return x;
    check_domain(x);
    return (x.array().log() + 1.0).matrix();
  }

  void check_domain(const Vector& x) const {
    if (kind == BregmanKind::negative_entropy)
      require_arg((x.array() > 0.0).all(),
                  "negative_entropy requires strictly positive entries");
  }
};

inline double bregman(const Vector& x, const Vector& y,
                      const BregmanGenerator& gen) {
  require_arg(x.size() == y.size(), "bregman: dimension mismatch");
  gen.check_domain(x);
  gen.check_domain(y);
  double d = gen.psi(x) - gen.psi(y) - gen.grad_psi(y).dot(x - y);
  return std::max(d, 0.0);  // clamp tiny negative rounding
}

// -log softmax_assigned(<z, v_j> / tau_a over all j), computed with a
// max-shifted log-sum-exp.
inline double info_nce(const Vector& z, const std::vector<Vector>& prototypes,
                       int assigned, double tau_a) {
  require_arg(!prototypes.empty(), "info_nce: empty prototype list");
  require_arg(assigned >= 0 && assigned < int(prototypes.size()),
              "info_nce: assigned out of range");
  require_arg(tau_a > 0.0, "info_nce: tau_a must be positive");
  std::vector<double> s(prototypes.size());
  for (std::size_t j = 0; j < prototypes.size(); ++j)
    s[j] = z.dot(prototypes[j]) / tau_a;
  double mx = *std::max_element(s.begin(), s.end());
  double lse = 0.0;
  for (double v : s) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  return std::max(lse - s[assigned], 0.0);
}

struct AlignResult {
  double value = 0.0;
  Vector grad;   // d/dz with the assignment held fixed
  int assigned = -1;
};

// Nearest-prototype Bregman pull plus InfoNCE sharpening. The argmin
// assignment is recomputed here and treated as a constant inside the
// gradient; ties go to the lower index.
inline AlignResult align_value_and_grad(const Vector& z,
                                        const std::vector<Vector>& encoded,
                                        const BregmanGenerator& gen,
                                        double gamma, double tau_a) {
  require_arg(!encoded.empty(), "align: empty prototype library");
  int assigned = 0;
  double best = bregman(z, encoded[0], gen);
  for (int k = 1; k < int(encoded.size()); ++k) {
    double d = bregman(z, encoded[k], gen);
    if (d < best) {
      best = d;
      assigned = k;
    }
  }

  AlignResult out;
  out.assigned = assigned;
  out.value = best;
  out.grad = gen.grad_psi(z) - gen.grad_psi(encoded[assigned]);

  if (gamma > 0.0) {
    require_arg(tau_a > 0.0, "align: tau_a must be positive");
    out.value += gamma * info_nce(z, encoded, assigned, tau_a);
    std::vector<double> s(encoded.size());
    for (std::size_t j = 0; j < encoded.size(); ++j)
      s[j] = z.dot(encoded[j]) / tau_a;
    double mx = *std::max_element(s.begin(), s.end());
    double zsum = 0.0;
    for (double v : s) zsum += std::exp(v - mx);
    Vector softmax_mix = Vector::Zero(z.size());
    for (std::size_t j = 0; j < encoded.size(); ++j)
      softmax_mix += (std::exp(s[j] - mx) / zsum) * encoded[j];
    out.grad += (gamma / tau_a) * (softmax_mix - encoded[assigned]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Entropic optimal transport
// ---------------------------------------------------------------------------

struct EmpiricalMeasure {
  std::vector<Vector> atoms;
  std::vector<double> weights;  // on the simplex

  static EmpiricalMeasure uniform(std::vector<Vector> atoms_in) {
    EmpiricalMeasure m;
    m.atoms = std::move(atoms_in);
    m.weights.assign(m.atoms.size(), 1.0 / double(m.atoms.size()));
    return m;
  }

  void validate() const {
    require_arg(!atoms.empty(), "measure needs at least one atom");
    require_arg(atoms.size() == weights.size(), "measure: size mismatch");
    double s = 0.0;
    for (double w : weights) {
      require_arg(w >= 0.0, "measure: negative weight");
      s += w;
    }
    require_arg(std::abs(s - 1.0) <= 1e-9, "measure: weights must sum to 1");
  }
};

struct SinkhornResult {
  double cost = 0.0;        // <plan, C>, entropic term excluded
  Matrix plan;              // n x m coupling
  bool converged = false;
  int iterations = 0;
  double marginal_error = 0.0;  // l1 violation of both marginals
};

// Log-domain Sinkhorn between two empirical measures under squared Euclidean
// cost. Non-convergence is reported through the flag, not an exception.
inline SinkhornResult sinkhorn_transport(const EmpiricalMeasure& mu,
                                         const EmpiricalMeasure& nu,
                                         double epsilon, int max_iter,
                                         double tol) {
  mu.validate();
  nu.validate();
  require_arg(epsilon > 0.0, "sinkhorn: epsilon must be positive");
  require_arg(max_iter > 0 && tol > 0.0, "sinkhorn: bad iteration controls");

  const int n = int(mu.atoms.size());
  const int m = int(nu.atoms.size());
  Matrix cost(n, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      cost(i, j) = (mu.atoms[i] - nu.atoms[j]).squaredNorm();

  Vector log_a(n), log_b(m);
  for (int i = 0; i < n; ++i)
    log_a[i] = mu.weights[i] > 0.0 ? std::log(mu.weights[i]) : -1e300;
  for (int j = 0; j < m; ++j)
    log_b[j] = nu.weights[j] > 0.0 ? std::log(nu.weights[j]) : -1e300;

  Vector f = Vector::Zero(n), g = Vector::Zero(m);
  auto lse = [](const Vector& v) {
    double mx = v.maxCoeff();
    if (!std::isfinite(mx)) return mx;
    return mx + std::log((v.array() - mx).exp().sum());
  };
  auto update = [&](double eps) {
    for (int i = 0; i < n; ++i) {
      Vector v(m);
      for (int j = 0; j < m; ++j) v[j] = log_b[j] + (g[j] - cost(i, j)) / eps;
      f[i] = -eps * lse(v);
    }
    for (int j = 0; j < m; ++j) {
      Vector v(n);
      for (int i = 0; i < n; ++i) v[i] = log_a[i] + (f[i] - cost(i, j)) / eps;
      g[j] = -eps * lse(v);
    }
  };

  // Anneal epsilon from the cost scale down to the target; the warm-started
  // potentials make small-epsilon convergence practical.
  double cost_scale = cost.maxCoeff();
  if (cost_scale > 0.0) {
    for (double eps = cost_scale; eps > epsilon; eps *= 0.5) update(eps);
  }

  SinkhornResult out;
  Matrix plan(n, m);
  for (int it = 0; it < max_iter; ++it) {
    update(epsilon);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j)
        plan(i, j) = std::exp((f[i] + g[j] - cost(i, j)) / epsilon +
                              log_a[i] + log_b[j]);

    double row_err = 0.0, col_err = 0.0;
    for (int i = 0; i < n; ++i)
      row_err += std::abs(plan.row(i).sum() - mu.weights[i]);
    for (int j = 0; j < m; ++j)
      col_err += std::abs(plan.col(j).sum() - nu.weights[j]);
    out.iterations = it + 1;
    out.marginal_error = row_err + col_err;
    if (out.marginal_error <= tol) {
      out.converged = true;
      break;
    }
  }
  out.plan = plan;
  out.cost = (plan.array() * cost.array()).sum();
  return out;
}

struct SinkhornParams {
  double epsilon = 0.05;
  int max_iter = 500;
  double tol = 1e-6;
};

struct WassersteinResult {
  double value = 0.0;
  bool converged = false;
};

// Entropic approximation of the squared 2-Wasserstein distance between the
// client history measure and the prototype mixture sum_k rho_k delta_{v_k}.
inline WassersteinResult wasserstein_align(const EmpiricalMeasure& history,
                                           const std::vector<Vector>& encoded,
                                           const std::vector<double>& rho,
                                           const SinkhornParams& params = {}) {
  require_arg(!encoded.empty(), "wasserstein_align: empty prototype library");
  require_arg(rho.size() == encoded.size(), "wasserstein_align: rho size");
  EmpiricalMeasure nu;
  nu.atoms = encoded;
  nu.weights = rho;
  SinkhornResult sr = sinkhorn_transport(history, nu, params.epsilon,
                                         params.max_iter, params.tol);
  return {sr.cost, sr.converged};
}

// Gradient of the transport cost w.r.t. one atom of mu, with the plan held
// fixed: sum_j plan(i,j) * 2 (x_i - y_j).
inline Vector transport_atom_gradient(const SinkhornResult& sr,
                                      const EmpiricalMeasure& mu,
                                      const EmpiricalMeasure& nu,
                                      int atom_index) {
  require_arg(atom_index >= 0 && atom_index < int(mu.atoms.size()),
              "transport_atom_gradient: index out of range");
  Vector g = Vector::Zero(mu.atoms[atom_index].size());
  for (int j = 0; j < int(nu.atoms.size()); ++j)
    g += sr.plan(atom_index, j) * 2.0 * (mu.atoms[atom_index] - nu.atoms[j]);
  return g;
}

}  // namespace protofed
