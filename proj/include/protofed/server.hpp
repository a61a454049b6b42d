#pragma once

#include "protofed/alignment.hpp"
#include "protofed/encoder.hpp"
#include "protofed/rng.hpp"
#include "protofed/types.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <vector>

namespace protofed {

// Fixed linear decoder from d_phi back to prompt space: the right inverse of
// the encoder's pool-and-project map. Every row of the decoded prompt equals
// P^T v, so mean-pooling returns P^T v and re-encoding returns v exactly for
// the linear encoder kind.
class PromptDecoder {
 public:
  PromptDecoder() = default;

  static PromptDecoder from_encoder(const Encoder& enc) {
    PromptDecoder d;
    d.rows_ = enc.prompt_rows();
    d.lift_ = enc.projection().transpose();  // d x d_phi, orthonormal columns
    return d;
  }

  // Pseudo-inverse of the mlp encoder's linear skeleton (W2 W1); the decode
  // round trip is only approximate for that kind.
  static PromptDecoder from_mlp(const Encoder& enc) {
    PromptDecoder d;
    d.rows_ = enc.prompt_rows();
    Matrix skeleton = enc.W2() * enc.W1();  // d_phi x d
    d.lift_ = skeleton.completeOrthogonalDecomposition().pseudoInverse();
    return d;
  }

  Matrix decode(const Vector& v) const {
    require_state(lift_.size() > 0, "decoder not initialized");
    Vector pooled = lift_ * v;
    Matrix p(rows_, pooled.size());
    p.rowwise() = pooled.transpose();
    return p;
  }

  bool initialized() const { return lift_.size() > 0; }

 private:
  int rows_ = 0;
  Matrix lift_;
};

struct PrototypeLibrary {
  std::vector<Matrix> prototypes;   // c_k in prompt space, L_p x d
  std::vector<Vector> encoded;      // v_k = phi(c_k), d_phi
  std::vector<double> utilization;  // assignment mass from the latest round
  double rho_sep = 0.5;
  double tau_util = 0.01;
  bool separation_feasible = true;  // false if the last sweep hit max_sweeps

  int size() const { return int(encoded.size()); }
  bool empty() const { return encoded.empty(); }

  double min_pairwise_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < size(); ++i)
      for (int j = i + 1; j < size(); ++j)
        best = std::min(best, (encoded[i] - encoded[j]).norm());
    return best;
  }

  // Rebuilds prompt-space prototypes from the encoded vectors and re-encodes
  // them, keeping the two representations consistent.
  void sync_from_encoded(const PromptDecoder& dec, const Encoder& phi) {
    prototypes.resize(encoded.size());
    for (std::size_t k = 0; k < encoded.size(); ++k) {
      prototypes[k] = dec.decode(encoded[k]);
      encoded[k] = phi.encode_prompt(prototypes[k]);
    }
  }
};

enum class AggregatorKind { dp_fedkmeans, geometric_median, wasserstein_barycenter };

struct AggregatorConfig {
  AggregatorKind kind = AggregatorKind::dp_fedkmeans;
  double beta = 0.5;         // server momentum in (0, 1]
  double clip_radius = 1.0;  // R_clip
  double noise_sigma = 0.0;  // server-side Gaussian scale (per Eq-8 path)
  int separation_max_sweeps = 400;
  SinkhornParams sinkhorn;   // barycenter variant
  int barycenter_support = 1;

  void validate() const {
    require_arg(beta > 0.0 && beta <= 1.0, "aggregator: beta in (0,1]");
    require_arg(clip_radius > 0.0, "aggregator: clip_radius > 0");
    require_arg(noise_sigma >= 0.0, "aggregator: noise_sigma >= 0");
  }
};

struct RoundUploads {
  std::vector<int> client_ids;
  std::vector<Vector> vectors;  // z_u in d_phi

  int size() const { return int(vectors.size()); }
  bool empty() const { return vectors.empty(); }
};

// Rescale to norm <= R, direction preserved.
inline Vector clip(const Vector& z, double clip_radius) {
  require_arg(clip_radius > 0.0, "clip: radius must be positive");
  double n = z.norm();
  if (n <= clip_radius) return z;
  return z * (clip_radius / n);
}

// Nearest-prototype partition; ties to the lower index.
inline std::vector<std::vector<int>> assign(const RoundUploads& uploads,
                                            const PrototypeLibrary& library) {
  require_arg(!library.empty(), "assign: empty library");
  std::vector<std::vector<int>> parts(library.size());
  for (int u = 0; u < uploads.size(); ++u) {
    int best = 0;
    double best_d = (uploads.vectors[u] - library.encoded[0]).squaredNorm();
    for (int k = 1; k < library.size(); ++k) {
      double d = (uploads.vectors[u] - library.encoded[k]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    parts[best].push_back(u);
  }
  return parts;
}

struct WeiszfeldResult {
  Vector point;
  bool converged = false;
  int iterations = 0;
};

// Geometric median by Weiszfeld iterations. If an iterate lands on a data
// point, restart from that point plus a tiny seeded jitter.
inline WeiszfeldResult geometric_median(const std::vector<Vector>& points,
                                        int max_iter = 200, double tol = 1e-9,
                                        std::uint64_t jitter_seed = 0) {
  require_arg(!points.empty(), "geometric_median: no points");
  WeiszfeldResult out;
  if (points.size() == 1) {
    out.point = points[0];
    out.converged = true;
    return out;
  }
  Vector y = Vector::Zero(points[0].size());
  for (const Vector& p : points) y += p;
  y /= double(points.size());

  for (int it = 0; it < max_iter; ++it) {
    for (const Vector& p : points) {
      if ((y - p).norm() < 1e-12) {
        RngStream rng = RngStream::derive(jitter_seed, "weiszfeld_jitter", it);
        y = p + 1e-9 * rng.unit_vector(int(p.size()));
        break;
      }
    }
    Vector num = Vector::Zero(y.size());
    double den = 0.0;
    for (const Vector& p : points) {
      double w = 1.0 / (y - p).norm();
      num += w * p;
      den += w;
    }
    Vector y_next = num / den;
    double step = (y_next - y).norm();
    y = y_next;
    out.iterations = it + 1;
    if (step <= tol) {
      out.converged = true;
      break;
    }
  }
  out.point = y;
  return out;
}

struct BarycenterResult {
  EmpiricalMeasure measure;
  bool converged = false;
  int iterations = 0;
};

// Fixed-size-support entropic barycenter of the input measures. Support is
// seeded from `init_support` plus jitter; iterations alternate Sinkhorn
// transports with barycentric support updates until the support stops moving.
inline BarycenterResult wasserstein_barycenter(
    const std::vector<EmpiricalMeasure>& measures, int support_size,
    const Vector& init_support, const SinkhornParams& params, int max_iter = 50,
    double tol = 1e-6, std::uint64_t jitter_seed = 0) {
  require_arg(!measures.empty(), "barycenter: no measures");
  require_arg(support_size >= 1, "barycenter: support_size >= 1");

  const int dim = int(init_support.size());
  RngStream rng = RngStream::derive(jitter_seed, "barycenter_init");
  std::vector<Vector> support(support_size);
  for (int s = 0; s < support_size; ++s) {
    support[s] = init_support;
    if (support_size > 1) support[s] += 0.01 * rng.gaussian_vector(dim);
  }
  std::vector<double> bw(support_size, 1.0 / double(support_size));

  BarycenterResult out;
  const double measure_w = 1.0 / double(measures.size());
  for (int it = 0; it < max_iter; ++it) {
    std::vector<Vector> num(support_size, Vector::Zero(dim));
    std::vector<double> den(support_size, 0.0);
    bool all_converged = true;
    for (const EmpiricalMeasure& m : measures) {
      EmpiricalMeasure cur;
      cur.atoms = support;
      cur.weights = bw;
      SinkhornResult sr = sinkhorn_transport(cur, m, params.epsilon,
                                             params.max_iter, params.tol);
      all_converged = all_converged && sr.converged;
      for (int s = 0; s < support_size; ++s) {
        for (int j = 0; j < int(m.atoms.size()); ++j) {
          num[s] += measure_w * sr.plan(s, j) * m.atoms[j];
          den[s] += measure_w * sr.plan(s, j);
        }
      }
    }
    double shift = 0.0;
    for (int s = 0; s < support_size; ++s) {
      if (den[s] <= 1e-300) continue;
      Vector next = num[s] / den[s];
      shift = std::max(shift, (next - support[s]).norm());
      support[s] = next;
    }
    out.iterations = it + 1;
    if (shift <= tol) {
      out.converged = all_converged;
      break;
    }
  }
  out.measure.atoms = support;
  out.measure.weights = bw;
  return out;
}

namespace detail {

// One pairwise repulsion sweep over the encoded vectors; returns true when no
// pair violated the margin. Coincident pairs separate along a seeded random
// direction.
inline bool separation_sweep(std::vector<Vector>& v, double rho,
                             std::uint64_t seed, int sweep) {
  bool clean = true;
  for (int i = 0; i < int(v.size()); ++i) {
    for (int j = i + 1; j < int(v.size()); ++j) {
      Vector diff = v[i] - v[j];
      double dist = diff.norm();
      if (dist >= rho - 1e-9) continue;  // the library margin
      clean = false;
      Vector dir;
      if (dist < 1e-12) {
        RngStream rng = RngStream::derive(seed, "separation_dir", sweep, i, j);
        dir = rng.unit_vector(int(v[i].size()));
        dist = 0.0;
      } else {
        dir = diff / dist;
      }
      double delta = 0.5 * (rho - dist);
      v[i] += delta * dir;
      v[j] -= delta * dir;
    }
  }
  return clean;
}

}  // namespace detail

// Repeated pairwise sweeps until all pairwise distances reach rho or the
// sweep budget is exhausted (library then flagged infeasible). Already
// feasible libraries are returned unchanged.
inline void enforce_separation(PrototypeLibrary& library, double rho,
                               int max_sweeps, const PromptDecoder& dec,
                               const Encoder& phi, std::uint64_t seed = 0) {
  require_arg(rho > 0.0, "enforce_separation: rho must be positive");
  require_arg(max_sweeps > 0, "enforce_separation: max_sweeps must be positive");
  if (library.size() < 2) {
    library.separation_feasible = true;
    return;
  }
  bool clean = true;
  for (int i = 0; i < library.size() && clean; ++i)
    for (int j = i + 1; j < library.size() && clean; ++j)
      clean = (library.encoded[i] - library.encoded[j]).norm() >= rho - 1e-9;
  if (clean) {
    library.separation_feasible = true;
    return;  // bitwise untouched
  }

  bool feasible = false;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    if (detail::separation_sweep(library.encoded, rho, seed, sweep)) {
      feasible = true;
      break;
    }
  }
  library.separation_feasible = feasible;
  if (!feasible)
    log::warn("enforce_separation: still infeasible after sweep budget");
  library.sync_from_encoded(dec, phi);
  // The decode/encode round trip is exact for the linear encoder; for the
  // mlp encoder re-check and flag rather than loop forever.
  if (library.min_pairwise_distance() < rho - 1e-9)
    library.separation_feasible = false;
}

struct PruneResult {
  int reseeded = 0;
  bool skipped_empty_window = false;
};

// KMeans++-style reseeding of under-utilized prototypes from the recent
// upload window: candidates are drawn with probability proportional to the
// squared distance to the nearest surviving prototype.
inline PruneResult prune_or_reinit(PrototypeLibrary& library,
                                   const std::vector<Vector>& uploads_window,
                                   const PromptDecoder& dec, const Encoder& phi,
                                   std::uint64_t seed = 0,
                                   int separation_max_sweeps = 50) {
  require_state(library.utilization.size() == library.encoded.size(),
                "prune_or_reinit: utilization not populated");
  PruneResult out;
  std::vector<int> dead;
  for (int k = 0; k < library.size(); ++k)
    if (library.utilization[k] < library.tau_util) dead.push_back(k);
  if (dead.empty()) return out;
  if (uploads_window.empty()) {
    out.skipped_empty_window = true;
    log::warn("prune_or_reinit: empty upload window, reseeding skipped");
    return out;
  }

  std::vector<bool> is_dead(library.size(), false);
  for (int k : dead) is_dead[k] = true;

  int draw = 0;
  for (int k : dead) {
    // Squared distance to the nearest surviving prototype.
    std::vector<double> w(uploads_window.size(), 0.0);
    double total = 0.0;
    for (std::size_t c = 0; c < uploads_window.size(); ++c) {
      double best = std::numeric_limits<double>::infinity();
      for (int j = 0; j < library.size(); ++j) {
        if (is_dead[j]) continue;
        best = std::min(best,
                        (uploads_window[c] - library.encoded[j]).squaredNorm());
      }
      if (!std::isfinite(best)) best = 1.0;  // no survivors: uniform
      w[c] = best;
      total += best;
    }
    RngStream rng = RngStream::derive(seed, "prune_reseed", k, draw++);
    int chosen = 0;
    if (total <= 0.0) {
      chosen = int(rng.uniform_index(uploads_window.size()));
    } else {
      double r = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t c = 0; c < uploads_window.size(); ++c) {
        acc += w[c];
        if (r <= acc) {
          chosen = int(c);
          break;
        }
      }
    }
    library.encoded[k] = uploads_window[chosen];
    is_dead[k] = false;  // reseeded prototypes join the survivor set
    ++out.reseeded;
  }
  library.sync_from_encoded(dec, phi);
  // Reseeding may land inside another prototype's margin; repair it here so a
  // full server round always ends separated.
  enforce_separation(library, library.rho_sep, separation_max_sweeps, dec, phi,
                     seed ^ 0x5eedULL);
  return out;
}

// One DP-FedKMeans update: per nonempty cluster, momentum step toward the
// clipped-mean plus Gaussian noise. Empty clusters stay untouched (no noise
// is spent on them) and utilization becomes |A_k| / sum |A_j|.
inline void dp_fedkmeans_step(const RoundUploads& uploads,
                              PrototypeLibrary& library,
                              const AggregatorConfig& agg, double noise_sigma,
                              std::uint64_t rng_seed) {
  agg.validate();
  auto parts = assign(uploads, library);
  double total = double(uploads.size());
  library.utilization.assign(library.size(), 0.0);
  for (int k = 0; k < library.size(); ++k) {
    library.utilization[k] = total > 0.0 ? parts[k].size() / total : 0.0;
    if (parts[k].empty()) continue;
    Vector mean = Vector::Zero(library.encoded[k].size());
    for (int u : parts[k]) mean += clip(uploads.vectors[u], agg.clip_radius);
    mean /= double(parts[k].size());
    if (noise_sigma > 0.0) {
      RngStream rng = RngStream::derive(rng_seed, "server_noise", k);
      mean += rng.gaussian_vector(int(mean.size()), noise_sigma);
    }
    library.encoded[k] = (1.0 - agg.beta) * library.encoded[k] + agg.beta * mean;
  }
}

// Robust variant: per-cluster geometric median of the clipped uploads, noise
// added once to the final estimate, then the same momentum combine.
inline void geometric_median_step(const RoundUploads& uploads,
                                  PrototypeLibrary& library,
                                  const AggregatorConfig& agg,
                                  double noise_sigma, std::uint64_t rng_seed) {
  agg.validate();
  auto parts = assign(uploads, library);
  double total = double(uploads.size());
  library.utilization.assign(library.size(), 0.0);
  for (int k = 0; k < library.size(); ++k) {
    library.utilization[k] = total > 0.0 ? parts[k].size() / total : 0.0;
    if (parts[k].empty()) continue;
    std::vector<Vector> pts;
    pts.reserve(parts[k].size());
    for (int u : parts[k]) pts.push_back(clip(uploads.vectors[u], agg.clip_radius));
    WeiszfeldResult med = geometric_median(pts, 200, 1e-9, rng_seed ^ k);
    if (!med.converged && pts.size() > 1)
      log::warn("geometric_median: cluster " + std::to_string(k) +
                " used last iterate");
    Vector est = med.point;
    if (noise_sigma > 0.0) {
      RngStream rng = RngStream::derive(rng_seed, "server_noise", k);
      est += rng.gaussian_vector(int(est.size()), noise_sigma);
    }
    library.encoded[k] = (1.0 - agg.beta) * library.encoded[k] + agg.beta * est;
  }
}

// Dispatches one aggregation update for the configured kind. The barycenter
// variant treats each upload as a singleton measure of its cluster.
inline void aggregate_step(const RoundUploads& uploads,
                           PrototypeLibrary& library,
                           const AggregatorConfig& agg, double noise_sigma,
                           std::uint64_t rng_seed);

// Distributional variant: per-cluster entropic barycenter of the client
// measures (singleton measures by default), noised on the final support.
inline void wasserstein_barycenter_step(
    const std::vector<std::vector<EmpiricalMeasure>>& cluster_measures,
    const std::vector<double>& utilization, PrototypeLibrary& library,
    const AggregatorConfig& agg, double noise_sigma, std::uint64_t rng_seed) {
  agg.validate();
  require_arg(int(cluster_measures.size()) == library.size(),
              "barycenter_step: cluster count mismatch");
  library.utilization = utilization;
  for (int k = 0; k < library.size(); ++k) {
    if (cluster_measures[k].empty()) continue;
    BarycenterResult br = wasserstein_barycenter(
        cluster_measures[k], agg.barycenter_support, library.encoded[k],
        agg.sinkhorn, 50, 1e-6, rng_seed ^ (0xb4 + k));
    // Single support atom by default; collapse multi-atom supports to the
    // weighted mean so prototypes stay single vectors.
    Vector est = Vector::Zero(library.encoded[k].size());
    for (std::size_t s = 0; s < br.measure.atoms.size(); ++s)
      est += br.measure.weights[s] * br.measure.atoms[s];
    if (noise_sigma > 0.0) {
      RngStream rng = RngStream::derive(rng_seed, "server_noise", k);
      est += rng.gaussian_vector(int(est.size()), noise_sigma);
    }
    library.encoded[k] = (1.0 - agg.beta) * library.encoded[k] + agg.beta * est;
  }
}

inline void aggregate_step(const RoundUploads& uploads,
                           PrototypeLibrary& library,
                           const AggregatorConfig& agg, double noise_sigma,
                           std::uint64_t rng_seed) {
  switch (agg.kind) {
    case AggregatorKind::dp_fedkmeans:
      dp_fedkmeans_step(uploads, library, agg, noise_sigma, rng_seed);
      return;
    case AggregatorKind::geometric_median:
      geometric_median_step(uploads, library, agg, noise_sigma, rng_seed);
      return;
    case AggregatorKind::wasserstein_barycenter: {
      auto parts = assign(uploads, library);
      double total = double(uploads.size());
      std::vector<std::vector<EmpiricalMeasure>> cm(library.size());
      std::vector<double> util(library.size(), 0.0);
      for (int k = 0; k < library.size(); ++k) {
        util[k] = total > 0.0 ? parts[k].size() / total : 0.0;
        for (int u : parts[k])
          cm[k].push_back(EmpiricalMeasure::uniform(
              {clip(uploads.vectors[u], agg.clip_radius)}));
      }
      wasserstein_barycenter_step(cm, util, library, agg, noise_sigma,
                                  rng_seed);
      return;
    }
  }
}

}  // namespace protofed
