#pragma once

#include "protofed/encoder.hpp"
#include "protofed/rng.hpp"
#include "protofed/server.hpp"
#include "protofed/types.hpp"

#include <cmath>
#include <cstdint>

namespace protofed {

struct DPConfig {
  double sigma = 0.0;         // client-side Gaussian noise scale
  double delta = 1e-5;
  double clip_radius = 1.0;
  long rounds = 1;            // expected release count for epsilon_for
  long upload_period = 500;   // R: local steps between uploads
  double drift_trigger = std::numeric_limits<double>::infinity();

  void validate() const {
    require_arg(sigma >= 0.0, "dp: sigma must be nonnegative");
    require_arg(delta > 0.0 && delta < 1.0, "dp: delta in (0,1)");
    require_arg(clip_radius > 0.0, "dp: clip_radius must be positive");
    require_arg(upload_period >= 1, "dp: upload_period must be positive");
    require_arg(drift_trigger >= 0.0, "dp: drift_trigger must be nonnegative");
  }
};

// Fixed seeded orthonormal projection d_phi -> d_c plus a uniform 8-bit
// per-coordinate quantizer with per-vector scale/offset. Either stage can be
// disabled.
class Compressor {
 public:
  Compressor() = default;

  static Compressor make(int d_phi, int d_c, bool quantize, std::uint64_t seed) {
    require_arg(d_c >= 1 && d_c <= d_phi, "compressor: need 1 <= d_c <= d_phi");
    Compressor c;
    c.quantize_ = quantize;
    if (d_c == d_phi) {
      c.projection_ = Matrix::Identity(d_phi, d_c);
    } else {
      RngStream rng = RngStream::derive(seed, "compressor");
      Matrix g = rng.gaussian_matrix(d_phi, d_c);
      Eigen::HouseholderQR<Matrix> qr(g);
      c.projection_ = qr.householderQ() * Matrix::Identity(d_phi, d_c);
    }
    return c;
  }

  static Compressor identity(int d_phi) { return make(d_phi, d_phi, false, 0); }

  const Matrix& projection() const { return projection_; }  // columns orthonormal
  int d_c() const { return int(projection_.cols()); }
  int d_phi() const { return int(projection_.rows()); }
  bool quantizes() const { return quantize_; }

  Vector compress(const Vector& x) const {
    require_arg(x.size() == projection_.rows(), "compress: dimension mismatch");
    return projection_.transpose() * x;
  }

  // Lift back into d_phi space (transpose of the orthonormal projection).
  Vector lift(const Vector& y) const {
    require_arg(y.size() == projection_.cols(), "lift: dimension mismatch");
    return projection_ * y;
  }

  Vector quantize_roundtrip(const Vector& x) const {
    if (!quantize_) return x;
    double lo = x.minCoeff();
    double hi = x.maxCoeff();
    double scale = (hi - lo) / 255.0;
    if (scale <= 0.0) return x;
    Vector out(x.size());
    for (int i = 0; i < x.size(); ++i) {
      double q = std::round((x[i] - lo) / scale);
      out[i] = lo + scale * q;
    }
    return out;
  }

  // Approximate wire size of one upload: one byte per coordinate when
  // quantized (plus scale/offset), full doubles otherwise.
  long payload_bytes() const {
    return quantize_ ? long(d_c()) + 16 : long(d_c()) * 8;
  }

 private:
  Matrix projection_;
  bool quantize_ = true;
};

// Client-side release pipeline: encode -> project -> clip -> quantize ->
// Gaussian noise. Deterministic given the seed.
inline Vector make_upload(const Matrix& p_long, const Encoder& phi,
                          const Compressor& comp, const DPConfig& dp,
                          std::uint64_t rng_seed) {
  dp.validate();
  Vector z = comp.compress(phi.encode_prompt(p_long));
  z = clip(z, dp.clip_radius);
  z = comp.quantize_roundtrip(z);
  if (dp.sigma > 0.0) {
    RngStream rng = RngStream::derive(rng_seed, "dp_noise");
    z += rng.gaussian_vector(int(z.size()), dp.sigma);
  }
  return z;
}

// Periodic or drift-triggered release schedule.
inline bool should_upload(long step, double drift_mag, const DPConfig& dp) {
  require_arg(step >= 0, "should_upload: step must be nonnegative");
  require_arg(drift_mag >= 0.0, "should_upload: drift must be nonnegative");
  return step % dp.upload_period == 0 || drift_mag > dp.drift_trigger;
}

// Analytic Gaussian-mechanism bound, composed linearly over the configured
// release count. Sensitivity S = 2 * clip_radius (replace-one neighboring
// sets of clipped vectors). Deliberately conservative.
inline double epsilon_for(const DPConfig& dp) {
  dp.validate();
  if (dp.sigma == 0.0) return std::numeric_limits<double>::infinity();
  double sensitivity = 2.0 * dp.clip_radius;
  double per_release =
      sensitivity * std::sqrt(2.0 * std::log(1.25 / dp.delta)) / dp.sigma;
  return per_release * double(dp.rounds);
}

// Tracks actual releases during a run; epsilon reports use the worst client.
struct PrivacyAccountant {
  long total_releases = 0;
  std::vector<long> per_client;

  void init(int n_clients) { per_client.assign(n_clients, 0); }

  void record(int client) {
    ++total_releases;
    if (client >= 0 && client < int(per_client.size())) ++per_client[client];
  }

  long max_client_releases() const {
    long mx = 0;
    for (long v : per_client) mx = std::max(mx, v);
    return mx;
  }

  double composed_epsilon(const DPConfig& dp) const {
    DPConfig d = dp;
    d.rounds = std::max<long>(max_client_releases(), 0);
    if (d.rounds == 0) return 0.0;
    return epsilon_for(d);
  }
};

}  // namespace protofed
