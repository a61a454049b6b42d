#include "protofed/privacy.hpp"

#include "support/oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace protofed;

TEST_CASE("compressor projection and quantizer") {
  Compressor comp = Compressor::make(8, 4, true, 7);

  SECTION("projection columns are orthonormal") {
    const Matrix& p = comp.projection();
    CHECK((p.transpose() * p - Matrix::Identity(4, 4)).norm() < 1e-9);
  }

  SECTION("quantizer round-trip error is at most one step per coordinate") {
    RngStream rng(1);
    for (int t = 0; t < 100; ++t) {
      Vector x = rng.gaussian_vector(4, 2.0);
      double step = (x.maxCoeff() - x.minCoeff()) / 255.0;
      Vector rt = comp.quantize_roundtrip(x);
      for (int i = 0; i < 4; ++i) CHECK(std::abs(rt[i] - x[i]) <= step + 1e-12);
    }
  }

  SECTION("degenerate constant vector is unchanged") {
    Vector x = Vector::Constant(4, 0.7);
    CHECK((comp.quantize_roundtrip(x) - x).norm() == 0.0);
  }
}

TEST_CASE("make_upload pipeline") {
  const int rows = 2, d = 6, d_phi = 4;
  Encoder phi = Encoder::linear(rows, d, d_phi, 3);
  DPConfig dp;
  dp.clip_radius = 1.0;

  SECTION("no noise, identity projection, no quantization equals clip(phi(p))") {
    Compressor comp = Compressor::identity(d_phi);
    dp.sigma = 0.0;
    RngStream rng(2);
    Matrix p = rng.gaussian_matrix(rows, d, 2.0);
    Vector expect = clip(phi.encode_prompt(p), dp.clip_radius);
    Vector got = make_upload(p, phi, comp, dp, 99);
    CHECK((got - expect).norm() == 0.0);
  }

  SECTION("identical seeds give identical uploads") {
    Compressor comp = Compressor::make(d_phi, 2, true, 5);
    dp.sigma = 0.4;
    RngStream rng(3);
    Matrix p = rng.gaussian_matrix(rows, d);
    Vector a = make_upload(p, phi, comp, dp, 1234);
    Vector b = make_upload(p, phi, comp, dp, 1234);
    CHECK((a - b).norm() == 0.0);
  }

  SECTION("zero prompt upload is pure noise with variance sigma^2") {
    Compressor comp = Compressor::identity(d_phi);
    dp.sigma = 0.5;
    Matrix zero = Matrix::Zero(rows, d);
    std::vector<double> samples;
    for (int rep = 0; rep < 10000; ++rep) {
      Vector u = make_upload(zero, phi, comp, dp, 500 + rep);
      for (int i = 0; i < d_phi; ++i) samples.push_back(u[i]);
    }
    auto m = oracles::sample_moments(samples);
    CHECK(std::abs(m.mean) < 0.02);
    CHECK(std::abs(m.variance - 0.25) < 0.05 * 0.25);
  }
}

TEST_CASE("should_upload schedule") {
  DPConfig dp;
  dp.upload_period = 500;
  dp.drift_trigger = 0.1;
  CHECK(should_upload(500, 0.0, dp));
  CHECK_FALSE(should_upload(1, 0.0, dp));
  CHECK(should_upload(1, 0.2, dp));
  CHECK(should_upload(7, 0.2, dp));
  CHECK_FALSE(should_upload(499, 0.1, dp));  // trigger is strict
}

TEST_CASE("epsilon accounting") {
  DPConfig dp;
  dp.clip_radius = 1.0;  // S = 2
  dp.delta = 1e-5;
  dp.rounds = 1;

  SECTION("large sigma drives epsilon to zero") {
    dp.sigma = 1e6;
    CHECK(epsilon_for(dp) < 1e-4);
  }

  SECTION("strictly decreasing in sigma") {
    double prev = std::numeric_limits<double>::infinity();
    for (double sigma : {0.2, 0.4, 0.8}) {
      dp.sigma = sigma;
      double eps = epsilon_for(dp);
      double closed_form = 2.0 * std::sqrt(2.0 * std::log(1.25 / dp.delta)) / sigma;
      CHECK(eps == Catch::Approx(closed_form).epsilon(1e-12));
      CHECK(eps < prev);
      prev = eps;
    }
  }

  SECTION("linear composition doubles with the release count") {
    dp.sigma = 0.4;
    dp.rounds = 3;
    double e3 = epsilon_for(dp);
    dp.rounds = 6;
    CHECK(epsilon_for(dp) == Catch::Approx(2.0 * e3).epsilon(1e-12));
  }

  SECTION("sigma = 0 reports the infinity sentinel") {
    dp.sigma = 0.0;
    CHECK(std::isinf(epsilon_for(dp)));
  }

  SECTION("accountant tracks the worst client") {
    PrivacyAccountant acc;
    acc.init(3);
    acc.record(0);
    acc.record(1);
    acc.record(1);
    CHECK(acc.total_releases == 3);
    CHECK(acc.max_client_releases() == 2);
    dp.sigma = 0.4;
    dp.rounds = 2;
    CHECK(acc.composed_epsilon(dp) == Catch::Approx(epsilon_for(dp)));
  }
}

TEST_CASE("clipping bounds the sensitivity of released cluster means") {
  RngStream rng(4);
  const double R = 1.0;
  for (int t = 0; t < 50; ++t) {
    int n = 2 + int(rng.uniform_index(8));
    std::vector<Vector> a;
    for (int i = 0; i < n; ++i) a.push_back(rng.gaussian_vector(3, 3.0));
    std::vector<Vector> b = a;
    b[0] = rng.gaussian_vector(3, 3.0);  // neighboring set: one client replaced

    auto mean_clipped = [&](const std::vector<Vector>& vs) {
      Vector m = Vector::Zero(3);
      for (const Vector& v : vs) m += clip(v, R);
      return Vector(m / double(vs.size()));
    };
    double diff = (mean_clipped(a) - mean_clipped(b)).norm();
    CHECK(diff <= 2.0 * R / double(n) + 1e-12);
  }
}
