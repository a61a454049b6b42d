#include "protofed/alignment.hpp"

#include "protofed/rng.hpp"
#include "support/oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace protofed;

TEST_CASE("bregman divergences") {
  BregmanGenerator sq{BregmanKind::squared_euclidean};

  SECTION("squared euclidean analytic value") {
    Vector x(2), y(2);
    x << 1.0, 0.0;
    y << 0.0, 0.0;
    CHECK(bregman(x, y, sq) == Catch::Approx(0.5).margin(1e-15));
  }

  SECTION("identity of indiscernibles") {
    RngStream rng(1);
    for (int t = 0; t < 50; ++t) {
      Vector x = rng.gaussian_vector(4);
      CHECK(bregman(x, x, sq) == Catch::Approx(0.0).margin(1e-14));
      Vector y = rng.gaussian_vector(4);
      double d = bregman(x, y, sq);
      CHECK(d >= 0.0);
      if ((x - y).norm() > 1e-6) CHECK(d > 0.0);
    }
  }

  SECTION("negative entropy equals KL on the simplex") {
    BregmanGenerator ne{BregmanKind::negative_entropy};
    RngStream rng(2);
    for (int t = 0; t < 30; ++t) {
      Vector x(3), y(3);
      for (int i = 0; i < 3; ++i) {
        x[i] = 0.05 + rng.uniform();
        y[i] = 0.05 + rng.uniform();
      }
      x /= x.sum();
      y /= y.sum();
      double kl = 0.0;
      for (int i = 0; i < 3; ++i) kl += x[i] * std::log(x[i] / y[i]);
      CHECK(bregman(x, y, ne) == Catch::Approx(kl).margin(1e-12));
    }
  }

  SECTION("domain violation is an argument error") {
    BregmanGenerator ne{BregmanKind::negative_entropy};
    Vector x(2), y(2);
    x << 0.5, -0.1;
    y << 0.5, 0.5;
    CHECK_THROWS_AS(bregman(x, y, ne), std::invalid_argument);
  }
}

TEST_CASE("info_nce values") {
  RngStream rng(3);

  SECTION("single prototype gives exactly zero") {
    Vector z = rng.gaussian_vector(3);
    CHECK(info_nce(z, {rng.gaussian_vector(3)}, 0, 0.1) == 0.0);
  }

  SECTION("equal similarities give log K") {
    Vector z = Vector::Zero(3);  // all inner products zero
    std::vector<Vector> protos;
    for (int i = 0; i < 5; ++i) protos.push_back(rng.gaussian_vector(3));
    CHECK(info_nce(z, protos, 2, 0.1) == Catch::Approx(std::log(5.0)).margin(1e-12));
  }

  SECTION("matches a max-shifted log-sum-exp reference") {
    for (int t = 0; t < 30; ++t) {
      Vector z = rng.gaussian_vector(4, 3.0);
      std::vector<Vector> protos;
      for (int i = 0; i < 6; ++i) protos.push_back(rng.gaussian_vector(4, 3.0));
      double tau_a = 0.1;
      long double mx = -1e300L;
      std::vector<long double> s;
      for (const Vector& v : protos) {
        s.push_back((long double)(z.dot(v) / tau_a));
        mx = std::max(mx, s.back());
      }
      long double acc = 0.0L;
      for (long double v : s) acc += expl(v - mx);
      long double expect = (mx + logl(acc)) - s[3];
      CHECK(info_nce(z, protos, 3, tau_a) ==
            Catch::Approx(double(expect)).epsilon(1e-10).margin(1e-12));
      CHECK(info_nce(z, protos, 3, tau_a) >= 0.0);
    }
  }

  SECTION("decreasing in the assigned similarity") {
    Vector z(2);
    z << 1.0, 0.0;
    Vector va(2), vb(2);
    va << 0.2, 1.0;
    vb << 0.1, -1.0;
    double before = info_nce(z, {va, vb}, 0, 0.5);
    va[0] += 0.5;  // raises only the assigned inner product
    double after = info_nce(z, {va, vb}, 0, 0.5);
    CHECK(after < before);
  }

  SECTION("empty list is an argument error") {
    CHECK_THROWS_AS(info_nce(Vector::Ones(2), {}, 0, 0.1), std::invalid_argument);
  }
}

TEST_CASE("align_value_and_grad") {
  BregmanGenerator sq{BregmanKind::squared_euclidean};
  RngStream rng(4);

  SECTION("exact anchor with gamma = 0") {
    std::vector<Vector> protos = {rng.gaussian_vector(3), rng.gaussian_vector(3)};
    AlignResult r = align_value_and_grad(protos[1], protos, sq, 0.0, 0.1);
    CHECK(r.assigned == 1);
    CHECK(r.value == Catch::Approx(0.0).margin(1e-14));
    CHECK(r.grad.norm() < 1e-12);
  }

  SECTION("gamma = 0 gradient is z - v_assigned") {
    std::vector<Vector> protos = {rng.gaussian_vector(3), rng.gaussian_vector(3)};
    Vector z = rng.gaussian_vector(3);
    AlignResult r = align_value_and_grad(z, protos, sq, 0.0, 0.1);
    CHECK((r.grad - (z - protos[r.assigned])).norm() < 1e-14);
  }

  SECTION("gradient matches finite differences away from boundaries") {
    for (int t = 0; t < 20; ++t) {
      std::vector<Vector> protos;
      for (int i = 0; i < 4; ++i) protos.push_back(rng.gaussian_vector(3, 2.0));
      // Place z clearly nearest one prototype so the argmin is stable.
      int target = int(rng.uniform_index(4));
      Vector z = protos[target] + 0.05 * rng.gaussian_vector(3);
      double gamma = 0.5, tau_a = 0.7;
      AlignResult r = align_value_and_grad(z, protos, sq, gamma, tau_a);
      auto f = [&](const Vector& v) {
        return align_value_and_grad(v, protos, sq, gamma, tau_a).value;
      };
      Vector fd = oracles::finite_diff_vec(f, z, 1e-5);
      CHECK((fd - r.grad).norm() / std::max(1.0, r.grad.norm()) < 1e-5);
    }
  }

  SECTION("ties break to the lower index") {
    Vector v0(1), v1(1), z(1);
    v0 << 1.0;
    v1 << -1.0;
    z << 0.0;
    AlignResult r = align_value_and_grad(z, {v0, v1}, sq, 0.0, 0.1);
    CHECK(r.assigned == 0);
  }
}

TEST_CASE("sinkhorn transport") {
  SECTION("identical measures have near-zero cost at small epsilon") {
    RngStream rng(5);
    std::vector<Vector> atoms;
    for (int i = 0; i < 3; ++i) atoms.push_back(rng.unit_vector(2));
    EmpiricalMeasure mu = EmpiricalMeasure::uniform(atoms);
    SinkhornResult r = sinkhorn_transport(mu, mu, 1e-3, 2000, 1e-9);
    CHECK(r.cost <= 1e-3);
  }

  SECTION("two single atoms: cost is the exact squared distance") {
    Vector a(2), b(2);
    a << 0.0, 0.0;
    b << 1.5, 0.0;
    EmpiricalMeasure mu = EmpiricalMeasure::uniform({a});
    EmpiricalMeasure nu = EmpiricalMeasure::uniform({b});
    SinkhornResult r = sinkhorn_transport(mu, nu, 0.05, 100, 1e-9);
    CHECK(r.converged);
    CHECK(r.cost == Catch::Approx(2.25).margin(1e-9));
  }

  SECTION("3x3 uniform instances match the permutation oracle within 2%") {
    RngStream rng(6);
    for (int t = 0; t < 10; ++t) {
      std::vector<Vector> a, b;
      for (int i = 0; i < 3; ++i) {
        a.push_back(rng.gaussian_vector(2));
        b.push_back(rng.gaussian_vector(2));
      }
      EmpiricalMeasure mu = EmpiricalMeasure::uniform(a);
      EmpiricalMeasure nu = EmpiricalMeasure::uniform(b);
      SinkhornResult r = sinkhorn_transport(mu, nu, 0.02, 20000, 1e-5);
      REQUIRE(r.converged);
      double exact = oracles::ot_exact_uniform(a, b);
      CHECK(r.cost >= exact - 1e-4);
      CHECK(std::abs(r.cost - exact) <= 0.02 * std::max(exact, 1e-12));
    }
  }

  SECTION("marginal feasibility at the reported tolerance") {
    RngStream rng(7);
    std::vector<Vector> a, b;
    for (int i = 0; i < 4; ++i) a.push_back(rng.gaussian_vector(3));
    for (int i = 0; i < 2; ++i) b.push_back(rng.gaussian_vector(3));
    EmpiricalMeasure mu = EmpiricalMeasure::uniform(a);
    EmpiricalMeasure nu;
    nu.atoms = b;
    nu.weights = {0.3, 0.7};
    SinkhornResult r = sinkhorn_transport(mu, nu, 0.05, 2000, 1e-8);
    REQUIRE(r.converged);
    Vector row = r.plan.rowwise().sum();
    Vector col = r.plan.colwise().sum();
    double err = 0.0;
    for (int i = 0; i < 4; ++i) err += std::abs(row[i] - 0.25);
    for (int j = 0; j < 2; ++j) err += std::abs(col[j] - nu.weights[j]);
    CHECK(err <= 1e-8);
  }

  SECTION("cost is monotone nonincreasing as epsilon decreases") {
    RngStream rng(8);
    std::vector<Vector> a, b;
    for (int i = 0; i < 4; ++i) {
      a.push_back(rng.gaussian_vector(2));
      b.push_back(rng.gaussian_vector(2));
    }
    EmpiricalMeasure mu = EmpiricalMeasure::uniform(a);
    EmpiricalMeasure nu = EmpiricalMeasure::uniform(b);
    double prev = std::numeric_limits<double>::infinity();
    for (double eps : {0.5, 0.2, 0.1, 0.05, 0.02}) {
      SinkhornResult r = sinkhorn_transport(mu, nu, eps, 5000, 1e-10);
      CHECK(r.cost <= prev + 1e-9);
      prev = r.cost;
    }
  }

  SECTION("non-convergence is flagged, not thrown") {
    Vector a(1), b(1);
    a << 0.0;
    b << 10.0;
    EmpiricalMeasure mu = EmpiricalMeasure::uniform({a, b});
    EmpiricalMeasure nu = EmpiricalMeasure::uniform({-a, 2 * b});
    SinkhornResult r = sinkhorn_transport(mu, nu, 1e-4, 1, 1e-14);
    CHECK_FALSE(r.converged);
  }
}

TEST_CASE("wasserstein_align") {
  SECTION("history sitting on a one-hot prototype mixture costs zero") {
    Vector v0 = Vector::Ones(2), v1 = -Vector::Ones(2);
    EmpiricalMeasure hist = EmpiricalMeasure::uniform({v0, v0, v0});
    WassersteinResult r = wasserstein_align(hist, {v0, v1}, {1.0, 0.0});
    CHECK(r.value == Catch::Approx(0.0).margin(1e-9));
  }

  SECTION("forced split coupling") {
    Vector atom(1), p0(1), p1(1);
    atom << 0.0;
    p0 << 1.0;
    p1 << -1.0;
    EmpiricalMeasure hist = EmpiricalMeasure::uniform({atom});
    WassersteinResult r = wasserstein_align(hist, {p0, p1}, {0.5, 0.5});
    CHECK(r.value == Catch::Approx(1.0).margin(1e-9));
  }

  SECTION("random uniform instance matches the permutation oracle") {
    RngStream rng(9);
    for (int t = 0; t < 5; ++t) {
      std::vector<Vector> hist_atoms, protos;
      for (int i = 0; i < 3; ++i) {
        hist_atoms.push_back(rng.gaussian_vector(2));
        protos.push_back(rng.gaussian_vector(2));
      }
      EmpiricalMeasure hist = EmpiricalMeasure::uniform(hist_atoms);
      SinkhornParams params;
      params.epsilon = 0.02;
      params.max_iter = 20000;
      params.tol = 1e-5;
      WassersteinResult r = wasserstein_align(
          hist, protos, {1.0 / 3, 1.0 / 3, 1.0 / 3}, params);
      REQUIRE(r.converged);
      double exact = oracles::ot_exact_uniform(hist_atoms, protos);
      CHECK(std::abs(r.value - exact) <= 0.02 * std::max(exact, 1e-12));
    }
  }

  SECTION("1-D general weights match the quantile-coupling oracle") {
    EmpiricalMeasure hist;
    hist.atoms = {Vector::Constant(1, -0.5), Vector::Constant(1, 0.25),
                  Vector::Constant(1, 1.0)};
    hist.weights = {0.2, 0.5, 0.3};
    std::vector<Vector> protos = {Vector::Constant(1, 0.0),
                                  Vector::Constant(1, 0.8)};
    SinkhornParams params;
    params.epsilon = 0.005;
    params.max_iter = 50000;
    params.tol = 1e-6;
    WassersteinResult r = wasserstein_align(hist, protos, {0.6, 0.4}, params);
    REQUIRE(r.converged);
    double exact = oracles::ot_exact_1d({-0.5, 0.25, 1.0}, {0.2, 0.5, 0.3},
                                        {0.0, 0.8}, {0.6, 0.4});
    CHECK(std::abs(r.value - exact) <= 0.02 * std::max(exact, 1e-12));
  }
}
