#include "protofed/routing.hpp"

#include "protofed/encoder.hpp"
#include "support/oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

using namespace protofed;

TEST_CASE("encode_prompt is deterministic and pooling-symmetric") {
  Encoder phi = Encoder::mlp(4, 6, 3, 123);
  RngStream rng(1);
  Matrix p = rng.gaussian_matrix(4, 6);

  Vector a = phi.encode_prompt(p);
  Vector b = phi.encode_prompt(p);
  CHECK((a - b).norm() == 0.0);

  Matrix permuted(4, 6);
  permuted.row(0) = p.row(2);
  permuted.row(1) = p.row(0);
  permuted.row(2) = p.row(3);
  permuted.row(3) = p.row(1);
  CHECK((phi.encode_prompt(permuted) - a).norm() < 1e-12);
}

TEST_CASE("encode_prompt matches a straight-line pool+MLP reference") {
  const int rows = 3, d = 5, d_phi = 4;
  Encoder phi = Encoder::mlp(rows, d, d_phi, 321);
  RngStream rng(2);
  Matrix p = rng.gaussian_matrix(rows, d);

  // Reference evaluation written out long-hand from the frozen weights.
  Vector pooled = Vector::Zero(d);
  for (int c = 0; c < d; ++c) {
    for (int r = 0; r < rows; ++r) pooled[c] += p(r, c);
    pooled[c] /= double(rows);
  }
  auto layer_norm = [](Vector u) {
    double m = 0.0;
    for (int i = 0; i < u.size(); ++i) m += u[i];
    m /= double(u.size());
    double var = 0.0;
    for (int i = 0; i < u.size(); ++i) var += (u[i] - m) * (u[i] - m);
    var /= double(u.size());
    Vector out(u.size());
    for (int i = 0; i < u.size(); ++i)
      out[i] = (u[i] - m) / std::sqrt(var + 1e-5);
    return out;
  };
  Vector u1 = phi.W1() * pooled + phi.b1();
  Vector l1 = layer_norm(u1);
  Vector a1(l1.size());
  for (int i = 0; i < l1.size(); ++i)
    a1[i] = 0.5 * l1[i] * (1.0 + std::erf(l1[i] / std::sqrt(2.0)));
  Vector u2 = phi.W2() * a1 + phi.b2();
  Vector expect = layer_norm(u2);

  CHECK((phi.encode_prompt(p) - expect).norm() < 1e-12);
}

TEST_CASE("encoder gradients match finite differences") {
  RngStream rng(3);

  SECTION("mlp vector gradient") {
    Encoder enc = Encoder::mlp(2, 5, 4, 99);
    Vector x = rng.gaussian_vector(5);
    Vector w = rng.gaussian_vector(4);  // probe direction
    auto f = [&](const Vector& v) { return w.dot(enc.encode_vector(v)); };
    Vector fd = oracles::finite_diff_vec(f, x, 1e-6);
    Vector an = enc.vector_gradient(x, w);
    CHECK((fd - an).norm() / std::max(1.0, an.norm()) < 1e-6);
  }

  SECTION("mlp prompt gradient") {
    Encoder enc = Encoder::mlp(3, 5, 4, 100);
    Matrix p = rng.gaussian_matrix(3, 5);
    Vector w = rng.gaussian_vector(4);
    auto f = [&](const Matrix& m) { return w.dot(enc.encode_prompt(m)); };
    Matrix fd = oracles::finite_diff(f, p, 1e-6);
    Matrix an = enc.prompt_gradient(p, w);
    CHECK(oracles::rel_error(fd, an) < 1e-6);
  }

  SECTION("linear kind round trip") {
    Encoder enc = Encoder::linear(3, 6, 4, 101);
    const Matrix& proj = enc.projection();
    CHECK((proj * proj.transpose() - Matrix::Identity(4, 4)).norm() < 1e-9);
  }
}

TEST_CASE("route forced cases") {
  SECTION("identical prototypes give uniform weights") {
    Vector h = Vector::Ones(3);
    std::vector<Vector> encoded(5, Vector::Ones(3));
    RoutingResult r = route(h, encoded, 4, 0.5);
    CHECK(r.indices == std::vector<int>{0, 1, 2, 3});
    for (double w : r.weights) CHECK(w == Catch::Approx(0.25).margin(1e-12));
  }

  SECTION("M = 1 gives a single unit weight") {
    RngStream rng(4);
    Vector h = rng.gaussian_vector(3);
    std::vector<Vector> encoded = {rng.gaussian_vector(3), rng.gaussian_vector(3)};
    RoutingResult r = route(h, encoded, 1, 0.07);
    REQUIRE(r.weights.size() == 1);
    CHECK(r.weights[0] == 1.0);
  }

  SECTION("analytic softmax at scores {ln 2, 0}") {
    Vector h(1);
    h << 1.0;
    std::vector<Vector> encoded = {Vector::Constant(1, std::log(2.0)),
                                   Vector::Constant(1, 0.0)};
    RoutingResult r = route(h, encoded, 2, 1.0);
    CHECK(r.weights[0] == Catch::Approx(2.0 / 3.0).margin(1e-12));
    CHECK(r.weights[1] == Catch::Approx(1.0 / 3.0).margin(1e-12));
  }

  SECTION("bad arguments") {
    Vector h = Vector::Ones(2);
    std::vector<Vector> encoded = {Vector::Ones(2)};
    CHECK_THROWS_AS(route(h, encoded, 0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(route(h, encoded, 1, 0.0), std::invalid_argument);
  }
}

TEST_CASE("route properties") {
  RngStream rng(5);
  const int d = 6;

  SECTION("weights sum to one") {
    for (int t = 0; t < 50; ++t) {
      int k = 1 + int(rng.uniform_index(20));
      std::vector<Vector> encoded;
      for (int i = 0; i < k; ++i) encoded.push_back(rng.gaussian_vector(d));
      RoutingResult r = route(rng.gaussian_vector(d), encoded,
                              1 + int(rng.uniform_index(6)), 0.07);
      double s = 0.0;
      for (double w : r.weights) s += w;
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }

  SECTION("temperature limit concentrates on the top index") {
    std::vector<Vector> encoded;
    for (int i = 0; i < 8; ++i) encoded.push_back(rng.gaussian_vector(d));
    Vector h = rng.gaussian_vector(d);
    RoutingResult r = route(h, encoded, 4, 1e-6);
    CHECK(r.weights[0] == Catch::Approx(1.0).margin(1e-9));
  }

  SECTION("invariant to a constant score shift") {
    Vector h = rng.gaussian_vector(d);
    std::vector<Vector> encoded;
    for (int i = 0; i < 6; ++i) encoded.push_back(rng.gaussian_vector(d));
    RoutingResult base = route(h, encoded, 3, 0.5);
    double c = 1.7;
    Vector shift = c * h / h.squaredNorm();  // adds c to every inner product
    std::vector<Vector> shifted;
    for (const Vector& v : encoded) shifted.push_back(v + shift);
    RoutingResult moved = route(h, shifted, 3, 0.5);
    CHECK(moved.indices == base.indices);
    for (std::size_t i = 0; i < base.weights.size(); ++i)
      CHECK(moved.weights[i] == Catch::Approx(base.weights[i]).margin(1e-9));
  }

  SECTION("top-M equals a brute-force sort") {
    for (int t = 0; t < 20; ++t) {
      int k = 1 + int(rng.uniform_index(64));
      int m = 1 + int(rng.uniform_index(8));
      std::vector<Vector> encoded;
      for (int i = 0; i < k; ++i) encoded.push_back(rng.gaussian_vector(d));
      Vector h = rng.gaussian_vector(d);
      RoutingResult r = route(h, encoded, m, 0.1);

      std::vector<std::pair<double, int>> scored;
      for (int i = 0; i < k; ++i) scored.push_back({h.dot(encoded[i]), i});
      std::stable_sort(scored.begin(), scored.end(), [](auto a, auto b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      for (int i = 0; i < std::min(m, k); ++i)
        CHECK(r.indices[i] == scored[i].second);
    }
  }
}
