#pragma once

#include "protofed/rng.hpp"
#include "protofed/types.hpp"

#include <cmath>

namespace protofed {

enum class EncoderKind { linear, mlp };

// Frozen encoder into d_phi space. Prompts are mean-pooled over rows first.
//
// linear: x -> P x with P (d_phi x d), orthonormal rows. Exactly invertible
//         from the right (P P^T = I), which the prototype decoder relies on.
// mlp:    x -> LayerNorm(W2 gelu(LayerNorm(W1 x + b1)) + b2), two layers,
//         GELU nonlinearity, per-layer normalization without affine terms.
//
// Both kinds are seeded at construction and never change afterwards.
class Encoder {
 public:
  static Encoder linear(int prompt_rows, int d, int d_phi, std::uint64_t seed,
                        std::string_view name = "encoder") {
    require_arg(d >= d_phi, "linear encoder requires d >= d_phi");
    Encoder e(EncoderKind::linear, prompt_rows, d, d_phi);
    RngStream rng = RngStream::derive(seed, name);
    Matrix g = rng.gaussian_matrix(d, d_phi);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(d, d_phi);
    e.proj_ = q.transpose();  // d_phi x d, orthonormal rows
    return e;
  }

  // Pure mean-pool (identity map after pooling); d_phi == d.
  static Encoder mean_pool(int prompt_rows, int d) {
    Encoder e(EncoderKind::linear, prompt_rows, d, d);
    e.proj_ = Matrix::Identity(d, d);
    return e;
  }

  static Encoder mlp(int prompt_rows, int d, int d_phi, std::uint64_t seed,
                     std::string_view name = "encoder") {
    Encoder e(EncoderKind::mlp, prompt_rows, d, d_phi);
    RngStream rng = RngStream::derive(seed, name);
    e.W1_ = rng.gaussian_matrix(d_phi, d, 1.0 / std::sqrt(double(d)));
    e.b1_ = rng.gaussian_vector(d_phi, 0.1);
    e.W2_ = rng.gaussian_matrix(d_phi, d_phi, 1.0 / std::sqrt(double(d_phi)));
    e.b2_ = rng.gaussian_vector(d_phi, 0.1);
    return e;
  }

  EncoderKind kind() const { return kind_; }
  int prompt_rows() const { return prompt_rows_; }
  int d_in() const { return d_; }
  int d_phi() const { return d_phi_; }

  // Projection matrix of the linear kind (used by the prototype decoder).
  const Matrix& projection() const {
    require_state(kind_ == EncoderKind::linear, "projection: linear kind only");
    return proj_;
  }

  // Frozen mlp weights, exposed for reference checks.
  const Matrix& W1() const { return W1_; }
  const Matrix& W2() const { return W2_; }
  const Vector& b1() const { return b1_; }
  const Vector& b2() const { return b2_; }

  Vector encode_vector(const Vector& x) const {
    require_arg(int(x.size()) == d_, "encode_vector: dimension mismatch");
    if (kind_ == EncoderKind::linear) return proj_ * x;
    Vector u1 = W1_ * x + b1_;
    Vector l1 = layer_norm(u1);
    Vector a1 = l1.unaryExpr([](double v) { return gelu(v); });
    Vector u2 = W2_ * a1 + b2_;
    return layer_norm(u2);
  }

  Vector encode_prompt(const Matrix& p) const {
    require_arg(p.rows() == prompt_rows_ && p.cols() == d_,
                "encode_prompt: shape mismatch");
    Vector pooled = p.colwise().mean();
    return encode_vector(pooled);
  }

  // Vector-Jacobian product: d(encode_vector)/dx^T * grad_out.
  Vector vector_gradient(const Vector& x, const Vector& grad_out) const {
    require_arg(int(x.size()) == d_ && int(grad_out.size()) == d_phi_,
                "vector_gradient: dimension mismatch");
    if (kind_ == EncoderKind::linear) return proj_.transpose() * grad_out;
    Vector u1 = W1_ * x + b1_;
    Vector l1 = layer_norm(u1);
    Vector a1 = l1.unaryExpr([](double v) { return gelu(v); });
    Vector u2 = W2_ * a1 + b2_;

    Vector du2 = layer_norm_backward(u2, grad_out);
    Vector da1 = W2_.transpose() * du2;
    Vector dl1 = da1.cwiseProduct(
        l1.unaryExpr([](double v) { return gelu_grad(v); }));
    Vector du1 = layer_norm_backward(u1, dl1);
    return W1_.transpose() * du1;
  }

  // Gradient w.r.t. the prompt matrix; the pooled gradient spreads evenly
  // across rows.
  Matrix prompt_gradient(const Matrix& p, const Vector& grad_out) const {
    Vector pooled = p.colwise().mean();
    Vector dx = vector_gradient(pooled, grad_out);
    Matrix g(prompt_rows_, d_);
    g.rowwise() = (dx / double(prompt_rows_)).transpose();
    return g;
  }

 private:
  Encoder(EncoderKind kind, int prompt_rows, int d, int d_phi)
      : kind_(kind), prompt_rows_(prompt_rows), d_(d), d_phi_(d_phi) {
    require_arg(prompt_rows >= 1 && d >= 1 && d_phi >= 1,
                "encoder dimensions must be positive");
  }

  static constexpr double kLnEps = 1e-5;

  static double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
  }

  static double gelu_grad(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
  }

  static Vector layer_norm(const Vector& u) {
    double m = u.mean();
    double var = (u.array() - m).square().mean();
    return (u.array() - m) / std::sqrt(var + kLnEps);
  }

  static Vector layer_norm_backward(const Vector& u, const Vector& dy) {
    int n = int(u.size());
    double m = u.mean();
    double var = (u.array() - m).square().mean();
    double inv_sigma = 1.0 / std::sqrt(var + kLnEps);
    Eigen::ArrayXd xhat = (u.array() - m) * inv_sigma;
    double dy_mean = dy.mean();
    double dy_xhat_mean = (dy.array() * xhat).mean();
    Eigen::ArrayXd dx =
        inv_sigma * (dy.array() - dy_mean - xhat * dy_xhat_mean);
    (void)n;
    return dx.matrix();
  }

  EncoderKind kind_;
  int prompt_rows_;
  int d_;
  int d_phi_;
  Matrix proj_;            // linear kind
  Matrix W1_, W2_;         // mlp kind
  Vector b1_, b2_;
};

}  // namespace protofed
