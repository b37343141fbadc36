#pragma once

// Dense linear algebra and reverse-mode building blocks. Everything is 64-bit
// floating point; covariance matrices are only ever applied through their
// Cholesky factor.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace oodadv {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> row_major);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Lower-triangular Cholesky factor L of a symmetric positive-definite M = L·Lᵀ.
class SpdFactor {
 public:
  // Adopts an existing lower-triangular factor (e.g. read from a checkpoint).
  // Throws NotPositiveDefinite if the diagonal is not strictly positive.
  static SpdFactor from_lower(Matrix lower);

  const Matrix& lower() const noexcept { return lower_; }
  std::size_t dim() const noexcept { return lower_.rows(); }

  // L·Lᵀ
  Matrix reconstruct() const;

 private:
  explicit SpdFactor(Matrix lower) : lower_(std::move(lower)) {}
  friend SpdFactor cholesky(const Matrix& m);

  Matrix lower_;
};

inline constexpr double kSymmetryTolerance = 1e-10;
inline constexpr double kRegularizationScale = 1e-6;
inline constexpr double kRegularizationFloor = 1e-12;

SpdFactor cholesky(const Matrix& m);

// m + λ·I with λ = 1e-6 · trace(m) / dim, floored at 1e-12 so that an
// all-zero scatter still factorizes.
Matrix regularize(const Matrix& m);

// Solves L·y = b.
Vector forward_substitute(const SpdFactor& f, std::span<const double> b);

// Solves M·x = b with M = L·Lᵀ.
Vector spd_solve(const SpdFactor& f, std::span<const double> b);

// dᵀ M⁻¹ d, evaluated as ‖L⁻¹d‖².
double quadratic_form(const SpdFactor& f, std::span<const double> d);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
Vector subtract(std::span<const double> a, std::span<const double> b);
void axpy(double alpha, std::span<const double> x, std::span<double> y);

// M·x and Mᵀ·y.
Vector matvec(const Matrix& m, std::span<const double> x);
Vector matvec_transposed(const Matrix& m, std::span<const double> y);
Matrix multiply(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
double frobenius_norm(const Matrix& m);

bool all_finite(std::span<const double> values);

// Reverse-mode primitives. Each *_backward takes the upstream gradient and
// returns the gradient with respect to the primitive's input.
void tanh_inplace(std::span<double> values);
Vector tanh_backward(std::span<const double> upstream, std::span<const double> activated);
Vector softmax(std::span<const double> logits);
Vector softmax_backward(std::span<const double> upstream, std::span<const double> probs);

struct DifferentiableFunction {
  std::function<double(std::span<const double>)> value;
  std::function<Vector(std::span<const double>)> gradient;
};

// Max over coordinates of |analytic − centered| / (|centered| + 1e-12) with
// centered differences of step h.
double input_gradient_check(const DifferentiableFunction& fn, std::span<const double> x, double h);

}  // namespace oodadv
