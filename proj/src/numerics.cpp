#include "oodadv/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "oodadv/error.hpp"

namespace oodadv {

namespace {

void require_same_dim(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw Error(ErrorCode::kDimensionMismatch,
                std::string(what) + ": " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> row_major)
    : rows_(rows), cols_(cols), data_(std::move(row_major)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorCode::kDimensionMismatch, "matrix storage does not match rows*cols");
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

SpdFactor SpdFactor::from_lower(Matrix lower) {
  if (!lower.square() || lower.rows() == 0) {
    throw Error(ErrorCode::kDimensionMismatch, "factor must be a non-empty square matrix");
  }
  for (std::size_t i = 0; i < lower.rows(); ++i) {
    if (!(lower(i, i) > 0.0)) {
      throw Error(ErrorCode::kNotPositiveDefinite, "factor diagonal must be positive");
    }
    for (std::size_t j = i + 1; j < lower.cols(); ++j) lower(i, j) = 0.0;
  }
  return SpdFactor(std::move(lower));
}

Matrix SpdFactor::reconstruct() const { return multiply(lower_, transpose(lower_)); }

SpdFactor cholesky(const Matrix& m) {
  if (!m.square() || m.rows() == 0) {
    throw Error(ErrorCode::kNotSymmetric, "cholesky needs a non-empty square matrix");
  }
  const std::size_t n = m.rows();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (std::abs(m(i, j) - m(j, i)) > kSymmetryTolerance) {
        throw Error(ErrorCode::kNotSymmetric,
                    "entries (" + std::to_string(i) + "," + std::to_string(j) + ") differ");
      }
    }
  }

  Matrix lower(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double pivot = m(j, j);
    for (std::size_t k = 0; k < j; ++k) pivot -= lower(j, k) * lower(j, k);
    if (!(pivot > 0.0)) {
      throw Error(ErrorCode::kNotPositiveDefinite,
                  "pivot " + std::to_string(j) + " is " + std::to_string(pivot));
    }
    const double diag = std::sqrt(pivot);
    lower(j, j) = diag;
    for (std::size_t i = j + 1; i < n; ++i) {
      // Lower triangle of m only; symmetry was checked above.
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= lower(i, k) * lower(j, k);
      lower(i, j) = s / diag;
    }
  }
  return SpdFactor(std::move(lower));
}

Matrix regularize(const Matrix& m) {
  if (!m.square() || m.rows() == 0) {
    throw Error(ErrorCode::kDimensionMismatch, "regularize needs a non-empty square matrix");
  }
  double trace = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) trace += m(i, i);
  const double lambda =
      std::max(kRegularizationScale * trace / static_cast<double>(m.rows()), kRegularizationFloor);
  Matrix out = m;
  for (std::size_t i = 0; i < m.rows(); ++i) out(i, i) += lambda;
  return out;
}

Vector forward_substitute(const SpdFactor& f, std::span<const double> b) {
  require_same_dim(f.dim(), b.size(), "forward_substitute");
  const Matrix& l = f.lower();
  const std::size_t n = f.dim();
  Vector y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    const auto row = l.row(i);
    for (std::size_t k = 0; k < i; ++k) s -= row[k] * y[k];
    y[i] = s / row[i];
  }
  return y;
}

Vector spd_solve(const SpdFactor& f, std::span<const double> b) {
  Vector y = forward_substitute(f, b);
  const Matrix& l = f.lower();
  const std::size_t n = f.dim();
  // Lᵀ x = y, walking columns of L from the bottom.
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * y[k];
    y[ii] = s / l(ii, ii);
  }
  return y;
}

double quadratic_form(const SpdFactor& f, std::span<const double> d) {
  const Vector y = forward_substitute(f, d);
  return dot(y, y);
}

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a.size(), b.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

Vector subtract(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a.size(), b.size(), "subtract");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require_same_dim(x.size(), y.size(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

Vector matvec(const Matrix& m, std::span<const double> x) {
  require_same_dim(m.cols(), x.size(), "matvec");
  Vector out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * x[c];
    out[r] = s;
  }
  return out;
}

Vector matvec_transposed(const Matrix& m, std::span<const double> y) {
  require_same_dim(m.rows(), y.size(), "matvec_transposed");
  Vector out(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double yr = y[r];
    if (yr == 0.0) continue;
    const auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out[c] += yr * row[c];
  }
  return out;
}

Matrix multiply(const Matrix& a, const Matrix& b) {
  require_same_dim(a.cols(), b.rows(), "multiply");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

double frobenius_norm(const Matrix& m) { return norm2(m.data()); }

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

void tanh_inplace(std::span<double> values) {
  for (double& v : values) v = std::tanh(v);
}

Vector tanh_backward(std::span<const double> upstream, std::span<const double> activated) {
  require_same_dim(upstream.size(), activated.size(), "tanh_backward");
  Vector out(upstream.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = upstream[i] * (1.0 - activated[i] * activated[i]);
  }
  return out;
}

Vector softmax(std::span<const double> logits) {
  if (logits.empty()) throw Error(ErrorCode::kDimensionZero, "softmax of empty vector");
  const double top = *std::max_element(logits.begin(), logits.end());
  Vector p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - top);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

Vector softmax_backward(std::span<const double> upstream, std::span<const double> probs) {
  const double inner = dot(upstream, probs);
  Vector out(probs.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = probs[i] * (upstream[i] - inner);
  return out;
}

double input_gradient_check(const DifferentiableFunction& fn, std::span<const double> x, double h) {
  if (!(h > 0.0)) throw Error(ErrorCode::kInvalidArgument, "finite-difference step must be positive");
  const Vector analytic = fn.gradient(x);
  require_same_dim(analytic.size(), x.size(), "input_gradient_check");
  if (!all_finite(analytic)) throw Error(ErrorCode::kNonFiniteValue, "analytic gradient");

  Vector probe(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double up = fn.value(probe);
    probe[i] = saved - h;
    const double down = fn.value(probe);
    probe[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw Error(ErrorCode::kNonFiniteValue, "function value at coordinate " + std::to_string(i));
    }
    const double centered = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - centered) / (std::abs(centered) + 1e-12));
  }
  return worst;
}

}  // namespace oodadv
