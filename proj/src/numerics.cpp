#include "decompx/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace decompx {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

Matrix Matrix::from_rows(const std::vector<std::vector<float>>& rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.front().size();
  Matrix m(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    if (rows[i].size() != c) throw ShapeError("ragged rows in matrix literal");
    std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
  }
  return m;
}

std::string_view activation_name(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::GeluExact: return "gelu";
    case ActivationKind::Relu: return "relu";
    case ActivationKind::Tanh: return "tanh";
    case ActivationKind::Identity: return "identity";
  }
  return "identity";
}

ActivationKind parse_activation(std::string_view name) {
  if (name == "gelu" || name == "gelu_exact" || name == "GeluExact") return ActivationKind::GeluExact;
  if (name == "relu" || name == "Relu") return ActivationKind::Relu;
  if (name == "tanh" || name == "Tanh") return ActivationKind::Tanh;
  if (name == "identity" || name == "linear" || name == "Identity") return ActivationKind::Identity;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  std::vector<double> acc(b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += aik * brow[j];
    }
    auto orow = out.row(i);
    for (std::size_t j = 0; j < b.cols(); ++j) orow[j] = static_cast<float>(acc[j]);
  }
  return out;
}

void vec_mat_into(std::span<const float> v, const Matrix& m, std::span<float> out) {
  if (v.size() != m.rows() || out.size() != m.cols()) {
    throw ShapeError("vec_mat: vector of " + std::to_string(v.size()) + " against " +
                     std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
  std::vector<double> acc(m.cols(), 0.0);
  for (std::size_t k = 0; k < v.size(); ++k) {
    const double vk = v[k];
    if (vk == 0.0) continue;
    const auto mrow = m.row(k);
    for (std::size_t j = 0; j < m.cols(); ++j) acc[j] += vk * mrow[j];
  }
  for (std::size_t j = 0; j < m.cols(); ++j) out[j] = static_cast<float>(acc[j]);
}

std::vector<float> vec_mat(std::span<const float> v, const Matrix& m) {
  std::vector<float> out(m.cols());
  vec_mat_into(v, m, out);
  return out;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto in = m.row(i);
    if (in.empty()) continue;
    const double peak = *std::max_element(in.begin(), in.end());
    std::vector<double> e(in.size());
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      e[j] = std::exp(static_cast<double>(in[j]) - peak);
      total += e[j];
    }
    auto o = out.row(i);
    for (std::size_t j = 0; j < in.size(); ++j) o[j] = static_cast<float>(e[j] / total);
  }
  return out;
}

VectorStats vector_stats(std::span<const float> v, double eps) {
  const double n = static_cast<double>(v.size());
  double sum = 0.0;
  for (float x : v) sum += x;
  const double mean = sum / n;
  double sq = 0.0;
  for (float x : v) {
    const double c = x - mean;
    sq += c * c;
  }
  return {mean, std::sqrt(sq / n + eps)};
}

std::vector<float> layer_norm(std::span<const float> v, std::span<const float> gamma,
                              std::span<const float> beta, double eps) {
  if (gamma.size() != v.size() || beta.size() != v.size()) {
    throw ShapeError("layer_norm: parameter length mismatch");
  }
  const auto stats = vector_stats(v, eps);
  std::vector<float> out(v.size());
  for (std::size_t t = 0; t < v.size(); ++t) {
    out[t] = static_cast<float>((v[t] - stats.mean) / stats.std * gamma[t] + beta[t]);
  }
  return out;
}

namespace {

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace

float activation_scalar(ActivationKind kind, float x) {
  switch (kind) {
    case ActivationKind::GeluExact: return static_cast<float>(x * std_normal_cdf(x));
    case ActivationKind::Relu: return x > 0.0f ? x : 0.0f;
    case ActivationKind::Tanh: return static_cast<float>(std::tanh(static_cast<double>(x)));
    case ActivationKind::Identity: return x;
  }
  return x;
}

std::vector<float> activation_apply(ActivationKind kind, std::span<const float> x) {
  std::vector<float> out(x.size());
  std::transform(x.begin(), x.end(), out.begin(),
                 [kind](float v) { return activation_scalar(kind, v); });
  return out;
}

float activation_theta_scalar(ActivationKind kind, float x) {
  if (std::fabs(x) <= kThetaEpsilon) {
    switch (kind) {
      case ActivationKind::GeluExact: return 0.5f;
      case ActivationKind::Relu: return 0.0f;
      case ActivationKind::Tanh: return 1.0f;
      case ActivationKind::Identity: return 1.0f;
    }
  }
  switch (kind) {
    // x * Phi(x) / x == Phi(x); skip the division.
    case ActivationKind::GeluExact: return static_cast<float>(std_normal_cdf(x));
    case ActivationKind::Relu: return x > 0.0f ? 1.0f : 0.0f;
    case ActivationKind::Tanh: return static_cast<float>(std::tanh(static_cast<double>(x)) / x);
    case ActivationKind::Identity: return 1.0f;
  }
  return 1.0f;
}

std::vector<float> activation_theta(ActivationKind kind, std::span<const float> x) {
  std::vector<float> out(x.size());
  std::transform(x.begin(), x.end(), out.begin(),
                 [kind](float v) { return activation_theta_scalar(kind, v); });
  return out;
}

double l2_norm(std::span<const float> v) {
  double sq = 0.0;
  for (float x : v) sq += static_cast<double>(x) * x;
  return std::sqrt(sq);
}

double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

}  // namespace decompx
