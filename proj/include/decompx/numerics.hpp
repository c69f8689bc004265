#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace decompx {

/// Raised when operand shapes do not line up.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major f32 matrix. Activations are row vectors, so a layer reads
/// y = x * W + b with W stored input x output.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(const std::vector<std::vector<float>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

enum class ActivationKind { GeluExact, Relu, Tanh, Identity };

std::string_view activation_name(ActivationKind kind);
/// Accepts the canonical names plus the common checkpoint spellings
/// ("gelu", "relu", "tanh", "linear").
ActivationKind parse_activation(std::string_view name);

struct VectorStats {
  double mean = 0.0;
  double std = 0.0;  // sqrt(var + eps)
};

Matrix matmul(const Matrix& a, const Matrix& b);

/// Row vector times matrix: out = v * m. Accumulates in f64.
std::vector<float> vec_mat(std::span<const float> v, const Matrix& m);
void vec_mat_into(std::span<const float> v, const Matrix& m, std::span<float> out);

Matrix softmax_rows(const Matrix& m);

/// Population mean and sqrt(variance + eps).
VectorStats vector_stats(std::span<const float> v, double eps);

/// LayerNorm with affine parameters; statistics per the vector itself.
std::vector<float> layer_norm(std::span<const float> v, std::span<const float> gamma,
                              std::span<const float> beta, double eps);

float activation_scalar(ActivationKind kind, float x);
std::vector<float> activation_apply(ActivationKind kind, std::span<const float> x);

/// Slope f(x)/x of the zero-intercept line through (x, f(x)).
inline constexpr float kThetaEpsilon = 1e-6f;
float activation_theta_scalar(ActivationKind kind, float x);
std::vector<float> activation_theta(ActivationKind kind, std::span<const float> x);

double l2_norm(std::span<const float> v);
double dot(std::span<const float> a, std::span<const float> b);

}  // namespace decompx
