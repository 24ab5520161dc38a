#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace tokenrank::nn {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major float32 array. `data().size() == shape_numel(shape())`
/// holds for every constructed value.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0F);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor scalar(float v) { return Tensor({1}, std::vector<float>{v}); }
  static Tensor vector(std::vector<float> v);
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Rows/cols of a rank-2 tensor; a rank-1 tensor is treated as one row.
  std::size_t rows() const;
  std::size_t cols() const;

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<float> row(std::size_t r);
  std::span<const float> row(std::size_t r) const;

  Tensor reshaped(Shape shape) const;
  void fill(float v);
  bool all_finite() const noexcept;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Largest |a-b| over elements; throws ShapeError on shape mismatch.
float max_abs_diff(const Tensor& a, const Tensor& b);

// ---- plain (non-differentiable) kernels ------------------------------------

/// Running count of multiply-accumulates executed by matmul-bearing kernels on
/// the calling thread.
std::uint64_t& mac_counter() noexcept;

class ScopedMacCount {
 public:
  ScopedMacCount() : start_(mac_counter()) {}
  std::uint64_t elapsed() const noexcept { return mac_counter() - start_; }

 private:
  std::uint64_t start_;
};

/// C = op(A) * op(B). Counts m*k*n MACs.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);

/// Accumulating form on raw row-major buffers: C[m,n] += op(A) * op(B).
/// `count_macs` is false for gradient products, which the cost model excludes.
void gemm_accumulate(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                     std::size_t n, bool transpose_a, bool transpose_b, bool count_macs);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5F);
Tensor gelu(const Tensor& x);
float gelu_scalar(float x);
float gelu_grad_scalar(float x);

}  // namespace tokenrank::nn
