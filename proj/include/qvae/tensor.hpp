#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace qvae {

/// Dense row-major 2-D array. `float` is the production type; `double` exists
/// for finite-difference gradient checks.
template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("matrix data length " + std::to_string(data_.size()) +
                                  " does not match " + std::to_string(rows_) + "x" +
                                  std::to_string(cols_));
    }
  }

  static BasicMatrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw std::invalid_argument("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return BasicMatrix(r, c, std::move(data));
  }

  static BasicMatrix identity(std::size_t n) {
    BasicMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  template <typename U>
  BasicMatrix<U> cast() const {
    return BasicMatrix<U>(rows_, cols_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool same_shape(const BasicMatrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;
using MatrixD = BasicMatrix<double>;

// All kernels below are pure: they never mutate their arguments. Shape
// mismatches throw std::invalid_argument.

template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

/// Cache-blocked variant of matmul; identical results up to summation order.
template <typename T>
BasicMatrix<T> matmul_blocked(const BasicMatrix<T>& a, const BasicMatrix<T>& b,
                              std::size_t block = 32);

template <typename T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a);

/// aᵀ·b without materializing the transpose.
template <typename T>
BasicMatrix<T> matmul_at_b(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

/// a·bᵀ without materializing the transpose.
template <typename T>
BasicMatrix<T> matmul_a_bt(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

template <typename T>
BasicMatrix<T> add(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

template <typename T>
BasicMatrix<T> subtract(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

template <typename T>
BasicMatrix<T> hadamard(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

template <typename T>
BasicMatrix<T> scale(const BasicMatrix<T>& a, T factor);

/// Adds `bias` to every row.
template <typename T>
BasicMatrix<T> add_row_vector(const BasicMatrix<T>& a, std::span<const T> bias);

template <typename T>
std::vector<T> column_sums(const BasicMatrix<T>& a);

template <typename T>
BasicMatrix<T> relu(const BasicMatrix<T>& a);

/// Numerically stable logistic function; saturates to exactly 0 or 1 without NaN.
template <typename T>
BasicMatrix<T> sigmoid(const BasicMatrix<T>& a);

template <typename T>
BasicMatrix<T> tanh_elementwise(const BasicMatrix<T>& a);

template <typename T>
BasicMatrix<T> exp_elementwise(const BasicMatrix<T>& a);

/// Row-wise softmax with max subtraction.
template <typename T>
BasicMatrix<T> softmax_rows(const BasicMatrix<T>& a);

template <typename T>
std::vector<int> argmax_rows(const BasicMatrix<T>& a);

template <typename T>
T sigmoid_scalar(T x) noexcept;

/// Generic elementwise map for callers that need something not listed above.
template <typename T, typename F>
BasicMatrix<T> map(const BasicMatrix<T>& a, F&& f) {
  BasicMatrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <typename T>
bool all_finite(const BasicMatrix<T>& a) noexcept;

/// Rows selected by index, in the given order.
template <typename T>
BasicMatrix<T> gather_rows(const BasicMatrix<T>& a, std::span<const std::size_t> indices);

}  // namespace qvae
