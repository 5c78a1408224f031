#include "qvae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace qvae {

namespace {

[[noreturn]] void shape_error(const char* op, std::size_t ar, std::size_t ac, std::size_t br,
                              std::size_t bc) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + std::to_string(ar) +
                              "x" + std::to_string(ac) + " and " + std::to_string(br) + "x" +
                              std::to_string(bc));
}

template <typename T>
void require_same_shape(const char* op, const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (!a.same_shape(b)) shape_error(op, a.rows(), a.cols(), b.rows(), b.cols());
}

}  // namespace

template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.rows()) shape_error("matmul", a.rows(), a.cols(), b.rows(), b.cols());
  const std::size_t n = a.rows(), k_dim = a.cols(), m = b.cols();
  BasicMatrix<T> out(n, m);
  // i-k-j order keeps the inner loop contiguous in both b and out.
  for (std::size_t i = 0; i < n; ++i) {
    T* out_row = out.row(i).data();
    for (std::size_t k = 0; k < k_dim; ++k) {
      const T aik = a(i, k);
      if (aik == T{0}) continue;
      const T* b_row = b.row(k).data();
      for (std::size_t j = 0; j < m; ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

template <typename T>
BasicMatrix<T> matmul_blocked(const BasicMatrix<T>& a, const BasicMatrix<T>& b, std::size_t block) {
  if (a.cols() != b.rows()) shape_error("matmul_blocked", a.rows(), a.cols(), b.rows(), b.cols());
  if (block == 0) throw std::invalid_argument("matmul_blocked: block size must be positive");
  const std::size_t n = a.rows(), k_dim = a.cols(), m = b.cols();
  BasicMatrix<T> out(n, m);
  for (std::size_t i0 = 0; i0 < n; i0 += block) {
    const std::size_t i1 = std::min(n, i0 + block);
    for (std::size_t k0 = 0; k0 < k_dim; k0 += block) {
      const std::size_t k1 = std::min(k_dim, k0 + block);
      for (std::size_t j0 = 0; j0 < m; j0 += block) {
        const std::size_t j1 = std::min(m, j0 + block);
        for (std::size_t i = i0; i < i1; ++i) {
          for (std::size_t k = k0; k < k1; ++k) {
            const T aik = a(i, k);
            for (std::size_t j = j0; j < j1; ++j) out(i, j) += aik * b(k, j);
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
  BasicMatrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
BasicMatrix<T> matmul_at_b(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.rows() != b.rows()) shape_error("matmul_at_b", a.rows(), a.cols(), b.rows(), b.cols());
  BasicMatrix<T> out(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto a_row = a.row(r);
    const auto b_row = b.row(r);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T ari = a_row[i];
      if (ari == T{0}) continue;
      T* out_row = out.row(i).data();
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += ari * b_row[j];
    }
  }
  return out;
}

template <typename T>
BasicMatrix<T> matmul_a_bt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.cols()) shape_error("matmul_a_bt", a.rows(), a.cols(), b.rows(), b.cols());
  BasicMatrix<T> out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto b_row = b.row(j);
      T acc{0};
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j) = acc;
    }
  }
  return out;
}

template <typename T>
BasicMatrix<T> add(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  require_same_shape("add", a, b);
  BasicMatrix<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <typename T>
BasicMatrix<T> subtract(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  require_same_shape("subtract", a, b);
  BasicMatrix<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

template <typename T>
BasicMatrix<T> hadamard(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  require_same_shape("hadamard", a, b);
  BasicMatrix<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

template <typename T>
BasicMatrix<T> scale(const BasicMatrix<T>& a, T factor) {
  BasicMatrix<T> out = a;
  for (auto& v : out.data()) v *= factor;
  return out;
}

template <typename T>
BasicMatrix<T> add_row_vector(const BasicMatrix<T>& a, std::span<const T> bias) {
  if (bias.size() != a.cols()) shape_error("add_row_vector", a.rows(), a.cols(), 1, bias.size());
  BasicMatrix<T> out = a;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
  }
  return out;
}

template <typename T>
std::vector<T> column_sums(const BasicMatrix<T>& a) {
  std::vector<T> sums(a.cols(), T{0});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto row = a.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) sums[j] += row[j];
  }
  return sums;
}

template <typename T>
T sigmoid_scalar(T x) noexcept {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
BasicMatrix<T> relu(const BasicMatrix<T>& a) {
  return map(a, [](T v) { return v > T{0} ? v : T{0}; });
}

template <typename T>
BasicMatrix<T> sigmoid(const BasicMatrix<T>& a) {
  return map(a, [](T v) { return sigmoid_scalar(v); });
}

template <typename T>
BasicMatrix<T> tanh_elementwise(const BasicMatrix<T>& a) {
  return map(a, [](T v) { return std::tanh(v); });
}

template <typename T>
BasicMatrix<T> exp_elementwise(const BasicMatrix<T>& a) {
  return map(a, [](T v) { return std::exp(v); });
}

template <typename T>
BasicMatrix<T> softmax_rows(const BasicMatrix<T>& a) {
  BasicMatrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto in = a.row(i);
    auto dst = out.row(i);
    if (in.empty()) continue;
    const T peak = *std::max_element(in.begin(), in.end());
    T total{0};
    for (std::size_t j = 0; j < in.size(); ++j) {
      dst[j] = std::exp(in[j] - peak);
      total += dst[j];
    }
    for (auto& v : dst) v /= total;
  }
  return out;
}

template <typename T>
std::vector<int> argmax_rows(const BasicMatrix<T>& a) {
  std::vector<int> out(a.rows(), 0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto row = a.row(i);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

template <typename T>
bool all_finite(const BasicMatrix<T>& a) noexcept {
  return std::all_of(a.data().begin(), a.data().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
BasicMatrix<T> gather_rows(const BasicMatrix<T>& a, std::span<const std::size_t> indices) {
  BasicMatrix<T> out(indices.size(), a.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= a.rows()) throw std::out_of_range("gather_rows: row index out of range");
    const auto src = a.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

#define QVAE_INSTANTIATE_TENSOR(T)                                                           \
  template BasicMatrix<T> matmul(const BasicMatrix<T>&, const BasicMatrix<T>&);              \
  template BasicMatrix<T> matmul_blocked(const BasicMatrix<T>&, const BasicMatrix<T>&,       \
                                         std::size_t);                                       \
  template BasicMatrix<T> transpose(const BasicMatrix<T>&);                                  \
  template BasicMatrix<T> matmul_at_b(const BasicMatrix<T>&, const BasicMatrix<T>&);         \
  template BasicMatrix<T> matmul_a_bt(const BasicMatrix<T>&, const BasicMatrix<T>&);         \
  template BasicMatrix<T> add(const BasicMatrix<T>&, const BasicMatrix<T>&);                 \
  template BasicMatrix<T> subtract(const BasicMatrix<T>&, const BasicMatrix<T>&);            \
  template BasicMatrix<T> hadamard(const BasicMatrix<T>&, const BasicMatrix<T>&);            \
  template BasicMatrix<T> scale(const BasicMatrix<T>&, T);                                   \
  template BasicMatrix<T> add_row_vector(const BasicMatrix<T>&, std::span<const T>);         \
  template std::vector<T> column_sums(const BasicMatrix<T>&);                                \
  template T sigmoid_scalar(T) noexcept;                                                     \
  template BasicMatrix<T> relu(const BasicMatrix<T>&);                                       \
  template BasicMatrix<T> sigmoid(const BasicMatrix<T>&);                                    \
  template BasicMatrix<T> tanh_elementwise(const BasicMatrix<T>&);                           \
  template BasicMatrix<T> exp_elementwise(const BasicMatrix<T>&);                            \
  template BasicMatrix<T> softmax_rows(const BasicMatrix<T>&);                               \
  template std::vector<int> argmax_rows(const BasicMatrix<T>&);                              \
  template bool all_finite(const BasicMatrix<T>&) noexcept;                                  \
  template BasicMatrix<T> gather_rows(const BasicMatrix<T>&, std::span<const std::size_t>);

QVAE_INSTANTIATE_TENSOR(float)
QVAE_INSTANTIATE_TENSOR(double)

#undef QVAE_INSTANTIATE_TENSOR

}  // namespace qvae
