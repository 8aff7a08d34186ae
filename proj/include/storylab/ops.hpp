#pragma once

// Differentiable operations over storylab::Tensor. Matrix kernels are Eigen
// GEMMs over row-major views; everything else is written out directly.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "storylab/errors.hpp"
#include "storylab/tensor.hpp"

namespace storylab {

namespace kernel {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MMap = Eigen::Map<RowMat<T>>;

// C[m,n] (+)= A[m,k] * B[k,n]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c,
             bool accumulate) {
  MMap<T> C(c, m, n);
  if (accumulate) {
    C.noalias() += CMap<T>(a, m, k) * CMap<T>(b, k, n);
  } else {
    C.noalias() = CMap<T>(a, m, k) * CMap<T>(b, k, n);
  }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c,
             bool accumulate) {
  MMap<T> C(c, m, n);
  if (accumulate) {
    C.noalias() += CMap<T>(a, m, k) * CMap<T>(b, n, k).transpose();
  } else {
    C.noalias() = CMap<T>(a, m, k) * CMap<T>(b, n, k).transpose();
  }
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c,
             bool accumulate) {
  MMap<T> C(c, m, n);
  if (accumulate) {
    C.noalias() += CMap<T>(a, k, m).transpose() * CMap<T>(b, k, n);
  } else {
    C.noalias() = CMap<T>(a, k, m).transpose() * CMap<T>(b, k, n);
  }
}

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace kernel

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

}  // namespace detail

/// Matrix product. A 2-D right operand contracts against the last axis of
/// `a` with all leading axes flattened; equal-rank operands of rank >= 3
/// multiply batch-wise over their shared leading axes.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 1 || b.rank() < 2) throw DimensionError("matmul: operand rank too small");
  if (b.rank() == 2) {
    const std::size_t k = b.dim(0), n = b.dim(1);
    if (a.cols() != k) {
      throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " @ " +
                           shape_str(b.shape()));
    }
    const std::size_t m = a.rows();
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    std::vector<T> out(m * n);
    kernel::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data(), false);
    return detail::make_result<T>(std::move(out_shape), std::move(out), {&a, &b},
                                  [m, k, n](TensorNode<T>& self) {
                                    auto& A = *self.inputs[0];
                                    auto& B = *self.inputs[1];
                                    if (A.requires_grad)
                                      kernel::gemm_nt(m, n, k, self.grad.data(), B.data.data(),
                                                      A.grad.data(), true);
                                    if (B.requires_grad)
                                      kernel::gemm_tn(k, m, n, A.data.data(), self.grad.data(),
                                                      B.grad.data(), true);
                                  });
  }
  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    throw DimensionError("matmul: batch axes differ " + shape_str(a.shape()) + " @ " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2), k = a.cols(), n = b.cols();
  if (b.dim(b.rank() - 2) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " @ " +
                         shape_str(b.shape()));
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    kernel::gemm_nn(m, k, n, a.data().data() + i * m * k, b.data().data() + i * k * n,
                    out.data() + i * m * n, false);
  }
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {&a, &b}, [batch, m, k, n](TensorNode<T>& self) {
        auto& A = *self.inputs[0];
        auto& B = *self.inputs[1];
        for (std::size_t i = 0; i < batch; ++i) {
          const T* g = self.grad.data() + i * m * n;
          if (A.requires_grad)
            kernel::gemm_nt(m, n, k, g, B.data.data() + i * k * n, A.grad.data() + i * m * k,
                            true);
          if (B.requires_grad)
            kernel::gemm_tn(k, m, n, A.data.data() + i * m * k, g, B.grad.data() + i * k * n,
                            true);
        }
      });
}

/// a[.., k] @ b[n, k]^T -> [.., n]
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.rank() != 2 || a.cols() != b.dim(1)) {
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) +
                         " @ " + shape_str(b.shape()) + "^T");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.dim(0);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(m * n);
  kernel::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data(), false);
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&a, &b},
                                [m, k, n](TensorNode<T>& self) {
                                  auto& A = *self.inputs[0];
                                  auto& B = *self.inputs[1];
                                  if (A.requires_grad)
                                    kernel::gemm_nn(m, n, k, self.grad.data(), B.data.data(),
                                                    A.grad.data(), true);
                                  if (B.requires_grad)
                                    kernel::gemm_tn(n, m, k, self.grad.data(), A.data.data(),
                                                    B.grad.data(), true);
                                });
}

/// Same values under a new shape of equal element count.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return detail::make_result<T>(std::move(shape), x.values(), {&x}, [](TensorNode<T>& self) {
    auto& X = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) X.grad[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](TensorNode<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](TensorNode<T>& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (A.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i];
    if (B.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) B.grad[i] -= self.grad[i];
  });
}

/// Elementwise product of equal-shape tensors.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](TensorNode<T>& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (A.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i] * B.data[i];
    if (B.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) B.grad[i] += self.grad[i] * A.data[i];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return detail::make_result<T>(a.shape(), std::move(out), {&a}, [factor](TensorNode<T>& self) {
    auto& A = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i] * factor;
  });
}

/// x[.., d] + bias[d], broadcast over rows.
template <class T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rank() != 1 || x.cols() != bias.numel()) {
    throw DimensionError("add_row: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  }
  const std::size_t d = bias.numel(), rows = x.rows();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x.data()[r * d + j] + bias.data()[j];
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &bias},
                                [rows, d](TensorNode<T>& self) {
                                  auto& X = *self.inputs[0];
                                  auto& B = *self.inputs[1];
                                  if (X.requires_grad)
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      X.grad[i] += self.grad[i];
                                  if (B.requires_grad)
                                    for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t j = 0; j < d; ++j)
                                        B.grad[j] += self.grad[r * d + j];
                                });
}

/// x[.., d] - bias[d], broadcast over rows.
template <class T>
Tensor<T> sub_row(const Tensor<T>& x, const Tensor<T>& bias) {
  return add_row(x, scale(bias, T(-1)));
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  return detail::make_result<T>({1}, {total}, {&a}, [](TensorNode<T>& self) {
    auto& A = *self.inputs[0];
    for (auto& g : A.grad) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out[i] = v * kernel::sigmoid(v);
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [](TensorNode<T>& self) {
    auto& X = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = X.data[i];
      const T s = kernel::sigmoid(v);
      X.grad[i] += self.grad[i] * s * (T(1) + v * (T(1) - s));
    }
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [](TensorNode<T>& self) {
    auto& X = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (X.data[i] > T(0)) X.grad[i] += self.grad[i];
  });
}

/// y = x * gamma / sqrt(mean(x^2) + eps) over the last axis.
template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gamma, T eps) {
  if (gamma.rank() != 1 || x.cols() != gamma.numel()) {
    throw DimensionError("rms_norm: input " + shape_str(x.shape()) + " vs gain " +
                         shape_str(gamma.shape()));
  }
  const std::size_t d = gamma.numel(), rows = x.rows();
  std::vector<T> out(x.numel());
  std::vector<T> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] * inv * gamma.data()[j];
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &gamma},
      [rows, d, inv_rms = std::move(inv_rms)](TensorNode<T>& self) {
        auto& X = *self.inputs[0];
        auto& G = *self.inputs[1];
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = X.data.data() + r * d;
          const T* gr = self.grad.data() + r * d;
          const T inv = inv_rms[r];
          if (G.requires_grad)
            for (std::size_t j = 0; j < d; ++j) G.grad[j] += gr[j] * xr[j] * inv;
          if (X.requires_grad) {
            T dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += gr[j] * G.data[j] * xr[j];
            const T coeff = dot * inv * inv * inv / static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j)
              X.grad[r * d + j] += gr[j] * G.data[j] * inv - xr[j] * coeff;
          }
        }
      });
}

/// Softmax over the last axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t d = x.cols(), rows = x.rows();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T* yr = out.data() + r * d;
    const T mx = *std::max_element(xr, xr + d);
    T z = 0;
    for (std::size_t j = 0; j < d; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < d; ++j) yr[j] /= z;
  }
  return detail::make_result<T>(x.shape(), out, {&x}, [rows, d, y = out](TensorNode<T>& self) {
    auto& X = *self.inputs[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = y.data() + r * d;
      const T* gr = self.grad.data() + r * d;
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < d; ++j) X.grad[r * d + j] += yr[j] * (gr[j] - dot);
    }
  });
}

/// Row gather: weight[V, d] indexed by ids -> [ids.size(), d].
template <class T>
Tensor<T> embedding(const Tensor<T>& weight, std::span<const std::int32_t> ids) {
  if (weight.rank() != 2) throw DimensionError("embedding: weight must be 2-D");
  const std::size_t vocab = weight.dim(0), d = weight.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(ids[i]) + " outside vocab of " +
                       std::to_string(vocab));
    }
    std::copy_n(weight.data().data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.data() + i * d);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return detail::make_result<T>({ids.size(), d}, std::move(out), {&weight},
                                [d, saved = std::move(saved)](TensorNode<T>& self) {
                                  auto& W = *self.inputs[0];
                                  for (std::size_t i = 0; i < saved.size(); ++i) {
                                    T* dst = W.grad.data() + static_cast<std::size_t>(saved[i]) * d;
                                    const T* src = self.grad.data() + i * d;
                                    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                                  }
                                });
}

/// Mean next-token negative log-likelihood of logits[n, V] against targets.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  const std::size_t vocab = logits.cols(), n = logits.rows();
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(n) + " rows vs " +
                         std::to_string(targets.size()) + " targets");
  }
  std::vector<T> probs(logits.numel());
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside vocab of " +
                       std::to_string(vocab));
    }
    const T* lr = logits.data().data() + r * vocab;
    T* pr = probs.data() + r * vocab;
    const T mx = *std::max_element(lr, lr + vocab);
    T z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += (pr[j] = std::exp(lr[j] - mx));
    for (std::size_t j = 0; j < vocab; ++j) pr[j] /= z;
    total += std::log(z) - (lr[t] - mx);
  }
  const T inv_n = T(1) / static_cast<T>(n);
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return detail::make_result<T>(
      {1}, {total * inv_n}, {&logits},
      [n, vocab, inv_n, probs = std::move(probs), saved = std::move(saved)](TensorNode<T>& self) {
        auto& L = *self.inputs[0];
        const T g = self.grad[0] * inv_n;
        for (std::size_t r = 0; r < n; ++r) {
          const T* pr = probs.data() + r * vocab;
          T* dr = L.grad.data() + r * vocab;
          for (std::size_t j = 0; j < vocab; ++j) dr[j] += g * pr[j];
          dr[saved[r]] -= g;
        }
      });
}

/// Per-row next-token negative log-likelihood, no graph.
template <class T>
std::vector<T> token_losses(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  const std::size_t vocab = logits.cols(), n = logits.rows();
  if (targets.size() != n) throw DimensionError("token_losses: target count mismatch");
  std::vector<T> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const T* lr = logits.data().data() + r * vocab;
    const T mx = *std::max_element(lr, lr + vocab);
    T z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(lr[j] - mx);
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) throw IndexError("token_losses: target");
    out[r] = std::log(z) - (lr[t] - mx);
  }
  return out;
}

/// Mean over all elements of (a - b)^2.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mse");
  const Tensor<T> diff = sub(a, b);
  return mean(mul(diff, diff));
}

/// Sum of |x| divided by the number of rows.
template <class T>
Tensor<T> l1_rows_mean(const Tensor<T>& x) {
  const std::size_t rows = x.rows();
  T total = 0;
  for (T v : x.data()) total += std::abs(v);
  const T inv = T(1) / static_cast<T>(rows);
  return detail::make_result<T>({1}, {total * inv}, {&x}, [inv](TensorNode<T>& self) {
    auto& X = *self.inputs[0];
    const T g = self.grad[0] * inv;
    for (std::size_t i = 0; i < X.data.size(); ++i) {
      const T v = X.data[i];
      X.grad[i] += v > T(0) ? g : (v < T(0) ? -g : T(0));
    }
  });
}

/// Layout of a flattened [batch * seq, heads * head_dim] activation.
struct HeadLayout {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t heads = 1;
  std::size_t head_dim = 1;
};

/// Rotary position embedding on adjacent pairs inside each head; position
/// is the index within the sequence.
template <class T>
Tensor<T> rope(const Tensor<T>& x, HeadLayout layout, double theta) {
  const std::size_t width = layout.heads * layout.head_dim;
  if (x.rank() != 2 || x.dim(0) != layout.batch * layout.seq || x.dim(1) != width ||
      layout.head_dim % 2 != 0) {
    throw DimensionError("rope: activation " + shape_str(x.shape()) + " does not match layout");
  }
  const std::size_t half = layout.head_dim / 2;
  std::vector<T> cos_t(layout.seq * half), sin_t(layout.seq * half);
  for (std::size_t s = 0; s < layout.seq; ++s) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) /
                                              static_cast<double>(layout.head_dim));
      const double angle = static_cast<double>(s) * freq;
      cos_t[s * half + i] = static_cast<T>(std::cos(angle));
      sin_t[s * half + i] = static_cast<T>(std::sin(angle));
    }
  }
  auto rotate = [layout, half, width](const T* in, T* out, const std::vector<T>& c,
                                      const std::vector<T>& sn, T sign) {
    for (std::size_t row = 0; row < layout.batch * layout.seq; ++row) {
      const std::size_t s = row % layout.seq;
      for (std::size_t h = 0; h < layout.heads; ++h) {
        const std::size_t base = row * width + h * layout.head_dim;
        for (std::size_t i = 0; i < half; ++i) {
          const T cs = c[s * half + i], sv = sign * sn[s * half + i];
          const T a = in[base + 2 * i], b = in[base + 2 * i + 1];
          out[base + 2 * i] += a * cs - b * sv;
          out[base + 2 * i + 1] += a * sv + b * cs;
        }
      }
    }
  };
  std::vector<T> out(x.numel(), T(0));
  rotate(x.data().data(), out.data(), cos_t, sin_t, T(1));
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x},
      [rotate, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](TensorNode<T>& self) {
        auto& X = *self.inputs[0];
        rotate(self.grad.data(), X.grad.data(), cos_t, sin_t, T(-1));
      });
}

/// Attention probabilities [batch, heads, seq, seq] (upper triangle zero).
template <class T>
std::vector<T> causal_attention_probs(std::span<const T> q, std::span<const T> k,
                                      HeadLayout layout, std::size_t kv_heads) {
  const std::size_t S = layout.seq, hd = layout.head_dim, H = layout.heads;
  const std::size_t qw = H * hd, kw = kv_heads * hd, group = H / kv_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
  std::vector<T> probs(layout.batch * H * S * S, T(0));
  for (std::size_t b = 0; b < layout.batch; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t kvh = h / group;
      for (std::size_t s = 0; s < S; ++s) {
        T* pr = probs.data() + ((b * H + h) * S + s) * S;
        const T* qv = q.data() + (b * S + s) * qw + h * hd;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t t = 0; t <= s; ++t) {
          const T* kv = k.data() + (b * S + t) * kw + kvh * hd;
          T dot = 0;
          for (std::size_t i = 0; i < hd; ++i) dot += qv[i] * kv[i];
          pr[t] = dot * inv_sqrt;
          mx = std::max(mx, pr[t]);
        }
        T z = 0;
        for (std::size_t t = 0; t <= s; ++t) z += (pr[t] = std::exp(pr[t] - mx));
        for (std::size_t t = 0; t <= s; ++t) pr[t] /= z;
      }
    }
  }
  return probs;
}

/// Causal scaled dot-product attention. q is [B*S, H*hd]; k and v are
/// [B*S, kv_heads*hd]; query head h reads key/value head h / (H / kv_heads).
template <class T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           HeadLayout layout, std::size_t kv_heads) {
  const std::size_t S = layout.seq, hd = layout.head_dim, H = layout.heads;
  const std::size_t N = layout.batch * S;
  if (kv_heads == 0 || H % kv_heads != 0) throw DimensionError("attention: head grouping");
  const std::size_t qw = H * hd, kw = kv_heads * hd, group = H / kv_heads;
  if (q.rank() != 2 || q.dim(0) != N || q.dim(1) != qw || k.rank() != 2 || k.dim(0) != N ||
      k.dim(1) != kw || v.shape() != k.shape()) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) +
                         " v " + shape_str(v.shape()));
  }
  std::vector<T> probs = causal_attention_probs<T>(q.data(), k.data(), layout, kv_heads);
  std::vector<T> out(N * qw, T(0));
  for (std::size_t b = 0; b < layout.batch; ++b)
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t kvh = h / group;
      for (std::size_t s = 0; s < S; ++s) {
        const T* pr = probs.data() + ((b * H + h) * S + s) * S;
        T* o = out.data() + (b * S + s) * qw + h * hd;
        for (std::size_t t = 0; t <= s; ++t) {
          const T* vv = v.data().data() + (b * S + t) * kw + kvh * hd;
          for (std::size_t i = 0; i < hd; ++i) o[i] += pr[t] * vv[i];
        }
      }
    }
  return detail::make_result<T>(
      {N, qw}, std::move(out), {&q, &k, &v},
      [layout, kv_heads, probs = std::move(probs)](TensorNode<T>& self) {
        const std::size_t S = layout.seq, hd = layout.head_dim, H = layout.heads;
        const std::size_t qw = H * hd, kw = kv_heads * hd, group = H / kv_heads;
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
        auto& Q = *self.inputs[0];
        auto& K = *self.inputs[1];
        auto& V = *self.inputs[2];
        std::vector<T> dp(S);
        for (std::size_t b = 0; b < layout.batch; ++b)
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t kvh = h / group;
            for (std::size_t s = 0; s < S; ++s) {
              const T* pr = probs.data() + ((b * H + h) * S + s) * S;
              const T* go = self.grad.data() + (b * S + s) * qw + h * hd;
              T weighted = 0;
              for (std::size_t t = 0; t <= s; ++t) {
                const T* vv = V.data.data() + (b * S + t) * kw + kvh * hd;
                T dot = 0;
                for (std::size_t i = 0; i < hd; ++i) dot += go[i] * vv[i];
                dp[t] = dot;
                weighted += pr[t] * dot;
                if (V.requires_grad) {
                  T* gv = V.grad.data() + (b * S + t) * kw + kvh * hd;
                  for (std::size_t i = 0; i < hd; ++i) gv[i] += pr[t] * go[i];
                }
              }
              const T* qv = Q.data.data() + (b * S + s) * qw + h * hd;
              for (std::size_t t = 0; t <= s; ++t) {
                const T ds = pr[t] * (dp[t] - weighted) * inv_sqrt;
                if (ds == T(0)) continue;
                const T* kv = K.data.data() + (b * S + t) * kw + kvh * hd;
                if (Q.requires_grad) {
                  T* gq = Q.grad.data() + (b * S + s) * qw + h * hd;
                  for (std::size_t i = 0; i < hd; ++i) gq[i] += ds * kv[i];
                }
                if (K.requires_grad) {
                  T* gk = K.grad.data() + (b * S + t) * kw + kvh * hd;
                  for (std::size_t i = 0; i < hd; ++i) gk[i] += ds * qv[i];
                }
              }
            }
          }
      });
}

}  // namespace storylab
