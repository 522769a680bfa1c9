// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor<T> is a handle to a graph node holding values, an optional
// gradient buffer and a backward closure. Calling backward() on a scalar
// tensor propagates gradients to every reachable node with requires_grad.
// Single-threaded; reductions use a fixed accumulation order so repeated
// runs are bit-identical.
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace volf {

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

// RAII guard disabling graph recording (evaluation / prediction paths).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled_flag()) { grad_enabled_flag() = false; }
  ~NoGradGuard() { grad_enabled_flag() = prev; }
};

inline int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
    n *= d;
  }
  return n;
}

template <typename T>
struct TensorNode {
  std::vector<int> shape;
  std::vector<T> values;
  std::vector<T> grad;  // sized lazily, same length as values
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;  // reads grad, accumulates into parents

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int> shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape))
      throw std::invalid_argument("value count does not match shape");
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape), T(0));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor full(std::vector<int> shape, T value, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<T>& values() { return node_->values; }
  const std::vector<T>& values() const { return node_->values; }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->values.size(); }
  void zero_grad() { node_->grad.assign(node_->values.size(), T(0)); }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item() requires a single-element tensor");
    return node_->values[0];
  }

  bool all_finite() const {
    for (T v : node_->values)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  // Reverse-mode sweep from a scalar loss.
  void backward() const {
    if (numel() != 1) throw std::invalid_argument("backward() requires a scalar tensor");
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> visited;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        TensorNode<T>* p = n->parents[idx].get();
        ++idx;
        if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backprop) (*it)->backprop(**it);
    }
  }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

// Creates the output node of an op; records parents and the backward
// closure only when grad mode is on and some parent needs gradients.
template <typename T>
Tensor<T> make_op_result(std::vector<int> shape, std::vector<T> values,
                         std::vector<Tensor<T>> parents,
                         std::function<void(TensorNode<T>&)> backprop) {
  bool needs = false;
  if (grad_enabled_flag())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  Tensor<T> out(std::move(shape), std::move(values), needs);
  if (needs) {
    for (auto& p : parents) out.node()->parents.push_back(p.node());
    out.node()->backprop = std::move(backprop);
  }
  return out;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return detail::make_op_result<T>(
      a.shape(), std::move(out), {a, b}, [](TensorNode<T>& n) {
        for (int k = 0; k < 2; ++k) {
          auto& p = *n.parents[k];
          if (!p.requires_grad) continue;
          p.ensure_grad();
          for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
        }
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return detail::make_op_result<T>(
      a.shape(), std::move(out), {a, b}, [](TensorNode<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
        }
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return detail::make_op_result<T>(
      a.shape(), std::move(out), {a, b}, [](TensorNode<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * pb.values[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i] * pa.values[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * factor;
  return detail::make_op_result<T>(
      a.shape(), std::move(out), {a}, [factor](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * factor;
      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + c;
  return detail::make_op_result<T>(
      a.shape(), std::move(out), {a}, [](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.values()) acc += v;
  return detail::make_op_result<T>(
      {1}, {acc}, {a}, [](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = n.grad[0];
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
      });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > T(0) ? a.values()[i] : T(0);
  return detail::make_op_result<T>(
      a.shape(), std::move(out), {a}, [](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i)
          if (p.values[i] > T(0)) p.grad[i] += n.grad[i];
      });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& a) {
  std::vector<T> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.values()[i]);
  return detail::make_op_result<T>(
      a.shape(), std::move(out), {a}, [](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) {
          const T y = n.values[i];
          p.grad[i] += n.grad[i] * (T(1) - y * y);
        }
      });
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T inv_sqrt2 = T(0.7071067811865475244);
  std::vector<T> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) {
    const T x = a.values()[i];
    out[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  return detail::make_op_result<T>(
      a.shape(), std::move(out), {a}, [inv_sqrt2](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T inv_sqrt2pi = T(0.3989422804014326779);
        for (size_t i = 0; i < n.grad.size(); ++i) {
          const T x = p.values[i];
          const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
          const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
          p.grad[i] += n.grad[i] * (cdf + x * pdf);
        }
      });
}

// Softmax over the last axis, numerically stabilized by the row maximum.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  const int cols = a.shape().back();
  const int64_t rows = a.numel() / cols;
  std::vector<T> out(a.values().size());
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = a.values().data() + r * cols;
    T* o = out.data() + r * cols;
    T mx = in[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    T denom = T(0);
    for (int c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      denom += o[c];
    }
    const T inv = T(1) / denom;
    for (int c = 0; c < cols; ++c) o[c] *= inv;
  }
  return detail::make_op_result<T>(
      a.shape(), std::move(out), {a}, [cols](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const int64_t rows = n.numel() / cols;
        for (int64_t r = 0; r < rows; ++r) {
          const T* y = n.values.data() + r * cols;
          const T* gy = n.grad.data() + r * cols;
          T* gx = p.grad.data() + r * cols;
          T dot = T(0);
          for (int c = 0; c < cols; ++c) dot += y[c] * gy[c];
          for (int c = 0; c < cols; ++c) gx[c] += y[c] * (gy[c] - dot);
        }
      });
}

// Copies into a new shape with identical element order.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> shape) {
  if (shape_numel(shape) != a.numel()) throw std::invalid_argument("reshape: element count mismatch");
  std::vector<T> out = a.values();
  return detail::make_op_result<T>(
      std::move(shape), std::move(out), {a}, [](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
      });
}

// Concatenation along axis 1 (channel axis of [N,C,...] tensors).
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || a.rank() < 2) throw std::invalid_argument("concat: rank mismatch");
  for (int i = 0; i < a.rank(); ++i)
    if (i != 1 && a.dim(i) != b.dim(i)) throw std::invalid_argument("concat: shape mismatch");
  std::vector<int> shape = a.shape();
  shape[1] = a.dim(1) + b.dim(1);
  const int n = a.dim(0);
  int64_t inner = 1;
  for (int i = 2; i < a.rank(); ++i) inner *= a.dim(i);
  const int64_t a_block = a.dim(1) * inner, b_block = b.dim(1) * inner;
  std::vector<T> out(shape_numel(shape));
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.values().data() + i * a_block, a_block, out.data() + i * (a_block + b_block));
    std::copy_n(b.values().data() + i * b_block, b_block,
                out.data() + i * (a_block + b_block) + a_block);
  }
  return detail::make_op_result<T>(
      std::move(shape), std::move(out), {a, b},
      [n, a_block, b_block](TensorNode<T>& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        for (int i = 0; i < n; ++i) {
          const T* g = node.grad.data() + i * (a_block + b_block);
          if (pa.requires_grad) {
            pa.ensure_grad();
            T* ga = pa.grad.data() + i * a_block;
            for (int64_t j = 0; j < a_block; ++j) ga[j] += g[j];
          }
          if (pb.requires_grad) {
            pb.ensure_grad();
            T* gb = pb.grad.data() + i * b_block;
            for (int64_t j = 0; j < b_block; ++j) gb[j] += g[j + a_block];
          }
        }
      });
}

// Batched matmul on [B,m,k] x [B,k,n] (trans flags swap the last two axes
// of the respective operand before multiplication).
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    throw std::invalid_argument("bmm: expects [B,m,k] x [B,k,n]");
  const int B = a.dim(0);
  const int m = trans_a ? a.dim(2) : a.dim(1);
  const int ka = trans_a ? a.dim(1) : a.dim(2);
  const int kb = trans_b ? b.dim(2) : b.dim(1);
  const int nn = trans_b ? b.dim(1) : b.dim(2);
  if (ka != kb) throw std::invalid_argument("bmm: inner dimension mismatch");

  auto mm = [](const T* A, const T* Bm, T* C, int M, int K, int N, bool ta, bool tb, bool accum) {
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j) {
        T acc = accum ? C[i * N + j] : T(0);
        for (int k = 0; k < K; ++k) {
          const T av = ta ? A[k * M + i] : A[i * K + k];
          const T bv = tb ? Bm[j * K + k] : Bm[k * N + j];
          acc += av * bv;
        }
        C[i * N + j] = acc;
      }
  };

  std::vector<T> out(static_cast<size_t>(B) * m * nn);
  const int64_t a_stride = static_cast<int64_t>(a.dim(1)) * a.dim(2);
  const int64_t b_stride = static_cast<int64_t>(b.dim(1)) * b.dim(2);
  for (int i = 0; i < B; ++i)
    mm(a.values().data() + i * a_stride, b.values().data() + i * b_stride,
       out.data() + static_cast<int64_t>(i) * m * nn, m, ka, nn, trans_a, trans_b, false);

  return detail::make_op_result<T>(
      {B, m, nn}, std::move(out), {a, b},
      [B, m, ka, nn, trans_a, trans_b, a_stride, b_stride, mm](TensorNode<T>& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        const int64_t o_stride = static_cast<int64_t>(m) * nn;
        for (int i = 0; i < B; ++i) {
          const T* G = node.grad.data() + i * o_stride;
          const T* A = pa.values.data() + i * a_stride;
          const T* Bm = pb.values.data() + i * b_stride;
          if (pa.requires_grad) {
            pa.ensure_grad();
            T* GA = pa.grad.data() + i * a_stride;
            // dA = G @ B^T (or transposed variants)
            if (!trans_a)
              mm(G, Bm, GA, m, nn, ka, false, !trans_b, true);
            else
              mm(Bm, G, GA, ka, nn, m, trans_b, true, true);
          }
          if (pb.requires_grad) {
            pb.ensure_grad();
            T* GB = pb.grad.data() + i * b_stride;
            if (!trans_b)
              mm(A, G, GB, ka, m, nn, !trans_a, false, true);
            else
              mm(G, A, GB, nn, m, ka, true, trans_a, true);
          }
        }
      });
}

// x: [.., in_features], weight: [out, in], bias: [out] (optional).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2) throw std::invalid_argument("linear: weight must be [out,in]");
  const int in_f = weight.dim(1), out_f = weight.dim(0);
  if (x.shape().back() != in_f) throw std::invalid_argument("linear: feature dimension mismatch");
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != out_f))
    throw std::invalid_argument("linear: bias shape mismatch");
  const int64_t rows = x.numel() / in_f;
  std::vector<int> shape = x.shape();
  shape.back() = out_f;
  std::vector<T> out(rows * out_f);
  for (int64_t r = 0; r < rows; ++r) {
    const T* xi = x.values().data() + r * in_f;
    T* o = out.data() + r * out_f;
    for (int j = 0; j < out_f; ++j) {
      T acc = has_bias ? bias.values()[j] : T(0);
      const T* w = weight.values().data() + static_cast<int64_t>(j) * in_f;
      for (int k = 0; k < in_f; ++k) acc += xi[k] * w[k];
      o[j] = acc;
    }
  }
  std::vector<Tensor<T>> parents = {x, weight};
  if (has_bias) parents.push_back(bias);
  return detail::make_op_result<T>(
      std::move(shape), std::move(out), std::move(parents),
      [rows, in_f, out_f, has_bias](TensorNode<T>& n) {
        auto& px = *n.parents[0];
        auto& pw = *n.parents[1];
        for (int64_t r = 0; r < rows; ++r) {
          const T* g = n.grad.data() + r * out_f;
          const T* xi = px.values.data() + r * in_f;
          if (px.requires_grad) {
            px.ensure_grad();
            T* gx = px.grad.data() + r * in_f;
            for (int j = 0; j < out_f; ++j) {
              const T gj = g[j];
              const T* w = pw.values.data() + static_cast<int64_t>(j) * in_f;
              for (int k = 0; k < in_f; ++k) gx[k] += gj * w[k];
            }
          }
          if (pw.requires_grad) {
            pw.ensure_grad();
            for (int j = 0; j < out_f; ++j) {
              const T gj = g[j];
              T* gw = pw.grad.data() + static_cast<int64_t>(j) * in_f;
              for (int k = 0; k < in_f; ++k) gw[k] += gj * xi[k];
            }
          }
          if (has_bias && n.parents[2]->requires_grad) {
            auto& pb = *n.parents[2];
            pb.ensure_grad();
            for (int j = 0; j < out_f; ++j) pb.grad[j] += g[j];
          }
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight) {
  return linear(x, weight, Tensor<T>());
}

}  // namespace volf
