// Layer kernels: 3D convolution, nearest-neighbor upsampling, per-instance
// normalization, layer norm, multi-head attention, parameter containers and
// the Adam optimizer with decoupled weight decay.
#pragma once

#include <cmath>
#include <random>
#include <string>

#include "volforecast/tensor.hpp"

namespace volf {

// input [N,C,D,H,W], weight [O,C,kd,kh,kw], bias [O] (optional).
// Cross-correlation with zero padding.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = 0) {
  if (input.rank() != 5 || weight.rank() != 5)
    throw std::invalid_argument("conv3d: expects [N,C,D,H,W] input and [O,C,kd,kh,kw] weight");
  if (input.dim(1) != weight.dim(1)) throw std::invalid_argument("conv3d: channel mismatch");
  if (stride < 1) throw std::invalid_argument("conv3d: stride must be >= 1");
  const int N = input.dim(0), C = input.dim(1), D = input.dim(2), H = input.dim(3), W = input.dim(4);
  const int O = weight.dim(0), kd = weight.dim(2), kh = weight.dim(3), kw = weight.dim(4);
  const int od = (D + 2 * padding - kd) / stride + 1;
  const int oh = (H + 2 * padding - kh) / stride + 1;
  const int ow = (W + 2 * padding - kw) / stride + 1;
  if (od <= 0 || oh <= 0 || ow <= 0) throw std::invalid_argument("conv3d: non-positive output dims");
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != O))
    throw std::invalid_argument("conv3d: bias shape mismatch");

  std::vector<T> out(static_cast<size_t>(N) * O * od * oh * ow);
  const auto* in = input.values().data();
  const auto* wt = weight.values().data();
  const int64_t in_c = static_cast<int64_t>(D) * H * W;
  const int64_t wt_c = static_cast<int64_t>(kd) * kh * kw;
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o) {
      T* op = out.data() + ((static_cast<int64_t>(n) * O + o) * od) * oh * ow;
      const T b = has_bias ? bias.values()[o] : T(0);
      for (int z = 0; z < od; ++z)
        for (int y = 0; y < oh; ++y)
          for (int x = 0; x < ow; ++x) {
            T acc = b;
            for (int c = 0; c < C; ++c) {
              const T* ip = in + (static_cast<int64_t>(n) * C + c) * in_c;
              const T* wp = wt + (static_cast<int64_t>(o) * C + c) * wt_c;
              for (int dz = 0; dz < kd; ++dz) {
                const int iz = z * stride + dz - padding;
                if (iz < 0 || iz >= D) continue;
                for (int dy = 0; dy < kh; ++dy) {
                  const int iy = y * stride + dy - padding;
                  if (iy < 0 || iy >= H) continue;
                  const int ix0 = x * stride - padding;
                  const T* row = ip + (static_cast<int64_t>(iz) * H + iy) * W;
                  const T* wrow = wp + (static_cast<int64_t>(dz) * kh + dy) * kw;
                  for (int dx = 0; dx < kw; ++dx) {
                    const int ix = ix0 + dx;
                    if (ix < 0 || ix >= W) continue;
                    acc += row[ix] * wrow[dx];
                  }
                }
              }
            }
            op[(static_cast<int64_t>(z) * oh + y) * ow + x] = acc;
          }
    }

  std::vector<Tensor<T>> parents = {input, weight};
  if (has_bias) parents.push_back(bias);
  return detail::make_op_result<T>(
      {N, O, od, oh, ow}, std::move(out), std::move(parents),
      [N, C, D, H, W, O, kd, kh, kw, od, oh, ow, stride, padding, has_bias](TensorNode<T>& node) {
        auto& pi = *node.parents[0];
        auto& pw = *node.parents[1];
        const bool gi = pi.requires_grad, gw = pw.requires_grad;
        const bool gb = has_bias && node.parents[2]->requires_grad;
        if (gi) pi.ensure_grad();
        if (gw) pw.ensure_grad();
        if (gb) node.parents[2]->ensure_grad();
        const int64_t in_c = static_cast<int64_t>(D) * H * W;
        const int64_t wt_c = static_cast<int64_t>(kd) * kh * kw;
        for (int n = 0; n < N; ++n)
          for (int o = 0; o < O; ++o) {
            const T* gp = node.grad.data() + ((static_cast<int64_t>(n) * O + o) * od) * oh * ow;
            for (int z = 0; z < od; ++z)
              for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) {
                  const T g = gp[(static_cast<int64_t>(z) * oh + y) * ow + x];
                  if (gb) node.parents[2]->grad[o] += g;
                  for (int c = 0; c < C; ++c) {
                    const T* iv = pi.values.data() + (static_cast<int64_t>(n) * C + c) * in_c;
                    T* gin = gi ? pi.grad.data() + (static_cast<int64_t>(n) * C + c) * in_c : nullptr;
                    const T* wv = pw.values.data() + (static_cast<int64_t>(o) * C + c) * wt_c;
                    T* gwt = gw ? pw.grad.data() + (static_cast<int64_t>(o) * C + c) * wt_c : nullptr;
                    for (int dz = 0; dz < kd; ++dz) {
                      const int iz = z * stride + dz - padding;
                      if (iz < 0 || iz >= D) continue;
                      for (int dy = 0; dy < kh; ++dy) {
                        const int iy = y * stride + dy - padding;
                        if (iy < 0 || iy >= H) continue;
                        const int64_t base = (static_cast<int64_t>(iz) * H + iy) * W;
                        const int64_t wbase = (static_cast<int64_t>(dz) * kh + dy) * kw;
                        const int ix0 = x * stride - padding;
                        for (int dx = 0; dx < kw; ++dx) {
                          const int ix = ix0 + dx;
                          if (ix < 0 || ix >= W) continue;
                          if (gw) gwt[wbase + dx] += g * iv[base + ix];
                          if (gi) gin[base + ix] += g * wv[wbase + dx];
                        }
                      }
                    }
                  }
                }
          }
      });
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, int stride = 1, int padding = 0) {
  return conv3d(input, weight, Tensor<T>(), stride, padding);
}

// Nearest-neighbor upsampling of [N,C,D,H,W] by an integer factor.
template <typename T>
Tensor<T> upsample3d_nearest(const Tensor<T>& input, int factor) {
  if (input.rank() != 5) throw std::invalid_argument("upsample3d: expects [N,C,D,H,W]");
  if (factor < 1) throw std::invalid_argument("upsample3d: factor must be >= 1");
  const int N = input.dim(0), C = input.dim(1), D = input.dim(2), H = input.dim(3), W = input.dim(4);
  const int od = D * factor, oh = H * factor, ow = W * factor;
  std::vector<T> out(static_cast<size_t>(N) * C * od * oh * ow);
  for (int nc = 0; nc < N * C; ++nc) {
    const T* ip = input.values().data() + static_cast<int64_t>(nc) * D * H * W;
    T* op = out.data() + static_cast<int64_t>(nc) * od * oh * ow;
    for (int z = 0; z < od; ++z)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
          op[(static_cast<int64_t>(z) * oh + y) * ow + x] =
              ip[(static_cast<int64_t>(z / factor) * H + y / factor) * W + x / factor];
  }
  return detail::make_op_result<T>(
      {N, C, od, oh, ow}, std::move(out), {input},
      [N, C, D, H, W, factor](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const int od = D * factor, oh = H * factor, ow = W * factor;
        for (int nc = 0; nc < N * C; ++nc) {
          T* gp = p.grad.data() + static_cast<int64_t>(nc) * D * H * W;
          const T* g = node.grad.data() + static_cast<int64_t>(nc) * od * oh * ow;
          for (int z = 0; z < od; ++z)
            for (int y = 0; y < oh; ++y)
              for (int x = 0; x < ow; ++x)
                gp[(static_cast<int64_t>(z / factor) * H + y / factor) * W + x / factor] +=
                    g[(static_cast<int64_t>(z) * oh + y) * ow + x];
        }
      });
}

// Per-instance, per-channel normalization over the spatial extent, followed
// by a learned affine map. Equivalent to batch norm in training at batch
// size 1; no running statistics are kept.
template <typename T>
Tensor<T> batchless_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                         T eps = T(1e-5)) {
  if (input.rank() != 5) throw std::invalid_argument("batchless_norm: expects [N,C,D,H,W]");
  if (eps <= T(0)) throw std::invalid_argument("batchless_norm: eps must be positive");
  const int N = input.dim(0), C = input.dim(1);
  const int64_t S = static_cast<int64_t>(input.dim(2)) * input.dim(3) * input.dim(4);
  if (gamma.numel() != C || beta.numel() != C)
    throw std::invalid_argument("batchless_norm: affine shape mismatch");
  std::vector<T> out(input.values().size());
  std::vector<T> mean_v(static_cast<size_t>(N) * C), inv_std_v(static_cast<size_t>(N) * C);
  for (int nc = 0; nc < N * C; ++nc) {
    const T* ip = input.values().data() + nc * S;
    T m = T(0);
    for (int64_t i = 0; i < S; ++i) m += ip[i];
    m /= static_cast<T>(S);
    T var = T(0);
    for (int64_t i = 0; i < S; ++i) {
      const T d = ip[i] - m;
      var += d * d;
    }
    var /= static_cast<T>(S);
    const T inv = T(1) / std::sqrt(var + eps);
    mean_v[nc] = m;
    inv_std_v[nc] = inv;
    const int c = nc % C;
    const T g = gamma.values()[c], b = beta.values()[c];
    T* op = out.data() + nc * S;
    for (int64_t i = 0; i < S; ++i) op[i] = (ip[i] - m) * inv * g + b;
  }
  return detail::make_op_result<T>(
      input.shape(), std::move(out), {input, gamma, beta},
      [N, C, S, mean_v, inv_std_v](TensorNode<T>& node) {
        auto& pi = *node.parents[0];
        auto& pg = *node.parents[1];
        auto& pb = *node.parents[2];
        if (pi.requires_grad) pi.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int nc = 0; nc < N * C; ++nc) {
          const int c = nc % C;
          const T* ip = pi.values.data() + nc * S;
          const T* g = node.grad.data() + nc * S;
          const T m = mean_v[nc], inv = inv_std_v[nc];
          const T gam = pg.values[c];
          // xhat_i = (x_i - m) * inv
          T sum_g = T(0), sum_gx = T(0);
          for (int64_t i = 0; i < S; ++i) {
            const T xh = (ip[i] - m) * inv;
            sum_g += g[i];
            sum_gx += g[i] * xh;
          }
          if (pg.requires_grad) pg.grad[c] += sum_gx;
          if (pb.requires_grad) pb.grad[c] += sum_g;
          if (pi.requires_grad) {
            T* gx = pi.grad.data() + nc * S;
            const T invS = T(1) / static_cast<T>(S);
            for (int64_t i = 0; i < S; ++i) {
              const T xh = (ip[i] - m) * inv;
              gx[i] += gam * inv * (g[i] - sum_g * invS - xh * sum_gx * invS);
            }
          }
        }
      });
}

// Layer norm over the last axis of [.., E] with learned affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  if (eps <= T(0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const int E = input.shape().back();
  if (gamma.numel() != E || beta.numel() != E)
    throw std::invalid_argument("layer_norm: affine shape mismatch");
  const int64_t rows = input.numel() / E;
  std::vector<T> out(input.values().size());
  std::vector<T> mean_v(rows), inv_std_v(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const T* ip = input.values().data() + r * E;
    T m = T(0);
    for (int i = 0; i < E; ++i) m += ip[i];
    m /= static_cast<T>(E);
    T var = T(0);
    for (int i = 0; i < E; ++i) {
      const T d = ip[i] - m;
      var += d * d;
    }
    var /= static_cast<T>(E);
    const T inv = T(1) / std::sqrt(var + eps);
    mean_v[r] = m;
    inv_std_v[r] = inv;
    T* op = out.data() + r * E;
    for (int i = 0; i < E; ++i)
      op[i] = (ip[i] - m) * inv * gamma.values()[i] + beta.values()[i];
  }
  return detail::make_op_result<T>(
      input.shape(), std::move(out), {input, gamma, beta},
      [E, rows, mean_v, inv_std_v](TensorNode<T>& node) {
        auto& pi = *node.parents[0];
        auto& pg = *node.parents[1];
        auto& pb = *node.parents[2];
        if (pi.requires_grad) pi.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const T* ip = pi.values.data() + r * E;
          const T* g = node.grad.data() + r * E;
          const T m = mean_v[r], inv = inv_std_v[r];
          T sum_gg = T(0), sum_ggx = T(0);
          for (int i = 0; i < E; ++i) {
            const T xh = (ip[i] - m) * inv;
            const T gg = g[i] * pg.values[i];
            sum_gg += gg;
            sum_ggx += gg * xh;
            if (pg.requires_grad) pg.grad[i] += g[i] * xh;
            if (pb.requires_grad) pb.grad[i] += g[i];
          }
          if (pi.requires_grad) {
            T* gx = pi.grad.data() + r * E;
            const T invE = T(1) / static_cast<T>(E);
            for (int i = 0; i < E; ++i) {
              const T xh = (ip[i] - m) * inv;
              const T gg = g[i] * pg.values[i];
              gx[i] += inv * (gg - sum_gg * invE - xh * sum_ggx * invE);
            }
          }
        }
      });
}

// Adds a per-channel bias [C] to [N,C,D,H,W] (time-embedding injection).
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 5 || bias.numel() != x.dim(1))
    throw std::invalid_argument("add_channel_bias: shape mismatch");
  const int N = x.dim(0), C = x.dim(1);
  const int64_t S = static_cast<int64_t>(x.dim(2)) * x.dim(3) * x.dim(4);
  std::vector<T> out(x.values().size());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T b = bias.values()[c];
      const T* ip = x.values().data() + (static_cast<int64_t>(n) * C + c) * S;
      T* op = out.data() + (static_cast<int64_t>(n) * C + c) * S;
      for (int64_t i = 0; i < S; ++i) op[i] = ip[i] + b;
    }
  return detail::make_op_result<T>(
      x.shape(), std::move(out), {x, bias}, [N, C, S](TensorNode<T>& node) {
        auto& px = *node.parents[0];
        auto& pb = *node.parents[1];
        if (px.requires_grad) {
          px.ensure_grad();
          for (size_t i = 0; i < node.grad.size(); ++i) px.grad[i] += node.grad[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
              const T* g = node.grad.data() + (static_cast<int64_t>(n) * C + c) * S;
              T acc = T(0);
              for (int64_t i = 0; i < S; ++i) acc += g[i];
              pb.grad[c] += acc;
            }
        }
      });
}

// [N,C,d,h,w] -> [N, d*h*w, C] token sequence (x fastest token order).
template <typename T>
Tensor<T> grid_to_tokens(const Tensor<T>& x) {
  if (x.rank() != 5) throw std::invalid_argument("grid_to_tokens: expects [N,C,D,H,W]");
  const int N = x.dim(0), C = x.dim(1);
  const int64_t S = static_cast<int64_t>(x.dim(2)) * x.dim(3) * x.dim(4);
  std::vector<T> out(x.values().size());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* ip = x.values().data() + (static_cast<int64_t>(n) * C + c) * S;
      for (int64_t s = 0; s < S; ++s) out[(static_cast<int64_t>(n) * S + s) * C + c] = ip[s];
    }
  return detail::make_op_result<T>(
      {N, static_cast<int>(S), C}, std::move(out), {x}, [N, C, S](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            T* gp = p.grad.data() + (static_cast<int64_t>(n) * C + c) * S;
            for (int64_t s = 0; s < S; ++s)
              gp[s] += node.grad[(static_cast<int64_t>(n) * S + s) * C + c];
          }
      });
}

// [N, d*h*w, C] -> [N,C,d,h,w]; inverse of grid_to_tokens.
template <typename T>
Tensor<T> tokens_to_grid(const Tensor<T>& t, int d, int h, int w) {
  if (t.rank() != 3 || t.dim(1) != d * h * w)
    throw std::invalid_argument("tokens_to_grid: token count does not match grid");
  const int N = t.dim(0), C = t.dim(2);
  const int64_t S = static_cast<int64_t>(d) * h * w;
  std::vector<T> out(t.values().size());
  for (int n = 0; n < N; ++n)
    for (int64_t s = 0; s < S; ++s)
      for (int c = 0; c < C; ++c)
        out[(static_cast<int64_t>(n) * C + c) * S + s] =
            t.values()[(static_cast<int64_t>(n) * S + s) * C + c];
  return detail::make_op_result<T>(
      {N, C, d, h, w}, std::move(out), {t}, [N, C, S](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int n = 0; n < N; ++n)
          for (int64_t s = 0; s < S; ++s)
            for (int c = 0; c < C; ++c)
              p.grad[(static_cast<int64_t>(n) * S + s) * C + c] +=
                  node.grad[(static_cast<int64_t>(n) * C + c) * S + s];
      });
}

// Scaled dot-product multi-head attention on [N,T,E] sequences.
// q/k/v are pre-projection inputs; the four projection matrices are the
// caller's parameters so the op stays a pure function of tensors.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               int heads, const Tensor<T>& wq, const Tensor<T>& wk,
                               const Tensor<T>& wv, const Tensor<T>& wo) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
    throw std::invalid_argument("attention: expects [N,T,E] inputs");
  const int N = q.dim(0), Tq = q.dim(1), E = q.dim(2);
  if (E % heads != 0) throw std::invalid_argument("attention: embed dim not divisible by heads");
  const int dh = E / heads;

  auto project = [&](const Tensor<T>& x, const Tensor<T>& w) { return linear(x, w); };
  Tensor<T> Q = project(q, wq);  // [N,T,E]
  Tensor<T> K = project(k, wk);
  Tensor<T> V = project(v, wv);

  // Split heads: [N,T,E] -> [N*heads, T, dh]
  auto split_heads = [&](const Tensor<T>& x, int Tlen) {
    Tensor<T> r = reshape(x, {N, Tlen, heads, dh});
    // permute to [N, heads, Tlen, dh]
    std::vector<T> out(r.values().size());
    for (int n = 0; n < N; ++n)
      for (int t = 0; t < Tlen; ++t)
        for (int hh = 0; hh < heads; ++hh)
          for (int e = 0; e < dh; ++e)
            out[(((static_cast<int64_t>(n) * heads + hh) * Tlen) + t) * dh + e] =
                r.values()[(((static_cast<int64_t>(n) * Tlen + t) * heads) + hh) * dh + e];
    return detail::make_op_result<T>(
        {N * heads, Tlen, dh}, std::move(out), {r},
        [N, Tlen, heads = heads, dh](TensorNode<T>& node) {
          auto& p = *node.parents[0];
          if (!p.requires_grad) return;
          p.ensure_grad();
          for (int n = 0; n < N; ++n)
            for (int t = 0; t < Tlen; ++t)
              for (int hh = 0; hh < heads; ++hh)
                for (int e = 0; e < dh; ++e)
                  p.grad[(((static_cast<int64_t>(n) * Tlen + t) * heads) + hh) * dh + e] +=
                      node.grad[(((static_cast<int64_t>(n) * heads + hh) * Tlen) + t) * dh + e];
        });
  };
  auto merge_heads = [&](const Tensor<T>& x, int Tlen) {
    // [N*heads, Tlen, dh] -> [N, Tlen, E]
    std::vector<T> out(x.values().size());
    for (int n = 0; n < N; ++n)
      for (int hh = 0; hh < heads; ++hh)
        for (int t = 0; t < Tlen; ++t)
          for (int e = 0; e < dh; ++e)
            out[((static_cast<int64_t>(n) * Tlen + t) * heads + hh) * dh + e] =
                x.values()[(((static_cast<int64_t>(n) * heads + hh) * Tlen) + t) * dh + e];
    return detail::make_op_result<T>(
        {N, Tlen, heads * dh}, std::move(out), {x},
        [N, Tlen, heads = heads, dh](TensorNode<T>& node) {
          auto& p = *node.parents[0];
          if (!p.requires_grad) return;
          p.ensure_grad();
          for (int n = 0; n < N; ++n)
            for (int hh = 0; hh < heads; ++hh)
              for (int t = 0; t < Tlen; ++t)
                for (int e = 0; e < dh; ++e)
                  p.grad[(((static_cast<int64_t>(n) * heads + hh) * Tlen) + t) * dh + e] +=
                      node.grad[((static_cast<int64_t>(n) * Tlen + t) * heads + hh) * dh + e];
        });
  };

  Tensor<T> Qh = split_heads(Q, Tq);
  Tensor<T> Kh = split_heads(K, k.dim(1));
  Tensor<T> Vh = split_heads(V, v.dim(1));

  Tensor<T> scores = scale(bmm(Qh, Kh, false, true), T(1) / std::sqrt(static_cast<T>(dh)));
  Tensor<T> attn = softmax_lastdim(scores);        // row-stochastic per query
  Tensor<T> ctx = bmm(attn, Vh);                   // [N*heads, Tq, dh]
  Tensor<T> merged = merge_heads(ctx, Tq);         // [N, Tq, E]
  return linear(merged, wo);
}

// --- parameters & optimizer ------------------------------------------------

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> adam_m, adam_v;
  int64_t step_count = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {
    adam_m.assign(value.values().size(), T(0));
    adam_v.assign(value.values().size(), T(0));
  }
};

// Deterministic fan-in uniform init: U(-b, b), b = gain / sqrt(fan_in).
template <typename T>
Tensor<T> uniform_init(std::vector<int> shape, int64_t fan_in, std::mt19937_64& rng,
                       double gain = 1.0) {
  const double b = gain / std::sqrt(static_cast<double>(std::max<int64_t>(fan_in, 1)));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) {
    // fixed 53-bit uniform; avoids distribution implementation differences
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    x = static_cast<T>((2.0 * u - 1.0) * b);
  }
  return Tensor<T>(std::move(shape), std::move(v), true);
}

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

// Decoupled weight decay, then bias-corrected Adam.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, const AdamOptions& opt = {}) {
  for (Parameter<T>* p : params) {
    if (!p->value.has_grad()) throw std::runtime_error("adam_step: parameter '" + p->name + "' has no gradient");
    p->step_count += 1;
    const T bc1 = T(1) - static_cast<T>(std::pow(opt.beta1, static_cast<double>(p->step_count)));
    const T bc2 = T(1) - static_cast<T>(std::pow(opt.beta2, static_cast<double>(p->step_count)));
    auto& w = p->value.values();
    const auto& g = p->value.grad();
    for (size_t i = 0; i < w.size(); ++i) {
      w[i] -= static_cast<T>(opt.lr * opt.weight_decay) * w[i];
      p->adam_m[i] = static_cast<T>(opt.beta1) * p->adam_m[i] + (T(1) - static_cast<T>(opt.beta1)) * g[i];
      p->adam_v[i] = static_cast<T>(opt.beta2) * p->adam_v[i] + (T(1) - static_cast<T>(opt.beta2)) * g[i] * g[i];
      const T mhat = p->adam_m[i] / bc1;
      const T vhat = p->adam_v[i] / bc2;
      w[i] -= static_cast<T>(opt.lr) * mhat / (std::sqrt(vhat) + static_cast<T>(opt.eps));
    }
  }
}

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (Parameter<T>* p : params) p->value.zero_grad();
}

}  // namespace volf
