#pragma once

// Pre-norm Transformer encoder block over a token sequence [N, E]:
//   x2 = x + Wo * MHSA(LN1(x));  y = x2 + W2 * GELU(W1 * LN2(x2))

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "srcaware/nn/layers.hpp"

namespace srcaware::nn {

struct TransformerBlockSpec {
  int dim = 32;
  int heads = 4;
  int ff = 128;
  // Test hook: replace the attention matrix by the identity.
  bool identity_attention = false;

  int head_dim() const { return dim / heads; }
};

struct TransformerBlockParams {
  std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w1, b1, w2, b2;
};

template <class T>
TransformerBlockParams add_transformer_block(ParamStore<T>& ps, const TransformerBlockSpec& s, const std::string& prefix,
                                             const std::string& group, Rng& rng) {
  require(s.dim % s.heads == 0, "embedding dim must be divisible by head count");
  TransformerBlockParams p{};
  p.ln1_g = ps.add(prefix + ".ln1.gamma", group, {s.dim});
  p.ln1_b = ps.add(prefix + ".ln1.beta", group, {s.dim});
  p.w_qkv = ps.add(prefix + ".attn.qkv.weight", group, {3 * s.dim, s.dim});
  p.b_qkv = ps.add(prefix + ".attn.qkv.bias", group, {3 * s.dim});
  p.w_o = ps.add(prefix + ".attn.out.weight", group, {s.dim, s.dim});
  p.b_o = ps.add(prefix + ".attn.out.bias", group, {s.dim});
  p.ln2_g = ps.add(prefix + ".ln2.gamma", group, {s.dim});
  p.ln2_b = ps.add(prefix + ".ln2.beta", group, {s.dim});
  p.w1 = ps.add(prefix + ".ff1.weight", group, {s.ff, s.dim});
  p.b1 = ps.add(prefix + ".ff1.bias", group, {s.ff});
  p.w2 = ps.add(prefix + ".ff2.weight", group, {s.dim, s.ff});
  p.b2 = ps.add(prefix + ".ff2.bias", group, {s.dim});
  init_fill(ps[p.ln1_g], T(1));
  init_fill(ps[p.ln2_g], T(1));
  const double xavier = std::sqrt(1.0 / s.dim);
  init_normal(ps[p.w_qkv], rng, xavier);
  init_normal(ps[p.w_o], rng, xavier);
  init_normal(ps[p.w1], rng, xavier);
  init_normal(ps[p.w2], rng, std::sqrt(1.0 / s.ff));
  return p;
}

template <class T>
struct TransformerBlockCache {
  Tensor<T> x, h1, qkv, attn_out, x2, h2, f1, g;
  LayerNormCache<T> ln1, ln2;
  std::vector<T> attn;  // [heads, N, N]
};

template <class T>
Tensor<T> transformer_block_forward(const TransformerBlockSpec& s, const ParamStore<T>& ps,
                                    const TransformerBlockParams& p, const Tensor<T>& x, TransformerBlockCache<T>& c) {
  require(x.shape.size() == 2 && x.shape[1] == s.dim, "transformer block expects [N, dim] tokens");
  const int N = x.shape[0], E = s.dim, H = s.heads, dh = s.head_dim();
  c.x = x;
  c.h1 = layernorm_forward(ps[p.ln1_g], ps[p.ln1_b], x, c.ln1);
  c.qkv = linear_forward(LinearSpec{E, 3 * E}, ps[p.w_qkv], ps[p.b_qkv], c.h1);
  c.attn.assign(static_cast<std::size_t>(H) * N * N, T{0});
  c.attn_out = Tensor<T>({N, E});
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  auto q = [&](int n, int h, int d) { return c.qkv.data[static_cast<std::size_t>(n) * 3 * E + h * dh + d]; };
  auto k = [&](int n, int h, int d) { return c.qkv.data[static_cast<std::size_t>(n) * 3 * E + E + h * dh + d]; };
  auto v = [&](int n, int h, int d) { return c.qkv.data[static_cast<std::size_t>(n) * 3 * E + 2 * E + h * dh + d]; };
  for (int h = 0; h < H; ++h) {
    T* A = c.attn.data() + static_cast<std::size_t>(h) * N * N;
    for (int i = 0; i < N; ++i) {
      T* row = A + static_cast<std::size_t>(i) * N;
      if (s.identity_attention) {
        row[i] = T(1);
      } else {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < N; ++j) {
          T dot{0};
          for (int d = 0; d < dh; ++d) dot += q(i, h, d) * k(j, h, d);
          row[j] = dot * scale;
          mx = std::max(mx, row[j]);
        }
        T sum{0};
        for (int j = 0; j < N; ++j) sum += (row[j] = std::exp(row[j] - mx));
        for (int j = 0; j < N; ++j) row[j] /= sum;
      }
      for (int d = 0; d < dh; ++d) {
        T acc{0};
        for (int j = 0; j < N; ++j) acc += row[j] * v(j, h, d);
        c.attn_out.data[static_cast<std::size_t>(i) * E + h * dh + d] = acc;
      }
    }
  }
  c.x2 = linear_forward(LinearSpec{E, E}, ps[p.w_o], ps[p.b_o], c.attn_out);
  add_inplace(c.x2, x);
  c.h2 = layernorm_forward(ps[p.ln2_g], ps[p.ln2_b], c.x2, c.ln2);
  c.f1 = linear_forward(LinearSpec{E, s.ff}, ps[p.w1], ps[p.b1], c.h2);
  c.g = gelu_forward(c.f1);
  Tensor<T> y = linear_forward(LinearSpec{s.ff, E}, ps[p.w2], ps[p.b2], c.g);
  add_inplace(y, c.x2);
  return y;
}

template <class T>
Tensor<T> transformer_block_backward(const TransformerBlockSpec& s, ParamStore<T>& ps, const TransformerBlockParams& p,
                                     const TransformerBlockCache<T>& c, const Tensor<T>& dy) {
  const int N = c.x.shape[0], E = s.dim, H = s.heads, dh = s.head_dim();
  // feed-forward branch
  Tensor<T> dg = linear_backward(LinearSpec{s.ff, E}, ps[p.w2], ps[p.b2], c.g, dy, true);
  Tensor<T> df1 = gelu_backward(c.f1, dg);
  Tensor<T> dh2 = linear_backward(LinearSpec{E, s.ff}, ps[p.w1], ps[p.b1], c.h2, df1, true);
  Tensor<T> dx2 = layernorm_backward(ps[p.ln2_g], ps[p.ln2_b], c.ln2, dh2);
  add_inplace(dx2, dy);
  // attention branch
  Tensor<T> dattn_out = linear_backward(LinearSpec{E, E}, ps[p.w_o], ps[p.b_o], c.attn_out, dx2, true);
  Tensor<T> dqkv({N, 3 * E});
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  auto at = [&](const Tensor<T>& t, int n, int off) { return t.data[static_cast<std::size_t>(n) * 3 * E + off]; };
  std::vector<T> dA(static_cast<std::size_t>(N) * N);
  for (int h = 0; h < H; ++h) {
    const T* A = c.attn.data() + static_cast<std::size_t>(h) * N * N;
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j) {
        T acc{0};
        for (int d = 0; d < dh; ++d)
          acc += dattn_out.data[static_cast<std::size_t>(i) * E + h * dh + d] * at(c.qkv, j, 2 * E + h * dh + d);
        dA[static_cast<std::size_t>(i) * N + j] = acc;
      }
    // dV = A^T dO
    for (int j = 0; j < N; ++j)
      for (int d = 0; d < dh; ++d) {
        T acc{0};
        for (int i = 0; i < N; ++i)
          acc += A[static_cast<std::size_t>(i) * N + j] * dattn_out.data[static_cast<std::size_t>(i) * E + h * dh + d];
        dqkv.data[static_cast<std::size_t>(j) * 3 * E + 2 * E + h * dh + d] += acc;
      }
    if (s.identity_attention) continue;
    // softmax backward, then scores -> q, k
    for (int i = 0; i < N; ++i) {
      const T* a = A + static_cast<std::size_t>(i) * N;
      T* g = dA.data() + static_cast<std::size_t>(i) * N;
      T dot{0};
      for (int j = 0; j < N; ++j) dot += a[j] * g[j];
      for (int j = 0; j < N; ++j) g[j] = a[j] * (g[j] - dot) * scale;
    }
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j) {
        const T ds = dA[static_cast<std::size_t>(i) * N + j];
        if (ds == T{0}) continue;
        for (int d = 0; d < dh; ++d) {
          dqkv.data[static_cast<std::size_t>(i) * 3 * E + h * dh + d] += ds * at(c.qkv, j, E + h * dh + d);
          dqkv.data[static_cast<std::size_t>(j) * 3 * E + E + h * dh + d] += ds * at(c.qkv, i, h * dh + d);
        }
      }
  }
  Tensor<T> dh1 = linear_backward(LinearSpec{E, 3 * E}, ps[p.w_qkv], ps[p.b_qkv], c.h1, dqkv, true);
  Tensor<T> dx = layernorm_backward(ps[p.ln1_g], ps[p.ln1_b], c.ln1, dh1);
  add_inplace(dx, dx2);
  return dx;
}

}  // namespace srcaware::nn
