#pragma once

#include <cmath>
#include <vector>

#include "svad/tensor.hpp"

namespace svad {

// Pre-norm transformer encoder layer: x += MHSA(LN(x)); x += MLP(LN(x)).
// QKV is fused into one projection; the MLP uses SiLU.

template <typename S>
struct TransformerLayerT {
  TensorT<S> ln1_g, ln1_b, ln2_g, ln2_b;
  TensorT<S> w_qkv, b_qkv;  // [d,3d], [3d]
  TensorT<S> w_out, b_out;  // [d,d], [d]
  TensorT<S> w_mlp1, b_mlp1, w_mlp2, b_mlp2;
};

using TransformerLayer = TransformerLayerT<float>;

template <typename S>
TensorT<S> linear_uniform(size_t fan_in, size_t fan_out, Rng& rng) {
  const double lim = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rand_uniform<S>(Shape{fan_in, fan_out}, rng, -lim, lim);
}

template <typename S>
TransformerLayerT<S> make_transformer_layer(size_t d, size_t mlp_factor, Rng& rng) {
  TransformerLayerT<S> l;
  l.ln1_g = TensorT<S>::ones(Shape{d});
  l.ln1_b = TensorT<S>::zeros(Shape{d});
  l.ln2_g = TensorT<S>::ones(Shape{d});
  l.ln2_b = TensorT<S>::zeros(Shape{d});
  l.w_qkv = linear_uniform<S>(d, 3 * d, rng);
  l.b_qkv = TensorT<S>::zeros(Shape{3 * d});
  l.w_out = linear_uniform<S>(d, d, rng);
  l.b_out = TensorT<S>::zeros(Shape{d});
  const size_t h = d * mlp_factor;
  l.w_mlp1 = linear_uniform<S>(d, h, rng);
  l.b_mlp1 = TensorT<S>::zeros(Shape{h});
  l.w_mlp2 = linear_uniform<S>(h, d, rng);
  l.b_mlp2 = TensorT<S>::zeros(Shape{d});
  return l;
}

// `seq_len` lets several independent sequences share one projection pass:
// rows are processed as consecutive chunks of seq_len tokens, and attention
// never crosses a chunk boundary.
template <typename S>
TensorT<S> transformer_layer_forward(const TensorT<S>& x, const TransformerLayerT<S>& l,
                                     size_t heads, size_t seq_len = 0) {
  if (x.shape.rank != 2) throw ValidationError("transformer: expected rank-2 input");
  const size_t rows = x.shape[0], d = x.shape[1];
  if (seq_len == 0) seq_len = rows;
  if (rows % seq_len != 0)
    throw ValidationError("transformer: rows " + std::to_string(rows) +
                          " not a multiple of sequence length " + std::to_string(seq_len));

  TensorT<S> h = layer_norm(x, l.ln1_g, l.ln1_b);
  TensorT<S> qkv = add(matmul(h, l.w_qkv), l.b_qkv);
  TensorT<S> q = slice_cols(qkv, 0, d);
  TensorT<S> k = slice_cols(qkv, d, 2 * d);
  TensorT<S> v = slice_cols(qkv, 2 * d, 3 * d);

  TensorT<S> attn;
  if (rows == seq_len) {
    attn = scaled_dot_product_attention(q, k, v, heads);
  } else {
    std::vector<TensorT<S>> chunks;
    for (size_t r = 0; r < rows; r += seq_len)
      chunks.push_back(scaled_dot_product_attention(slice_rows(q, r, r + seq_len),
                                                    slice_rows(k, r, r + seq_len),
                                                    slice_rows(v, r, r + seq_len), heads));
    attn = concat(0, chunks);
  }
  TensorT<S> y = add(x, add(matmul(attn, l.w_out), l.b_out));

  TensorT<S> m = layer_norm(y, l.ln2_g, l.ln2_b);
  m = add(matmul(silu(add(matmul(m, l.w_mlp1), l.b_mlp1)), l.w_mlp2), l.b_mlp2);
  return add(y, m);
}

}  // namespace svad
