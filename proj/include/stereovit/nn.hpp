#pragma once

// Layer norm, multi-head self/cross attention, feed-forward network and the
// pre-norm transformer block composed from the tensor primitives.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "stereovit/tensor.hpp"

namespace stereovit {

template <class S>
struct LayerNormParams {
  Tensor<S> gamma;  // [k]
  Tensor<S> beta;   // [k]
  double eps = 1e-6;

  static LayerNormParams identity(int64_t k, bool requires_grad = true) {
    LayerNormParams p;
    p.gamma = Tensor<S>::filled({k}, static_cast<S>(1), requires_grad);
    p.beta = Tensor<S>::zeros({k}, requires_grad);
    return p;
  }
  int64_t dim() const { return gamma.dim(0); }
};

template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const LayerNormParams<S>& p) {
  return layer_norm(x, p.gamma, p.beta, p.eps);
}

// Per-head projections are stored fused as [k x k] matrices; head h owns
// columns [h*k_h, (h+1)*k_h).
template <class S>
struct AttentionParams {
  Tensor<S> wq, bq, wk, bk, wv, bv;  // [k x k], [k]
  Tensor<S> wo, bo;                  // output projection [k x k], [k]
  int heads = 1;

  int64_t embed_dim() const { return wq.dim(0); }
  int64_t head_dim() const { return embed_dim() / heads; }
  void validate() const {
    const int64_t k = embed_dim();
    if (heads < 1 || k % heads != 0) {
      throw std::invalid_argument("attention: embed dim " + std::to_string(k) +
                                  " not divisible by " + std::to_string(heads) + " heads");
    }
  }
};

template <class S>
struct FfnParams {
  Tensor<S> w1, b1;  // [k x hidden], [hidden]
  Tensor<S> w2, b2;  // [hidden x k], [k]
  int64_t hidden_dim() const { return w1.dim(1); }
};

template <class S>
struct BlockParams {
  LayerNormParams<S> ln1;
  AttentionParams<S> attn;
  LayerNormParams<S> ln2;
  FfnParams<S> ffn;
};

template <class S>
struct AttentionResult {
  Tensor<S> tokens;
  Tensor<S> maps;  // [H x S_q x S_kv] detached probabilities; only if requested
};

// Attention sub-layer: per-head softmax(Q K^T / sqrt(D_h)) V, heads
// concatenated, then the output projection. No residual or norm here.
template <class S>
AttentionResult<S> multi_head_attention(const Tensor<S>& query_src, const Tensor<S>& kv_src,
                                        const AttentionParams<S>& p, bool want_maps = false) {
  p.validate();
  const int64_t k = p.embed_dim();
  if (query_src.rank() != 2 || kv_src.rank() != 2 || query_src.dim(1) != k || kv_src.dim(1) != k) {
    throw std::invalid_argument("attention: token dims " + shape_str(query_src.shape()) + ", " +
                                shape_str(kv_src.shape()) + " do not match embed dim " +
                                std::to_string(k));
  }
  const int64_t dh = p.head_dim();
  const int64_t sq = query_src.dim(0), skv = kv_src.dim(0);
  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  Tensor<S> q = add(matmul(query_src, p.wq), p.bq);
  Tensor<S> key = add(matmul(kv_src, p.wk), p.bk);
  Tensor<S> v = add(matmul(kv_src, p.wv), p.bv);

  Tensor<S> heads;
  std::vector<S> map_data;
  if (want_maps) map_data.reserve(static_cast<size_t>(p.heads * sq * skv));
  for (int h = 0; h < p.heads; ++h) {
    Tensor<S> qh = slice(q, 1, h * dh, dh);
    Tensor<S> kh = slice(key, 1, h * dh, dh);
    Tensor<S> vh = slice(v, 1, h * dh, dh);
    Tensor<S> scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
    Tensor<S> probs = softmax(scores, 1);
    if (want_maps) {
      map_data.insert(map_data.end(), probs.data().begin(), probs.data().end());
    }
    Tensor<S> out_h = matmul(probs, vh);
    heads = h == 0 ? out_h : concat(heads, out_h, 1);
  }
  AttentionResult<S> res;
  res.tokens = add(matmul(heads, p.wo), p.bo);
  if (want_maps) {
    res.maps = Tensor<S>::from_data({p.heads, sq, skv}, std::move(map_data));
  }
  return res;
}

// Complete attention sub-layer including the residual against the query
// source and the trailing layer norm.
template <class S>
AttentionResult<S> attention(const Tensor<S>& query_src, const Tensor<S>& kv_src,
                             const AttentionParams<S>& p, const LayerNormParams<S>& out_norm,
                             bool want_maps = true) {
  AttentionResult<S> res = multi_head_attention(query_src, kv_src, p, want_maps);
  res.tokens = layer_norm(add(query_src, res.tokens), out_norm);
  return res;
}

// Token-wise two-layer MLP with GELU; the hidden layer widens by the
// expansion factor.
template <class S>
Tensor<S> ffn(const Tensor<S>& x, const FfnParams<S>& p) {
  return add(matmul(gelu(add(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

// Pre-norm block: y = x + MHSA(LN1(x)); out = y + FFN(LN2(y)).
template <class S>
Tensor<S> transformer_block(const Tensor<S>& x, const BlockParams<S>& p) {
  Tensor<S> xn = layer_norm(x, p.ln1);
  Tensor<S> y = add(x, multi_head_attention(xn, xn, p.attn).tokens);
  return add(y, ffn(layer_norm(y, p.ln2), p.ffn));
}

// Same composition with cross-attention: queries come from the decoder
// tokens, keys and values from the encoder tokens.
template <class S>
Tensor<S> fusion_block(const Tensor<S>& decoder_tokens, const Tensor<S>& encoder_tokens,
                       const BlockParams<S>& p, Tensor<S>* maps_out = nullptr) {
  if (decoder_tokens.shape() != encoder_tokens.shape()) {
    throw std::invalid_argument("fusion_block: sequence shapes differ, " +
                                shape_str(decoder_tokens.shape()) + " vs " +
                                shape_str(encoder_tokens.shape()));
  }
  Tensor<S> dq = layer_norm(decoder_tokens, p.ln1);
  Tensor<S> ekv = layer_norm(encoder_tokens, p.ln1);
  AttentionResult<S> att = multi_head_attention(dq, ekv, p.attn, maps_out != nullptr);
  if (maps_out) *maps_out = att.maps;
  Tensor<S> y = add(decoder_tokens, att.tokens);
  return add(y, ffn(layer_norm(y, p.ln2), p.ffn));
}

}  // namespace stereovit
