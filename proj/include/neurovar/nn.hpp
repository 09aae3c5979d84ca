#pragma once

#include <cmath>
#include <string>

#include "neurovar/adam.hpp"
#include "neurovar/tensor.hpp"

namespace nv {

// Uniform(-limit, limit) init with the fan-based limit used throughout.
template <class T>
TensorT<T> glorot_init(Shape shape, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> d(static_cast<std::size_t>(numel(shape)));
  for (auto& v : d) v = static_cast<T>(rng.uniform(-limit, limit));
  return TensorT<T>::from(std::move(shape), std::move(d));
}

template <class T>
struct AttentionParams {
  TensorT<T> wq, bq, wk, bk, wv, bv, wo, bo;

  static AttentionParams init(std::int64_t e, Rng& rng) {
    AttentionParams p;
    p.wq = glorot_init<T>({e, e}, e, e, rng);
    p.wk = glorot_init<T>({e, e}, e, e, rng);
    p.wv = glorot_init<T>({e, e}, e, e, rng);
    p.wo = glorot_init<T>({e, e}, e, e, rng);
    p.bq = TensorT<T>::zeros({e});
    p.bk = TensorT<T>::zeros({e});
    p.bv = TensorT<T>::zeros({e});
    p.bo = TensorT<T>::zeros({e});
    return p;
  }
  void register_params(ParamList<T>& list, const std::string& prefix) {
    wq = list.add(prefix + ".wq", wq);
    bq = list.add(prefix + ".bq", bq);
    wk = list.add(prefix + ".wk", wk);
    bk = list.add(prefix + ".bk", bk);
    wv = list.add(prefix + ".wv", wv);
    bv = list.add(prefix + ".bv", bv);
    wo = list.add(prefix + ".wo", wo);
    bo = list.add(prefix + ".bo", bo);
  }
};

// Scaled dot-product multi-head self-attention over [N, L, E]. All sequences
// in scope are fixed length, so no masking.
template <class T>
TensorT<T> multi_head_attention(const TensorT<T>& x, const AttentionParams<T>& p, int heads) {
  if (x.rank() != 3) throw ShapeError("attention: expected [N,L,E], got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), l = x.dim(1), e = x.dim(2);
  if (e % heads != 0)
    throw ShapeError("attention: embedding dim " + std::to_string(e) +
                     " not divisible by heads " + std::to_string(heads));
  const std::int64_t dh = e / heads;

  auto split = [&](const TensorT<T>& t) {
    // [N,L,E] -> [N*H, L, dh]
    auto r = reshape(t, {n, l, heads, dh});
    r = permute(r, {0, 2, 1, 3});
    return reshape(r, {n * heads, l, dh});
  };
  auto q = split(linear(x, p.wq, p.bq));
  auto k = split(linear(x, p.wk, p.bk));
  auto v = split(linear(x, p.wv, p.bv));

  auto scores = scale(bmm(q, k, /*transpose_b=*/true),
                      static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  auto attn = softmax(scores);
  auto ctx = bmm(attn, v, /*transpose_b=*/false);  // [N*H, L, dh]
  ctx = reshape(ctx, {n, heads, l, dh});
  ctx = permute(ctx, {0, 2, 1, 3});
  ctx = reshape(ctx, {n, l, e});
  return linear(ctx, p.wo, p.bo);
}

template <class T>
struct TransformerLayerParams {
  AttentionParams<T> attn;
  TensorT<T> ln1_g, ln1_b, ln2_g, ln2_b;
  TensorT<T> ff_w1, ff_b1, ff_w2, ff_b2;

  static TransformerLayerParams init(std::int64_t e, std::int64_t ff, Rng& rng) {
    TransformerLayerParams p;
    p.attn = AttentionParams<T>::init(e, rng);
    p.ln1_g = TensorT<T>::full({e}, T(1));
    p.ln1_b = TensorT<T>::zeros({e});
    p.ln2_g = TensorT<T>::full({e}, T(1));
    p.ln2_b = TensorT<T>::zeros({e});
    p.ff_w1 = glorot_init<T>({e, ff}, e, ff, rng);
    p.ff_b1 = TensorT<T>::zeros({ff});
    p.ff_w2 = glorot_init<T>({ff, e}, ff, e, rng);
    p.ff_b2 = TensorT<T>::zeros({e});
    return p;
  }
  void register_params(ParamList<T>& list, const std::string& prefix) {
    attn.register_params(list, prefix + ".attn");
    ln1_g = list.add(prefix + ".ln1_g", ln1_g);
    ln1_b = list.add(prefix + ".ln1_b", ln1_b);
    ln2_g = list.add(prefix + ".ln2_g", ln2_g);
    ln2_b = list.add(prefix + ".ln2_b", ln2_b);
    ff_w1 = list.add(prefix + ".ff_w1", ff_w1);
    ff_b1 = list.add(prefix + ".ff_b1", ff_b1);
    ff_w2 = list.add(prefix + ".ff_w2", ff_w2);
    ff_b2 = list.add(prefix + ".ff_b2", ff_b2);
  }
};

// Pre-norm encoder block: x + MHA(LN(x)), then x + FFN(LN(x)).
template <class T>
TensorT<T> transformer_layer(const TensorT<T>& x, const TransformerLayerParams<T>& p, int heads,
                             T dropout_rate, bool training, Rng& rng) {
  auto h = layer_norm(x, p.ln1_g, p.ln1_b);
  auto a = multi_head_attention(h, p.attn, heads);
  a = dropout(a, dropout_rate, training, rng);
  auto y = add(x, a);
  h = layer_norm(y, p.ln2_g, p.ln2_b);
  auto f = linear(h, p.ff_w1, p.ff_b1);
  f = gelu(f);
  f = linear(f, p.ff_w2, p.ff_b2);
  f = dropout(f, dropout_rate, training, rng);
  return add(y, f);
}

}  // namespace nv
