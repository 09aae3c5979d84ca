#include "neurovar/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <unordered_set>

namespace nv {

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

namespace {

void check(bool ok, const char* op, const std::string& msg) {
  if (!ok) throw ShapeError(std::string(op) + ": " + msg);
}

template <class T>
std::shared_ptr<Node<T>> new_node(const char* op, Shape shape, std::vector<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

// Wires parents and the backward closure only when some parent needs
// gradients; inference graphs stay flat and get freed eagerly.
template <class T, class F>
TensorT<T> finish(std::shared_ptr<Node<T>> n, std::vector<std::shared_ptr<Node<T>>> parents,
                  F&& bw) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  if (rg) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::forward<F>(bw);
  }
  return TensorT<T>(std::move(n));
}

// floor/ceil division that is correct for negative numerators.
inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}
inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return -floor_div(-a, b); }

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::int64_t m,
             std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    T* cr = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = ar[p];
      const T* br = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <class T>
void gemm_nt(const T* __restrict a, const T* __restrict b, T* __restrict c, std::int64_t m,
             std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    T* cr = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const T* br = b + j * k;
      T acc = T(0);
      for (std::int64_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      cr[j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::int64_t m,
             std::int64_t k, std::int64_t n) {
  for (std::int64_t p = 0; p < k; ++p) {
    const T* ar = a + p * m;
    const T* br = b + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const T av = ar[i];
      T* cr = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

}  // namespace

// ---- TensorT --------------------------------------------------------------

template <class T>
TensorT<T> TensorT<T>::zeros(Shape shape, bool requires_grad) {
  auto n = new_node<T>("leaf", shape, std::vector<T>(static_cast<std::size_t>(numel(shape)), T(0)));
  n->requires_grad = requires_grad;
  return TensorT<T>(std::move(n));
}

template <class T>
TensorT<T> TensorT<T>::full(Shape shape, T v, bool requires_grad) {
  auto n = new_node<T>("leaf", shape, std::vector<T>(static_cast<std::size_t>(numel(shape)), v));
  n->requires_grad = requires_grad;
  return TensorT<T>(std::move(n));
}

template <class T>
TensorT<T> TensorT<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  if (numel(shape) != static_cast<std::int64_t>(data.size()))
    throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  auto n = new_node<T>("leaf", std::move(shape), std::move(data));
  n->requires_grad = requires_grad;
  return TensorT<T>(std::move(n));
}

template <class T>
TensorT<T> TensorT<T>::scalar(T v, bool requires_grad) {
  return from(Shape{}, std::vector<T>{v}, requires_grad);
}

template <class T>
TensorT<T> TensorT<T>::randn(Shape shape, Rng& rng, T stddev, bool requires_grad) {
  std::vector<T> d(static_cast<std::size_t>(numel(shape)));
  for (auto& v : d) v = static_cast<T>(rng.normal()) * stddev;
  auto n = new_node<T>("leaf", std::move(shape), std::move(d));
  n->requires_grad = requires_grad;
  return TensorT<T>(std::move(n));
}

template <class T>
T TensorT<T>::item() const {
  if (!node_ || node_->value.size() != 1)
    throw ShapeError("item: tensor is not scalar");
  return node_->value[0];
}

// ---- elementwise ----------------------------------------------------------

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const std::int64_t nb = numel(sb);
  bool suffix = sb.size() <= sa.size();
  for (std::size_t i = 0; suffix && i < sb.size(); ++i)
    suffix = sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
  check(suffix || nb == 1, "add",
        "shape " + shape_str(sb) + " is not a trailing suffix of " + shape_str(sa));

  const std::int64_t na = numel(sa);
  const std::int64_t inner = (nb == 1 && sb.empty()) ? 1 : nb;
  std::vector<T> out(a.data());
  const T* bp = b.data().data();
  for (std::int64_t i = 0; i < na; ++i) out[static_cast<std::size_t>(i)] += bp[i % inner];

  auto n = new_node<T>("add", sa, std::move(out));
  return finish(
      std::move(n), {a.node(), b.node()}, [inner](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const std::int64_t na2 = static_cast<std::int64_t>(self.grad.size());
        if (pa.requires_grad)
          for (std::int64_t i = 0; i < na2; ++i)
            pa.grad[static_cast<std::size_t>(i)] += self.grad[static_cast<std::size_t>(i)];
        if (pb.requires_grad)
          for (std::int64_t i = 0; i < na2; ++i)
            pb.grad[static_cast<std::size_t>(i % inner)] += self.grad[static_cast<std::size_t>(i)];
      });
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return add(a, neg(b));
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  check(a.shape() == b.shape(), "mul",
        "shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.data());
  const std::size_t n = out.size();
  const T* bp = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] *= bp[i];
  auto node = new_node<T>("mul", a.shape(), std::move(out));
  return finish(std::move(node), {a.node(), b.node()}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const std::size_t n2 = self.grad.size();
    if (pa.requires_grad)
      for (std::size_t i = 0; i < n2; ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < n2; ++i) pb.grad[i] += self.grad[i] * pa.value[i];
  });
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T s) {
  std::vector<T> out(a.data());
  for (auto& v : out) v *= s;
  auto node = new_node<T>("scale", a.shape(), std::move(out));
  return finish(std::move(node), {a.node()}, [s](Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += s * self.grad[i];
  });
}

template <class T>
TensorT<T> neg(const TensorT<T>& a) {
  return scale(a, T(-1));
}

// ---- linear algebra -------------------------------------------------------

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul",
        "expected rank-2 operands, got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  check(b.dim(0) == k, "matmul",
        "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(m * n), T(0));
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto node = new_node<T>("matmul", Shape{m, n}, std::move(out));
  return finish(std::move(node), {a.node(), b.node()}, [m, k, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) gemm_nt(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
    if (pb.requires_grad) gemm_tn(pa.value.data(), self.grad.data(), pb.grad.data(), k, m, n);
  });
}

template <class T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b, bool transpose_b) {
  check(a.rank() == 3 && b.rank() == 3, "bmm",
        "expected rank-3 operands, got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::int64_t nb = a.dim(0), m = a.dim(1), k = a.dim(2);
  check(b.dim(0) == nb, "bmm", "batch dimensions differ");
  const std::int64_t p = transpose_b ? b.dim(1) : b.dim(2);
  check((transpose_b ? b.dim(2) : b.dim(1)) == k, "bmm",
        "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

  std::vector<T> out(static_cast<std::size_t>(nb * m * p), T(0));
  for (std::int64_t i = 0; i < nb; ++i) {
    const T* ap = a.data().data() + i * m * k;
    const T* bp = b.data().data() + i * (transpose_b ? p * k : k * p);
    T* cp = out.data() + i * m * p;
    if (transpose_b)
      gemm_nt(ap, bp, cp, m, k, p);
    else
      gemm_nn(ap, bp, cp, m, k, p);
  }
  auto node = new_node<T>("bmm", Shape{nb, m, p}, std::move(out));
  return finish(std::move(node), {a.node(), b.node()},
                [nb, m, k, p, transpose_b](Node<T>& self) {
                  auto& pa = *self.parents[0];
                  auto& pb = *self.parents[1];
                  for (std::int64_t i = 0; i < nb; ++i) {
                    const T* g = self.grad.data() + i * m * p;
                    const T* av = pa.value.data() + i * m * k;
                    const T* bv = pb.value.data() + i * (transpose_b ? p * k : k * p);
                    if (pa.requires_grad) {
                      T* ga = pa.grad.data() + i * m * k;
                      if (transpose_b)
                        gemm_nn(g, bv, ga, m, p, k);  // dA = G * B
                      else
                        gemm_nt(g, bv, ga, m, p, k);  // dA = G * B^T
                    }
                    if (pb.requires_grad) {
                      T* gb = pb.grad.data() + i * (transpose_b ? p * k : k * p);
                      if (transpose_b)
                        gemm_tn(g, av, gb, p, m, k);  // dB = G^T * A  -> [P,K]
                      else
                        gemm_tn(av, g, gb, k, m, p);  // dB = A^T * G  -> [K,P]
                    }
                  }
                });
}

template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
  check(x.rank() >= 1 && w.rank() == 2, "linear", "operand ranks");
  const std::int64_t k = x.dim(x.rank() - 1);
  check(w.dim(0) == k, "linear",
        "input feature dim " + std::to_string(k) + " vs weight " + shape_str(w.shape()));
  const std::int64_t n = w.dim(1);
  const std::int64_t rows = x.size() / k;
  std::vector<T> out(static_cast<std::size_t>(rows * n), T(0));
  gemm_nn(x.data().data(), w.data().data(), out.data(), rows, k, n);
  if (bias.defined()) {
    check(bias.rank() == 1 && bias.dim(0) == n, "linear", "bias shape");
    const T* bp = bias.data().data();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(r * n + j)] += bp[j];
  }
  Shape oshape(x.shape());
  oshape.back() = n;

  std::vector<std::shared_ptr<Node<T>>> parents{x.node(), w.node()};
  if (bias.defined()) parents.push_back(bias.node());
  auto node = new_node<T>("linear", std::move(oshape), std::move(out));
  return finish(std::move(node), std::move(parents), [rows, k, n](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    if (px.requires_grad) gemm_nt(self.grad.data(), pw.value.data(), px.grad.data(), rows, n, k);
    if (pw.requires_grad) gemm_tn(px.value.data(), self.grad.data(), pw.grad.data(), k, rows, n);
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& pb = *self.parents[2];
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < n; ++j)
          pb.grad[static_cast<std::size_t>(j)] += self.grad[static_cast<std::size_t>(r * n + j)];
    }
  });
}

// ---- convolution family ---------------------------------------------------

template <class T>
TensorT<T> conv1d(const TensorT<T>& x, const TensorT<T>& w, int stride, int pad_l, int pad_r) {
  check(x.rank() == 3 && w.rank() == 3, "conv1d", "expected x [B,Cin,L], w [Cout,Cin,k]");
  check(stride >= 1 && pad_l >= 0 && pad_r >= 0, "conv1d", "invalid stride/padding");
  const std::int64_t bsz = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const std::int64_t cout = w.dim(0), k = w.dim(2);
  check(w.dim(1) == cin, "conv1d", "channel mismatch: x " + shape_str(x.shape()) + ", w " +
                                       shape_str(w.shape()));
  const std::int64_t lo_len = (len + pad_l + pad_r - k) / stride + 1;
  check(lo_len >= 1, "conv1d", "kernel longer than padded input");

  std::vector<T> out(static_cast<std::size_t>(bsz * cout * lo_len), T(0));
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  for (std::int64_t b = 0; b < bsz; ++b) {
    for (std::int64_t co = 0; co < cout; ++co) {
      T* op = out.data() + (b * cout + co) * lo_len;
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const T* xr = xp + (b * cin + ci) * len;
        const T* wr = wp + (co * cin + ci) * k;
        for (std::int64_t kk = 0; kk < k; ++kk) {
          const T wv = wr[kk];
          // valid output range for this tap: 0 <= lo*stride + kk - pad_l < len
          const std::int64_t lo0 = std::max<std::int64_t>(0, ceil_div(pad_l - kk, stride));
          const std::int64_t lo1 =
              std::min<std::int64_t>(lo_len - 1, floor_div(len - 1 + pad_l - kk, stride));
          const T* xs = xr + kk - pad_l;
          for (std::int64_t lo = lo0; lo <= lo1; ++lo) op[lo] += wv * xs[lo * stride];
        }
      }
    }
  }
  auto node = new_node<T>("conv1d", Shape{bsz, cout, lo_len}, std::move(out));
  return finish(std::move(node), {x.node(), w.node()},
                [bsz, cin, len, cout, k, lo_len, stride, pad_l](Node<T>& self) {
                  auto& px = *self.parents[0];
                  auto& pw = *self.parents[1];
                  for (std::int64_t b = 0; b < bsz; ++b) {
                    for (std::int64_t co = 0; co < cout; ++co) {
                      const T* g = self.grad.data() + (b * cout + co) * lo_len;
                      for (std::int64_t ci = 0; ci < cin; ++ci) {
                        const std::int64_t xoff = (b * cin + ci) * len;
                        const std::int64_t woff = (co * cin + ci) * k;
                        for (std::int64_t kk = 0; kk < k; ++kk) {
                          const std::int64_t lo0 =
                              std::max<std::int64_t>(0, ceil_div(pad_l - kk, stride));
                          const std::int64_t lo1 = std::min<std::int64_t>(
                              lo_len - 1, floor_div(len - 1 + pad_l - kk, stride));
                          if (px.requires_grad) {
                            const T wv = pw.value[static_cast<std::size_t>(woff + kk)];
                            T* gx = px.grad.data() + xoff + kk - pad_l;
                            for (std::int64_t lo = lo0; lo <= lo1; ++lo)
                              gx[lo * stride] += wv * g[lo];
                          }
                          if (pw.requires_grad) {
                            const T* xs = px.value.data() + xoff + kk - pad_l;
                            T acc = T(0);
                            for (std::int64_t lo = lo0; lo <= lo1; ++lo)
                              acc += g[lo] * xs[lo * stride];
                            pw.grad[static_cast<std::size_t>(woff + kk)] += acc;
                          }
                        }
                      }
                    }
                  }
                });
}

template <class T>
TensorT<T> conv1d_transpose(const TensorT<T>& x, const TensorT<T>& w, int stride, int pad) {
  check(x.rank() == 3 && w.rank() == 3, "conv1d_transpose",
        "expected x [B,Cin,L], w [Cin,Cout,k]");
  check(stride >= 1 && pad >= 0, "conv1d_transpose", "invalid stride/padding");
  const std::int64_t bsz = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const std::int64_t cout = w.dim(1), k = w.dim(2);
  check(w.dim(0) == cin, "conv1d_transpose", "channel mismatch: x " + shape_str(x.shape()) +
                                                 ", w " + shape_str(w.shape()));
  const std::int64_t lo_len = (len - 1) * stride + k - 2 * pad;
  check(lo_len >= 1, "conv1d_transpose", "output length would be empty");

  std::vector<T> out(static_cast<std::size_t>(bsz * cout * lo_len), T(0));
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  for (std::int64_t b = 0; b < bsz; ++b) {
    for (std::int64_t ci = 0; ci < cin; ++ci) {
      const T* xr = xp + (b * cin + ci) * len;
      for (std::int64_t co = 0; co < cout; ++co) {
        T* op = out.data() + (b * cout + co) * lo_len;
        const T* wr = wp + (ci * cout + co) * k;
        for (std::int64_t kk = 0; kk < k; ++kk) {
          const T wv = wr[kk];
          // output index l*stride + kk - pad must be in [0, lo_len)
          const std::int64_t l0 = std::max<std::int64_t>(0, ceil_div(pad - kk, stride));
          const std::int64_t l1 =
              std::min<std::int64_t>(len - 1, floor_div(lo_len - 1 + pad - kk, stride));
          T* os = op + kk - pad;
          for (std::int64_t l = l0; l <= l1; ++l) os[l * stride] += wv * xr[l];
        }
      }
    }
  }
  auto node = new_node<T>("conv1d_transpose", Shape{bsz, cout, lo_len}, std::move(out));
  return finish(std::move(node), {x.node(), w.node()},
                [bsz, cin, len, cout, k, lo_len, stride, pad](Node<T>& self) {
                  auto& px = *self.parents[0];
                  auto& pw = *self.parents[1];
                  for (std::int64_t b = 0; b < bsz; ++b) {
                    for (std::int64_t ci = 0; ci < cin; ++ci) {
                      const std::int64_t xoff = (b * cin + ci) * len;
                      for (std::int64_t co = 0; co < cout; ++co) {
                        const T* g = self.grad.data() + (b * cout + co) * lo_len;
                        const std::int64_t woff = (ci * cout + co) * k;
                        for (std::int64_t kk = 0; kk < k; ++kk) {
                          const std::int64_t l0 =
                              std::max<std::int64_t>(0, ceil_div(pad - kk, stride));
                          const std::int64_t l1 = std::min<std::int64_t>(
                              len - 1, floor_div(lo_len - 1 + pad - kk, stride));
                          const T* gs = g + kk - pad;
                          if (px.requires_grad) {
                            const T wv = pw.value[static_cast<std::size_t>(woff + kk)];
                            T* gx = px.grad.data() + xoff;
                            for (std::int64_t l = l0; l <= l1; ++l)
                              gx[l] += wv * gs[l * stride];
                          }
                          if (pw.requires_grad) {
                            const T* xs = px.value.data() + xoff;
                            T acc = T(0);
                            for (std::int64_t l = l0; l <= l1; ++l)
                              acc += xs[l] * gs[l * stride];
                            pw.grad[static_cast<std::size_t>(woff + kk)] += acc;
                          }
                        }
                      }
                    }
                  }
                });
}

template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, int stride_h, int stride_w, int pad_t,
                  int pad_b, int pad_l, int pad_r, int groups) {
  check(x.rank() == 4 && w.rank() == 4, "conv2d", "expected x [B,Cin,H,W], w [Cout,Cin/g,kh,kw]");
  check(stride_h >= 1 && stride_w >= 1 && groups >= 1, "conv2d", "invalid stride/groups");
  const std::int64_t bsz = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t cout = w.dim(0), cig = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  check(cin % groups == 0 && cout % groups == 0, "conv2d", "groups must divide channels");
  check(cig == cin / groups, "conv2d", "weight channel dim " + std::to_string(cig) +
                                           " != Cin/groups = " + std::to_string(cin / groups));
  const std::int64_t ho = (h + pad_t + pad_b - kh) / stride_h + 1;
  const std::int64_t wo = (wd + pad_l + pad_r - kw) / stride_w + 1;
  check(ho >= 1 && wo >= 1, "conv2d", "kernel larger than padded input");
  const std::int64_t cog = cout / groups;

  std::vector<T> out(static_cast<std::size_t>(bsz * cout * ho * wo), T(0));
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  for (std::int64_t b = 0; b < bsz; ++b) {
    for (std::int64_t co = 0; co < cout; ++co) {
      const std::int64_t gi = co / cog;
      T* op = out.data() + (b * cout + co) * ho * wo;
      for (std::int64_t ci = 0; ci < cig; ++ci) {
        const T* xr = xp + (b * cin + gi * cig + ci) * h * wd;
        const T* wr = wp + (co * cig + ci) * kh * kw;
        for (std::int64_t ki = 0; ki < kh; ++ki) {
          const std::int64_t ho0 = std::max<std::int64_t>(0, ceil_div(pad_t - ki, stride_h));
          const std::int64_t ho1 =
              std::min<std::int64_t>(ho - 1, floor_div(h - 1 + pad_t - ki, stride_h));
          for (std::int64_t kj = 0; kj < kw; ++kj) {
            const T wv = wr[ki * kw + kj];
            const std::int64_t wo0 = std::max<std::int64_t>(0, ceil_div(pad_l - kj, stride_w));
            const std::int64_t wo1 =
                std::min<std::int64_t>(wo - 1, floor_div(wd - 1 + pad_l - kj, stride_w));
            for (std::int64_t i = ho0; i <= ho1; ++i) {
              const T* xrow = xr + (i * stride_h + ki - pad_t) * wd + kj - pad_l;
              T* orow = op + i * wo;
              for (std::int64_t j = wo0; j <= wo1; ++j) orow[j] += wv * xrow[j * stride_w];
            }
          }
        }
      }
    }
  }
  auto node = new_node<T>("conv2d", Shape{bsz, cout, ho, wo}, std::move(out));
  auto bw = [bsz, cin, h, wd, cout, cig, cog, kh, kw, ho, wo, stride_h, stride_w, pad_t,
             pad_l](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    for (std::int64_t b = 0; b < bsz; ++b) {
      for (std::int64_t co = 0; co < cout; ++co) {
        const std::int64_t gi = co / cog;
        const T* g = self.grad.data() + (b * cout + co) * ho * wo;
        for (std::int64_t ci = 0; ci < cig; ++ci) {
          const std::int64_t xoff = (b * cin + gi * cig + ci) * h * wd;
          const std::int64_t woff = (co * cig + ci) * kh * kw;
          for (std::int64_t ki = 0; ki < kh; ++ki) {
            const std::int64_t ho0 = std::max<std::int64_t>(0, ceil_div(pad_t - ki, stride_h));
            const std::int64_t ho1 =
                std::min<std::int64_t>(ho - 1, floor_div(h - 1 + pad_t - ki, stride_h));
            for (std::int64_t kj = 0; kj < kw; ++kj) {
              const std::int64_t wo0 = std::max<std::int64_t>(0, ceil_div(pad_l - kj, stride_w));
              const std::int64_t wo1 =
                  std::min<std::int64_t>(wo - 1, floor_div(wd - 1 + pad_l - kj, stride_w));
              if (px.requires_grad) {
                const T wv = pw.value[static_cast<std::size_t>(woff + ki * kw + kj)];
                for (std::int64_t i = ho0; i <= ho1; ++i) {
                  T* gx = px.grad.data() + xoff + (i * stride_h + ki - pad_t) * wd + kj - pad_l;
                  const T* grow = g + i * wo;
                  for (std::int64_t j = wo0; j <= wo1; ++j) gx[j * stride_w] += wv * grow[j];
                }
              }
              if (pw.requires_grad) {
                T acc = T(0);
                for (std::int64_t i = ho0; i <= ho1; ++i) {
                  const T* xrow =
                      px.value.data() + xoff + (i * stride_h + ki - pad_t) * wd + kj - pad_l;
                  const T* grow = g + i * wo;
                  for (std::int64_t j = wo0; j <= wo1; ++j) acc += grow[j] * xrow[j * stride_w];
                }
                pw.grad[static_cast<std::size_t>(woff + ki * kw + kj)] += acc;
              }
            }
          }
        }
      }
    }
  };
  return finish(std::move(node), {x.node(), w.node()}, std::move(bw));
}

template <class T>
TensorT<T> avg_pool_time(const TensorT<T>& x, int pool) {
  check(x.rank() == 4, "avg_pool_time", "expected [B,C,H,W]");
  check(pool >= 1, "avg_pool_time", "pool must be >= 1");
  const std::int64_t wd = x.dim(3);
  check(wd % pool == 0, "avg_pool_time",
        "time length " + std::to_string(wd) + " not divisible by pool " + std::to_string(pool));
  const std::int64_t rows = x.size() / wd;
  const std::int64_t wo = wd / pool;
  std::vector<T> out(static_cast<std::size_t>(rows * wo), T(0));
  const T* xp = x.data().data();
  const T inv = T(1) / static_cast<T>(pool);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = xp + r * wd;
    T* op = out.data() + r * wo;
    for (std::int64_t j = 0; j < wo; ++j) {
      T acc = T(0);
      for (int q = 0; q < pool; ++q) acc += xr[j * pool + q];
      op[j] = acc * inv;
    }
  }
  Shape os = x.shape();
  os[3] = wo;
  auto node = new_node<T>("avg_pool_time", std::move(os), std::move(out));
  return finish(std::move(node), {x.node()}, [rows, wo, wd, pool, inv](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* g = self.grad.data() + r * wo;
      T* gx = px.grad.data() + r * wd;
      for (std::int64_t j = 0; j < wo; ++j) {
        const T gv = g[j] * inv;
        for (int q = 0; q < pool; ++q) gx[j * pool + q] += gv;
      }
    }
  });
}

// ---- normalization --------------------------------------------------------

namespace {
// Collapses [B,C,...] to (B, C, M) where M is the product of trailing dims.
template <class T>
void bcm_dims(const TensorT<T>& x, const char* op, std::int64_t& b, std::int64_t& c,
              std::int64_t& m) {
  check(x.rank() >= 2 && x.rank() <= 4, op, "expected rank 2..4 input, got " +
                                                shape_str(x.shape()));
  b = x.dim(0);
  c = x.dim(1);
  m = 1;
  for (int i = 2; i < x.rank(); ++i) m *= x.dim(i);
}
}  // namespace

template <class T>
TensorT<T> batch_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      BatchNormState<T>& state, bool training, T momentum, T eps) {
  std::int64_t b, c, m;
  bcm_dims(x, "batch_norm", b, c, m);
  check(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
        "batch_norm", "gamma/beta must be [C]");
  check(static_cast<std::int64_t>(state.running_mean.size()) == c, "batch_norm",
        "state has " + std::to_string(state.running_mean.size()) + " channels, input has " +
            std::to_string(c));
  const std::int64_t n = b * m;
  check(!training || n > 1, "batch_norm", "training mode needs more than one sample per channel");

  std::vector<T> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  if (training) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double mu = 0.0;
      for (std::int64_t bi = 0; bi < b; ++bi) {
        const T* xr = x.data().data() + (bi * c + ch) * m;
        for (std::int64_t j = 0; j < m; ++j) mu += xr[j];
      }
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (std::int64_t bi = 0; bi < b; ++bi) {
        const T* xr = x.data().data() + (bi * c + ch) * m;
        for (std::int64_t j = 0; j < m; ++j) {
          const double d = xr[j] - mu;
          var += d * d;
        }
      }
      var /= static_cast<double>(n);
      mean[static_cast<std::size_t>(ch)] = static_cast<T>(mu);
      inv_std[static_cast<std::size_t>(ch)] =
          static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      state.running_mean[static_cast<std::size_t>(ch)] =
          (T(1) - momentum) * state.running_mean[static_cast<std::size_t>(ch)] +
          momentum * static_cast<T>(mu);
      state.running_var[static_cast<std::size_t>(ch)] =
          (T(1) - momentum) * state.running_var[static_cast<std::size_t>(ch)] +
          momentum * static_cast<T>(var);
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean[static_cast<std::size_t>(ch)] = state.running_mean[static_cast<std::size_t>(ch)];
      inv_std[static_cast<std::size_t>(ch)] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(state.running_var[static_cast<std::size_t>(ch)]) +
                          static_cast<double>(eps)));
    }
  }

  std::vector<T> xhat(x.data().size());
  std::vector<T> out(x.data().size());
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* xr = x.data().data() + (bi * c + ch) * m;
      T* hr = xhat.data() + (bi * c + ch) * m;
      T* yr = out.data() + (bi * c + ch) * m;
      const T mu = mean[static_cast<std::size_t>(ch)];
      const T is = inv_std[static_cast<std::size_t>(ch)];
      const T gm = gamma.data()[static_cast<std::size_t>(ch)];
      const T bt = beta.data()[static_cast<std::size_t>(ch)];
      for (std::int64_t j = 0; j < m; ++j) {
        hr[j] = (xr[j] - mu) * is;
        yr[j] = gm * hr[j] + bt;
      }
    }
  }
  auto node = new_node<T>("batch_norm", x.shape(), std::move(out));
  auto bw = [b, c, m, n, training, xhat = std::move(xhat),
             inv_std = std::move(inv_std)](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double sum_g = 0.0, sum_gh = 0.0;
      for (std::int64_t bi = 0; bi < b; ++bi) {
        const std::int64_t off = (bi * c + ch) * m;
        for (std::int64_t j = 0; j < m; ++j) {
          const double gv = self.grad[static_cast<std::size_t>(off + j)];
          sum_g += gv;
          sum_gh += gv * xhat[static_cast<std::size_t>(off + j)];
        }
      }
      if (pg.requires_grad) pg.grad[static_cast<std::size_t>(ch)] += static_cast<T>(sum_gh);
      if (pb.requires_grad) pb.grad[static_cast<std::size_t>(ch)] += static_cast<T>(sum_g);
      if (px.requires_grad) {
        const T gm = pg.value[static_cast<std::size_t>(ch)];
        const T is = inv_std[static_cast<std::size_t>(ch)];
        if (training) {
          const T mg = static_cast<T>(sum_g / static_cast<double>(n));
          const T mgh = static_cast<T>(sum_gh / static_cast<double>(n));
          for (std::int64_t bi = 0; bi < b; ++bi) {
            const std::int64_t off = (bi * c + ch) * m;
            for (std::int64_t j = 0; j < m; ++j) {
              const std::size_t idx = static_cast<std::size_t>(off + j);
              px.grad[idx] += gm * is * (self.grad[idx] - mg - xhat[idx] * mgh);
            }
          }
        } else {
          for (std::int64_t bi = 0; bi < b; ++bi) {
            const std::int64_t off = (bi * c + ch) * m;
            for (std::int64_t j = 0; j < m; ++j) {
              const std::size_t idx = static_cast<std::size_t>(off + j);
              px.grad[idx] += gm * is * self.grad[idx];
            }
          }
        }
      }
    }
  };
  return finish(std::move(node), {x.node(), gamma.node(), beta.node()}, std::move(bw));
}

template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps) {
  check(x.rank() >= 1, "layer_norm", "input must have at least one axis");
  const std::int64_t e = x.dim(x.rank() - 1);
  check(gamma.rank() == 1 && gamma.dim(0) == e && beta.rank() == 1 && beta.dim(0) == e,
        "layer_norm", "gamma/beta must be [last_dim]");
  const std::int64_t rows = x.size() / e;

  std::vector<T> xhat(x.data().size());
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  std::vector<T> out(x.data().size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * e;
    double mu = 0.0;
    for (std::int64_t j = 0; j < e; ++j) mu += xr[j];
    mu /= static_cast<double>(e);
    double var = 0.0;
    for (std::int64_t j = 0; j < e; ++j) {
      const double d = xr[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(e);
    const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    inv_std[static_cast<std::size_t>(r)] = is;
    T* hr = xhat.data() + r * e;
    T* yr = out.data() + r * e;
    for (std::int64_t j = 0; j < e; ++j) {
      hr[j] = static_cast<T>((xr[j] - mu)) * is;
      yr[j] = gamma.data()[static_cast<std::size_t>(j)] * hr[j] +
              beta.data()[static_cast<std::size_t>(j)];
    }
  }
  auto node = new_node<T>("layer_norm", x.shape(), std::move(out));
  auto bw = [rows, e, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* g = self.grad.data() + r * e;
      const T* h = xhat.data() + r * e;
      double sum_gg = 0.0, sum_ggh = 0.0;
      for (std::int64_t j = 0; j < e; ++j) {
        const double gg = g[j] * pg.value[static_cast<std::size_t>(j)];
        sum_gg += gg;
        sum_ggh += gg * h[j];
        if (pg.requires_grad) pg.grad[static_cast<std::size_t>(j)] += g[j] * h[j];
        if (pb.requires_grad) pb.grad[static_cast<std::size_t>(j)] += g[j];
      }
      if (px.requires_grad) {
        const T is = inv_std[static_cast<std::size_t>(r)];
        const T mg = static_cast<T>(sum_gg / static_cast<double>(e));
        const T mgh = static_cast<T>(sum_ggh / static_cast<double>(e));
        T* gx = px.grad.data() + r * e;
        for (std::int64_t j = 0; j < e; ++j)
          gx[j] += is * (g[j] * pg.value[static_cast<std::size_t>(j)] - mg - h[j] * mgh);
      }
    }
  };
  return finish(std::move(node), {x.node(), gamma.node(), beta.node()}, std::move(bw));
}

// ---- activations ----------------------------------------------------------

template <class T>
TensorT<T> softmax(const TensorT<T>& x) {
  check(x.rank() >= 1, "softmax", "input must have at least one axis");
  const std::int64_t c = x.dim(x.rank() - 1);
  const std::int64_t rows = x.size() / c;
  std::vector<T> out(x.data().size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * c;
    T* yr = out.data() + r * c;
    T mx = xr[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      const double ev = std::exp(static_cast<double>(xr[j] - mx));
      yr[j] = static_cast<T>(ev);
      denom += ev;
    }
    const T inv = static_cast<T>(1.0 / denom);
    for (std::int64_t j = 0; j < c; ++j) yr[j] *= inv;
  }
  auto node = new_node<T>("softmax", x.shape(), std::move(out));
  return finish(std::move(node), {x.node()}, [rows, c](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * c;
      const T* g = self.grad.data() + r * c;
      double dot = 0.0;
      for (std::int64_t j = 0; j < c; ++j) dot += static_cast<double>(g[j]) * y[j];
      T* gx = px.grad.data() + r * c;
      for (std::int64_t j = 0; j < c; ++j)
        gx[j] += y[j] * (g[j] - static_cast<T>(dot));
    }
  });
}

template <class T>
TensorT<T> elu(const TensorT<T>& x) {
  std::vector<T> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out[i] = v > T(0) ? v : static_cast<T>(std::expm1(static_cast<double>(v)));
  }
  auto node = new_node<T>("elu", x.shape(), std::move(out));
  return finish(std::move(node), {x.node()}, [](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = px.value[i];
      px.grad[i] += self.grad[i] * (v > T(0) ? T(1) : self.value[i] + T(1));
    }
  });
}

template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<T> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  auto node = new_node<T>("gelu", x.shape(), std::move(out));
  return finish(std::move(node), {x.node()}, [](Node<T>& self) {
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = px.value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      px.grad[i] += self.grad[i] * static_cast<T>(cdf + v * pdf);
    }
  });
}

template <class T>
TensorT<T> dropout(const TensorT<T>& x, T rate, bool training, Rng& rng) {
  check(rate >= T(0) && rate < T(1), "dropout", "rate must be in [0,1)");
  if (!training || rate == T(0)) return x;  // identity in eval mode
  const T keep_scale = T(1) / (T(1) - rate);
  std::vector<T> mask(x.data().size());
  std::vector<T> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() >= static_cast<double>(rate) ? keep_scale : T(0);
    out[i] = x.data()[i] * mask[i];
  }
  auto node = new_node<T>("dropout", x.shape(), std::move(out));
  return finish(std::move(node), {x.node()}, [mask = std::move(mask)](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * mask[i];
  });
}

// ---- lookup ---------------------------------------------------------------

template <class T>
TensorT<T> embedding(const TensorT<T>& table, const std::vector<std::int32_t>& idx,
                     const Shape& idx_shape) {
  check(table.rank() == 2, "embedding", "table must be [K,E]");
  check(numel(idx_shape) == static_cast<std::int64_t>(idx.size()), "embedding",
        "index count does not match index shape");
  const std::int64_t k = table.dim(0), e = table.dim(1);
  for (std::int32_t i : idx)
    if (i < 0 || i >= k)
      throw ShapeError("embedding: index " + std::to_string(i) + " out of range [0," +
                       std::to_string(k) + ")");
  std::vector<T> out(idx.size() * static_cast<std::size_t>(e));
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(table.data().data() + static_cast<std::int64_t>(idx[r]) * e, e,
                out.data() + static_cast<std::int64_t>(r) * e);
  Shape os = idx_shape;
  os.push_back(e);
  auto node = new_node<T>("embedding", std::move(os), std::move(out));
  return finish(std::move(node), {table.node()}, [idx, e](Node<T>& self) {
    auto& pt = *self.parents[0];
    for (std::size_t r = 0; r < idx.size(); ++r) {
      T* gt = pt.grad.data() + static_cast<std::int64_t>(idx[r]) * e;
      const T* g = self.grad.data() + static_cast<std::int64_t>(r) * e;
      for (std::int64_t j = 0; j < e; ++j) gt[j] += g[j];
    }
  });
}

// ---- shape ----------------------------------------------------------------

template <class T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
  check(numel(shape) == x.size(), "reshape",
        "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  auto node = new_node<T>("reshape", std::move(shape), std::vector<T>(x.data()));
  return finish(std::move(node), {x.node()}, [](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
  });
}

template <class T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& axes) {
  const int r = x.rank();
  check(static_cast<int>(axes.size()) == r, "permute", "axes count must equal rank");
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int a : axes) {
    check(a >= 0 && a < r && !seen[static_cast<std::size_t>(a)], "permute", "invalid axes");
    seen[static_cast<std::size_t>(a)] = true;
  }
  Shape os(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) os[static_cast<std::size_t>(i)] = x.dim(axes[static_cast<std::size_t>(i)]);

  std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    in_strides[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(i + 1)] * x.dim(i + 1);
  std::vector<std::int64_t> src_stride(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i)
    src_stride[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];

  const std::int64_t n = x.size();
  std::vector<T> out(static_cast<std::size_t>(n));
  std::vector<std::int64_t> coord(static_cast<std::size_t>(r), 0);
  std::vector<std::int64_t> perm_of(static_cast<std::size_t>(n));
  for (std::int64_t o = 0; o < n; ++o) {
    std::int64_t src = 0;
    for (int i = 0; i < r; ++i) src += coord[static_cast<std::size_t>(i)] * src_stride[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(o)] = x.data()[static_cast<std::size_t>(src)];
    perm_of[static_cast<std::size_t>(o)] = src;
    for (int i = r - 1; i >= 0; --i) {
      if (++coord[static_cast<std::size_t>(i)] < os[static_cast<std::size_t>(i)]) break;
      coord[static_cast<std::size_t>(i)] = 0;
    }
  }
  auto node = new_node<T>("permute", std::move(os), std::move(out));
  return finish(std::move(node), {x.node()}, [perm_of = std::move(perm_of)](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t o = 0; o < self.grad.size(); ++o)
      px.grad[static_cast<std::size_t>(perm_of[o])] += self.grad[o];
  });
}

// ---- reductions -----------------------------------------------------------

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  auto node = new_node<T>("sum", Shape{}, std::vector<T>{static_cast<T>(acc)});
  return finish(std::move(node), {x.node()}, [](Node<T>& self) {
    auto& px = *self.parents[0];
    const T g = self.grad[0];
    for (auto& gv : px.grad) gv += g;
  });
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& x) {
  check(x.size() > 0, "mean", "empty tensor");
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  const T inv = T(1) / static_cast<T>(x.size());
  auto node = new_node<T>("mean", Shape{},
                          std::vector<T>{static_cast<T>(acc / static_cast<double>(x.size()))});
  return finish(std::move(node), {x.node()}, [inv](Node<T>& self) {
    auto& px = *self.parents[0];
    const T g = self.grad[0] * inv;
    for (auto& gv : px.grad) gv += g;
  });
}

namespace {
template <class T>
void axis_dims(const TensorT<T>& x, int axis, const char* op, std::int64_t& outer,
               std::int64_t& mid, std::int64_t& inner) {
  check(axis >= 0 && axis < x.rank(), op, "axis out of range");
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  mid = x.dim(axis);
  inner = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
}
}  // namespace

template <class T>
TensorT<T> sum_axis(const TensorT<T>& x, int axis) {
  std::int64_t outer, mid, inner;
  axis_dims(x, axis, "sum_axis", outer, mid, inner);
  std::vector<T> out(static_cast<std::size_t>(outer * inner), T(0));
  const T* xp = x.data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t k = 0; k < mid; ++k) {
      const T* xr = xp + (o * mid + k) * inner;
      T* orow = out.data() + o * inner;
      for (std::int64_t j = 0; j < inner; ++j) orow[j] += xr[j];
    }
  Shape os;
  for (int i = 0; i < x.rank(); ++i)
    if (i != axis) os.push_back(x.dim(i));
  auto node = new_node<T>("sum_axis", std::move(os), std::move(out));
  return finish(std::move(node), {x.node()}, [outer, mid, inner](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t k = 0; k < mid; ++k) {
        T* gx = px.grad.data() + (o * mid + k) * inner;
        const T* g = self.grad.data() + o * inner;
        for (std::int64_t j = 0; j < inner; ++j) gx[j] += g[j];
      }
  });
}

template <class T>
TensorT<T> mean_axis(const TensorT<T>& x, int axis) {
  std::int64_t outer, mid, inner;
  axis_dims(x, axis, "mean_axis", outer, mid, inner);
  return scale(sum_axis(x, axis), T(1) / static_cast<T>(mid));
}

// ---- autodiff control -----------------------------------------------------

template <class T>
TensorT<T> stop_gradient(const TensorT<T>& x) {
  auto node = new_node<T>("stop_gradient", x.shape(), std::vector<T>(x.data()));
  return TensorT<T>(std::move(node));  // no parents: gradient flow ends here
}

// ---- loss -----------------------------------------------------------------

template <class T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<std::int32_t>& labels) {
  check(logits.rank() == 2, "cross_entropy", "logits must be [N,C]");
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  check(static_cast<std::int64_t>(labels.size()) == n, "cross_entropy",
        "label count " + std::to_string(labels.size()) + " != batch " + std::to_string(n));
  for (std::int32_t y : labels)
    if (y < 0 || y >= c)
      throw ShapeError("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                       std::to_string(c) + ")");

  std::vector<T> probs(logits.data().size());
  double loss = 0.0;
  for (std::int64_t r = 0; r < n; ++r) {
    const T* zr = logits.data().data() + r * c;
    T mx = zr[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, zr[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(zr[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(denom);
    loss += lse - static_cast<double>(zr[labels[static_cast<std::size_t>(r)]]);
    T* pr = probs.data() + r * c;
    for (std::int64_t j = 0; j < c; ++j)
      pr[j] = static_cast<T>(std::exp(static_cast<double>(zr[j]) - lse));
  }
  loss /= static_cast<double>(n);
  auto node = new_node<T>("cross_entropy", Shape{}, std::vector<T>{static_cast<T>(loss)});
  return finish(std::move(node), {logits.node()},
                [n, c, labels, probs = std::move(probs)](Node<T>& self) {
                  auto& pl = *self.parents[0];
                  const T g = self.grad[0] / static_cast<T>(n);
                  for (std::int64_t r = 0; r < n; ++r) {
                    T* gx = pl.grad.data() + r * c;
                    const T* pr = probs.data() + r * c;
                    for (std::int64_t j = 0; j < c; ++j) gx[j] += g * pr[j];
                    gx[labels[static_cast<std::size_t>(r)]] -= g;
                  }
                });
}

template <class T>
TensorT<T> mse(const TensorT<T>& a, const TensorT<T>& b) {
  check(a.shape() == b.shape(), "mse",
        "shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto d = sub(a, b);
  return mean_all(mul(d, d));
}

// ---- driver ---------------------------------------------------------------

template <class T>
void backward(const TensorT<T>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ShapeError("backward: loss must be a defined scalar");
  Node<T>* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS; each node appears once in `order`.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) n->grad.assign(n->value.size(), T(0));
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward) n->backward(*n);
  }
}

template <class T>
bool all_finite(const TensorT<T>& x) {
  for (T v : x.data())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

// ---- explicit instantiation -----------------------------------------------

#define NV_INSTANTIATE(T)                                                                        \
  template class TensorT<T>;                                                                     \
  template TensorT<T> add(const TensorT<T>&, const TensorT<T>&);                                 \
  template TensorT<T> sub(const TensorT<T>&, const TensorT<T>&);                                 \
  template TensorT<T> mul(const TensorT<T>&, const TensorT<T>&);                                 \
  template TensorT<T> scale(const TensorT<T>&, T);                                               \
  template TensorT<T> neg(const TensorT<T>&);                                                    \
  template TensorT<T> matmul(const TensorT<T>&, const TensorT<T>&);                              \
  template TensorT<T> bmm(const TensorT<T>&, const TensorT<T>&, bool);                           \
  template TensorT<T> linear(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);           \
  template TensorT<T> conv1d(const TensorT<T>&, const TensorT<T>&, int, int, int);               \
  template TensorT<T> conv1d_transpose(const TensorT<T>&, const TensorT<T>&, int, int);          \
  template TensorT<T> conv2d(const TensorT<T>&, const TensorT<T>&, int, int, int, int, int, int, \
                             int);                                                               \
  template TensorT<T> avg_pool_time(const TensorT<T>&, int);                                     \
  template TensorT<T> batch_norm(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,        \
                                 BatchNormState<T>&, bool, T, T);                                \
  template TensorT<T> layer_norm(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, T);    \
  template TensorT<T> softmax(const TensorT<T>&);                                                \
  template TensorT<T> elu(const TensorT<T>&);                                                    \
  template TensorT<T> gelu(const TensorT<T>&);                                                   \
  template TensorT<T> dropout(const TensorT<T>&, T, bool, Rng&);                                 \
  template TensorT<T> embedding(const TensorT<T>&, const std::vector<std::int32_t>&,             \
                                const Shape&);                                                   \
  template TensorT<T> reshape(const TensorT<T>&, Shape);                                         \
  template TensorT<T> permute(const TensorT<T>&, const std::vector<int>&);                       \
  template TensorT<T> sum_all(const TensorT<T>&);                                                \
  template TensorT<T> mean_all(const TensorT<T>&);                                               \
  template TensorT<T> sum_axis(const TensorT<T>&, int);                                          \
  template TensorT<T> mean_axis(const TensorT<T>&, int);                                         \
  template TensorT<T> stop_gradient(const TensorT<T>&);                                          \
  template TensorT<T> cross_entropy(const TensorT<T>&, const std::vector<std::int32_t>&);        \
  template TensorT<T> mse(const TensorT<T>&, const TensorT<T>&);                                 \
  template void backward(const TensorT<T>&);                                                     \
  template bool all_finite(const TensorT<T>&);

NV_INSTANTIATE(float)
NV_INSTANTIATE(double)

#undef NV_INSTANTIATE

}  // namespace nv
