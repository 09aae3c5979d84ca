// Finite-difference verification of every differentiable primitive.
// Tolerance 1e-4 (64-bit, h = 1e-5), at least 10 random shapes per op.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "neurovar/nn.hpp"
#include "neurovar/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace nv;
using nv::test::gradcheck;
using nv::test::make_probe;
using nv::test::probe_loss;

namespace {

constexpr double kTol = 1e-4;
constexpr int kTrials = 10;

DTensor rand_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  return DTensor::randn(std::move(shape), rng, stddev);
}

}  // namespace

TEST_CASE("add with suffix broadcast") {
  Rng rng(101);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t b = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    const std::int64_t r = 2 + static_cast<std::int64_t>(rng.uniform_index(4));
    const std::int64_t c = 2 + static_cast<std::int64_t>(rng.uniform_index(4));
    auto x = rand_tensor({b, r, c}, rng);
    auto y = (t % 2 == 0) ? rand_tensor({b, r, c}, rng) : rand_tensor({c}, rng);
    auto probe = make_probe({b, r, c}, rng);
    auto res = gradcheck({x, y}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(add(ls[0], ls[1]), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("mul elementwise") {
  Rng rng(102);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t n = 2 + static_cast<std::int64_t>(rng.uniform_index(6));
    const std::int64_t m = 1 + static_cast<std::int64_t>(rng.uniform_index(5));
    auto x = rand_tensor({n, m}, rng);
    auto y = rand_tensor({n, m}, rng);
    auto probe = make_probe({n, m}, rng);
    auto res = gradcheck({x, y}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(mul(ls[0], ls[1]), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("matmul") {
  Rng rng(103);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t m = 1 + static_cast<std::int64_t>(rng.uniform_index(4));
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng.uniform_index(4));
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng.uniform_index(4));
    auto a = rand_tensor({m, k}, rng);
    auto b = rand_tensor({k, n}, rng);
    auto probe = make_probe({m, n}, rng);
    auto res = gradcheck({a, b}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(matmul(ls[0], ls[1]), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("bmm both orientations") {
  Rng rng(104);
  for (int t = 0; t < kTrials; ++t) {
    const bool tb = t % 2 == 0;
    const std::int64_t nb = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    const std::int64_t m = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    const std::int64_t p = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    auto a = rand_tensor({nb, m, k}, rng);
    auto b = tb ? rand_tensor({nb, p, k}, rng) : rand_tensor({nb, k, p}, rng);
    auto probe = make_probe({nb, m, p}, rng);
    auto res = gradcheck({a, b}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(bmm(ls[0], ls[1], tb), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("linear with bias") {
  Rng rng(105);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t b = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    const std::int64_t l = 1 + static_cast<std::int64_t>(rng.uniform_index(4));
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng.uniform_index(4));
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng.uniform_index(4));
    auto x = rand_tensor({b, l, k}, rng);
    auto w = rand_tensor({k, n}, rng);
    auto bias = rand_tensor({n}, rng);
    auto probe = make_probe({b, l, n}, rng);
    auto res = gradcheck({x, w, bias}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(linear(ls[0], ls[1], ls[2]), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("conv1d strided and padded") {
  Rng rng(106);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t b = 1 + static_cast<std::int64_t>(rng.uniform_index(2));
    const std::int64_t ci = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    const std::int64_t co = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    const std::int64_t len = 5 + static_cast<std::int64_t>(rng.uniform_index(6));
    const int k = 1 + static_cast<int>(rng.uniform_index(4));
    const int stride = 1 + static_cast<int>(rng.uniform_index(2));
    const int pl = static_cast<int>(rng.uniform_index(3));
    const int pr = static_cast<int>(rng.uniform_index(3));
    auto x = rand_tensor({b, ci, len}, rng);
    auto w = rand_tensor({co, ci, k}, rng);
    const std::int64_t lo = (len + pl + pr - k) / stride + 1;
    auto probe = make_probe({b, co, lo}, rng);
    auto res = gradcheck({x, w}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(conv1d(ls[0], ls[1], stride, pl, pr), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("conv1d_transpose") {
  Rng rng(107);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t b = 1 + static_cast<std::int64_t>(rng.uniform_index(2));
    const std::int64_t ci = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    const std::int64_t co = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    const std::int64_t len = 3 + static_cast<std::int64_t>(rng.uniform_index(5));
    const int stride = 1 + static_cast<int>(rng.uniform_index(2));
    const int pad = static_cast<int>(rng.uniform_index(2));
    const int k = stride + 2 * pad;  // output length = len * stride
    auto x = rand_tensor({b, ci, len}, rng);
    auto w = rand_tensor({ci, co, k}, rng);
    auto probe = make_probe({b, co, len * stride}, rng);
    auto res = gradcheck({x, w}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(conv1d_transpose(ls[0], ls[1], stride, pad), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("conv2d dense, depthwise, pointwise") {
  Rng rng(108);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t b = 1 + static_cast<std::int64_t>(rng.uniform_index(2));
    const std::int64_t h = 2 + static_cast<std::int64_t>(rng.uniform_index(3));
    const std::int64_t wd = 4 + static_cast<std::int64_t>(rng.uniform_index(4));
    const int mode = t % 3;
    std::int64_t ci, co, groups;
    int kh, kw;
    if (mode == 0) {  // dense
      ci = 2;
      co = 3;
      groups = 1;
      kh = 2;
      kw = 3;
    } else if (mode == 1) {  // depthwise with depth multiplier 2
      ci = 2;
      co = 4;
      groups = ci;
      kh = 1;
      kw = 3;
    } else {  // pointwise
      ci = 3;
      co = 2;
      groups = 1;
      kh = 1;
      kw = 1;
    }
    const int sh = 1, sw = 1 + static_cast<int>(rng.uniform_index(2));
    const int pt = 0, pb = 0;
    const int pl = static_cast<int>(rng.uniform_index(2));
    const int pr = static_cast<int>(rng.uniform_index(2));
    auto x = rand_tensor({b, ci, h, wd}, rng);
    auto w = rand_tensor({co, ci / groups, kh, kw}, rng);
    const std::int64_t ho = (h + pt + pb - kh) / sh + 1;
    const std::int64_t wo = (wd + pl + pr - kw) / sw + 1;
    auto probe = make_probe({b, co, ho, wo}, rng);
    auto res = gradcheck({x, w}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(
          conv2d(ls[0], ls[1], sh, sw, pt, pb, pl, pr, static_cast<int>(groups)), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("average pooling") {
  Rng rng(109);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t b = 1 + static_cast<std::int64_t>(rng.uniform_index(2));
    const std::int64_t c = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    const int pool = 1 + static_cast<int>(rng.uniform_index(3));
    const std::int64_t wd = pool * (2 + static_cast<std::int64_t>(rng.uniform_index(3)));
    auto x = rand_tensor({b, c, 1, wd}, rng);
    auto probe = make_probe({b, c, 1, wd / pool}, rng);
    auto res = gradcheck({x}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(avg_pool_time(ls[0], pool), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("batch normalization, train and eval modes") {
  Rng rng(110);
  for (int t = 0; t < kTrials; ++t) {
    const bool training = t % 2 == 0;
    const std::int64_t b = 2 + static_cast<std::int64_t>(rng.uniform_index(2));
    const std::int64_t c = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    const std::int64_t m = 2 + static_cast<std::int64_t>(rng.uniform_index(4));
    auto x = rand_tensor({b, c, m}, rng);
    auto gamma = rand_tensor({c}, rng, 0.5);
    auto beta = rand_tensor({c}, rng, 0.5);
    BatchNormState<double> state(c);
    for (auto& v : state.running_mean) v = rng.normal() * 0.3;
    for (auto& v : state.running_var) v = 0.5 + rng.uniform();
    auto probe = make_probe({b, c, m}, rng);
    auto res = gradcheck({x, gamma, beta}, [&](const std::vector<DTensor>& ls) {
      BatchNormState<double> st = state;  // keep side effects out of the check
      return probe_loss(batch_norm(ls[0], ls[1], ls[2], st, training), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("layer normalization") {
  Rng rng(111);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t b = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    const std::int64_t e = 2 + static_cast<std::int64_t>(rng.uniform_index(6));
    auto x = rand_tensor({b, e}, rng);
    auto gamma = rand_tensor({e}, rng, 0.5);
    auto beta = rand_tensor({e}, rng, 0.5);
    auto probe = make_probe({b, e}, rng);
    auto res = gradcheck({x, gamma, beta}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(layer_norm(ls[0], ls[1], ls[2]), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("softmax") {
  Rng rng(112);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t r = 1 + static_cast<std::int64_t>(rng.uniform_index(4));
    const std::int64_t c = 2 + static_cast<std::int64_t>(rng.uniform_index(5));
    auto x = rand_tensor({r, c}, rng, 2.0);
    auto probe = make_probe({r, c}, rng);
    auto res = gradcheck({x}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(softmax(ls[0]), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("elu and gelu") {
  Rng rng(113);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t n = 3 + static_cast<std::int64_t>(rng.uniform_index(8));
    auto x = rand_tensor({n}, rng, 2.0);
    auto probe = make_probe({n}, rng);
    auto res_elu = gradcheck({x}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(elu(ls[0]), probe);
    });
    CAPTURE(res_elu.worst);
    CHECK(res_elu.ok(kTol));
    auto res_gelu = gradcheck({x}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(gelu(ls[0]), probe);
    });
    CAPTURE(res_gelu.worst);
    CHECK(res_gelu.ok(kTol));
  }
}

TEST_CASE("dropout, train mode with fixed mask and eval identity") {
  Rng rng(114);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t n = 4 + static_cast<std::int64_t>(rng.uniform_index(8));
    auto x = rand_tensor({n}, rng);
    auto probe = make_probe({n}, rng);
    const std::uint64_t mask_seed = rng.next_u64();
    auto res = gradcheck({x}, [&](const std::vector<DTensor>& ls) {
      Rng mask_rng(mask_seed);  // same mask on every evaluation
      return probe_loss(dropout(ls[0], 0.4, true, mask_rng), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));

    Rng unused(1);
    auto y = dropout(x, 0.4, false, unused);
    CHECK(y.data() == x.data());
  }
}

TEST_CASE("embedding lookup") {
  Rng rng(115);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t k = 3 + static_cast<std::int64_t>(rng.uniform_index(5));
    const std::int64_t e = 2 + static_cast<std::int64_t>(rng.uniform_index(4));
    const std::int64_t n = 2 + static_cast<std::int64_t>(rng.uniform_index(5));
    auto table = rand_tensor({k, e}, rng);
    std::vector<std::int32_t> idx(static_cast<std::size_t>(n));
    for (auto& i : idx) i = static_cast<std::int32_t>(rng.uniform_index(static_cast<std::uint64_t>(k)));
    auto probe = make_probe({n, e}, rng);
    auto res = gradcheck({table}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(embedding(ls[0], idx, {n}), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("reshape and permute") {
  Rng rng(116);
  for (int t = 0; t < kTrials; ++t) {
    auto x = rand_tensor({2, 3, 4}, rng);
    auto probe = make_probe({4, 2, 3}, rng);
    auto res = gradcheck({x}, [&](const std::vector<DTensor>& ls) {
      auto y = permute(ls[0], {2, 0, 1});
      y = reshape(y, {4, 6});
      return probe_loss(reshape(y, {4, 2, 3}), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("reductions: sum, mean, per-axis") {
  Rng rng(117);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t a = 2 + static_cast<std::int64_t>(rng.uniform_index(3));
    const std::int64_t b = 2 + static_cast<std::int64_t>(rng.uniform_index(3));
    const std::int64_t c = 2 + static_cast<std::int64_t>(rng.uniform_index(3));
    auto x = rand_tensor({a, b, c}, rng);
    const int axis = t % 3;
    Shape oshape;
    for (int i = 0; i < 3; ++i)
      if (i != axis) oshape.push_back(x.shape()[static_cast<std::size_t>(i)]);
    auto probe = make_probe(oshape, rng);
    auto res = gradcheck({x}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(mean_axis(ls[0], axis), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
    auto res2 = gradcheck({x}, [&](const std::vector<DTensor>& ls) {
      return probe_loss(sum_axis(ls[0], axis), probe);
    });
    CHECK(res2.ok(kTol));
    auto res3 =
        gradcheck({x}, [&](const std::vector<DTensor>& ls) { return mean_all(ls[0]); });
    CHECK(res3.ok(kTol));
    auto res4 = gradcheck({x}, [&](const std::vector<DTensor>& ls) { return sum_all(ls[0]); });
    CHECK(res4.ok(kTol));
  }
}

TEST_CASE("cross entropy") {
  Rng rng(118);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng.uniform_index(5));
    const std::int64_t c = 2 + static_cast<std::int64_t>(rng.uniform_index(5));
    auto logits = rand_tensor({n, c}, rng, 2.0);
    std::vector<std::int32_t> labels(static_cast<std::size_t>(n));
    for (auto& y : labels) y = static_cast<std::int32_t>(rng.uniform_index(static_cast<std::uint64_t>(c)));
    auto res = gradcheck({logits}, [&](const std::vector<DTensor>& ls) {
      return cross_entropy(ls[0], labels);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("multi-head attention composite") {
  Rng rng(119);
  for (int t = 0; t < kTrials; ++t) {
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng.uniform_index(2));
    const std::int64_t l = 2 + static_cast<std::int64_t>(rng.uniform_index(3));
    const int heads = (t % 2 == 0) ? 2 : 1;
    const std::int64_t e = 2 * heads;
    auto x = rand_tensor({n, l, e}, rng);
    Rng prng(rng.next_u64());
    auto params = AttentionParams<double>::init(e, prng);
    auto probe = make_probe({n, l, e}, rng);
    auto res = gradcheck(
        {x, params.wq, params.bq, params.wk, params.bk, params.wv, params.bv, params.wo,
         params.bo},
        [&](const std::vector<DTensor>& ls) {
          AttentionParams<double> p;
          p.wq = ls[1];
          p.bq = ls[2];
          p.wk = ls[3];
          p.bk = ls[4];
          p.wv = ls[5];
          p.bv = ls[6];
          p.wo = ls[7];
          p.bo = ls[8];
          return probe_loss(multi_head_attention(ls[0], p, heads), probe);
        });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}

TEST_CASE("stop_gradient blocks the gradient path exactly") {
  Rng rng(120);
  auto x = rand_tensor({5}, rng);
  x.set_requires_grad(true);

  // loss = sum(sg(x) * x): only the second factor carries gradient,
  // so d loss / dx must equal the values of x.
  x.zero_grad();
  auto loss = sum_all(mul(stop_gradient(x), x));
  backward(loss);
  for (std::size_t i = 0; i < x.data().size(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));

  // loss = sum(sg(x) * const): no path at all.
  x.zero_grad();
  auto c = DTensor::full({5}, 2.0);
  auto loss2 = sum_all(mul(stop_gradient(x), c));
  backward(loss2);
  // graph has no differentiable leaves; x must keep a zero gradient
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("straight-through wiring: z + sg(q - z) copies gradients to z") {
  Rng rng(121);
  for (int t = 0; t < kTrials; ++t) {
    auto z = rand_tensor({3, 4}, rng);
    auto q = rand_tensor({3, 4}, rng);  // stands in for a nearest-codeword lookup
    auto probe = make_probe({3, 4}, rng);
    z.set_requires_grad(true);
    z.zero_grad();

    auto st = add(z, stop_gradient(sub(q, z)));
    // forward value is exactly q
    for (std::size_t i = 0; i < st.data().size(); ++i)
      CHECK(st.data()[i] == doctest::Approx(q.data()[i]).epsilon(1e-12));

    // the estimator behaves as identity for the gradient: with
    // loss = sum(probe * st^2), d loss / dz = 2 * q * probe
    auto loss = probe_loss(mul(st, st), probe);
    backward(loss);
    for (std::size_t i = 0; i < z.data().size(); ++i) {
      const double expect = 2.0 * q.data()[i] * probe.data()[i];
      CHECK(z.grad()[i] == doctest::Approx(expect).epsilon(1e-9));
    }
  }
}

TEST_CASE("straight-through decoder path matches finite differences when the "
          "quantizer is bypassed") {
  // With q := z the estimator expression collapses to the identity and the
  // whole encoder->decoder path is smooth, so finite differences apply and
  // validate the add/stop_gradient assembly end to end.
  Rng rng(122);
  for (int t = 0; t < kTrials; ++t) {
    auto z = rand_tensor({2, 3}, rng);
    auto w = rand_tensor({3, 3}, rng);
    auto probe = make_probe({2, 3}, rng);
    auto res = gradcheck({z, w}, [&](const std::vector<DTensor>& ls) {
      auto st = add(ls[0], stop_gradient(sub(ls[0], ls[0])));
      return probe_loss(gelu(matmul(st, ls[1])), probe);
    });
    CAPTURE(res.worst);
    CHECK(res.ok(kTol));
  }
}
