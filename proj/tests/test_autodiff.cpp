#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "selfshot/autodiff.hpp"
#include "selfshot/nn.hpp"

using namespace selfshot;
using ad::Var;

namespace {

// Checks d(fn(leaves))/d(leaf entries) against central differences.
void check_gradients(std::vector<Var> leaves, const std::function<Var()>& fn, double tol = 1e-6,
                     double h = 1e-5) {
  for (auto& leaf : leaves) leaf->grad = Tensor();  // drop any prior accumulation
  Var out = fn();
  REQUIRE(out->val.numel() == 1);
  ad::backward(out);
  for (auto& leaf : leaves) {
    REQUIRE(leaf->grad.numel() == leaf->val.numel());
    for (std::int64_t i = 0; i < leaf->val.numel(); ++i) {
      double analytic = leaf->grad[i];
      double numeric = ad::finite_difference(leaf->val, i, h,
                                             [&]() { return ad::scalar_value(fn()); });
      double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-4});
      CHECK(std::fabs(analytic - numeric) / denom <= tol);
    }
  }
}

Tensor randn(SeedStream& rng, Tensor::Shape shape, double scl = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.next_normal() * scl;
  return t;
}

}  // namespace

TEST_CASE("broadcast add/mul values") {
  Var a = ad::constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var b = ad::constant(Tensor({3}, {10, 20, 30}));
  Var c = ad::add(a, b);
  CHECK(c->val.shape() == Tensor::Shape{2, 3});
  CHECK(c->val.at2(0, 0) == 11);
  CHECK(c->val.at2(1, 2) == 36);
  Var d = ad::mul(a, b);
  CHECK(d->val.at2(1, 1) == 100);
}

TEST_CASE("elementwise gradient checks") {
  SeedStream rng(7, "ew");
  Var x = ad::leaf(randn(rng, {3, 4}));
  Var y = ad::leaf(randn(rng, {3, 4}));
  check_gradients({x, y}, [&]() {
    Var t = ad::mul(ad::add(x, y), ad::sub(x, ad::scale(y, 0.5)));
    t = ad::add(t, ad::div(x, ad::add_scalar(ad::square(y), 3.0)));
    return ad::sum_all(t);
  });
}

TEST_CASE("unary op gradient checks") {
  SeedStream rng(8, "unary");
  Var x = ad::leaf(randn(rng, {2, 5}, 0.7));
  check_gradients({x}, [&]() {
    Var t = ad::add(ad::sigmoid(x), ad::relu(x));
    t = ad::add(t, ad::softplus(ad::scale(x, 1.3)));
    t = ad::add(t, ad::exp_(ad::scale(x, 0.3)));
    t = ad::add(t, ad::log_(ad::add_scalar(ad::square(x), 1.0)));
    t = ad::add(t, ad::sqrt_(ad::add_scalar(ad::square(x), 2.0)));
    t = ad::add(t, ad::abs_(ad::add_scalar(x, 0.37)));
    t = ad::add(t, ad::pow_const(ad::add_scalar(ad::sigmoid(x), 0.1), 2.5));
    return ad::mean_all(t);
  });
}

TEST_CASE("broadcast gradient reduce") {
  SeedStream rng(9, "bc");
  Var x = ad::leaf(randn(rng, {2, 3, 4}));
  Var b = ad::leaf(randn(rng, {4}));
  Var m = ad::leaf(randn(rng, {3, 1}));
  check_gradients({x, b, m}, [&]() {
    return ad::sum_all(ad::mul(ad::add(x, b), m));
  });
}

TEST_CASE("matmul and bmm gradients") {
  SeedStream rng(10, "mm");
  Var a = ad::leaf(randn(rng, {3, 4}));
  Var b = ad::leaf(randn(rng, {4, 2}));
  check_gradients({a, b}, [&]() { return ad::sum_all(ad::matmul(a, b)); });

  Var c = ad::leaf(randn(rng, {2, 3, 4}));
  Var d = ad::leaf(randn(rng, {2, 4, 2}));
  check_gradients({c, d}, [&]() { return ad::mean_all(ad::square(ad::bmm(c, d))); });
}

TEST_CASE("shape op gradients") {
  SeedStream rng(11, "shape");
  Var x = ad::leaf(randn(rng, {2, 3, 4}));
  Var y = ad::leaf(randn(rng, {2, 2, 4}));
  check_gradients({x, y}, [&]() {
    Var p = ad::permute(x, {2, 0, 1});            // [4,2,3]
    Var r = ad::reshape(p, {4, 6});
    Var s = ad::slice(x, 1, 1, 2);                // [2,2,4]
    Var cc = ad::concat({s, y}, 1);               // [2,4,4]
    return ad::add(ad::sum_all(ad::square(r)), ad::sum_all(ad::mul(cc, cc)));
  });
}

TEST_CASE("softmax/logsumexp/layernorm gradients") {
  SeedStream rng(12, "sm");
  Var x = ad::leaf(randn(rng, {3, 5}));
  Var g = ad::leaf(randn(rng, {5}, 0.3));
  Var coef = ad::constant(randn(rng, {3, 5}));
  check_gradients({x}, [&]() { return ad::sum_all(ad::mul(ad::softmax_lastdim(x), coef)); });
  check_gradients({x}, [&]() { return ad::sum_all(ad::logsumexp_lastdim(x)); });
  Var gamma = ad::leaf(Tensor({5}, 1.0));
  Var beta = ad::leaf(randn(rng, {5}, 0.1));
  check_gradients({x, gamma, beta}, [&]() {
    return ad::sum_all(ad::mul(ad::layer_norm(x, gamma, beta), coef));
  }, 2e-6);
  check_gradients({x, g}, [&]() {
    return ad::sum_all(ad::mul(ad::l2_normalize_lastdim(ad::mul(x, g)), coef));
  });
}

TEST_CASE("min/max/clamp subgradients away from ties") {
  SeedStream rng(13, "mm2");
  Var a = ad::leaf(randn(rng, {4, 4}));
  Var b = ad::leaf(randn(rng, {4, 4}));
  check_gradients({a, b}, [&]() {
    return ad::sum_all(ad::add(ad::minimum(a, b), ad::scale(ad::maximum(a, b), 2.0)));
  });
  check_gradients({a}, [&]() { return ad::sum_all(ad::clamp(a, -0.4, 0.4)); });
}

TEST_CASE("group_norm gradient") {
  SeedStream rng(14, "gn");
  Var x = ad::leaf(randn(rng, {2, 4, 3, 3}));
  Var gamma = ad::leaf(Tensor({4}, 1.0));
  Var beta = ad::leaf(randn(rng, {4}, 0.1));
  Var coef = ad::constant(randn(rng, {2, 4, 3, 3}));
  check_gradients({x, gamma, beta}, [&]() {
    return ad::sum_all(ad::mul(ad::group_norm(x, gamma, beta, 2), coef));
  }, 2e-6);
}

TEST_CASE("conv2d matches direct computation and gradients") {
  SeedStream rng(15, "c2");
  Var x = ad::leaf(randn(rng, {2, 3, 5, 5}));
  Var w = ad::leaf(randn(rng, {4, 3, 3, 3}, 0.4));
  Var b = ad::leaf(randn(rng, {4}, 0.1));

  // direct nested-loop reference
  Var y = ad::conv2d(x, w, b, 2, 1);
  CHECK(y->val.shape() == Tensor::Shape{2, 4, 3, 3});
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t co = 0; co < 4; ++co)
      for (std::int64_t oy = 0; oy < 3; ++oy)
        for (std::int64_t ox = 0; ox < 3; ++ox) {
          double acc = b->val[co];
          for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < 3; ++i)
              for (std::int64_t j = 0; j < 3; ++j) {
                std::int64_t yy = oy * 2 + i - 1, xx = ox * 2 + j - 1;
                if (yy < 0 || yy >= 5 || xx < 0 || xx >= 5) continue;
                acc += x->val.at4(n, c, yy, xx) * w->val.at4(co, c, i, j);
              }
          CHECK(y->val.at4(n, co, oy, ox) == doctest::Approx(acc).epsilon(1e-12));
        }

  Var coef = ad::constant(randn(rng, {2, 4, 3, 3}));
  check_gradients({x, w, b}, [&]() {
    return ad::sum_all(ad::mul(ad::conv2d(x, w, b, 2, 1), coef));
  });
}

TEST_CASE("conv3d gradients") {
  SeedStream rng(16, "c3");
  Var x = ad::leaf(randn(rng, {1, 2, 3, 4, 4}));
  Var w = ad::leaf(randn(rng, {3, 2, 3, 3, 3}, 0.3));
  Var b = ad::leaf(randn(rng, {3}, 0.1));
  Var coef = ad::constant(randn(rng, {1, 3, 2, 2, 2}));
  check_gradients({x, w, b}, [&]() {
    return ad::sum_all(ad::mul(ad::conv3d(x, w, b, 2, 2, 2, 1, 1, 1), coef));
  });
}

TEST_CASE("upsample_nearest2d values and gradient") {
  Var x = ad::leaf(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
  Var y = ad::upsample_nearest2d(x, 2);
  CHECK(y->val.shape() == Tensor::Shape{1, 1, 4, 4});
  CHECK(y->val.at4(0, 0, 0, 1) == 1);
  CHECK(y->val.at4(0, 0, 3, 3) == 4);
  SeedStream rng(17, "up");
  Var coef = ad::constant(randn(rng, {1, 1, 4, 4}));
  check_gradients({x}, [&]() {
    return ad::sum_all(ad::mul(ad::upsample_nearest2d(x, 2), coef));
  });
}

TEST_CASE("multi-head attention gradient and shapes") {
  SeedStream rng(18, "mha");
  nn::ParamStore ps;
  nn::Init init{&rng};
  nn::MultiHeadAttention mha(ps, "mha", 8, 2, init);
  Var q = ad::leaf(randn(rng, {5, 8}));
  Var k = ad::leaf(randn(rng, {7, 8}));
  Var coef = ad::constant(randn(rng, {5, 8}));
  Var out = mha(q, k, k);
  CHECK(out->val.shape() == Tensor::Shape{5, 8});
  std::vector<Var> leaves{q, k, mha.wq.w, mha.wk.w, mha.wv.w, mha.wo.w, mha.wo.b};
  check_gradients(leaves, [&]() { return ad::sum_all(ad::mul(mha(q, k, k), coef)); }, 2e-6);
}

TEST_CASE("adamw descends a quadratic") {
  nn::ParamStore ps;
  Var x = ps.add("x", Tensor({3}, {5.0, -4.0, 2.0}));
  nn::AdamW opt(ps, {{"", 0.1}}, 0.0);
  for (int it = 0; it < 300; ++it) {
    opt.zero_grad();
    Var loss = ad::sum_all(ad::square(x));
    ad::backward(loss);
    opt.step();
  }
  CHECK(x->val.max_abs() < 1e-2);
}

TEST_CASE("adamw state round-trip resumes identically") {
  SeedStream rng(20, "adam");
  auto run = [&](int pre_steps, bool reload) {
    nn::ParamStore ps;
    Var x = ps.add("x", Tensor({4}, {1.0, -2.0, 3.0, -4.0}));
    nn::AdamW opt(ps, {{"", 0.05}}, 0.01);
    std::map<std::string, Tensor> snap_state;
    Tensor snap_vals;
    for (int it = 0; it < pre_steps; ++it) {
      opt.zero_grad();
      Var loss = ad::sum_all(ad::square(ad::sub(x, ad::constant(Tensor({4}, 0.5)))));
      ad::backward(loss);
      opt.step();
    }
    if (reload) {
      for (auto& [nm, t] : opt.state_tensors()) snap_state[nm] = t;
      snap_vals = x->val;
      nn::ParamStore ps2;
      Var x2 = ps2.add("x", snap_vals);
      nn::AdamW opt2(ps2, {{"", 0.05}}, 0.01);
      opt2.load_state(snap_state);
      opt2.zero_grad();
      Var loss = ad::sum_all(ad::square(ad::sub(x2, ad::constant(Tensor({4}, 0.5)))));
      ad::backward(loss);
      opt2.step();
      return x2->val;
    }
    opt.zero_grad();
    Var loss = ad::sum_all(ad::square(ad::sub(x, ad::constant(Tensor({4}, 0.5)))));
    ad::backward(loss);
    opt.step();
    return x->val;
  };
  Tensor direct = run(5, false);
  Tensor resumed = run(5, true);
  for (std::int64_t i = 0; i < 4; ++i) CHECK(direct[i] == resumed[i]);
}

TEST_CASE("stop_gradient blocks flow") {
  Var x = ad::leaf(Tensor({2}, {1.0, 2.0}));
  Var y = ad::sum_all(ad::mul(ad::stop_gradient(x), x));
  ad::backward(y);
  CHECK(x->grad[0] == doctest::Approx(1.0));  // only the differentiable side
  CHECK(x->grad[1] == doctest::Approx(2.0));
}
