#include <doctest.h>

#include <cmath>

#include "evc/autograd.hpp"
#include "helpers.hpp"

using namespace evc;
using evc::test::random_tensor;

namespace {

// Six nested loops (plus groups), the reference the fast kernel is held to.
TensorD reference_conv(const TensorD& x, const TensorD& w, const TensorD& b, ConvSpec s) {
  const int n = x.n(), cin = x.c(), h = x.h(), wd = x.w();
  const int cout = w.n(), k = w.h(), cpg = cin / s.groups, opg = cout / s.groups;
  const int oh = (h + 2 * s.padding - k) / s.stride + 1;
  const int ow = (wd + 2 * s.padding - k) / s.stride + 1;
  TensorD out(Shape(n, cout, oh, ow));
  for (int in = 0; in < n; ++in)
    for (int oc = 0; oc < cout; ++oc)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = b[oc];
          const int g = oc / opg;
          for (int ic = 0; ic < cpg; ++ic)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * s.stride - s.padding + ky;
                const int ix = ox * s.stride - s.padding + kx;
                if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
                acc += x.at(in, g * cpg + ic, iy, ix) * w.at(oc, ic, ky, kx);
              }
          out.at(in, oc, oy, ox) = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("conv of ones sums the window") {
  const Tensor x(Shape(1, 1, 3, 3), 1.0f), w(Shape(1, 1, 3, 3), 1.0f), b(Shape(1, 1, 1, 1), 0.0f);
  const Tensor y = conv2d_forward(x, w, b, {});
  CHECK(y.shape() == Shape(1, 1, 1, 1));
  CHECK(y[0] == 9.0f);
}

TEST_CASE("1x1 identity kernel passes input through") {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor<float>(Shape(2, 1, 5, 7), rng);
  const Tensor y = conv2d_forward(x, Tensor(Shape(1, 1, 1, 1), 1.0f), Tensor(Shape(1, 1, 1, 1)), {});
  CHECK(y == x);
}

TEST_CASE("conv matches the loop reference") {
  std::mt19937_64 rng(11);
  struct Case {
    int cin, cout, k;
    ConvSpec spec;
  };
  for (const Case& c : {Case{3, 5, 3, {1, 1, 1}}, Case{4, 6, 3, {2, 1, 1}}, Case{6, 6, 3, {1, 1, 6}},
                        Case{4, 8, 1, {1, 0, 2}}, Case{3, 2, 5, {2, 2, 1}}}) {
    const TensorD x = random_tensor<double>(Shape(2, c.cin, 9, 8), rng);
    const TensorD w = random_tensor<double>(Shape(c.cout, c.cin / c.spec.groups, c.k, c.k), rng);
    const TensorD b = random_tensor<double>(Shape(1, c.cout, 1, 1), rng);
    const TensorD ref = reference_conv(x, w, b, c.spec);
    const TensorD fast = conv2d_forward(x, w, b, c.spec);
    REQUIRE(fast.shape() == ref.shape());
    CHECK(max_relative_error(fast, ref) <= 1e-12);
    const Tensor fast32 = conv2d_forward(x.cast<float>(), w.cast<float>(), b.cast<float>(), c.spec);
    CHECK(max_relative_error(fast32.cast<double>(), ref) <= 1e-5);
  }
}

TEST_CASE("conv rejects mismatched channels") {
  CHECK_THROWS_AS(conv2d_forward(Tensor(Shape(1, 3, 4, 4)), Tensor(Shape(2, 2, 3, 3)),
                                 Tensor(Shape(1, 2, 1, 1)), {}),
                  DimensionError);
}

TEST_CASE("sum over identity conv has all-ones input gradient") {
  Graph<double> g;
  auto x = make_var(TensorD(Shape(1, 2, 3, 3), 0.5), true);
  TensorD w(Shape(2, 2, 1, 1));
  w.at(0, 0, 0, 0) = 1.0;
  w.at(1, 1, 0, 0) = 1.0;
  auto y = g.conv2d(x, g.constant(w), g.constant(TensorD(Shape(1, 2, 1, 1))), {});
  g.backward(g.sum(y));
  for (double v : x->grad.values()) CHECK(v == 1.0);
}

TEST_CASE("zero upstream gradient gives zero gradients") {
  std::mt19937_64 rng(5);
  const TensorD x = random_tensor<double>(Shape(1, 2, 4, 4), rng);
  const TensorD w = random_tensor<double>(Shape(3, 2, 3, 3), rng);
  const auto grads = conv2d_backward(TensorD(Shape(1, 3, 4, 4)), x, w, {1, 1, 1});
  for (double v : grads.dx.values()) CHECK(v == 0.0);
  for (double v : grads.dweight.values()) CHECK(v == 0.0);
  for (double v : grads.dbias.values()) CHECK(v == 0.0);
}

TEST_CASE("conv gradients agree with finite differences") {
  std::mt19937_64 rng(21);
  for (ConvSpec spec : {ConvSpec{1, 1, 1}, ConvSpec{2, 1, 1}, ConvSpec{1, 1, 4}}) {
    const TensorD x0 = random_tensor<double>(Shape(1, 4, 5, 5), rng);
    const TensorD w0 = random_tensor<double>(Shape(4, 4 / spec.groups, 3, 3), rng);
    const TensorD b0 = random_tensor<double>(Shape(1, 4, 1, 1), rng);
    const TensorD probe = random_tensor<double>(Shape(1, 4, spec.stride == 1 ? 5 : 3, spec.stride == 1 ? 5 : 3), rng);
    auto loss = [&](Graph<double>& g, const Var<double>& x, const Var<double>& w) {
      auto y = g.conv2d(x, w, g.constant(b0), spec);
      return g.sum(g.mul(y, g.constant(probe)));
    };
    CHECK(finite_diff_check([&](Graph<double>& g, const Var<double>& t) { return loss(g, t, g.constant(w0)); },
                            x0, 1e-4) < 1e-4);
    CHECK(finite_diff_check([&](Graph<double>& g, const Var<double>& t) { return loss(g, g.constant(x0), t); },
                            w0, 1e-4) < 1e-4);
  }
}

TEST_CASE("leaky relu values and homogeneity") {
  Graph<double> g(false);
  auto x = g.constant(TensorD::vector(std::vector<double>{2.0, -1.0, 0.0}));
  auto y = g.leaky_relu(x, 0.01);
  CHECK(y->value[0] == 2.0);
  CHECK(y->value[1] == doctest::Approx(-0.01).epsilon(1e-15));
  CHECK(y->value[2] == 0.0);

  std::mt19937_64 rng(8);
  const TensorD r = random_tensor<double>(Shape(1, 16, 3, 3), rng, -3, 3);
  for (double a : {0.25, 1.7, 9.0}) {
    TensorD ra = r;
    for (auto& v : ra.values()) v *= a;
    auto fa = g.leaky_relu(g.constant(ra), 0.01);
    auto f = g.leaky_relu(g.constant(r), 0.01);
    for (std::size_t i = 0; i < r.size(); ++i) CHECK(fa->value[i] == doctest::Approx(a * f->value[i]).epsilon(1e-14));
  }
}

TEST_CASE("channel scale") {
  std::mt19937_64 rng(9);
  const TensorD x = random_tensor<double>(Shape(2, 3, 4, 4), rng);
  Graph<double> g(false);
  CHECK(g.channel_scale(g.constant(x), g.constant(TensorD(Shape(1, 3, 1, 1), 1.0)))->value == x);
  const auto zeroed = g.channel_scale(g.constant(x), g.constant(TensorD(Shape(1, 3, 1, 1))));
  for (double v : zeroed->value.values()) CHECK(v == 0.0);
  const TensorD m0 = random_tensor<double>(Shape(1, 3, 1, 1), rng);
  const TensorD probe = random_tensor<double>(x.shape(), rng);
  auto f = [&](Graph<double>& gg, const Var<double>& xx, const Var<double>& mm) {
    return gg.sum(gg.mul(gg.channel_scale(xx, mm), gg.constant(probe)));
  };
  CHECK(finite_diff_check([&](Graph<double>& gg, const Var<double>& t) { return f(gg, gg.constant(x), t); }, m0,
                          1e-4) < 1e-4);
  CHECK(finite_diff_check([&](Graph<double>& gg, const Var<double>& t) { return f(gg, t, gg.constant(m0)); }, x,
                          1e-4) < 1e-4);
}

TEST_CASE("pixel shuffle shape law and bijection") {
  std::mt19937_64 rng(4);
  const TensorD x = random_tensor<double>(Shape(1, 4, 2, 2), rng);
  CHECK(pixel_shuffle(x, 2).shape() == Shape(1, 1, 4, 4));
  const TensorD big = random_tensor<double>(Shape(2, 8, 3, 5), rng);
  CHECK(space_to_depth(pixel_shuffle(big, 2), 2) == big);
  CHECK(pixel_shuffle(space_to_depth(big, 1), 1) == big);
  const TensorD c(Shape(1, 8, 3, 3), 0.75);
  const TensorD cs = pixel_shuffle(c, 2);
  for (double v : cs.values()) CHECK(v == 0.75);
  // Channel oc * r^2 + i * r + j lands at (i, j) inside each r x r cell.
  TensorD one(Shape(1, 4, 1, 1));
  for (int ch = 0; ch < 4; ++ch) one.at(0, ch, 0, 0) = ch;
  const TensorD s = pixel_shuffle(one, 2);
  CHECK(s.at(0, 0, 0, 0) == 0.0);
  CHECK(s.at(0, 0, 0, 1) == 1.0);
  CHECK(s.at(0, 0, 1, 0) == 2.0);
  CHECK(s.at(0, 0, 1, 1) == 3.0);
}

TEST_CASE("pixel shuffle gradient") {
  std::mt19937_64 rng(6);
  const TensorD x = random_tensor<double>(Shape(1, 8, 2, 3), rng);
  const TensorD probe = random_tensor<double>(Shape(1, 2, 4, 6), rng);
  CHECK(finite_diff_check(
            [&](Graph<double>& g, const Var<double>& t) { return g.sum(g.mul(g.pixel_shuffle(t, 2), g.constant(probe))); },
            x, 1e-4) < 1e-4);
}

TEST_CASE("finite difference harness on simple functions") {
  std::mt19937_64 rng(12);
  const TensorD theta = random_tensor<double>(Shape(1, 10, 1, 1), rng);
  const double err = finite_diff_check(
      [](Graph<double>& g, const Var<double>& t) { return g.scale(g.sum(g.mul(t, t)), 0.5); }, theta, 1e-4);
  CHECK(err < 1e-8);
  const double flat = finite_diff_check(
      [](Graph<double>& g, const Var<double>& t) {
        return g.sum(g.constant(TensorD(Shape(1, 1, 1, 1), 3.0)));
      },
      theta, 1e-4);
  CHECK(flat == 0.0);
}

TEST_CASE("elementwise op gradients") {
  std::mt19937_64 rng(14);
  const TensorD a0 = random_tensor<double>(Shape(1, 3, 2, 2), rng, 0.1, 2.0);
  const TensorD b0 = random_tensor<double>(Shape(1, 3, 2, 2), rng, 0.1, 2.0);
  auto check = [&](auto op) {
    CHECK(finite_diff_check([&](Graph<double>& g, const Var<double>& t) { return op(g, t); }, a0, 1e-5) < 1e-4);
  };
  check([&](Graph<double>& g, const Var<double>& t) { return g.sum(g.sub(g.mul(t, t), g.constant(b0))); });
  check([&](Graph<double>& g, const Var<double>& t) { return g.mse(t, g.constant(b0)); });
  check([&](Graph<double>& g, const Var<double>& t) { return g.sum(g.leaky_relu(g.sub(t, g.constant(b0)), 0.01)); });
  check([&](Graph<double>& g, const Var<double>& t) { return g.sum(g.exp_clamped(t, 1e-3, 1e3)); });
  check([&](Graph<double>& g, const Var<double>& t) {
    return g.sum(g.mul(g.concat_channels(t, g.constant(b0)), g.concat_channels(g.constant(b0), t)));
  });
  check([&](Graph<double>& g, const Var<double>& t) { return g.sum(g.mul(g.slice_channels(t, 1, 2), g.slice_channels(t, 0, 2))); });
}
