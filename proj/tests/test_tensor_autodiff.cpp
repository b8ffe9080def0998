#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "xmpr/autodiff.hpp"
#include "xmpr/checkpoint.hpp"
#include "xmpr/optim.hpp"
#include "xmpr/rng.hpp"

using namespace xmpr;
using namespace xmpr::ad;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

// Random values bounded away from zero, for ops with a kink or pole there.
Tensor random_offzero(Shape shape, Rng& rng, double margin = 0.1) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) {
    const double v = rng.uniform(margin, 1.0);
    t.data()[i] = rng.uniform() < 0.5 ? -v : v;
  }
  return t;
}

void check_grads(Graph& g, Var seed, double tol = 1e-4) {
  const GradCheckReport rep = grad_check(g, seed, tol);
  for (const auto& e : rep.entries) {
    INFO("leaf ", e.name, " max rel err ", e.max_rel_err);
    CHECK(e.pass);
  }
  CHECK(rep.pass);
}

}  // namespace

TEST_CASE("tensor shape and indexing") {
  Tensor t({2, 3, 4});
  CHECK(t.rank() == 3);
  CHECK(t.numel() == 24);
  t.at({1, 2, 3}) = 5.0;
  CHECK(t.data()[23] == 5.0);
  CHECK(t.flat_index({1, 0, 2}) == 14);
  CHECK(shape_string(t.shape()) == "[2x3x4]");
  const Tensor s = Tensor::scalar(7.0);
  CHECK(s.rank() == 0);
  CHECK(s.value() == 7.0);
  CHECK_THROWS(Tensor::from_vector({2, 2}, {1.0, 2.0, 3.0}));
}

TEST_CASE("forward: scaling, softmax symmetry, unit norm") {
  Graph g;
  Var x = g.input("x", Tensor::scalar(3.0));
  Var y = affine(x, 2.0, 0.0);
  CHECK(y.value().value() == doctest::Approx(6.0).epsilon(1e-15));

  Graph g2;
  Var logits = g2.input("l", Tensor::full({48}, 0.37));
  Var w = softmax(logits);
  for (Index i = 0; i < 48; ++i)
    CHECK(w.value().data()[i] == doctest::Approx(1.0 / 48.0).epsilon(1e-12));

  Graph g3;
  Rng rng(7);
  Var v = g3.input("v", random_tensor({16}, rng));
  Var n = l2_normalize(v);
  Var d = reduce_sum(mul(n, n));
  CHECK(std::abs(d.value().value() - 1.0) <= 1e-12);
}

TEST_CASE("forward: frozen oracles for softmax, layer_norm, silu, softplus") {
  Graph g;
  Var x = g.input("x", Tensor::from_vector({3}, {1.0, 2.0, 3.0}));
  Var s = softmax(x);
  CHECK(s.value().data()[0] == doctest::Approx(0.09003057317038046).epsilon(1e-12));
  CHECK(s.value().data()[1] == doctest::Approx(0.24472847105479764).epsilon(1e-12));
  CHECK(s.value().data()[2] == doctest::Approx(0.6652409557748218).epsilon(1e-12));
  Var ln = layer_norm(x);
  CHECK(ln.value().data()[0] == doctest::Approx(-1.224743952833969).epsilon(1e-9));
  CHECK(ln.value().data()[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(ln.value().data()[2] == doctest::Approx(1.224743952833969).epsilon(1e-9));

  Graph g2;
  Var a = g2.input("a", Tensor::scalar(0.7));
  CHECK(silu(a).value().value() == doctest::Approx(0.46773144051771626).epsilon(1e-12));
  Var b = g2.input("b", Tensor::scalar(0.3));
  CHECK(softplus(b).value().value() == doctest::Approx(0.8543552444685272).epsilon(1e-12));
}

TEST_CASE("forward: broadcasting add and mul") {
  Graph g;
  Var a = g.input("a", Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var b = g.input("b", Tensor::from_vector({3}, {10, 20, 30}));
  Var y = add(a, b);
  CHECK(y.value().at({0, 0}) == 11.0);
  CHECK(y.value().at({1, 2}) == 36.0);
  Var c = g.input("c", Tensor::from_vector({2, 1}, {2, 3}));
  Var z = mul(a, c);
  CHECK(z.value().at({0, 2}) == 6.0);
  CHECK(z.value().at({1, 0}) == 12.0);
}

TEST_CASE("forward: conv2d zero vs circular padding") {
  Graph g;
  Var x = g.input("x", Tensor::from_vector({1, 3, 1}, {1, 2, 3}));
  Var k = g.input("k", Tensor::from_vector({1, 3, 1, 1}, {10, 20, 30}));
  Var b = g.input("b", Tensor::zeros({1}));
  Var yz = conv2d(x, k, b, Pad::Zero);
  CHECK(yz.value().data()[0] == doctest::Approx(80.0));
  CHECK(yz.value().data()[1] == doctest::Approx(140.0));
  CHECK(yz.value().data()[2] == doctest::Approx(80.0));
  Var yc = conv2d(x, k, b, Pad::CircularHorizontal);
  CHECK(yc.value().data()[0] == doctest::Approx(110.0));
  CHECK(yc.value().data()[1] == doctest::Approx(140.0));
  CHECK(yc.value().data()[2] == doctest::Approx(110.0));
}

TEST_CASE("forward: circular conv is equivariant to column rotation") {
  Rng rng(11);
  Tensor x = random_tensor({4, 10, 2}, rng);
  Tensor k = random_tensor({3, 3, 2, 3}, rng);
  Tensor bias = random_tensor({3}, rng);
  Graph g;
  Var y = conv2d(g.input("x", x), g.input("k", k), g.input("b", bias),
                 Pad::CircularHorizontal);
  // rotate input columns by 4, output must rotate identically
  Tensor xr({4, 10, 2});
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 10; ++j)
      for (Index c = 0; c < 2; ++c) xr.at({i, (j + 4) % 10, c}) = x.at({i, j, c});
  Graph g2;
  Var yr = conv2d(g2.input("x", xr), g2.input("k", k), g2.input("b", bias),
                  Pad::CircularHorizontal);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 10; ++j)
      for (Index c = 0; c < 3; ++c)
        CHECK(yr.value().at({i, (j + 4) % 10, c}) ==
              doctest::Approx(y.value().at({i, j, c})).epsilon(1e-12));
}

TEST_CASE("forward: avg_pool2d and upsample_nearest") {
  Graph g;
  Var x = g.input("x", Tensor::from_vector({2, 4, 1}, {1, 2, 3, 4, 5, 6, 7, 8}));
  Var p = avg_pool2d(x, 2);
  CHECK(p.value().shape() == Shape{1, 2, 1});
  CHECK(p.value().data()[0] == doctest::Approx((1 + 2 + 5 + 6) / 4.0));
  CHECK(p.value().data()[1] == doctest::Approx((3 + 4 + 7 + 8) / 4.0));
  Var u = upsample_nearest(p, 2);
  CHECK(u.value().shape() == Shape{2, 4, 1});
  CHECK(u.value().at({1, 1, 0}) == doctest::Approx(3.5));
  CHECK(u.value().at({0, 2, 0}) == doctest::Approx(5.5));
}

TEST_CASE("forward: slice, concat, permute, reverse, reshape round trips") {
  Rng rng(3);
  Tensor x = random_tensor({3, 4, 2}, rng);
  Graph g;
  Var v = g.input("x", x);
  Var s0 = slice(v, 1, 0, 2);
  Var s1 = slice(v, 1, 2, 2);
  Var back = concat({s0, s1}, 1);
  for (Index i = 0; i < x.numel(); ++i) CHECK(back.value().data()[i] == x.data()[i]);

  Var p = permute(v, {1, 2, 0});
  CHECK(p.value().shape() == Shape{4, 2, 3});
  CHECK(p.value().at({2, 1, 0}) == x.at({0, 2, 1}));
  Var pp = permute(p, {2, 0, 1});
  for (Index i = 0; i < x.numel(); ++i) CHECK(pp.value().data()[i] == x.data()[i]);

  Var r = reverse(v, 0);
  CHECK(r.value().at({0, 1, 1}) == x.at({2, 1, 1}));
  Var rr = reverse(r, 0);
  for (Index i = 0; i < x.numel(); ++i) CHECK(rr.value().data()[i] == x.data()[i]);

  Var q = reshape(v, {6, 4});
  CHECK(q.value().shape() == Shape{6, 4});
  CHECK(q.value().data()[5] == x.data()[5]);
}

TEST_CASE("forward: cumsum and gather_rows") {
  Graph g;
  Var x = g.input("x", Tensor::from_vector({3, 2}, {1, 10, 2, 20, 3, 30}));
  Var c = cumsum(x);
  CHECK(c.value().at({2, 0}) == 6.0);
  CHECK(c.value().at({1, 1}) == 30.0);
  Var picked = gather_rows(x, {2, 0, 2});
  CHECK(picked.value().shape() == Shape{3, 2});
  CHECK(picked.value().at({0, 1}) == 30.0);
  CHECK(picked.value().at({1, 0}) == 1.0);
}

TEST_CASE("backward: sum of squares and constants") {
  Graph g;
  Var x = g.input("x", Tensor::from_vector({2}, {1.0, 2.0}), true);
  Var f = reduce_sum(mul(x, x));
  g.backward(f);
  CHECK(x.grad().data()[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(x.grad().data()[1] == doctest::Approx(4.0).epsilon(1e-12));

  Graph g2;
  Var y = g2.input("y", Tensor::scalar(1.5), true);
  Var c = g2.constant(4.0);
  Var h = mul(c, c);
  g2.backward(h);
  CHECK(y.grad().value() == 0.0);
}

TEST_CASE("backward: named map interface and unreachable parameters") {
  ParamStore store;
  ad::Parameter& w = store.create("w", Tensor::from_vector({2}, {0.5, -0.25}));
  ad::Parameter& unused = store.create("unused", Tensor::from_vector({3}, {1, 2, 3}));
  Graph g;
  Var x = g.input("x", Tensor::from_vector({2}, {3.0, 4.0}), true);
  Var wv = g.param(w);
  g.param(unused);
  g.mark_output("loss", reduce_sum(mul(wv, x)));
  auto grads = backward(g, "loss");
  CHECK(grads.at("w").data()[0] == doctest::Approx(3.0));
  CHECK(grads.at("w").data()[1] == doctest::Approx(4.0));
  CHECK(grads.at("x").data()[0] == doctest::Approx(0.5));
  CHECK(grads.at("unused").data().abs().maxCoeff() == 0.0);
}

TEST_CASE("backward: random 3-layer composite matches finite differences") {
  Rng rng(21);
  Graph g;
  Var x = g.input("x", random_tensor({4, 5}, rng), true);
  Var w1 = g.input("w1", random_tensor({5, 6}, rng), true);
  Var w2 = g.input("w2", random_tensor({6, 3}, rng), true);
  Var h1 = silu(matmul(x, w1));
  Var h2 = layer_norm(matmul(h1, w2));
  Var loss = reduce_mean(mul(h2, h2));
  check_grads(g, loss);
}

TEST_CASE("grad_check: linear layer is exact to 1e-6") {
  Rng rng(5);
  Graph g;
  Var x = g.input("x", random_tensor({3, 4}, rng), true);
  Var w = g.input("w", random_tensor({4, 2}, rng), true);
  Var b = g.input("b", random_tensor({2}, rng), true);
  Var f = reduce_sum(add(matmul(x, w), b));
  const GradCheckReport rep = grad_check(g, f, 1e-6);
  CHECK(rep.pass);
  for (const auto& e : rep.entries) CHECK(e.max_rel_err <= 1e-6);
}

TEST_CASE("grad_check: every elementwise op") {
  Rng rng(33);
  auto run = [&](auto make, Tensor init) {
    Graph g;
    Var x = g.input("x", std::move(init), true);
    Var f = reduce_sum(make(x));
    check_grads(g, f);
  };
  run([](Var x) { return add(x, x); }, random_tensor({3, 4}, rng));
  run([](Var x) { return sub(affine(x, 2.0, 1.0), x); }, random_tensor({3, 4}, rng));
  run([](Var x) { return mul(x, x); }, random_tensor({3, 4}, rng));
  run([](Var x) { return neg(x); }, random_tensor({6}, rng));
  run([](Var x) { return ad::exp(x); }, random_tensor({3, 4}, rng));
  run([](Var x) { return ad::log(x); }, random_tensor({3, 4}, rng, 0.5, 1.5));
  run([](Var x) { return ad::sqrt(x); }, random_tensor({3, 4}, rng, 0.5, 1.5));
  run([](Var x) { return softplus(x); }, random_tensor({3, 4}, rng));
  run([](Var x) { return sigmoid(x); }, random_tensor({3, 4}, rng));
  run([](Var x) { return silu(x); }, random_tensor({3, 4}, rng));
  run([](Var x) { return relu(x); }, random_offzero({3, 4}, rng));
}

TEST_CASE("grad_check: broadcasting binary ops") {
  Rng rng(34);
  Graph g;
  Var a = g.input("a", random_tensor({2, 3}, rng), true);
  Var b = g.input("b", random_tensor({3}, rng), true);
  Var c = g.input("c", random_tensor({2, 1}, rng), true);
  Var f = reduce_sum(mul(add(a, b), c));
  check_grads(g, f);
}

TEST_CASE("grad_check: matrix, reduction and normalization ops") {
  Rng rng(35);
  auto run = [&](auto build) {
    Graph g;
    build(g);
    check_grads(g, g.output("f"));
  };
  run([&](Graph& g) {
    Var a = g.input("a", random_tensor({3, 4}, rng), true);
    Var b = g.input("b", random_tensor({4, 2}, rng), true);
    g.mark_output("f", reduce_sum(matmul(a, b)));
  });
  run([&](Graph& g) {
    Var a = g.input("a", random_tensor({2, 3, 4}, rng), true);
    Var b = g.input("b", random_tensor({2, 4, 2}, rng), true);
    g.mark_output("f", reduce_sum(mul(bmm(a, b), bmm(a, b))));
  });
  run([&](Graph& g) {
    Var x = g.input("x", random_tensor({3, 5}, rng), true);
    Var w = g.input("w", random_tensor({3, 5}, rng), true);
    g.mark_output("f", reduce_sum(mul(softmax(x), w)));
  });
  run([&](Graph& g) {
    Var x = g.input("x", random_tensor({3, 5}, rng), true);
    Var w = g.input("w", random_tensor({3, 5}, rng), true);
    g.mark_output("f", reduce_sum(mul(layer_norm(x), w)));
  });
  run([&](Graph& g) {
    Var x = g.input("x", random_tensor({3, 5}, rng), true);
    g.mark_output("f", reduce_sum(mul(reduce_mean(x, 1), reduce_mean(x, 1))));
  });
  run([&](Graph& g) {
    Var x = g.input("x", random_tensor({3, 5}, rng), true);
    g.mark_output("f", reduce_mean(mul(reduce_sum(x, 0), reduce_sum(x, 0))));
  });
  run([&](Graph& g) {
    Var x = g.input("x", random_tensor({4, 3}, rng), true);
    Var w = g.input("w", random_tensor({4, 3}, rng), true);
    g.mark_output("f", reduce_sum(mul(cumsum(x), w)));
  });
  run([&](Graph& g) {
    Var x = g.input("x", random_tensor({3, 5}, rng), true);
    Var w = g.input("w", random_tensor({3, 5}, rng), true);
    g.mark_output("f", reduce_sum(mul(l2_normalize(x), w)));
  });
  run([&](Graph& g) {
    Var x = g.input("x", random_tensor({5, 3}, rng), true);
    g.mark_output("f", reduce_sum(mul(gather_rows(x, {4, 0, 2, 2}),
                                      gather_rows(x, {1, 1, 3, 0}))));
  });
}

TEST_CASE("grad_check: shape ops") {
  Rng rng(36);
  Graph g;
  Var x = g.input("x", random_tensor({3, 4, 2}, rng), true);
  Var w = g.input("w", random_tensor({4, 2, 3}, rng), true);
  Var a = slice(x, 1, 1, 2);
  Var b = slice(x, 1, 0, 2);
  Var cat = concat({a, b}, 1);
  Var pm = permute(cat, {1, 2, 0});
  Var rv = reverse(pm, 0);
  Var rs = reshape(rv, {4, 2, 3});
  Var f = reduce_sum(mul(rs, w));
  check_grads(g, f);
}

TEST_CASE("grad_check: spatial ops") {
  Rng rng(37);
  for (Pad pad : {Pad::Zero, Pad::CircularHorizontal}) {
    Graph g;
    Var x = g.input("x", random_tensor({4, 6, 2}, rng), true);
    Var k = g.input("k", random_tensor({3, 3, 2, 3}, rng), true);
    Var b = g.input("b", random_tensor({3}, rng), true);
    Var y = conv2d(x, k, b, pad);
    Var f = reduce_sum(mul(y, y));
    check_grads(g, f);
  }
  Graph g;
  Var x = g.input("x", random_tensor({4, 6, 2}, rng), true);
  Var f = reduce_sum(mul(upsample_nearest(avg_pool2d(x, 2), 2), x));
  check_grads(g, f);
}

TEST_CASE("scan: discretization oracle a=-1, delta=ln2") {
  double a_bar = 0.0, b_bar = 0.0;
  discretize(-1.0, 1.0, std::log(2.0), Discretization::ZohExact, a_bar, b_bar);
  CHECK(a_bar == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(b_bar == doctest::Approx(0.5).epsilon(1e-14));
  discretize(-1.0, 1.0, std::log(2.0), Discretization::Euler, a_bar, b_bar);
  CHECK(a_bar == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(b_bar == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("scan: phi1 series fallback is continuous") {
  CHECK(phi1(0.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(phi1(1.0) == doctest::Approx(std::expm1(1.0)).epsilon(1e-14));
  CHECK(phi1(-std::log(2.0)) == doctest::Approx(0.7213475204444817).epsilon(1e-14));
  // straddle the |z| = 1e-4 switch
  const double lo = phi1(0.99e-4), hi = phi1(1.01e-4);
  CHECK(std::abs(lo - (1.0 + 0.99e-4 / 2 + 0.99e-4 * 0.99e-4 / 6)) < 1e-15);
  CHECK(std::abs(hi - std::expm1(1.01e-4) / 1.01e-4) < 1e-15);
  CHECK(std::abs(hi - lo) < 2e-6);  // slope 1/2 over a 2e-6 gap, no jump at the switch
}

TEST_CASE("scan: hand-rolled two-step sequence") {
  Graph g;
  Var u = g.input("u", Tensor::from_vector({2, 1}, {1.0, 1.0}));
  Var dt = g.input("dt", Tensor::full({2, 1}, std::log(2.0)));
  Var A = g.input("A", Tensor::from_vector({1, 1}, {-1.0}));
  Var B = g.input("B", Tensor::full({2, 1}, 1.0));
  Var C = g.input("C", Tensor::full({2, 1}, 1.0));
  Var y = selective_scan(u, dt, A, B, C, ScanMode::Sequential, Discretization::ZohExact);
  CHECK(y.value().data()[0] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(y.value().data()[1] == doctest::Approx(0.75).epsilon(1e-14));

  Graph g2;
  Var y2 = selective_scan(g2.input("u", u.value()), g2.input("dt", dt.value()),
                          g2.input("A", A.value()), g2.input("B", B.value()),
                          g2.input("C", C.value()), ScanMode::Sequential,
                          Discretization::Euler);
  CHECK(y2.value().data()[0] == doctest::Approx(0.6931471805599453).epsilon(1e-14));
  CHECK(y2.value().data()[1] == doctest::Approx(1.0397207708399179).epsilon(1e-14));
}

TEST_CASE("scan: blocked matches sequential within 1e-10 up to T=4096") {
  Rng rng(41);
  const Index t = 4096, d = 2, n = 2;
  Tensor u = random_tensor({t, d}, rng);
  Tensor dt = random_tensor({t, d}, rng, 0.01, 0.5);
  Tensor A = random_tensor({d, n}, rng, -2.0, -0.1);
  Tensor B = random_tensor({t, n}, rng);
  Tensor C = random_tensor({t, n}, rng);
  Graph gs, gb;
  Var ys = selective_scan(gs.input("u", u), gs.input("dt", dt), gs.input("A", A),
                          gs.input("B", B), gs.input("C", C), ScanMode::Sequential,
                          Discretization::ZohExact);
  Var yb = selective_scan(gb.input("u", u), gb.input("dt", dt), gb.input("A", A),
                          gb.input("B", B), gb.input("C", C), ScanMode::Blocked,
                          Discretization::ZohExact, 64);
  double max_diff = 0.0;
  for (Index i = 0; i < ys.value().numel(); ++i)
    max_diff = std::max(max_diff, std::abs(ys.value().data()[i] - yb.value().data()[i]));
  CHECK(max_diff <= 1e-10);
}

TEST_CASE("grad_check: scan primitive over a length-8 sequence") {
  Rng rng(42);
  for (Discretization disc : {Discretization::ZohExact, Discretization::Euler}) {
    for (ScanMode mode : {ScanMode::Sequential, ScanMode::Blocked}) {
      Graph g;
      Var u = g.input("u", random_tensor({8, 2}, rng), true);
      Var dt = g.input("dt", random_tensor({8, 2}, rng, 0.05, 0.8), true);
      Var A = g.input("A", random_tensor({2, 3}, rng, -2.0, -0.2), true);
      Var B = g.input("B", random_tensor({8, 3}, rng), true);
      Var C = g.input("C", random_tensor({8, 3}, rng), true);
      Var y = selective_scan(u, dt, A, B, C, mode, disc, 3);
      Var f = reduce_sum(mul(y, y));
      check_grads(g, f);
    }
  }
}

TEST_CASE("detach: gradient blocked, frozen values under grad_check") {
  Graph g;
  Var x = g.input("x", Tensor::scalar(2.0), true);
  Var d = detach(mul(x, x));
  Var f = mul(d, x);  // f = 4 * x under the frozen linearization
  g.backward(f);
  CHECK(x.grad().value() == doctest::Approx(4.0).epsilon(1e-12));
  check_grads(g, f, 1e-6);
}

TEST_CASE("determinism: identical graphs give bit-identical outputs") {
  auto build = [](Graph& g) {
    Rng rng(99);
    Var x = g.input("x", random_tensor({6, 6}, rng), true);
    Var w = g.input("w", random_tensor({6, 6}, rng), true);
    Var y = reduce_sum(softmax(matmul(silu(x), layer_norm(w))));
    g.mark_output("y", y);
  };
  Graph a, b;
  build(a);
  build(b);
  CHECK(a.output("y").value().value() == b.output("y").value().value());
  a.backward(a.output("y"));
  b.backward(b.output("y"));
  for (int i = 0; i < a.size(); ++i)
    if (a.node(i).requires_grad && a.node(i).grad.numel() > 0)
      CHECK(a.node(i).grad.data()[0] == b.node(i).grad.data()[0]);
}

TEST_CASE("linearity: gradient of summed copies equals summed gradients") {
  ParamStore store;
  ad::Parameter& w = store.create("w", Tensor::from_vector({2}, {1.5, -0.5}));
  // two separate graphs accumulating into the same parameter
  Graph g1;
  g1.backward(reduce_sum(mul(g1.param(w), g1.param(w))));
  g1.accumulate_param_grads();
  Graph g2;
  g2.backward(reduce_sum(affine(g2.param(w), 3.0, 0.0)));
  g2.accumulate_param_grads();
  // one graph computing the sum
  Graph g3;
  Var wv = g3.param(w);
  g3.backward(add(reduce_sum(mul(wv, wv)), reduce_sum(affine(wv, 3.0, 0.0))));
  for (Index i = 0; i < 2; ++i)
    CHECK(w.grad.data()[i] == doctest::Approx(g3.node(wv.id).grad.data()[i]).epsilon(1e-14));
}

TEST_CASE("rebinding inputs reruns the tape") {
  Graph g;
  Var x = g.input("x", Tensor::scalar(3.0));
  Var y = mul(x, x);
  g.mark_output("y", y);
  auto out = evaluate_graph(g, {{"x", Tensor::scalar(5.0)}});
  CHECK(out.at("y").value() == doctest::Approx(25.0));
  CHECK_THROWS(g.bind("x", Tensor::from_vector({2}, {1, 2})));
  CHECK_THROWS(g.bind("nope", Tensor::scalar(1.0)));
}

TEST_CASE("errors: shape mismatches name the op and both shapes") {
  Graph g;
  Var a = g.input("a", Tensor::zeros({2, 3}));
  Var b = g.input("b", Tensor::zeros({4, 5}));
  try {
    matmul(a, b);
    FAIL("expected a shape error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x5]") != std::string::npos);
  }
  CHECK_THROWS(add(a, b));
  CHECK_THROWS(concat({a, b}, 0));
  Var x = g.input("x", Tensor::zeros({3, 5, 1}));
  CHECK_THROWS(avg_pool2d(x, 2));
  Var k = g.input("k", Tensor::zeros({2, 2, 1, 1}));
  CHECK_THROWS(conv2d(x, k, g.input("bias", Tensor::zeros({1})), Pad::Zero));
}

TEST_CASE("errors: non-scalar backward seed, log domain") {
  Graph g;
  Var x = g.input("x", Tensor::from_vector({2}, {1, 2}), true);
  Var y = mul(x, x);
  CHECK_THROWS(g.backward(y));
  Graph g2;
  Var z = g2.input("z", Tensor::from_vector({2}, {1.0, -1.0}));
  CHECK_THROWS(ad::log(z));
}

TEST_CASE("adamw: decoupled decay and NaN rejection") {
  ParamStore store;
  ad::Parameter& w = store.create("w", Tensor::from_vector({3}, {1.0, -2.0, 0.5}));
  AdamW::Config cfg;
  cfg.lr = 1e-2;
  cfg.weight_decay = 0.0;
  AdamW opt0(cfg);
  w.zero_grad();
  opt0.step(store.all());
  CHECK(w.value.data()[0] == 1.0);
  CHECK(w.value.data()[1] == -2.0);

  cfg.weight_decay = 0.1;
  AdamW opt1(cfg);
  w.value = Tensor::from_vector({3}, {1.0, -2.0, 0.5});
  w.zero_grad();
  opt1.step(store.all());
  const double scale = 1.0 - cfg.lr * cfg.weight_decay;
  CHECK(w.value.data()[0] == doctest::Approx(1.0 * scale).epsilon(1e-14));
  CHECK(w.value.data()[1] == doctest::Approx(-2.0 * scale).epsilon(1e-14));
  CHECK(w.value.data()[2] == doctest::Approx(0.5 * scale).epsilon(1e-14));

  // descent on f(x) = x^2 from x = 1
  ParamStore store2;
  ad::Parameter& x = store2.create("x", Tensor::scalar(1.0));
  AdamW opt2(AdamW::Config{});
  Graph g;
  Var xv = g.param(x);
  g.backward(mul(xv, xv));
  g.accumulate_param_grads();
  opt2.step(store2.all());
  CHECK(x.value.value() < 1.0);

  x.grad.data()[0] = std::nan("");
  const double before = x.value.value();
  CHECK_THROWS(opt2.step(store2.all()));
  CHECK(x.value.value() == before);
}

TEST_CASE("lr_schedule: staircase decay") {
  CHECK(lr_schedule(0) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(lr_schedule(4) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(lr_schedule(5) == doctest::Approx(8e-5).epsilon(1e-15));
  CHECK(lr_schedule(10) == doctest::Approx(6.4e-5).epsilon(1e-15));
  CHECK_THROWS(lr_schedule(-1));
}

TEST_CASE("checkpoint: round trip is bit exact") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "xmpr_ckpt_test.bin").string();
  ParamStore store;
  Rng rng(61);
  store.create("backbone.w", random_tensor({3, 4}, rng));
  store.create("head.b", random_tensor({7}, rng));
  store.create("scalar", Tensor::scalar(-0.75));
  save_checkpoint(path, store.all());

  auto loaded = load_checkpoint(path);
  CHECK(loaded.size() == 3);
  for (auto* p : store.all()) {
    const Tensor& t = loaded.at(p->name);
    REQUIRE(t.same_shape(p->value));
    for (Index i = 0; i < t.numel(); ++i) CHECK(t.data()[i] == p->value.data()[i]);
  }

  ParamStore other;
  other.create("backbone.w", Tensor::zeros({3, 4}));
  other.create("head.b", Tensor::zeros({7}));
  other.create("scalar", Tensor::zeros({}));
  load_checkpoint_into(path, other);
  CHECK(other.get("scalar").value.value() == -0.75);

  ParamStore wrong;
  wrong.create("backbone.w", Tensor::zeros({4, 3}));
  wrong.create("head.b", Tensor::zeros({7}));
  wrong.create("scalar", Tensor::zeros({}));
  CHECK_THROWS(load_checkpoint_into(path, wrong));

  std::FILE* f = std::fopen(path.c_str(), "wb");
  std::fputs("not a checkpoint", f);
  std::fclose(f);
  CHECK_THROWS(load_checkpoint(path));
  fs::remove(path);
}
