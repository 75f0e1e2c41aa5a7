#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "aircoop/checkpoint.hpp"
#include "aircoop/tensor.hpp"
#include "oracles.hpp"

using namespace aircoop;

namespace {
Tensor rand_t(const Shape& s, std::uint64_t seed, bool rg = true) {
  Rng rng(seed);
  return Tensor::randn(s, rng, 1.0, rg);
}
}  // namespace

TEST_CASE("matmul identity and zero") {
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto v = Tensor::from_data({2, 1}, {3, 4});
  auto r = matmul(eye, v);
  CHECK(r.data()[0] == 3.0);
  CHECK(r.data()[1] == 4.0);

  auto a = Tensor::from_data({1, 1}, {2});
  auto z = Tensor::from_data({1, 1}, {0});
  CHECK(matmul(a, z).item() == 0.0);
}

TEST_CASE("matmul shape error names both shapes") {
  auto a = Tensor::zeros({3, 4});
  auto b = Tensor::zeros({5, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[3,4]"), std::invalid_argument);
}

TEST_CASE("matmul gradients vs finite differences") {
  auto a = rand_t({3, 4}, 11);
  auto b = rand_t({4, 2}, 12);
  auto res = oracle::finite_diff_check([&] { return sum(mul(matmul(a, b), matmul(a, b))); },
                                       {a, b});
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("matmul broadcast batch dims") {
  auto a = rand_t({2, 3, 4}, 13);
  auto b = rand_t({4, 2}, 14);
  auto c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 3, 2});
  auto res = oracle::finite_diff_check([&] { return sum(square(matmul(a, b))); }, {a, b});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("conv2d pointwise identity and zero kernel") {
  auto x = rand_t({1, 5, 5}, 21, false);
  auto k1 = Tensor::from_data({1, 1, 1, 1}, {1.0});
  auto y = conv2d(x, k1, Tensor(), 1, 0);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);

  auto k0 = Tensor::zeros({2, 1, 3, 3});
  auto y0 = conv2d(x, k0, Tensor(), 1, 1);
  for (double v : y0.data()) CHECK(v == 0.0);
}

TEST_CASE("conv2d shape contract and groups error") {
  auto x = Tensor::zeros({4, 8, 8});
  auto k = Tensor::zeros({8, 2, 3, 3});
  auto y = conv2d(x, k, Tensor(), 2, 1);
  CHECK(y.shape() == Shape{8, 8, 8});
  CHECK_THROWS_AS(conv2d(x, k, Tensor(), 3, 1), std::invalid_argument);
  auto keven = Tensor::zeros({4, 4, 2, 2});
  CHECK_THROWS_AS(conv2d(x, keven, Tensor(), 1, 0), std::invalid_argument);
}

TEST_CASE("conv2d depthwise 7x7 gradients") {
  auto x = rand_t({3, 8, 8}, 31);
  auto k = rand_t({3, 1, 7, 7}, 32);
  auto b = rand_t({3}, 33);
  auto res = oracle::finite_diff_check(
      [&] { return mean(square(conv2d(x, k, b, 3, 3))); }, {x, k, b});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("conv2d grouped gradients") {
  auto x = rand_t({4, 6, 6}, 34);
  auto k = rand_t({6, 2, 3, 3}, 35);
  auto b = rand_t({6}, 36);
  auto res = oracle::finite_diff_check(
      [&] { return mean(square(conv2d(x, k, b, 2, 1))); }, {x, k, b});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("layer_norm constant input and affine") {
  auto x = Tensor::full({2, 8}, 3.25);
  auto gamma = Tensor::full({8}, 1.0);
  auto beta = Tensor::zeros({8});
  auto y = layer_norm(x, gamma, beta);
  for (double v : y.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

  auto g0 = Tensor::zeros({8});
  auto bc = Tensor::full({8}, 2.5);
  auto y2 = layer_norm(rand_t({2, 8}, 41, false), g0, bc);
  for (double v : y2.data()) CHECK(v == 2.5);
}

TEST_CASE("layer_norm statistics and gradients") {
  auto x = rand_t({5, 16}, 42);
  auto gamma = rand_t({16}, 43);
  auto beta = rand_t({16}, 44);
  auto y = layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}), 1e-12);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 16; ++i) m += y.data()[r * 16 + i];
    m /= 16;
    for (std::size_t i = 0; i < 16; ++i) {
      double d = y.data()[r * 16 + i] - m;
      v += d * d;
    }
    v /= 16;
    CHECK(std::fabs(m) < 1e-6);
    CHECK(std::fabs(v - 1.0) < 1e-6);
  }
  auto res = oracle::finite_diff_check(
      [&] { return sum(square(layer_norm(x, gamma, beta))); }, {x, gamma, beta});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("softmax symmetry, stability, gradient") {
  auto u = softmax(Tensor::from_data({3}, {0, 0, 0}));
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3));

  auto s = softmax(Tensor::from_data({2}, {1000.0, 0.0}));
  CHECK(s.data()[0] == doctest::Approx(1.0));
  CHECK(s.data()[1] == doctest::Approx(0.0));
  CHECK(std::isfinite(s.data()[0]));

  auto x = rand_t({4, 7}, 51);
  auto y = softmax(x);
  for (std::size_t r = 0; r < 4; ++r) {
    double rs = 0;
    for (std::size_t i = 0; i < 7; ++i) rs += y.data()[r * 7 + i];
    CHECK(std::fabs(rs - 1.0) < 1e-12);
  }
  auto w = rand_t({4, 7}, 52, false);
  auto res = oracle::finite_diff_check([&] { return sum(mul(softmax(x), w)); }, {x});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("bilinear_resample identity, constant, oracle") {
  auto x = rand_t({2, 4, 5}, 61, false);
  auto y = bilinear_resample(x, 4, 5);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);

  auto c = Tensor::full({1, 3, 3}, 7.5);
  auto cy = bilinear_resample(c, 9, 2);
  for (double v : cy.data()) CHECK(v == doctest::Approx(7.5).epsilon(1e-15));

  auto ramp = Tensor::from_data({1, 2, 2}, {0, 1, 2, 3});
  auto up = bilinear_resample(ramp, 4, 4);
  auto ref = oracle::bilinear_resize_scalar({0, 1, 2, 3}, 2, 2, 4, 4);
  for (std::size_t i = 0; i < 16; ++i) CHECK(up.data()[i] == doctest::Approx(ref[i]).epsilon(1e-15));

  CHECK_THROWS_AS(bilinear_resample(ramp, 0, 4), std::invalid_argument);
}

TEST_CASE("bilinear_resample gradient") {
  auto x = rand_t({2, 3, 4}, 62);
  auto res = oracle::finite_diff_check(
      [&] { return sum(square(bilinear_resample(x, 5, 7))); }, {x});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("clamp identity, boundary, flat-region gradient") {
  auto x = Tensor::from_data({3}, {1.0, -2.0, 3.0});
  auto y = clamp(x, -5.0, 5.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(y.data()[i] == x.data()[i]);

  auto big = Tensor::from_data({1}, {100.0});
  CHECK(clamp(big, -51.2, 51.2).item() == 51.2);

  CHECK_THROWS_AS(clamp(x, 2.0, -2.0), std::invalid_argument);

  // element 0 inside the clip window, element 1 deep in the flat region:
  // its gradient must be exactly 0 and FD (perturbation stays in the flat
  // region at h=1e-5) agrees.
  auto z = Tensor::from_data({2}, {0.5, 9.0}, true);
  auto res = oracle::finite_diff_check([&] { return sum(square(clamp(z, -1.0, 1.0))); }, {z});
  CHECK(res.max_rel_err < 1e-3);
  z.zero_grad();
  auto loss = sum(clamp(z, -1.0, 1.0));
  loss.backward();
  CHECK(z.grad()[0] == 1.0);
  CHECK(z.grad()[1] == 0.0);
}

TEST_CASE("clamp subgradient exactly at the boundary is zero") {
  auto z = Tensor::from_data({1}, {1.0}, true);
  auto loss = sum(clamp(z, -1.0, 1.0));
  loss.backward();
  CHECK(z.grad()[0] == 0.0);
}

TEST_CASE("global_avg_pool") {
  auto one = Tensor::from_data({1, 4}, {1, 2, 3, 4});
  auto g = global_avg_pool(one);
  for (std::size_t i = 0; i < 4; ++i) CHECK(g.data()[i] == one.data()[i]);

  auto opp = Tensor::from_data({2, 3}, {1, -2, 5, -1, 2, -5});
  auto z = global_avg_pool(opp);
  for (double v : z.data()) CHECK(v == 0.0);

  auto x = rand_t({6, 8}, 71);
  auto y = global_avg_pool(x);
  for (std::size_t d = 0; d < 8; ++d) {
    double m = 0;
    for (std::size_t l = 0; l < 6; ++l) m += x.data()[l * 8 + d];
    CHECK(y.data()[d] == doctest::Approx(m / 6).epsilon(1e-15));
  }
  x.zero_grad();
  sum(global_avg_pool(x)).backward();
  for (double gv : x.grad()) CHECK(gv == doctest::Approx(1.0 / 6).epsilon(1e-15));

  CHECK_THROWS_AS(global_avg_pool(Tensor::zeros({4})), std::invalid_argument);
}

TEST_CASE("backward basics") {
  auto x = rand_t({3, 3}, 81);
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);

  auto y = rand_t({2}, 82);
  auto unrelated = rand_t({2}, 83);
  sum(square(unrelated)).backward();
  for (double g : y.grad()) CHECK(g == 0.0);

  CHECK_THROWS_AS(rand_t({2, 2}, 84).backward(), std::invalid_argument);
}

TEST_CASE("backward accumulation doubles exactly") {
  auto x = rand_t({4}, 85);
  auto loss = sum(mul(x, x));
  loss.backward();
  std::vector<double> g1(x.grad().begin(), x.grad().end());
  loss.backward();
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == 2.0 * g1[i]);
}

TEST_CASE("determinism: same seed, bit-identical values and grads") {
  auto run = [] {
    auto x = rand_t({5, 6, 6}, 99);
    auto k = rand_t({2, 5, 3, 3}, 100);
    auto loss = mean(square(conv2d(x, k, Tensor(), 1, 1)));
    loss.backward();
    std::vector<double> out(x.grad().begin(), x.grad().end());
    out.push_back(loss.item());
    return out;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("elementwise ops gradcheck") {
  auto x = rand_t({3, 4}, 101);
  auto y = rand_t({3, 4}, 102);
  auto res = oracle::finite_diff_check(
      [&] {
        auto t = add(mul(sigmoid(x), gelu(y)), softplus(sub(x, y)));
        return sum(mul(t, t));
      },
      {x, y});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("smooth_l1 values and kink-neighborhood gradients") {
  auto p = Tensor::from_data({2}, {0.5, 2.0});
  auto t = Tensor::zeros({2});
  auto l = smooth_l1(p, t, 1.0);
  CHECK(l.data()[0] == doctest::Approx(0.125));
  CHECK(l.data()[1] == doctest::Approx(1.5));

  auto p2 = Tensor::from_data({2}, {0.9, 1.1}, true);
  auto res = oracle::finite_diff_check([&] { return sum(smooth_l1(p2, t, 1.0)); }, {p2});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("broadcast add/mul with reduction backward") {
  auto x = rand_t({3, 4}, 111);
  auto b = rand_t({4}, 112);
  auto res = oracle::finite_diff_check([&] { return sum(square(add(x, b))); }, {x, b});
  CHECK(res.max_rel_err < 1e-3);

  auto c = rand_t({3, 1}, 113);
  auto res2 = oracle::finite_diff_check([&] { return sum(square(mul(x, c))); }, {x, c});
  CHECK(res2.max_rel_err < 1e-3);
}

TEST_CASE("shape ops gradcheck") {
  auto x = rand_t({2, 3, 4}, 121);
  auto res = oracle::finite_diff_check(
      [&] {
        auto p = permute(x, {2, 0, 1});
        auto r = reshape(p, {4, 6});
        auto s = slice_axis0(r, 1, 2);
        auto cc = concat_axis0(s, s);
        return sum(square(cc));
      },
      {x});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("maximum gradient routing") {
  auto a = Tensor::from_data({3}, {1.0, 5.0, 2.0}, true);
  auto b = Tensor::from_data({3}, {2.0, 4.0, 2.0}, true);
  sum(maximum(a, b)).backward();
  CHECK(a.grad()[0] == 0.0);
  CHECK(b.grad()[0] == 1.0);
  CHECK(a.grad()[1] == 1.0);
  CHECK(b.grad()[1] == 0.0);
  CHECK(a.grad()[2] == 1.0);  // tie goes to the first operand
  CHECK(b.grad()[2] == 0.0);
}

TEST_CASE("affine_warp: identity, integral shift, gradient") {
  auto x = rand_t({2, 6, 6}, 131, false);
  AffineMap2 id;
  auto y = affine_warp(x, id);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);

  AffineMap2 shift;  // out(x,y) <- src(x+2, y), zero fill at the border
  shift.tx = 2.0;
  auto s = affine_warp(x, shift);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t yy = 0; yy < 6; ++yy)
      for (std::size_t xx = 0; xx < 6; ++xx) {
        double expect = xx + 2 < 6 ? x.data()[(c * 6 + yy) * 6 + xx + 2] : 0.0;
        CHECK(s.data()[(c * 6 + yy) * 6 + xx] == expect);
      }

  auto g = rand_t({1, 5, 5}, 132);
  AffineMap2 rot{0.8, 0.3, 1.1, -0.3, 0.8, 0.7};
  auto res = oracle::finite_diff_check([&] { return sum(square(affine_warp(g, rot))); }, {g});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("requires_grad off skips graph building") {
  auto x = rand_t({4}, 141, false);
  auto y = square(x);
  CHECK_FALSE(y.requires_grad());
  NoGradGuard ng;
  auto p = rand_t({4}, 142, true);
  auto q = square(p);
  CHECK_FALSE(q.requires_grad());
}

TEST_CASE("zero-extent shapes are rejected") {
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), std::invalid_argument);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  Rng rng(7);
  std::vector<CheckpointEntry> entries;
  entries.push_back({"enc.w", {3, 2}, false, {0.1, -0.2, 1e-300, M_PI, -0.0, 5e300}});
  entries.push_back({"head.b", {4}, true, {rng.normal(), rng.normal(), rng.normal(), rng.normal()}});
  std::string path = "ckpt_test.bin";
  save_checkpoint(path, entries);
  auto back = load_checkpoint(path);
  REQUIRE(back.size() == entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    CHECK(back[i].name == entries[i].name);
    CHECK(back[i].shape == entries[i].shape);
    CHECK(back[i].frozen == entries[i].frozen);
    REQUIRE(back[i].data.size() == entries[i].data.size());
    for (std::size_t j = 0; j < entries[i].data.size(); ++j) {
      std::uint64_t ba, bb;
      std::memcpy(&ba, &back[i].data[j], 8);
      std::memcpy(&bb, &entries[i].data[j], 8);
      CHECK(ba == bb);
    }
  }
  std::remove(path.c_str());
}
