#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "satloc/kernels.hpp"
#include "satloc/ops.hpp"
#include "satloc/optim.hpp"
#include "support/gradcheck.hpp"

using namespace satloc;
using satloc::testing::grad_check;
using satloc::testing::random_tensor;

namespace {

Tensord t2(std::size_t r, std::size_t c, std::vector<double> v, bool grad = false) {
  return Tensord::from({r, c}, std::move(v), grad);
}

constexpr double kGradTol = 1e-4;

}  // namespace

TEST_CASE("matmul examples") {
  auto eye = t2(2, 2, {1, 0, 0, 1});
  auto col = t2(2, 1, {3, 4});
  auto y = ops::matmul(eye, col);
  CHECK(y.shape() == Shape{2, 1});
  CHECK(y.at(0) == 3);
  CHECK(y.at(1) == 4);

  auto a = t2(2, 2, {1, 2, 3, 4});
  auto b = t2(2, 1, {5, 6});
  auto z = ops::matmul(a, b);
  CHECK(z.at(0) == 17);
  CHECK(z.at(1) == 39);

  CHECK_THROWS_AS(ops::matmul(a, t2(3, 1, {1, 2, 3})), DimensionError);
}

TEST_CASE("gradient of sum(A x B) wrt A is ones x B^T") {
  std::mt19937 rng(1);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  backward(ops::sum(ops::matmul(a, b)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k)
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(b.at(k * 2) + b.at(k * 2 + 1)).epsilon(1e-12));
}

TEST_CASE("softmax_lastdim examples") {
  auto u = ops::softmax_lastdim(Tensord::from({3}, {0, 0, 0}));
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  auto big = ops::softmax_lastdim(Tensorf::from({2}, {1000.f, 0.f}));
  CHECK(std::isfinite(big.at(0)));
  CHECK(big.at(0) == doctest::Approx(1.0f));
  CHECK(big.at(1) == doctest::Approx(0.0f));

  auto l = ops::softmax_lastdim(Tensord::from({2}, {std::log(2.0), std::log(1.0)}));
  CHECK(l.at(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(l.at(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("softmax rows are distributions for random inputs") {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng() % 5, cols = 1 + rng() % 40;
    auto x = random_tensor<float>({rows, cols}, rng, 10.0, false);
    auto y = ops::softmax_lastdim(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        const float v = y.at(r * cols + c);
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        s += v;
      }
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("cross_entropy_from_logits examples") {
  auto uniform = Tensord::full({196}, 0.25);
  CHECK(ops::cross_entropy_from_logits(uniform, 17).item() ==
        doctest::Approx(5.278114659230517).epsilon(1e-12));

  std::vector<double> v(5, 0.0);
  v[2] = 60.0;
  CHECK(ops::cross_entropy_from_logits(Tensord::from({5}, v), 2).item() < 1e-20);

  CHECK(ops::cross_entropy_from_logits(Tensord::from({2}, {0, 0}), 0).item() ==
        doctest::Approx(std::numbers::ln2).epsilon(1e-15));

  CHECK_THROWS_AS(ops::cross_entropy_from_logits(Tensord::from({2}, {0, 0}), 2), IndexError);
}

TEST_CASE("conv_transpose2d of a 1x1 input with a 2x2 ones kernel replicates the input") {
  auto x = Tensord::from({1, 1, 1, 1}, {3.5});
  auto w = Tensord::full({1, 1, 2, 2}, 1.0);
  auto y = ops::conv_transpose2d(x, w, Tensord{}, 2, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (double v : y.data()) CHECK(v == 3.5);
}

TEST_CASE("layernorm of a constant vector returns the bias") {
  auto x = Tensord::full({1, 6}, 4.25);
  auto g = Tensord::from({6}, {1, 2, 3, 4, 5, 6});
  auto b = Tensord::from({6}, {-1, 0.5, 2, 3, -7, 0});
  auto y = ops::layernorm(x, g, b);
  for (std::size_t i = 0; i < 6; ++i) CHECK(y.at(i) == b.at(i));
}

TEST_CASE("gather_rows picks rows in the given order") {
  auto eye = t2(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const std::vector<std::size_t> idx{2, 0};
  auto y = ops::gather_rows(eye, std::span<const std::size_t>(idx));
  CHECK(y.shape() == Shape{2, 3});
  CHECK(std::vector<double>(y.data().begin(), y.data().end()) ==
        std::vector<double>{0, 0, 1, 1, 0, 0});
  const std::vector<std::size_t> bad{3};
  CHECK_THROWS_AS(ops::gather_rows(eye, std::span<const std::size_t>(bad)), IndexError);
}

TEST_CASE("backward examples") {
  auto w = Tensord::from({3}, {0.3, -2, 5}, true);
  backward(ops::sum(w));
  for (double g : w.grad()) CHECK(g == 1.0);

  auto w2 = Tensord::from({2}, {1, 2}, true);
  backward(ops::sum(ops::mul(w2, w2)));
  CHECK(w2.grad()[0] == 2.0);
  CHECK(w2.grad()[1] == 4.0);

  CHECK_THROWS_AS(backward(ops::mul(w2, w2)), ContractError);
}

TEST_CASE("tape orders inputs before consumers and fills each leaf once") {
  auto a = Tensord::from({2}, {1, 2}, true);
  auto b = Tensord::from({2}, {3, 4}, true);
  auto c = ops::mul(a, b);
  auto loss = ops::sum(ops::add(c, a));  // a is used twice
  auto tape = Tape<double>::record(loss);
  const auto names = tape.op_names();
  REQUIRE(names.size() == 5);
  CHECK(std::string(names.back()) == "sum");
  tape.backward();
  CHECK(a.grad()[0] == 4.0);  // b + 1
  CHECK(a.grad()[1] == 5.0);
  CHECK(b.grad()[0] == 1.0);
  CHECK(b.grad()[1] == 2.0);
}

TEST_CASE("finite-difference gradient checks for every differentiable op") {
  std::mt19937 rng(2024);
  auto check = [](const char* name, std::vector<Tensord> leaves, std::function<Tensord()> f) {
    const auto r = grad_check(std::move(leaves), f);
    INFO(name << ": " << r.worst);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_error < kGradTol);
  };
  // Weighted sums keep every output element's gradient distinct.
  auto probe = [&rng](const Tensord& y) {
    auto w = random_tensor(y.shape(), rng, 1.0, false);
    return [w](const Tensord& out) { return ops::sum(ops::mul(out, w)); };
  };

  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t m = 2 + trial, k = 3 + trial, n = 2 + 2 * trial;
    auto a = random_tensor({m, k}, rng);
    auto b = random_tensor({k, n}, rng);
    auto bias = random_tensor({n}, rng);
    auto x3 = random_tensor({2, m, k}, rng);
    {
      auto p = probe(ops::matmul(a, b));
      check("matmul", {a, b}, [&] { return p(ops::matmul(a, b)); });
    }
    {
      auto p = probe(ops::linear(x3, b, bias));
      check("linear", {x3, b, bias}, [&] { return p(ops::linear(x3, b, bias)); });
    }
    {
      auto p = probe(ops::transpose(a));
      check("transpose", {a}, [&] { return p(ops::transpose(a)); });
    }
    {
      auto c = random_tensor({m, k}, rng);
      auto p = probe(a);
      check("add/sub/mul", {a, c}, [&] { return p(ops::mul(ops::add(a, c), ops::sub(a, c))); });
      check("scale/mean", {a}, [&] { return ops::mean(ops::scale(ops::mul(a, a), 0.7)); });
    }
    {
      auto p = probe(a);
      check("softmax", {a}, [&] { return p(ops::softmax_lastdim(a)); });
      check("log_softmax", {a}, [&] { return p(ops::log_softmax_lastdim(a)); });
    }
    {
      std::vector<std::int64_t> tg(m);
      std::vector<double> wt(m);
      for (std::size_t r = 0; r < m; ++r) {
        tg[r] = r == 1 ? -1 : static_cast<std::int64_t>(rng() % k);
        wt[r] = 0.5 + 0.25 * static_cast<double>(r);
      }
      check("cross_entropy_rows", {a}, [&] {
        return ops::cross_entropy_rows(a, std::span<const std::int64_t>(tg), std::span<const double>(wt));
      });
      auto soft = ops::softmax_lastdim(random_tensor({m, k}, rng, 1.0, false));
      std::vector<double> st(soft.data().begin(), soft.data().end());
      check("soft_cross_entropy_rows", {a}, [&] {
        return ops::soft_cross_entropy_rows(a, std::span<const double>(st), std::span<const double>(wt));
      });
      auto row = random_tensor({k}, rng);
      check("cross_entropy_from_logits", {row},
            [&] { return ops::cross_entropy_from_logits(row, k - 1); });
    }
    {
      auto logits = random_tensor({k}, rng);
      check("entropy(softmax)", {logits},
            [&] { return ops::entropy(ops::softmax_lastdim(logits)); });
    }
    {
      auto g = random_tensor({k}, rng);
      auto bb = random_tensor({k}, rng);
      auto p = probe(x3);
      check("layernorm", {x3, g, bb}, [&] { return p(ops::layernorm(x3, g, bb)); });
      check("gelu", {x3}, [&] { return p(ops::gelu(x3)); });
      check("l2_normalize", {x3}, [&] { return p(ops::l2_normalize_lastdim(x3)); });
    }
    {
      const std::vector<std::size_t> idx{1, 0, 1};
      auto p = probe(ops::gather_rows(a, std::span<const std::size_t>(idx)));
      check("gather_rows", {a},
            [&] { return p(ops::gather_rows(a, std::span<const std::size_t>(idx))); });
      auto c = random_tensor({1, k}, rng);
      auto pc = probe(ops::concat_rows<double>({a, c}));
      check("concat_rows", {a, c}, [&] { return pc(ops::concat_rows<double>({a, c})); });
      auto d = random_tensor({m, 2}, rng);
      auto pl = probe(ops::concat_lastdim(a, d));
      check("concat_lastdim", {a, d}, [&] { return pl(ops::concat_lastdim(a, d)); });
      auto pm = probe(ops::mean_axis0(x3));
      check("mean_axis0", {x3}, [&] { return pm(ops::mean_axis0(x3)); });
      auto pr = probe(ops::reshape(x3, {2 * m, k}));
      check("reshape", {x3}, [&] { return pr(ops::reshape(x3, {2 * m, k})); });
    }
    {
      const std::size_t stride = 1 + trial % 2, pad = trial % 2;
      auto img = random_tensor({2, 2, 5, 4}, rng);
      auto w = random_tensor({3, 2, 3, 2}, rng);
      auto cb = random_tensor({3}, rng);
      auto p = probe(ops::conv2d(img, w, cb, stride, pad));
      check("conv2d", {img, w, cb}, [&] { return p(ops::conv2d(img, w, cb, stride, pad)); });
      auto wt = random_tensor({2, 3, 2, 3}, rng);
      auto tb = random_tensor({3}, rng);
      auto pt = probe(ops::conv_transpose2d(img, wt, tb, stride, pad));
      check("conv_transpose2d", {img, wt, tb},
            [&] { return pt(ops::conv_transpose2d(img, wt, tb, stride, pad)); });
    }
    {
      const std::size_t nq = 3 + trial, nk = 2 + trial, d = 4, heads = 2;
      auto q = random_tensor({2, nq, d}, rng);
      auto kk = random_tensor({2, nk, d}, rng);
      auto v = random_tensor({2, nk, d}, rng);
      std::vector<std::uint8_t> mask(2 * nq * nk);
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i % 3) != 0;
      auto p = probe(ops::attention(q, kk, v, heads, {}));
      check("attention", {q, kk, v}, [&] { return p(ops::attention(q, kk, v, heads, {})); });
      check("masked attention", {q, kk, v}, [&] {
        return p(ops::attention(q, kk, v, heads, std::span<const std::uint8_t>(mask)));
      });
    }
  }
}

TEST_CASE("identical inputs produce bit-identical losses") {
  auto run = [] {
    std::mt19937 rng(99);
    auto x = random_tensor({2, 6, 8}, rng);
    auto w = random_tensor({8, 8}, rng);
    auto y = ops::attention(ops::linear(x, w, Tensord{}), x, x, 2, {});
    return ops::mean(ops::gelu(y)).item();
  };
  CHECK(run() == run());
}

TEST_CASE("adamw_step examples") {
  AdamWConfig cfg;
  {
    cfg.weight_decay = 0.0;
    std::vector<Tensord> p{Tensord::from({2}, {0.5, -1.5}, true)};
    p[0].mutable_grad();  // zero gradient
    auto st = OptimizerState<double>::like(p, 0.1, 0.0);
    adamw_step<double>(p, st, 0.1, cfg);
    CHECK(p[0].at(0) == 0.5);
    CHECK(p[0].at(1) == -1.5);
  }
  {
    std::vector<Tensord> p{Tensord::from({1}, {1.0}, true)};
    p[0].mutable_grad()[0] = 1.0;
    auto st = OptimizerState<double>::like(p, 0.1, 0.0);
    adamw_step<double>(p, st, 0.1, cfg);
    // m_hat = v_hat = 1, so the step is lr / (1 + eps).
    CHECK(p[0].at(0) == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
    CHECK(st.step == 1);
  }
  {
    cfg.weight_decay = 0.1;
    std::vector<Tensord> p{Tensord::from({2}, {2.0, -4.0}, true)};
    p[0].mutable_grad();
    auto st = OptimizerState<double>::like(p, 0.01, 0.1);
    adamw_step<double>(p, st, 0.01, cfg);
    CHECK(p[0].at(0) == 2.0 - 0.01 * 0.1 * 2.0);
    CHECK(p[0].at(1) == -4.0 + 0.01 * 0.1 * 4.0);
  }
  {
    std::vector<Tensord> p{Tensord::from({2}, {1.0, 1.0}, true)};
    p[0].mutable_grad()[1] = std::nan("");
    auto st = OptimizerState<double>::like(p, 0.1, 0.1);
    CHECK_THROWS_AS(adamw_step<double>(p, st, 0.1, cfg), NumericError);
    CHECK(p[0].at(0) == 1.0);
    CHECK(st.step == 0);
  }
}

TEST_CASE("cosine_lr examples") {
  CHECK(cosine_lr(10, 110, 0.5, 10) == 0.5);
  CHECK(cosine_lr(110, 110, 0.5, 10) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(cosine_lr(60, 110, 0.5, 10) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(cosine_lr(5, 110, 0.5, 10) == doctest::Approx(0.25));
  CHECK(cosine_lr(0, 100, 0.5, 0) == 0.5);
}

TEST_CASE("serial and parallel kernels agree") {
  std::mt19937 rng(5);
  std::normal_distribution<double> nd;
  auto fill = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = nd(rng);
    return v;
  };
  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb) {
      const std::size_t m = 37, n = 29, k = 41;
      auto a = fill(m * k), b = fill(k * n), c1 = fill(m * n);
      auto c2 = c1;
      const std::size_t lda = ta ? m : k, ldb = tb ? k : n;
      kernels::serial::gemm<double>(ta, tb, m, n, k, 0.5, a.data(), lda, b.data(), ldb, 0.25, c1.data(), n);
      kernels::parallel::gemm<double>(ta, tb, m, n, k, 0.5, a.data(), lda, b.data(), ldb, 0.25, c2.data(), n);
      for (std::size_t i = 0; i < c1.size(); ++i) CHECK(c1[i] == doctest::Approx(c2[i]).epsilon(1e-12));
    }

  kernels::ConvGeometry g{2, 3, 4, 9, 7, 3, 2, 2, 1};
  auto in = fill(g.batch * g.in_channels * g.in_h * g.in_w);
  auto w = fill(g.out_channels * g.in_channels * g.kernel_h * g.kernel_w);
  auto bias = fill(g.out_channels);
  const std::size_t out_n = g.batch * g.out_channels * g.out_h() * g.out_w();
  std::vector<double> o1(out_n), o2(out_n);
  kernels::serial::conv2d_forward<double>(g, in, w, bias, o1);
  kernels::parallel::conv2d_forward<double>(g, in, w, bias, o2);
  for (std::size_t i = 0; i < out_n; ++i) CHECK(o1[i] == doctest::Approx(o2[i]).epsilon(1e-12));
  auto go = fill(out_n);
  std::vector<double> gi1(in.size()), gi2(in.size()), gw1(w.size()), gw2(w.size());
  kernels::serial::conv2d_backward_input<double>(g, go, w, gi1);
  kernels::parallel::conv2d_backward_input<double>(g, go, w, gi2);
  kernels::serial::conv2d_backward_weight<double>(g, in, go, gw1);
  kernels::parallel::conv2d_backward_weight<double>(g, in, go, gw2);
  for (std::size_t i = 0; i < gi1.size(); ++i) CHECK(gi1[i] == doctest::Approx(gi2[i]).epsilon(1e-12));
  for (std::size_t i = 0; i < gw1.size(); ++i) CHECK(gw1[i] == doctest::Approx(gw2[i]).epsilon(1e-12));

  kernels::AttentionGeometry ag{2, 5, 7, 8, 2};
  auto q = fill(2 * 5 * 8), kk = fill(2 * 7 * 8), v = fill(2 * 7 * 8);
  std::vector<std::uint8_t> mask(2 * 5 * 7, 1);
  for (std::size_t j = 0; j < 7; ++j) mask[j] = 0;  // row 0 of batch 0 fully masked
  mask[7 + 3] = 0;
  std::vector<double> p1(2 * 2 * 5 * 7), p2(p1.size()), a1(q.size()), a2(q.size());
  const auto f1 = kernels::serial::attention_forward<double>(ag, q, kk, v, mask, p1, a1);
  const auto f2 = kernels::parallel::attention_forward<double>(ag, q, kk, v, mask, p2, a2);
  CHECK(f1 == 2);  // one row, two heads
  CHECK(f2 == f1);
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i] == doctest::Approx(p2[i]).epsilon(1e-12));
  for (std::size_t i = 0; i < a1.size(); ++i) CHECK(a1[i] == doctest::Approx(a2[i]).epsilon(1e-12));
  CHECK(p2[3] == doctest::Approx(1.0 / 7.0).epsilon(0.99));  // fallback row is a distribution
  CHECK(p2[7 + 3] == 0.0);
}
