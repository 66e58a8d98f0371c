#include <cmath>
#include <numeric>

#include "doctest.h"
#include "satloc/errors.hpp"
#include "satloc/objectives.hpp"
#include "support/gradcheck.hpp"

using namespace satloc;
using satloc::testing::grad_check;
using satloc::testing::random_tensor;

namespace {

// Prototype-major formulation: Q = P^T, rows to 1/K, columns to 1/B, scaled by B.
std::vector<double> sinkhorn_transposed(const std::vector<double>& p, std::size_t B, std::size_t K,
                                        std::size_t iters) {
  std::vector<double> q(K * B);
  double total = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k) total += (q[k * B + b] = p[b * K + k]);
  for (auto& v : q) v /= total;
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t k = 0; k < K; ++k) {
      double s = 0;
      for (std::size_t b = 0; b < B; ++b) s += q[k * B + b];
      for (std::size_t b = 0; b < B; ++b) q[k * B + b] /= s * static_cast<double>(K);
    }
    for (std::size_t b = 0; b < B; ++b) {
      double s = 0;
      for (std::size_t k = 0; k < K; ++k) s += q[k * B + b];
      for (std::size_t k = 0; k < K; ++k) q[k * B + b] /= s * static_cast<double>(B);
    }
  }
  std::vector<double> out(B * K);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k) out[b * K + k] = q[k * B + b] * static_cast<double>(B);
  return out;
}

std::vector<double> random_positive(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = 0.01 + uniform01(rng);
  return v;
}

PositionTargets targets_for(std::vector<std::int64_t> t, std::size_t views = 1) {
  PositionTargets pt;
  pt.num_views = views;
  pt.target = std::move(t);
  const std::size_t per_view = pt.target.size() / views;
  pt.weight.assign(pt.target.size(), 0.0);
  pt.sample.assign(pt.target.size(), 0);
  for (std::size_t v = 0; v < views; ++v) {
    std::size_t valid = 0;
    for (std::size_t k = 0; k < per_view; ++k) valid += pt.target[v * per_view + k] >= 0;
    for (std::size_t k = 0; k < per_view; ++k)
      if (pt.target[v * per_view + k] >= 0)
        pt.weight[v * per_view + k] = 1.0 / static_cast<double>(valid * views);
    pt.omega += valid;
  }
  return pt;
}

double log_sum_exp(const double* x, std::size_t n) {
  double m = *std::max_element(x, x + n), s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i] - m);
  return m + std::log(s);
}

}  // namespace

TEST_CASE("position targets weight each view equally") {
  Correspondence a{{0, -1, 2, 3}, {0, 2, 3}}, b{{-1, -1, -1, 1}, {3}}, c{{-1, -1, -1, -1}, {}};
  std::vector<Correspondence> views{a, b, c, a};
  std::vector<std::int32_t> pos;
  for (int v = 0; v < 4; ++v)
    for (int p : {3, 2, 1, 0}) pos.push_back(p);
  auto t = make_position_targets(views, 2, pos, 4);
  CHECK(t.omega == 3 + 1 + 0 + 3);
  CHECK(t.target[0] == 3);
  CHECK(t.target[2] == -1);
  CHECK(t.weight[0] == doctest::Approx(1.0 / 12));
  CHECK(t.weight[4] == doctest::Approx(1.0 / 4));
  CHECK(t.weight[8] == 0.0);
  CHECK(t.sample[4] == 0);
  CHECK(t.sample[12] == 1);
  CHECK(std::accumulate(t.weight.begin(), t.weight.end(), 0.0) == doctest::Approx(0.75));
}

TEST_CASE("position loss examples") {
  SUBCASE("uniform logits over 196 positions") {
    std::vector<std::int64_t> tgt(196);
    std::iota(tgt.begin(), tgt.end(), 0);
    auto r = position_loss(Tensord::zeros({196, 196}), targets_for(tgt));
    CHECK(r.loss.item() == doctest::Approx(std::log(196.0)).epsilon(1e-12));
    CHECK(r.loss.item() == doctest::Approx(5.278114659230517));
    CHECK(*r.acc_at_1 == doctest::Approx(1.0 / 196));
  }
  SUBCASE("perfect one-hot logits") {
    std::vector<double> l(4 * 5, 0.0);
    std::vector<std::int64_t> tgt{4, 1, 0, 3};
    for (std::size_t r = 0; r < 4; ++r) l[r * 5 + tgt[r]] = 60.0;
    auto res = position_loss(Tensord::from({4, 5}, l), targets_for(tgt));
    CHECK(res.loss.item() < 1e-20);
    CHECK(*res.acc_at_1 == 1.0);
  }
  SUBCASE("omega = {0} with three-way logits") {
    auto logits = Tensord::from({2, 3}, {1.0, 2.0, 0.5, 9.0, -9.0, 4.0});
    auto res = position_loss(logits, targets_for({2, -1}));
    const double expected = -(0.5 - std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5)));
    CHECK(res.loss.item() == doctest::Approx(expected).epsilon(1e-14));
    CHECK(*res.acc_at_1 == 0.0);
    CHECK(res.omega == 1);
  }
  SUBCASE("empty omega") {
    auto res = position_loss(Tensord::zeros({3, 4}), targets_for({-1, -1, -1}));
    CHECK(res.loss.item() == 0.0);
    CHECK_FALSE(res.acc_at_1.has_value());
  }
  SUBCASE("per-view averaging against direct evaluation") {
    Rng rng(1);
    auto logits = random_tensor<double>({6, 4}, rng, 2.0, false);
    auto t = targets_for({0, 3, -1, 2, -1, -1}, 2);
    double expected = 0;
    for (std::size_t r = 0; r < 6; ++r) {
      if (t.target[r] < 0) continue;
      const double* row = logits.data().data() + r * 4;
      const double ce = log_sum_exp(row, 4) - row[t.target[r]];
      expected += ce / (r < 3 ? 2.0 : 1.0) / 2.0;
    }
    CHECK(position_loss(logits, t).loss.item() == doctest::Approx(expected).epsilon(1e-13));
  }
}

TEST_CASE("acc@1 is invariant under increasing transforms") {
  Rng rng(2);
  auto logits = random_tensor<double>({50, 7}, rng, 1.0, false);
  std::vector<std::int64_t> tgt(50);
  for (auto& t : tgt) t = static_cast<std::int64_t>(uniform_index(rng, 7));
  tgt[3] = -1;
  std::vector<double> base(logits.data().begin(), logits.data().end()), warped = base;
  for (auto& v : warped) v = std::exp(3.0 * v) + v * v * v;
  auto a = accuracy_at_1(base, 7, tgt), b = accuracy_at_1(warped, 7, tgt);
  REQUIRE(a.has_value());
  CHECK(*a == *b);
  CHECK(*a == *position_loss(logits, targets_for(tgt)).acc_at_1);
}

TEST_CASE("sinkhorn-knopp") {
  Rng rng(3);
  SUBCASE("uniform input is a fixed point") {
    std::vector<double> u(6 * 4, 0.25);
    for (std::size_t it : {1, 3, 10}) CHECK(sinkhorn_knopp(u, 6, 4, it) == u);
  }
  SUBCASE("K = 1 gives ones") {
    auto q = sinkhorn_knopp(random_positive(5, rng), 5, 1, 3);
    for (double v : q) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("rows sum to one after any iteration count") {
    for (std::size_t it : {0, 1, 2, 3, 7, 25}) {
      auto q = sinkhorn_knopp(random_positive(8 * 4, rng), 8, 4, it);
      for (std::size_t r = 0; r < 8; ++r) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += q[r * 4 + k];
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    }
  }
  SUBCASE("columns converge to B/K") {
    auto q = sinkhorn_knopp(random_positive(8 * 4, rng), 8, 4, 100);
    for (std::size_t k = 0; k < 4; ++k) {
      double s = 0;
      for (std::size_t r = 0; r < 8; ++r) s += q[r * 4 + k];
      CHECK(std::abs(s - 2.0) < 1e-3);
    }
  }
  SUBCASE("matches the prototype-major formulation") {
    for (std::size_t it : {1, 3, 20}) {
      auto p = random_positive(12 * 5, rng);
      auto a = sinkhorn_knopp(p, 12, 5, it), b = sinkhorn_transposed(p, 12, 5, it);
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    }
  }
  SUBCASE("negative input is rejected") {
    std::vector<double> bad{0.5, -0.1};
    CHECK_THROWS_AS(sinkhorn_knopp(bad, 1, 2), ContractError);
    std::vector<double> nan{0.5, std::nan("")};
    CHECK_THROWS_AS(sinkhorn_knopp(nan, 1, 2), NumericError);
  }
}

TEST_CASE("cluster head and pseudo-labels") {
  Rng rng(4);
  SUBCASE("hand-set similarities (1, 0) at tau 0.05") {
    ParamStore<double> store;
    ClusterConfig cfg;
    cfg.prototypes = 2;
    cfg.dim = 2;
    cfg.hidden = 4;
    auto head = ClusterHead<double>::make(store, "ch", 3, cfg, rng);
    auto w2 = store.get("ch.proj.fc2.weight");
    for (auto& v : w2.mutable_data()) v = 0;
    auto b2 = store.get("ch.proj.fc2.bias");
    b2.mutable_data()[0] = 1.0;
    b2.mutable_data()[1] = 0.0;
    auto protos = store.get("ch.prototypes");
    std::vector<double> eye{1, 0, 0, 1};
    std::copy(eye.begin(), eye.end(), protos.mutable_data().begin());
    auto z_ref = random_tensor<double>({1, 1, 3}, rng, 1.0, false);
    std::vector<std::int32_t> pos{0};
    PositionTargets t = targets_for({0});
    auto labels = pseudo_labels(z_ref, pos, head, t);
    REQUIRE(labels.unique_rows == 1);
    const double e = std::exp(20.0);
    CHECK(labels.pre_sinkhorn[0] == doctest::Approx(e / (e + 1.0)).epsilon(1e-14));
    CHECK(labels.pre_sinkhorn[1] == doctest::Approx(1.0 / (e + 1.0)).epsilon(1e-9));
  }
  SUBCASE("identical reference rows give identical labels") {
    ParamStore<double> store;
    ClusterConfig cfg;
    cfg.prototypes = 16;
    auto head = ClusterHead<double>::make(store, "ch", 8, cfg, rng);
    auto row = random_tensor<double>({1, 1, 8}, rng, 1.0, false);
    std::vector<double> rep;
    for (int i = 0; i < 4; ++i) rep.insert(rep.end(), row.data().begin(), row.data().end());
    auto z = Tensord::from({1, 4, 8}, rep);
    std::vector<std::int32_t> pos{0, 1, 2, 3};
    auto labels = pseudo_labels(z, pos, head, targets_for({0, 1, 2, 3}));
    REQUIRE(labels.unique_rows == 4);
    for (std::size_t u = 1; u < 4; ++u)
      for (std::size_t k = 0; k < 16; ++k) CHECK(labels.pre_sinkhorn[u * 16 + k] == labels.pre_sinkhorn[k]);
  }
  SUBCASE("large temperature flattens the label distribution") {
    ParamStore<double> store;
    ClusterConfig cfg;
    cfg.prototypes = 8;
    cfg.temperature = 1e8;
    auto head = ClusterHead<double>::make(store, "ch", 8, cfg, rng);
    auto z = random_tensor<double>({1, 3, 8}, rng, 1.0, false);
    std::vector<std::int32_t> pos{0, 1, 2};
    auto labels = pseudo_labels(z, pos, head, targets_for({0, 1, 2}));
    for (double p : labels.pre_sinkhorn) CHECK(p == doctest::Approx(1.0 / 8).epsilon(1e-7));
  }
  SUBCASE("ungrouped references average the tokens at a position") {
    ParamStore<double> store;
    ClusterConfig cfg;
    cfg.prototypes = 4;
    auto head = ClusterHead<double>::make(store, "ch", 4, cfg, rng);
    auto z = random_tensor<double>({1, 4, 4}, rng, 1.0, false);  // 2 groups x 2 positions
    std::vector<std::int32_t> pos{0, 1, 0, 1};
    auto labels = pseudo_labels(z, pos, head, targets_for({1}));
    std::vector<double> mean(4);
    for (std::size_t c = 0; c < 4; ++c) mean[c] = 0.5 * (z.at(4 + c) + z.at(12 + c));
    auto direct = head.logits_detached(Tensord::from({1, 4}, mean));
    const double lse = log_sum_exp(direct.data(), 4);
    for (std::size_t k = 0; k < 4; ++k)
      CHECK(labels.pre_sinkhorn[k] == doctest::Approx(std::exp(direct[k] - lse)).epsilon(1e-12));
  }
  SUBCASE("prototype rows stay unit length") {
    ParamStore<double> store;
    auto head = ClusterHead<double>::make(store, "ch", 8, ClusterConfig{}, rng);
    auto p = store.get("ch.prototypes");
    for (auto& v : p.mutable_data()) v *= 3.0;
    head.normalize_prototypes();
    for (std::size_t r = 0; r < p.dim(0); ++r) {
      double n = 0;
      for (std::size_t c = 0; c < p.dim(1); ++c) n += p.at(r * p.dim(1) + c) * p.at(r * p.dim(1) + c);
      CHECK(n == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("cluster loss and mean entropy examples") {
  PseudoLabels labels;
  labels.classes = 2;
  labels.unique_rows = 1;
  labels.row_of = {0};
  SUBCASE("matching one-hot targets") {
    labels.balanced = {1.0, 0.0};
    auto l = cluster_loss(Tensord::from({1, 2}, {80.0, 0.0}), labels, targets_for({0}));
    CHECK(l.item() < 1e-30);
  }
  SUBCASE("uniform targets on K = 2") {
    labels.balanced = {0.5, 0.5};
    auto l = cluster_loss(Tensord::from({1, 2}, {0.3, -1.2}), labels, targets_for({0}));
    const double lse = std::log(std::exp(0.3) + std::exp(-1.2));
    CHECK(l.item() == doctest::Approx(-0.5 * ((0.3 - lse) + (-1.2 - lse))).epsilon(1e-14));
  }
  SUBCASE("entropy of the mean assignment") {
    auto one = Tensord::from({3, 2}, {90, 0, 80, 0, 70, 0});
    CHECK(mean_entropy_regularizer(one, targets_for({0, 0, 0})).item() == doctest::Approx(0.0).epsilon(1e-12));
    auto flat = Tensord::zeros({3, 5});
    CHECK(mean_entropy_regularizer(flat, targets_for({0, 0, 0})).item() ==
          doctest::Approx(std::log(5.0)).epsilon(1e-14));
    // Rows with probabilities (1, 0) and (0.5, 0.5) average to (0.75, 0.25).
    auto mix = Tensord::from({2, 2}, {200.0, 0.0, 0.0, 0.0});
    const double h = -(0.75 * std::log(0.75) + 0.25 * std::log(0.25));
    CHECK(h == doctest::Approx(0.5623).epsilon(1e-4));
    CHECK(mean_entropy_regularizer(mix, targets_for({0, 0})).item() == doctest::Approx(h).epsilon(1e-12));
    // Rows outside omega are excluded.
    CHECK(mean_entropy_regularizer(mix, targets_for({0, -1})).item() == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("combined loss") {
  Rng rng(5);
  auto logits = random_tensor<double>({4, 6}, rng, 1.0, false);
  auto t = targets_for({1, -1, 5, 0});
  auto pos = position_loss(logits, t);
  SUBCASE("cluster loss disabled") {
    auto rep = combined_loss(pos, Tensord(), Tensord(), 1.0);
    CHECK(rep.combined_value == pos.loss.item());
    CHECK(rep.cluster_loss == 0.0);
  }
  SUBCASE("zero losses with a uniform mean assignment") {
    PositionResult<double> zero;
    zero.loss = Tensord::scalar(0.0);
    auto rep = combined_loss(zero, Tensord::scalar(0.0), Tensord::scalar(std::log(7.0)), 1.0);
    CHECK(rep.combined_value == doctest::Approx(-std::log(7.0)));
  }
  SUBCASE("matches separate evaluation of the three terms") {
    auto cl_logits = random_tensor<double>({4, 3}, rng, 1.0, false);
    PseudoLabels labels;
    labels.classes = 3;
    labels.unique_rows = 3;
    labels.row_of = {0, static_cast<std::size_t>(-1), 1, 2};
    labels.balanced = {0.2, 0.3, 0.5, 0.6, 0.3, 0.1, 0.1, 0.1, 0.8};
    auto cl = cluster_loss(cl_logits, labels, t);
    auto ent = mean_entropy_regularizer(cl_logits, t);
    auto rep = combined_loss(pos, cl, ent, 0.7);
    double cl_ref = 0;
    std::vector<double> mean(3, 0.0);
    for (std::size_t r : {0, 2, 3}) {
      const double* row = cl_logits.data().data() + r * 3;
      const double lse = log_sum_exp(row, 3);
      const std::size_t u = labels.row_of[r];
      for (std::size_t k = 0; k < 3; ++k) {
        cl_ref -= t.weight[r] * labels.balanced[u * 3 + k] * (row[k] - lse);
        mean[k] += std::exp(row[k] - lse) / 3.0;
      }
    }
    double ent_ref = 0;
    for (double m : mean) ent_ref -= m * std::log(m);
    CHECK(rep.cluster_loss == doctest::Approx(cl_ref).epsilon(1e-13));
    CHECK(rep.entropy_reg == doctest::Approx(ent_ref).epsilon(1e-13));
    CHECK(rep.combined_value == doctest::Approx(pos.loss.item() + cl_ref - 0.7 * ent_ref).epsilon(1e-13));
    CHECK(rep.to_log_fields().find("acc_at_1=") != std::string::npos);
  }
}

TEST_CASE("loss heads pass finite-difference checks") {
  Rng rng(6);
  ParamStore<double> store;
  auto ph = PositionHead<double>::make(store, "pos", 8, 6, rng);
  ClusterConfig cfg;
  cfg.prototypes = 5;
  cfg.dim = 4;
  auto ch = ClusterHead<double>::make(store, "ch", 8, cfg, rng);
  for (auto& p : store.tensors())
    for (auto& v : p.mutable_data()) v += 0.2 * std::normal_distribution<double>()(rng);
  auto u = random_tensor<double>({5, 8}, rng, 1.0, true);
  auto zq = random_tensor<double>({5, 8}, rng, 1.0, true);
  auto z_ref = random_tensor<double>({1, 6, 8}, rng, 1.0, false);
  std::vector<std::int32_t> ref_pos{0, 1, 2, 3, 4, 5};
  auto t = targets_for({2, 0, -1, 5, 2});
  const auto labels = pseudo_labels(z_ref, ref_pos, ch, t);
  std::vector<Tensord> leaves = store.tensors();
  leaves.push_back(u);
  leaves.push_back(zq);
  auto r = grad_check(leaves, [&] {
    auto pos = position_loss(ph.logits(u), t);
    auto cl_logits = ch.logits(zq);
    return combined_loss(pos, cluster_loss(cl_logits, labels, t), mean_entropy_regularizer(cl_logits, t), 1.0)
        .combined;
  });
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("pseudo-labels carry no gradient") {
  Rng rng(7);
  ParamStore<double> store;
  ClusterConfig cfg;
  cfg.prototypes = 6;
  auto ch = ClusterHead<double>::make(store, "ch", 8, cfg, rng);
  auto zq = random_tensor<double>({3, 8}, rng, 1.0, true);
  auto z_ref = random_tensor<double>({1, 3, 8}, rng, 1.0, true);
  std::vector<std::int32_t> ref_pos{0, 1, 2};
  auto t = targets_for({2, 0, 1});

  auto grads_with = [&](const PseudoLabels& labels) {
    store.zero_grad();
    zq.zero_grad();
    z_ref.zero_grad();
    backward(cluster_loss(ch.logits(zq), labels, t));
    std::vector<double> g;
    for (auto& p : store.tensors())
      if (p.has_grad()) g.insert(g.end(), p.grad().begin(), p.grad().end());
    g.insert(g.end(), zq.grad().begin(), zq.grad().end());
    return g;
  };
  const auto labels = pseudo_labels(z_ref, ref_pos, ch, t);
  const auto g1 = grads_with(labels);
  CHECK_FALSE(z_ref.has_grad());
  PseudoLabels frozen = labels;  // plain copy of values
  const auto g2 = grads_with(frozen);
  CHECK(g1 == g2);
  CHECK_FALSE(z_ref.has_grad());
  const auto g3 = grads_with(pseudo_labels(z_ref, ref_pos, ch, t));
  CHECK(g1 == g3);
}
