#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "cromac/bounds.hpp"
#include "cromac/verify.hpp"

using namespace cromac;

TEST_CASE("epsilon_ball construction") {
  IntervalBounds b = epsilon_ball(Tensor::vec({0.3}), 0.1);
  CHECK(b.lower[0] == Catch::Approx(0.2));
  CHECK(b.upper[0] == Catch::Approx(0.4));
  CHECK(b.average()[0] == Catch::Approx(0.3));
  CHECK(b.residual()[0] == Catch::Approx(0.1));

  IntervalBounds point = epsilon_ball(Tensor::vec({1.5, -2.0}), 0.0);
  CHECK(point.lower[0] == point.upper[0]);
  CHECK(point.lower[1] == point.upper[1]);

  Tensor msg = Tensor::zeros(16);
  IntervalBounds hall = epsilon_ball(msg, 0.5);  // hallway attack budget
  for (int i = 0; i < 16; ++i) CHECK(hall.residual()[i] == Catch::Approx(0.5));

  CHECK_THROWS_AS(epsilon_ball(msg, -0.1), ContractError);
}

TEST_CASE("ibp_affine matches corner enumeration") {
  AffineLayer l(1, 2);
  l.W = Tensor::mat({{1, -2}});
  l.b = Tensor::vec({0});
  IntervalBounds in(Tensor::vec({0, 0}), Tensor::vec({1, 1}));
  IntervalBounds out = ibp_affine(in, l);
  // brute force over the 4 corners of [0,1]^2
  double lo = 1e300, hi = -1e300;
  for (int c = 0; c < 4; ++c) {
    const double x0 = c & 1 ? 1.0 : 0.0, x1 = c & 2 ? 1.0 : 0.0;
    const double v = x0 - 2.0 * x1;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(out.lower[0] == Catch::Approx(lo));  // -2
  CHECK(out.upper[0] == Catch::Approx(hi));  // 1

  AffineLayer ident(2, 2);
  ident.W = Tensor::mat({{1, 0}, {0, 1}});
  ident.b = Tensor::vec({0, 0});
  IntervalBounds in2(Tensor::vec({-1, 2}), Tensor::vec({0, 3}));
  IntervalBounds same = ibp_affine(in2, ident);
  for (int i = 0; i < 2; ++i) {
    CHECK(same.lower[i] == Catch::Approx(in2.lower[i]));
    CHECK(same.upper[i] == Catch::Approx(in2.upper[i]));
  }
}

TEST_CASE("ibp_affine with zero residual equals the forward pass") {
  Rng rng(21);
  AffineLayer l(3, 5);
  l.init(rng);
  Tensor x = Tensor::zeros(5);
  x.fill_uniform(rng, -2, 2);
  IntervalBounds out = ibp_affine(epsilon_ball(x, 0.0), l);
  Tensor y = linear_forward(x, l);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(out.lower[i] - y[i]) < 1e-12);
    CHECK(std::abs(out.upper[i] - y[i]) < 1e-12);
  }
}

TEST_CASE("ibp_monotonic endpoint mapping") {
  IntervalBounds a(Tensor::vec({-1}), Tensor::vec({2}));
  IntervalBounds r = ibp_monotonic(a, [](double v) { return v > 0 ? v : 0.0; });
  CHECK(r.lower[0] == 0.0);
  CHECK(r.upper[0] == 2.0);

  IntervalBounds b(Tensor::vec({1}), Tensor::vec({3}));
  IntervalBounds rp = ibp_monotonic(b, [](double v) { return v > 0 ? v : 0.0; });
  CHECK(rp.lower[0] == 1.0);
  CHECK(rp.upper[0] == 3.0);

  IntervalBounds z(Tensor::vec({0}), Tensor::vec({0}));
  IntervalBounds sp = ibp_monotonic(z, detail::softplus_scalar);
  CHECK(sp.lower[0] == Catch::Approx(std::log(2.0)));
  CHECK(sp.upper[0] == Catch::Approx(std::log(2.0)));
}

TEST_CASE("encoder_bounds identity heads and point budget") {
  MessageEncoder enc(1, 1);
  enc.mean_head.W = Tensor::mat({{1}});
  enc.mean_head.b = Tensor::vec({0});
  enc.var_head.W = Tensor::mat({{1}});
  enc.var_head.b = Tensor::vec({0});
  EncoderBounds eb = encoder_bounds({Tensor::vec({0.5})}, 0.1, enc);
  CHECK(eb.mean[0].lower[0] == Catch::Approx(0.4));
  CHECK(eb.mean[0].upper[0] == Catch::Approx(0.6));

  EncoderBounds point = encoder_bounds({Tensor::vec({0.5})}, 0.0, enc);
  DiagonalGaussian g = enc.encode(Tensor::vec({0.5}));
  CHECK(point.mean[0].lower[0] == Catch::Approx(g.mean[0]));
  CHECK(point.variance[0].lower[0] == Catch::Approx(g.variance[0]));
}

TEST_CASE("encoder_bounds contain sampled perturbed encodings") {
  Rng rng(31);
  MessageEncoder enc(16, 8);
  enc.mean_head.W.fill_uniform(rng, -0.1, 0.1);  // clamp-range weights
  enc.mean_head.b.fill_uniform(rng, -0.1, 0.1);
  enc.var_head.W.fill_uniform(rng, -0.1, 0.1);
  enc.var_head.b.fill_uniform(rng, -0.1, 0.1);
  std::vector<Tensor> msgs;
  for (int j = 0; j < 3; ++j) {
    Tensor m = Tensor::zeros(16);
    m.fill_uniform(rng, -1, 1);
    msgs.push_back(m);
  }
  EncoderBounds eb = encoder_bounds(msgs, 0.5, enc);
  for (int s = 0; s < 1000; ++s) {
    const std::size_t j = rng.uniform_int(3);
    Tensor p = msgs[j];
    for (auto& v : p.data) v += rng.uniform(-0.5, 0.5);
    DiagonalGaussian g = enc.encode(p);
    REQUIRE(eb.mean[j].contains(g.mean, 1e-9));
    REQUIRE(eb.variance[j].contains(g.variance, 1e-9));
  }
}

TEST_CASE("poe_harmonic_bounds envelope") {
  // exact variances 1 and 2 with zero-width boxes
  std::vector<IntervalBounds> vb{IntervalBounds(Tensor::vec({1}), Tensor::vec({1})),
                                 IntervalBounds(Tensor::vec({2}), Tensor::vec({2}))};
  std::vector<IntervalBounds> mb{IntervalBounds(Tensor::vec({0}), Tensor::vec({0})),
                                 IntervalBounds(Tensor::vec({0}), Tensor::vec({0}))};
  PoeEnvelope env = poe_harmonic_bounds(vb, mb);
  CHECK(env.variance.lower[0] == Catch::Approx(0.5));
  CHECK(env.variance.upper[0] == Catch::Approx(1.0));
  const double exact = 1.0 / (1.0 / 1.0 + 1.0 / 2.0);  // 2/3
  CHECK(env.variance.contains(Tensor::vec({exact})));

  // identical experts make the envelope tight at v / N
  std::vector<IntervalBounds> same(4, IntervalBounds(Tensor::vec({0.8}), Tensor::vec({0.8})));
  std::vector<IntervalBounds> zeros(4, IntervalBounds(Tensor::vec({0}), Tensor::vec({0})));
  PoeEnvelope tight = poe_harmonic_bounds(same, zeros);
  CHECK(tight.variance.lower[0] == Catch::Approx(0.8 / 4));
  CHECK(tight.variance.upper[0] == Catch::Approx(0.8 / 4));

  std::vector<IntervalBounds> bad{IntervalBounds(Tensor::vec({0}), Tensor::vec({1}))};
  std::vector<IntervalBounds> bad_means{IntervalBounds(Tensor::vec({0}), Tensor::vec({0}))};
  CHECK_THROWS_AS(poe_harmonic_bounds(bad, bad_means), DomainError);
  CHECK_THROWS_AS(poe_harmonic_bounds({}, {}), ContractError);
}

TEST_CASE("integration_error_bound direct evaluation") {
  std::vector<IntervalBounds> zb{IntervalBounds(Tensor::vec({1.0}), Tensor::vec({1.5})),
                                 IntervalBounds(Tensor::vec({1.2}), Tensor::vec({2.0}))};
  CHECK(integration_error_bound(zb) == Catch::Approx((2.0 - 1.0) / 2.0));

  std::vector<IntervalBounds> degen(3, IntervalBounds(Tensor::vec({0.7}), Tensor::vec({0.7})));
  CHECK(integration_error_bound(degen) == Catch::Approx(0.0));

  CHECK_THROWS_AS(integration_error_bound({}), ContractError);
}

TEST_CASE("q_value_bounds single affine head") {
  Mlp head({2, 2});  // (tau, z) -> 2 actions, single affine layer
  head.layers[0].W = Tensor::mat({{0, 1}, {0, -1}});  // tau ignored
  head.layers[0].b = Tensor::vec({0, 0});
  PerturbationBudget budget(0.5, 1.0);
  IntervalBounds qb = q_value_bounds(Tensor::vec({0.0}), Tensor::vec({0.5}), budget, head);
  CHECK(qb.lower[0] == Catch::Approx(0.0));
  CHECK(qb.upper[0] == Catch::Approx(1.0));
  CHECK(qb.lower[1] == Catch::Approx(-1.0));
  CHECK(qb.upper[1] == Catch::Approx(0.0));

  PerturbationBudget none(0.0, 1.0);
  IntervalBounds point = q_value_bounds(Tensor::vec({0.0}), Tensor::vec({0.5}), none, head);
  Tensor q = qhead_forward(Tensor::vec({0.0}), Tensor::vec({0.5}), head);
  for (int a = 0; a < 2; ++a) {
    CHECK(point.lower[a] == Catch::Approx(q[a]));
    CHECK(point.upper[a] == Catch::Approx(q[a]));
  }
}

TEST_CASE("q_value_bounds two-layer containment") {
  Rng rng(77);
  Mlp head({5, 6, 3});
  for (auto& l : head.layers) {
    l.W.fill_uniform(rng, -1, 1);
    l.b.fill_uniform(rng, -0.5, 0.5);
  }
  Tensor tau = Tensor::zeros(2), z = Tensor::zeros(3);
  tau.fill_uniform(rng, -1, 1);
  z.fill_uniform(rng, -1, 1);
  PerturbationBudget budget(0.2, 2.5);
  IntervalBounds qb = q_value_bounds(tau, z, budget, head);
  for (int s = 0; s < 1000; ++s) {
    Tensor zp = z;
    for (auto& v : zp.data) v += rng.uniform(-0.5, 0.5);
    REQUIRE(qb.contains(qhead_forward(tau, zp, head), 1e-9));
  }
}

TEST_CASE("widening epsilon never shrinks intervals") {
  Rng rng(13);
  MessageEncoder enc(6, 4);
  enc.mean_head.W.fill_uniform(rng, -0.3, 0.3);
  enc.var_head.W.fill_uniform(rng, -0.3, 0.3);
  std::vector<Tensor> msgs;
  for (int j = 0; j < 3; ++j) {
    Tensor m = Tensor::zeros(6);
    m.fill_uniform(rng, -1, 1);
    msgs.push_back(m);
  }
  for (double eps : {0.0, 0.05, 0.2}) {
    EncoderBounds narrow = encoder_bounds(msgs, eps, enc);
    EncoderBounds wide = encoder_bounds(msgs, eps + 0.1, enc);
    for (int j = 0; j < 3; ++j)
      for (std::size_t d = 0; d < 4; ++d) {
        CHECK(wide.mean[j].lower[d] <= narrow.mean[j].lower[d] + 1e-12);
        CHECK(wide.mean[j].upper[d] >= narrow.mean[j].upper[d] - 1e-12);
        CHECK(wide.variance[j].lower[d] <= narrow.variance[j].lower[d] + 1e-12);
        CHECK(wide.variance[j].upper[d] >= narrow.variance[j].upper[d] - 1e-12);
      }
  }
}

TEST_CASE("harmonic mean of positives stays inside the scaled envelope") {
  Rng rng(41);
  for (int c = 0; c < 1000; ++c) {
    const std::size_t n = 2 + rng.uniform_int(5);
    std::vector<double> v(n);
    double vmin = 1e300, vmax = 0;
    double prec = 0;
    for (auto& x : v) {
      x = rng.uniform(0.01, 5.0);
      vmin = std::min(vmin, x);
      vmax = std::max(vmax, x);
      prec += 1.0 / x;
    }
    const double fused = 1.0 / prec;
    CHECK(fused >= vmin / static_cast<double>(n) - 1e-12);
    CHECK(fused <= vmax / static_cast<double>(n) + 1e-12);
  }
}

TEST_CASE("verify suites: ibp and bounds oracles (small run)") {
  SuiteResult ibp = verify_ibp(300, 19);
  INFO(ibp.detail);
  CHECK(ibp.pass);
  SuiteResult hb = verify_bounds(200, 23);
  INFO(hb.detail);
  CHECK(hb.pass);
}
