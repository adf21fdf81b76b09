#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "cromac/latent.hpp"
#include "cromac/verify.hpp"

using namespace cromac;

namespace {
DiagonalGaussian gauss(std::initializer_list<double> mean, std::initializer_list<double> var) {
  return DiagonalGaussian(Tensor::vec(mean), Tensor::vec(var));
}
}  // namespace

TEST_CASE("poe_fuse closed form") {
  DiagonalGaussian two_std = poe_fuse({gauss({0}, {1}), gauss({0}, {1})});
  CHECK(two_std.mean[0] == Catch::Approx(0.0));
  CHECK(two_std.variance[0] == Catch::Approx(0.5));

  DiagonalGaussian f = poe_fuse({gauss({1}, {1}), gauss({3}, {1})});
  CHECK(f.mean[0] == Catch::Approx(2.0));
  CHECK(f.variance[0] == Catch::Approx(0.5));

  std::vector<DiagonalGaussian> same(5, gauss({0.7, -1.2}, {0.9, 2.0}));
  DiagonalGaussian n5 = poe_fuse(same);
  CHECK(n5.mean[0] == Catch::Approx(0.7));
  CHECK(n5.mean[1] == Catch::Approx(-1.2));
  CHECK(n5.variance[0] == Catch::Approx(0.9 / 5));
  CHECK(n5.variance[1] == Catch::Approx(2.0 / 5));

  CHECK_THROWS_AS(poe_fuse({}), ContractError);
  Tensor bad_var = Tensor::vec({0.0});
  Tensor m = Tensor::vec({0.0});
  CHECK_THROWS_AS(DiagonalGaussian(m, bad_var), DomainError);
}

TEST_CASE("poe_fuse order invariance and precision additivity") {
  Rng rng(71);
  for (int c = 0; c < 200; ++c) {
    const std::size_t n = 2 + rng.uniform_int(6);
    std::vector<DiagonalGaussian> experts;
    for (std::size_t j = 0; j < n; ++j) {
      Tensor mean = Tensor::zeros(3), var = Tensor::zeros(3);
      mean.fill_uniform(rng, -2, 2);
      for (auto& v : var.data) v = rng.uniform(0.05, 3.0);
      experts.emplace_back(mean, var);
    }
    DiagonalGaussian a = poe_fuse(experts);
    std::vector<DiagonalGaussian> rev(experts.rbegin(), experts.rend());
    DiagonalGaussian b = poe_fuse(rev);
    for (int i = 0; i < 3; ++i) {
      CHECK(std::abs(a.mean[i] - b.mean[i]) < 1e-10 * std::max(1.0, std::abs(a.mean[i])));
      CHECK(std::abs(a.variance[i] - b.variance[i]) < 1e-10);
      double prec = 0;
      for (const auto& e : experts) prec += 1.0 / e.variance[i];
      CHECK(1.0 / a.variance[i] == Catch::Approx(prec).epsilon(1e-10));
    }
  }
  SuiteResult r = verify_poe(300, 5);
  INFO(r.detail);
  CHECK(r.pass);
}

TEST_CASE("encode_state deterministic mode and zeroed heads") {
  StateVae vae(4, 6, 3);  // zero weights everywhere
  Rng rng(1);
  Tensor s = Tensor::vec({0.5, -0.5, 1.0, 0.0});
  auto [z, post] = encode_state(s, vae, /*sample=*/false, rng);
  for (int i = 0; i < 3; ++i) {
    CHECK(z[i] == post.mean[i]);
    CHECK(post.mean[i] == 0.0);
    CHECK(post.variance[i] == Catch::Approx(std::log(2.0)));  // variance map at 0
  }
  Rng r1(42), r2(42);
  auto [z1, p1] = encode_state(s, vae, true, r1);
  auto [z2, p2] = encode_state(s, vae, true, r2);
  for (int i = 0; i < 3; ++i) CHECK(z1[i] == z2[i]);
  CHECK_THROWS_AS(encode_state(Tensor::vec({1.0}), vae, false, rng), ShapeError);
}

namespace {
// posterior pinned to the standard normal: zero mean head, variance head bias
// solving variance_map(b) = 1
StateVae prior_posterior_vae(std::size_t state_w, std::size_t z_w) {
  StateVae vae(state_w, 4, z_w);
  const double b = std::log(std::exp(1.0) - 1.0);  // softplus(b) = 1
  for (auto& v : vae.var_head.b.data) v = b;
  return vae;
}
}  // namespace

TEST_CASE("state_vae_loss components") {
  Rng rng(2);
  // posterior = prior and perfect reconstruction of the zero state -> 0
  StateVae vae = prior_posterior_vae(3, 2);
  Tensor s = Tensor::zeros(3);
  CHECK(std::abs(state_vae_loss(s, vae, rng)) < 1e-12);

  // per-dimension KL of N(1,1) against the prior is 0.5
  DiagonalGaussian p = DiagonalGaussian(Tensor::vec({1, 1, 1}), Tensor::vec({1, 1, 1}));
  DiagonalGaussian prior(Tensor::zeros(3), Tensor::full(3, 1.0));
  CHECK(gaussian_kl(p, prior) == Catch::Approx(1.5));

  // reconstruction error e with zero KL -> 0.5 * |e|^2
  StateVae vae2 = prior_posterior_vae(2, 2);
  vae2.decoder.layers.back().b = Tensor::vec({0.3, -0.4});  // recon = e, state = 0
  const double expected = 0.5 * (0.3 * 0.3 + 0.4 * 0.4);
  CHECK(state_vae_loss(Tensor::zeros(2), vae2, rng) == Catch::Approx(expected));
}

TEST_CASE("fuse_messages against sequential fusion") {
  Rng rng(8);
  MessageEncoder enc(5, 3);
  enc.init(rng, 0.4);
  std::vector<Tensor> msgs;
  for (int j = 0; j < 3; ++j) {
    Tensor m = Tensor::zeros(5);
    m.fill_uniform(rng, -1, 1);
    msgs.push_back(m);
  }
  auto [z, fused] = fuse_messages(msgs, enc, /*sample=*/false, rng);
  for (int i = 0; i < 3; ++i) CHECK(z[i] == fused.mean[i]);

  // single message: fused equals that message's posterior
  auto [z1, one] = fuse_messages({msgs[0]}, enc, false, rng);
  DiagonalGaussian direct = enc.encode(msgs[0]);
  for (int i = 0; i < 3; ++i) {
    CHECK(one.mean[i] == Catch::Approx(direct.mean[i]));
    CHECK(one.variance[i] == Catch::Approx(direct.variance[i]));
  }

  // identical messages: same mean, variance / N
  auto [zn, rep] = fuse_messages({msgs[0], msgs[0], msgs[0], msgs[0]}, enc, false, rng);
  for (int i = 0; i < 3; ++i) {
    CHECK(rep.mean[i] == Catch::Approx(direct.mean[i]));
    CHECK(rep.variance[i] == Catch::Approx(direct.variance[i] / 4.0));
  }

  // three random messages match pairwise folding
  std::vector<DiagonalGaussian> experts;
  for (const auto& m : msgs) experts.push_back(enc.encode(m));
  DiagonalGaussian pair01 = poe_fuse({experts[0], experts[1]});
  DiagonalGaussian folded = poe_fuse({pair01, experts[2]});
  for (int i = 0; i < 3; ++i) {
    CHECK(fused.mean[i] == Catch::Approx(folded.mean[i]).epsilon(1e-10));
    CHECK(fused.variance[i] == Catch::Approx(folded.variance[i]).epsilon(1e-10));
  }

  CHECK_THROWS_AS(fuse_messages({}, enc, false, rng), ContractError);
}

TEST_CASE("batched fusion equals the list path") {
  Rng rng(12);
  MessageEncoder enc(4, 3);
  enc.init(rng, 0.5);
  Tensor rows(3, 4);
  rows.fill_uniform(rng, -1, 1);
  Tape t(false);
  GaussianVar experts = enc.encode_t(t, t.constant(rows));
  GaussianVar fused = poe_fuse_rows(experts, 3);
  std::vector<Tensor> msgs;
  for (int j = 0; j < 3; ++j) {
    Tensor m = Tensor::zeros(4);
    for (int c = 0; c < 4; ++c) m[c] = rows.at(j, c);
    msgs.push_back(m);
  }
  auto [z, ref] = fuse_messages(msgs, enc, false, rng);
  for (int i = 0; i < 3; ++i) {
    CHECK(t.value(fused.mean)[i] == Catch::Approx(ref.mean[i]).epsilon(1e-12));
    CHECK(t.value(fused.variance)[i] == Catch::Approx(ref.variance[i]).epsilon(1e-12));
  }
}

TEST_CASE("message_kl_loss values and direction") {
  DiagonalGaussian a(Tensor::zeros(4), Tensor::full(4, 1.0));
  CHECK(message_kl_loss(a, a) == Catch::Approx(0.0));

  DiagonalGaussian b(Tensor::full(4, 1.0), Tensor::full(4, 1.0));
  CHECK(message_kl_loss(a, b) == Catch::Approx(2.0));  // 0.5 per dimension
  CHECK(message_kl_loss(a, b, KlDirection::MessageToState) == Catch::Approx(2.0));

  Rng rng(55);
  for (int c = 0; c < 300; ++c) {
    Tensor m1 = Tensor::zeros(3), v1 = Tensor::zeros(3), m2 = Tensor::zeros(3),
           v2 = Tensor::zeros(3);
    m1.fill_uniform(rng, -2, 2);
    m2.fill_uniform(rng, -2, 2);
    for (auto& v : v1.data) v = rng.uniform(0.05, 3.0);
    for (auto& v : v2.data) v = rng.uniform(0.05, 3.0);
    const double kl = message_kl_loss(DiagonalGaussian(m1, v1), DiagonalGaussian(m2, v2));
    CHECK(kl >= -1e-12);
    if (m1.data == m2.data && v1.data == v2.data) CHECK(kl == Catch::Approx(0.0));
  }
}

TEST_CASE("encoder weights stay clamped through updates") {
  Rng rng(9);
  MessageEncoder enc(6, 4);
  enc.init(rng, 0.1);
  CHECK(enc.weights_within(-0.1, 0.1));
  ParamList params;
  enc.collect(params, "menc");
  AdamState adam(params, 0.05);  // deliberately large steps
  Tensor msgs(4, 6);
  msgs.fill_uniform(rng, -1, 1);
  for (int step = 0; step < 25; ++step) {
    Tape t(true);
    GaussianVar g = enc.encode_t(t, t.constant(msgs));
    Var loss = sum_all(add(square(g.mean), square(g.variance)));
    zero_grads(params);
    t.backward(loss);
    adam_step(params, adam);
    enc.clamp_weights(-0.1, 0.1);
    REQUIRE(enc.weights_within(-0.1, 0.1));
  }
}
