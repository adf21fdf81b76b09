#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>

#include "cromac/checkpoint.hpp"
#include "cromac/nn.hpp"
#include "cromac/verify.hpp"

using namespace cromac;

TEST_CASE("linear_forward basics") {
  AffineLayer ident(2, 2);
  ident.W = Tensor::mat({{1, 0}, {0, 1}});
  ident.b = Tensor::vec({0, 0});
  Tensor y = linear_forward(Tensor::vec({3, 4}), ident);
  CHECK(y[0] == 3.0);
  CHECK(y[1] == 4.0);

  AffineLayer l(1, 2);
  l.W = Tensor::mat({{1, -2}});
  l.b = Tensor::vec({0.5});
  CHECK(linear_forward(Tensor::vec({1, 1}), l)[0] == Catch::Approx(-0.5));

  AffineLayer s(1, 1);
  s.W = Tensor::mat({{2}});
  s.b = Tensor::vec({1});
  CHECK(linear_forward(Tensor::vec({0}), s)[0] == 1.0);

  CHECK_THROWS_AS(linear_forward(Tensor::vec({1, 2, 3}), l), ShapeError);
}

TEST_CASE("linear_forward is affine-linear") {
  Rng rng(11);
  AffineLayer l(3, 4);
  l.init(rng);
  Tensor x = Tensor::zeros(4), y = Tensor::zeros(4);
  x.fill_uniform(rng, -2, 2);
  y.fill_uniform(rng, -2, 2);
  const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
  Tensor mixv = Tensor::zeros(4);
  for (int i = 0; i < 4; ++i) mixv[i] = a * x[i] + b * y[i];
  Tensor lhs = linear_forward(mixv, l);
  Tensor fx = linear_forward(x, l), fy = linear_forward(y, l);
  for (int i = 0; i < 3; ++i) {
    const double rhs = a * fx[i] + b * fy[i] - (a + b - 1.0) * l.b[i];
    CHECK(std::abs(lhs[i] - rhs) < 1e-12);
  }
}

TEST_CASE("gru_step zero-weight fixed points") {
  GruCell cell(3, 2);  // all parameters zero
  GruState st{Tensor::zeros(3)};
  GruState next = gru_step(Tensor::vec({0, 0}), st, cell);
  for (int i = 0; i < 3; ++i) CHECK(next.hidden[i] == 0.0);

  GruState v{Tensor::vec({0.4, -0.8, 1.0})};
  GruState half = gru_step(Tensor::vec({5, -3}), v, cell);
  for (int i = 0; i < 3; ++i) CHECK(half.hidden[i] == Catch::Approx(0.5 * v.hidden[i]));

  CHECK_THROWS_AS(gru_step(Tensor::vec({1, 2, 3}), st, cell), ShapeError);
}

TEST_CASE("gru hidden state stays in [-1,1] from a zero start") {
  Rng rng(5);
  GruCell cell(4, 3);
  cell.init(rng);
  GruState st{Tensor::zeros(4)};
  Tensor x = Tensor::zeros(3);
  x.fill_uniform(rng, -1, 1);
  for (int t = 0; t < 60; ++t) {
    st = gru_step(x, st, cell);
    for (int i = 0; i < 4; ++i) {
      CHECK(st.hidden[i] <= 1.0);
      CHECK(st.hidden[i] >= -1.0);
    }
  }
}

TEST_CASE("backward accumulates parameter gradients") {
  Tensor W = Tensor::mat({{0.7, -0.2}});
  Tensor b = Tensor::vec({0.0});
  Tape t(true);
  Var y = linear(t.constant(Tensor::vec({1, 1})), t.param(W), t.param(b));
  Var loss = sum_all(y);
  W.ensure_grad();
  b.ensure_grad();
  t.backward(loss);
  CHECK(W.grad[0] == 1.0);
  CHECK(W.grad[1] == 1.0);
  CHECK(b.grad[0] == 1.0);
}

TEST_CASE("backward on a constant leaves parameters at zero") {
  Tensor W = Tensor::mat({{1.0, 2.0}});
  Tape t(true);
  (void)t.param(W);  // bound but unreachable from the loss
  Var loss = sum_all(t.constant(Tensor::vec({3.0})));
  W.ensure_grad();
  W.zero_grad();
  t.backward(loss);
  CHECK(W.grad[0] == 0.0);
  CHECK(W.grad[1] == 0.0);
}

TEST_CASE("backward of |x|^2") {
  Tape t(true);
  Var x = t.input(Tensor::vec({3.0}));
  Var loss = sum_all(square(x));
  t.backward(loss);
  CHECK(t.grad_of(x)[0] == 6.0);
}

TEST_CASE("backward requires a scalar loss") {
  Tape t(true);
  Var x = t.input(Tensor::vec({1.0, 2.0}));
  CHECK_THROWS_AS(t.backward(x), ContractError);
}

TEST_CASE("deterministic forward passes") {
  auto run = [] {
    Rng rng(123);
    Mlp net({5, 7, 3});
    net.init(rng);
    Tensor x(2, 5);
    x.fill_uniform(rng, -1, 1);
    Tape t(false);
    return t.value(net.forward(t, t.constant(x)));
  };
  Tensor a = run(), b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);  // bitwise
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
  Tensor W = Tensor::mat({{0.5, -0.25}});
  ParamList params{{"w", &W}};
  AdamState adam(params, 5e-4);
  Tensor before = W;
  W.ensure_grad();
  W.zero_grad();
  adam_step(params, adam);
  CHECK(W.data == before.data);
  CHECK(adam.step == 1);
}

TEST_CASE("adam first step moves by about the learning rate") {
  Tensor W = Tensor::vec({1.0, -2.0, 0.3});
  ParamList params{{"w", &W}};
  AdamState adam(params);  // lr 0.0005 default
  CHECK(adam.lr == 0.0005);
  W.ensure_grad();
  W.grad = {0.3, -4.0, 1e-3};
  Tensor before = W;
  adam_step(params, adam);
  for (int i = 0; i < 3; ++i) {
    const double delta = std::abs(W[i] - before[i]);
    CHECK(delta <= 0.0005);
    CHECK(delta >= 0.00049);
    CHECK((W[i] - before[i]) * before.grad[i] < 0.0);  // moves against the gradient
  }
}

TEST_CASE("adam rejects mismatched state") {
  Tensor W = Tensor::vec({1.0});
  ParamList params{{"w", &W}};
  AdamState adam(params);
  Tensor extra = Tensor::vec({1.0, 2.0});
  ParamList wrong{{"w", &extra}};
  CHECK_THROWS_AS(adam_step(wrong, adam), ShapeError);
}

TEST_CASE("finite_diff_check on quadratic, constant and GRU objectives") {
  Rng rng(3);
  AffineLayer l(2, 3);
  l.init(rng);
  Tensor x(4, 3);
  x.fill_uniform(rng, -1, 1);
  ParamList params;
  l.collect(params, "l");
  auto quad = [&](bool with_grad) {
    Tape t(with_grad);
    Var out = sum_all(square(linear_forward(t, t.constant(x), l)));
    const double v = t.value(out)[0];
    if (with_grad) t.backward(out);
    return v;
  };
  CHECK(finite_diff_check(quad, params, 1e-5) <= 1e-8);

  auto constant = [&](bool with_grad) {
    Tape t(with_grad);
    (void)t.param(l.W);
    Var out = sum_all(t.constant(Tensor::vec({2.5})));
    if (with_grad) t.backward(out);
    return t.value(out)[0];
  };
  CHECK(finite_diff_check(constant, params, 1e-5) == 0.0);

  GruCell cell(3, 2);
  cell.init(rng);
  ParamList gparams;
  cell.collect(gparams, "gru");
  std::vector<Tensor> xs;
  for (int s = 0; s < 3; ++s) {
    Tensor xi(2, 2);
    xi.fill_uniform(rng, -1, 1);
    xs.push_back(xi);
  }
  auto gru3 = [&](bool with_grad) {
    Tape t(with_grad);
    Var h = t.constant(Tensor(2, 3));
    for (const auto& xi : xs) h = gru_step(t, t.constant(xi), h, cell);
    Var out = sum_all(square(h));
    const double v = t.value(out)[0];
    if (with_grad) t.backward(out);
    return v;
  };
  CHECK(finite_diff_check(gru3, gparams, 1e-5) <= 1e-4);
}

TEST_CASE("gradients match finite differences across layer types") {
  SuiteResult r = verify_grad(40, 17);
  INFO(r.detail);
  CHECK(r.pass);
}

TEST_CASE("checkpoint round-trip is bit exact") {
  Rng rng(9);
  Mlp net({4, 6, 2});
  net.init(rng);
  ParamList params;
  net.collect(params, "net");
  const std::string cfg_text = "env = hallway-4x5x6\n";
  const std::string path =
      (std::filesystem::temp_directory_path() / "cromac_ckpt_test.bin").string();
  save_checkpoint(path, params, cfg_text);

  Mlp loaded({4, 6, 2});
  ParamList lparams;
  loaded.collect(lparams, "net");
  CheckpointData ck = load_checkpoint(path);
  CHECK(ck.config_text == cfg_text);
  CHECK(ck.config_hash == fnv1a64(cfg_text));
  restore_params(ck, lparams);
  for (std::size_t i = 0; i < params.size(); ++i)
    CHECK(params[i].tensor->data == lparams[i].tensor->data);  // bitwise

  Mlp wrong({4, 5, 2});
  ParamList wparams;
  wrong.collect(wparams, "net");
  CHECK_THROWS_AS(restore_params(ck, wparams), ContractError);
  std::filesystem::remove(path);
}
