#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "recurf/diffcore.hpp"

#include <cmath>
#include <random>

using namespace recurf;

namespace {

Tensor random_tensor(int r, int c, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Tensor t(r, c);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

Tensor naive_affine(const Eigen::MatrixXd& w, const Eigen::MatrixXd& b, const Tensor& x) {
  Tensor y(x.rows(), w.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index o = 0; o < w.rows(); ++o) {
      double acc = 0.0;
      for (Eigen::Index k = 0; k < w.cols(); ++k) acc += x(r, k) * w(o, k);
      y(r, o) = acc + b(o, 0);
    }
  return y;
}

Eigen::VectorXd flatten(const std::vector<const Parameter*>& ps, bool grad) {
  Eigen::Index n = 0;
  for (const Parameter* p : ps) n += p->size();
  Eigen::VectorXd v(n);
  Eigen::Index k = 0;
  for (const Parameter* p : ps) {
    const Eigen::MatrixXd& m = grad ? p->grad : p->value;
    for (Eigen::Index i = 0; i < m.size(); ++i) v[k++] = m.data()[i];
  }
  return v;
}

void unflatten(const Eigen::VectorXd& v, const std::vector<Parameter*>& ps) {
  Eigen::Index k = 0;
  for (Parameter* p : ps)
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = v[k++];
}

/// Relative gradient error of a primitive whose output is summed with random
/// weights, against central differences on the input.
double unary_check(Var (*op)(Var), const Tensor& x0) {
  std::mt19937_64 rng(3);
  Tensor shape;
  {
    Tape t(false);
    shape = op(t.constant(x0)).value();
  }
  const Tensor coef = random_tensor(static_cast<int>(shape.rows()), static_cast<int>(shape.cols()), rng);
  auto f = [&](const Eigen::VectorXd& v) {
    Tape t(false);
    Tensor x = Eigen::Map<const Tensor>(v.data(), x0.rows(), x0.cols());
    return sum(mul(op(t.constant(x)), t.constant(coef))).value()(0, 0);
  };
  Tape t;
  Var x = t.leaf(x0);
  t.backward(sum(mul(op(x), t.constant(coef))));
  const Tensor g = t.grad(x);
  const Eigen::VectorXd p = Eigen::Map<const Eigen::VectorXd>(x0.data(), x0.size());
  const Eigen::VectorXd a = Eigen::Map<const Eigen::VectorXd>(g.data(), g.size());
  return finite_diff_check(f, p, a, 1e-5);
}

}  // namespace

TEST_CASE("linear forward on small cases") {
  std::mt19937_64 rng(0);
  Linear id(2, 2, rng, "id");
  id.weight.value = Eigen::MatrixXd::Identity(2, 2);
  id.bias.value.setZero();
  Tensor x(1, 2);
  x << 3, 4;
  Tape t(false);
  const Tensor y = t.linear(id, t.constant(x)).value();
  CHECK(y(0, 0) == 3.0);
  CHECK(y(0, 1) == 4.0);

  Linear s(1, 1, rng, "s");
  s.weight.value(0, 0) = 2.0;
  s.bias.value(0, 0) = 1.0;
  Tensor x1(1, 1);
  x1 << 3;
  CHECK(t.linear(s, t.constant(x1)).value()(0, 0) == 7.0);
}

TEST_CASE("linear forward matches a naive triple loop") {
  std::mt19937_64 rng(1);
  for (auto [b, in, out] : {std::tuple{4, 5, 3}, std::tuple{7, 33, 19}, std::tuple{13, 64, 64}, std::tuple{1, 1, 1}}) {
    Linear l(in, out, rng, "l");
    const Tensor x = random_tensor(b, in, rng);
    Tensor y;
    linear_apply(l.weight.value, l.bias.value, x, y);
    CHECK((y - naive_affine(l.weight.value, l.bias.value, x)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("linear forward is batch invariant") {
  std::mt19937_64 rng(2);
  Linear l(37, 21, rng, "l");
  const Tensor x = random_tensor(23, 37, rng);
  Tensor full;
  linear_apply(l.weight.value, l.bias.value, x, full);
  for (int r = 0; r < 23; ++r) {
    Tensor one;
    linear_apply(l.weight.value, l.bias.value, x.row(r), one);
    CHECK((one.row(0).array() == full.row(r).array()).all());
  }
}

TEST_CASE("linear shape mismatch names both shapes") {
  std::mt19937_64 rng(0);
  Linear l(3, 2, rng, "l");
  Tensor x = Tensor::Zero(4, 5);
  Tensor y;
  try {
    linear_apply(l.weight.value, l.bias.value, x, y);
    FAIL("expected a throw");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("4x5") != std::string::npos);
  }
}

TEST_CASE("backward of sum(W x) replicates x") {
  std::mt19937_64 rng(4);
  Linear l(3, 2, rng, "l");
  Tensor x(1, 3);
  x << 1.5, -2.0, 0.25;
  l.weight.zero_grad();
  l.bias.zero_grad();
  Tape t;
  t.backward(sum(t.linear(l, t.constant(x))));
  for (int o = 0; o < 2; ++o)
    for (int k = 0; k < 3; ++k) CHECK(l.weight.grad(o, k) == x(0, k));
  CHECK(l.bias.grad(0, 0) == 1.0);
  CHECK(l.bias.grad(1, 0) == 1.0);
}

TEST_CASE("dead relu passes no gradient") {
  Tape t;
  Tensor k(1, 1);
  k << 2.0;
  Tensor m(1, 1);
  m << -3.0;
  Var kv = t.leaf(k);
  Var pre = mul(t.constant(m), t.leaf(Tensor::Ones(1, 1)));
  Var loss = sum(mul(relu(pre), kv));
  t.backward(loss);
  CHECK(t.grad(pre)(0, 0) == 0.0);
  CHECK(t.grad(kv)(0, 0) == 0.0);
}

TEST_CASE("relu subgradient at zero is zero") {
  Tape t;
  Var x = t.leaf(Tensor::Zero(1, 1));
  t.backward(sum(relu(x)));
  CHECK(t.grad(x)(0, 0) == 0.0);
}

TEST_CASE("two layer MLP gradients match central differences") {
  std::mt19937_64 rng(5);
  Linear l1(4, 6, rng, "l1"), l2(6, 2, rng, "l2");
  const Tensor x = random_tensor(5, 4, rng);
  std::vector<Parameter*> ps{&l1.weight, &l1.bias, &l2.weight, &l2.bias};
  auto loss_value = [&]() {
    Tape t(false);
    return sum(square(t.linear(l2, softplus(t.linear(l1, t.constant(x)))))).value()(0, 0);
  };
  for (Parameter* p : ps) p->zero_grad();
  {
    Tape t;
    t.backward(sum(square(t.linear(l2, softplus(t.linear(l1, t.constant(x)))))));
  }
  std::vector<const Parameter*> cps(ps.begin(), ps.end());
  const Eigen::VectorXd analytic = flatten(cps, true);
  const Eigen::VectorXd point = flatten(cps, false);
  const double err = finite_diff_check(
      [&](const Eigen::VectorXd& v) {
        unflatten(v, ps);
        const double f = loss_value();
        unflatten(point, ps);
        return f;
      },
      point, analytic, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("per-primitive gradients match central differences") {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor(3, 4, rng, 2.0);
  // keep relu inputs away from the kink
  Tensor xr = x;
  for (Eigen::Index i = 0; i < xr.size(); ++i)
    if (std::abs(xr.data()[i]) < 0.1) xr.data()[i] = 0.5;
  CHECK(unary_check(&relu, xr) < 1e-6);
  CHECK(unary_check(&sigmoid, x) < 1e-6);
  CHECK(unary_check(&softplus, x) < 1e-6);
  CHECK(unary_check(&square, x) < 1e-6);
  CHECK(unary_check([](Var a) { return scale(a, -1.7); }, x) < 1e-6);
  CHECK(unary_check([](Var a) { return mean(a); }, x) < 1e-6);
  CHECK(unary_check([](Var a) { return sum(a); }, x) < 1e-6);
  CHECK(unary_check([](Var a) { return add(a, square(a)); }, x) < 1e-6);
  CHECK(unary_check([](Var a) { return sub(square(a), a); }, x) < 1e-6);
  CHECK(unary_check([](Var a) { return concat_cols(a, square(a)); }, x) < 1e-6);
  CHECK(unary_check(
            [](Var a) {
              static const int rows[] = {2, 0, 2};
              return gather_rows(a, rows);
            },
            x) < 1e-6);
  CHECK(unary_check(
            [](Var a) {
              static const int r0[] = {2};
              static const int r1[] = {0, 1};
              Var parts[] = {gather_rows(a, r0), square(gather_rows(a, r1))};
              static const std::vector<int> rows[] = {{1}, {2, 0}};
              return stitch_rows(parts, rows, 3);
            },
            x) < 1e-6);
}

TEST_CASE("backward requires a scalar loss") {
  Tape t;
  Var x = t.leaf(Tensor::Ones(2, 2));
  CHECK_THROWS_AS(t.backward(square(x)), std::invalid_argument);
}

TEST_CASE("unused parameters get exact zero gradient") {
  std::mt19937_64 rng(7);
  Linear used(2, 2, rng, "used"), unused(2, 2, rng, "unused");
  unused.weight.zero_grad();
  unused.bias.zero_grad();
  Tape t;
  t.backward(sum(t.linear(used, t.constant(Tensor::Ones(1, 2)))));
  CHECK(unused.weight.grad.cwiseAbs().maxCoeff() == 0.0);
  CHECK(unused.bias.grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradient of a sum of losses is the sum of gradients") {
  std::mt19937_64 rng(8);
  const Tensor x0 = random_tensor(3, 3, rng);
  Tape t1;
  Var a = t1.leaf(x0);
  t1.backward(add(sum(square(a)), sum(sigmoid(a))));
  Tape t2;
  Var b = t2.leaf(x0);
  t2.backward(sum(square(b)));
  Tape t3;
  Var c = t3.leaf(x0);
  t3.backward(sum(sigmoid(c)));
  CHECK((t1.grad(a) - (t2.grad(b) + t3.grad(c))).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("replaying a tape twice gives identical gradients") {
  std::mt19937_64 rng(9);
  Linear l(5, 4, rng, "l");
  const Tensor x = random_tensor(6, 5, rng);
  auto run = [&]() {
    l.weight.zero_grad();
    Tape t;
    t.backward(sum(softplus(t.linear(l, t.constant(x)))));
    return Eigen::MatrixXd(l.weight.grad);
  };
  const Eigen::MatrixXd g1 = run();
  const Eigen::MatrixXd g2 = run();
  CHECK((g1.array() == g2.array()).all());

  l.weight.zero_grad();
  Tape t;
  Var loss = sum(softplus(t.linear(l, t.constant(x))));
  t.backward(loss);
  const Eigen::MatrixXd first = l.weight.grad;
  l.weight.zero_grad();
  t.backward(loss);
  CHECK((first.array() == l.weight.grad.array()).all());
}

TEST_CASE("tape rejects non-finite values") {
  Tape t;
  Tensor x(1, 1);
  x << 1e308;
  Var v = t.leaf(x);
  CHECK_THROWS_AS(scale(v, 10.0), std::runtime_error);
}

TEST_CASE("adam with zero gradient leaves the parameter unchanged") {
  Eigen::MatrixXd p = Eigen::MatrixXd::Constant(2, 2, 0.7);
  AdamState s;
  adam_step(p, Eigen::MatrixXd::Zero(2, 2), s, 0.1);
  CHECK((p.array() == 0.7).all());
  CHECK(s.t == 1);
}

TEST_CASE("adam first step moves by about lr") {
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(1, 1);
  AdamState s;
  adam_step(p, Eigen::MatrixXd::Ones(1, 1), s, 0.1);
  CHECK(std::abs(p(0, 0) + 0.1) < 1e-6);
}

TEST_CASE("adam matches a hand-rolled recurrence") {
  const double g[3] = {0.3, -1.2, 0.05};
  double x = 0.5, m = 0, v = 0;
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Eigen::MatrixXd p = Eigen::MatrixXd::Constant(1, 1, 0.5);
  AdamState s;
  for (int t = 1; t <= 3; ++t) {
    m = b1 * m + (1 - b1) * g[t - 1];
    v = b2 * v + (1 - b2) * g[t - 1] * g[t - 1];
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    x -= lr * mh / (std::sqrt(vh) + eps);
    adam_step(p, Eigen::MatrixXd::Constant(1, 1, g[t - 1]), s, lr);
    CHECK(std::abs(p(0, 0) - x) < 1e-12);
    CHECK(s.t == t);
  }
}

TEST_CASE("adam rejects non-finite gradients naming the parameter") {
  Parameter p("stage1.mlp0.weight", Eigen::MatrixXd::Zero(1, 2));
  p.grad(0, 1) = std::nan("");
  try {
    adam_step(p, 1e-3);
    FAIL("expected a throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("stage1.mlp0.weight") != std::string::npos);
  }
}

TEST_CASE("finite difference checker on simple functions") {
  Eigen::VectorXd x(1);
  x << 3.0;
  Eigen::VectorXd g(1);
  g << 6.0;
  CHECK(finite_diff_check([](const Eigen::VectorXd& v) { return v[0] * v[0]; }, x, g, 1e-5) < 1e-8);
  Eigen::VectorXd z(1);
  z << 0.0;
  Eigen::VectorXd gs(1);
  gs << 0.5;
  CHECK(finite_diff_check([](const Eigen::VectorXd& v) { return softplus_value(v[0]); }, z, gs, 1e-5) < 1e-6);
}

TEST_CASE("fan-in initialization bounds") {
  std::mt19937_64 rng(10);
  Linear l(16, 8, rng, "l");
  CHECK(l.weight.value.cwiseAbs().maxCoeff() <= 0.25);
  CHECK(l.bias.value.cwiseAbs().maxCoeff() <= 0.25);
  CHECK(l.param_count() == 16 * 8 + 8);
  CHECK(l.flops_per_sample() == 2 * 16 * 8 + 8);
}
