#include "recurf/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace recurf {

namespace {

std::string shape_str(Eigen::Index r, Eigen::Index c) {
  std::ostringstream os;
  os << '[' << r << 'x' << c << ']';
  return os.str();
}

void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  }
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.rows(), a.cols()) + " vs " +
                                shape_str(b.rows(), b.cols()));
  }
}

// Register-tiled kernel for R rows and a JB-wide output block.
template <int R, int JB>
inline void affine_block(const double* const* x, int in, const double* __restrict wt, int out,
                         int j0, const double* bias, double* const* y) {
  double acc[R][JB] = {};
  for (int k = 0; k < in; ++k) {
    const double* w = wt + static_cast<std::ptrdiff_t>(k) * out + j0;
    for (int r = 0; r < R; ++r) {
      const double xv = x[r][k];
#pragma GCC unroll 16
      for (int j = 0; j < JB; ++j) acc[r][j] = std::fma(xv, w[j], acc[r][j]);
    }
  }
  for (int r = 0; r < R; ++r)
    for (int j = 0; j < JB; ++j) y[r][j0 + j] = acc[r][j] + bias[j0 + j];
}

template <int R>
inline void affine_rows(const double* const* x, int in, const double* wt, int out,
                        const double* bias, double* const* y) {
  int j0 = 0;
  for (; j0 + 16 <= out; j0 += 16) affine_block<R, 16>(x, in, wt, out, j0, bias, y);
  for (; j0 + 8 <= out; j0 += 8) affine_block<R, 8>(x, in, wt, out, j0, bias, y);
  for (; j0 < out; ++j0) {
    for (int r = 0; r < R; ++r) {
      double a = 0.0;
      for (int k = 0; k < in; ++k) a = std::fma(x[r][k], wt[static_cast<std::ptrdiff_t>(k) * out + j0], a);
      y[r][j0] = a + bias[j0];
    }
  }
}

Var unary(Var a, Tensor value, std::function<void(const Tensor& in, const Tensor& out,
                                                   const Tensor& g, Tensor& gin)> rule) {
  Tape& t = *a.tape;
  const int ia = a.id;
  return t.push(std::move(value), {ia}, [ia, rule](Tape& tp, int self) {
    rule(tp.value(ia), tp.value(self), tp.grad_slot(self), tp.grad_slot(ia));
  });
}

}  // namespace

Parameter::Parameter(std::string n, Eigen::MatrixXd v) : name(std::move(n)), value(std::move(v)) {
  zero_grad();
}

Linear::Linear(int in_features, int out_features, std::mt19937_64& rng, const std::string& name)
    : weight(name + ".weight", Eigen::MatrixXd::Zero(out_features, in_features)),
      bias(name + ".bias", Eigen::MatrixXd::Zero(out_features, 1)) {
  init_uniform_fan_in(*this, rng);
}

std::int64_t Linear::flops_per_sample() const {
  const std::int64_t in = in_features(), out = out_features();
  return 2 * in * out + out;
}

void init_uniform_fan_in(Linear& layer, std::mt19937_64& rng) {
  const double bound = std::sqrt(1.0 / std::max(1, layer.in_features()));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index i = 0; i < layer.weight.value.size(); ++i) layer.weight.value.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < layer.bias.value.size(); ++i) layer.bias.value.data()[i] = u(rng);
  layer.weight.zero_grad();
  layer.bias.zero_grad();
}

void linear_apply(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& bias, const Tensor& input,
                  Tensor& output) {
  const int in = static_cast<int>(weight.cols());
  const int out = static_cast<int>(weight.rows());
  if (input.cols() != in || bias.size() != out) {
    throw std::invalid_argument("linear: weight " + shape_str(weight.rows(), weight.cols()) +
                                " bias " + shape_str(bias.rows(), bias.cols()) +
                                " incompatible with input " +
                                shape_str(input.rows(), input.cols()));
  }
  const auto batch = static_cast<int>(input.rows());
  output.resize(batch, out);
  const double* wt = weight.data();
  const double* b = bias.data();
  int r = 0;
  for (; r + 4 <= batch; r += 4) {
    const double* x[4] = {input.row(r).data(), input.row(r + 1).data(), input.row(r + 2).data(),
                          input.row(r + 3).data()};
    double* y[4] = {output.row(r).data(), output.row(r + 1).data(), output.row(r + 2).data(),
                    output.row(r + 3).data()};
    affine_rows<4>(x, in, wt, out, b, y);
  }
  for (; r < batch; ++r) {
    const double* x[1] = {input.row(r).data()};
    double* y[1] = {output.row(r).data()};
    affine_rows<1>(x, in, wt, out, b, y);
  }
}

const Tensor& Var::value() const { return tape->nodes_[id].value; }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, false});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, record_});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(Tensor value, std::vector<int> inputs, BackwardFn backward) {
  for (Eigen::Index i = 0; i < value.size(); ++i) {
    if (!std::isfinite(value.data()[i])) {
      throw std::runtime_error("tape: non-finite value produced at node " +
                               std::to_string(nodes_.size()));
    }
  }
  bool needs = false;
  if (record_) {
    for (int i : inputs) needs = needs || nodes_[i].needs_grad;
  }
  Node n{std::move(value), {}, {}, {}, needs};
  if (needs) {
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::linear(const Linear& layer, Var input) {
  if (input.tape != this) throw std::invalid_argument("linear: input lives on another tape");
  Tensor out;
  linear_apply(layer.weight.value, layer.bias.value, input.value(), out);
  const int ix = input.id;
  const Linear* lp = &layer;
  if (!out.allFinite()) {
    throw std::runtime_error("linear: non-finite output from " + layer.weight.name);
  }
  if (!record_) return constant(std::move(out));
  nodes_.push_back(Node{std::move(out), {}, {ix}, {}, true});
  const int self = static_cast<int>(nodes_.size()) - 1;
  nodes_[self].backward = [ix, lp](Tape& tp, int me) {
    const Tensor& g = tp.grad_slot(me);
    const Tensor& x = tp.value(ix);
    if (lp->weight.grad.size() != lp->weight.value.size()) lp->weight.zero_grad();
    if (lp->bias.grad.size() != lp->bias.value.size()) lp->bias.zero_grad();
    lp->weight.grad.noalias() += g.transpose() * x;
    lp->bias.grad += g.colwise().sum().transpose();
    if (tp.needs_grad(ix)) tp.grad_slot(ix).noalias() += g * lp->weight.value;
  };
  return Var{this, self};
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.size() == 0) return Tensor::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Tensor& Tape::grad_slot(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Tensor::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::invalid_argument("backward: loss lives on another tape");
  const Tensor& lv = loss.value();
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(lv.rows(), lv.cols()));
  }
  for (Node& n : nodes_) n.grad.resize(0, 0);
  grad_slot(loss.id)(0, 0) = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, i);
  }
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  require_same_shape(a, b, "add");
  const int ia = a.id, ib = b.id;
  Tensor v = a.value() + b.value();
  return a.tape->push(std::move(v), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    if (t.needs_grad(ia)) t.grad_slot(ia) += g;
    if (t.needs_grad(ib)) t.grad_slot(ib) += t.grad_slot(self);
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b, "sub");
  require_same_shape(a, b, "sub");
  const int ia = a.id, ib = b.id;
  Tensor v = a.value() - b.value();
  return a.tape->push(std::move(v), {ia, ib}, [ia, ib](Tape& t, int self) {
    if (t.needs_grad(ia)) t.grad_slot(ia) += t.grad_slot(self);
    if (t.needs_grad(ib)) t.grad_slot(ib) -= t.grad_slot(self);
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b, "mul");
  require_same_shape(a, b, "mul");
  const int ia = a.id, ib = b.id;
  Tensor v = a.value().cwiseProduct(b.value());
  return a.tape->push(std::move(v), {ia, ib}, [ia, ib](Tape& t, int self) {
    if (t.needs_grad(ia)) t.grad_slot(ia) += t.grad_slot(self).cwiseProduct(t.value(ib));
    if (t.needs_grad(ib)) t.grad_slot(ib) += t.grad_slot(self).cwiseProduct(t.value(ia));
  });
}

Var scale(Var a, double s) {
  return unary(a, a.value() * s,
               [s](const Tensor&, const Tensor&, const Tensor& g, Tensor& gin) { gin += s * g; });
}

Var relu(Var a) {
  return unary(a, a.value().cwiseMax(0.0),
               [](const Tensor& in, const Tensor&, const Tensor& g, Tensor& gin) {
                 gin.array() += (in.array() > 0.0).select(g.array(), 0.0);
               });
}

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_value(double x) {
  // log(1 + e^x) without overflow for large x.
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

Var sigmoid(Var a) {
  Tensor v = a.value().unaryExpr([](double x) { return sigmoid_value(x); });
  return unary(a, std::move(v), [](const Tensor&, const Tensor& out, const Tensor& g, Tensor& gin) {
    gin.array() += g.array() * out.array() * (1.0 - out.array());
  });
}

Var softplus(Var a) {
  Tensor v = a.value().unaryExpr([](double x) { return softplus_value(x); });
  return unary(a, std::move(v), [](const Tensor& in, const Tensor&, const Tensor& g, Tensor& gin) {
    gin.array() += g.array() * in.unaryExpr([](double x) { return sigmoid_value(x); }).array();
  });
}

Var square(Var a) {
  return unary(a, a.value().array().square().matrix(),
               [](const Tensor& in, const Tensor&, const Tensor& g, Tensor& gin) {
                 gin.array() += 2.0 * in.array() * g.array();
               });
}

Var sum(Var a) {
  Tensor v(1, 1);
  v(0, 0) = a.value().sum();
  return unary(a, std::move(v), [](const Tensor&, const Tensor&, const Tensor& g, Tensor& gin) {
    gin.array() += g(0, 0);
  });
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  Tensor v(1, 1);
  v(0, 0) = a.value().sum() / n;
  return unary(a, std::move(v), [n](const Tensor&, const Tensor&, const Tensor& g, Tensor& gin) {
    gin.array() += g(0, 0) / n;
  });
}

Var concat_cols(Var a, Var b) {
  require_same_tape(a, b, "concat_cols");
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("concat_cols: row mismatch " + shape_str(a.rows(), a.cols()) +
                                " vs " + shape_str(b.rows(), b.cols()));
  }
  const int ia = a.id, ib = b.id;
  const Eigen::Index ca = a.cols(), cb = b.cols();
  Tensor v(a.rows(), ca + cb);
  v.leftCols(ca) = a.value();
  v.rightCols(cb) = b.value();
  return a.tape->push(std::move(v), {ia, ib}, [ia, ib, ca, cb](Tape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    if (t.needs_grad(ia)) t.grad_slot(ia) += g.leftCols(ca);
    if (t.needs_grad(ib)) t.grad_slot(ib) += t.grad_slot(self).rightCols(cb);
  });
}

Var gather_rows(Var a, std::span<const int> rows) {
  const Tensor& src = a.value();
  Tensor v(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= src.rows()) throw std::out_of_range("gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return unary(a, std::move(v),
               [idx = std::move(idx)](const Tensor&, const Tensor&, const Tensor& g, Tensor& gin) {
                 for (std::size_t i = 0; i < idx.size(); ++i)
                   gin.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
               });
}

Var stitch_rows(std::span<const Var> parts, std::span<const std::vector<int>> rows, int total_rows) {
  if (parts.empty() || parts.size() != rows.size()) {
    throw std::invalid_argument("stitch_rows: need one row list per part");
  }
  Tape& t = *parts[0].tape;
  const Eigen::Index cols = parts[0].cols();
  Tensor v(total_rows, cols);
  std::vector<char> covered(static_cast<std::size_t>(total_rows), 0);
  std::vector<int> inputs;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    if (parts[p].tape != &t || parts[p].cols() != cols ||
        parts[p].rows() != static_cast<Eigen::Index>(rows[p].size())) {
      throw std::invalid_argument("stitch_rows: part " + std::to_string(p) + " has shape " +
                                  shape_str(parts[p].rows(), parts[p].cols()) + " for " +
                                  std::to_string(rows[p].size()) + " rows");
    }
    for (std::size_t i = 0; i < rows[p].size(); ++i) {
      const int r = rows[p][i];
      if (r < 0 || r >= total_rows || covered[r]) throw std::invalid_argument("stitch_rows: bad row cover");
      covered[r] = 1;
      v.row(r) = parts[p].value().row(static_cast<Eigen::Index>(i));
    }
    inputs.push_back(parts[p].id);
  }
  if (std::find(covered.begin(), covered.end(), 0) != covered.end()) {
    throw std::invalid_argument("stitch_rows: rows left uncovered");
  }
  std::vector<std::vector<int>> idx(rows.begin(), rows.end());
  std::vector<int> ids = inputs;
  return t.push(std::move(v), std::move(inputs),
                [ids = std::move(ids), idx = std::move(idx)](Tape& tp, int self) {
                  for (std::size_t p = 0; p < ids.size(); ++p) {
                    if (!tp.needs_grad(ids[p])) continue;
                    Tensor& gin = tp.grad_slot(ids[p]);
                    const Tensor& g = tp.grad_slot(self);
                    for (std::size_t i = 0; i < idx[p].size(); ++i)
                      gin.row(static_cast<Eigen::Index>(i)) += g.row(idx[p][i]);
                  }
                });
}

void adam_step(Eigen::MatrixXd& param, const Eigen::MatrixXd& grad, AdamState& state, double lr,
               const std::string& name) {
  if (grad.rows() != param.rows() || grad.cols() != param.cols()) {
    throw std::invalid_argument("adam_step: gradient shape " + shape_str(grad.rows(), grad.cols()) +
                                " does not match " + name + " " +
                                shape_str(param.rows(), param.cols()));
  }
  if (!grad.allFinite()) throw std::runtime_error("adam_step: non-finite gradient for " + name);
  if (state.m.size() != param.size()) {
    state.m = Eigen::MatrixXd::Zero(param.rows(), param.cols());
    state.v = Eigen::MatrixXd::Zero(param.rows(), param.cols());
    state.t = 0;
  }
  state.t += 1;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  param.array() -= lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.eps);
}

void adam_step(Parameter& p, double lr) {
  if (p.grad.size() != p.value.size()) p.zero_grad();
  adam_step(p.value, p.grad, p.adam, lr, p.name);
}

double finite_diff_check(const std::function<double(const Eigen::VectorXd&)>& f,
                         const Eigen::VectorXd& point, const Eigen::VectorXd& analytic, double h) {
  if (analytic.size() != point.size()) {
    throw std::invalid_argument("finite_diff_check: gradient length mismatch");
  }
  double worst = 0.0;
  Eigen::VectorXd x = point;
  for (Eigen::Index k = 0; k < point.size(); ++k) {
    x[k] = point[k] + h;
    const double fp = f(x);
    x[k] = point[k] - h;
    const double fm = f(x);
    x[k] = point[k];
    const double numeric = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[k] - numeric) / (std::abs(analytic[k]) + 1e-8));
  }
  return worst;
}

}  // namespace recurf
