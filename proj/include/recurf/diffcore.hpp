#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace recurf {

/// Row-major dense matrix; rows are batch entries, columns are features.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// All differentiable quantities are 64-bit and at most 2-D (scalars are 1x1).
using Tensor = MatrixX<double>;

struct AdamState {
  Eigen::MatrixXd m;
  Eigen::MatrixXd v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// A trainable array. Stored column-major so that, for a weight of shape
/// [out x in], column k is the contiguous fan-out of input k.
struct Parameter {
  std::string name;
  Eigen::MatrixXd value;
  // Accumulated by Tape::backward, which only holds const references to layers.
  mutable Eigen::MatrixXd grad;
  AdamState adam;

  Parameter() = default;
  Parameter(std::string n, Eigen::MatrixXd v);

  [[nodiscard]] Eigen::Index size() const { return value.size(); }
  void zero_grad() const { grad.setZero(value.rows(), value.cols()); }
};

/// Dense affine layer: out = in * W^T + b.
struct Linear {
  Parameter weight;  // [out x in]
  Parameter bias;    // [out x 1]

  Linear() = default;
  Linear(int in_features, int out_features, std::mt19937_64& rng, const std::string& name);

  [[nodiscard]] int in_features() const { return static_cast<int>(weight.value.cols()); }
  [[nodiscard]] int out_features() const { return static_cast<int>(weight.value.rows()); }
  [[nodiscard]] std::int64_t param_count() const { return weight.size() + bias.size(); }
  /// 2*in*out multiply-adds plus out bias adds, per sample.
  [[nodiscard]] std::int64_t flops_per_sample() const;
};

/// Uniform in +-sqrt(1/fan_in) for both weight and bias.
void init_uniform_fan_in(Linear& layer, std::mt19937_64& rng);

/// Batch-invariant affine map: every output row depends only on its own input
/// row, and each element is accumulated in input order, so evaluating a subset
/// of rows reproduces the full-batch result bit for bit.
void linear_apply(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& bias,
                  const Tensor& input, Tensor& output);

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] bool valid() const { return tape != nullptr && id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the record
/// is topologically sorted by construction and backward() walks it in
/// exact reverse.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int node)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  [[nodiscard]] bool recording() const { return record_; }

  Var constant(Tensor value);
  Var leaf(Tensor value);

  /// Appends a node computed by a caller-defined primitive. `backward` reads
  /// grad(node) and accumulates into the gradients of `inputs`.
  Var push(Tensor value, std::vector<int> inputs, BackwardFn backward);

  /// Linear layer node; parameter gradients accumulate into Parameter::grad.
  Var linear(const Linear& layer, Var input);

  [[nodiscard]] const Tensor& value(int id) const { return nodes_[id].value; }
  /// Gradient of the last backward() target with respect to a node; zero if
  /// the node did not influence it.
  [[nodiscard]] Tensor grad(Var v) const;

  /// Mutable gradient slot, allocated on first use.
  Tensor& grad_slot(int id);
  [[nodiscard]] bool has_grad(int id) const { return nodes_[id].grad.size() > 0; }
  [[nodiscard]] bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  /// Accumulates d(loss)/d(param) into Parameter::grad for every parameter
  /// reached from `loss`. Loss must be 1x1.
  void backward(Var loss);

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> inputs;
    BackwardFn backward;
    bool needs_grad = false;
  };

  bool record_;
  std::vector<Node> nodes_;
  friend struct Var;
};

// Elementwise and structural primitives. All arguments must live on the same tape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var relu(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var square(Var a);
Var sum(Var a);
Var mean(Var a);
/// Horizontal concatenation [a | b]; row counts must match.
Var concat_cols(Var a, Var b);
Var gather_rows(Var a, std::span<const int> rows);
/// Inverse of a partition: part p provides rows `rows[p]` of a `total_rows`
/// result. Each output row must be covered exactly once.
Var stitch_rows(std::span<const Var> parts, std::span<const std::vector<int>> rows, int total_rows);

double softplus_value(double x);
double sigmoid_value(double x);

/// In-place Adam update with bias correction. Throws if any gradient entry is
/// non-finite, naming the parameter.
void adam_step(Eigen::MatrixXd& param, const Eigen::MatrixXd& grad, AdamState& state, double lr,
               const std::string& name = "parameter");
void adam_step(Parameter& p, double lr);

/// max_k |analytic_k - central_k| / (|analytic_k| + 1e-8) for a scalar
/// function of a flat vector. `analytic` has the same length as `point`.
double finite_diff_check(const std::function<double(const Eigen::VectorXd&)>& f,
                         const Eigen::VectorXd& point, const Eigen::VectorXd& analytic, double h);

}  // namespace recurf
