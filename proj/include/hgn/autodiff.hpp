#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every operation records its inputs and a backward rule that is itself
// expressed with the same operations. Running grad() with create_graph set
// therefore yields differentiable gradients, which is how input gradients of a
// learned Hamiltonian are trained against (forward pass -> input gradient ->
// loss -> parameter gradient).

#include <functional>
#include <memory>
#include <vector>

#include <Eigen/Core>

namespace hgn::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = std::shared_ptr<const std::vector<int>>;

Index make_index(std::vector<int> ids);

class Var;

struct Node {
  Matrix value;
  bool requires_grad = false;
  std::vector<Var> inputs;
  // Gradients for each input given the gradient of this node; entries for
  // inputs that do not require gradients may be left undefined.
  std::function<std::vector<Var>(const Var&)> backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Node* node() const { return node_.get(); }
  double scalar() const;

  // Parameters keep their identity across updates, so values are mutable in place.
  Matrix& mutable_value() { return node_->value; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

// Disables recording for its lifetime (nothing built inside is differentiable).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Matrix value);
Var leaf(Matrix value, bool requires_grad = true);
Var zeros(Eigen::Index rows, Eigen::Index cols);

// Gradients of a scalar output with respect to each of `wrt`. Inputs the
// output does not depend on receive zero matrices. With create_graph the
// returned gradients are themselves differentiable.
std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt, bool create_graph = false);

// Same with an explicit upstream gradient of the output's shape.
std::vector<Var> grad(const Var& output, const Var& grad_output, const std::vector<Var>& wrt,
                      bool create_graph);

// op(a) * op(b) with optional transposes.
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
// x * w + b, b a 1 x cols row broadcast over rows.
Var affine(const Var& x, const Var& w, const Var& b);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var mul(const Var& a, const Var& b);  // elementwise

// Row i scaled by the constant factors[i].
Var scale_rows(const Var& a, const Eigen::VectorXd& factors);
// Column j scaled by the constant factors[j].
Var scale_cols(const Var& a, const Eigen::VectorXd& factors);

Var add_row(const Var& a, const Var& row);
Var sum_rows(const Var& a);                      // 1 x cols
Var broadcast_rows(const Var& row, Eigen::Index rows);
Var sum_all(const Var& a);                       // 1 x 1
Var fill(const Var& scalar, Eigen::Index rows, Eigen::Index cols);

Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index width);
Var pad_cols(const Var& a, Eigen::Index start, Eigen::Index total);

Var gather_rows(const Var& a, const Index& ids);
Var scatter_add_rows(const Var& a, const Index& ids, Eigen::Index rows);

Var relu(const Var& a);
Var softplus(const Var& a);
Var sigmoid(const Var& a);

// Mean of squared entries.
Var mean_square(const Var& a);

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(double s, const Var& a);

}  // namespace hgn::ad
