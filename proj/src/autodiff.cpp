#include "hgn/autodiff.hpp"

#include <algorithm>
#include <unordered_map>
#include <utility>

#include "hgn/error.hpp"

namespace hgn::ad {

namespace {

thread_local bool g_grad_enabled = true;

using Need = std::vector<bool>;
using BackwardFn = std::function<std::vector<Var>(const Var&, const Need&)>;

Var make_op(Matrix value, std::vector<Var> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool any = false;
  if (g_grad_enabled) {
    for (const Var& in : inputs) any = any || in.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    Need need(inputs.size());
    for (size_t i = 0; i < inputs.size(); ++i) need[i] = inputs[i].requires_grad();
    node->inputs = std::move(inputs);
    node->backward = [fn = std::move(backward), need](const Var& g) { return fn(g, need); };
  }
  return Var(std::move(node));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::shape_mismatch,
          std::string(op) + ": operand shapes differ");
}

Matrix mask_positive(const Matrix& x) { return (x.array() > 0.0).cast<double>(); }

}  // namespace

Index make_index(std::vector<int> ids) {
  return std::make_shared<const std::vector<int>>(std::move(ids));
}

double Var::scalar() const {
  require(defined() && rows() == 1 && cols() == 1, ErrorCode::shape_mismatch,
          "scalar(): value is not 1 x 1");
  return node_->value(0, 0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) {
  g_grad_enabled = enabled;
}
GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var leaf(Matrix value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

Var zeros(Eigen::Index rows, Eigen::Index cols) { return constant(Matrix::Zero(rows, cols)); }

std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt, bool create_graph) {
  require(output.defined() && output.rows() == 1 && output.cols() == 1, ErrorCode::shape_mismatch,
          "grad: output must be a scalar");
  return grad(output, constant(Matrix::Ones(1, 1)), wrt, create_graph);
}

std::vector<Var> grad(const Var& output, const Var& grad_output, const std::vector<Var>& wrt,
                      bool create_graph) {
  require(output.defined(), ErrorCode::invalid_input, "grad: undefined output");
  check_same_shape(output, grad_output, "grad");

  std::unordered_map<Node*, bool> needed;
  for (const Var& w : wrt) {
    if (w.defined()) needed[w.node()] = true;
  }

  // Iterative post-order DFS restricted to nodes that require gradients. A node
  // is needed when some requested input is reachable through its inputs.
  std::vector<Node*> order;
  std::unordered_map<Node*, bool> visited;
  if (output.requires_grad()) {
    std::vector<std::pair<Node*, size_t>> stack{{output.node(), 0}};
    visited[output.node()] = true;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].node();
        if (child->requires_grad && !visited[child]) {
          visited[child] = true;
          stack.emplace_back(child, 0);
        }
        continue;
      }
      bool need = needed.count(node) > 0;
      for (const Var& in : node->inputs) {
        auto it = needed.find(in.node());
        if (it != needed.end() && it->second) need = true;
      }
      if (need) needed[node] = true;
      order.push_back(node);
      stack.pop_back();
    }
  }

  GradModeGuard mode(create_graph);
  std::unordered_map<Node*, Var> grads;
  if (output.requires_grad()) grads[output.node()] = grad_output;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto g = grads.find(node);
    if (g == grads.end() || !node->backward) continue;
    bool any_needed_input = false;
    for (const Var& in : node->inputs) {
      auto n = needed.find(in.node());
      any_needed_input = any_needed_input || (n != needed.end() && n->second);
    }
    if (!any_needed_input) continue;
    std::vector<Var> in_grads = node->backward(g->second);
    for (size_t i = 0; i < node->inputs.size(); ++i) {
      Node* in = node->inputs[i].node();
      auto n = needed.find(in);
      if (n == needed.end() || !n->second || !in_grads[i].defined()) continue;
      auto existing = grads.find(in);
      if (existing == grads.end()) {
        grads.emplace(in, in_grads[i]);
      } else {
        existing->second = add(existing->second, in_grads[i]);
      }
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    auto g = w.defined() ? grads.find(w.node()) : grads.end();
    if (g != grads.end()) {
      out.push_back(g->second);
    } else {
      out.push_back(zeros(w.defined() ? w.rows() : 0, w.defined() ? w.cols() : 0));
    }
  }
  return out;
}

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  const Eigen::Index inner_a = ta ? a.rows() : a.cols();
  const Eigen::Index inner_b = tb ? b.cols() : b.rows();
  require(inner_a == inner_b, ErrorCode::shape_mismatch, "matmul: inner dimensions differ");
  Matrix value;
  if (!ta && !tb) value.noalias() = a.value() * b.value();
  else if (!ta && tb) value.noalias() = a.value() * b.value().transpose();
  else if (ta && !tb) value.noalias() = a.value().transpose() * b.value();
  else value.noalias() = a.value().transpose() * b.value().transpose();
  return make_op(std::move(value), {a, b}, [a, b, ta, tb](const Var& g, const Need& need) {
    Var ga, gb;
    if (!ta && !tb) {
      if (need[0]) ga = matmul(g, b, false, true);
      if (need[1]) gb = matmul(a, g, true, false);
    } else if (!ta && tb) {
      if (need[0]) ga = matmul(g, b, false, false);
      if (need[1]) gb = matmul(g, a, true, false);
    } else if (ta && !tb) {
      if (need[0]) ga = matmul(b, g, false, true);
      if (need[1]) gb = matmul(a, g, false, false);
    } else {
      if (need[0]) ga = matmul(b, g, true, true);
      if (need[1]) gb = matmul(g, a, true, true);
    }
    return std::vector<Var>{ga, gb};
  });
}

Var affine(const Var& x, const Var& w, const Var& b) {
  require(x.cols() == w.rows(), ErrorCode::shape_mismatch, "affine: input width mismatch");
  require(b.rows() == 1 && b.cols() == w.cols(), ErrorCode::shape_mismatch,
          "affine: bias must be 1 x out");
  Matrix value(x.rows(), w.cols());
  value.noalias() = x.value() * w.value();
  value.rowwise() += b.value().row(0);
  return make_op(std::move(value), {x, w, b}, [x, w](const Var& g, const Need& need) {
    Var gx, gw, gb;
    if (need[0]) gx = matmul(g, w, false, true);
    if (need[1]) gw = matmul(x, g, true, false);
    if (need[2]) gb = sum_rows(g);
    return std::vector<Var>{gx, gw, gb};
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_op(a.value() + b.value(), {a, b},
                 [](const Var& g, const Need&) { return std::vector<Var>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make_op(a.value() - b.value(), {a, b}, [](const Var& g, const Need& need) {
    return std::vector<Var>{g, need[1] ? neg(g) : Var()};
  });
}

Var neg(const Var& a) {
  return make_op(-a.value(), {a}, [](const Var& g, const Need&) { return std::vector<Var>{neg(g)}; });
}

Var scale(const Var& a, double s) {
  return make_op(s * a.value(), {a},
                 [s](const Var& g, const Need&) { return std::vector<Var>{scale(g, s)}; });
}

Var add_scalar(const Var& a, double s) {
  return make_op((a.value().array() + s).matrix(), {a},
                 [](const Var& g, const Need&) { return std::vector<Var>{g}; });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return make_op(a.value().cwiseProduct(b.value()), {a, b}, [a, b](const Var& g, const Need& need) {
    return std::vector<Var>{need[0] ? mul(g, b) : Var(), need[1] ? mul(g, a) : Var()};
  });
}

Var scale_rows(const Var& a, const Eigen::VectorXd& factors) {
  require(factors.size() == a.rows(), ErrorCode::shape_mismatch, "scale_rows: factor count");
  Matrix value = a.value();
  for (Eigen::Index i = 0; i < value.rows(); ++i) value.row(i) *= factors[i];
  return make_op(std::move(value), {a}, [factors](const Var& g, const Need&) {
    return std::vector<Var>{scale_rows(g, factors)};
  });
}

Var scale_cols(const Var& a, const Eigen::VectorXd& factors) {
  require(factors.size() == a.cols(), ErrorCode::shape_mismatch, "scale_cols: factor count");
  Matrix value = a.value() * factors.asDiagonal();
  return make_op(std::move(value), {a}, [factors](const Var& g, const Need&) {
    return std::vector<Var>{scale_cols(g, factors)};
  });
}

Var add_row(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), ErrorCode::shape_mismatch,
          "add_row: row must be 1 x cols");
  Matrix value = a.value();
  value.rowwise() += row.value().row(0);
  return make_op(std::move(value), {a, row}, [](const Var& g, const Need& need) {
    return std::vector<Var>{g, need[1] ? sum_rows(g) : Var()};
  });
}

Var sum_rows(const Var& a) {
  Matrix value = a.value().colwise().sum();
  const Eigen::Index rows = a.rows();
  return make_op(std::move(value), {a}, [rows](const Var& g, const Need&) {
    return std::vector<Var>{broadcast_rows(g, rows)};
  });
}

Var broadcast_rows(const Var& row, Eigen::Index rows) {
  require(row.rows() == 1, ErrorCode::shape_mismatch, "broadcast_rows: expects a single row");
  Matrix value = row.value().replicate(rows, 1);
  return make_op(std::move(value), {row},
                 [](const Var& g, const Need&) { return std::vector<Var>{sum_rows(g)}; });
}

Var sum_all(const Var& a) {
  Matrix value(1, 1);
  value(0, 0) = a.value().sum();
  const Eigen::Index r = a.rows(), c = a.cols();
  return make_op(std::move(value), {a},
                 [r, c](const Var& g, const Need&) { return std::vector<Var>{fill(g, r, c)}; });
}

Var fill(const Var& scalar, Eigen::Index rows, Eigen::Index cols) {
  require(scalar.rows() == 1 && scalar.cols() == 1, ErrorCode::shape_mismatch,
          "fill: expects a 1 x 1 value");
  Matrix value = Matrix::Constant(rows, cols, scalar.value()(0, 0));
  return make_op(std::move(value), {scalar},
                 [](const Var& g, const Need&) { return std::vector<Var>{sum_all(g)}; });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorCode::shape_mismatch, "concat_cols: no operands");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    require(p.rows() == rows, ErrorCode::shape_mismatch, "concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix value(rows, cols);
  std::vector<Eigen::Index> starts;
  starts.reserve(parts.size());
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    starts.push_back(at);
    value.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Eigen::Index> widths;
  widths.reserve(parts.size());
  for (const Var& p : parts) widths.push_back(p.cols());
  return make_op(std::move(value), parts, [starts, widths](const Var& g, const Need& need) {
    std::vector<Var> out(starts.size());
    for (size_t i = 0; i < starts.size(); ++i) {
      if (need[i]) out[i] = slice_cols(g, starts[i], widths[i]);
    }
    return out;
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index width) {
  require(start >= 0 && width >= 0 && start + width <= a.cols(), ErrorCode::shape_mismatch,
          "slice_cols: range out of bounds");
  Matrix value = a.value().middleCols(start, width);
  const Eigen::Index total = a.cols();
  return make_op(std::move(value), {a}, [start, total](const Var& g, const Need&) {
    return std::vector<Var>{pad_cols(g, start, total)};
  });
}

Var pad_cols(const Var& a, Eigen::Index start, Eigen::Index total) {
  require(start >= 0 && start + a.cols() <= total, ErrorCode::shape_mismatch,
          "pad_cols: range out of bounds");
  Matrix value = Matrix::Zero(a.rows(), total);
  value.middleCols(start, a.cols()) = a.value();
  const Eigen::Index width = a.cols();
  return make_op(std::move(value), {a}, [start, width](const Var& g, const Need&) {
    return std::vector<Var>{slice_cols(g, start, width)};
  });
}

Var gather_rows(const Var& a, const Index& ids) {
  const auto& idx = *ids;
  Matrix value(static_cast<Eigen::Index>(idx.size()), a.cols());
  const Matrix& src = a.value();
  for (size_t k = 0; k < idx.size(); ++k) {
    require(idx[k] >= 0 && idx[k] < src.rows(), ErrorCode::shape_mismatch,
            "gather_rows: index out of range");
    value.row(static_cast<Eigen::Index>(k)) = src.row(idx[k]);
  }
  const Eigen::Index rows = a.rows();
  return make_op(std::move(value), {a}, [ids, rows](const Var& g, const Need&) {
    return std::vector<Var>{scatter_add_rows(g, ids, rows)};
  });
}

Var scatter_add_rows(const Var& a, const Index& ids, Eigen::Index rows) {
  const auto& idx = *ids;
  require(static_cast<Eigen::Index>(idx.size()) == a.rows(), ErrorCode::shape_mismatch,
          "scatter_add_rows: one index per row required");
  Matrix value = Matrix::Zero(rows, a.cols());
  const Matrix& src = a.value();
  for (size_t k = 0; k < idx.size(); ++k) {
    require(idx[k] >= 0 && idx[k] < rows, ErrorCode::shape_mismatch,
            "scatter_add_rows: index out of range");
    value.row(idx[k]) += src.row(static_cast<Eigen::Index>(k));
  }
  return make_op(std::move(value), {a}, [ids](const Var& g, const Need&) {
    return std::vector<Var>{gather_rows(g, ids)};
  });
}

Var relu(const Var& a) {
  Matrix value = a.value().cwiseMax(0.0);
  return make_op(std::move(value), {a}, [a](const Var& g, const Need&) {
    return std::vector<Var>{mul(g, constant(mask_positive(a.value())))};
  });
}

Var softplus(const Var& a) {
  const auto& x = a.value().array();
  Matrix value = (x.max(0.0) + (-x.abs()).exp().log1p()).matrix();
  return make_op(std::move(value), {a}, [a](const Var& g, const Need&) {
    return std::vector<Var>{mul(g, sigmoid(a))};
  });
}

Var sigmoid(const Var& a) {
  const auto& x = a.value().array();
  // Split by sign to avoid overflow of exp.
  Matrix value = (x >= 0.0).select(1.0 / (1.0 + (-x).exp()), x.exp() / (1.0 + x.exp())).matrix();
  return make_op(std::move(value), {a}, [a](const Var& g, const Need&) {
    Var s = sigmoid(a);
    return std::vector<Var>{mul(g, mul(s, add_scalar(neg(s), 1.0)))};
  });
}

Var mean_square(const Var& a) {
  const double n = static_cast<double>(a.rows() * a.cols());
  return scale(sum_all(mul(a, a)), n > 0 ? 1.0 / n : 0.0);
}

Var operator+(const Var& a, const Var& b) { return add(a, b); }
Var operator-(const Var& a, const Var& b) { return sub(a, b); }
Var operator*(double s, const Var& a) { return scale(a, s); }

}  // namespace hgn::ad
