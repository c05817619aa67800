#pragma once

#include <Eigen/Core>
#include <functional>
#include <span>
#include <vector>

#include "mstein/rng.hpp"

namespace mstein {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

namespace ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode tape over dense row-major matrices. Nodes are appended in
/// evaluation order, so reverse insertion order is a valid topological order.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  /// With record == false no backward closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad = false);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  /// Appends an op node. The node requires grad when any input does; the
  /// backward closure is dropped otherwise.
  Var op(Matrix value, std::initializer_list<Var> inputs, Backward backward);

  /// Seeds d(root)/d(root) = 1 and runs every recorded closure. root must be
  /// 1x1.
  void backward(Var root);

  /// Adds delta into v's gradient (no-op for nodes without grad).
  template <typename Expr>
  void accumulate(Var v, const Expr& delta) {
    Node& n = nodes_[static_cast<std::size_t>(v.id_)];
    if (!n.requires_grad) return;
    ensure_grad(n);
    n.grad += delta;
  }
  /// Mutable gradient buffer of v, allocated on first use. v must require grad.
  Matrix& grad_buffer(Var v);

  /// Gradient after backward(); zero matrix when nothing flowed into v.
  Matrix grad(Var v) const;

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id_)].value; }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id_)].requires_grad; }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };
  void ensure_grad(Node& n);

  bool record_;
  std::vector<Node> nodes_;
};

// Generic ops. Shapes are checked and mismatches throw std::invalid_argument.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);                  // elementwise
Var scale(Var a, double factor);
Var add_scalar(Var a, double value);
Var matmul(Var a, Var b);
Var add_row_broadcast(Var a, Var row);  // a (n x d) + row (1 x d)
Var gather_rows(Var table, std::span<const int> rows);
Var concat_cols(Var a, Var b);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index width);
Var sum_all(Var a);
Var mean_all(Var a);

/// max(eps, x + 1) for x > 0, max(eps, exp(x)) otherwise (ELU(x) + 1).
Var elu_plus_one(Var a);
Var gelu(Var a);
Var relu(Var a);
/// log(1 + exp(x)), overflow-safe.
Var softplus(Var a);

/// Row-wise layer normalization with learned scale/shift rows (1 x d).
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-12);

/// Inverted dropout; identity when rate == 0 or rng == nullptr.
Var dropout(Var x, double rate, Rng* rng);

}  // namespace ad
}  // namespace mstein
