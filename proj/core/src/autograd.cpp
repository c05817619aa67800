#include "mstein/autograd.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "mstein/wasserstein.hpp"

namespace mstein::ad {
namespace {

void require_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

Tape& tape_of(Var a) {
  if (a.tape() == nullptr) throw std::invalid_argument("op on an unbound Var");
  return *a.tape();
}

}  // namespace

const Matrix& Var::value() const { return tape_->value(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(*this); }

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::op(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (Var v : inputs) {
    if (v.tape_ != this) throw std::invalid_argument("Tape::op: input from another tape");
    n.requires_grad = n.requires_grad || requires_grad(v);
  }
  if (n.requires_grad && record_) n.backward = std::move(backward);
  if (!record_) n.requires_grad = false;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::ensure_grad(Node& n) {
  if (!n.has_grad) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
}

Matrix& Tape::grad_buffer(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id_)];
  ensure_grad(n);
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape_ != this) throw std::invalid_argument("Tape::backward: foreign root");
  Node& r = nodes_[static_cast<std::size_t>(root.id_)];
  if (r.value.size() != 1) throw std::invalid_argument("Tape::backward: root must be scalar");
  if (!r.requires_grad) return;
  ensure_grad(r);
  r.grad(0, 0) += 1.0;
  for (int id = root.id_; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad || !n.backward) continue;
    // Closures only touch grads of lower-id nodes; nodes_ never reallocates here.
    n.backward(*this, n.grad);
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id_)];
  if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  return tape_of(a).op(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  return tape_of(a).op(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  return tape_of(a).op(a.value().cwiseProduct(b.value()), {a, b},
                       [a, b](Tape& t, const Matrix& g) {
                         t.accumulate(a, g.cwiseProduct(b.value()));
                         t.accumulate(b, g.cwiseProduct(a.value()));
                       });
}

Var scale(Var a, double factor) {
  return tape_of(a).op(a.value() * factor, {a}, [a, factor](Tape& t, const Matrix& g) {
    t.accumulate(a, g * factor);
  });
}

Var add_scalar(Var a, double value) {
  return tape_of(a).op(a.value().array() + value, {a},
                       [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out = a.value() * b.value();
  return tape_of(a).op(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (a.requires_grad()) t.grad_buffer(a).noalias() += g * b.value().transpose();
    if (b.requires_grad()) t.grad_buffer(b).noalias() += a.value().transpose() * g;
  });
}

Var add_row_broadcast(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row_broadcast: row must be 1 x cols(a)");
  }
  Matrix out = a.value().rowwise() + row.value().row(0);
  return tape_of(a).op(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(row, g.colwise().sum());
  });
}

Var gather_rows(Var table, std::span<const int> rows) {
  const Matrix& v = table.value();
  Matrix out(static_cast<Eigen::Index>(rows.size()), v.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= v.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(rows[i]) +
                              " outside table of " + std::to_string(v.rows()) + " rows");
    }
    out.row(static_cast<Eigen::Index>(i)) = v.row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return tape_of(table).op(std::move(out), {table},
                           [table, idx = std::move(idx)](Tape& t, const Matrix& g) {
                             Matrix& tg = t.grad_buffer(table);
                             for (std::size_t i = 0; i < idx.size(); ++i) {
                               tg.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                             }
                           });
}

Var concat_cols(Var a, Var b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row mismatch");
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const auto ac = a.cols();
  const auto bc = b.cols();
  return tape_of(a).op(std::move(out), {a, b}, [a, b, ac, bc](Tape& t, const Matrix& g) {
    t.accumulate(a, g.leftCols(ac));
    t.accumulate(b, g.rightCols(bc));
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index width) {
  if (start < 0 || width < 0 || start + width > a.cols()) {
    throw std::invalid_argument("slice_cols: range out of bounds");
  }
  Matrix out = a.value().middleCols(start, width);
  return tape_of(a).op(std::move(out), {a}, [a, start, width](Tape& t, const Matrix& g) {
    t.grad_buffer(a).middleCols(start, width) += g;
  });
}

Var sum_all(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const auto r = a.rows();
  const auto c = a.cols();
  return tape_of(a).op(std::move(out), {a}, [a, r, c](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean_all(Var a) {
  const auto n = a.value().size();
  if (n == 0) throw std::invalid_argument("mean_all: empty input");
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var elu_plus_one(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  Matrix dydx(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double xi = x.data()[i];
    const double raw = xi > 0.0 ? xi + 1.0 : std::exp(xi);
    if (raw < kVarianceFloor) {
      out.data()[i] = kVarianceFloor;
      dydx.data()[i] = 0.0;
    } else {
      out.data()[i] = raw;
      dydx.data()[i] = xi > 0.0 ? 1.0 : raw;
    }
  }
  return tape_of(a).op(std::move(out), {a}, [a, dydx = std::move(dydx)](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(dydx));
  });
}

Var gelu(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  Matrix dydx(x.rows(), x.cols());
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double xi = x.data()[i];
    const double cdf = 0.5 * (1.0 + std::erf(xi * inv_sqrt2));
    out.data()[i] = xi * cdf;
    dydx.data()[i] = cdf + xi * inv_sqrt2pi * std::exp(-0.5 * xi * xi);
  }
  return tape_of(a).op(std::move(out), {a}, [a, dydx = std::move(dydx)](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(dydx));
  });
}

Var relu(Var a) {
  Matrix out = a.value().cwiseMax(0.0);
  return tape_of(a).op(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, (a.value().array() > 0.0).select(g, 0.0).matrix());
  });
}

Var softplus(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double xi = x.data()[i];
    out.data()[i] = std::max(xi, 0.0) + std::log1p(std::exp(-std::abs(xi)));
  }
  return tape_of(a).op(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    const Matrix& xv = a.value();
    Matrix sig(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      const double xi = xv.data()[i];
      sig.data()[i] = xi >= 0.0 ? 1.0 / (1.0 + std::exp(-xi)) : std::exp(xi) / (1.0 + std::exp(xi));
    }
    t.accumulate(a, g.cwiseProduct(sig));
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = x.value();
  const auto d = xv.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw std::invalid_argument("layer_norm: scale/shift must be 1 x d");
  }
  Matrix normed(xv.rows(), d);
  Vector inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    normed.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (normed.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  return tape_of(x).op(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, normed = std::move(normed), inv_std = std::move(inv_std)](
          Tape& t, const Matrix& g) {
        if (gamma.requires_grad()) t.accumulate(gamma, g.cwiseProduct(normed).colwise().sum());
        if (beta.requires_grad()) t.accumulate(beta, g.colwise().sum());
        if (!x.requires_grad()) return;
        const double n = static_cast<double>(normed.cols());
        Matrix dnorm = g.array().rowwise() * gamma.value().row(0).array();
        Matrix& xg = t.grad_buffer(x);
        for (Eigen::Index r = 0; r < normed.rows(); ++r) {
          const double mean_d = dnorm.row(r).mean();
          const double mean_dn = dnorm.row(r).dot(normed.row(r)) / n;
          xg.row(r).array() += inv_std(r) * (dnorm.row(r).array() - mean_d -
                                             normed.row(r).array() * mean_dn);
        }
      });
}

Var dropout(Var x, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  const Matrix& xv = x.value();
  Matrix keep(xv.rows(), xv.cols());
  const double scale_kept = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < keep.size(); ++i) {
    keep.data()[i] = rng->uniform01() >= rate ? scale_kept : 0.0;
  }
  Matrix out = xv.cwiseProduct(keep);
  return tape_of(x).op(std::move(out), {x}, [x, keep = std::move(keep)](Tape& t, const Matrix& g) {
    t.accumulate(x, g.cwiseProduct(keep));
  });
}

}  // namespace mstein::ad
