#include "mstein/wasserstein.hpp"

#include <cmath>
#include <stdexcept>

namespace mstein {
namespace {

void require_dims(const GaussianState& a, const GaussianState& b) {
  if (a.mean.size() != a.variance.size() || b.mean.size() != b.variance.size() ||
      a.mean.size() != b.mean.size()) {
    throw std::invalid_argument("w2_sq: dimension mismatch");
  }
}

void require_same_shape4(ad::Var a, ad::Var b, ad::Var c, ad::Var d, const char* op) {
  auto same = [](ad::Var x, ad::Var y) { return x.rows() == y.rows() && x.cols() == y.cols(); };
  if (!same(a, b) || !same(c, d) || a.cols() != c.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

double elu_plus_one(double x) {
  const double y = x > 0.0 ? x + 1.0 : std::exp(x);
  return y < kVarianceFloor ? kVarianceFloor : y;
}

Vector elu_plus_one(const Vector& x) {
  Vector out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out(i) = elu_plus_one(x(i));
  return out;
}

double w2_sq(const double* mean1, const double* var1, const double* mean2,
             const double* var2, Eigen::Index dim) {
  double mean_term = 0.0;
  double cov_term = 0.0;
  for (Eigen::Index k = 0; k < dim; ++k) {
    const double dm = mean1[k] - mean2[k];
    mean_term += dm * dm;
    const double ds = std::sqrt(var1[k]) - std::sqrt(var2[k]);
    cov_term += ds * ds;
  }
  return mean_term + cov_term;
}

double w2_sq(const GaussianState& a, const GaussianState& b) {
  require_dims(a, b);
  return w2_sq(a.mean.data(), a.variance.data(), b.mean.data(), b.variance.data(), a.dim());
}

DistanceMatrix w2_sq_batch(std::span<const GaussianState> queries,
                           std::span<const GaussianState> keys) {
  DistanceMatrix out(static_cast<Eigen::Index>(queries.size()),
                     static_cast<Eigen::Index>(keys.size()));
  for (std::size_t i = 0; i < queries.size(); ++i) {
    for (std::size_t j = 0; j < keys.size(); ++j) {
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = w2_sq(queries[i], keys[j]);
    }
  }
  return out;
}

W2Gradient w2_sq_grad(const GaussianState& a, const GaussianState& b) {
  require_dims(a, b);
  W2Gradient g;
  g.d_mean1 = 2.0 * (a.mean - b.mean);
  g.d_mean2 = -g.d_mean1;
  const Vector sa = a.variance.cwiseSqrt();
  const Vector sb = b.variance.cwiseSqrt();
  const Vector diff = sa - sb;
  g.d_var1 = diff.cwiseQuotient(sa);
  g.d_var2 = -diff.cwiseQuotient(sb);
  return g;
}

namespace ad {

Var w2_rows(Var mean_a, Var var_a, Var mean_b, Var var_b) {
  require_same_shape4(mean_a, var_a, mean_b, var_b, "w2_rows");
  if (mean_a.rows() != mean_b.rows()) throw std::invalid_argument("w2_rows: row mismatch");
  const auto n = mean_a.rows();
  const auto d = mean_a.cols();
  Matrix out(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    out(i, 0) = w2_sq(mean_a.value().row(i).data(), var_a.value().row(i).data(),
                      mean_b.value().row(i).data(), var_b.value().row(i).data(), d);
  }
  return mean_a.tape()->op(
      std::move(out), {mean_a, var_a, mean_b, var_b},
      [=](Tape& t, const Matrix& g) {
        const Matrix dm = mean_a.value() - mean_b.value();
        const Matrix sa = var_a.value().cwiseSqrt();
        const Matrix sb = var_b.value().cwiseSqrt();
        const Matrix ds = sa - sb;
        const Vector gcol = g.col(0);
        t.accumulate(mean_a, ((2.0 * dm).array().colwise() * gcol.array()).matrix());
        t.accumulate(mean_b, ((-2.0 * dm).array().colwise() * gcol.array()).matrix());
        t.accumulate(var_a, (ds.cwiseQuotient(sa).array().colwise() * gcol.array()).matrix());
        t.accumulate(var_b, ((-ds).cwiseQuotient(sb).array().colwise() * gcol.array()).matrix());
      });
}

Var w2_pairwise(Var mean_a, Var var_a, Var mean_b, Var var_b) {
  require_same_shape4(mean_a, var_a, mean_b, var_b, "w2_pairwise");
  const auto n = mean_a.rows();
  const auto m = mean_b.rows();
  const auto d = mean_a.cols();
  Matrix out(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      out(i, j) = w2_sq(mean_a.value().row(i).data(), var_a.value().row(i).data(),
                        mean_b.value().row(j).data(), var_b.value().row(j).data(), d);
    }
  }
  return mean_a.tape()->op(
      std::move(out), {mean_a, var_a, mean_b, var_b},
      [=](Tape& t, const Matrix& g) {
        const Matrix& ma = mean_a.value();
        const Matrix& mb = mean_b.value();
        const Matrix sa = var_a.value().cwiseSqrt();
        const Matrix sb = var_b.value().cwiseSqrt();
        Matrix gma = Matrix::Zero(n, d), gva = Matrix::Zero(n, d);
        Matrix gmb = Matrix::Zero(m, d), gvb = Matrix::Zero(m, d);
        for (Eigen::Index i = 0; i < n; ++i) {
          for (Eigen::Index j = 0; j < m; ++j) {
            const double gij = g(i, j);
            if (gij == 0.0) continue;
            const auto dm = (ma.row(i) - mb.row(j)).eval();
            const auto ds = (sa.row(i) - sb.row(j)).eval();
            gma.row(i) += 2.0 * gij * dm;
            gmb.row(j) -= 2.0 * gij * dm;
            gva.row(i).array() += gij * ds.array() / sa.row(i).array();
            gvb.row(j).array() -= gij * ds.array() / sb.row(j).array();
          }
        }
        t.accumulate(mean_a, gma);
        t.accumulate(var_a, gva);
        t.accumulate(mean_b, gmb);
        t.accumulate(var_b, gvb);
      });
}

}  // namespace ad
}  // namespace mstein
