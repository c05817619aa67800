#pragma once

#include <span>
#include <vector>

#include "mstein/autograd.hpp"

namespace mstein {

/// Lower bound on every variance produced by elu_plus_one.
inline constexpr double kVarianceFloor = 1e-8;

/// Diagonal Gaussian N(mean, diag(variance)).
struct GaussianState {
  Vector mean;
  Vector variance;

  Eigen::Index dim() const { return mean.size(); }
};

/// ELU(x) + 1 clamped below at kVarianceFloor.
double elu_plus_one(double x);
Vector elu_plus_one(const Vector& x);

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// |m1 - m2|^2 + |sqrt(v1) - sqrt(v2)|^2. Summation runs in index order, so
/// the result is exactly symmetric in its arguments.
double w2_sq(const double* mean1, const double* var1, const double* mean2,
             const double* var2, Eigen::Index dim);
double w2_sq(const GaussianState& a, const GaussianState& b);

using DistanceMatrix = Matrix;

/// Entry (i, j) = w2_sq(queries[i], keys[j]), bit-identical to scalar calls.
DistanceMatrix w2_sq_batch(std::span<const GaussianState> queries,
                           std::span<const GaussianState> keys);

struct W2Gradient {
  Vector d_mean1;
  Vector d_var1;
  Vector d_mean2;
  Vector d_var2;
};

/// Analytic partial derivatives of w2_sq.
W2Gradient w2_sq_grad(const GaussianState& a, const GaussianState& b);

namespace ad {

/// out(i) = w2_sq(row i of (mean_a, var_a), row i of (mean_b, var_b)); n x 1.
Var w2_rows(Var mean_a, Var var_a, Var mean_b, Var var_b);

/// out(i, j) = w2_sq(row i of a, row j of b); n x m.
Var w2_pairwise(Var mean_a, Var var_a, Var mean_b, Var var_b);

}  // namespace ad
}  // namespace mstein
