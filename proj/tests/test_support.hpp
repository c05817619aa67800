#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "mstein/autograd.hpp"
#include "mstein/rng.hpp"
#include "mstein/wasserstein.hpp"

namespace testing {

using mstein::Matrix;
using mstein::Vector;

inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Central differences of f with respect to every entry of x.
inline Matrix numeric_grad(Matrix& x, const std::function<double()>& f, double h = 1e-5) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + h;
    const double up = f();
    x.data()[i] = saved - h;
    const double down = f();
    x.data()[i] = saved;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_rel_err(const Matrix& analytic, const Matrix& numeric) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, rel_err(analytic.data()[i], numeric.data()[i]));
  }
  return worst;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, mstein::Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline Vector random_vector(Eigen::Index n, mstein::Rng& rng, double scale = 1.0) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return v;
}

inline mstein::GaussianState random_state(Eigen::Index d, mstein::Rng& rng) {
  mstein::GaussianState g;
  g.mean = random_vector(d, rng);
  g.variance.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) g.variance[i] = 0.1 + 2.0 * rng.uniform01();
  return g;
}

using TapeBuilder =
    std::function<mstein::ad::Var(mstein::ad::Tape&, const std::vector<mstein::ad::Var>&)>;

/// Largest relative error between tape gradients and central differences of
/// the scalar built from the given inputs.
inline double tape_grad_error(std::vector<Matrix> inputs, const TapeBuilder& build,
                              double h = 1e-5) {
  std::vector<Matrix> analytic;
  {
    mstein::ad::Tape tape;
    std::vector<mstein::ad::Var> vars;
    for (const auto& m : inputs) vars.push_back(tape.leaf(m, true));
    tape.backward(build(tape, vars));
    for (auto v : vars) analytic.push_back(tape.grad(v));
  }
  auto value = [&] {
    mstein::ad::Tape tape(false);
    std::vector<mstein::ad::Var> vars;
    for (const auto& m : inputs) vars.push_back(tape.leaf(m, false));
    return build(tape, vars).value()(0, 0);
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    worst = std::max(worst, max_rel_err(analytic[k], numeric_grad(inputs[k], value, h)));
  }
  return worst;
}

/// Scalar projection sum(x .* W) with a fixed pseudo-random W.
inline mstein::ad::Var project(mstein::ad::Tape& tape, mstein::ad::Var x, std::uint64_t seed = 99) {
  mstein::Rng rng(seed);
  return mstein::ad::sum_all(mstein::ad::mul(x, tape.constant(random_matrix(x.rows(), x.cols(), rng))));
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mstein_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace testing
