#include "mstein/objectives.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "mstein/errors.hpp"

namespace mstein {
namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

void check_targets(const EncodedSequence& encoded, std::span<const int> positives,
                   std::span<const int> negatives) {
  if (positives.size() != encoded.states.size() || negatives.size() != encoded.states.size()) {
    throw std::invalid_argument("loss: target count must equal position count");
  }
}

Matrix w2_logits(const ContrastiveBatch& batch) {
  const auto n = static_cast<Eigen::Index>(batch.views.size());
  Matrix logits(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      logits(i, j) = -w2_sq(batch.views[static_cast<std::size_t>(i)],
                            batch.views[static_cast<std::size_t>(j)]);
    }
  }
  return logits;
}

void check_pairs(std::size_t views) {
  if (views < 2 || views % 2 != 0) {
    throw std::invalid_argument("contrastive batch needs 2N views with N >= 1");
  }
}

}  // namespace

LossBreakdown total_loss(double rec, double pvn, double cl, double lambda, double beta) {
  if (lambda < 0.0 || beta < 0.0) throw std::invalid_argument("total_loss: negative weight");
  LossBreakdown out;
  out.rec_loss = rec;
  out.pvn_loss = pvn;
  out.cl_loss = cl;
  out.total = rec + lambda * pvn + beta * cl;
  return out;
}

double rec_loss(const EncodedSequence& encoded, std::span<const int> positives,
                std::span<const int> negatives, const ItemCatalog& catalog) {
  check_targets(encoded, positives, negatives);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < positives.size(); ++t) {
    if (positives[t] == 0) continue;
    const auto& h = encoded.states[t];
    const double d_pos = w2_sq(h, catalog.state(positives[t]));
    const double d_neg = w2_sq(h, catalog.state(negatives[t]));
    sum += softplus(d_pos - d_neg);
    ++count;
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

double pvn_loss(const EncodedSequence& encoded, std::span<const int> positives,
                std::span<const int> negatives, const ItemCatalog& catalog, double margin) {
  check_targets(encoded, positives, negatives);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < positives.size(); ++t) {
    if (positives[t] == 0) continue;
    const GaussianState pos = catalog.state(positives[t]);
    const double d_pos = w2_sq(encoded.states[t], pos);
    const double d_pn = w2_sq(pos, catalog.state(negatives[t]));
    sum += std::max(0.0, d_pos - d_pn + margin);
    ++count;
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

InfoNceResult info_nce_from_logits(const Matrix& logits) {
  const auto n = logits.rows();
  if (logits.cols() != n) throw std::invalid_argument("info_nce: logits must be square");
  check_pairs(static_cast<std::size_t>(n));
  InfoNceResult out;
  out.grad = Matrix::Zero(n, n);
  const double inv_anchors = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (Eigen::Index v = 0; v < n; ++v) {
    const Eigen::Index p = v ^ 1;
    double max_logit = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != v) max_logit = std::max(max_logit, logits(v, j));
    }
    double denom = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != v) denom += std::exp(logits(v, j) - max_logit);
    }
    const double log_partition = max_logit + std::log(denom);
    total += log_partition - logits(v, p);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == v) continue;
      out.grad(v, j) = inv_anchors * std::exp(logits(v, j) - log_partition);
    }
    out.grad(v, p) -= inv_anchors;
  }
  out.value = total * inv_anchors;
  return out;
}

double mstein_cl_loss(const ContrastiveBatch& batch) {
  check_pairs(batch.views.size());
  return info_nce_from_logits(w2_logits(batch)).value;
}

Vector deterministic_embedding(const GaussianState& state) {
  Vector e(state.mean.size() + state.variance.size());
  e << state.mean, state.variance;
  return e;
}

double cosine_infonce_loss(std::span<const Vector> embeddings, double temperature) {
  check_pairs(embeddings.size());
  if (!(temperature > 0.0)) throw std::invalid_argument("cosine_infonce_loss: temperature <= 0");
  const auto n = static_cast<Eigen::Index>(embeddings.size());
  std::vector<double> norms;
  for (const auto& e : embeddings) {
    const double nrm = e.norm();
    if (!(nrm > 0.0)) throw NumericalError("cosine_infonce_loss: zero-norm embedding");
    norms.push_back(nrm);
  }
  Matrix logits(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto ui = static_cast<std::size_t>(i);
      const auto uj = static_cast<std::size_t>(j);
      logits(i, j) = embeddings[ui].dot(embeddings[uj]) / (norms[ui] * norms[uj]) / temperature;
    }
  }
  return info_nce_from_logits(logits).value;
}

double alignment_diag(const ContrastiveBatch& batch) {
  check_pairs(batch.views.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < batch.pairs(); ++i) sum += w2_sq(batch.views[2 * i], batch.views[2 * i + 1]);
  return sum / static_cast<double>(batch.pairs());
}

Diagnostic uniformity_diag(const ContrastiveBatch& batch) {
  check_pairs(batch.views.size());
  if (batch.pairs() < 2) return {std::numeric_limits<double>::quiet_NaN(), false};
  const Matrix logits = w2_logits(batch);
  const auto n = logits.rows();
  double total = 0.0;
  for (Eigen::Index v = 0; v < n; ++v) {
    const Eigen::Index p = v ^ 1;
    double max_logit = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != v && j != p) max_logit = std::max(max_logit, logits(v, j));
    }
    double s = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != v && j != p) s += std::exp(logits(v, j) - max_logit);
    }
    total += max_logit + std::log(s);
  }
  return {total / static_cast<double>(n), true};
}

namespace ad {

Var info_nce(Var logits) {
  InfoNceResult r = info_nce_from_logits(logits.value());
  Matrix out(1, 1);
  out(0, 0) = r.value;
  return logits.tape()->op(std::move(out), {logits},
                           [logits, grad = std::move(r.grad)](Tape& t, const Matrix& g) {
                             t.accumulate(logits, grad * g(0, 0));
                           });
}

Var cosine_similarity_matrix(Var x) {
  const Matrix& xv = x.value();
  const Vector norms = xv.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (!(norms(i) > 0.0)) throw NumericalError("cosine similarity: zero-norm embedding");
  }
  const Matrix unit = xv.array().colwise() / norms.array();
  Matrix out = unit * unit.transpose();
  return x.tape()->op(std::move(out), {x}, [x, unit, norms](Tape& t, const Matrix& g) {
    // S = U U^T with U = diag(1/|x|) X.
    const Matrix gsym = g + g.transpose();
    const Matrix dU = gsym * unit;
    // dX_i = (dU_i - (dU_i . u_i) u_i) / |x_i|
    const Vector proj = dU.cwiseProduct(unit).rowwise().sum();
    const Matrix dX = ((dU - (unit.array().colwise() * proj.array()).matrix()).array().colwise() /
                       norms.array()).matrix();
    t.accumulate(x, dX);
  });
}

Var rec_loss(Var d_pos, Var d_neg) { return mean_all(softplus(sub(d_pos, d_neg))); }

Var pvn_loss(Var d_pos, Var d_pos_neg, double margin) {
  return mean_all(relu(add_scalar(sub(d_pos, d_pos_neg), margin)));
}

}  // namespace ad
}  // namespace mstein
