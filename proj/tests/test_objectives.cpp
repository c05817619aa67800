#include <doctest.h>

#include <cmath>
#include <vector>

#include "mstein/errors.hpp"
#include "mstein/objectives.hpp"
#include "test_support.hpp"

using namespace mstein;
using testing::random_state;

namespace {

ContrastiveBatch random_batch(std::size_t pairs, Eigen::Index d, Rng& rng) {
  ContrastiveBatch b;
  for (std::size_t i = 0; i < 2 * pairs; ++i) b.views.push_back(random_state(d, rng));
  return b;
}

/// Direct form: -log(exp(-d_vp) / sum_{j != v} exp(-d_vj)), naive exponentials.
double naive_cl(const ContrastiveBatch& b) {
  const std::size_t n = b.views.size();
  double total = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    const std::size_t p = v ^ 1U;
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != v) denom += std::exp(-w2_sq(b.views[v], b.views[j]));
    }
    total += -std::log(std::exp(-w2_sq(b.views[v], b.views[p])) / denom);
  }
  return total / static_cast<double>(n);
}

/// Alignment plus log-partition form of the same loss.
double decomposed_cl(const ContrastiveBatch& b) {
  const std::size_t n = b.views.size();
  double total = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    const std::size_t p = v ^ 1U;
    const double pos = w2_sq(b.views[v], b.views[p]);
    double neg = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != v && j != p) neg += std::exp(-w2_sq(b.views[v], b.views[j]));
    }
    total += pos + std::log(std::exp(-pos) + neg);
  }
  return total / static_cast<double>(n);
}

double naive_cosine(const std::vector<Vector>& e, double tau) {
  const std::size_t n = e.size();
  auto sim = [&](std::size_t i, std::size_t j) { return e[i].dot(e[j]) / (e[i].norm() * e[j].norm()) / tau; };
  double total = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != v) denom += std::exp(sim(v, j));
    }
    total += -std::log(std::exp(sim(v, v ^ 1U)) / denom);
  }
  return total / static_cast<double>(n);
}

EncodedSequence sequence_of(std::vector<GaussianState> states) {
  EncodedSequence s;
  s.valid.assign(states.size(), true);
  s.states = std::move(states);
  return s;
}

ItemCatalog random_catalog(int items, Eigen::Index d, Rng& rng) {
  ItemCatalog c;
  c.mean = testing::random_matrix(items, d, rng);
  c.variance = testing::random_matrix(items, d, rng).array().abs() + 0.1;
  return c;
}

}  // namespace

TEST_CASE("rec_loss") {
  Rng rng(1);
  ItemCatalog cat = random_catalog(4, 3, rng);

  SUBCASE("equal distances give log 2") {
    // Items 1 and 2 are identical, so any state is equidistant.
    cat.mean.row(1) = cat.mean.row(0);
    cat.variance.row(1) = cat.variance.row(0);
    const auto seq = sequence_of({random_state(3, rng), random_state(3, rng)});
    CHECK(rec_loss(seq, std::vector<int>{1, 1}, std::vector<int>{2, 2}, cat) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }

  SUBCASE("a far negative drives the term to zero") {
    cat.mean.row(3).setConstant(1e4);
    const auto seq = sequence_of({cat.state(1)});
    CHECK(rec_loss(seq, std::vector<int>{1}, std::vector<int>{4}, cat) < 1e-300);
  }

  SUBCASE("padding positions are skipped and the rest match a per-position oracle") {
    const auto seq = sequence_of({random_state(3, rng), random_state(3, rng), random_state(3, rng)});
    const std::vector<int> pos{0, 2, 3};
    const std::vector<int> neg{0, 4, 1};
    double expected = 0.0;
    for (std::size_t t = 1; t < 3; ++t) {
      const double diff = w2_sq(seq.states[t], cat.state(neg[t])) - w2_sq(seq.states[t], cat.state(pos[t]));
      expected += -std::log(1.0 / (1.0 + std::exp(-diff)));
    }
    CHECK(rec_loss(seq, pos, neg, cat) == doctest::Approx(expected / 2.0).epsilon(1e-12));
    CHECK(rec_loss(seq, std::vector<int>{0, 0, 0}, std::vector<int>{0, 0, 0}, cat) == 0.0);
    CHECK_THROWS_AS(rec_loss(seq, std::vector<int>{1}, std::vector<int>{2}, cat), std::invalid_argument);
  }
}

TEST_CASE("pvn_loss") {
  Rng rng(2);
  ItemCatalog cat = random_catalog(3, 2, rng);

  SUBCASE("inactive hinge") {
    cat.mean.row(1) = cat.mean.row(0).array() + 10.0;
    const auto seq = sequence_of({cat.state(1)});
    CHECK(pvn_loss(seq, std::vector<int>{1}, std::vector<int>{2}, cat, 0.5) == 0.0);
  }

  SUBCASE("zero margin with identical positive and negative reduces to the positive distance") {
    cat.mean.row(1) = cat.mean.row(0);
    cat.variance.row(1) = cat.variance.row(0);
    const auto h = random_state(2, rng);
    const auto seq = sequence_of({h});
    CHECK(pvn_loss(seq, std::vector<int>{1}, std::vector<int>{2}, cat, 0.0) ==
          doctest::Approx(w2_sq(h, cat.state(1))).epsilon(1e-12));
  }

  SUBCASE("random instance matches a scalar oracle") {
    const auto seq = sequence_of({random_state(2, rng), random_state(2, rng), random_state(2, rng)});
    const std::vector<int> pos{1, 3, 2};
    const std::vector<int> neg{2, 1, 3};
    double expected = 0.0;
    for (std::size_t t = 0; t < 3; ++t) {
      expected += std::max(0.0, w2_sq(seq.states[t], cat.state(pos[t])) -
                                    w2_sq(cat.state(pos[t]), cat.state(neg[t])) + 1.5);
    }
    CHECK(pvn_loss(seq, pos, neg, cat, 1.5) == doctest::Approx(expected / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("mstein_cl_loss contract") {
  Rng rng(3);
  CHECK(mstein_cl_loss(random_batch(1, 4, rng)) == 0.0);

  ContrastiveBatch same;
  const auto g = random_state(3, rng);
  same.views.assign(4, g);
  CHECK(std::abs(mstein_cl_loss(same) - std::log(3.0)) <= 1e-9);

  for (std::size_t n = 1; n <= 8; ++n) {
    for (int trial = 0; trial < 5; ++trial) {
      const ContrastiveBatch b = random_batch(n, 3, rng);
      const double loss = mstein_cl_loss(b);
      CHECK(loss >= 0.0);
      CHECK(std::abs(loss - naive_cl(b)) <= 1e-9);
      CHECK(std::abs(loss - decomposed_cl(b)) <= 1e-9);

      ContrastiveBatch swapped = b;
      for (std::size_t i = 0; i < n; ++i) std::swap(swapped.views[2 * i], swapped.views[2 * i + 1]);
      CHECK(std::abs(mstein_cl_loss(swapped) - loss) <= 1e-12);
    }
  }

  ContrastiveBatch odd;
  odd.views.push_back(g);
  CHECK_THROWS_AS(mstein_cl_loss(odd), std::invalid_argument);
}

TEST_CASE("mstein_cl_loss is finite for distant views") {
  Rng rng(4);
  ContrastiveBatch b = random_batch(3, 2, rng);
  for (std::size_t v = 0; v < b.views.size(); ++v) b.views[v].mean *= 1e3;
  const double loss = mstein_cl_loss(b);
  CHECK(std::isfinite(loss));
  CHECK(loss >= 0.0);
}

TEST_CASE("mstein_cl_loss monotonicity") {
  // Logit perturbations in distance space: raising the positive distance
  // raises the loss, raising a negative distance lowers it.
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const ContrastiveBatch b = random_batch(3, 3, rng);
    const auto n = static_cast<Eigen::Index>(b.views.size());
    Matrix logits(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) logits(i, j) = -w2_sq(b.views[i], b.views[j]);
    }
    const double base = info_nce_from_logits(logits).value;
    CHECK(std::abs(base - mstein_cl_loss(b)) <= 1e-12);
    for (double step : {1e-3, 0.5}) {
      Matrix pos = logits;
      pos(0, 1) -= step;
      pos(1, 0) -= step;
      CHECK(info_nce_from_logits(pos).value > base);
      Matrix neg = logits;
      neg(0, 4) -= step;
      neg(4, 0) -= step;
      CHECK(info_nce_from_logits(neg).value < base);
    }
    // Moving one view away from its partner along the mean direction.
    ContrastiveBatch moved = b;
    const Vector dir = b.views[0].mean - b.views[1].mean;
    moved.views[0].mean += 0.1 * dir;
    CHECK(w2_sq(moved.views[0], moved.views[1]) > w2_sq(b.views[0], b.views[1]));
  }
}

TEST_CASE("info_nce gradient") {
  Rng rng(6);
  const Matrix logits = testing::random_matrix(6, 6, rng);
  const double err = testing::tape_grad_error({logits}, [](ad::Tape&, const std::vector<ad::Var>& v) {
    return ad::info_nce(v[0]);
  });
  CHECK(err < 1e-6);
}

TEST_CASE("cosine_infonce_loss") {
  Rng rng(7);
  std::vector<Vector> two{testing::random_vector(4, rng), testing::random_vector(4, rng)};
  CHECK(cosine_infonce_loss(two, 1.0) == 0.0);

  std::vector<Vector> same(4, testing::random_vector(5, rng));
  CHECK(cosine_infonce_loss(same, 1.0) == doctest::Approx(std::log(3.0)).epsilon(1e-12));

  for (double tau : {0.5, 1.0, 2.0}) {
    std::vector<Vector> e;
    for (int i = 0; i < 8; ++i) e.push_back(testing::random_vector(5, rng));
    CHECK(std::abs(cosine_infonce_loss(e, tau) - naive_cosine(e, tau)) <= 1e-9);
  }

  std::vector<Vector> zero{Vector::Zero(3), Vector::Ones(3)};
  CHECK_THROWS_AS(cosine_infonce_loss(zero, 1.0), NumericalError);

  const GaussianState g = random_state(3, rng);
  const Vector cat = deterministic_embedding(g);
  CHECK(cat.head(3) == g.mean);
  CHECK(cat.tail(3) == g.variance);

  const Matrix x = testing::random_matrix(5, 4, rng);
  const double err = testing::tape_grad_error({x}, [](ad::Tape& t, const std::vector<ad::Var>& v) {
    return testing::project(t, ad::cosine_similarity_matrix(v[0]));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("diagnostics") {
  Rng rng(8);
  ContrastiveBatch aligned;
  for (int i = 0; i < 3; ++i) {
    const auto g = random_state(2, rng);
    aligned.views.push_back(g);
    aligned.views.push_back(g);
  }
  CHECK(alignment_diag(aligned) == 0.0);

  const Diagnostic single = uniformity_diag(random_batch(1, 2, rng));
  CHECK_FALSE(single.defined);
  CHECK(std::isnan(single.value));

  const ContrastiveBatch b = random_batch(4, 3, rng);
  double align = 0.0;
  for (std::size_t i = 0; i < 4; ++i) align += w2_sq(b.views[2 * i], b.views[2 * i + 1]);
  CHECK(alignment_diag(b) == doctest::Approx(align / 4.0).epsilon(1e-12));

  double uni = 0.0;
  for (std::size_t v = 0; v < 8; ++v) {
    double s = 0.0;
    for (std::size_t j = 0; j < 8; ++j) {
      if (j != v && j != (v ^ 1U)) s += std::exp(-w2_sq(b.views[v], b.views[j]));
    }
    uni += std::log(s);
  }
  const Diagnostic u = uniformity_diag(b);
  CHECK(u.defined);
  CHECK(u.value == doctest::Approx(uni / 8.0).epsilon(1e-12));
}

TEST_CASE("total_loss") {
  CHECK(total_loss(0.5, 0.2, 1.0, 0.1, 0.1).total == doctest::Approx(0.62).epsilon(1e-12));
  CHECK(total_loss(0.5, 0.2, 123.0, 0.1, 0.0).total == total_loss(0.5, 0.2, -7.0, 0.1, 0.0).total);
  CHECK(total_loss(0.5, 0.2, 1.0, 0.0, 1.0).total == doctest::Approx(1.5));
  const LossBreakdown b = total_loss(0.3, 0.7, 0.9, 0.25, 0.5);
  CHECK(std::abs(b.total - (b.rec_loss + 0.25 * b.pvn_loss + 0.5 * b.cl_loss)) <= 1e-9);
  CHECK_THROWS_AS(total_loss(1, 1, 1, -0.1, 0.1), std::invalid_argument);
}

TEST_CASE("tape loss ops") {
  Rng rng(9);
  const Matrix a = testing::random_matrix(5, 1, rng);
  const Matrix b = testing::random_matrix(5, 1, rng);
  CHECK(testing::tape_grad_error({a, b}, [](ad::Tape&, const std::vector<ad::Var>& v) {
          return ad::rec_loss(v[0], v[1]);
        }) < 1e-6);
  CHECK(testing::tape_grad_error({a, b}, [](ad::Tape&, const std::vector<ad::Var>& v) {
          return ad::pvn_loss(v[0], v[1], 0.3);
        }) < 1e-6);
  ad::Tape tape(false);
  double expected = 0.0;
  for (int i = 0; i < 5; ++i) expected += std::log1p(std::exp(a(i, 0) - b(i, 0)));
  CHECK(ad::rec_loss(tape.constant(a), tape.constant(b)).value()(0, 0) ==
        doctest::Approx(expected / 5.0).epsilon(1e-12));
}
