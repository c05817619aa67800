#pragma once

#include <span>
#include <vector>

#include "mstein/autograd.hpp"
#include "mstein/encoder.hpp"
#include "mstein/wasserstein.hpp"

namespace mstein {

/// 2N sequence-level states; views[2i] and views[2i + 1] are the two
/// augmentations of the same source sequence.
struct ContrastiveBatch {
  std::vector<GaussianState> views;

  std::size_t pairs() const { return views.size() / 2; }
  static std::size_t partner(std::size_t view) { return view ^ 1U; }
};

struct LossBreakdown {
  double rec_loss = 0.0;
  double pvn_loss = 0.0;
  double cl_loss = 0.0;
  double total = 0.0;
  double alignment_diag = 0.0;
  double uniformity_diag = 0.0;
  bool uniformity_defined = false;
};

/// total = rec + lambda * pvn + beta * cl.
LossBreakdown total_loss(double rec, double pvn, double cl, double lambda, double beta);

/// Mean over positions with positives[t] != 0 of
/// -log sigmoid(w2_sq(h_t, neg_t) - w2_sq(h_t, pos_t)).
double rec_loss(const EncodedSequence& encoded, std::span<const int> positives,
                std::span<const int> negatives, const ItemCatalog& catalog);

/// Mean over the same positions of
/// max(0, w2_sq(h_t, pos_t) - w2_sq(pos_t, neg_t) + margin).
double pvn_loss(const EncodedSequence& encoded, std::span<const int> positives,
                std::span<const int> negatives, const ItemCatalog& catalog, double margin);

/// InfoNCE over logits s (2N x 2N, paired 2i <-> 2i+1), averaged over all 2N
/// anchors: -s_vp + logsumexp_{j != v} s_vj. Diagonal entries are ignored.
struct InfoNceResult {
  double value = 0.0;
  Matrix grad;  // d value / d logits
};
InfoNceResult info_nce_from_logits(const Matrix& logits);

/// InfoNCE with logits -w2_sq(view_v, view_j); 0 when N == 1.
double mstein_cl_loss(const ContrastiveBatch& batch);

/// InfoNCE with logits cos(e_v, e_j) / temperature over the same pairing.
/// Throws NumericalError on a zero-norm embedding.
double cosine_infonce_loss(std::span<const Vector> embeddings, double temperature);

/// [mean ; variance] concatenation used by the cosine baseline.
Vector deterministic_embedding(const GaussianState& state);

/// Mean w2_sq over positive pairs.
double alignment_diag(const ContrastiveBatch& batch);

struct Diagnostic {
  double value = 0.0;
  bool defined = false;  // false (value NaN) when there are no negatives
};

/// Mean over anchors of log sum_{j != v, p} exp(-w2_sq(v, j)).
Diagnostic uniformity_diag(const ContrastiveBatch& batch);

namespace ad {

/// Scalar InfoNCE of a 2N x 2N logit matrix (see info_nce_from_logits).
Var info_nce(Var logits);

/// Pairwise cosine similarities between rows of x.
Var cosine_similarity_matrix(Var x);

/// mean(softplus(d_pos - d_neg)) == mean(-log sigmoid(d_neg - d_pos)).
Var rec_loss(Var d_pos, Var d_neg);

/// mean(relu(d_pos - d_pos_neg + margin)).
Var pvn_loss(Var d_pos, Var d_pos_neg, double margin);

}  // namespace ad
}  // namespace mstein
