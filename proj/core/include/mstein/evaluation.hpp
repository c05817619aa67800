#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mstein/corpus.hpp"
#include "mstein/encoder.hpp"

namespace mstein {

enum class SplitKind { kValid, kTest };
std::string to_string(SplitKind split);

/// 1-based rank of target among all catalog items not in exclude, ordered by
/// ascending (w2_sq distance, item index). exclude must be sorted and must
/// not contain target.
int rank_target(const GaussianState& state, const ItemCatalog& catalog, int target,
                std::span<const int> exclude = {});

double recall_at(int rank, int k);
double ndcg_at(int rank, int k);
double reciprocal_rank(int rank);

struct UserRank {
  int user = 0;
  int target = 0;
  int rank = 0;
  std::size_t prefix_length = 0;  // training-prefix length of the user
};

struct RankingMetrics {
  SplitKind split = SplitKind::kTest;
  double recall1 = 0.0;
  double recall5 = 0.0;
  double recall10 = 0.0;
  double ndcg5 = 0.0;
  double ndcg10 = 0.0;
  double mrr = 0.0;
  std::size_t n_users = 0;
  std::vector<UserRank> per_user;
};

/// Averages the per-user metrics of the given ranks.
RankingMetrics aggregate(SplitKind split, std::vector<UserRank> ranks);

struct EvalOptions {
  bool exclude_history = false;
  int batch_size = 256;
};

/// Encodes each user's context (train prefix for validation, train prefix
/// plus validation item for test), takes the last position's state and ranks
/// the split target against the whole catalog.
RankingMetrics evaluate(const ModelParams& params, const EncoderConfig& config,
                        std::span<const SplitSequences> splits, SplitKind split,
                        const EvalOptions& options = {});

/// {"split", "recall@1", "recall@5", "ndcg@5", "recall@10", "ndcg@10", "mrr", "n_users"}
std::string metrics_json(const RankingMetrics& m);
std::string metrics_csv_header();
std::string metrics_csv_row(const RankingMetrics& m);

enum class GroupKey { kSeqLength, kItemPopularity };
std::string to_string(GroupKey key);

struct GroupBucket {
  double lower = 0.0;  // inclusive
  double upper = 0.0;  // exclusive; +inf for the last bucket
  std::size_t count = 0;
  std::optional<double> ndcg5;  // empty for an empty bucket
};

struct GroupReport {
  GroupKey key = GroupKey::kSeqLength;
  std::vector<GroupBucket> buckets;
};

/// Default edges: sequence length {5, 8, 12, 20}.
std::vector<double> default_length_edges();

/// Quartile edges of the training popularity of the evaluated targets.
std::vector<double> popularity_quartile_edges(const RankingMetrics& metrics,
                                              std::span<const SplitSequences> splits);

/// Buckets [e_k, e_{k+1}) with the last one open-ended. Values below the
/// first edge fall into the first bucket. Seq-length groups users by their
/// training-prefix length; popularity groups them by how often their target
/// occurs in all training prefixes.
GroupReport group_report(const RankingMetrics& metrics, std::span<const SplitSequences> splits,
                         GroupKey key, std::span<const double> edges);

/// "bucket,count,ndcg5" with an empty ndcg5 for empty buckets.
std::string group_report_csv(const GroupReport& report);

}  // namespace mstein
