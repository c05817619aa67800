#include "mstein/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace mstein {
namespace {

std::string format_double(double x) {
  std::ostringstream out;
  out << std::setprecision(17) << x;
  return out.str();
}

std::string format_edge(double x) {
  if (std::isinf(x)) return "inf";
  std::ostringstream out;
  out << x;
  return out.str();
}

}  // namespace

std::string to_string(SplitKind split) { return split == SplitKind::kValid ? "valid" : "test"; }

std::string to_string(GroupKey key) {
  return key == GroupKey::kSeqLength ? "seq_length" : "item_popularity";
}

int rank_target(const GaussianState& state, const ItemCatalog& catalog, int target,
                std::span<const int> exclude) {
  if (target < 1 || target > catalog.item_count()) throw std::out_of_range("rank_target: target");
  if (std::binary_search(exclude.begin(), exclude.end(), target)) {
    throw std::invalid_argument("rank_target: target is excluded");
  }
  const auto d = state.dim();
  const double* m = state.mean.data();
  const double* v = state.variance.data();
  const Eigen::Index t = target - 1;
  const double target_dist = w2_sq(m, v, catalog.mean.row(t).data(), catalog.variance.row(t).data(), d);
  int rank = 1;
  auto ex = exclude.begin();
  for (Eigen::Index i = 0; i < catalog.mean.rows(); ++i) {
    const int item = static_cast<int>(i) + 1;
    while (ex != exclude.end() && *ex < item) ++ex;
    if (ex != exclude.end() && *ex == item) continue;
    if (item == target) continue;
    const double dist = w2_sq(m, v, catalog.mean.row(i).data(), catalog.variance.row(i).data(), d);
    if (dist < target_dist || (dist == target_dist && item < target)) ++rank;
  }
  return rank;
}

double recall_at(int rank, int k) {
  if (rank < 1) throw std::invalid_argument("rank must be >= 1");
  return rank <= k ? 1.0 : 0.0;
}

double ndcg_at(int rank, int k) {
  if (rank < 1) throw std::invalid_argument("rank must be >= 1");
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

double reciprocal_rank(int rank) {
  if (rank < 1) throw std::invalid_argument("rank must be >= 1");
  return 1.0 / static_cast<double>(rank);
}

RankingMetrics aggregate(SplitKind split, std::vector<UserRank> ranks) {
  RankingMetrics m;
  m.split = split;
  m.n_users = ranks.size();
  for (const auto& r : ranks) {
    m.recall1 += recall_at(r.rank, 1);
    m.recall5 += recall_at(r.rank, 5);
    m.recall10 += recall_at(r.rank, 10);
    m.ndcg5 += ndcg_at(r.rank, 5);
    m.ndcg10 += ndcg_at(r.rank, 10);
    m.mrr += reciprocal_rank(r.rank);
  }
  if (!ranks.empty()) {
    const double n = static_cast<double>(ranks.size());
    m.recall1 /= n;
    m.recall5 /= n;
    m.recall10 /= n;
    m.ndcg5 /= n;
    m.ndcg10 /= n;
    m.mrr /= n;
  }
  m.per_user = std::move(ranks);
  return m;
}

RankingMetrics evaluate(const ModelParams& params, const EncoderConfig& config,
                        std::span<const SplitSequences> splits, SplitKind split,
                        const EvalOptions& options) {
  const ItemCatalog catalog = item_catalog(params);
  const std::size_t batch_size = static_cast<std::size_t>(std::max(1, options.batch_size));
  std::vector<UserRank> ranks;
  ranks.reserve(splits.size());

  for (std::size_t start = 0; start < splits.size(); start += batch_size) {
    const std::size_t end = std::min(splits.size(), start + batch_size);
    std::vector<std::vector<int>> contexts;
    for (std::size_t u = start; u < end; ++u) {
      std::vector<int> ctx = splits[u].train_items;
      if (split == SplitKind::kTest) ctx.push_back(splits[u].valid_target);
      contexts.push_back(std::move(ctx));
    }
    ad::Tape tape(false);
    BoundParams bound(tape, params, false);
    const SequenceBatch batch = SequenceBatch::from_sequences(contexts, config.max_len);
    const EncodedBatch enc = encode(bound, config, batch, {});

    for (std::size_t b = 0; b < contexts.size(); ++b) {
      const std::size_t u = start + b;
      const auto row = static_cast<Eigen::Index>((b + 1) * static_cast<std::size_t>(batch.window) - 1);
      const GaussianState state = state_at(enc.states, row);
      const int target = split == SplitKind::kValid ? splits[u].valid_target : splits[u].test_target;
      std::vector<int> exclude;
      if (options.exclude_history) {
        exclude = contexts[b];
        std::sort(exclude.begin(), exclude.end());
        exclude.erase(std::unique(exclude.begin(), exclude.end()), exclude.end());
        exclude.erase(std::remove(exclude.begin(), exclude.end(), target), exclude.end());
      }
      UserRank r;
      r.user = static_cast<int>(u);
      r.target = target;
      r.rank = rank_target(state, catalog, target, exclude);
      r.prefix_length = splits[u].train_items.size();
      ranks.push_back(r);
    }
  }
  return aggregate(split, std::move(ranks));
}

std::string metrics_json(const RankingMetrics& m) {
  std::ostringstream out;
  out << "{\"split\": \"" << to_string(m.split) << "\", \"recall@1\": " << format_double(m.recall1)
      << ", \"recall@5\": " << format_double(m.recall5) << ", \"ndcg@5\": " << format_double(m.ndcg5)
      << ", \"recall@10\": " << format_double(m.recall10)
      << ", \"ndcg@10\": " << format_double(m.ndcg10) << ", \"mrr\": " << format_double(m.mrr)
      << ", \"n_users\": " << m.n_users << "}";
  return out.str();
}

std::string metrics_csv_header() { return "split,recall@1,recall@5,ndcg@5,recall@10,ndcg@10,mrr,n_users"; }

std::string metrics_csv_row(const RankingMetrics& m) {
  std::ostringstream out;
  out << to_string(m.split) << ',' << format_double(m.recall1) << ',' << format_double(m.recall5)
      << ',' << format_double(m.ndcg5) << ',' << format_double(m.recall10) << ','
      << format_double(m.ndcg10) << ',' << format_double(m.mrr) << ',' << m.n_users;
  return out.str();
}

std::vector<double> default_length_edges() { return {5.0, 8.0, 12.0, 20.0}; }

namespace {

std::vector<double> training_popularity(std::span<const SplitSequences> splits) {
  std::vector<double> pop;
  for (const auto& s : splits) {
    for (int item : s.train_items) {
      if (static_cast<std::size_t>(item) >= pop.size()) pop.resize(static_cast<std::size_t>(item) + 1, 0.0);
      pop[static_cast<std::size_t>(item)] += 1.0;
    }
  }
  return pop;
}

double popularity_of(const std::vector<double>& pop, int item) {
  return static_cast<std::size_t>(item) < pop.size() ? pop[static_cast<std::size_t>(item)] : 0.0;
}

}  // namespace

std::vector<double> popularity_quartile_edges(const RankingMetrics& metrics,
                                              std::span<const SplitSequences> splits) {
  const auto pop = training_popularity(splits);
  std::vector<double> values;
  for (const auto& r : metrics.per_user) values.push_back(popularity_of(pop, r.target));
  if (values.empty()) return {0.0};
  std::sort(values.begin(), values.end());
  std::vector<double> edges{values.front()};
  for (int q = 1; q < 4; ++q) {
    const double e = values[values.size() * static_cast<std::size_t>(q) / 4];
    if (e > edges.back()) edges.push_back(e);
  }
  return edges;
}

GroupReport group_report(const RankingMetrics& metrics, std::span<const SplitSequences> splits,
                         GroupKey key, std::span<const double> edges) {
  if (edges.empty()) throw std::invalid_argument("group_report: no bucket edges");
  if (!std::is_sorted(edges.begin(), edges.end()) ||
      std::adjacent_find(edges.begin(), edges.end()) != edges.end()) {
    throw std::invalid_argument("group_report: edges must be strictly increasing");
  }
  GroupReport report;
  report.key = key;
  for (std::size_t k = 0; k < edges.size(); ++k) {
    GroupBucket b;
    b.lower = edges[k];
    b.upper = k + 1 < edges.size() ? edges[k + 1] : std::numeric_limits<double>::infinity();
    report.buckets.push_back(b);
  }
  std::vector<double> sums(edges.size(), 0.0);
  const auto pop = key == GroupKey::kItemPopularity ? training_popularity(splits) : std::vector<double>{};
  for (const auto& r : metrics.per_user) {
    const double value = key == GroupKey::kSeqLength ? static_cast<double>(r.prefix_length)
                                                     : popularity_of(pop, r.target);
    const auto it = std::upper_bound(edges.begin(), edges.end(), value);
    const std::size_t k = it == edges.begin() ? 0 : static_cast<std::size_t>(it - edges.begin()) - 1;
    ++report.buckets[k].count;
    sums[k] += ndcg_at(r.rank, 5);
  }
  for (std::size_t k = 0; k < edges.size(); ++k) {
    if (report.buckets[k].count > 0) {
      report.buckets[k].ndcg5 = sums[k] / static_cast<double>(report.buckets[k].count);
    }
  }
  return report;
}

std::string group_report_csv(const GroupReport& report) {
  std::ostringstream out;
  out << "bucket,count,ndcg5\n";
  for (const auto& b : report.buckets) {
    out << to_string(report.key) << ":[" << format_edge(b.lower) << ";" << format_edge(b.upper)
        << ")," << b.count << ',';
    if (b.ndcg5) out << format_double(*b.ndcg5);
    out << '\n';
  }
  return out.str();
}

}  // namespace mstein
