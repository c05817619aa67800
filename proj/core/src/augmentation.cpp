#include "mstein/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "mstein/errors.hpp"

namespace mstein {
namespace {

constexpr std::size_t kCorrelationWindow = 5;

std::size_t scaled_count(double ratio, std::size_t len) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(len)));
}

void require_non_empty(std::span<const int> seq, const char* op) {
  if (seq.empty()) throw std::invalid_argument(std::string(op) + ": empty sequence");
}

int pick_correlate(std::span<const ItemCorrelation::Entry> list, Rng& rng) {
  return list[rng.uniform_index(list.size())].item;
}

}  // namespace

std::string to_string(AugmentOp op) {
  switch (op) {
    case AugmentOp::kCrop: return "crop";
    case AugmentOp::kMask: return "mask";
    case AugmentOp::kReorder: return "reorder";
    case AugmentOp::kSubstitute: return "substitute";
    case AugmentOp::kInsert: return "insert";
  }
  return "unknown";
}

AugmentOp parse_augment_op(const std::string& name) {
  if (name == "crop") return AugmentOp::kCrop;
  if (name == "mask") return AugmentOp::kMask;
  if (name == "reorder") return AugmentOp::kReorder;
  if (name == "substitute") return AugmentOp::kSubstitute;
  if (name == "insert") return AugmentOp::kInsert;
  throw ConfigError("unknown augmentation op '" + name + "'");
}

void AugmentationPolicy::validate() const {
  if (enabled.empty()) throw ConfigError("augmentation policy enables no ops");
  auto in_unit = [](double x) { return x >= 0.0 && x < 1.0; };
  if (!(crop_ratio > 0.0 && crop_ratio <= 1.0)) throw ConfigError("crop_ratio must lie in (0, 1]");
  if (!in_unit(mask_ratio)) throw ConfigError("mask_ratio must lie in [0, 1)");
  if (!in_unit(reorder_ratio)) throw ConfigError("reorder_ratio must lie in [0, 1)");
  if (!in_unit(substitute_rate)) throw ConfigError("substitute_rate must lie in [0, 1)");
  if (!in_unit(insert_rate)) throw ConfigError("insert_rate must lie in [0, 1)");
}

std::span<const ItemCorrelation::Entry> ItemCorrelation::correlates(int item) const {
  if (item < 0 || static_cast<std::size_t>(item) >= lists_.size()) return {};
  return lists_[static_cast<std::size_t>(item)];
}

ItemCorrelation build_item_correlation(
    std::span<const std::vector<int>> train_sequences, int item_count,
    std::size_t top_k) {
  if (train_sequences.empty()) {
    throw std::invalid_argument("build_item_correlation: empty corpus");
  }
  const auto rows = static_cast<std::size_t>(item_count) + 1;
  std::vector<double> freq(rows, 0.0);
  std::vector<std::map<int, double>> cooc(rows);

  for (const auto& seq : train_sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const int a = seq[i];
      if (a < 1 || a > item_count) continue;
      freq[static_cast<std::size_t>(a)] += 1.0;
      const std::size_t end = std::min(seq.size(), i + kCorrelationWindow);
      for (std::size_t j = i + 1; j < end; ++j) {
        const int b = seq[j];
        if (b < 1 || b > item_count || b == a) continue;
        cooc[static_cast<std::size_t>(a)][b] += 1.0;
        cooc[static_cast<std::size_t>(b)][a] += 1.0;
      }
    }
  }

  std::vector<std::vector<ItemCorrelation::Entry>> lists(rows);
  for (std::size_t a = 1; a < rows; ++a) {
    auto& list = lists[a];
    for (const auto& [b, count] : cooc[a]) {
      const double norm = std::sqrt(freq[a] * freq[static_cast<std::size_t>(b)]);
      list.push_back({b, count / norm});
    }
    std::sort(list.begin(), list.end(), [](const auto& x, const auto& y) {
      return x.score != y.score ? x.score > y.score : x.item < y.item;
    });
    if (list.size() > top_k) list.resize(top_k);
  }
  return ItemCorrelation(std::move(lists));
}

std::vector<int> crop(std::span<const int> seq, double ratio, Rng& rng) {
  require_non_empty(seq, "crop");
  const std::size_t len = std::max<std::size_t>(1, scaled_count(ratio, seq.size()));
  const std::size_t start = rng.uniform_index(seq.size() - len + 1);
  return {seq.begin() + static_cast<std::ptrdiff_t>(start),
          seq.begin() + static_cast<std::ptrdiff_t>(start + len)};
}

std::vector<int> mask(std::span<const int> seq, double ratio, int mask_token,
                      Rng& rng) {
  require_non_empty(seq, "mask");
  std::vector<int> out(seq.begin(), seq.end());
  for (auto pos : rng.sample_without_replacement(seq.size(), scaled_count(ratio, seq.size()))) {
    out[pos] = mask_token;
  }
  return out;
}

std::vector<int> reorder(std::span<const int> seq, double ratio, Rng& rng) {
  require_non_empty(seq, "reorder");
  std::vector<int> out(seq.begin(), seq.end());
  const std::size_t len = std::max<std::size_t>(1, scaled_count(ratio, seq.size()));
  const std::size_t start = rng.uniform_index(seq.size() - len + 1);
  std::vector<int> segment(out.begin() + static_cast<std::ptrdiff_t>(start),
                           out.begin() + static_cast<std::ptrdiff_t>(start + len));
  rng.shuffle(segment);
  std::copy(segment.begin(), segment.end(), out.begin() + static_cast<std::ptrdiff_t>(start));
  return out;
}

std::vector<int> substitute(std::span<const int> seq, double rate,
                            const ItemCorrelation& corr, Rng& rng) {
  require_non_empty(seq, "substitute");
  std::vector<int> out(seq.begin(), seq.end());
  for (auto pos : rng.sample_without_replacement(seq.size(), scaled_count(rate, seq.size()))) {
    const auto list = corr.correlates(out[pos]);
    if (!list.empty()) out[pos] = pick_correlate(list, rng);
  }
  return out;
}

std::vector<int> insert(std::span<const int> seq, double rate,
                        const ItemCorrelation& corr, Rng& rng) {
  require_non_empty(seq, "insert");
  auto positions = rng.sample_without_replacement(seq.size(), scaled_count(rate, seq.size()));
  std::sort(positions.begin(), positions.end());

  std::vector<int> out;
  out.reserve(seq.size() + positions.size());
  std::size_t next = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    out.push_back(seq[i]);
    if (next < positions.size() && positions[next] == i) {
      ++next;
      // Neighbor is the item at i or the one after it.
      std::size_t neighbor = i;
      if (i + 1 < seq.size() && rng.uniform_index(2) == 1) neighbor = i + 1;
      const auto list = corr.correlates(seq[neighbor]);
      out.push_back(list.empty() ? seq[neighbor] : pick_correlate(list, rng));
    }
  }
  return out;
}

namespace {

std::vector<int> apply_op(AugmentOp op, std::span<const int> seq,
                          const AugmentationPolicy& policy,
                          const ItemCorrelation& corr, int mask_token, Rng& rng) {
  switch (op) {
    case AugmentOp::kCrop: return crop(seq, policy.crop_ratio, rng);
    case AugmentOp::kMask: return mask(seq, policy.mask_ratio, mask_token, rng);
    case AugmentOp::kReorder: return reorder(seq, policy.reorder_ratio, rng);
    case AugmentOp::kSubstitute: return substitute(seq, policy.substitute_rate, corr, rng);
    case AugmentOp::kInsert: return insert(seq, policy.insert_rate, corr, rng);
  }
  return {seq.begin(), seq.end()};
}

}  // namespace

AugmentedPair augment_pair(std::span<const int> seq, int user_index,
                           const AugmentationPolicy& policy,
                           const ItemCorrelation& corr, int mask_token,
                           Rng& rng) {
  require_non_empty(seq, "augment_pair");
  const bool is_short = seq.size() < policy.short_threshold;
  std::vector<AugmentOp> eligible;
  for (AugmentOp op : policy.enabled) {
    const bool needs_corr = op == AugmentOp::kSubstitute || op == AugmentOp::kInsert;
    if (needs_corr && corr.empty()) continue;
    if (is_short && op != AugmentOp::kMask && op != AugmentOp::kSubstitute) continue;
    eligible.push_back(op);
  }

  auto view = [&]() -> std::vector<int> {
    if (eligible.empty()) return {seq.begin(), seq.end()};
    const AugmentOp op = eligible[rng.uniform_index(eligible.size())];
    return apply_op(op, seq, policy, corr, mask_token, rng);
  };
  AugmentedPair pair;
  pair.user_index = user_index;
  pair.view_a = view();
  pair.view_b = view();
  return pair;
}

}  // namespace mstein
