#pragma once

#include <span>
#include <string>
#include <vector>

#include "mstein/rng.hpp"

namespace mstein {

enum class AugmentOp { kCrop, kMask, kReorder, kSubstitute, kInsert };

std::string to_string(AugmentOp op);
AugmentOp parse_augment_op(const std::string& name);

struct AugmentationPolicy {
  std::vector<AugmentOp> enabled{AugmentOp::kCrop, AugmentOp::kMask,
                                 AugmentOp::kReorder};
  double crop_ratio = 0.6;        // (0, 1]
  double mask_ratio = 0.3;        // [0, 1)
  double reorder_ratio = 0.3;     // [0, 1)
  double substitute_rate = 0.1;   // [0, 1)
  double insert_rate = 0.1;       // [0, 1)
  /// Sequences shorter than this only receive length-preserving ops.
  std::size_t short_threshold = 5;

  /// Throws ConfigError when a ratio is out of range or no op is enabled.
  void validate() const;
};

/// Top-K correlated items per item, best first.
class ItemCorrelation {
 public:
  struct Entry {
    int item;
    double score;
  };

  ItemCorrelation() = default;
  explicit ItemCorrelation(std::vector<std::vector<Entry>> lists)
      : lists_(std::move(lists)) {}

  /// Empty for unknown items (padding, mask token, out-of-range indices).
  std::span<const Entry> correlates(int item) const;
  bool empty() const { return lists_.empty(); }

 private:
  std::vector<std::vector<Entry>> lists_;
};

/// Co-occurrence within a sliding window of width 5 (position gap 1..4),
/// normalized by the geometric mean of the two item frequencies; the K best
/// partners are kept per item, ties broken by item index.
ItemCorrelation build_item_correlation(
    std::span<const std::vector<int>> train_sequences, int item_count,
    std::size_t top_k = 10);

std::vector<int> crop(std::span<const int> seq, double ratio, Rng& rng);
std::vector<int> mask(std::span<const int> seq, double ratio, int mask_token,
                      Rng& rng);
std::vector<int> reorder(std::span<const int> seq, double ratio, Rng& rng);
std::vector<int> substitute(std::span<const int> seq, double rate,
                            const ItemCorrelation& corr, Rng& rng);
std::vector<int> insert(std::span<const int> seq, double rate,
                        const ItemCorrelation& corr, Rng& rng);

struct AugmentedPair {
  std::vector<int> view_a;
  std::vector<int> view_b;
  int user_index = 0;
};

/// Applies one op per view, drawn uniformly from the eligible enabled ops.
/// substitute/insert are eligible only when corr is non-empty.
AugmentedPair augment_pair(std::span<const int> seq, int user_index,
                           const AugmentationPolicy& policy,
                           const ItemCorrelation& corr, int mask_token,
                           Rng& rng);

}  // namespace mstein
