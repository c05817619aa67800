#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mstein/rng.hpp"

namespace mstein {

/// Item index 0 is padding; real items are 1..item_count; item_count + 1 is
/// the mask token.
inline constexpr int kPaddingItem = 0;

struct Interaction {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

enum class InputFormat { kTsv, kAmazonJsonl };

InputFormat parse_input_format(const std::string& name);

struct LoadResult {
  std::vector<Interaction> interactions;
  std::size_t rows_read = 0;
  /// 1-based line numbers of rows that could not be parsed.
  std::vector<std::size_t> malformed_rows;
};

/// Reads an interaction log. Blank lines are ignored. Throws InputError when
/// the file is unreadable or more than 1% of rows are malformed.
LoadResult load_interactions(const std::filesystem::path& path,
                             InputFormat format);

/// Keeps only interactions of users with at least k events. Single pass,
/// users only; items are never filtered.
std::vector<Interaction> apply_k_core(std::span<const Interaction> log, int k);

struct Vocabulary {
  int user_count = 0;
  int item_count = 0;
  /// user_ids[u] for u in [0, user_count); item_ids[i] for i in [1, item_count]
  /// (item_ids[0] is the empty padding name). Empty when the corpus was read
  /// back from a preprocessed file.
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  std::unordered_map<std::string, int> user_index;
  std::unordered_map<std::string, int> item_index;

  int mask_token() const { return item_count + 1; }
  /// Rows of an embedding table: padding + items + mask.
  int table_rows() const { return item_count + 2; }
};

struct UserSequence {
  int user_index = 0;
  std::vector<int> items;

  bool operator==(const UserSequence&) const = default;
};

struct Corpus {
  Vocabulary vocab;
  std::vector<UserSequence> sequences;

  std::size_t interaction_count() const;
};

/// Time-orders each user's events (stable on ties) and assigns dense indices
/// in first-appearance order.
Corpus build_sequences(std::span<const Interaction> log);

struct SplitSequences {
  std::vector<int> train_items;
  int valid_target = kPaddingItem;
  int test_target = kPaddingItem;
};

/// Last item is the test target, second to last the validation target.
/// Throws std::invalid_argument for sequences shorter than 5.
SplitSequences split_leave_one_out(const UserSequence& seq);

/// Inserts floor(ratio * len) uniformly random items at uniformly random
/// positions of the training prefix; validation and test targets stay put.
UserSequence inject_noise(const UserSequence& seq, double ratio, int item_count,
                          Rng& rng);

/// Keeps ceil(portion * n) whole users, sampled without replacement and
/// returned in their original order. portion == 1 returns the input.
std::vector<UserSequence> subsample_training(
    std::span<const UserSequence> sequences, double portion, Rng& rng);

struct CorpusStats {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t interactions = 0;
  double density = 0.0;
  double avg_per_user = 0.0;
};

CorpusStats corpus_stats(const Corpus& corpus);

/// "<users> <items> <interactions> <density%> <avg per user>"
std::string format_stats(const CorpusStats& stats);

/// Preprocessed corpus file: header "wdm-corpus v1 <users> <items>", then one
/// line per user "user_index item_1 item_2 ...".
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& path);

}  // namespace mstein
