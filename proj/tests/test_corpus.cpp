#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <map>
#include <set>

#include "mstein/corpus.hpp"
#include "mstein/errors.hpp"
#include "mstein/experiments.hpp"
#include "test_support.hpp"

using namespace mstein;

namespace {

const std::filesystem::path kData = MSTEIN_TEST_DATA_DIR;

UserSequence seq_of(std::vector<int> items, int user = 0) { return UserSequence{user, std::move(items)}; }

std::vector<Interaction> events_for(const std::string& user, int n, int first_item = 0) {
  std::vector<Interaction> out;
  for (int i = 0; i < n; ++i) out.push_back({user, "i" + std::to_string(first_item + i), i});
  return out;
}

}  // namespace

TEST_CASE("tsv row maps fields directly") {
  const auto dir = testing::scratch_dir("tsv_row");
  testing::write_file(dir / "one.tsv", "u1\ti9\t100\n");
  const LoadResult r = load_interactions(dir / "one.tsv", InputFormat::kTsv);
  REQUIRE(r.interactions.size() == 1);
  CHECK(r.interactions[0] == Interaction{"u1", "i9", 100});
  CHECK(r.malformed_rows.empty());
}

TEST_CASE("empty file gives an empty log") {
  const auto dir = testing::scratch_dir("empty");
  testing::write_file(dir / "empty.tsv", "");
  const LoadResult r = load_interactions(dir / "empty.tsv", InputFormat::kTsv);
  CHECK(r.interactions.empty());
  CHECK(r.rows_read == 0);
}

TEST_CASE("unreadable file is an input error") {
  CHECK_THROWS_AS(load_interactions("/nonexistent/nowhere.tsv", InputFormat::kTsv), InputError);
}

TEST_CASE("too many malformed rows are fatal and name the rows") {
  const auto dir = testing::scratch_dir("malformed");
  std::string text;
  for (int i = 0; i < 50; ++i) text += "u\ti\t" + std::to_string(i) + "\n";
  text += "garbage line\n";
  text += "u\ti\t-5\n";
  testing::write_file(dir / "bad.tsv", text);
  try {
    load_interactions(dir / "bad.tsv", InputFormat::kTsv);
    FAIL("expected InputError");
  } catch (const InputError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("51") != std::string::npos);
    CHECK(msg.find("52") != std::string::npos);
  }

  // One bad row in 200 stays under the 1% limit and is reported, not fatal.
  std::string ok;
  for (int i = 0; i < 199; ++i) ok += "u\ti\t" + std::to_string(i) + "\n";
  ok += "broken\n";
  testing::write_file(dir / "ok.tsv", ok);
  const LoadResult r = load_interactions(dir / "ok.tsv", InputFormat::kTsv);
  CHECK(r.interactions.size() == 199);
  REQUIRE(r.malformed_rows.size() == 1);
  CHECK(r.malformed_rows[0] == 200);
}

TEST_CASE("amazon jsonl rows use reviewer, product and review time") {
  const LoadResult r = load_interactions(kData / "tiny.jsonl", InputFormat::kAmazonJsonl);
  REQUIRE(r.interactions.size() == 3);
  CHECK(r.interactions[0] == Interaction{"A1", "B01", 1400000000});
  CHECK(r.interactions[1] == Interaction{"A1", "B02", 1300000000});
  CHECK(r.interactions[2] == Interaction{"A2", "B01", 1200000000});
}

TEST_CASE("k-core drops users below the threshold only") {
  auto log = events_for("short", 4);
  const auto five = events_for("five", 5, 10);
  log.insert(log.end(), five.begin(), five.end());

  const auto kept = apply_k_core(log, 5);
  CHECK(kept.size() == 5);
  for (const auto& row : kept) CHECK(row.user == "five");

  // Items of removed users are not filtered out of kept users.
  CHECK(apply_k_core(five, 5) == five);
  CHECK_THROWS_AS(apply_k_core(events_for("short", 4), 5), InputError);
}

TEST_CASE("k-core output has every user at or above k and is a fixed point") {
  Rng rng(3);
  std::vector<Interaction> log;
  for (int u = 0; u < 40; ++u) {
    const int n = 1 + static_cast<int>(rng.uniform_index(9));
    for (int i = 0; i < n; ++i) {
      log.push_back({"u" + std::to_string(u), "i" + std::to_string(rng.uniform_index(30)), i});
    }
  }
  const auto kept = apply_k_core(log, 5);
  std::map<std::string, int> counts;
  for (const auto& row : kept) ++counts[row.user];
  for (const auto& [user, n] : counts) CHECK(n >= 5);
  CHECK(apply_k_core(kept, 5) == kept);

  const Corpus corpus = build_sequences(kept);
  CHECK(corpus.interaction_count() == kept.size());
}

TEST_CASE("sequences are time ordered with stable ties") {
  const std::vector<Interaction> log{{"u", "a", 3}, {"u", "b", 1}, {"u", "c", 2}};
  const Corpus c = build_sequences(log);
  REQUIRE(c.sequences.size() == 1);
  const auto& v = c.vocab;
  CHECK(c.sequences[0].items ==
        std::vector<int>{v.item_index.at("b"), v.item_index.at("c"), v.item_index.at("a")});

  const std::vector<Interaction> ties{{"u", "x", 5}, {"u", "y", 5}, {"u", "z", 5}};
  const Corpus t = build_sequences(ties);
  CHECK(t.sequences[0].items == std::vector<int>{1, 2, 3});
}

TEST_CASE("dense indices follow first appearance and reserve padding and mask") {
  const std::vector<Interaction> log{{"u1", "p", 1}, {"u2", "q", 1}, {"u1", "q", 2}, {"u2", "r", 0}};
  const Corpus c = build_sequences(log);
  CHECK(c.vocab.user_count == 2);
  CHECK(c.vocab.item_count == 3);
  CHECK(c.vocab.item_index.at("p") == 1);
  CHECK(c.vocab.item_index.at("q") == 2);
  CHECK(c.vocab.item_index.at("r") == 3);
  CHECK(c.vocab.mask_token() == 4);
  CHECK(c.vocab.item_ids[0].empty());
  CHECK(c.sequences[0].items == std::vector<int>{1, 2});
  CHECK(c.sequences[1].items == std::vector<int>{3, 2});
  for (const auto& s : c.sequences) {
    CHECK(std::find(s.items.begin(), s.items.end(), kPaddingItem) == s.items.end());
  }
}

TEST_CASE("leave-one-out split") {
  SUBCASE("last two items are test and validation") {
    const SplitSequences s = split_leave_one_out(seq_of({1, 2, 3, 4, 5}));
    CHECK(s.train_items == std::vector<int>{1, 2, 3});
    CHECK(s.valid_target == 4);
    CHECK(s.test_target == 5);
  }
  SUBCASE("duplicates are allowed") {
    const SplitSequences s = split_leave_one_out(seq_of({7, 7, 7, 7, 7}));
    CHECK(s.train_items == std::vector<int>{7, 7, 7});
    CHECK(s.valid_target == 7);
    CHECK(s.test_target == 7);
  }
  SUBCASE("sequences shorter than five are rejected") {
    CHECK_THROWS_AS(split_leave_one_out(seq_of({1, 2, 3, 4})), std::invalid_argument);
  }
  SUBCASE("split reconstructs the sequence") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<int> items(5 + rng.uniform_index(20));
      for (auto& x : items) x = 1 + static_cast<int>(rng.uniform_index(40));
      const SplitSequences s = split_leave_one_out(seq_of(items));
      std::vector<int> back = s.train_items;
      back.push_back(s.valid_target);
      back.push_back(s.test_target);
      CHECK(back == items);
      CHECK(s.train_items.size() >= 3);
    }
  }
}

TEST_CASE("noise injection") {
  const UserSequence base = seq_of({1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  SUBCASE("ratio 0 is the identity") {
    Rng rng(1);
    CHECK(inject_noise(base, 0.0, 50, rng) == base);
  }
  SUBCASE("length 10 at ratio 0.3 gains three items, targets untouched") {
    Rng rng(1);
    const UserSequence noisy = inject_noise(base, 0.3, 50, rng);
    CHECK(noisy.items.size() == 13);
    CHECK(noisy.items[11] == 9);
    CHECK(noisy.items[12] == 10);
    for (int x : noisy.items) {
      CHECK(x >= 1);
      CHECK(x <= 50);
    }
    // The original prefix survives as a subsequence.
    std::size_t j = 0;
    for (int x : noisy.items) {
      if (j < 8 && x == base.items[j]) ++j;
    }
    CHECK(j == 8);
  }
  SUBCASE("length grows by floor(r * len) for any ratio") {
    for (double r : {0.05, 0.15, 0.5, 0.99, 1.0}) {
      Rng rng(7);
      const UserSequence noisy = inject_noise(base, r, 20, rng);
      CHECK(noisy.items.size() == base.items.size() + static_cast<std::size_t>(std::floor(r * 10)));
    }
  }
  SUBCASE("same seed gives the same output") {
    Rng a(99), b(99);
    CHECK(inject_noise(base, 0.5, 30, a) == inject_noise(base, 0.5, 30, b));
  }
}

TEST_CASE("training-portion subsampling") {
  std::vector<UserSequence> users;
  for (int u = 0; u < 100; ++u) users.push_back(seq_of({1, 2, 3, 4, 5 + u}, u));
  SUBCASE("portion 1 is the identity") {
    Rng rng(5);
    CHECK(subsample_training(users, 1.0, rng) == users);
  }
  SUBCASE("100 users at 0.25 keep 25 whole users in original order") {
    Rng rng(5);
    const auto kept = subsample_training(users, 0.25, rng);
    CHECK(kept.size() == 25);
    for (std::size_t i = 1; i < kept.size(); ++i) CHECK(kept[i - 1].user_index < kept[i].user_index);
    for (const auto& k : kept) CHECK(k == users[static_cast<std::size_t>(k.user_index)]);
  }
  SUBCASE("ceil of the requested fraction") {
    Rng rng(5);
    CHECK(subsample_training(users, 0.011, rng).size() == 2);
  }
  SUBCASE("same seed gives the same subset") {
    Rng a(8), b(8);
    CHECK(subsample_training(users, 0.4, a) == subsample_training(users, 0.4, b));
  }
}

TEST_CASE("corpus file round trip") {
  const auto dir = testing::scratch_dir("corpus_rt");
  const Corpus c = make_planted_corpus({20, 12, 8, 0.2, 4});
  write_corpus(dir / "c.txt", c);
  const Corpus back = read_corpus(dir / "c.txt");
  CHECK(back.vocab.item_count == c.vocab.item_count);
  CHECK(back.vocab.user_count == c.vocab.user_count);
  CHECK(back.sequences == c.sequences);
  CHECK(testing::read_file(dir / "c.txt").rfind("wdm-corpus v1 20 12\n", 0) == 0);
}

TEST_CASE("preprocessing the tiny fixture reproduces the golden corpus") {
  const auto dir = testing::scratch_dir("golden");
  const PreprocessResult first = cmd_preprocess(kData / "tiny.tsv", InputFormat::kTsv, dir / "a.txt");
  const PreprocessResult second = cmd_preprocess(kData / "tiny.tsv", InputFormat::kTsv, dir / "b.txt");
  const std::string golden = testing::read_file(kData / "tiny.golden");
  CHECK(testing::read_file(dir / "a.txt") == golden);
  CHECK(testing::read_file(dir / "b.txt") == golden);
  CHECK(first.stats.users == 2);
  CHECK(first.stats.items == 5);
  CHECK(first.stats.interactions == 11);
  CHECK(second.rows_read == 15);
}

TEST_CASE("statistics line format") {
  CorpusStats s{22363, 12101, 198502, 198502.0 / (22363.0 * 12101.0), 198502.0 / 22363.0};
  const std::string line = format_stats(s);
  CHECK(line.rfind("22363 12101 198502", 0) == 0);
  CHECK(line.find("0.0734%") != std::string::npos);
  CHECK(line.find("8.88") != std::string::npos);
}

TEST_CASE("Beauty corpus statistics (needs MSTEIN_BEAUTY_JSONL)") {
  const char* path = std::getenv("MSTEIN_BEAUTY_JSONL");
  if (path == nullptr) {
    MESSAGE("MSTEIN_BEAUTY_JSONL not set; Beauty statistics not checked");
    return;
  }
  const auto dir = testing::scratch_dir("beauty");
  const PreprocessResult r = cmd_preprocess(path, InputFormat::kAmazonJsonl, dir / "beauty.txt");
  CHECK(r.stats.users == 22363);
  CHECK(r.stats.items == 12101);
  CHECK(r.stats.interactions == 198502);
}

TEST_CASE("missing preprocess input is an input error") {
  CHECK_THROWS_AS(cmd_preprocess("/nonexistent.tsv", InputFormat::kTsv, "/tmp/never.txt"), InputError);
}
