#include "mstein/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "mstein/errors.hpp"

namespace mstein {
namespace {

bool parse_int64(std::string_view text, std::int64_t& out) {
  if (text.empty()) return false;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end;
}

bool parse_tsv_row(const std::string& line, Interaction& out) {
  const auto tab1 = line.find('\t');
  if (tab1 == std::string::npos) return false;
  const auto tab2 = line.find('\t', tab1 + 1);
  if (tab2 == std::string::npos) return false;
  if (line.find('\t', tab2 + 1) != std::string::npos) return false;
  std::string_view ts(line);
  ts = ts.substr(tab2 + 1);
  if (!ts.empty() && ts.back() == '\r') ts.remove_suffix(1);
  out.user = line.substr(0, tab1);
  out.item = line.substr(tab1 + 1, tab2 - tab1 - 1);
  return !out.user.empty() && !out.item.empty() &&
         parse_int64(ts, out.timestamp) && out.timestamp >= 0;
}

bool parse_amazon_row(const std::string& line, Interaction& out) {
  const auto doc = nlohmann::json::parse(line, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) return false;
  const auto user = doc.find("reviewerID");
  const auto item = doc.find("asin");
  const auto time = doc.find("unixReviewTime");
  if (user == doc.end() || item == doc.end() || time == doc.end()) return false;
  if (!user->is_string() || !item->is_string()) return false;
  if (time->is_number_integer()) {
    out.timestamp = time->get<std::int64_t>();
  } else if (time->is_string()) {
    if (!parse_int64(time->get<std::string>(), out.timestamp)) return false;
  } else {
    return false;
  }
  out.user = user->get<std::string>();
  out.item = item->get<std::string>();
  return !out.user.empty() && !out.item.empty() && out.timestamp >= 0;
}

bool is_blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(),
                     [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

InputFormat parse_input_format(const std::string& name) {
  if (name == "tsv") return InputFormat::kTsv;
  if (name == "amazon-jsonl" || name == "jsonl") return InputFormat::kAmazonJsonl;
  throw ConfigError("unknown input format '" + name +
                    "' (expected tsv or amazon-jsonl)");
}

LoadResult load_interactions(const std::filesystem::path& path,
                             InputFormat format) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read interaction file: " + path.string());

  LoadResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (is_blank(line)) continue;
    ++result.rows_read;
    Interaction row;
    const bool ok = format == InputFormat::kTsv ? parse_tsv_row(line, row)
                                                : parse_amazon_row(line, row);
    if (ok) {
      result.interactions.push_back(std::move(row));
    } else {
      result.malformed_rows.push_back(line_no);
    }
  }
  if (in.bad()) throw InputError("I/O error while reading " + path.string());

  if (result.malformed_rows.size() * 100 > result.rows_read) {
    std::ostringstream msg;
    msg << path.string() << ": " << result.malformed_rows.size() << " of "
        << result.rows_read << " rows malformed (limit 1%); rows:";
    const std::size_t shown = std::min<std::size_t>(result.malformed_rows.size(), 20);
    for (std::size_t i = 0; i < shown; ++i) msg << ' ' << result.malformed_rows[i];
    if (shown < result.malformed_rows.size()) msg << " ...";
    throw InputError(msg.str());
  }
  return result;
}

std::vector<Interaction> apply_k_core(std::span<const Interaction> log, int k) {
  if (k < 1) throw std::invalid_argument("apply_k_core: k must be >= 1");
  std::unordered_map<std::string_view, int> counts;
  for (const auto& row : log) ++counts[row.user];

  std::vector<Interaction> kept;
  kept.reserve(log.size());
  for (const auto& row : log) {
    if (counts[row.user] >= k) kept.push_back(row);
  }
  if (kept.empty()) {
    throw InputError("k-core filtering with k=" + std::to_string(k) +
                     " removed every user");
  }
  return kept;
}

std::size_t Corpus::interaction_count() const {
  std::size_t total = 0;
  for (const auto& seq : sequences) total += seq.items.size();
  return total;
}

Corpus build_sequences(std::span<const Interaction> log) {
  Corpus corpus;
  Vocabulary& vocab = corpus.vocab;
  vocab.item_ids.emplace_back();  // padding

  // Per user: (timestamp, file order, item index).
  struct Event {
    std::int64_t timestamp;
    int item;
  };
  std::vector<std::vector<Event>> events;

  for (const auto& row : log) {
    auto [uit, new_user] = vocab.user_index.try_emplace(row.user, vocab.user_count);
    if (new_user) {
      vocab.user_ids.push_back(row.user);
      ++vocab.user_count;
      events.emplace_back();
    }
    auto [iit, new_item] = vocab.item_index.try_emplace(row.item, vocab.item_count + 1);
    if (new_item) {
      vocab.item_ids.push_back(row.item);
      ++vocab.item_count;
    }
    events[uit->second].push_back({row.timestamp, iit->second});
  }

  corpus.sequences.resize(events.size());
  for (std::size_t u = 0; u < events.size(); ++u) {
    auto& ev = events[u];
    std::stable_sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) {
      return a.timestamp < b.timestamp;
    });
    auto& seq = corpus.sequences[u];
    seq.user_index = static_cast<int>(u);
    seq.items.reserve(ev.size());
    for (const auto& e : ev) seq.items.push_back(e.item);
  }
  return corpus;
}

SplitSequences split_leave_one_out(const UserSequence& seq) {
  const auto n = seq.items.size();
  if (n < 5) {
    throw std::invalid_argument(
        "split_leave_one_out: user " + std::to_string(seq.user_index) +
        " has " + std::to_string(n) + " interactions (5-core requires >= 5)");
  }
  SplitSequences split;
  split.train_items.assign(seq.items.begin(), seq.items.end() - 2);
  split.valid_target = seq.items[n - 2];
  split.test_target = seq.items[n - 1];
  return split;
}

UserSequence inject_noise(const UserSequence& seq, double ratio, int item_count,
                          Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw std::invalid_argument("inject_noise: ratio must lie in [0, 1]");
  }
  const auto n = seq.items.size();
  const auto insertions = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
  if (insertions == 0) return seq;
  if (item_count < 1) throw std::invalid_argument("inject_noise: empty catalog");

  const std::size_t tail = std::min<std::size_t>(2, n);
  std::vector<int> prefix(seq.items.begin(), seq.items.end() - static_cast<std::ptrdiff_t>(tail));
  for (std::size_t i = 0; i < insertions; ++i) {
    const auto pos = rng.uniform_index(prefix.size() + 1);
    const int item = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(item_count)));
    prefix.insert(prefix.begin() + static_cast<std::ptrdiff_t>(pos), item);
  }
  UserSequence out{seq.user_index, std::move(prefix)};
  out.items.insert(out.items.end(), seq.items.end() - static_cast<std::ptrdiff_t>(tail), seq.items.end());
  return out;
}

std::vector<UserSequence> subsample_training(
    std::span<const UserSequence> sequences, double portion, Rng& rng) {
  if (!(portion > 0.0 && portion <= 1.0)) {
    throw std::invalid_argument("subsample_training: portion must lie in (0, 1]");
  }
  if (portion == 1.0) return {sequences.begin(), sequences.end()};
  const auto n = sequences.size();
  const auto keep = std::min<std::size_t>(
      n, static_cast<std::size_t>(std::ceil(portion * static_cast<double>(n))));
  auto chosen = rng.sample_without_replacement(n, keep);
  std::sort(chosen.begin(), chosen.end());
  std::vector<UserSequence> out;
  out.reserve(keep);
  for (auto idx : chosen) out.push_back(sequences[idx]);
  return out;
}

CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats stats;
  stats.users = corpus.sequences.size();
  stats.items = static_cast<std::size_t>(corpus.vocab.item_count);
  stats.interactions = corpus.interaction_count();
  if (stats.users > 0 && stats.items > 0) {
    stats.density = static_cast<double>(stats.interactions) /
                    (static_cast<double>(stats.users) * static_cast<double>(stats.items));
    stats.avg_per_user = static_cast<double>(stats.interactions) / static_cast<double>(stats.users);
  }
  return stats;
}

std::string format_stats(const CorpusStats& stats) {
  std::ostringstream out;
  out << stats.users << ' ' << stats.items << ' ' << stats.interactions << ' '
      << std::fixed << std::setprecision(4) << stats.density * 100.0 << "% "
      << std::setprecision(2) << stats.avg_per_user;
  return out.str();
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write corpus file: " + path.string());
  out << "wdm-corpus v1 " << corpus.sequences.size() << ' '
      << corpus.vocab.item_count << '\n';
  for (const auto& seq : corpus.sequences) {
    out << seq.user_index;
    for (int item : seq.items) out << ' ' << item;
    out << '\n';
  }
  if (!out) throw InputError("I/O error while writing " + path.string());
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read corpus file: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InputError(path.string() + ": empty corpus file");

  std::istringstream header(line);
  std::string magic, version;
  long users = -1, items = -1;
  header >> magic >> version >> users >> items;
  if (magic != "wdm-corpus" || version != "v1" || !header || users < 0 || items < 0) {
    throw InputError(path.string() + ": bad header (expected 'wdm-corpus v1 <users> <items>')");
  }

  Corpus corpus;
  corpus.vocab.user_count = static_cast<int>(users);
  corpus.vocab.item_count = static_cast<int>(items);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (is_blank(line)) continue;
    std::istringstream row(line);
    UserSequence seq;
    if (!(row >> seq.user_index) || seq.user_index < 0 || seq.user_index >= users) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": bad user index");
    }
    long item = 0;
    while (row >> item) {
      if (item < 1 || item > items) {
        throw InputError(path.string() + ":" + std::to_string(line_no) +
                         ": item index out of range");
      }
      seq.items.push_back(static_cast<int>(item));
    }
    if (!row.eof()) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": non-numeric token");
    }
    corpus.sequences.push_back(std::move(seq));
  }
  if (static_cast<long>(corpus.sequences.size()) != users) {
    throw InputError(path.string() + ": header declares " + std::to_string(users) +
                     " users but file has " + std::to_string(corpus.sequences.size()));
  }
  return corpus;
}

}  // namespace mstein
