#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mstein/config.hpp"
#include "mstein/corpus.hpp"
#include "mstein/evaluation.hpp"
#include "mstein/trainer.hpp"

namespace mstein {

/// Process exit codes of the command-line front end.
enum ExitCode : int {
  kExitOk = 0,
  kExitInput = 2,
  kExitNumerical = 3,
  kExitConfig = 4,
};

/// Maps the exception currently being handled to an exit code and writes its
/// message to err. Call from inside a catch block.
int exit_code_for_current_exception(std::ostream& err);

struct PreprocessResult {
  CorpusStats stats;
  std::size_t rows_read = 0;
  std::size_t malformed_rows = 0;
};

/// load -> 5-core on users -> build_sequences -> write corpus file.
PreprocessResult cmd_preprocess(const std::filesystem::path& input, InputFormat format,
                                const std::filesystem::path& output, int k_core = 5);

/// Synthetic corpus whose next item is a fixed cyclic permutation of the
/// previous one with probability 1 - noise and uniform otherwise.
struct PlantedCorpusSpec {
  int users = 500;
  int items = 50;
  int length = 20;
  double noise = 0.1;
  std::uint64_t seed = 7;
};
Corpus make_planted_corpus(const PlantedCorpusSpec& spec);

/// Training data for one run: noise_ratio extra random items are inserted
/// into every user's history before splitting, and only a portion of users
/// produce training batches (all users are still evaluated).
TrainingData build_run_data(const RunConfig& config, const Corpus& corpus);

struct RunResult {
  std::filesystem::path run_dir;
  RankingMetrics valid;
  RankingMetrics test;
  int best_epoch = 0;
  int epochs_run = 0;
};

/// fit + final evaluation. Writes config.snapshot, epochs.jsonl, metrics.json,
/// groups.csv, last.ckpt (resumable final state) and best.ckpt (parameters
/// of the best validation epoch) into run_dir.
RunResult cmd_train(const RunConfig& config, const Corpus& corpus,
                    const std::filesystem::path& run_dir, std::ostream* log = nullptr);

/// Re-evaluates best.ckpt of a run directory and rewrites metrics.json and
/// groups.csv under out_dir.
RunResult cmd_evaluate(const RunConfig& config, const Corpus& corpus,
                       const std::filesystem::path& checkpoint,
                       const std::filesystem::path& out_dir);

enum class SweepAxis { kNoise, kPortion, kBatch };
std::string to_string(SweepAxis axis);

struct SweepPoint {
  double value = 0.0;
  std::filesystem::path run_dir;
  bool ok = false;
  std::string error;
  RankingMetrics test;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::kNoise;
  std::vector<SweepPoint> points;
};

/// Runs cmd_train once per axis value into out_dir/<axis>_<value>/ and writes
/// out_dir/sweep.csv. A failing point is recorded and the sweep continues.
SweepResult cmd_sweep(const RunConfig& config, const Corpus& corpus, SweepAxis axis,
                      const std::filesystem::path& out_dir, std::ostream* log = nullptr);

/// "axis_value,mrr,recall@5,ndcg@5,status"
std::string sweep_csv(const SweepResult& result);

struct ReportRow {
  std::string name;
  std::string cl_loss;
  RankingMetrics test;
  std::vector<std::pair<std::string, std::string>> groups;  // bucket -> ndcg5 text
};

struct Report {
  std::vector<ReportRow> rows;
  std::vector<std::string> warnings;
};

/// Merges metrics.json and groups.csv of each run directory. Runs without a
/// readable metrics.json are skipped with a warning. Relative improvement in
/// the rendered tables is (a - b) / b against the first row.
Report cmd_report(const std::vector<std::filesystem::path>& run_dirs);
std::string report_markdown(const Report& report);
std::string report_csv(const Report& report);

}  // namespace mstein
