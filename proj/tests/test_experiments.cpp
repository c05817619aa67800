#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <sys/wait.h>
#include <cstdlib>
#include <sstream>
#include <string>

#include "mstein/config.hpp"
#include "mstein/errors.hpp"
#include "mstein/experiments.hpp"
#include "test_support.hpp"

using namespace mstein;
namespace fs = std::filesystem;

namespace {

RunConfig quick_config() {
  RunConfig c;
  c.train.dim = 8;
  c.train.layers = 1;
  c.train.heads = 1;
  c.train.max_len = 10;
  c.train.dropout = 0.1;
  c.train.learning_rate = 5e-3;
  c.train.batch_size = 16;
  c.train.max_epochs = 2;
  c.train.patience = 2;
  c.train.seed = 3;
  return c;
}

Corpus quick_corpus() {
  PlantedCorpusSpec spec;
  spec.users = 40;
  spec.items = 20;
  spec.length = 10;
  spec.noise = 0.1;
  spec.seed = 9;
  return make_planted_corpus(spec);
}

std::string line_count_csv(const std::string& text) {
  return std::to_string(std::count(text.begin(), text.end(), '\n'));
}

#ifdef MSTEIN_CLI_PATH
struct CommandResult {
  int code = 0;
  std::string out;
};

CommandResult run_cli(const std::string& args, const std::string& env = "") {
  const auto dir = fs::temp_directory_path();
  const std::string capture = (dir / "mstein_cli_stdout.txt").string();
  const std::string cmd = env + " \"" MSTEIN_CLI_PATH "\" " + args + " > \"" + capture + "\" 2>/dev/null";
  const int status = std::system(cmd.c_str());
  CommandResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = testing::read_file(capture);
  return r;
}
#endif

}  // namespace

TEST_CASE("config text") {
  RunConfig c;
  apply_config_text(c, R"(# comment
[model]
dim = 64
heads = 4
variance_aggregation = linear

[optim]
; comment
learning_rate = 1e-4
seed = 17

[loss]
cl_loss = cosine
[augment]
augment_ops = mask, substitute
[sweep]
noise_ratios = 0, 0.5
batch_sizes = 16,64
)");
  CHECK(c.train.dim == 64);
  CHECK(c.train.heads == 4);
  CHECK(c.train.variance_aggregation == VarianceAggregation::kWeights);
  CHECK(c.train.learning_rate == 1e-4);
  CHECK(c.train.seed == 17);
  CHECK(c.train.cl_loss == ContrastiveLoss::kCosine);
  CHECK(c.train.augmentation.enabled == std::vector<AugmentOp>{AugmentOp::kMask, AugmentOp::kSubstitute});
  CHECK(c.noise_ratios == std::vector<double>{0.0, 0.5});
  CHECK(c.batch_sizes == std::vector<int>{16, 64});

  SUBCASE("snapshot reads back to the same configuration") {
    c.train.beta = 0.1 + 0.2;  // not exactly representable in short decimal
    const std::string snap = config_snapshot(c);
    RunConfig back;
    apply_config_text(back, snap);
    CHECK(config_snapshot(back) == snap);
    CHECK(back.train.beta == c.train.beta);
    for (const auto& f : config_fields()) CHECK(f.get(back) == f.get(c));
  }

  SUBCASE("errors") {
    RunConfig d;
    CHECK_THROWS_AS(set_config_value(d, "no_such_key", "1"), ConfigError);
    CHECK_THROWS_AS(set_config_value(d, "dim", "wide"), ConfigError);
    CHECK_THROWS_AS(set_config_value(d, "cl_loss", "l1"), ConfigError);
    CHECK_THROWS_AS(apply_config_text(d, "dim 32\n"), ConfigError);
    CHECK_THROWS_AS(apply_config_file(d, "/nonexistent/mstein.conf"), InputError);
    d.noise_ratios.clear();
    CHECK_NOTHROW(d.validate());
    d = RunConfig{};
    d.portion = 0.0;
    CHECK_THROWS_AS(d.validate(), ConfigError);
  }

  CHECK(format_double(0.1) == "0.1");
  CHECK(std::stod(format_double(1e-4)) == 1e-4);
  CHECK(std::stod(format_double(0.1 + 0.2)) == 0.1 + 0.2);
}

TEST_CASE("exit codes") {
  auto code_for = [](auto thrower) {
    std::ostringstream err;
    try {
      thrower();
    } catch (...) {
      return exit_code_for_current_exception(err);
    }
    return -1;
  };
  CHECK(code_for([] { throw InputError("x"); }) == kExitInput);
  CHECK(code_for([] { throw std::invalid_argument("x"); }) == kExitInput);
  CHECK(code_for([] { throw NumericalError("x"); }) == kExitNumerical);
  CHECK(code_for([] { throw ConfigError("x"); }) == kExitConfig);
}

TEST_CASE("planted corpus") {
  const Corpus a = quick_corpus();
  const Corpus b = quick_corpus();
  CHECK(a.sequences == b.sequences);
  CHECK(a.sequences.size() == 40);
  for (const auto& s : a.sequences) CHECK(s.items.size() == 10);
  CHECK(a.vocab.item_count <= 20);

  PlantedCorpusSpec clean;
  clean.users = 30;
  clean.items = 12;
  clean.length = 8;
  clean.noise = 0.0;
  const Corpus c = make_planted_corpus(clean);
  // Without noise every item has exactly one successor.
  std::map<int, std::set<int>> successors;
  for (const auto& s : c.sequences) {
    for (std::size_t t = 0; t + 1 < s.items.size(); ++t) successors[s.items[t]].insert(s.items[t + 1]);
  }
  for (const auto& [item, next] : successors) CHECK(next.size() == 1);
}

TEST_CASE("run data") {
  const Corpus corpus = quick_corpus();
  RunConfig c = quick_config();

  const TrainingData plain = build_run_data(c, corpus);
  CHECK(plain.train_users.size() == 40);

  c.noise_ratio = 0.5;
  const TrainingData noisy = build_run_data(c, corpus);
  for (std::size_t u = 0; u < noisy.splits.size(); ++u) {
    CHECK(noisy.splits[u].train_items.size() == plain.splits[u].train_items.size() + 5);
  }

  c.noise_ratio = 0.0;
  c.portion = 0.4;
  const TrainingData part = build_run_data(c, corpus);
  CHECK(part.train_users.size() == 16);
  CHECK(part.splits.size() == 40);
}

TEST_CASE("train, evaluate, sweep and report") {
  const Corpus corpus = quick_corpus();
  const RunConfig c = quick_config();
  const auto root = testing::scratch_dir("experiments");

  const RunResult run = cmd_train(c, corpus, root / "run_a");
  for (const char* f : {"config.snapshot", "epochs.jsonl", "metrics.json", "groups.csv", "last.ckpt", "best.ckpt"}) {
    CHECK(fs::exists(root / "run_a" / f));
  }
  CHECK(run.epochs_run == 2);
  CHECK(line_count_csv(testing::read_file(root / "run_a" / "epochs.jsonl")) == "2");
  const std::string metrics = testing::read_file(root / "run_a" / "metrics.json");
  CHECK(metrics.rfind("{\n  \"valid\": {\"split\": \"valid\"", 0) == 0);

  SUBCASE("identical seeds give byte-identical metrics") {
    cmd_train(c, corpus, root / "run_b");
    CHECK(testing::read_file(root / "run_b" / "metrics.json") == metrics);
  }

  SUBCASE("evaluate reproduces the training metrics from best.ckpt") {
    const RunResult again = cmd_evaluate(c, corpus, root / "run_a" / "best.ckpt", root / "eval");
    CHECK(testing::read_file(root / "eval" / "metrics.json") == metrics);
    CHECK(again.test.mrr == run.test.mrr);
    CHECK_THROWS_AS(cmd_evaluate(c, corpus, root / "nope.ckpt", root / "eval2"), InputError);
  }

  SUBCASE("noise sweep") {
    RunConfig s = c;
    s.noise_ratios = {0.0, 0.5};
    const SweepResult r = cmd_sweep(s, corpus, SweepAxis::kNoise, root / "sweep");
    REQUIRE(r.points.size() == 2);
    CHECK(r.points[0].ok);
    CHECK(r.points[0].run_dir == root / "sweep" / "noise_0");
    CHECK(fs::exists(root / "sweep" / "noise_0p5" / "metrics.json"));
    // The noise-free point is the plain training run.
    CHECK(testing::read_file(root / "sweep" / "noise_0" / "metrics.json") == metrics);
    const std::string csv = testing::read_file(root / "sweep" / "sweep.csv");
    CHECK(csv.rfind("axis_value,mrr,recall@5,ndcg@5,status\n", 0) == 0);
    CHECK(line_count_csv(csv) == "3");
  }

  SUBCASE("batch sweep with parallel jobs matches the sequential one") {
    RunConfig s = c;
    s.batch_sizes = {8, 32};
    const SweepResult seq = cmd_sweep(s, corpus, SweepAxis::kBatch, root / "seq");
    s.jobs = 2;
    const SweepResult par = cmd_sweep(s, corpus, SweepAxis::kBatch, root / "par");
    CHECK(testing::read_file(root / "seq" / "sweep.csv") == testing::read_file(root / "par" / "sweep.csv"));
    CHECK(seq.points[1].run_dir.filename() == "batch_32");
  }

  SUBCASE("failing points are recorded and the sweep continues") {
    RunConfig s = c;
    s.portions = {0.5, 1.0};
    fs::create_directories(root / "bad");
    testing::write_file(root / "bad" / "portion_0p5", "occupied");  // run directory cannot be created
    const SweepResult r = cmd_sweep(s, corpus, SweepAxis::kPortion, root / "bad");
    REQUIRE(r.points.size() == 2);
    CHECK_FALSE(r.points[0].ok);
    CHECK_FALSE(r.points[0].error.empty());
    CHECK(r.points[1].ok);
    const std::string csv = testing::read_file(root / "bad" / "sweep.csv");
    CHECK(csv.find("0.5,,,,failed\n") != std::string::npos);
  }

  SUBCASE("report") {
    RunConfig cos = c;
    cos.train.cl_loss = ContrastiveLoss::kCosine;
    const RunResult other = cmd_train(cos, corpus, root / "run_cos");
    fs::create_directories(root / "empty");
    const Report r = cmd_report({root / "run_a", root / "run_cos", root / "empty"});
    REQUIRE(r.rows.size() == 2);
    CHECK(r.warnings.size() == 1);
    CHECK(r.rows[0].name == "run_a");
    CHECK(r.rows[0].cl_loss == "wdm");
    CHECK(r.rows[1].cl_loss == "cosine");
    CHECK(r.rows[1].test.mrr == doctest::Approx(other.test.mrr).epsilon(1e-15));

    const std::string csv = report_csv(r);
    std::istringstream lines(csv);
    std::string header, first, second;
    std::getline(lines, header);
    std::getline(lines, first);
    std::getline(lines, second);
    CHECK(header.rfind("run,cl_loss,recall@1,recall@5,ndcg@5,recall@10,ndcg@10,mrr,mrr_rel,ndcg@5_rel", 0) == 0);
    CHECK(header.find("ndcg@5 seq_length:[5;8)") != std::string::npos);
    // Relative MRR of the second run against the first, (a - b) / b.
    std::vector<std::string> cells;
    std::stringstream ss(second);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    REQUIRE(cells.size() > 8);
    const double rel = (other.test.mrr - run.test.mrr) / run.test.mrr;
    CHECK(std::stod(cells[8]) == doctest::Approx(rel).epsilon(1e-3));
    CHECK(report_markdown(r).find("| run_cos | cosine |") != std::string::npos);

    const Report single = cmd_report({root / "run_a"});
    CHECK(single.rows.size() == 1);
    CHECK(line_count_csv(report_csv(single)) == "2");
  }
}

TEST_CASE("preprocess") {
  const auto root = testing::scratch_dir("preprocess");
  CHECK_THROWS_AS(cmd_preprocess(root / "missing.tsv", InputFormat::kTsv, root / "out.txt"), InputError);
}

#ifdef MSTEIN_CLI_PATH
TEST_CASE("command-line front end") {
  const auto root = testing::scratch_dir("cli");
  const std::string data = MSTEIN_TEST_DATA_DIR;

  SUBCASE("missing input exits with 2") {
    CHECK(run_cli("preprocess --input " + (root / "missing.tsv").string() + " --output " +
                  (root / "c.txt").string())
              .code == 2);
  }

  SUBCASE("bad configuration exits with 4") {
    CHECK(run_cli("train --dim 0 --corpus x").code == 4);
    CHECK(run_cli("train --no_such_flag 1").code == 4);
    CHECK(run_cli("train --seed 1 --seed 2").code == 4);
  }

  SUBCASE("preprocess writes the golden corpus") {
    const auto out = root / "tiny.txt";
    const CommandResult r = run_cli("preprocess --input " + data + "/tiny.tsv --output " + out.string());
    CHECK(r.code == 0);
    CHECK(testing::read_file(out) == testing::read_file(data + "/tiny.golden"));
  }

  SUBCASE("precedence: defaults < config file < WDM_SEED < flags") {
    const auto corpus = root / "planted.txt";
    REQUIRE(run_cli("synth --users 30 --items 15 --length 8 --output " + corpus.string()).code == 0);
    testing::write_file(root / "run.conf", "[optim]\nseed = 11\nmax_epochs = 1\n[model]\ndim = 8\nlayers = 1\n");
    const std::string base = "train --config " + (root / "run.conf").string() + " --corpus " + corpus.string();
    auto seed_of = [&](const fs::path& dir) {
      RunConfig snap;
      apply_config_file(snap, dir / "config.snapshot");
      CHECK(snap.train.dim == 8);
      CHECK(snap.train.max_epochs == 1);
      return snap.train.seed;
    };
    REQUIRE(run_cli(base + " --out " + (root / "a").string()).code == 0);
    CHECK(seed_of(root / "a") == 11);
    REQUIRE(run_cli(base + " --out " + (root / "b").string(), "WDM_SEED=12").code == 0);
    CHECK(seed_of(root / "b") == 12);
    const CommandResult flagged = run_cli(base + " --seed 13 --out " + (root / "c").string(), "WDM_SEED=12");
    REQUIRE(flagged.code == 0);
    CHECK(seed_of(root / "c") == 13);
    CHECK(flagged.out.find("\"split\": \"test\"") != std::string::npos);

    const CommandResult rep = run_cli("report " + (root / "a").string() + " " + (root / "c").string() +
                                      " --out " + (root / "rep").string());
    CHECK(rep.code == 0);
    CHECK(fs::exists(root / "rep" / "report.md"));
    CHECK(fs::exists(root / "rep" / "report.csv"));
  }
}
#endif
