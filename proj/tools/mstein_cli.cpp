// mstein: preprocessing, training, evaluation, sweeps and reports.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "mstein/config.hpp"
#include "mstein/errors.hpp"
#include "mstein/experiments.hpp"

namespace fs = std::filesystem;
using namespace mstein;

namespace {

struct ConfigOptions {
  std::string config_file;
  std::map<std::string, std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigOptions& opts) {
  cmd->add_option("--config", opts.config_file, "key = value configuration file");
  for (const auto& field : config_fields()) {
    cmd->add_option_function<std::string>(
        "--" + field.name,
        [&opts, name = field.name](const std::string& v) { opts.overrides[name] = v; },
        field.help);
  }
}

// defaults < config file < WDM_SEED < command-line flags
RunConfig resolve_config(const ConfigOptions& opts) {
  RunConfig config;
  if (!opts.config_file.empty()) apply_config_file(config, opts.config_file);
  if (const char* seed = std::getenv("WDM_SEED"); seed && *seed) {
    set_config_value(config, "seed", seed);
  }
  for (const auto& [key, value] : opts.overrides) set_config_value(config, key, value);
  config.validate();
  return config;
}

Corpus load_run_corpus(const RunConfig& config) {
  if (config.corpus.empty()) throw InputError("no corpus given (use --corpus or the corpus key)");
  if (!fs::exists(config.corpus)) throw InputError("corpus file not found: " + config.corpus.string());
  return read_corpus(config.corpus);
}

void print_metrics(const RunResult& r) {
  std::cout << metrics_json(r.valid) << '\n' << metrics_json(r.test) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Tape buffers are reallocated every step; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
  CLI::App app{"MStein sequential recommender: Wasserstein self-attention with contrastive training"};
  app.require_subcommand(1);

  std::string out_dir = "runs/latest";

  auto* preprocess = app.add_subcommand("preprocess", "raw interaction log -> 5-core corpus file");
  std::string input, format = "tsv", output;
  int k_core = 5;
  preprocess->add_option("--input", input, "interaction log (tsv: user item timestamp, or Amazon JSONL)")
      ->required();
  preprocess->add_option("--format", format, "tsv or amazon-jsonl")->capture_default_str();
  preprocess->add_option("--output", output, "corpus file (default <out>/corpus.txt)");
  preprocess->add_option("--k_core", k_core, "minimum events per user")->capture_default_str();
  preprocess->add_option("--out", out_dir, "output directory")->capture_default_str();

  auto* synth = app.add_subcommand("synth", "write a planted next-item corpus");
  PlantedCorpusSpec planted;
  synth->add_option("--users", planted.users)->capture_default_str();
  synth->add_option("--items", planted.items)->capture_default_str();
  synth->add_option("--length", planted.length)->capture_default_str();
  synth->add_option("--noise", planted.noise, "probability of a random transition")->capture_default_str();
  synth->add_option("--synth_seed", planted.seed)->capture_default_str();
  synth->add_option("--output", output, "corpus file (default <out>/corpus.txt)");
  synth->add_option("--out", out_dir, "output directory")->capture_default_str();

  ConfigOptions train_opts, eval_opts, noise_opts, portion_opts, batch_opts;
  auto* train = app.add_subcommand("train", "fit a model and write a run directory");
  add_config_options(train, train_opts);
  train->add_option("--out", out_dir, "run directory")->capture_default_str();

  auto* evaluate_cmd = app.add_subcommand("evaluate", "re-evaluate a checkpoint");
  add_config_options(evaluate_cmd, eval_opts);
  std::string checkpoint;
  evaluate_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  evaluate_cmd->add_option("--out", out_dir, "output directory")->capture_default_str();

  auto* sweep_noise = app.add_subcommand("sweep-noise", "train once per noise ratio");
  add_config_options(sweep_noise, noise_opts);
  sweep_noise->add_option("--out", out_dir, "sweep directory")->capture_default_str();
  auto* sweep_portion = app.add_subcommand("sweep-portion", "train once per training-user portion");
  add_config_options(sweep_portion, portion_opts);
  sweep_portion->add_option("--out", out_dir, "sweep directory")->capture_default_str();
  auto* sweep_batch = app.add_subcommand("sweep-batch", "train once per batch size");
  add_config_options(sweep_batch, batch_opts);
  sweep_batch->add_option("--out", out_dir, "sweep directory")->capture_default_str();

  auto* report = app.add_subcommand("report", "merge run directories into one comparison table");
  std::vector<std::string> run_dirs;
  std::string formats = "md,csv";
  report->add_option("runs", run_dirs, "run directories")->required();
  report->add_option("--report_formats", formats, "md,csv")->capture_default_str();
  report->add_option("--out", out_dir, "output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const fs::path out(out_dir);
    if (preprocess->parsed()) {
      const fs::path target = output.empty() ? out / "corpus.txt" : fs::path(output);
      const PreprocessResult r = cmd_preprocess(input, parse_input_format(format), target, k_core);
      if (r.malformed_rows > 0) {
        std::cerr << "warning: skipped " << r.malformed_rows << " malformed rows of " << r.rows_read << '\n';
      }
      std::cout << format_stats(r.stats) << '\n';
    } else if (synth->parsed()) {
      const fs::path target = output.empty() ? out / "corpus.txt" : fs::path(output);
      const Corpus corpus = make_planted_corpus(planted);
      if (target.has_parent_path()) fs::create_directories(target.parent_path());
      write_corpus(target, corpus);
      std::cout << format_stats(corpus_stats(corpus)) << '\n';
    } else if (train->parsed()) {
      const RunConfig config = resolve_config(train_opts);
      const RunResult r = cmd_train(config, load_run_corpus(config), out, &std::cerr);
      print_metrics(r);
    } else if (evaluate_cmd->parsed()) {
      const RunConfig config = resolve_config(eval_opts);
      print_metrics(cmd_evaluate(config, load_run_corpus(config), checkpoint, out));
    } else if (sweep_noise->parsed() || sweep_portion->parsed() || sweep_batch->parsed()) {
      const ConfigOptions& opts = sweep_noise->parsed() ? noise_opts
                                  : sweep_portion->parsed() ? portion_opts
                                                            : batch_opts;
      const SweepAxis axis = sweep_noise->parsed() ? SweepAxis::kNoise
                             : sweep_portion->parsed() ? SweepAxis::kPortion
                                                       : SweepAxis::kBatch;
      const RunConfig config = resolve_config(opts);
      const SweepResult r = cmd_sweep(config, load_run_corpus(config), axis, out, &std::cerr);
      std::cout << sweep_csv(r);
      for (const auto& p : r.points) {
        if (!p.ok) return kExitNumerical;
      }
    } else if (report->parsed()) {
      RunConfig fmt;
      set_config_value(fmt, "report_formats", formats);
      fmt.validate();
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      const Report r = cmd_report(dirs);
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
      fs::create_directories(out);
      for (const auto& f : fmt.report_formats) {
        const std::string text = f == "md" ? report_markdown(r) : report_csv(r);
        std::ofstream file(out / ("report." + f));
        file << text;
        if (!file) throw InputError("cannot write " + (out / ("report." + f)).string());
      }
      std::cout << report_markdown(r);
    }
  } catch (...) {
    return exit_code_for_current_exception(std::cerr);
  }
  return kExitOk;
}
