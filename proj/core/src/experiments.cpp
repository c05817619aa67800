#include "mstein/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "mstein/errors.hpp"

namespace mstein {
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kNoiseStream = 300;
constexpr std::uint64_t kPortionStream = 400;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
  if (!out) throw InputError("I/O error while writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string metrics_file(const RankingMetrics& valid, const RankingMetrics& test) {
  return "{\n  \"valid\": " + metrics_json(valid) + ",\n  \"test\": " + metrics_json(test) + "\n}\n";
}

std::string groups_file(const RankingMetrics& test, std::span<const SplitSequences> splits,
                        const std::vector<double>& length_edges) {
  const GroupReport by_length = group_report(test, splits, GroupKey::kSeqLength, length_edges);
  const std::vector<double> pop_edges = popularity_quartile_edges(test, splits);
  const GroupReport by_pop = group_report(test, splits, GroupKey::kItemPopularity, pop_edges);
  std::string out = group_report_csv(by_length);
  const std::string pop = group_report_csv(by_pop);
  out += pop.substr(pop.find('\n') + 1);
  return out;
}

std::string axis_label(double value) {
  std::string s = format_double(value);
  for (char& c : s) {
    if (c == '.') c = 'p';
  }
  return s;
}

RunConfig with_axis_value(const RunConfig& base, SweepAxis axis, double value) {
  RunConfig c = base;
  switch (axis) {
    case SweepAxis::kNoise: c.noise_ratio = value; break;
    case SweepAxis::kPortion: c.portion = value; break;
    case SweepAxis::kBatch: c.train.batch_size = static_cast<int>(value); break;
  }
  return c;
}

double metric_or_nan(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number()) return std::nan("");
  return j[key].get<double>();
}

std::string rel_text(double a, double b) {
  if (!std::isfinite(a) || !std::isfinite(b) || b == 0.0) return "";
  std::ostringstream out;
  out << std::fixed << std::setprecision(4) << (a - b) / b;
  return out.str();
}

std::string fixed4(double x) {
  if (!std::isfinite(x)) return "";
  std::ostringstream out;
  out << std::fixed << std::setprecision(4) << x;
  return out.str();
}

}  // namespace

int exit_code_for_current_exception(std::ostream& err) {
  try {
    throw;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    err << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

PreprocessResult cmd_preprocess(const fs::path& input, InputFormat format, const fs::path& output,
                                int k_core) {
  if (!fs::exists(input)) throw InputError("input file not found: " + input.string());
  const LoadResult loaded = load_interactions(input, format);
  const std::vector<Interaction> kept = apply_k_core(loaded.interactions, k_core);
  const Corpus corpus = build_sequences(kept);
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  write_corpus(output, corpus);
  return PreprocessResult{corpus_stats(corpus), loaded.rows_read, loaded.malformed_rows.size()};
}

Corpus make_planted_corpus(const PlantedCorpusSpec& spec) {
  if (spec.users < 1 || spec.items < 2 || spec.length < 5) {
    throw ConfigError("planted corpus needs users >= 1, items >= 2, length >= 5");
  }
  if (!(spec.noise >= 0.0 && spec.noise <= 1.0)) throw ConfigError("planted noise must be in [0, 1]");
  Rng rng(spec.seed);
  std::vector<int> cycle(static_cast<std::size_t>(spec.items));
  std::iota(cycle.begin(), cycle.end(), 1);
  rng.shuffle(cycle);
  std::vector<int> next(static_cast<std::size_t>(spec.items) + 1, 0);
  for (std::size_t i = 0; i < cycle.size(); ++i) next[cycle[i]] = cycle[(i + 1) % cycle.size()];

  std::vector<Interaction> log;
  for (int u = 0; u < spec.users; ++u) {
    int item = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(spec.items)));
    for (int t = 0; t < spec.length; ++t) {
      log.push_back({"u" + std::to_string(u), "i" + std::to_string(item), t});
      item = rng.uniform01() < spec.noise
                 ? 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(spec.items)))
                 : next[static_cast<std::size_t>(item)];
    }
  }
  return build_sequences(log);
}

TrainingData build_run_data(const RunConfig& config, const Corpus& corpus) {
  Corpus noisy = corpus;
  if (config.noise_ratio > 0.0) {
    Rng noise_rng(derive_seed(config.train.seed, kNoiseStream));
    for (auto& seq : noisy.sequences) {
      seq = inject_noise(seq, config.noise_ratio, corpus.vocab.item_count, noise_rng);
    }
  }
  TrainingData data = prepare_training_data(noisy, config.train.correlation_top_k);
  if (config.portion < 1.0) {
    Rng portion_rng(derive_seed(config.train.seed, kPortionStream));
    const std::vector<UserSequence> kept = subsample_training(noisy.sequences, config.portion, portion_rng);
    std::map<int, std::size_t> position;
    for (std::size_t i = 0; i < noisy.sequences.size(); ++i) position[noisy.sequences[i].user_index] = i;
    data.train_users.clear();
    std::vector<std::vector<int>> prefixes;
    for (const auto& seq : kept) {
      const std::size_t u = position.at(seq.user_index);
      data.train_users.push_back(u);
      prefixes.push_back(data.splits[u].train_items);
    }
    data.correlation = build_item_correlation(prefixes, data.item_count, config.train.correlation_top_k);
  }
  return data;
}

RunResult cmd_train(const RunConfig& config, const Corpus& corpus, const fs::path& run_dir,
                    std::ostream* log) {
  config.validate();
  fs::create_directories(run_dir);
  write_text(run_dir / "config.snapshot", config_snapshot(config));
  const TrainingData data = build_run_data(config, corpus);
  const EncoderConfig encoder = config.train.encoder_config(data.item_count);

  std::ofstream epochs(run_dir / "epochs.jsonl", std::ios::binary | std::ios::trunc);
  if (!epochs) throw InputError("cannot write " + (run_dir / "epochs.jsonl").string());
  FitResult fitted = fit(config.train, data, [&](const EpochRecord& r) {
    epochs << epoch_json(r) << '\n';
    epochs.flush();
    if (log) {
      *log << "epoch " << r.epoch << " loss " << std::setprecision(6) << r.loss.total
           << " valid_mrr " << r.valid_mrr << '\n';
    }
  });

  save_checkpoint(fitted.final_state, encoder, run_dir / "last.ckpt");
  TrainState best = fitted.final_state;
  best.params = fitted.best_params;
  save_checkpoint(best, encoder, run_dir / "best.ckpt");

  const EvalOptions opts{config.train.exclude_history, config.train.eval_batch_size};
  RunResult result;
  result.run_dir = run_dir;
  result.valid = evaluate(fitted.best_params, encoder, data.splits, SplitKind::kValid, opts);
  result.test = evaluate(fitted.best_params, encoder, data.splits, SplitKind::kTest, opts);
  result.best_epoch = fitted.best_epoch;
  result.epochs_run = static_cast<int>(fitted.history.size());
  write_text(run_dir / "metrics.json", metrics_file(result.valid, result.test));
  write_text(run_dir / "groups.csv", groups_file(result.test, data.splits, config.length_edges));
  return result;
}

RunResult cmd_evaluate(const RunConfig& config, const Corpus& corpus, const fs::path& checkpoint,
                       const fs::path& out_dir) {
  config.validate();
  if (!fs::exists(checkpoint)) throw InputError("checkpoint not found: " + checkpoint.string());
  const TrainingData data = build_run_data(config, corpus);
  const EncoderConfig encoder = config.train.encoder_config(data.item_count);
  const TrainState state = load_checkpoint(checkpoint, encoder);
  const EvalOptions opts{config.train.exclude_history, config.train.eval_batch_size};
  RunResult result;
  result.run_dir = out_dir;
  result.valid = evaluate(state.params, encoder, data.splits, SplitKind::kValid, opts);
  result.test = evaluate(state.params, encoder, data.splits, SplitKind::kTest, opts);
  result.epochs_run = state.epoch;
  fs::create_directories(out_dir);
  write_text(out_dir / "metrics.json", metrics_file(result.valid, result.test));
  write_text(out_dir / "groups.csv", groups_file(result.test, data.splits, config.length_edges));
  return result;
}

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kNoise: return "noise";
    case SweepAxis::kPortion: return "portion";
    case SweepAxis::kBatch: return "batch";
  }
  return "noise";
}

SweepResult cmd_sweep(const RunConfig& config, const Corpus& corpus, SweepAxis axis,
                      const fs::path& out_dir, std::ostream* log) {
  std::vector<double> values;
  switch (axis) {
    case SweepAxis::kNoise: values = config.noise_ratios; break;
    case SweepAxis::kPortion: values = config.portions; break;
    case SweepAxis::kBatch: values.assign(config.batch_sizes.begin(), config.batch_sizes.end()); break;
  }
  if (values.empty()) throw ConfigError("sweep over " + to_string(axis) + " needs at least one value");
  config.validate();
  fs::create_directories(out_dir);

  SweepResult result;
  result.axis = axis;
  result.points.resize(values.size());
  std::mutex log_mutex;
  auto run_point = [&](std::size_t i) {
    SweepPoint& p = result.points[i];
    p.value = values[i];
    p.run_dir = out_dir / (to_string(axis) + "_" + axis_label(values[i]));
    try {
      const RunConfig point = with_axis_value(config, axis, values[i]);
      p.test = cmd_train(point, corpus, p.run_dir).test;
      p.ok = true;
    } catch (const std::exception& e) {
      p.error = e.what();
    }
    if (log) {
      std::lock_guard lock(log_mutex);
      *log << to_string(axis) << "=" << format_double(p.value) << ' '
           << (p.ok ? "mrr " + format_double(p.test.mrr) : "failed: " + p.error) << '\n';
    }
  };

  const auto jobs = static_cast<std::size_t>(std::max(1, config.jobs));
  if (jobs == 1) {
    for (std::size_t i = 0; i < values.size(); ++i) run_point(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < std::min(jobs, values.size()); ++w) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < values.size(); i = next++) run_point(i);
      });
    }
    for (auto& t : workers) t.join();
  }
  write_text(out_dir / "sweep.csv", sweep_csv(result));
  return result;
}

std::string sweep_csv(const SweepResult& result) {
  std::string out = "axis_value,mrr,recall@5,ndcg@5,status\n";
  for (const auto& p : result.points) {
    out += format_double(p.value) + ",";
    if (p.ok) {
      out += format_double(p.test.mrr) + "," + format_double(p.test.recall5) + "," +
             format_double(p.test.ndcg5) + ",ok\n";
    } else {
      out += ",,,failed\n";
    }
  }
  return out;
}

Report cmd_report(const std::vector<fs::path>& run_dirs) {
  Report report;
  for (const auto& dir : run_dirs) {
    const fs::path metrics_path = dir / "metrics.json";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text(metrics_path));
    } catch (const std::exception& e) {
      report.warnings.push_back("skipping " + dir.string() + ": " + e.what());
      continue;
    }
    if (!j.contains("test") || !j["test"].is_object()) {
      report.warnings.push_back("skipping " + dir.string() + ": metrics.json has no test block");
      continue;
    }
    ReportRow row;
    row.name = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    const auto& t = j["test"];
    row.test.recall1 = metric_or_nan(t, "recall@1");
    row.test.recall5 = metric_or_nan(t, "recall@5");
    row.test.recall10 = metric_or_nan(t, "recall@10");
    row.test.ndcg5 = metric_or_nan(t, "ndcg@5");
    row.test.ndcg10 = metric_or_nan(t, "ndcg@10");
    row.test.mrr = metric_or_nan(t, "mrr");
    row.test.n_users = t.value("n_users", std::size_t{0});

    if (fs::exists(dir / "config.snapshot")) {
      RunConfig snap;
      try {
        apply_config_file(snap, dir / "config.snapshot");
        row.cl_loss = to_string(snap.train.cl_loss);
      } catch (const std::exception& e) {
        report.warnings.push_back(dir.string() + ": unreadable config.snapshot: " + e.what());
      }
    }
    if (fs::exists(dir / "groups.csv")) {
      std::istringstream in(read_text(dir / "groups.csv"));
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        const auto c1 = line.find(',');
        const auto c2 = line.rfind(',');
        if (c1 == std::string::npos || c2 == c1) continue;
        row.groups.emplace_back(line.substr(0, c1), line.substr(c2 + 1));
      }
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

namespace {

struct Column {
  std::string name;
  std::vector<std::string> cells;
};

std::vector<Column> report_columns(const Report& report) {
  std::vector<Column> cols{{"run", {}},       {"cl_loss", {}},   {"recall@1", {}},
                           {"recall@5", {}},  {"ndcg@5", {}},    {"recall@10", {}},
                           {"ndcg@10", {}},   {"mrr", {}},       {"mrr_rel", {}},
                           {"ndcg@5_rel", {}}};
  std::vector<std::string> group_names;
  for (const auto& row : report.rows) {
    for (const auto& g : row.groups) {
      if (std::find(group_names.begin(), group_names.end(), g.first) == group_names.end()) {
        group_names.push_back(g.first);
      }
    }
  }
  const ReportRow* base = report.rows.empty() ? nullptr : &report.rows.front();
  for (const auto& row : report.rows) {
    const auto& m = row.test;
    const std::vector<std::string> cells{row.name,          row.cl_loss,         fixed4(m.recall1),
                                         fixed4(m.recall5), fixed4(m.ndcg5),     fixed4(m.recall10),
                                         fixed4(m.ndcg10),  fixed4(m.mrr),       rel_text(m.mrr, base->test.mrr),
                                         rel_text(m.ndcg5, base->test.ndcg5)};
    for (std::size_t c = 0; c < cells.size(); ++c) cols[c].cells.push_back(cells[c]);
  }
  for (const auto& name : group_names) {
    Column col{"ndcg@5 " + name, {}};
    for (const auto& row : report.rows) {
      std::string cell;
      for (const auto& g : row.groups) {
        if (g.first == name && !g.second.empty()) cell = fixed4(std::stod(g.second));
      }
      col.cells.push_back(cell);
    }
    cols.push_back(std::move(col));
  }
  return cols;
}

}  // namespace

std::string report_markdown(const Report& report) {
  const auto cols = report_columns(report);
  std::string out = "|";
  for (const auto& c : cols) out += " " + c.name + " |";
  out += "\n|";
  for (std::size_t i = 0; i < cols.size(); ++i) out += i < 2 ? "---|" : "---:|";
  out += "\n";
  for (std::size_t r = 0; r < report.rows.size(); ++r) {
    out += "|";
    for (const auto& c : cols) out += " " + c.cells[r] + " |";
    out += "\n";
  }
  if (!report.rows.empty()) {
    out += "\nRelative columns are (a - b) / b against " + report.rows.front().name + ".\n";
  }
  return out;
}

std::string report_csv(const Report& report) {
  const auto cols = report_columns(report);
  std::string out;
  for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i].name;
  out += "\n";
  for (std::size_t r = 0; r < report.rows.size(); ++r) {
    for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i].cells[r];
    out += "\n";
  }
  return out;
}

}  // namespace mstein
