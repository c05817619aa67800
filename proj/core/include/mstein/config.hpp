#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mstein/trainer.hpp"

namespace mstein {

/// Training configuration plus experiment plumbing.
struct RunConfig {
  TrainConfig train;

  std::filesystem::path corpus;  // preprocessed "wdm-corpus v1" file
  std::filesystem::path out_dir = "runs";

  /// Applied to the training data of a single train/evaluate run.
  double noise_ratio = 0.0;
  double portion = 1.0;

  std::vector<double> noise_ratios{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::vector<double> portions{0.2, 0.4, 0.6, 0.8, 1.0};
  std::vector<int> batch_sizes{16, 32, 64, 128, 256};
  int jobs = 1;

  std::vector<double> length_edges{5, 8, 12, 20};
  std::vector<std::string> report_formats{"md", "csv"};

  void validate() const;
};

struct ConfigField {
  std::string name;
  std::string section;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

/// Every settable key, in snapshot order.
const std::vector<ConfigField>& config_fields();

/// Throws ConfigError for unknown keys or unparsable values.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

/// "key = value" lines; "[section]" headers and "#"/";" comments are ignored,
/// so keys are flat.
void apply_config_text(RunConfig& config, const std::string& text);
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

/// Full configuration in the same format apply_config_text reads.
std::string config_snapshot(const RunConfig& config);

/// Shortest decimal that reads back to the same double.
std::string format_double(double x);

}  // namespace mstein
