#include "mstein/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "mstein/errors.hpp"

namespace mstein {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  T value{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("bad value for " + key + ": '" + text + "'");
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("bad value for " + key + ": '" + text + "' (expected true or false)");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) out.push_back(parse_number<T>(key, item));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_floating_point_v<T>) {
      out += format_double(values[i]);
    } else if constexpr (std::is_arithmetic_v<T>) {
      out += std::to_string(values[i]);
    } else {
      out += values[i];
    }
  }
  return out;
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

std::vector<ConfigField> make_fields() {
  std::vector<ConfigField> f;
  auto num = [&f](std::string name, std::string section, std::string help, auto member) {
    using T = std::remove_reference_t<decltype(member(std::declval<RunConfig&>()))>;
    f.push_back({name, section, help,
                 [member, name](RunConfig& c, const std::string& v) { member(c) = parse_number<T>(name, v); },
                 [member](const RunConfig& c) {
                   const T x = member(const_cast<RunConfig&>(c));
                   if constexpr (std::is_floating_point_v<T>) {
                     return format_double(x);
                   } else {
                     return std::to_string(x);
                   }
                 }});
  };

  num("dim", "model", "embedding dimension d", [](RunConfig& c) -> int& { return c.train.dim; });
  num("layers", "model", "number of encoder blocks", [](RunConfig& c) -> int& { return c.train.layers; });
  num("heads", "model", "attention heads", [](RunConfig& c) -> int& { return c.train.heads; });
  num("max_len", "model", "maximum sequence length", [](RunConfig& c) -> int& { return c.train.max_len; });
  num("ffn_dim", "model", "feed-forward width (0 = dim)", [](RunConfig& c) -> int& { return c.train.ffn_dim; });
  num("dropout", "model", "dropout rate", [](RunConfig& c) -> double& { return c.train.dropout; });
  f.push_back({"variance_aggregation", "model", "attention variance weights: squared or linear",
               [](RunConfig& c, const std::string& v) {
                 const std::string s = trim(v);
                 if (s == "squared") {
                   c.train.variance_aggregation = VarianceAggregation::kSquaredWeights;
                 } else if (s == "linear") {
                   c.train.variance_aggregation = VarianceAggregation::kWeights;
                 } else {
                   throw ConfigError("variance_aggregation must be squared or linear, got '" + v + "'");
                 }
               },
               [](const RunConfig& c) {
                 return std::string(c.train.variance_aggregation == VarianceAggregation::kSquaredWeights
                                        ? "squared"
                                        : "linear");
               }});

  num("learning_rate", "optim", "Adam step size", [](RunConfig& c) -> double& { return c.train.learning_rate; });
  num("weight_decay", "optim", "decoupled weight decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
  num("batch_size", "optim", "users per optimizer step", [](RunConfig& c) -> int& { return c.train.batch_size; });
  num("clip_norm", "optim", "global gradient norm cap (<= 0 disables)", [](RunConfig& c) -> double& { return c.train.clip_norm; });
  num("patience", "optim", "epochs without validation MRR improvement before stopping", [](RunConfig& c) -> int& { return c.train.patience; });
  num("max_epochs", "optim", "epoch budget", [](RunConfig& c) -> int& { return c.train.max_epochs; });
  num("seed", "optim", "random seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; });

  num("beta", "loss", "contrastive loss weight", [](RunConfig& c) -> double& { return c.train.beta; });
  num("lambda", "loss", "positive-vs-negative hinge weight", [](RunConfig& c) -> double& { return c.train.lambda; });
  num("pvn_margin", "loss", "hinge margin", [](RunConfig& c) -> double& { return c.train.pvn_margin; });
  num("temperature", "loss", "cosine contrastive temperature", [](RunConfig& c) -> double& { return c.train.temperature; });
  f.push_back({"cl_loss", "loss", "contrastive loss: wdm, cosine or none",
               [](RunConfig& c, const std::string& v) { c.train.cl_loss = parse_contrastive_loss(trim(v)); },
               [](const RunConfig& c) { return to_string(c.train.cl_loss); }});
  num("correlation_top_k", "augment", "correlated items kept per item",
      [](RunConfig& c) -> std::size_t& { return c.train.correlation_top_k; });
  f.push_back({"augment_ops", "augment", "enabled ops: crop,mask,reorder,substitute,insert",
               [](RunConfig& c, const std::string& v) {
                 std::vector<AugmentOp> ops;
                 for (const auto& s : split_list(v)) ops.push_back(parse_augment_op(s));
                 c.train.augmentation.enabled = ops;
               },
               [](const RunConfig& c) {
                 std::vector<std::string> names;
                 for (AugmentOp op : c.train.augmentation.enabled) names.push_back(to_string(op));
                 return join(names);
               }});
  num("crop_ratio", "augment", "kept fraction for crop", [](RunConfig& c) -> double& { return c.train.augmentation.crop_ratio; });
  num("mask_ratio", "augment", "masked fraction", [](RunConfig& c) -> double& { return c.train.augmentation.mask_ratio; });
  num("reorder_ratio", "augment", "shuffled window fraction", [](RunConfig& c) -> double& { return c.train.augmentation.reorder_ratio; });
  num("substitute_rate", "augment", "substituted fraction", [](RunConfig& c) -> double& { return c.train.augmentation.substitute_rate; });
  num("insert_rate", "augment", "inserted fraction", [](RunConfig& c) -> double& { return c.train.augmentation.insert_rate; });
  num("short_threshold", "augment", "length below which only mask/substitute apply",
      [](RunConfig& c) -> std::size_t& { return c.train.augmentation.short_threshold; });

  f.push_back({"exclude_history", "eval", "drop already-seen items from the ranking",
               [](RunConfig& c, const std::string& v) { c.train.exclude_history = parse_bool("exclude_history", v); },
               [](const RunConfig& c) { return bool_text(c.train.exclude_history); }});
  num("eval_batch_size", "eval", "users per evaluation forward pass", [](RunConfig& c) -> int& { return c.train.eval_batch_size; });
  f.push_back({"length_edges", "eval", "sequence-length group edges",
               [](RunConfig& c, const std::string& v) { c.length_edges = parse_list<double>("length_edges", v); },
               [](const RunConfig& c) { return join(c.length_edges); }});

  f.push_back({"corpus", "data", "preprocessed corpus file",
               [](RunConfig& c, const std::string& v) { c.corpus = trim(v); },
               [](const RunConfig& c) { return c.corpus.string(); }});
  num("noise_ratio", "data", "noise injected into training prefixes", [](RunConfig& c) -> double& { return c.noise_ratio; });
  num("portion", "data", "fraction of users kept for training", [](RunConfig& c) -> double& { return c.portion; });

  f.push_back({"noise_ratios", "sweep", "noise sweep values",
               [](RunConfig& c, const std::string& v) { c.noise_ratios = parse_list<double>("noise_ratios", v); },
               [](const RunConfig& c) { return join(c.noise_ratios); }});
  f.push_back({"portions", "sweep", "portion sweep values",
               [](RunConfig& c, const std::string& v) { c.portions = parse_list<double>("portions", v); },
               [](const RunConfig& c) { return join(c.portions); }});
  f.push_back({"batch_sizes", "sweep", "batch-size sweep values",
               [](RunConfig& c, const std::string& v) { c.batch_sizes = parse_list<int>("batch_sizes", v); },
               [](const RunConfig& c) { return join(c.batch_sizes); }});
  num("jobs", "sweep", "sweep points run concurrently", [](RunConfig& c) -> int& { return c.jobs; });
  f.push_back({"report_formats", "report", "report outputs: md,csv",
               [](RunConfig& c, const std::string& v) { c.report_formats = split_list(v); },
               [](const RunConfig& c) { return join(c.report_formats); }});
  return f;
}

}  // namespace

std::string format_double(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

void RunConfig::validate() const {
  train.validate();
  if (!(noise_ratio >= 0.0)) throw ConfigError("noise_ratio must be >= 0");
  if (!(portion > 0.0 && portion <= 1.0)) throw ConfigError("portion must be in (0, 1]");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  for (double r : noise_ratios) {
    if (!(r >= 0.0)) throw ConfigError("noise_ratios must be >= 0");
  }
  for (double p : portions) {
    if (!(p > 0.0 && p <= 1.0)) throw ConfigError("portions must be in (0, 1]");
  }
  for (int b : batch_sizes) {
    if (b < 1) throw ConfigError("batch_sizes must be >= 1");
  }
  for (std::size_t i = 1; i < length_edges.size(); ++i) {
    if (!(length_edges[i] > length_edges[i - 1])) throw ConfigError("length_edges must be increasing");
  }
  for (const auto& f : report_formats) {
    if (f != "md" && f != "csv") throw ConfigError("report_formats accepts md and csv, got '" + f + "'");
  }
}

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = make_fields();
  return fields;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& f : config_fields()) {
    if (f.name == key) {
      f.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown configuration key '" + key + "'");
}

void apply_config_text(RunConfig& config, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';' || s[0] == '[') continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    set_config_value(config, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  apply_config_text(config, text.str());
}

std::string config_snapshot(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const auto& f : config_fields()) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.name + " = " + f.get(config) + "\n";
  }
  return out;
}

}  // namespace mstein
