#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "mstein/errors.hpp"
#include "mstein/trainer.hpp"

namespace mstein {
namespace {

constexpr const char* kMagic = "wdm-ckpt v1";

struct RawArray {
  std::string dtype;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::string bytes;
};

void put_u64_le(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(const char* p) {
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return x;
}

RawArray f64_array(const Matrix& m) {
  RawArray a{"f64", m.rows(), m.cols(), {}};
  a.bytes.reserve(static_cast<std::size_t>(m.size()) * 8);
  for (Eigen::Index i = 0; i < m.size(); ++i) put_u64_le(a.bytes, std::bit_cast<std::uint64_t>(m.data()[i]));
  return a;
}

RawArray i64_scalar(std::int64_t x) {
  RawArray a{"i64", 1, 1, {}};
  put_u64_le(a.bytes, static_cast<std::uint64_t>(x));
  return a;
}

RawArray u8_text(const std::string& s) {
  return RawArray{"u8", 1, static_cast<std::int64_t>(s.size()), s};
}

Matrix to_matrix(const RawArray& a, const std::string& name) {
  if (a.dtype != "f64") throw InputError("checkpoint array " + name + " is not f64");
  Matrix m(a.rows, a.cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = std::bit_cast<double>(get_u64_le(a.bytes.data() + 8 * i));
  }
  return m;
}

std::int64_t to_i64(const RawArray& a, const std::string& name) {
  if (a.dtype != "i64" || a.rows * a.cols != 1) throw InputError("checkpoint array " + name + " is not an i64 scalar");
  return static_cast<std::int64_t>(get_u64_le(a.bytes.data()));
}

const RawArray& require(const std::map<std::string, RawArray>& arrays, const std::string& name) {
  const auto it = arrays.find(name);
  if (it == arrays.end()) throw InputError("checkpoint is missing array " + name);
  return it->second;
}

std::size_t element_size(const std::string& dtype) {
  if (dtype == "f64" || dtype == "i64") return 8;
  if (dtype == "u8") return 1;
  throw InputError("checkpoint: unknown dtype tag " + dtype);
}

}  // namespace

void save_checkpoint(const TrainState& state, const EncoderConfig& config,
                     const std::filesystem::path& path) {
  std::vector<std::pair<std::string, RawArray>> arrays;
  const auto& params = state.params.arrays();
  for (std::size_t i = 0; i < params.size(); ++i) {
    arrays.emplace_back("param/" + params[i].name, f64_array(params[i].value));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    arrays.emplace_back("adam_m/" + params[i].name, f64_array(state.adam.m[i]));
    arrays.emplace_back("adam_v/" + params[i].name, f64_array(state.adam.v[i]));
  }
  Matrix best(1, 1);
  best(0, 0) = state.best_valid_mrr;
  arrays.emplace_back("state/adam_step", i64_scalar(state.adam.step));
  arrays.emplace_back("state/epoch", i64_scalar(state.epoch));
  arrays.emplace_back("state/epochs_since_improvement", i64_scalar(state.epochs_since_improvement));
  arrays.emplace_back("state/best_valid_mrr", f64_array(best));
  arrays.emplace_back("state/rng", u8_text(state.rng.serialize()));

  std::string blob;
  blob += kMagic;
  blob += "\nfingerprint " + config_fingerprint(config) + "\narrays " + std::to_string(arrays.size()) + "\n";
  for (const auto& [name, a] : arrays) {
    blob += name + " " + a.dtype + " " + std::to_string(a.rows) + " " + std::to_string(a.cols) + "\n";
    blob += a.bytes;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw InputError("I/O error while writing checkpoint " + path.string());
}

TrainState load_checkpoint(const std::filesystem::path& path, const EncoderConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw InputError(path.string() + ": not a wdm-ckpt v1 file");

  std::string tag, fingerprint;
  if (!std::getline(in, line)) throw InputError(path.string() + ": truncated header");
  std::istringstream(line) >> tag >> fingerprint;
  if (tag != "fingerprint") throw InputError(path.string() + ": missing fingerprint");
  if (fingerprint != config_fingerprint(config)) {
    throw ConfigError("checkpoint fingerprint " + fingerprint + " does not match configuration " +
                      config_fingerprint(config));
  }
  std::size_t count = 0;
  if (!std::getline(in, line)) throw InputError(path.string() + ": truncated header");
  std::istringstream(line) >> tag >> count;
  if (tag != "arrays") throw InputError(path.string() + ": missing array count");

  std::map<std::string, RawArray> arrays;
  for (std::size_t k = 0; k < count; ++k) {
    if (!std::getline(in, line)) throw InputError(path.string() + ": truncated array table");
    std::istringstream head(line);
    std::string name;
    RawArray a;
    head >> name >> a.dtype >> a.rows >> a.cols;
    if (!head || a.rows < 0 || a.cols < 0) throw InputError(path.string() + ": bad array header");
    a.bytes.resize(static_cast<std::size_t>(a.rows * a.cols) * element_size(a.dtype));
    in.read(a.bytes.data(), static_cast<std::streamsize>(a.bytes.size()));
    if (!in) throw InputError(path.string() + ": truncated array " + name);
    arrays.emplace(std::move(name), std::move(a));
  }

  TrainState state;
  Rng scratch(0);
  state.params = init_params(config, scratch);
  for (auto& p : state.params.arrays()) {
    Matrix value = to_matrix(require(arrays, "param/" + p.name), p.name);
    if (value.rows() != p.value.rows() || value.cols() != p.value.cols()) {
      throw ConfigError("checkpoint array " + p.name + " has the wrong shape");
    }
    p.value = std::move(value);
    state.adam.m.push_back(to_matrix(require(arrays, "adam_m/" + p.name), p.name));
    state.adam.v.push_back(to_matrix(require(arrays, "adam_v/" + p.name), p.name));
  }
  state.adam.step = to_i64(require(arrays, "state/adam_step"), "adam_step");
  state.epoch = static_cast<int>(to_i64(require(arrays, "state/epoch"), "epoch"));
  state.epochs_since_improvement =
      static_cast<int>(to_i64(require(arrays, "state/epochs_since_improvement"), "epochs_since_improvement"));
  state.best_valid_mrr = to_matrix(require(arrays, "state/best_valid_mrr"), "best_valid_mrr")(0, 0);
  const RawArray& rng = require(arrays, "state/rng");
  if (rng.dtype != "u8") throw InputError("checkpoint rng state has the wrong dtype");
  state.rng = Rng::deserialize(rng.bytes);
  return state;
}

}  // namespace mstein
