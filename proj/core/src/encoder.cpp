#include "mstein/encoder.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "mstein/errors.hpp"

namespace mstein {
namespace {

constexpr double kInitStd = 0.02;

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = kInitStd * rng.normal();
  return m;
}

std::string layer_key(int layer, const char* name) {
  return "layer" + std::to_string(layer) + "." + name;
}

ad::Var linear(ad::Var x, ad::Var w) { return ad::matmul(x, w); }

ad::Var ffn(const BoundParams& p, int layer, const char* path, ad::Var x) {
  const std::string base = "layer" + std::to_string(layer) + ".ffn_" + path;
  ad::Var hidden = ad::gelu(ad::add_row_broadcast(ad::matmul(x, p[base + ".w1"]), p[base + ".b1"]));
  return ad::add_row_broadcast(ad::matmul(hidden, p[base + ".w2"]), p[base + ".b2"]);
}

ad::Var norm(const BoundParams& p, int layer, const char* which, ad::Var x) {
  const std::string base = "layer" + std::to_string(layer) + ".ln_" + which;
  return ad::layer_norm(x, p[base + ".scale"], p[base + ".shift"]);
}

}  // namespace

void EncoderConfig::validate() const {
  if (item_count < 1) throw ConfigError("item_count must be >= 1");
  if (dim < 1) throw ConfigError("dim must be >= 1");
  if (layers < 0) throw ConfigError("layers must be >= 0");
  if (heads < 1 || dim % heads != 0) throw ConfigError("dim must be divisible by heads");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  if (ffn_dim < 0) throw ConfigError("ffn_dim must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

void ModelParams::add(std::string name, Matrix value, bool weight_decay) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  index_.emplace(name, arrays_.size());
  arrays_.push_back({std::move(name), std::move(value), weight_decay});
}

std::size_t ModelParams::index_of(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

Matrix& ModelParams::at(const std::string& name) { return arrays_[index_of(name)].value; }
const Matrix& ModelParams::at(const std::string& name) const {
  return arrays_[index_of(name)].value;
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& a : arrays_) n += static_cast<std::size_t>(a.value.size());
  return n;
}

bool ModelParams::operator==(const ModelParams& other) const {
  if (arrays_.size() != other.arrays_.size()) return false;
  for (std::size_t i = 0; i < arrays_.size(); ++i) {
    const auto& a = arrays_[i];
    const auto& b = other.arrays_[i];
    if (a.name != b.name || a.weight_decay != b.weight_decay ||
        a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols() ||
        a.value != b.value) {
      return false;
    }
  }
  return true;
}

ModelParams init_params(const EncoderConfig& config, Rng& rng) {
  config.validate();
  const Eigen::Index d = config.dim;
  const Eigen::Index f = config.hidden_ffn();
  ModelParams p;
  p.add("item_mean", normal_matrix(config.table_rows(), d, rng), true);
  p.add("item_cov", normal_matrix(config.table_rows(), d, rng), true);
  p.add("pos_mean", normal_matrix(config.max_len, d, rng), true);
  p.add("pos_cov", normal_matrix(config.max_len, d, rng), true);
  for (int l = 0; l < config.layers; ++l) {
    for (const char* w : {"wq_mean", "wk_mean", "wv_mean", "wq_cov", "wk_cov", "wv_cov"}) {
      p.add(layer_key(l, w), normal_matrix(d, d, rng), true);
    }
    for (const char* path : {"mean", "cov"}) {
      const std::string base = "layer" + std::to_string(l) + ".ffn_" + path;
      p.add(base + ".w1", normal_matrix(d, f, rng), true);
      p.add(base + ".b1", Matrix::Zero(1, f), true);
      p.add(base + ".w2", normal_matrix(f, d, rng), true);
      p.add(base + ".b2", Matrix::Zero(1, d), true);
    }
    for (const char* ln : {"attn_mean", "attn_cov", "ffn_mean", "ffn_cov"}) {
      const std::string base = "layer" + std::to_string(l) + ".ln_" + ln;
      p.add(base + ".scale", Matrix::Ones(1, d), false);
      p.add(base + ".shift", Matrix::Zero(1, d), false);
    }
  }
  return p;
}

BoundParams::BoundParams(ad::Tape& tape, const ModelParams& params, bool requires_grad)
    : tape_(&tape), params_(&params) {
  vars_.reserve(params.size());
  for (const auto& a : params.arrays()) vars_.push_back(tape.leaf(a.value, requires_grad));
}

ad::Var BoundParams::operator[](const std::string& name) const {
  return vars_[params_->index_of(name)];
}

std::vector<Matrix> BoundParams::gradients() const {
  std::vector<Matrix> out;
  out.reserve(vars_.size());
  for (const auto& v : vars_) out.push_back(tape_->grad(v));
  return out;
}

std::vector<int> left_pad(std::span<const int> items, int max_len) {
  std::vector<int> out(static_cast<std::size_t>(max_len), 0);
  const std::size_t take = std::min(items.size(), static_cast<std::size_t>(max_len));
  std::copy(items.end() - static_cast<std::ptrdiff_t>(take), items.end(),
            out.end() - static_cast<std::ptrdiff_t>(take));
  return out;
}

SequenceBatch SequenceBatch::from_sequences(std::span<const std::vector<int>> seqs,
                                            int max_len) {
  SequenceBatch b;
  b.batch = static_cast<int>(seqs.size());
  b.window = max_len;
  b.items.reserve(seqs.size() * static_cast<std::size_t>(max_len));
  for (const auto& s : seqs) {
    const auto padded = left_pad(s, max_len);
    b.items.insert(b.items.end(), padded.begin(), padded.end());
  }
  return b;
}

StatesVar embed(const BoundParams& params, const EncoderConfig& config,
                const SequenceBatch& batch) {
  if (batch.window > config.max_len || batch.window < 1) {
    throw std::invalid_argument("embed: window must lie in [1, max_len]");
  }
  if (batch.items.size() != static_cast<std::size_t>(batch.batch) * static_cast<std::size_t>(batch.window)) {
    throw std::invalid_argument("embed: item count does not match batch x window");
  }
  std::vector<int> positions(batch.items.size());
  const int offset = config.max_len - batch.window;
  for (std::size_t r = 0; r < positions.size(); ++r) {
    positions[r] = offset + static_cast<int>(r % static_cast<std::size_t>(batch.window));
  }
  StatesVar out;
  out.mean = ad::add(ad::gather_rows(params["item_mean"], batch.items),
                     ad::gather_rows(params["pos_mean"], positions));
  out.var = ad::elu_plus_one(ad::add(ad::gather_rows(params["item_cov"], batch.items),
                                     ad::gather_rows(params["pos_cov"], positions)));
  return out;
}

AttentionResult wasserstein_attention(const StatesVar& queries, const StatesVar& keys,
                                      const StatesVar& values, const SequenceBatch& batch,
                                      int heads, VarianceAggregation aggregation,
                                      double weight_dropout, Rng* rng) {
  const Matrix& qm = queries.mean.value();
  const Matrix& qv = queries.var.value();
  const Matrix& km = keys.mean.value();
  const Matrix& kv = keys.var.value();
  const Matrix& vm = values.mean.value();
  const Matrix& vv = values.var.value();
  const Eigen::Index n = qm.rows();
  const Eigen::Index d = qm.cols();
  const int T = batch.window;
  const int B = batch.batch;
  if (n != static_cast<Eigen::Index>(B) * T) throw std::invalid_argument("attention: row count");
  if (heads < 1 || d % heads != 0) throw std::invalid_argument("attention: dim % heads != 0");
  for (const Matrix* m : {&qv, &km, &kv, &vm, &vv}) {
    if (m->rows() != n || m->cols() != d) throw std::invalid_argument("attention: shape mismatch");
  }
  const Eigen::Index dh = d / heads;
  const bool squared = aggregation == VarianceAggregation::kSquaredWeights;
  const bool use_dropout = weight_dropout > 0.0 && rng != nullptr;
  const double keep_scale = use_dropout ? 1.0 / (1.0 - weight_dropout) : 1.0;

  auto weights = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(B * heads));
  auto drop = std::make_shared<std::vector<Matrix>>();
  if (use_dropout) drop->resize(static_cast<std::size_t>(B * heads));
  // Rows of each block that had no unmasked key.
  auto fallback = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(n) * heads, 0);

  Matrix out(n, 2 * d);
  std::vector<double> scores(static_cast<std::size_t>(T));
  for (int b = 0; b < B; ++b) {
    const Eigen::Index base = static_cast<Eigen::Index>(b) * T;
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * dh;
      Matrix& A = (*weights)[static_cast<std::size_t>(b * heads + h)];
      A = Matrix::Zero(T, T);
      for (int i = 0; i < T; ++i) {
        const Eigen::Index qi = base + i;
        double max_score = -std::numeric_limits<double>::infinity();
        int allowed = 0;
        for (int j = 0; j <= i; ++j) {
          if (!batch.valid(static_cast<std::size_t>(base + j))) continue;
          const Eigen::Index kj = base + j;
          scores[static_cast<std::size_t>(j)] =
              -w2_sq(qm.row(qi).data() + c0, qv.row(qi).data() + c0, km.row(kj).data() + c0,
                     kv.row(kj).data() + c0, dh);
          max_score = std::max(max_score, scores[static_cast<std::size_t>(j)]);
          ++allowed;
        }
        if (allowed == 0) {
          A(i, i) = 1.0;
          (*fallback)[static_cast<std::size_t>(qi * heads + h)] = 1;
          continue;
        }
        double total = 0.0;
        for (int j = 0; j <= i; ++j) {
          if (!batch.valid(static_cast<std::size_t>(base + j))) continue;
          const double e = std::exp(scores[static_cast<std::size_t>(j)] - max_score);
          A(i, j) = e;
          total += e;
        }
        A.row(i).head(i + 1) /= total;
      }
      Matrix Ad = A;
      if (use_dropout) {
        Matrix& D = (*drop)[static_cast<std::size_t>(b * heads + h)];
        D = Matrix::Ones(T, T);
        for (int i = 0; i < T; ++i) {
          if ((*fallback)[static_cast<std::size_t>((base + i) * heads + h)]) continue;
          for (int j = 0; j <= i; ++j) {
            D(i, j) = rng->uniform01() >= weight_dropout ? keep_scale : 0.0;
          }
        }
        Ad = A.cwiseProduct(D);
      }
      const Matrix Wv = squared ? Matrix(Ad.cwiseProduct(Ad)) : Ad;
      out.block(base, c0, T, dh).noalias() = Ad * vm.block(base, c0, T, dh);
      out.block(base, d + c0, T, dh).noalias() = Wv * vv.block(base, c0, T, dh);
    }
  }

  ad::Tape& tape = *queries.mean.tape();
  ad::Var packed = tape.op(
      std::move(out),
      {queries.mean, queries.var, keys.mean, keys.var, values.mean, values.var},
      [=, q_m = queries.mean, q_v = queries.var, k_m = keys.mean, k_v = keys.var,
       v_m = values.mean, v_v = values.var](ad::Tape& t, const Matrix& g) {
        const Matrix& Qm = q_m.value();
        const Matrix& Km = k_m.value();
        const Matrix& Vm = v_m.value();
        const Matrix& Vv = v_v.value();
        const Matrix sq = q_v.value().cwiseSqrt();
        const Matrix sk = k_v.value().cwiseSqrt();
        Matrix gqm = Matrix::Zero(n, d), gqv = Matrix::Zero(n, d);
        Matrix gkm = Matrix::Zero(n, d), gkv = Matrix::Zero(n, d);
        Matrix gvm = Matrix::Zero(n, d), gvv = Matrix::Zero(n, d);
        for (int b = 0; b < B; ++b) {
          const Eigen::Index base = static_cast<Eigen::Index>(b) * T;
          for (int h = 0; h < heads; ++h) {
            const Eigen::Index c0 = h * dh;
            const std::size_t slot = static_cast<std::size_t>(b * heads + h);
            const Matrix& A = (*weights)[slot];
            const Matrix Ad = use_dropout ? Matrix(A.cwiseProduct((*drop)[slot])) : A;
            const Matrix Wv = squared ? Matrix(Ad.cwiseProduct(Ad)) : Ad;
            const auto gom = g.block(base, c0, T, dh);
            const auto gov = g.block(base, d + c0, T, dh);
            const auto vm_blk = Vm.block(base, c0, T, dh);
            const auto vv_blk = Vv.block(base, c0, T, dh);
            gvm.block(base, c0, T, dh).noalias() += Ad.transpose() * gom;
            gvv.block(base, c0, T, dh).noalias() += Wv.transpose() * gov;

            Matrix dAd = gom * vm_blk.transpose();
            const Matrix dvar = gov * vv_blk.transpose();
            if (squared) {
              dAd += 2.0 * Ad.cwiseProduct(dvar);
            } else {
              dAd += dvar;
            }
            const Matrix dA = use_dropout ? Matrix(dAd.cwiseProduct((*drop)[slot])) : dAd;

            Matrix ds = Matrix::Zero(T, T);
            for (int i = 0; i < T; ++i) {
              if ((*fallback)[static_cast<std::size_t>((base + i) * heads + h)]) continue;
              const double inner = A.row(i).head(i + 1).dot(dA.row(i).head(i + 1));
              for (int j = 0; j <= i; ++j) ds(i, j) = A(i, j) * (dA(i, j) - inner);
            }
            // score = -(|qm_i - km_j|^2 + |sq_i - sk_j|^2)
            const auto qm_blk = Qm.block(base, c0, T, dh);
            const auto km_blk = Km.block(base, c0, T, dh);
            const auto sq_blk = sq.block(base, c0, T, dh);
            const auto sk_blk = sk.block(base, c0, T, dh);
            const Vector row_sum = ds.rowwise().sum();
            const Vector col_sum = ds.colwise().sum().transpose();
            gqm.block(base, c0, T, dh) +=
                -2.0 * (qm_blk.array().colwise() * row_sum.array()).matrix() + 2.0 * ds * km_blk;
            gkm.block(base, c0, T, dh) +=
                2.0 * ds.transpose() * qm_blk - 2.0 * (km_blk.array().colwise() * col_sum.array()).matrix();
            gqv.block(base, c0, T, dh) +=
                ((-(sq_blk.array().colwise() * row_sum.array()) + (ds * sk_blk).array()) /
                 sq_blk.array()).matrix();
            gkv.block(base, c0, T, dh) +=
                (((ds.transpose() * sq_blk).array() - sk_blk.array().colwise() * col_sum.array()) /
                 sk_blk.array()).matrix();
          }
        }
        t.accumulate(q_m, gqm);
        t.accumulate(q_v, gqv);
        t.accumulate(k_m, gkm);
        t.accumulate(k_v, gkv);
        t.accumulate(v_m, gvm);
        t.accumulate(v_v, gvv);
      });

  AttentionResult result;
  result.out.mean = ad::slice_cols(packed, 0, d);
  result.out.var = ad::slice_cols(packed, d, d);
  result.weights = weights;
  return result;
}

BlockOutput encoder_block(const BoundParams& p, const EncoderConfig& config, int layer,
                          const StatesVar& x, const SequenceBatch& batch,
                          const ForwardOptions& opts) {
  Rng* rng = opts.training ? opts.rng : nullptr;
  const double rate = config.dropout;

  StatesVar q{linear(x.mean, p[layer_key(layer, "wq_mean")]),
              ad::elu_plus_one(linear(x.var, p[layer_key(layer, "wq_cov")]))};
  StatesVar k{linear(x.mean, p[layer_key(layer, "wk_mean")]),
              ad::elu_plus_one(linear(x.var, p[layer_key(layer, "wk_cov")]))};
  StatesVar v{linear(x.mean, p[layer_key(layer, "wv_mean")]),
              ad::elu_plus_one(linear(x.var, p[layer_key(layer, "wv_cov")]))};
  AttentionResult attn = wasserstein_attention(q, k, v, batch, config.heads,
                                               config.variance_aggregation, rate, rng);

  StatesVar h;
  h.mean = norm(p, layer, "attn_mean", ad::add(x.mean, ad::dropout(attn.out.mean, rate, rng)));
  h.var = ad::elu_plus_one(
      norm(p, layer, "attn_cov", ad::add(x.var, ad::dropout(attn.out.var, rate, rng))));

  BlockOutput out;
  out.states.mean = norm(p, layer, "ffn_mean",
                         ad::add(h.mean, ad::dropout(ffn(p, layer, "mean", h.mean), rate, rng)));
  out.states.var = ad::elu_plus_one(norm(
      p, layer, "ffn_cov", ad::add(h.var, ad::dropout(ffn(p, layer, "cov", h.var), rate, rng))));
  out.attention_weights = attn.weights;
  return out;
}

EncodedBatch encode(const BoundParams& params, const EncoderConfig& config,
                    const SequenceBatch& batch, const ForwardOptions& opts) {
  EncodedBatch enc;
  enc.batch = batch;
  enc.states = embed(params, config, batch);
  for (int l = 0; l < config.layers; ++l) {
    BlockOutput block = encoder_block(params, config, l, enc.states, batch, opts);
    enc.states = block.states;
    enc.attention_weights.push_back(std::move(block.attention_weights));
  }
  return enc;
}

GaussianState state_at(const StatesVar& states, Eigen::Index row) {
  return {states.mean.value().row(row).transpose(), states.var.value().row(row).transpose()};
}

namespace {

EncodedSequence to_sequence(const StatesVar& states, const SequenceBatch& batch) {
  EncodedSequence seq;
  for (std::size_t r = 0; r < batch.items.size(); ++r) {
    seq.states.push_back(state_at(states, static_cast<Eigen::Index>(r)));
    seq.valid.push_back(batch.valid(r));
  }
  return seq;
}

SequenceBatch single(std::span<const int> padded, const EncoderConfig& config) {
  for (int item : padded) {
    if (item < 0 || item >= config.table_rows()) {
      throw std::out_of_range("item index " + std::to_string(item) + " outside embedding table");
    }
  }
  SequenceBatch b;
  b.batch = 1;
  b.window = static_cast<int>(padded.size());
  b.items.assign(padded.begin(), padded.end());
  return b;
}

}  // namespace

EncodedSequence embed_sequence(std::span<const int> padded_items, const ModelParams& params,
                               const EncoderConfig& config) {
  ad::Tape tape(false);
  BoundParams bound(tape, params, false);
  const SequenceBatch batch = single(padded_items, config);
  return to_sequence(embed(bound, config, batch), batch);
}

EncodedSequence encode_sequence(std::span<const int> padded_items, const ModelParams& params,
                                const EncoderConfig& config) {
  ad::Tape tape(false);
  BoundParams bound(tape, params, false);
  const SequenceBatch batch = single(padded_items, config);
  return to_sequence(encode(bound, config, batch, {}).states, batch);
}

GaussianState ItemCatalog::state(int item) const {
  if (item < 1 || item > item_count()) throw std::out_of_range("ItemCatalog::state");
  return {mean.row(item - 1).transpose(), variance.row(item - 1).transpose()};
}

ItemCatalog item_catalog(const ModelParams& params) {
  const Matrix& m = params.at("item_mean");
  const Matrix& c = params.at("item_cov");
  const Eigen::Index items = m.rows() - 2;
  ItemCatalog cat;
  cat.mean = m.middleRows(1, items);
  cat.variance = c.middleRows(1, items).unaryExpr([](double x) { return elu_plus_one(x); });
  return cat;
}

}  // namespace mstein
