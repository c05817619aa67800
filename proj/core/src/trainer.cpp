#include "mstein/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "mstein/errors.hpp"

namespace mstein {
namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

std::string fmt(double x) {
  std::ostringstream out;
  out << std::setprecision(17) << x;
  return out.str();
}

bool all_finite(const LossBreakdown& b) {
  return std::isfinite(b.rec_loss) && std::isfinite(b.pvn_loss) && std::isfinite(b.cl_loss) &&
         std::isfinite(b.total);
}

}  // namespace

std::string to_string(ContrastiveLoss loss) {
  switch (loss) {
    case ContrastiveLoss::kWdm: return "wdm";
    case ContrastiveLoss::kCosine: return "cosine";
    case ContrastiveLoss::kNone: return "none";
  }
  return "none";
}

ContrastiveLoss parse_contrastive_loss(const std::string& name) {
  if (name == "wdm") return ContrastiveLoss::kWdm;
  if (name == "cosine") return ContrastiveLoss::kCosine;
  if (name == "none") return ContrastiveLoss::kNone;
  throw ConfigError("unknown cl_loss '" + name + "' (expected wdm, cosine or none)");
}

EncoderConfig TrainConfig::encoder_config(int item_count) const {
  EncoderConfig e;
  e.item_count = item_count;
  e.dim = dim;
  e.layers = layers;
  e.heads = heads;
  e.max_len = max_len;
  e.ffn_dim = ffn_dim;
  e.dropout = dropout;
  e.variance_aggregation = variance_aggregation;
  return e;
}

void TrainConfig::validate() const {
  EncoderConfig e = encoder_config(1);
  e.validate();
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(pvn_margin >= 0.0)) throw ConfigError("pvn_margin must be >= 0");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (eval_batch_size < 1) throw ConfigError("eval_batch_size must be >= 1");
  augmentation.validate();
}

std::string config_fingerprint(const EncoderConfig& c) {
  std::ostringstream canon;
  canon << "items=" << c.item_count << ";dim=" << c.dim << ";layers=" << c.layers
        << ";heads=" << c.heads << ";max_len=" << c.max_len << ";ffn=" << c.hidden_ffn()
        << ";var_agg=" << static_cast<int>(c.variance_aggregation);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canon.str()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

TrainingData prepare_training_data(const Corpus& corpus, std::size_t correlation_top_k) {
  TrainingData data;
  data.item_count = corpus.vocab.item_count;
  std::vector<std::vector<int>> prefixes;
  for (const auto& seq : corpus.sequences) {
    data.splits.push_back(split_leave_one_out(seq));
    std::vector<int> owned = seq.items;
    std::sort(owned.begin(), owned.end());
    owned.erase(std::unique(owned.begin(), owned.end()), owned.end());
    data.interacted.push_back(std::move(owned));
    prefixes.push_back(data.splits.back().train_items);
  }
  data.train_users.resize(data.splits.size());
  for (std::size_t u = 0; u < data.train_users.size(); ++u) data.train_users[u] = u;
  if (!prefixes.empty()) {
    data.correlation = build_item_correlation(prefixes, data.item_count, correlation_top_k);
  }
  return data;
}

std::vector<int> sample_negatives(std::span<const int> interacted, std::size_t count,
                                  int item_count, Rng& rng) {
  if (static_cast<std::size_t>(item_count) <= interacted.size()) {
    throw std::invalid_argument("sample_negatives: user has interacted with every item");
  }
  std::vector<int> out;
  out.reserve(count);
  while (out.size() < count) {
    const int item = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(item_count)));
    if (!std::binary_search(interacted.begin(), interacted.end(), item)) out.push_back(item);
  }
  return out;
}

TrainState init_train_state(const TrainConfig& config, int item_count) {
  TrainState state;
  Rng param_rng(derive_seed(config.seed, kParamsStream));
  state.params = init_params(config.encoder_config(item_count), param_rng);
  for (const auto& a : state.params.arrays()) {
    state.adam.m.push_back(Matrix::Zero(a.value.rows(), a.value.cols()));
    state.adam.v.push_back(Matrix::Zero(a.value.rows(), a.value.cols()));
  }
  state.rng = Rng(derive_seed(config.seed, kShuffleStream));
  return state;
}

TrainingBatch make_training_batch(const TrainConfig& config, const TrainingData& data,
                                  std::span<const std::size_t> users, Rng& negative_rng,
                                  Rng& augment_rng, bool with_views) {
  TrainingBatch batch;
  batch.users.assign(users.begin(), users.end());
  const auto window = static_cast<std::size_t>(config.max_len);
  std::vector<std::vector<int>> inputs;
  const int mask_token = data.item_count + 1;
  for (std::size_t u : users) {
    const auto& prefix = data.splits[u].train_items;
    const std::size_t take = std::min(prefix.size(), window + 1);
    std::vector<int> seq(prefix.end() - static_cast<std::ptrdiff_t>(take), prefix.end());
    inputs.emplace_back(seq.begin(), seq.end() - 1);

    const std::size_t targets = seq.size() - 1;
    const auto negs = sample_negatives(data.interacted[u], targets, data.item_count, negative_rng);
    const std::size_t pad = window - targets;
    batch.positives.insert(batch.positives.end(), pad, 0);
    batch.negatives.insert(batch.negatives.end(), pad, 0);
    batch.positives.insert(batch.positives.end(), seq.begin() + 1, seq.end());
    batch.negatives.insert(batch.negatives.end(), negs.begin(), negs.end());

    if (with_views) {
      AugmentedPair pair = augment_pair(prefix, static_cast<int>(u), config.augmentation,
                                        data.correlation, mask_token, augment_rng);
      batch.views.push_back(std::move(pair.view_a));
      batch.views.push_back(std::move(pair.view_b));
    }
  }
  batch.inputs = SequenceBatch::from_sequences(inputs, config.max_len);
  return batch;
}

LossGraph build_loss(const BoundParams& params, const TrainConfig& config,
                     const EncoderConfig& encoder, const TrainingBatch& batch, Rng* dropout_rng) {
  ForwardOptions opts{dropout_rng != nullptr, dropout_rng};
  const EncodedBatch enc = encode(params, encoder, batch.inputs, opts);

  std::vector<int> rows, pos, neg;
  for (std::size_t r = 0; r < batch.positives.size(); ++r) {
    if (batch.positives[r] == 0) continue;
    rows.push_back(static_cast<int>(r));
    pos.push_back(batch.positives[r]);
    neg.push_back(batch.negatives[r]);
  }
  if (rows.empty()) throw std::invalid_argument("build_loss: batch has no target positions");

  const ad::Var h_mean = ad::gather_rows(enc.states.mean, rows);
  const ad::Var h_var = ad::gather_rows(enc.states.var, rows);
  const ad::Var pos_mean = ad::gather_rows(params["item_mean"], pos);
  const ad::Var pos_var = ad::elu_plus_one(ad::gather_rows(params["item_cov"], pos));
  const ad::Var neg_mean = ad::gather_rows(params["item_mean"], neg);
  const ad::Var neg_var = ad::elu_plus_one(ad::gather_rows(params["item_cov"], neg));

  const ad::Var d_pos = ad::w2_rows(h_mean, h_var, pos_mean, pos_var);
  const ad::Var d_neg = ad::w2_rows(h_mean, h_var, neg_mean, neg_var);
  const ad::Var d_pn = ad::w2_rows(pos_mean, pos_var, neg_mean, neg_var);

  LossGraph g;
  g.rec = ad::rec_loss(d_pos, d_neg);
  g.pvn = ad::pvn_loss(d_pos, d_pn, config.pvn_margin);
  g.total = g.rec;
  if (config.lambda > 0.0) g.total = ad::add(g.total, ad::scale(g.pvn, config.lambda));

  const bool cl_active = config.cl_loss != ContrastiveLoss::kNone && config.beta > 0.0 &&
                         !batch.views.empty();
  if (cl_active) {
    const SequenceBatch views = SequenceBatch::from_sequences(batch.views, config.max_len);
    const EncodedBatch venc = encode(params, encoder, views, opts);
    std::vector<int> last_rows;
    for (int b = 0; b < views.batch; ++b) last_rows.push_back((b + 1) * views.window - 1);
    const ad::Var vm = ad::gather_rows(venc.states.mean, last_rows);
    const ad::Var vv = ad::gather_rows(venc.states.var, last_rows);
    if (config.cl_loss == ContrastiveLoss::kWdm) {
      g.cl = ad::info_nce(ad::scale(ad::w2_pairwise(vm, vv, vm, vv), -1.0));
    } else {
      g.cl = ad::info_nce(
          ad::scale(ad::cosine_similarity_matrix(ad::concat_cols(vm, vv)), 1.0 / config.temperature));
    }
    g.total = ad::add(g.total, ad::scale(g.cl, config.beta));

    ContrastiveBatch cb;
    for (Eigen::Index r = 0; r < vm.rows(); ++r) {
      cb.views.push_back({vm.value().row(r).transpose(), vv.value().row(r).transpose()});
    }
    g.breakdown.alignment_diag = alignment_diag(cb);
    const Diagnostic u = uniformity_diag(cb);
    g.breakdown.uniformity_diag = u.value;
    g.breakdown.uniformity_defined = u.defined;
  }

  g.breakdown.rec_loss = g.rec.value()(0, 0);
  g.breakdown.pvn_loss = g.pvn.value()(0, 0);
  g.breakdown.cl_loss = cl_active ? g.cl.value()(0, 0) : 0.0;
  g.breakdown.total = g.total.value()(0, 0);
  return g;
}

void adam_update(ModelParams& params, AdamState& adam, std::span<const Matrix> grads,
                 double learning_rate, double weight_decay) {
  auto& arrays = params.arrays();
  if (grads.size() != arrays.size() || adam.m.size() != arrays.size()) {
    throw std::invalid_argument("adam_update: parameter count mismatch");
  }
  ++adam.step;
  const double t = static_cast<double>(adam.step);
  const double bias1 = 1.0 - std::pow(kAdamBeta1, t);
  const double bias2 = 1.0 - std::pow(kAdamBeta2, t);
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    Matrix& p = arrays[i].value;
    Matrix& m = adam.m[i];
    Matrix& v = adam.v[i];
    const Matrix& g = grads[i];
    m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * g;
    v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * g.cwiseProduct(g);
    Matrix update = (m / bias1).array() / ((v / bias2).array().sqrt() + kAdamEps);
    if (arrays[i].weight_decay) update += weight_decay * p;
    p -= learning_rate * update;
  }
}

LossBreakdown train_step(TrainState& state, const TrainConfig& config, const TrainingData& data,
                         std::span<const std::size_t> users) {
  if (users.empty()) throw std::invalid_argument("train_step: empty batch");
  const EncoderConfig encoder = config.encoder_config(data.item_count);
  const std::uint64_t step_seed = state.rng.next_u64();
  Rng negative_rng(derive_seed(step_seed, kNegativeStream));
  Rng augment_rng(derive_seed(step_seed, kAugmentStream));
  Rng dropout_rng(derive_seed(step_seed, kDropoutStream));

  const bool cl_active = config.cl_loss != ContrastiveLoss::kNone && config.beta > 0.0;
  const TrainingBatch batch =
      make_training_batch(config, data, users, negative_rng, augment_rng, cl_active);

  ad::Tape tape;
  BoundParams bound(tape, state.params, true);
  LossGraph graph = build_loss(bound, config, encoder, batch,
                               config.dropout > 0.0 ? &dropout_rng : nullptr);
  if (!all_finite(graph.breakdown)) {
    std::ostringstream msg;
    msg << "non-finite loss at optimizer step " << state.adam.step + 1 << " (rec="
        << graph.breakdown.rec_loss << " pvn=" << graph.breakdown.pvn_loss
        << " cl=" << graph.breakdown.cl_loss << "); batch users:";
    for (std::size_t u : users) msg << ' ' << u;
    throw NumericalError(msg.str());
  }
  tape.backward(graph.total);
  std::vector<Matrix> grads = bound.gradients();

  if (config.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& g : grads) sq += g.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > config.clip_norm) {
      const double factor = config.clip_norm / norm;
      for (auto& g : grads) g *= factor;
    }
  }
  adam_update(state.params, state.adam, grads, config.learning_rate, config.weight_decay);
  return graph.breakdown;
}

FitResult fit(const TrainConfig& config, const TrainingData& data,
              const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  if (data.train_users.empty()) throw InputError("fit: no training users");
  const EncoderConfig encoder = config.encoder_config(data.item_count);
  FitResult result;
  TrainState state = init_train_state(config, data.item_count);
  result.best_params = state.params;
  const auto started = std::chrono::steady_clock::now();
  const auto batch_size = static_cast<std::size_t>(config.batch_size);
  EvalOptions eval_opts{config.exclude_history, config.eval_batch_size};

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::vector<std::size_t> order = data.train_users;
    state.rng.shuffle(order);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      const LossBreakdown b =
          train_step(state, config, data, std::span(order).subspan(start, end - start));
      rec.loss.rec_loss += b.rec_loss;
      rec.loss.pvn_loss += b.pvn_loss;
      rec.loss.cl_loss += b.cl_loss;
      rec.loss.total += b.total;
      rec.loss.alignment_diag += b.alignment_diag;
      rec.loss.uniformity_diag += b.uniformity_diag;
      rec.loss.uniformity_defined = b.uniformity_defined;
      ++steps;
    }
    const double inv = 1.0 / static_cast<double>(steps);
    rec.loss.rec_loss *= inv;
    rec.loss.pvn_loss *= inv;
    rec.loss.cl_loss *= inv;
    rec.loss.total *= inv;
    rec.loss.alignment_diag *= inv;
    rec.loss.uniformity_diag *= inv;

    rec.valid_mrr = evaluate(state.params, encoder, data.splits, SplitKind::kValid, eval_opts).mrr;
    state.epoch = epoch;
    if (rec.valid_mrr > state.best_valid_mrr) {
      state.best_valid_mrr = rec.valid_mrr;
      state.epochs_since_improvement = 0;
      result.best_params = state.params;
      result.best_epoch = epoch;
    } else {
      ++state.epochs_since_improvement;
    }
    rec.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (state.epochs_since_improvement >= config.patience) break;
  }
  result.best_valid_mrr = state.best_valid_mrr;
  result.final_state = std::move(state);
  return result;
}

std::string epoch_json(const EpochRecord& r) {
  std::ostringstream out;
  out << "{\"epoch\": " << r.epoch << ", \"rec_loss\": " << fmt(r.loss.rec_loss)
      << ", \"pvn_loss\": " << fmt(r.loss.pvn_loss) << ", \"cl_loss\": " << fmt(r.loss.cl_loss)
      << ", \"total\": " << fmt(r.loss.total) << ", \"valid_mrr\": " << fmt(r.valid_mrr)
      << ", \"elapsed_s\": " << std::fixed << std::setprecision(3) << r.elapsed_s << "}";
  return out.str();
}

}  // namespace mstein
