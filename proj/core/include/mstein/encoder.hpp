#pragma once

#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mstein/autograd.hpp"
#include "mstein/rng.hpp"
#include "mstein/wasserstein.hpp"

namespace mstein {

/// How attention weights combine value variances.
enum class VarianceAggregation {
  kSquaredWeights,  // sum_j a_ij^2 * var_j (independent weighted Gaussian sum)
  kWeights,         // sum_j a_ij * var_j (ablation)
};

struct EncoderConfig {
  int item_count = 0;
  int dim = 32;
  int layers = 2;
  int heads = 1;
  int max_len = 50;
  int ffn_dim = 0;  // 0 means dim
  double dropout = 0.3;
  VarianceAggregation variance_aggregation = VarianceAggregation::kSquaredWeights;

  int table_rows() const { return item_count + 2; }
  int mask_token() const { return item_count + 1; }
  int hidden_ffn() const { return ffn_dim > 0 ? ffn_dim : dim; }
  /// Throws ConfigError on inconsistent values (e.g. dim not divisible by heads).
  void validate() const;
};

struct ParamArray {
  std::string name;
  Matrix value;
  bool weight_decay = true;
};

/// Every learnable array of the model, in a fixed order.
class ModelParams {
 public:
  void add(std::string name, Matrix value, bool weight_decay);

  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t index_of(const std::string& name) const;

  std::vector<ParamArray>& arrays() { return arrays_; }
  const std::vector<ParamArray>& arrays() const { return arrays_; }
  std::size_t size() const { return arrays_.size(); }
  std::size_t scalar_count() const;

  bool operator==(const ModelParams& other) const;

 private:
  std::vector<ParamArray> arrays_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Weights ~ Normal(0, 0.02^2); layer-norm scale 1, shift 0; biases 0.
ModelParams init_params(const EncoderConfig& config, Rng& rng);

/// Leaf Vars for all parameters on one tape.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ModelParams& params, bool requires_grad);

  ad::Var operator[](const std::string& name) const;
  ad::Tape& tape() const { return *tape_; }
  const ModelParams& params() const { return *params_; }

  /// Gradients in ModelParams order (after tape.backward()).
  std::vector<Matrix> gradients() const;

 private:
  ad::Tape* tape_;
  const ModelParams* params_;
  std::vector<ad::Var> vars_;
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // dropout stream; dropout is off without one
};

/// Keeps the last max_len items and left-pads with the padding index.
std::vector<int> left_pad(std::span<const int> items, int max_len);

/// A batch of equally long windows, stacked as (batch * window) rows.
/// Window slot t uses position row (max_len - window + t), so the last slot
/// always carries the last position embedding.
struct SequenceBatch {
  int batch = 0;
  int window = 0;
  std::vector<int> items;  // batch * window, padding = 0

  static SequenceBatch from_sequences(std::span<const std::vector<int>> seqs,
                                      int max_len);
  bool valid(std::size_t row) const { return items[row] != 0; }
};

struct StatesVar {
  ad::Var mean;
  ad::Var var;
};

struct AttentionResult {
  StatesVar out;
  /// Softmax weights (before dropout) per (sequence, head): window x window.
  std::shared_ptr<const std::vector<Matrix>> weights;
};

/// Stacked embedding lookup: mean = item_mean + pos_mean,
/// variance = elu_plus_one(item_cov + pos_cov).
StatesVar embed(const BoundParams& params, const EncoderConfig& config,
                const SequenceBatch& batch);

/// Causal multi-head attention scored by -w2_sq(query_i, key_j) over the
/// per-head dimension split. Masked keys (future or padding) get zero weight;
/// a row with no unmasked key returns its own value projection.
AttentionResult wasserstein_attention(const StatesVar& queries,
                                      const StatesVar& keys,
                                      const StatesVar& values,
                                      const SequenceBatch& batch, int heads,
                                      VarianceAggregation aggregation,
                                      double weight_dropout, Rng* rng);

struct BlockOutput {
  StatesVar states;
  std::shared_ptr<const std::vector<Matrix>> attention_weights;
};

/// One post-norm encoder layer with mirrored mean/covariance paths.
BlockOutput encoder_block(const BoundParams& params, const EncoderConfig& config,
                          int layer, const StatesVar& input,
                          const SequenceBatch& batch, const ForwardOptions& opts);

struct EncodedBatch {
  StatesVar states;
  SequenceBatch batch;
  std::vector<std::shared_ptr<const std::vector<Matrix>>> attention_weights;
};

/// embed followed by config.layers encoder blocks.
EncodedBatch encode(const BoundParams& params, const EncoderConfig& config,
                    const SequenceBatch& batch, const ForwardOptions& opts);

/// Value-level view of one encoded sequence.
struct EncodedSequence {
  std::vector<GaussianState> states;
  std::vector<bool> valid;
};

EncodedSequence embed_sequence(std::span<const int> padded_items,
                               const ModelParams& params,
                               const EncoderConfig& config);
EncodedSequence encode_sequence(std::span<const int> padded_items,
                                const ModelParams& params,
                                const EncoderConfig& config);

/// Gaussians of the real items 1..item_count, row k = item k + 1.
struct ItemCatalog {
  Matrix mean;
  Matrix variance;

  GaussianState state(int item) const;
  int item_count() const { return static_cast<int>(mean.rows()); }
};

ItemCatalog item_catalog(const ModelParams& params);

/// Extracts stacked row r of a states pair as a GaussianState.
GaussianState state_at(const StatesVar& states, Eigen::Index row);

}  // namespace mstein
