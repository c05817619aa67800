#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mstein/augmentation.hpp"
#include "mstein/corpus.hpp"
#include "mstein/encoder.hpp"
#include "mstein/evaluation.hpp"
#include "mstein/objectives.hpp"
#include "mstein/rng.hpp"

namespace mstein {

/// Tags passed to derive_seed. Each optimizer step draws one u64 from the run
/// rng and derives its negative, augmentation and dropout streams from it.
enum SeedStream : std::uint64_t {
  kNegativeStream = 1,
  kAugmentStream = 2,
  kDropoutStream = 3,
  kParamsStream = 100,
  kShuffleStream = 200,
};

enum class ContrastiveLoss { kWdm, kCosine, kNone };
std::string to_string(ContrastiveLoss loss);
ContrastiveLoss parse_contrastive_loss(const std::string& name);

struct TrainConfig {
  // Encoder.
  int dim = 32;
  int layers = 2;
  int heads = 1;
  int max_len = 50;
  int ffn_dim = 0;
  double dropout = 0.3;
  VarianceAggregation variance_aggregation = VarianceAggregation::kSquaredWeights;

  // Optimization.
  double learning_rate = 1e-3;
  double weight_decay = 1e-2;
  int batch_size = 256;
  double clip_norm = 5.0;  // <= 0 disables clipping
  int patience = 50;
  int max_epochs = 500;

  // Objective.
  double beta = 0.1;
  double lambda = 0.1;
  double pvn_margin = 0.5;
  double temperature = 1.0;  // cosine baseline only
  ContrastiveLoss cl_loss = ContrastiveLoss::kWdm;
  AugmentationPolicy augmentation;
  std::size_t correlation_top_k = 10;

  // Evaluation.
  bool exclude_history = false;
  int eval_batch_size = 256;

  std::uint64_t seed = 42;

  EncoderConfig encoder_config(int item_count) const;
  /// Throws ConfigError for out-of-domain values.
  void validate() const;
};

/// Architecture fingerprint stored in checkpoints (FNV-1a of the shape-
/// determining fields).
std::string config_fingerprint(const EncoderConfig& config);

/// Everything training needs about the corpus.
struct TrainingData {
  int item_count = 0;
  std::vector<SplitSequences> splits;            // one per user, evaluation set
  std::vector<std::vector<int>> interacted;      // sorted unique full item set per user
  std::vector<std::size_t> train_users;          // users that produce training batches
  ItemCorrelation correlation;
};

/// Splits every user leave-one-out; all users train unless train_users is
/// given.
TrainingData prepare_training_data(const Corpus& corpus, std::size_t correlation_top_k = 10);

/// Negative item per position, uniform over items outside interacted (a
/// sorted set). Throws std::invalid_argument when the user owns every item.
std::vector<int> sample_negatives(std::span<const int> interacted, std::size_t count,
                                  int item_count, Rng& rng);

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::int64_t step = 0;
};

struct TrainState {
  ModelParams params;
  AdamState adam;
  int epoch = 0;
  double best_valid_mrr = -1.0;
  int epochs_since_improvement = 0;
  Rng rng;
};

TrainState init_train_state(const TrainConfig& config, int item_count);

/// Inputs for one optimizer step, fully materialized so the loss is a
/// deterministic function of (params, batch).
struct TrainingBatch {
  std::vector<std::size_t> users;
  SequenceBatch inputs;
  std::vector<int> positives;  // per input row, 0 for padding rows
  std::vector<int> negatives;  // per input row, 0 for padding rows
  std::vector<std::vector<int>> views;  // 2N views ordered a0, b0, a1, b1, ...
};

TrainingBatch make_training_batch(const TrainConfig& config, const TrainingData& data,
                                  std::span<const std::size_t> users, Rng& negative_rng,
                                  Rng& augment_rng, bool with_views);

struct LossGraph {
  ad::Var rec;
  ad::Var pvn;
  ad::Var cl;  // unbound when the contrastive term is off
  ad::Var total;
  LossBreakdown breakdown;
};

/// Builds the full objective on the tape of params.
LossGraph build_loss(const BoundParams& params, const TrainConfig& config,
                     const EncoderConfig& encoder, const TrainingBatch& batch,
                     Rng* dropout_rng);

/// Applies one decoupled-weight-decay Adam update (beta1 0.9, beta2 0.999,
/// eps 1e-8); normalization parameters are not decayed.
void adam_update(ModelParams& params, AdamState& adam, std::span<const Matrix> grads,
                 double learning_rate, double weight_decay);

/// One step over the given users. Throws NumericalError on a non-finite loss.
LossBreakdown train_step(TrainState& state, const TrainConfig& config, const TrainingData& data,
                         std::span<const std::size_t> users);

struct EpochRecord {
  int epoch = 0;
  LossBreakdown loss;  // mean over the epoch's steps
  double valid_mrr = 0.0;
  double elapsed_s = 0.0;
};

struct FitResult {
  ModelParams best_params;
  int best_epoch = 0;
  double best_valid_mrr = 0.0;
  std::vector<EpochRecord> history;
  TrainState final_state;
};

/// Epoch loop with per-epoch validation MRR, best-checkpoint retention and
/// early stopping after `patience` epochs without strict improvement.
FitResult fit(const TrainConfig& config, const TrainingData& data,
              const std::function<void(const EpochRecord&)>& on_epoch = {});

/// {"epoch", "rec_loss", "pvn_loss", "cl_loss", "total", "valid_mrr", "elapsed_s"}
std::string epoch_json(const EpochRecord& record);

/// Binary checkpoint "wdm-ckpt v1": fingerprint, then named arrays with dtype
/// tag, shape and raw little-endian values.
void save_checkpoint(const TrainState& state, const EncoderConfig& config,
                     const std::filesystem::path& path);
/// Throws ConfigError when the stored fingerprint differs from config's.
TrainState load_checkpoint(const std::filesystem::path& path, const EncoderConfig& config);

}  // namespace mstein
