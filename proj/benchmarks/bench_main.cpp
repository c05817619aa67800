#include <benchmark/benchmark.h>

#include <vector>

#include "mstein/encoder.hpp"
#include "mstein/experiments.hpp"
#include "mstein/trainer.hpp"
#include "mstein/wasserstein.hpp"

using namespace mstein;

namespace {

GaussianState random_state(Eigen::Index d, Rng& rng) {
  GaussianState g;
  g.mean = Vector(d);
  g.variance = Vector(d);
  for (Eigen::Index k = 0; k < d; ++k) {
    g.mean[k] = rng.normal();
    g.variance[k] = 0.1 + rng.uniform01();
  }
  return g;
}

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double shift = 0.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = shift + rng.uniform01();
  return m;
}

void BM_W2Scalar(benchmark::State& state) {
  Rng rng(1);
  const auto d = static_cast<Eigen::Index>(state.range(0));
  const GaussianState a = random_state(d, rng);
  const GaussianState b = random_state(d, rng);
  for (auto _ : state) benchmark::DoNotOptimize(w2_sq(a, b));
}
BENCHMARK(BM_W2Scalar)->Arg(32)->Arg(64)->Arg(128);

void BM_W2Batch(benchmark::State& state) {
  Rng rng(2);
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<GaussianState> q, k;
  for (std::size_t i = 0; i < n; ++i) q.push_back(random_state(64, rng));
  for (std::size_t i = 0; i < n; ++i) k.push_back(random_state(64, rng));
  for (auto _ : state) benchmark::DoNotOptimize(w2_sq_batch(q, k));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}
BENCHMARK(BM_W2Batch)->Arg(16)->Arg(64)->Arg(256);

void BM_W2Pairwise(benchmark::State& state) {
  Rng rng(3);
  const auto n = static_cast<Eigen::Index>(state.range(0));
  const Matrix m = random_matrix(n, 64, rng, -0.5);
  const Matrix v = random_matrix(n, 64, rng, 0.1);
  for (auto _ : state) {
    ad::Tape tape(false);
    const ad::Var mv = tape.constant(m);
    const ad::Var vv = tape.constant(v);
    benchmark::DoNotOptimize(ad::w2_pairwise(mv, vv, mv, vv).value());
  }
}
BENCHMARK(BM_W2Pairwise)->Arg(64)->Arg(256);

EncoderConfig bench_encoder(int window) {
  EncoderConfig c;
  c.item_count = 1000;
  c.dim = 64;
  c.layers = 2;
  c.heads = 1;
  c.max_len = window;
  c.dropout = 0.0;
  return c;
}

std::vector<std::vector<int>> random_sequences(int batch, int window, int items, Rng& rng) {
  std::vector<std::vector<int>> seqs(static_cast<std::size_t>(batch));
  for (auto& s : seqs) {
    s.resize(static_cast<std::size_t>(window));
    for (auto& x : s) x = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(items)));
  }
  return seqs;
}

void BM_EncoderForward(benchmark::State& state) {
  const int window = static_cast<int>(state.range(0));
  const EncoderConfig c = bench_encoder(window);
  Rng rng(4);
  const ModelParams p = init_params(c, rng);
  const SequenceBatch batch = SequenceBatch::from_sequences(random_sequences(32, window, c.item_count, rng), window);
  for (auto _ : state) {
    ad::Tape tape(false);
    BoundParams bound(tape, p, false);
    benchmark::DoNotOptimize(encode(bound, c, batch, {}).states.mean.value());
  }
}
BENCHMARK(BM_EncoderForward)->Arg(20)->Arg(50)->Unit(benchmark::kMillisecond);

void BM_EncoderBackward(benchmark::State& state) {
  const int window = static_cast<int>(state.range(0));
  const EncoderConfig c = bench_encoder(window);
  Rng rng(5);
  const ModelParams p = init_params(c, rng);
  const SequenceBatch batch = SequenceBatch::from_sequences(random_sequences(32, window, c.item_count, rng), window);
  for (auto _ : state) {
    ad::Tape tape;
    BoundParams bound(tape, p, true);
    const EncodedBatch enc = encode(bound, c, batch, {});
    tape.backward(ad::add(ad::sum_all(enc.states.mean), ad::sum_all(enc.states.var)));
    benchmark::DoNotOptimize(bound.gradients());
  }
}
BENCHMARK(BM_EncoderBackward)->Arg(20)->Arg(50)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  PlantedCorpusSpec spec;
  const TrainingData data = prepare_training_data(make_planted_corpus(spec));
  TrainConfig c;
  c.max_len = 20;
  c.batch_size = static_cast<int>(state.range(0));
  c.augmentation.enabled = {AugmentOp::kMask};
  TrainState s = init_train_state(c, data.item_count);
  std::vector<std::size_t> users(static_cast<std::size_t>(c.batch_size));
  for (std::size_t i = 0; i < users.size(); ++i) users[i] = i;
  for (auto _ : state) benchmark::DoNotOptimize(train_step(s, c, data, users));
}
BENCHMARK(BM_TrainStep)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
