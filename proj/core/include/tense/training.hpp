#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tense/model.hpp"
#include "tense/random.hpp"

namespace tense {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are kept in double.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  /// Updates every parameter named in `grads`; lr_scale multiplies the step size.
  void step(ParamMap& params, const std::map<std::string, Tensor, std::less<>>& grads,
            double lr_scale = 1.0);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>, std::less<>> m_, v_;
};

enum class ToyKind { Abs, Xor };

struct ToyTask {
  ToyKind kind = ToyKind::Abs;
  std::size_t features = 6;
  double sparsity = 0.99;
  /// Range of nonzero abs inputs.
  double range_lo = -1.0;
  double range_hi = 1.0;

  static ToyTask abs();
  static ToyTask xor_task();
  std::size_t input_dim() const { return kind == ToyKind::Abs ? features : 2 * features; }
  double importance(std::size_t i) const;
  std::vector<float> importances() const;
  /// Ground-truth outputs for one input.
  std::vector<float> target(std::span<const float> x) const;
};

std::string to_string(ToyKind kind);
ToyKind parse_toy_kind(std::string_view s);

struct ToyBatch {
  Tensor inputs;   // [B, input_dim]
  Tensor targets;  // [B, features]
};

ToyBatch sample_toy_batch(const ToyTask& task, std::size_t batch, Rng& rng);

/// Importance-weighted squared error, summed over features and averaged over the batch.
double toy_loss(const Tensor& pred, const Tensor& target, std::span<const float> importances);

struct TrainConfig {
  std::size_t batch = 600;
  std::size_t iterations = 20000;
  AdamConfig adam;
  std::size_t seeds = 50;
  std::uint64_t base_seed = 0;
  std::size_t log_every = 1000;
  std::size_t eval_batches = 10;
  bool bias = true;
};

struct LossRecord {
  std::uint64_t seed = 0;
  std::size_t iteration = 0;
  double loss = 0.0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  bool finite = true;
  double final_loss = 0.0;
  std::vector<LossRecord> log;
};

struct ToyTrainResult {
  Model best;
  std::uint64_t best_seed = 0;
  double best_loss = 0.0;
  std::vector<SeedResult> seeds;
  std::size_t discarded = 0;
};

/// Trains one model from `seed`; throws NonFiniteError on divergence.
SeedResult train_toy_seed(const ToyTask& task, std::size_t hidden, const TrainConfig& config,
                          std::uint64_t seed, Model* out_model);

/// Trains config.seeds models (seeds base_seed, base_seed+1, ...) in parallel and
/// keeps the one with the lowest final loss (ties go to the lower seed).
ToyTrainResult train_toy(const ToyTask& task, std::size_t hidden, const TrainConfig& config);

/// Mean loss over `batches` batches regenerated from the seed's evaluation stream.
double toy_eval_loss(const Model& model, const ToyTask& task, std::uint64_t seed,
                     std::size_t batch, std::size_t batches);

Model toy_model(const ToyTask& task, std::size_t hidden, std::uint64_t seed, bool bias = true);

/// Task stored in a toy checkpoint's metadata.
ToyTask toy_task_from_metadata(const Model& model);

struct ExhaustiveEval {
  std::vector<double> losses;       // per input
  std::vector<std::size_t> active;  // nonzero ground-truth outputs per input
  std::map<std::size_t, std::vector<double>> buckets;
  double mean = 0.0;
  double max = 0.0;
  std::map<std::size_t, double> bucket_mean() const;
};

/// Every input in {-1,0,1}^n (abs) or {0,1}^2n (xor).
Tensor exhaustive_inputs(const ToyTask& task);
ExhaustiveEval eval_exhaustive(const Model& model, const ToyTask& task);

struct ConvnetConfig {
  std::size_t epochs = 6;
  std::size_t batch = 64;
  AdamConfig adam{2e-3};
  std::uint64_t seed = 0;
  double holdout = 0.1;
  double bn_momentum = 0.9;
};

struct ConvnetEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double holdout_accuracy = 0.0;
};

struct ConvnetResult {
  Model model;
  double holdout_accuracy = 0.0;
  std::vector<ConvnetEpoch> log;
  /// confusion[true][predicted] on the held-out split.
  std::vector<std::vector<std::size_t>> confusion;
  /// Mean held-out logit per (true class, logit).
  std::vector<std::vector<double>> mean_logits;
};

/// Softmax cross-entropy classifier over the model's output units.
/// Throws NonFiniteError naming the seed and iteration on divergence.
ConvnetResult train_convnet(const Tensor& images, const std::vector<int>& labels,
                            const ModelSpec& spec, const ConvnetConfig& config);

/// Accuracy of argmax(logits) against labels.
double classify_accuracy(const Model& model, const Tensor& images, const std::vector<int>& labels,
                         std::vector<std::vector<std::size_t>>* confusion = nullptr,
                         std::vector<std::vector<double>>* mean_logits = nullptr);

/// Runs the model on a batched input in chunks, returning the outputs [N, ...].
Tensor predict(const Model& model, const Tensor& inputs, std::size_t chunk = 256);

}  // namespace tense
