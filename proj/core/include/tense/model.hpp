#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tense/graph.hpp"

namespace tense {

enum class LayerKind { Dense, Conv2d, Relu, BatchNorm, Flatten };

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  /// Required for dense and conv2d layers; names the stage they open.
  std::string name;
  std::size_t units = 0;  // dense outputs or conv output channels
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = true;
};

enum class ReadPoint { Pre, Post };

struct ReadPointSpec {
  std::string name;
  std::string layer;
  ReadPoint point = ReadPoint::Pre;
};

/// Layered network description. Each dense/conv2d layer opens a stage; the
/// batchnorm, relu and flatten layers that follow belong to it. A stage's
/// pre-activation is its output before ReLU (after batch-norm), its
/// post-activation the ReLU output.
struct ModelSpec {
  Shape input_shape;
  std::vector<LayerSpec> layers;
  std::vector<ReadPointSpec> read_points;
};

/// Stage summary derived from a validated spec.
struct StageInfo {
  std::string name;
  LayerKind kind = LayerKind::Dense;
  Shape shape;  // per-example output shape
  bool has_relu = false;
  bool has_batch_norm = false;
  bool has_bias = true;
  std::size_t relus_before = 0;  // ReLUs strictly upstream of this stage's pre-activation
  std::size_t fan_in = 0;
};

/// Validates the spec and returns its stages; throws InvalidArgument naming
/// the first offending layer.
std::vector<StageInfo> analyze_spec(const ModelSpec& spec);

using ParamMap = std::map<std::string, Tensor, std::less<>>;

struct Model {
  ModelSpec spec;
  ParamMap params;
  std::vector<StageInfo> stages;
  std::uint64_t seed = 0;
  /// Free-form metadata (training task, final loss, ...) stored with checkpoints.
  std::map<std::string, std::string, std::less<>> metadata;

  const StageInfo& stage(std::string_view name) const;
  std::size_t stage_index(std::string_view name) const;
  std::size_t relu_count() const;
};

/// Uniform +-sqrt(1/fan_in) weights, zero biases; deterministic per seed.
Model build_model(const ModelSpec& spec, std::uint64_t init_seed);

/// Spec for the toy models: in -> hidden (ReLU) -> out (ReLU).
ModelSpec toy_spec(std::size_t inputs, std::size_t hidden, std::size_t outputs, bool bias = true);

enum class ParamBinding { Placeholders, Constants };

/// Node ids of a model appended to a graph.
struct ModelNodes {
  NodeId input;
  NodeId output;
  std::map<std::string, NodeId, std::less<>> params;
  std::map<std::string, NodeId, std::less<>> pre;
  std::map<std::string, NodeId, std::less<>> post;
  /// Training-mode batch-norm nodes keyed by stage.
  std::map<std::string, NodeId, std::less<>> batch_norm;
};

/// Appends the model's layers to `graph`, consuming the batched node `input`.
/// Placeholders are named "param:<name>" and must be bound at evaluation.
/// With `stop_after` set, layers after that stage's post-activation (or
/// pre-activation if it has no ReLU) are omitted.
ModelNodes append_model(Graph& graph, NodeId input, const Model& model, ParamBinding binding,
                        BatchNormMode mode = BatchNormMode::Inference,
                        std::optional<std::string> stop_after = std::nullopt);

/// Binds "param:<name>" placeholders for every model parameter.
void bind_params(const Model& model, TensorMap& inputs);

/// Per-layer activations from one forward pass. Tensors are batched [N, ...].
struct ActivationTrace {
  Tensor input;
  std::map<std::string, Tensor, std::less<>> pre;
  std::map<std::string, Tensor, std::less<>> post;
  Tensor output;
};

/// x is either one example (input_shape) or a batch [N, input_shape...].
ActivationTrace forward_trace(const Model& model, const Tensor& x);

/// Adds a leading batch dimension when x matches the model input exactly.
Tensor as_batch(const Model& model, const Tensor& x);

enum class SpatialKind { Center, Explicit, None };

struct SpatialPolicy {
  SpatialKind kind = SpatialKind::Center;
  std::size_t row = 0;
  std::size_t col = 0;
};

/// A direction in one stage's activation space: f_v(x) = h(x) . v.
struct FeatureRef {
  std::string layer;
  std::vector<float> direction;
  ReadPoint point = ReadPoint::Pre;
  SpatialPolicy spatial;

  static FeatureRef unit(std::string layer, std::size_t index, std::size_t channels,
                         ReadPoint point = ReadPoint::Pre);
  FeatureRef negated() const;
};

/// Graph nodes for f_v: returns a [N, 1] node.
NodeId append_feature(Graph& graph, const ModelNodes& nodes, const Model& model,
                      const FeatureRef& feature);

/// f_v for every example in the trace.
std::vector<double> feature_values(const Model& model, const ActivationTrace& trace,
                                   const FeatureRef& feature);
double feature_value(const Model& model, const ActivationTrace& trace, const FeatureRef& feature);

/// Row/col selected by the spatial policy for a map of the given size.
std::pair<std::size_t, std::size_t> resolve_position(const SpatialPolicy& policy, std::size_t rows,
                                                     std::size_t cols);

struct WeightLayerStats {
  std::string layer;
  std::size_t count = 0;
  double negative_fraction = 0.0;
  /// 101 bins over [-5, 5] of standardized weights; empty when the layer has zero variance.
  std::vector<std::size_t> histogram;
  std::size_t out_of_range = 0;
  bool zero_variance = false;
};

struct WeightStats {
  std::vector<WeightLayerStats> layers;
  std::vector<std::size_t> pooled_histogram;
  double pooled_negative_fraction = 0.0;
  static constexpr std::size_t kBins = 101;
  static constexpr double kRange = 5.0;
};

WeightStats weight_stats(const Model& model);

struct BoundingBox {
  std::size_t row = 0, col = 0, rows = 0, cols = 0;
};

struct ReceptiveFieldCrop {
  Tensor crop;  // [C, rows, cols]
  BoundingBox box;
  /// True when the box fell back to the full image (dense feature or zero gradient).
  bool full_image = false;
  bool zero_gradient = false;
};

/// Tight box around the nonzero input-gradient support of f at its position,
/// padded by 2 pixels and clipped to the image. x is one example.
ReceptiveFieldCrop receptive_field_crop(const Model& model, const FeatureRef& feature,
                                        const Tensor& x);

}  // namespace tense
