#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tense/model.hpp"
#include "tense/training.hpp"

namespace tense {

/// Layer name that refers to the model input (pixels).
inline constexpr std::string_view kInputLayer = "input";

struct AttributionRecord {
  std::size_t input_id = 0;
  FeatureRef feature;
  std::string layer;
  double value = 0.0;  // f_v(x)
  Tensor S;            // same shape as h_l for one example
  double E = 0.0;
  double E_plus = 0.0;
  double E_minus = 0.0;
  std::optional<Tensor> phi_plus;  // [H_l, W_l]
  std::optional<Tensor> phi_minus;
};

/// Feature values and S_l = grad(f_v, h_l) * h_l for a batch, from one backward pass.
struct LayerEnergies {
  std::vector<double> E, E_plus, E_minus;  // per example
};

/// Feature values and S_l = grad(f_v, h_l) * h_l for a batch, from one backward pass.
/// The pass runs in double; energies are summed before S is narrowed to float.
struct AttributionBatch {
  std::vector<double> values;
  std::map<std::string, Tensor, std::less<>> S;  // [N, ...] per layer
  std::map<std::string, LayerEnergies, std::less<>> energies;
};

/// Throws InvalidArgument when a layer is not strictly upstream of the feature
/// or has no post-ReLU activation.
AttributionBatch attribute_batch(const Model& model, const Tensor& x, const FeatureRef& feature,
                                 std::span<const std::string> layers);

/// Record for one example x with S and E filled.
AttributionRecord attribution_vector(const Model& model, const Tensor& x, const FeatureRef& feature,
                                     const std::string& layer);

/// Records with E, E+ and E- for every example of a batch, computed in parallel chunks.
std::vector<AttributionRecord> attribution_records(const Model& model, const Tensor& x,
                                                   const FeatureRef& feature,
                                                   const std::string& layer, bool maps = false,
                                                   std::size_t chunk = 128);

/// Fills E (the full sum of S), E+ and E-.
void energy_split(AttributionRecord& record);
/// Fills phi+/- (channel sums of the positive / negative parts of S).
void spatial_maps(AttributionRecord& record);

/// Dataset-wide map scale: the pooled 99th percentile of phi+ and phi- values.
double map_scale(std::span<const AttributionRecord> records);

struct FeatureCompleteness {
  std::optional<double> pearson;
  std::optional<double> spearman;
  double l1 = 0.0;
  double value_scale = 0.0;  // mean |f_v|
};

struct LayerCompleteness {
  std::string layer;
  double depth = 0.0;  // ReLUs preceding the layer / total ReLUs
  std::vector<FeatureCompleteness> features;
  double pearson_mean = 0.0, pearson_sd = 0.0;
  double spearman_mean = 0.0, spearman_sd = 0.0;
  double l1_mean = 0.0;
  std::size_t undefined = 0;  // features with zero-variance f_v or E
};

struct CompletenessReport {
  std::vector<LayerCompleteness> layers;
};

/// Correlation between f_v(x) and E_l(x) over the dataset, per feature and layer.
/// With `layers` empty, uses the input and every post-ReLU layer upstream of all features.
CompletenessReport completeness_report(const Model& model, const std::vector<FeatureRef>& features,
                                       const Tensor& inputs, std::vector<std::string> layers = {});

/// Upstream layers eligible for attribution to `feature`: input, then post-ReLU stages.
std::vector<std::string> attribution_layers(const Model& model, const FeatureRef& feature);

struct AttributionMatrix {
  std::vector<std::string> probes;
  std::vector<std::string> features;
  std::vector<std::vector<double>> E_plus;   // [probe][feature]
  std::vector<std::vector<double>> E_minus;  // [probe][feature]
  std::vector<std::vector<double>> outputs;  // model output per probe
  std::vector<std::vector<double>> values;   // pre-ReLU feature value per probe
};

/// Probes: abs -> e_i then -e_i; xor -> [1,0]_i then [1,1]_i. Attribution through "hidden".
AttributionMatrix attribution_matrix(const Model& model, const ToyTask& task);

/// Per-column maximum of max(E+, E-), used for rendering.
std::vector<double> column_scale(const AttributionMatrix& m);

}  // namespace tense
