#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tense/attribution.hpp"

namespace tense {

struct DotCosValue {
  double value = 0.0;
  /// Set when |h| = 0 (or |S| = 0): the objective and its gradient are zero.
  bool zero_gradient = false;
};

/// (h . S)^(p+1) / (|h| |S|)^p with the sign of h . S kept, so negative
/// alignment is penalized for every p.
DotCosValue objective_dotcos(std::span<const float> h, std::span<const float> S, double p);

enum class ParamKind { Pixel, Fourier };
enum class SeedMode { Noise, Image };
enum class TargetKind { SPlus, SMinus, SAbs, Raw };

std::string to_string(ParamKind kind);
std::string to_string(SeedMode mode);
std::string to_string(TargetKind kind);
ParamKind parse_param_kind(std::string_view s);
SeedMode parse_seed_mode(std::string_view s);
TargetKind parse_target_kind(std::string_view s);

/// S+ keeps the positive entries of S. S- keeps the magnitudes of the negative
/// entries, so maximizing alignment with it draws the inhibiting pattern.
/// |S| is elementwise and raw is S itself.
Tensor target_vector(const Tensor& S, TargetKind kind);

struct TransformSet {
  bool enabled = true;
  double crop_min = 0.9;  // fraction of each side kept
  double crop_max = 0.99;
  double uniform_noise = 0.02;  // amplitude a of U(-a, a)
  double gaussian_sigma = 0.02;
};

struct OptimConfig {
  double power = 2.0;
  std::size_t steps = 512;
  double lr = 0.05;
  SeedMode seed_mode = SeedMode::Noise;
  TargetKind target = TargetKind::Raw;
  TransformSet transforms;
  ParamKind param = ParamKind::Fourier;
  /// Fourier only: optimize the phase against a fixed magnitude template.
  bool phase_only = false;
  /// Standard deviation of the initial coefficients for noise seeds.
  double init_scale = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

/// Mean orthonormal spectrum magnitude of logit(images) per channel, [C, H, W].
/// The phase-only decode of this template reproduces the dataset's spectrum.
Tensor magnitude_template(const Tensor& images);

/// Optimizable image coefficients and their decode to pixels in [0, 1].
class Parameterization {
 public:
  Parameterization(ParamKind kind, Shape image_shape, std::optional<Tensor> magnitude = std::nullopt);

  ParamKind kind() const { return kind_; }
  bool phase_only() const { return magnitude_.has_value(); }
  const Shape& image_shape() const { return image_shape_; }
  Shape coefficient_shape() const;

  Tensor noise_coefficients(Rng& rng, double scale) const;
  /// Coefficients decoding to `image` (exactly for pixel and free fourier, up to
  /// clipping at 1e-6 from 0 and 1; phase-only keeps only the image's phase).
  Tensor encode(const Tensor& image) const;

  /// Appends the decode of coefficient node z; returns an [C, H, W] node.
  NodeId append_decode(Graph& graph, NodeId z) const;
  Tensor decode(const Tensor& z) const;

 private:
  ParamKind kind_;
  Shape image_shape_;
  std::optional<Tensor> magnitude_;
  Tensor freq_scale_;  // [C, H, W, 2], 1/frequency normalized to unit RMS
};

/// Accumulated absolute pixel gradients over optimization steps.
struct GradientHistory {
  Tensor abs_sum;  // [C, H, W]
  std::size_t steps = 0;
  void add(const Tensor& grad);
};

struct OpacityMask {
  Tensor alpha;  // [H, W]
  bool flagged = false;  // history was all zero
};

/// Mean |gradient| over steps, summed over channels, clipped at P95, 3x3 box
/// blurred and min-max normalized. A constant field gives alpha 1 everywhere.
OpacityMask opacity_mask(const GradientHistory& history);

struct OptimResult {
  Tensor image;  // [C, H, W]
  Tensor rgba;   // [C + 1, H, W], alpha from the opacity mask
  std::vector<double> objective;  // per step, before the update
  OpacityMask mask;
  std::size_t lr_halvings = 0;
};

/// Called with the decoded (untransformed) image before each step and once after the last.
using StepObserver = std::function<void(std::size_t step, const Tensor& image)>;

/// Gradient ascent of the dot-cosine objective between the post-ReLU activation
/// of `layer` and the chosen target of S. `seed_image` is required for image seeds.
/// A non-finite step restores the last good state and halves the learning rate;
/// five consecutive failures raise NonFiniteError.
OptimResult optimize_visualization(const Model& model, const Tensor& S, const std::string& layer,
                                   const OptimConfig& config,
                                   const std::optional<Tensor>& seed_image = std::nullopt,
                                   const std::optional<Tensor>& magnitude = std::nullopt,
                                   const StepObserver& observer = {});

struct SanityCurves {
  double sigma = 0.0;
  std::vector<double> mti_values;             // sigma units
  std::vector<std::vector<double>> plus;      // per run, per step, sigma units
  std::vector<std::vector<double>> minus;
  struct Band {
    std::vector<double> median, min, max;
  };
  Band plus_band, minus_band;
  nlohmann::json to_json() const;
};

/// Inverts S+ and S- of each MTI from noise and traces f_v of the decoded image
/// per step, divided by the dataset standard deviation `sigma`.
SanityCurves sanity_curve(const Model& model, const FeatureRef& feature, const Tensor& mtis,
                          const std::string& layer, double sigma, const OptimConfig& config);

}  // namespace tense
