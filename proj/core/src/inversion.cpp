#include "tense/inversion.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include "tense/error.hpp"
#include "tense/fft.hpp"
#include "tense/parallel.hpp"
#include "tense/stats.hpp"

namespace tense {

namespace {

double signed_pow(double x, double e) { return std::copysign(std::pow(std::abs(x), e), x); }

float logit_clipped(float v) {
  const double p = std::clamp(static_cast<double>(v), 1e-6, 1.0 - 1e-6);
  return static_cast<float>(std::log(p / (1.0 - p)));
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](float v) { return std::isfinite(v); });
}

void require_image_shape(const Shape& s) {
  if (s.size() != 3) throw InvalidArgument("image shape must be [C, H, W], got " + shape_str(s));
}

/// Orthonormal forward spectrum of one [H, W] plane.
std::vector<std::complex<double>> spectrum(const float* plane, std::size_t rows, std::size_t cols) {
  std::vector<std::complex<double>> buf(rows * cols);
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = plane[i];
  fft::transform_2d(buf, rows, cols, false);
  const double norm = 1.0 / std::sqrt(static_cast<double>(rows * cols));
  for (auto& c : buf) c *= norm;
  return buf;
}

}  // namespace

DotCosValue objective_dotcos(std::span<const float> h, std::span<const float> S, double p) {
  if (h.size() != S.size())
    throw ShapeError("objective_dotcos: sizes " + std::to_string(h.size()) + " and " +
                     std::to_string(S.size()));
  if (p < 0) throw InvalidArgument("objective_dotcos: power must be >= 0");
  double d = 0, hh = 0, ss = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    d += static_cast<double>(h[i]) * S[i];
    hh += static_cast<double>(h[i]) * h[i];
    ss += static_cast<double>(S[i]) * S[i];
  }
  if (hh <= 0 || ss <= 0) return {0.0, true};
  return {signed_pow(d, p + 1) / std::pow(std::sqrt(hh) * std::sqrt(ss), p), false};
}

std::string to_string(ParamKind kind) { return kind == ParamKind::Pixel ? "pixel" : "fourier"; }
std::string to_string(SeedMode mode) { return mode == SeedMode::Noise ? "noise" : "image"; }
std::string to_string(TargetKind kind) {
  switch (kind) {
    case TargetKind::SPlus: return "S_plus";
    case TargetKind::SMinus: return "S_minus";
    case TargetKind::SAbs: return "S_abs";
    case TargetKind::Raw: return "raw";
  }
  return "raw";
}

ParamKind parse_param_kind(std::string_view s) {
  if (s == "pixel") return ParamKind::Pixel;
  if (s == "fourier") return ParamKind::Fourier;
  throw InvalidArgument("unknown parameterization '" + std::string(s) + "' (pixel, fourier)");
}

SeedMode parse_seed_mode(std::string_view s) {
  if (s == "noise") return SeedMode::Noise;
  if (s == "image") return SeedMode::Image;
  throw InvalidArgument("unknown seed mode '" + std::string(s) + "' (noise, image)");
}

TargetKind parse_target_kind(std::string_view s) {
  if (s == "S_plus" || s == "plus") return TargetKind::SPlus;
  if (s == "S_minus" || s == "minus") return TargetKind::SMinus;
  if (s == "S_abs" || s == "abs") return TargetKind::SAbs;
  if (s == "raw") return TargetKind::Raw;
  throw InvalidArgument("unknown target '" + std::string(s) + "' (S_plus, S_minus, S_abs, raw)");
}

Tensor target_vector(const Tensor& S, TargetKind kind) {
  Tensor out = S;
  for (auto& v : out.data()) {
    switch (kind) {
      case TargetKind::SPlus: v = std::max(v, 0.0f); break;
      case TargetKind::SMinus: v = std::max(-v, 0.0f); break;
      case TargetKind::SAbs: v = std::abs(v); break;
      case TargetKind::Raw: break;
    }
  }
  return out;
}

void OptimConfig::validate() const {
  if (!(power >= 0)) throw InvalidArgument("power must be >= 0");
  if (!(lr > 0)) throw InvalidArgument("learning rate must be > 0");
  if (transforms.enabled) {
    if (!(transforms.crop_min > 0 && transforms.crop_min <= transforms.crop_max &&
          transforms.crop_max <= 1))
      throw InvalidArgument("crop fractions must satisfy 0 < min <= max <= 1");
    if (transforms.uniform_noise < 0 || transforms.gaussian_sigma < 0)
      throw InvalidArgument("noise levels must be >= 0");
  }
  if (phase_only && param != ParamKind::Fourier)
    throw InvalidArgument("phase-only mode needs the fourier parameterization");
}

nlohmann::json OptimConfig::to_json() const {
  return {{"power", power},
          {"steps", steps},
          {"lr", lr},
          {"lr_schedule", "cosine"},
          {"optimizer", "adam"},
          {"seed_mode", to_string(seed_mode)},
          {"target", to_string(target)},
          {"param", to_string(param)},
          {"phase_only", phase_only},
          {"init_scale", init_scale},
          {"seed", seed},
          {"transforms",
           {{"enabled", transforms.enabled},
            {"crop_min", transforms.crop_min},
            {"crop_max", transforms.crop_max},
            {"uniform_noise", transforms.uniform_noise},
            {"gaussian_sigma", transforms.gaussian_sigma}}}};
}

Tensor magnitude_template(const Tensor& images) {
  if (images.rank() != 4) throw InvalidArgument("magnitude_template expects [N, C, H, W]");
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (!fft::is_power_of_two(h) || !fft::is_power_of_two(w))
    throw InvalidArgument("fourier parameterization needs power-of-two image sizes");
  if (n == 0) throw InvalidArgument("magnitude_template needs at least one image");
  std::vector<double> acc(c * h * w, 0.0);
  std::vector<float> plane(h * w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* src = images.data().data() + (i * c + ch) * h * w;
      for (std::size_t k = 0; k < h * w; ++k) plane[k] = logit_clipped(src[k]);
      auto spec = spectrum(plane.data(), h, w);
      for (std::size_t k = 0; k < h * w; ++k) acc[ch * h * w + k] += std::abs(spec[k]);
    }
  Tensor out(Shape{c, h, w});
  for (std::size_t k = 0; k < acc.size(); ++k) out[k] = static_cast<float>(acc[k] / n);
  return out;
}

Parameterization::Parameterization(ParamKind kind, Shape image_shape, std::optional<Tensor> magnitude)
    : kind_(kind), image_shape_(std::move(image_shape)), magnitude_(std::move(magnitude)) {
  require_image_shape(image_shape_);
  const std::size_t c = image_shape_[0], h = image_shape_[1], w = image_shape_[2];
  if (magnitude_ && kind_ != ParamKind::Fourier)
    throw InvalidArgument("a magnitude template needs the fourier parameterization");
  if (kind_ == ParamKind::Pixel) return;
  if (!fft::is_power_of_two(h) || !fft::is_power_of_two(w))
    throw InvalidArgument("fourier parameterization needs power-of-two image sizes, got " +
                          shape_str(image_shape_));
  if (magnitude_) {
    if (magnitude_->shape() != image_shape_)
      throw ShapeError("magnitude template shape " + shape_str(magnitude_->shape()) +
                       " does not match image " + shape_str(image_shape_));
    return;
  }
  std::vector<double> s(h * w);
  double ms = 0;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t q = 0; q < w; ++q) {
      const double fy = static_cast<double>(std::min(r, h - r)) / static_cast<double>(h);
      const double fx = static_cast<double>(std::min(q, w - q)) / static_cast<double>(w);
      const double f = std::max(std::hypot(fy, fx), 1.0 / static_cast<double>(std::max(h, w)));
      s[r * w + q] = 1.0 / f;
      ms += s[r * w + q] * s[r * w + q];
    }
  const double rms = std::sqrt(ms / static_cast<double>(h * w));
  freq_scale_ = Tensor(Shape{c, h, w, 2});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t k = 0; k < h * w; ++k)
      for (std::size_t part = 0; part < 2; ++part)
        freq_scale_[(ch * h * w + k) * 2 + part] = static_cast<float>(s[k] / rms);
}

Shape Parameterization::coefficient_shape() const {
  if (kind_ == ParamKind::Fourier && !magnitude_) {
    Shape s = image_shape_;
    s.push_back(2);
    return s;
  }
  return image_shape_;
}

Tensor Parameterization::noise_coefficients(Rng& rng, double scale) const {
  Tensor z(coefficient_shape());
  if (magnitude_) {
    for (auto& v : z.data()) v = static_cast<float>(rng.uniform(-std::numbers::pi, std::numbers::pi));
  } else {
    for (auto& v : z.data()) v = static_cast<float>(rng.normal() * scale);
  }
  return z;
}

Tensor Parameterization::encode(const Tensor& image) const {
  if (image.shape() != image_shape_)
    throw ShapeError("seed image shape " + shape_str(image.shape()) + " does not match " +
                     shape_str(image_shape_));
  Tensor logits = image;
  for (auto& v : logits.data()) v = logit_clipped(v);
  if (kind_ == ParamKind::Pixel) return logits;
  const std::size_t c = image_shape_[0], h = image_shape_[1], w = image_shape_[2];
  Tensor z(coefficient_shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    auto spec = spectrum(logits.data().data() + ch * h * w, h, w);
    for (std::size_t k = 0; k < h * w; ++k) {
      const std::size_t at = ch * h * w + k;
      if (magnitude_) {
        z[at] = static_cast<float>(std::arg(spec[k]));
      } else {
        z[at * 2] = static_cast<float>(spec[k].real() / freq_scale_[at * 2]);
        z[at * 2 + 1] = static_cast<float>(spec[k].imag() / freq_scale_[at * 2 + 1]);
      }
    }
  }
  return z;
}

NodeId Parameterization::append_decode(Graph& graph, NodeId z) const {
  if (kind_ == ParamKind::Pixel) return graph.sigmoid(z);
  NodeId spec;
  if (magnitude_) {
    spec = graph.polar_to_complex(graph.constant(*magnitude_, "magnitude_template"), z);
  } else {
    spec = graph.mul(z, graph.constant(freq_scale_, "frequency_scale"));
  }
  return graph.sigmoid(graph.ifft2_real(spec));
}

Tensor Parameterization::decode(const Tensor& z) const {
  Graph g;
  const NodeId zn = g.input("z");
  const NodeId out = append_decode(g, zn);
  return g.evaluate(TensorMap{{"z", z}}).value(out);
}

void GradientHistory::add(const Tensor& grad) {
  if (steps == 0) abs_sum = Tensor(grad.shape());
  if (grad.shape() != abs_sum.shape()) throw ShapeError("gradient history shape changed");
  for (std::size_t i = 0; i < grad.size(); ++i) abs_sum[i] += std::abs(grad[i]);
  ++steps;
}

OpacityMask opacity_mask(const GradientHistory& history) {
  if (history.steps == 0) throw InvalidArgument("opacity_mask needs at least one recorded step");
  const Tensor& g = history.abs_sum;
  if (g.rank() != 3) throw ShapeError("gradient history must be [C, H, W]");
  const std::size_t c = g.dim(0), h = g.dim(1), w = g.dim(2);
  std::vector<double> m(h * w, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t k = 0; k < h * w; ++k)
      m[k] += g[ch * h * w + k] / static_cast<double>(history.steps);

  OpacityMask out{Tensor(Shape{h, w}, 1.0f), false};
  if (std::all_of(m.begin(), m.end(), [](double v) { return v == 0.0; })) {
    out.flagged = true;
    return out;
  }
  const double cap = percentile(m, 95.0);
  for (auto& v : m) v = std::min(v, cap);

  std::vector<double> blurred(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t q = 0; q < w; ++q) {
      double s = 0;
      int n = 0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dq = -1; dq <= 1; ++dq) {
          const long rr = static_cast<long>(r) + dr, qq = static_cast<long>(q) + dq;
          if (rr < 0 || qq < 0 || rr >= static_cast<long>(h) || qq >= static_cast<long>(w)) continue;
          s += m[static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(qq)];
          ++n;
        }
      blurred[r * w + q] = s / n;
    }
  const auto [lo, hi] = std::minmax_element(blurred.begin(), blurred.end());
  const double range = *hi - *lo;
  // Relative threshold: a constant field blurs to values equal up to rounding.
  if (range <= 1e-12 * std::max(std::abs(*hi), 1e-300)) return out;
  for (std::size_t k = 0; k < h * w; ++k)
    out.alpha[k] = static_cast<float>((blurred[k] - *lo) / range);
  return out;
}

namespace {

Tensor with_alpha(const Tensor& image, const Tensor& alpha) {
  const std::size_t c = image.dim(0), hw = image.dim(1) * image.dim(2);
  Tensor out(Shape{c + 1, image.dim(1), image.dim(2)});
  std::copy(image.data().begin(), image.data().end(), out.data().begin());
  std::copy(alpha.data().begin(), alpha.data().end(),
            out.data().begin() + static_cast<std::ptrdiff_t>(c * hw));
  return out;
}

}  // namespace

OptimResult optimize_visualization(const Model& model, const Tensor& S, const std::string& layer,
                                   const OptimConfig& config, const std::optional<Tensor>& seed_image,
                                   const std::optional<Tensor>& magnitude,
                                   const StepObserver& observer) {
  config.validate();
  const StageInfo& stage = model.stage(layer);
  if (!stage.has_relu)
    throw InvalidArgument("layer '" + layer + "' has no post-ReLU activation to optimize");
  const Shape& ishape = model.spec.input_shape;
  require_image_shape(ishape);
  if (config.phase_only && !magnitude)
    throw InvalidArgument("phase-only mode needs a magnitude template");
  if (config.seed_mode == SeedMode::Image && !seed_image)
    throw InvalidArgument("image seed mode needs a seed image");
  if (numel(S.shape()) != numel(stage.shape))
    throw ShapeError("target size " + std::to_string(S.size()) + " does not match layer '" + layer +
                     "' " + shape_str(stage.shape));

  Tensor target = target_vector(S, config.target);
  const double target_norm = l2_norm(target.data());
  if (target_norm == 0.0)
    throw InvalidArgument("target vector (" + to_string(config.target) + ") is zero");
  // The objective is homogeneous in the target, so optimizing against the unit
  // target gives the same ascent direction while keeping Adam's epsilon from
  // making the result depend on the target's scale.
  for (auto& v : target.data()) v = static_cast<float>(v / target_norm);

  const Parameterization P(config.param, ishape,
                           config.phase_only ? magnitude : std::optional<Tensor>{});
  Rng rng(config.seed);
  Tensor z = config.seed_mode == SeedMode::Image ? P.encode(*seed_image)
                                                 : P.noise_coefficients(rng, config.init_scale);

  OptimResult result;
  if (config.steps == 0) {
    result.image = config.seed_mode == SeedMode::Image ? *seed_image : P.decode(z);
    result.mask = {Tensor(Shape{ishape[1], ishape[2]}, 1.0f), true};
    result.rgba = with_alpha(result.image, result.mask.alpha);
    if (observer) observer(0, result.image);
    return result;
  }

  const std::size_t c = ishape[0], h = ishape[1], w = ishape[2];
  Graph g;
  const NodeId zn = g.input("z");
  const NodeId img = P.append_decode(g, zn);
  NodeId x = g.reshape(img, Shape{1, c, h, w});
  const bool tf = config.transforms.enabled;
  if (tf) {
    x = g.resize(x, g.input("box"), h, w);
    x = g.add(x, g.input("noise"));
  }
  const ModelNodes nodes = append_model(g, x, model, ParamBinding::Constants,
                                        BatchNormMode::Inference, layer);
  const NodeId obj = g.dot_cosine(nodes.post.at(layer), g.constant(target, "target"), config.power);
  const std::vector<NodeId> wrt{zn, img};

  Adam adam(AdamConfig{.lr = config.lr});
  ParamMap params{{"z", z}};
  struct Snapshot {
    ParamMap params;
    Adam adam;
    GradientHistory history;
    std::size_t objectives;
  };
  std::optional<Snapshot> last_good;
  GradientHistory history;
  double lr_mult = 1.0;
  std::size_t failures = 0;
  TensorMap in;
  Tensor box(Shape{4});
  Tensor noise(Shape{1, c, h, w});

  for (std::size_t t = 0; t < config.steps;) {
    if (tf) {
      const auto& T = config.transforms;
      const double u = rng.uniform(T.crop_min, T.crop_max);
      const double rows = u * static_cast<double>(h), cols = u * static_cast<double>(w);
      box[0] = static_cast<float>(rng.uniform(0.0, static_cast<double>(h) - rows));
      box[1] = static_cast<float>(rng.uniform(0.0, static_cast<double>(w) - cols));
      box[2] = static_cast<float>(rows);
      box[3] = static_cast<float>(cols);
      for (auto& v : noise.data())
        v = static_cast<float>(rng.uniform(-T.uniform_noise, T.uniform_noise) +
                               T.gaussian_sigma * rng.normal());
      in.insert_or_assign("box", box);
      in.insert_or_assign("noise", noise);
    }
    in.insert_or_assign("z", params.at("z"));

    bool ok = true;
    double value = 0;
    Gradients grads;
    try {
      const Evaluation ev = g.evaluate(in);
      value = ev.value(obj).item() * target_norm;
      if (observer) observer(t, ev.value(img));
      grads = ev.backward(obj, wrt);
      ok = std::isfinite(value) && all_finite(grads.values[0]) && all_finite(grads.values[1]);
    } catch (const NonFiniteError&) {
      ok = false;
    }
    if (!ok) {
      if (++failures >= 5)
        throw NonFiniteError("visualization diverged at step " + std::to_string(t) +
                             " after 5 consecutive learning-rate halvings");
      lr_mult *= 0.5;
      ++result.lr_halvings;
      if (last_good) {
        params = last_good->params;
        adam = last_good->adam;
        history = last_good->history;
        result.objective.resize(last_good->objectives);
        --t;
      }
      continue;
    }
    failures = 0;
    last_good = Snapshot{params, adam, history, result.objective.size()};
    result.objective.push_back(value);
    history.add(grads.values[1].reshaped(ishape));

    Tensor ascent = grads.values[0];
    for (auto& v : ascent.data()) v = -v;
    const double decay =
        0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) /
                              static_cast<double>(config.steps)));
    adam.step(params, {{"z", ascent}}, lr_mult * decay);
    ++t;
  }

  result.image = P.decode(params.at("z"));
  if (observer) observer(config.steps, result.image);
  result.mask = opacity_mask(history);
  result.rgba = with_alpha(result.image, result.mask.alpha);
  return result;
}

nlohmann::json SanityCurves::to_json() const {
  auto band = [](const Band& b) {
    return nlohmann::json{{"median", b.median}, {"min", b.min}, {"max", b.max}};
  };
  return {{"sigma", sigma},  {"units", "sigma"},         {"mti_values", mti_values},
          {"plus", plus},    {"minus", minus},           {"plus_band", band(plus_band)},
          {"minus_band", band(minus_band)}};
}

namespace {

SanityCurves::Band make_band(const std::vector<std::vector<double>>& runs) {
  SanityCurves::Band b;
  if (runs.empty()) return b;
  const std::size_t steps = runs.front().size();
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<double> col;
    for (const auto& r : runs) col.push_back(r.at(t));
    b.median.push_back(percentile(col, 50.0));
    b.min.push_back(*std::min_element(col.begin(), col.end()));
    b.max.push_back(*std::max_element(col.begin(), col.end()));
  }
  return b;
}

}  // namespace

SanityCurves sanity_curve(const Model& model, const FeatureRef& feature, const Tensor& mtis,
                          const std::string& layer, double sigma, const OptimConfig& config) {
  if (!(sigma > 0)) throw InvalidArgument("sanity_curve needs a positive dataset sigma");
  const Tensor batch = as_batch(model, mtis);
  const std::size_t n = batch.dim(0);
  if (n == 0) throw InvalidArgument("sanity_curve needs at least one MTI");

  SanityCurves out;
  out.sigma = sigma;
  std::vector<Tensor> S(n);
  out.mti_values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const AttributionRecord r = attribution_vector(model, slice_row(batch, i), feature, layer);
    S[i] = r.S;
    out.mti_values[i] = r.value / sigma;
  }

  std::vector<std::vector<double>> traces(2 * n);
  parallel_for(2 * n, [&](std::size_t job) {
    OptimConfig cfg = config;
    cfg.seed_mode = SeedMode::Noise;
    cfg.target = job < n ? TargetKind::SPlus : TargetKind::SMinus;
    cfg.seed = derive_seed(config.seed, job);
    auto& trace = traces[job];
    trace.assign(cfg.steps + 1, 0.0);
    optimize_visualization(model, S[job % n], layer, cfg, std::nullopt, std::nullopt,
                           [&](std::size_t step, const Tensor& image) {
                             const ActivationTrace tr = forward_trace(model, image);
                             trace[step] = feature_value(model, tr, feature) / sigma;
                           });
  });
  out.plus.assign(traces.begin(), traces.begin() + static_cast<std::ptrdiff_t>(n));
  out.minus.assign(traces.begin() + static_cast<std::ptrdiff_t>(n), traces.end());
  out.plus_band = make_band(out.plus);
  out.minus_band = make_band(out.minus);
  return out;
}

}  // namespace tense
