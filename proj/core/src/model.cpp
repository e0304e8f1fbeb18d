#include "tense/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "tense/random.hpp"

namespace tense {

namespace {

std::string_view kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Relu: return "relu";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

[[noreturn]] void bad_layer(std::size_t index, const LayerSpec& layer, const std::string& why) {
  throw InvalidArgument("layer " + std::to_string(index) + " (" + std::string(kind_name(layer.kind)) +
                        (layer.name.empty() ? "" : " '" + layer.name + "'") + "): " + why);
}

}  // namespace

std::vector<StageInfo> analyze_spec(const ModelSpec& spec) {
  if (spec.input_shape.size() != 1 && spec.input_shape.size() != 3)
    throw InvalidArgument("input shape must be [D] or [C,H,W], got " + shape_str(spec.input_shape));
  if (numel(spec.input_shape) == 0) throw InvalidArgument("input shape has a zero dimension");
  if (spec.layers.empty()) throw InvalidArgument("model has no layers");

  std::vector<StageInfo> stages;
  std::set<std::string, std::less<>> names;
  Shape cur = spec.input_shape;
  bool seen_bn = false, seen_relu = false, seen_flatten = false;
  std::size_t relus = 0;

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& L = spec.layers[i];
    switch (L.kind) {
      case LayerKind::Dense:
      case LayerKind::Conv2d: {
        if (L.name.empty()) bad_layer(i, L, "parameterized layers need a name");
        if (L.name == "input") bad_layer(i, L, "'input' is reserved");
        if (!names.insert(L.name).second) bad_layer(i, L, "duplicate layer name");
        if (L.units == 0) bad_layer(i, L, "units must be positive");
        StageInfo st;
        st.name = L.name;
        st.kind = L.kind;
        st.has_bias = L.bias;
        st.relus_before = relus;
        if (L.kind == LayerKind::Dense) {
          if (cur.size() != 1)
            bad_layer(i, L, "needs a flat input, got " + shape_str(cur) + " (add a flatten layer)");
          st.fan_in = cur[0];
          cur = {L.units};
        } else {
          if (cur.size() != 3) bad_layer(i, L, "needs a [C,H,W] input, got " + shape_str(cur));
          if (L.kernel == 0 || L.stride == 0) bad_layer(i, L, "kernel and stride must be positive");
          if (cur[1] + 2 * L.padding < L.kernel || cur[2] + 2 * L.padding < L.kernel)
            bad_layer(i, L, "kernel larger than padded input " + shape_str(cur));
          st.fan_in = cur[0] * L.kernel * L.kernel;
          cur = {L.units, (cur[1] + 2 * L.padding - L.kernel) / L.stride + 1,
                 (cur[2] + 2 * L.padding - L.kernel) / L.stride + 1};
        }
        st.shape = cur;
        stages.push_back(st);
        seen_bn = seen_relu = seen_flatten = false;
        break;
      }
      case LayerKind::BatchNorm:
        if (stages.empty()) bad_layer(i, L, "must follow a dense or conv2d layer");
        if (seen_bn || seen_relu || seen_flatten) bad_layer(i, L, "must directly follow its layer");
        seen_bn = true;
        stages.back().has_batch_norm = true;
        break;
      case LayerKind::Relu:
        if (stages.empty()) bad_layer(i, L, "must follow a dense or conv2d layer");
        if (seen_relu || seen_flatten) bad_layer(i, L, "one relu per layer, before flatten");
        seen_relu = true;
        stages.back().has_relu = true;
        ++relus;
        break;
      case LayerKind::Flatten:
        if (cur.size() != 3) bad_layer(i, L, "input is already flat");
        if (seen_flatten) bad_layer(i, L, "duplicate flatten");
        seen_flatten = true;
        cur = {numel(cur)};
        break;
    }
  }
  if (stages.empty()) throw InvalidArgument("model has no dense or conv2d layer");

  for (const auto& rp : spec.read_points) {
    auto it = std::find_if(stages.begin(), stages.end(), [&](auto& s) { return s.name == rp.layer; });
    if (it == stages.end())
      throw InvalidArgument("read point '" + rp.name + "' names unknown layer '" + rp.layer + "'");
    if (rp.point == ReadPoint::Post && !it->has_relu)
      throw InvalidArgument("read point '" + rp.name + "' reads post-ReLU of a layer without ReLU");
  }
  return stages;
}

const StageInfo& Model::stage(std::string_view name) const { return stages.at(stage_index(name)); }

std::size_t Model::stage_index(std::string_view name) const {
  for (std::size_t i = 0; i < stages.size(); ++i)
    if (stages[i].name == name) return i;
  throw InvalidArgument("unknown layer '" + std::string(name) + "'");
}

std::size_t Model::relu_count() const {
  std::size_t n = 0;
  for (const auto& s : stages) n += s.has_relu;
  return n;
}

Model build_model(const ModelSpec& spec, std::uint64_t init_seed) {
  Model m;
  m.spec = spec;
  m.stages = analyze_spec(spec);
  m.seed = init_seed;
  Rng rng(derive_seed(init_seed, 0x1417));
  std::size_t si = 0;
  Shape cur = spec.input_shape;
  for (const LayerSpec& L : spec.layers) {
    if (L.kind != LayerKind::Dense && L.kind != LayerKind::Conv2d) {
      if (L.kind == LayerKind::BatchNorm) {
        const std::string& s = m.stages[si - 1].name;
        const std::size_t c = m.stages[si - 1].shape[0];
        m.params[s + ".bn.gamma"] = Tensor(Shape{c}, 1.0f);
        m.params[s + ".bn.beta"] = Tensor(Shape{c}, 0.0f);
        m.params[s + ".bn.running_mean"] = Tensor(Shape{c}, 0.0f);
        m.params[s + ".bn.running_var"] = Tensor(Shape{c}, 1.0f);
      }
      continue;
    }
    const StageInfo& st = m.stages[si++];
    Shape wshape = L.kind == LayerKind::Dense
                       ? Shape{L.units, st.fan_in}
                       : Shape{L.units, st.fan_in / (L.kernel * L.kernel), L.kernel, L.kernel};
    Tensor w(wshape);
    const double bound = std::sqrt(1.0 / static_cast<double>(st.fan_in));
    for (auto& v : w.data()) v = static_cast<float>(rng.uniform(-bound, bound));
    m.params[st.name + ".weight"] = std::move(w);
    if (L.bias) m.params[st.name + ".bias"] = Tensor(Shape{L.units}, 0.0f);
  }
  return m;
}

ModelSpec toy_spec(std::size_t inputs, std::size_t hidden, std::size_t outputs, bool bias) {
  ModelSpec s;
  s.input_shape = {inputs};
  s.layers = {
      {LayerKind::Dense, "hidden", hidden, 0, 1, 0, bias},
      {LayerKind::Relu, "", 0, 0, 1, 0, true},
      {LayerKind::Dense, "out", outputs, 0, 1, 0, bias},
      {LayerKind::Relu, "", 0, 0, 1, 0, true},
  };
  s.read_points = {{"hidden", "hidden", ReadPoint::Post}, {"out", "out", ReadPoint::Pre}};
  return s;
}

ModelNodes append_model(Graph& g, NodeId input, const Model& model, ParamBinding binding,
                        BatchNormMode mode, std::optional<std::string> stop_after) {
  ModelNodes nodes;
  nodes.input = input;
  auto param = [&](const std::string& name) {
    auto it = nodes.params.find(name);
    if (it != nodes.params.end()) return it->second;
    auto pit = model.params.find(name);
    if (pit == model.params.end()) throw InvalidArgument("model is missing parameter '" + name + "'");
    NodeId id = binding == ParamBinding::Constants ? g.constant(pit->second, name)
                                                   : g.input("param:" + name);
    nodes.params.emplace(name, id);
    return id;
  };

  if (stop_after) model.stage_index(*stop_after);
  NodeId cur = input;
  std::string stage;
  bool done = false;
  for (const LayerSpec& L : model.spec.layers) {
    switch (L.kind) {
      case LayerKind::Dense:
      case LayerKind::Conv2d: {
        if (stop_after && stage == *stop_after) {
          done = true;
          break;
        }
        stage = L.name;
        NodeId w = param(stage + ".weight");
        cur = L.kind == LayerKind::Dense ? g.matmul(cur, g.transpose(w))
                                         : g.conv2d(cur, w, L.stride, L.padding);
        if (L.bias) cur = g.add_bias(cur, param(stage + ".bias"));
        nodes.pre[stage] = cur;
        break;
      }
      case LayerKind::BatchNorm:
        cur = g.batch_norm(cur, param(stage + ".bn.gamma"), param(stage + ".bn.beta"),
                           param(stage + ".bn.running_mean"), param(stage + ".bn.running_var"),
                           mode);
        nodes.pre[stage] = cur;
        if (mode == BatchNormMode::Training) nodes.batch_norm[stage] = cur;
        break;
      case LayerKind::Relu:
        cur = g.relu(cur);
        nodes.post[stage] = cur;
        if (stop_after && stage == *stop_after) done = true;
        break;
      case LayerKind::Flatten:
        cur = g.flatten(cur);
        break;
    }
    if (done) break;
  }
  nodes.output = cur;
  return nodes;
}

void bind_params(const Model& model, TensorMap& inputs) {
  for (const auto& [name, t] : model.params) inputs.insert_or_assign("param:" + name, t);
}

Tensor as_batch(const Model& model, const Tensor& x) {
  const Shape& in = model.spec.input_shape;
  if (x.shape() == in) {
    Shape s{1};
    s.insert(s.end(), in.begin(), in.end());
    return x.reshaped(s);
  }
  if (x.rank() == in.size() + 1 && std::equal(in.begin(), in.end(), x.shape().begin() + 1)) return x;
  throw ShapeError("input " + shape_str(x.shape()) + " does not match model input " + shape_str(in));
}

ActivationTrace forward_trace(const Model& model, const Tensor& x) {
  Graph g;
  const NodeId in = g.input("x");
  const ModelNodes nodes = append_model(g, in, model, ParamBinding::Constants);
  TensorMap inputs{{"x", as_batch(model, x)}};
  const auto ev = g.evaluate(inputs);
  ActivationTrace trace;
  trace.input = ev.value(in);
  for (const auto& [name, id] : nodes.pre) trace.pre.emplace(name, ev.value(id));
  for (const auto& [name, id] : nodes.post) trace.post.emplace(name, ev.value(id));
  trace.output = ev.value(nodes.output);
  return trace;
}

FeatureRef FeatureRef::unit(std::string layer, std::size_t index, std::size_t channels,
                            ReadPoint point) {
  if (index >= channels) throw InvalidArgument("unit index out of range");
  FeatureRef f;
  f.layer = std::move(layer);
  f.direction.assign(channels, 0.0f);
  f.direction[index] = 1.0f;
  f.point = point;
  return f;
}

FeatureRef FeatureRef::negated() const {
  FeatureRef f = *this;
  for (auto& v : f.direction) v = -v;
  return f;
}

std::pair<std::size_t, std::size_t> resolve_position(const SpatialPolicy& policy, std::size_t rows,
                                                     std::size_t cols) {
  switch (policy.kind) {
    case SpatialKind::Center: return {rows / 2, cols / 2};
    case SpatialKind::Explicit:
      if (policy.row >= rows || policy.col >= cols)
        throw InvalidArgument("explicit position outside the activation map");
      return {policy.row, policy.col};
    case SpatialKind::None: return {0, 0};
  }
  return {0, 0};
}

namespace {

NodeId feature_head(Graph& g, NodeId h, const StageInfo& st, const FeatureRef& f) {
  const std::size_t channels = st.shape[0];
  if (f.direction.size() != channels)
    throw InvalidArgument("feature direction has " + std::to_string(f.direction.size()) +
                          " entries but layer '" + st.name + "' has " + std::to_string(channels) +
                          " channels");
  if (f.point == ReadPoint::Post && !st.has_relu)
    throw InvalidArgument("layer '" + st.name + "' has no post-ReLU read point");
  NodeId v = g.constant(Tensor(Shape{channels, 1}, f.direction), "direction");
  if (st.shape.size() == 3) {
    const auto [r, c] = resolve_position(f.spatial, st.shape[1], st.shape[2]);
    h = g.select_position(h, r, c);
  }
  return g.matmul(h, v);
}

}  // namespace

NodeId append_feature(Graph& g, const ModelNodes& nodes, const Model& model, const FeatureRef& f) {
  const StageInfo& st = model.stage(f.layer);
  const auto& table = f.point == ReadPoint::Pre ? nodes.pre : nodes.post;
  auto it = table.find(f.layer);
  if (it == table.end()) throw InvalidArgument("feature layer '" + f.layer + "' not in graph");
  return feature_head(g, it->second, st, f);
}

std::vector<double> feature_values(const Model& model, const ActivationTrace& trace,
                                   const FeatureRef& f) {
  const StageInfo& st = model.stage(f.layer);
  const auto& table = f.point == ReadPoint::Pre ? trace.pre : trace.post;
  auto it = table.find(f.layer);
  if (it == table.end()) throw InvalidArgument("trace lacks layer '" + f.layer + "'");
  Graph g;
  const NodeId h = g.input("h");
  const NodeId out = feature_head(g, h, st, f);
  const auto ev = g.evaluate(TensorMap{{"h", it->second}});
  const auto& v = ev.value(out);
  return std::vector<double>(v.data().begin(), v.data().end());
}

double feature_value(const Model& model, const ActivationTrace& trace, const FeatureRef& f) {
  return feature_values(model, trace, f).at(0);
}

WeightStats weight_stats(const Model& model) {
  WeightStats out;
  out.pooled_histogram.assign(WeightStats::kBins, 0);
  std::size_t neg_total = 0, total = 0;
  const double width = 2 * WeightStats::kRange / static_cast<double>(WeightStats::kBins);
  for (const auto& st : model.stages) {
    const Tensor& w = model.params.at(st.name + ".weight");
    WeightLayerStats ls;
    ls.layer = st.name;
    ls.count = w.size();
    double mean = 0;
    std::size_t neg = 0;
    for (float v : w.data()) {
      mean += v;
      neg += v < 0;
    }
    mean /= static_cast<double>(w.size());
    double var = 0;
    for (float v : w.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(w.size());
    ls.negative_fraction = static_cast<double>(neg) / static_cast<double>(w.size());
    neg_total += neg;
    total += w.size();
    if (var <= 0) {
      ls.zero_variance = true;
    } else {
      ls.histogram.assign(WeightStats::kBins, 0);
      const double sd = std::sqrt(var);
      for (float v : w.data()) {
        const double z = (v - mean) / sd;
        if (z < -WeightStats::kRange || z > WeightStats::kRange) {
          ++ls.out_of_range;
          continue;
        }
        auto bin = static_cast<std::size_t>((z + WeightStats::kRange) / width);
        bin = std::min(bin, WeightStats::kBins - 1);
        ++ls.histogram[bin];
        ++out.pooled_histogram[bin];
      }
    }
    out.layers.push_back(std::move(ls));
  }
  out.pooled_negative_fraction = total ? static_cast<double>(neg_total) / static_cast<double>(total) : 0;
  return out;
}

ReceptiveFieldCrop receptive_field_crop(const Model& model, const FeatureRef& f, const Tensor& x) {
  const Shape& in = model.spec.input_shape;
  if (x.shape() != in) throw ShapeError("receptive_field_crop expects one example " + shape_str(in));
  if (in.size() != 3) throw InvalidArgument("receptive_field_crop needs an image model");
  const std::size_t C = in[0], H = in[1], W = in[2];
  ReceptiveFieldCrop out;
  auto full = [&] {
    out.box = {0, 0, H, W};
    out.crop = x;
    out.full_image = true;
    return out;
  };
  const StageInfo& st = model.stage(f.layer);
  if (st.shape.size() != 3) return full();

  Graph g;
  const NodeId xin = g.input("x");
  const ModelNodes nodes = append_model(g, xin, model, ParamBinding::Constants,
                                        BatchNormMode::Inference, f.layer);
  const NodeId out_node = g.sum(append_feature(g, nodes, model, f));
  const auto ev = g.evaluate(TensorMap{{"x", as_batch(model, x)}});
  const auto grad = ev.backward(out_node, std::span<const NodeId>(&xin, 1)).values[0];

  std::size_t r0 = H, r1 = 0, c0 = W, c1 = 0;
  bool any = false;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      double s = 0;
      for (std::size_t ch = 0; ch < C; ++ch) s += std::abs(grad[(ch * H + r) * W + c]);
      if (s > 0) {
        any = true;
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
    }
  if (!any) {
    full();
    out.zero_gradient = true;
    return out;
  }
  const std::size_t pad = 2;
  r0 = r0 >= pad ? r0 - pad : 0;
  c0 = c0 >= pad ? c0 - pad : 0;
  r1 = std::min(H - 1, r1 + pad);
  c1 = std::min(W - 1, c1 + pad);
  out.box = {r0, c0, r1 - r0 + 1, c1 - c0 + 1};
  out.crop = Tensor(Shape{C, out.box.rows, out.box.cols});
  for (std::size_t ch = 0; ch < C; ++ch)
    for (std::size_t r = 0; r < out.box.rows; ++r)
      for (std::size_t c = 0; c < out.box.cols; ++c)
        out.crop[(ch * out.box.rows + r) * out.box.cols + c] = x[(ch * H + r0 + r) * W + c0 + c];
  return out;
}

}  // namespace tense
