#include "tense/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tense/parallel.hpp"
#include "tense/stats.hpp"

namespace tense {

namespace {

void check_upstream(const Model& model, const FeatureRef& f, const std::string& layer) {
  if (layer == kInputLayer) return;
  const std::size_t li = model.stage_index(layer);
  const std::size_t fi = model.stage_index(f.layer);
  if (li >= fi)
    throw InvalidArgument("layer '" + layer + "' is not upstream of feature layer '" + f.layer + "'");
  if (!model.stages[li].has_relu)
    throw InvalidArgument("layer '" + layer + "' has no post-ReLU activation");
}

std::pair<double, double> split(std::span<const float> s) {
  double p = 0, n = 0;
  for (float v : s) (v > 0 ? p : n) += v;
  return {p, -n};
}

}  // namespace

std::vector<std::string> attribution_layers(const Model& model, const FeatureRef& feature) {
  std::vector<std::string> out{std::string(kInputLayer)};
  const std::size_t fi = model.stage_index(feature.layer);
  for (std::size_t i = 0; i < fi; ++i)
    if (model.stages[i].has_relu) out.push_back(model.stages[i].name);
  return out;
}

AttributionBatch attribute_batch(const Model& model, const Tensor& x, const FeatureRef& feature,
                                 std::span<const std::string> layers) {
  for (const auto& l : layers) check_upstream(model, feature, l);
  Graph g;
  const NodeId in = g.input("x");
  const ModelNodes nodes = append_model(g, in, model, ParamBinding::Constants,
                                        BatchNormMode::Inference, feature.layer);
  const NodeId fv = append_feature(g, nodes, model, feature);
  const NodeId total = g.sum(fv);
  std::vector<NodeId> wrt;
  for (const auto& l : layers) wrt.push_back(l == kInputLayer ? in : nodes.post.at(l));
  const auto ev = g.evaluate(TensorMapD{{"x", tensor_cast<double>(as_batch(model, x))}});
  auto grads = ev.backward(total, wrt);
  AttributionBatch out;
  const TensorD& v = ev.value(fv);
  out.values.assign(v.data().begin(), v.data().end());
  const std::size_t N = v.size();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    TensorD s = std::move(grads.values[k]);
    const TensorD& h = ev.value(wrt[k]);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] *= h[i];
    LayerEnergies e{std::vector<double>(N), std::vector<double>(N), std::vector<double>(N)};
    const std::size_t per = N ? s.size() / N : 0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
        e.E[n] += s[i];
        (s[i] > 0 ? e.E_plus[n] : e.E_minus[n]) += std::abs(s[i]);
      }
    out.energies.insert_or_assign(layers[k], std::move(e));
    out.S.insert_or_assign(layers[k], tensor_cast<float>(s));
  }
  return out;
}

void energy_split(AttributionRecord& r) {
  const auto [p, n] = split(r.S.data());
  r.E_plus = p;
  r.E_minus = n;
  r.E = sum(r.S.data());
}

void spatial_maps(AttributionRecord& r) {
  if (r.S.rank() != 3) throw InvalidArgument("layer '" + r.layer + "' has no spatial extent");
  const std::size_t C = r.S.dim(0), H = r.S.dim(1), W = r.S.dim(2), hw = H * W;
  std::vector<double> p(hw, 0.0), n(hw, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < hw; ++k) {
      const float v = r.S[c * hw + k];
      (v > 0 ? p[k] : n[k]) += v > 0 ? v : -v;
    }
  Tensor tp(Shape{H, W}), tn(Shape{H, W});
  for (std::size_t k = 0; k < hw; ++k) {
    tp[k] = static_cast<float>(p[k]);
    tn[k] = static_cast<float>(n[k]);
  }
  r.phi_plus = std::move(tp);
  r.phi_minus = std::move(tn);
}

AttributionRecord attribution_vector(const Model& model, const Tensor& x, const FeatureRef& feature,
                                     const std::string& layer) {
  const Tensor xb = as_batch(model, x);
  if (xb.dim(0) != 1) throw ShapeError("attribution_vector expects one example");
  const std::string layers[] = {layer};
  auto batch = attribute_batch(model, xb, feature, layers);
  AttributionRecord r;
  r.feature = feature;
  r.layer = layer;
  r.value = batch.values[0];
  r.S = slice_row(batch.S.at(layer), 0);
  const LayerEnergies& e = batch.energies.at(layer);
  r.E = e.E[0];
  r.E_plus = e.E_plus[0];
  r.E_minus = e.E_minus[0];
  return r;
}

std::vector<AttributionRecord> attribution_records(const Model& model, const Tensor& x,
                                                   const FeatureRef& feature,
                                                   const std::string& layer, bool maps,
                                                   std::size_t chunk) {
  const Tensor xb = as_batch(model, x);
  const std::size_t N = xb.dim(0);
  std::vector<AttributionRecord> out(N);
  const std::size_t chunks = (N + chunk - 1) / chunk;
  const std::string layers[] = {layer};
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t s = c * chunk, e = std::min(N, s + chunk);
    std::vector<std::size_t> ids(e - s);
    std::iota(ids.begin(), ids.end(), s);
    auto batch = attribute_batch(model, gather_rows(xb, ids), feature, layers);
    const Tensor& S = batch.S.at(layer);
    const LayerEnergies& en = batch.energies.at(layer);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      AttributionRecord& r = out[s + k];
      r.input_id = s + k;
      r.feature = feature;
      r.layer = layer;
      r.value = batch.values[k];
      r.S = slice_row(S, k);
      r.E = en.E[k];
      r.E_plus = en.E_plus[k];
      r.E_minus = en.E_minus[k];
      if (maps) spatial_maps(r);
    }
  });
  return out;
}

double map_scale(std::span<const AttributionRecord> records) {
  std::vector<double> pooled;
  for (const auto& r : records) {
    if (!r.phi_plus || !r.phi_minus) throw InvalidArgument("map_scale needs spatial maps");
    for (float v : r.phi_plus->data()) pooled.push_back(v);
    for (float v : r.phi_minus->data()) pooled.push_back(v);
  }
  if (pooled.empty()) return 1.0;
  const double s = percentile(std::move(pooled), 99.0);
  return s > 0 ? s : 1.0;
}

CompletenessReport completeness_report(const Model& model, const std::vector<FeatureRef>& features,
                                       const Tensor& inputs, std::vector<std::string> layers) {
  if (features.empty()) throw InvalidArgument("completeness_report needs at least one feature");
  if (layers.empty()) {
    layers = attribution_layers(model, features.front());
    for (const auto& f : features) {
      const auto ok = attribution_layers(model, f);
      std::erase_if(layers, [&](const std::string& l) {
        return std::find(ok.begin(), ok.end(), l) == ok.end();
      });
    }
  }
  const Tensor x = as_batch(model, inputs);
  const std::size_t N = x.dim(0), L = layers.size(), F = features.size();
  constexpr std::size_t chunk = 128;
  const std::size_t chunks = (N + chunk - 1) / chunk;
  // values[f][n], energy[f][l][n]
  std::vector<std::vector<double>> values(F, std::vector<double>(N));
  std::vector<std::vector<std::vector<double>>> energy(
      F, std::vector<std::vector<double>>(L, std::vector<double>(N)));
  parallel_for(F * chunks, [&](std::size_t job) {
    const std::size_t fi = job / chunks, c = job % chunks;
    const std::size_t s = c * chunk, e = std::min(N, s + chunk);
    std::vector<std::size_t> ids(e - s);
    std::iota(ids.begin(), ids.end(), s);
    const auto batch = attribute_batch(model, gather_rows(x, ids), features[fi], layers);
    for (std::size_t k = 0; k < ids.size(); ++k) values[fi][s + k] = batch.values[k];
    for (std::size_t li = 0; li < L; ++li) {
      const LayerEnergies& en = batch.energies.at(layers[li]);
      for (std::size_t k = 0; k < ids.size(); ++k) energy[fi][li][s + k] = en.E[k];
    }
  });

  const double total_relus = static_cast<double>(std::max<std::size_t>(model.relu_count(), 1));
  CompletenessReport report;
  for (std::size_t li = 0; li < L; ++li) {
    LayerCompleteness lc;
    lc.layer = layers[li];
    lc.depth = layers[li] == kInputLayer
                   ? 0.0
                   : static_cast<double>(model.stage(layers[li]).relus_before + 1) / total_relus;
    std::vector<double> ps, ss, ls;
    for (std::size_t fi = 0; fi < F; ++fi) {
      FeatureCompleteness fc;
      fc.pearson = pearson(values[fi], energy[fi][li]);
      fc.spearman = spearman(values[fi], energy[fi][li]);
      double l1 = 0, scale = 0;
      for (std::size_t n = 0; n < N; ++n) {
        l1 += std::abs(values[fi][n] - energy[fi][li][n]);
        scale += std::abs(values[fi][n]);
      }
      fc.l1 = l1 / static_cast<double>(N);
      fc.value_scale = scale / static_cast<double>(N);
      if (fc.pearson && fc.spearman) {
        ps.push_back(*fc.pearson);
        ss.push_back(*fc.spearman);
      } else {
        ++lc.undefined;
      }
      ls.push_back(fc.l1);
      lc.features.push_back(fc);
    }
    lc.pearson_mean = mean(ps);
    lc.pearson_sd = stddev(ps);
    lc.spearman_mean = mean(ss);
    lc.spearman_sd = stddev(ss);
    lc.l1_mean = mean(ls);
    report.layers.push_back(std::move(lc));
  }
  return report;
}

AttributionMatrix attribution_matrix(const Model& model, const ToyTask& task) {
  const std::size_t n = task.features, d = task.input_dim();
  const std::size_t outputs = model.stages.back().shape[0];
  if (model.spec.input_shape != Shape{d} || outputs != n)
    throw InvalidArgument("model does not match the " + to_string(task.kind) + " task");
  AttributionMatrix m;
  Tensor probes(Shape{2 * n, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (task.kind == ToyKind::Abs) {
      probes[i * d + i] = 1.0f;
      probes[(n + i) * d + i] = -1.0f;
      m.probes.push_back("e" + std::to_string(i));
    } else {
      probes[i * d + 2 * i] = 1.0f;
      probes[(n + i) * d + 2 * i] = 1.0f;
      probes[(n + i) * d + 2 * i + 1] = 1.0f;
      m.probes.push_back("[1,0]" + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    m.probes.push_back(task.kind == ToyKind::Abs ? "-e" + std::to_string(i)
                                                 : "[1,1]" + std::to_string(i));
  const std::string hidden = model.stages.front().name;
  const std::string out_layer = model.stages.back().name;
  m.E_plus.assign(2 * n, std::vector<double>(n));
  m.E_minus.assign(2 * n, std::vector<double>(n));
  m.values.assign(2 * n, std::vector<double>(n));
  for (std::size_t j = 0; j < n; ++j) {
    m.features.push_back("f" + std::to_string(j));
    const auto f = FeatureRef::unit(out_layer, j, n);
    const auto recs = attribution_records(model, probes, f, hidden);
    for (std::size_t r = 0; r < 2 * n; ++r) {
      m.E_plus[r][j] = recs[r].E_plus;
      m.E_minus[r][j] = recs[r].E_minus;
      m.values[r][j] = recs[r].value;
    }
  }
  const Tensor y = predict(model, probes);
  for (std::size_t r = 0; r < 2 * n; ++r)
    m.outputs.emplace_back(y.data().begin() + static_cast<std::ptrdiff_t>(r * n),
                           y.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
  return m;
}

std::vector<double> column_scale(const AttributionMatrix& m) {
  std::vector<double> s(m.features.size(), 0.0);
  for (std::size_t r = 0; r < m.probes.size(); ++r)
    for (std::size_t j = 0; j < s.size(); ++j)
      s[j] = std::max({s[j], m.E_plus[r][j], m.E_minus[r][j]});
  return s;
}

}  // namespace tense
