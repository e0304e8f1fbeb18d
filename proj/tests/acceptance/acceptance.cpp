// Acceptance suite: one PASS/FAIL line per criterion.
//
//   tense-acceptance [--only N,...] [--cache DIR] [--configs DIR]
//
// The curve convnets shared by several criteria are trained once and cached
// under --cache; delete the directory to retrain.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tense/atlas.hpp"
#include "tense/attribution.hpp"
#include "tense/checkpoint.hpp"
#include "tense/error.hpp"
#include "tense/inversion.hpp"
#include "tense/io.hpp"
#include "tense/selection.hpp"
#include "tense/stats.hpp"
#include "tense/synth.hpp"
#include "tense/training.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace tense;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Report {
 public:
  void check(bool ok, const std::string& what) {
    pass_ = pass_ && ok;
    if (!detail_.empty()) detail_ += "; ";
    detail_ += (ok ? "" : "FAILED ") + what;
  }
  void note(const std::string& what) {
    if (!detail_.empty()) detail_ += "; ";
    detail_ += what;
  }
  Outcome done() const { return {pass_, detail_}; }

 private:
  bool pass_ = true;
  std::string detail_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Paths {
  fs::path cache;
  fs::path configs;
};

// Trained curve convnets, shared across criteria.
struct Convnets {
  Paths paths;
  std::optional<Model> plain, bn;
  double plain_accuracy = 0, bn_accuracy = 0;
  double train_seconds = 0;

  Model& get(bool batch_norm) {
    auto& slot = batch_norm ? bn : plain;
    if (slot) return *slot;
    const std::string name = batch_norm ? "convnet_bn" : "convnet";
    const fs::path dir = paths.cache / name;
    if (fs::exists(dir / "manifest.json")) {
      slot = load_checkpoint(dir);
    } else {
      const auto t0 = std::chrono::steady_clock::now();
      std::ifstream in(paths.configs / (name + ".json"));
      if (!in) throw Error("cannot open " + (paths.configs / (name + ".json")).string());
      const ModelSpec spec = spec_from_json(nlohmann::json::parse(in));
      const SynthImageSet data = gen_synthetic_images(20000, SynthKind::Curves, 1);
      ConvnetResult r = train_convnet(data.images, data.labels, spec, ConvnetConfig{});
      r.model.metadata["holdout_accuracy"] = std::to_string(r.holdout_accuracy);
      save_checkpoint(r.model, dir);
      slot = std::move(r.model);
      train_seconds += seconds_since(t0);
    }
    (batch_norm ? bn_accuracy : plain_accuracy) = std::stod(slot->metadata.at("holdout_accuracy"));
    return *slot;
  }
};

const SynthImageSet& mixed_set() {
  static const SynthImageSet s = gen_synthetic_images(2000, SynthKind::Mixed, 7);
  return s;
}

// 1. Exact completeness on a bias-free ReLU MLP.
Outcome exact_completeness(Convnets&) {
  Report rep;
  Rng rng(101);
  const Model m = testing::random_mlp(16, {32, 32, 10}, 11, false);
  const Tensor x = testing::random_tensor({500, 16}, rng);
  double worst = 0;
  std::size_t layers = 0;
  for (int k = 0; k < 10; ++k) {
    FeatureRef f;
    f.layer = "out";
    f.direction.resize(10);
    for (auto& v : f.direction) v = static_cast<float>(rng.normal());
    for (const auto& layer : attribution_layers(m, f)) {
      ++layers;
      for (const auto& r : attribution_records(m, x, f, layer))
        worst = std::max(worst, std::abs(r.E - r.value) / (std::abs(r.value) + 1e-6));
    }
  }
  rep.check(layers == 30, "layers checked " + std::to_string(layers));
  rep.check(worst < 1e-4, "max relative error " + fmt("%.2e", worst) + " < 1e-4");
  return rep.done();
}

// 2. Completeness correlation on the trained convnet and its batch-norm twin.
Outcome completeness_correlation(Convnets& nets) {
  Report rep;
  const Model& plain = nets.get(false);
  const Model& bn = nets.get(true);
  rep.note("held-out accuracy " + fmt("%.3f", nets.plain_accuracy) + " / bn " + fmt("%.3f", nets.bn_accuracy));
  rep.check(nets.plain_accuracy >= 0.9 && nets.bn_accuracy >= 0.9, "accuracy >= 0.90");
  const SynthImageSet test = gen_synthetic_images(2000, SynthKind::Curves, 999);
  std::vector<FeatureRef> feats;
  for (std::size_t k = 0; k < 8; ++k) feats.push_back(FeatureRef::unit("logits", k, 8));
  const CompletenessReport a = completeness_report(plain, feats, test.images);
  const CompletenessReport b = completeness_report(bn, feats, test.images);
  auto min_pearson = [](const LayerCompleteness& L) {
    double v = 1;
    for (const auto& f : L.features) v = std::min(v, f.pearson.value_or(-1.0));
    return v;
  };
  std::ostringstream layers;
  for (const auto& L : a.layers) {
    layers << L.layer << " " << fmt("%.4f", L.pearson_mean) << " ";
    if (L.layer != "input") rep.check(min_pearson(L) >= 0.95, L.layer + " min Pearson " + fmt("%.4f", min_pearson(L)));
  }
  rep.note("plain: " + layers.str());
  const auto& input = a.layers.front();
  const auto& deepest = a.layers.back();
  rep.check(input.layer == "input" && input.pearson_mean < deepest.pearson_mean,
            "pixel " + fmt("%.4f", input.pearson_mean) + " < " + deepest.layer + " " +
                fmt("%.4f", deepest.pearson_mean));
  // The first hidden layer is the early layer compared across twins.
  rep.check(b.layers.at(1).pearson_mean < a.layers.at(1).pearson_mean,
            "bn " + b.layers.at(1).layer + " " + fmt("%.4f", b.layers.at(1).pearson_mean) + " < plain " +
                fmt("%.4f", a.layers.at(1).pearson_mean));
  rep.note("bn pixel " + fmt("%.4f", b.layers.at(0).pearson_mean) + " vs plain " +
           fmt("%.4f", a.layers.at(0).pearson_mean));
  return rep.done();
}

double off_diagonal_max(const AttributionMatrix& m, double* diag_mean, double* off_mass) {
  const std::size_t n = m.features.size();
  double worst = 0, diag = 0, mass = 0;
  std::size_t nd = 0;
  for (std::size_t p = 0; p < m.probes.size(); ++p)
    for (std::size_t f = 0; f < n; ++f) {
      const double e = std::max(m.E_plus[p][f], m.E_minus[p][f]);
      if (p % n == f) {
        diag += e;
        ++nd;
      } else {
        worst = std::max(worst, e);
        mass += e;
      }
    }
  *diag_mean = diag / static_cast<double>(nd);
  *off_mass = mass;
  return worst;
}

// 3. Toy abs superposition.
Outcome toy_abs(Convnets&) {
  Report rep;
  const ToyTask task = ToyTask::abs();
  const TrainConfig cfg;
  const ToyTrainResult r12 = train_toy(task, 12, cfg);
  const ToyTrainResult r6 = train_toy(task, 6, cfg);
  const ExhaustiveEval e12 = eval_exhaustive(r12.best, task);
  const ExhaustiveEval e6 = eval_exhaustive(r6.best, task);
  rep.check(e12.max < 1e-4, "m=12 seed " + std::to_string(r12.best_seed) + " exhaustive max loss " +
                                fmt("%.3e", e12.max) + " < 1e-4 (mean " + fmt("%.3e", e12.mean) + ")");
  double d12 = 0, mass12 = 0, d6 = 0, mass6 = 0;
  const double off12 = off_diagonal_max(attribution_matrix(r12.best, task), &d12, &mass12);
  off_diagonal_max(attribution_matrix(r6.best, task), &d6, &mass6);
  rep.check(off12 < 0.05 * d12, "m=12 off-diagonal max " + fmt("%.3f", off12) + " < 5% of diagonal mean " +
                                    fmt("%.3f", d12));
  rep.check(e6.mean > e12.mean, "m=6 mean loss " + fmt("%.4f", e6.mean) + " > m=12 " + fmt("%.4f", e12.mean));
  std::vector<double> k, loss;
  for (const auto& [count, mean] : e6.bucket_mean()) {
    k.push_back(static_cast<double>(count));
    loss.push_back(mean);
  }
  const double rho = spearman(k, loss).value_or(0.0);
  rep.check(rho > 0, "m=6 Spearman(active count, loss) " + fmt("%.3f", rho) + " > 0");
  rep.check(mass6 > 5 * mass12, "m=6 off-diagonal mass " + fmt("%.3f", mass6) + " > 5x m=12 " + fmt("%.3f", mass12));
  return rep.done();
}

// 4. Toy XOR.
Outcome toy_xor(Convnets&) {
  Report rep;
  const ToyTask task = ToyTask::xor_task();
  const ToyTrainResult r = train_toy(task, 12, TrainConfig{});
  const ExhaustiveEval e = eval_exhaustive(r.best, task);
  rep.check(e.max < 1e-3, "m=12 seed " + std::to_string(r.best_seed) + " exhaustive max loss " +
                              fmt("%.3e", e.max) + " < 1e-3 (mean " + fmt("%.3e", e.mean) + ")");
  const AttributionMatrix m = attribution_matrix(r.best, task);
  const std::size_t n = task.features;
  std::size_t tense = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t p = n + i;  // [1,1]_i
    const double ep = m.E_plus[p][i], en = m.E_minus[p][i];
    const bool ok = ep > 0 && en > 0 && std::min(ep, en) / std::max(ep, en) > 0.25 &&
                    std::abs(m.outputs[p][i]) < 0.05;
    tense += ok;
  }
  rep.check(tense >= 5, std::to_string(tense) + "/6 features balanced at [1,1] with output near 0");
  return rep.done();
}

ModelSpec random_spec(Rng& rng, bool* batch_norm_used) {
  ModelSpec s;
  const std::size_t c = 1 + rng.below(3), h = 4 + rng.below(4), w = 4 + rng.below(4);
  s.input_shape = {c, h, w};
  std::size_t hh = h, ww = w;
  const std::size_t convs = rng.below(3);
  for (std::size_t i = 0; i < convs; ++i) {
    LayerSpec L;
    L.kind = LayerKind::Conv2d;
    L.name = "conv" + std::to_string(i + 1);
    L.units = 2 + rng.below(3);
    L.kernel = 1 + rng.below(std::min<std::size_t>(3, std::min(hh, ww)));
    L.stride = 1 + rng.below(2);
    L.padding = rng.below(2);
    L.bias = rng.bernoulli(0.7);
    s.layers.push_back(L);
    hh = (hh + 2 * L.padding - L.kernel) / L.stride + 1;
    ww = (ww + 2 * L.padding - L.kernel) / L.stride + 1;
    if (rng.bernoulli(0.5)) {
      s.layers.push_back(LayerSpec{LayerKind::BatchNorm});
      *batch_norm_used = true;
    }
    s.layers.push_back(LayerSpec{LayerKind::Relu});
  }
  s.layers.push_back(LayerSpec{LayerKind::Flatten});
  const std::size_t dense = 1 + rng.below(2);
  for (std::size_t i = 0; i < dense; ++i) {
    LayerSpec L;
    L.kind = LayerKind::Dense;
    L.name = "fc" + std::to_string(i + 1);
    L.units = 3 + rng.below(4);
    L.bias = rng.bernoulli(0.7);
    s.layers.push_back(L);
    if (rng.bernoulli(0.3)) {
      s.layers.push_back(LayerSpec{LayerKind::BatchNorm});
      *batch_norm_used = true;
    }
    s.layers.push_back(LayerSpec{LayerKind::Relu});
  }
  LayerSpec out;
  out.kind = LayerKind::Dense;
  out.name = "out";
  out.units = 2 + rng.below(3);
  s.layers.push_back(out);
  return s;
}

// 5. Gradient correctness over random dense/conv/batch-norm graphs.
// Training-mode batch norm over very few rows is sharply curved, which the
// central difference at step 1e-3 cannot resolve; 8 rows keep it smooth.
constexpr std::size_t kBatch = 8;

Outcome gradient_correctness(Convnets&) {
  Report rep;
  Rng rng(505);
  double worst = 0;
  std::size_t checked = 0, skipped = 0, with_bn = 0, training_bn = 0;
  for (int trial = 0; trial < 100; ++trial) {
    bool bn = false;
    const ModelSpec spec = random_spec(rng, &bn);
    Model m = build_model(spec, 1000 + trial);
    testing::randomize_biases(m, rng);
    with_bn += bn;
    const BatchNormMode mode = bn && trial % 2 ? BatchNormMode::Training : BatchNormMode::Inference;
    training_bn += mode == BatchNormMode::Training;
    Graph g;
    const NodeId x = g.input("x");
    const ModelNodes nodes = append_model(g, x, m, ParamBinding::Placeholders, mode);
    const std::size_t outs = m.stages.back().shape.at(0);
    const NodeId y = g.dot(nodes.output, g.constant(testing::random_tensor({kBatch, outs}, rng)));
    TensorMap in;
    Shape xs{kBatch};
    xs.insert(xs.end(), spec.input_shape.begin(), spec.input_shape.end());
    in["x"] = testing::random_tensor(xs, rng);
    bind_params(m, in);
    // The input and one weight tensor per graph.
    const std::string wname = m.stages.front().name + ".weight";
    for (NodeId probe : {x, nodes.params.at(wname)}) {
      const GradCheckResult r = grad_check(g, in, y, probe, 1e-3);
      worst = std::max(worst, r.max_rel_error);
      checked += r.checked;
      skipped += r.skipped_kink;
    }
  }
  rep.note(std::to_string(with_bn) + " graphs with batch norm (" + std::to_string(training_bn) +
           " in training mode), " + std::to_string(checked) + " elements, " + std::to_string(skipped) +
           " kink-adjacent skipped");
  rep.check(worst < 1e-3, "max relative error " + fmt("%.2e", worst) + " < 1e-3");
  return rep.done();
}

struct MtiSetup {
  FeatureRef feature;
  std::string layer = "conv2";
  double sigma = 0;
  std::vector<AttributionRecord> records;
  SelectionResult mtis;
};

MtiSetup mti_setup(const Model& model) {
  MtiSetup s;
  s.feature = FeatureRef::unit("logits", 0, 8);
  s.records = attribution_records(model, mixed_set().images, s.feature, s.layer);
  std::vector<double> v;
  for (const auto& r : s.records) v.push_back(r.value);
  s.sigma = stddev(v);
  s.mtis = select_mti(s.records, 5, {}, NormKind::L1, s.sigma);
  return s;
}

// 6. Inversion sanity curves.
Outcome inversion_sanity(Convnets& nets) {
  Report rep;
  const Model& model = nets.get(false);
  const MtiSetup s = mti_setup(model);
  rep.check(s.mtis.ranked.size() == 5, std::to_string(s.mtis.ranked.size()) + " MTIs");
  if (s.mtis.ranked.empty()) return rep.done();
  const Tensor imgs = gather_rows(mixed_set().images, s.mtis.ids());
  OptimConfig cfg;
  cfg.steps = 256;
  const SanityCurves c = sanity_curve(model, s.feature, imgs, s.layer, s.sigma, cfg);
  std::vector<double> up, down;
  for (std::size_t i = 0; i < c.plus.size(); ++i) {
    up.push_back(c.plus[i].back() - c.mti_values[i]);
    down.push_back(c.minus[i].back() - c.mti_values[i]);
  }
  const double mu = percentile(up, 50), md = percentile(down, 50);
  rep.check(mu >= 1.0, "S_plus median final - MTI " + fmt("%+.2f", mu) + " sigma >= +1");
  rep.check(md <= -0.5, "S_minus median final - MTI " + fmt("%+.2f", md) + " sigma <= -0.5");
  return rep.done();
}

// 7. Objective properties and rescaling invariance.
Outcome objective_properties(Convnets& nets) {
  Report rep;
  Rng rng(707);
  double par = 0, orth = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<float> h(20), s(20), o(20);
    for (auto& v : h) v = static_cast<float>(rng.normal());
    const double a = rng.uniform(0.1, 10);
    double nh = 0, ns = 0, ho = 0, hh = 0;
    for (std::size_t i = 0; i < 20; ++i) {
      s[i] = static_cast<float>(a * h[i]);
      o[i] = static_cast<float>(rng.normal());
      hh += static_cast<double>(h[i]) * h[i];
      ho += static_cast<double>(h[i]) * o[i];
    }
    for (std::size_t i = 0; i < 20; ++i) o[i] = static_cast<float>(o[i] - ho / hh * h[i]);
    for (std::size_t i = 0; i < 20; ++i) {
      nh += static_cast<double>(h[i]) * h[i];
      ns += static_cast<double>(s[i]) * s[i];
    }
    const double p = rng.uniform(0, 4);
    const double expect = std::sqrt(nh * ns);
    par = std::max(par, std::abs(objective_dotcos(h, s, p).value - expect) / expect);
    orth = std::max(orth, std::abs(objective_dotcos(h, o, p).value));
  }
  rep.check(par < 1e-6, "parallel relative error " + fmt("%.1e", par));
  rep.check(orth < 1e-6, "orthogonal |L| " + fmt("%.1e", orth));

  const Model& model = nets.get(false);
  const MtiSetup s = mti_setup(model);
  if (s.mtis.ranked.empty()) {
    rep.check(false, "no MTI to invert");
    return rep.done();
  }
  const Tensor& S = s.records.at(s.mtis.ranked.front().id).S;
  OptimConfig cfg;
  cfg.transforms.enabled = false;
  cfg.target = TargetKind::SPlus;
  cfg.seed = 3;
  cfg.steps = 256;
  const OptimResult base = optimize_visualization(model, S, s.layer, cfg);
  double worst = 0;
  for (float c : {0.1f, 2.5f, 40.0f}) {
    Tensor Sc = S;
    for (auto& v : Sc.data()) v *= c;
    const OptimResult r = optimize_visualization(model, Sc, s.layer, cfg);
    for (std::size_t i = 0; i < r.image.size(); ++i)
      worst = std::max(worst, static_cast<double>(std::abs(r.image[i] - base.image[i])));
  }
  rep.check(worst <= 1e-3, "rescaled targets max pixel difference " + fmt("%.1e", worst) + " <= 1e-3");
  return rep.done();
}

// 8. Uniqueness bounds and the activation-vs-attribution gap.
Outcome uniqueness_gap(Convnets& nets) {
  Report rep;
  Rng rng(808);
  bool bounds = true, oracle = true;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.below(10), m = 1 + rng.below(12), universe = m + rng.below(40);
    std::vector<std::vector<std::size_t>> sets(n);
    std::set<std::size_t> all;
    for (auto& s : sets) {
      std::set<std::size_t> pick;
      while (pick.size() < m) pick.insert(rng.below(universe));
      s.assign(pick.begin(), pick.end());
      all.insert(pick.begin(), pick.end());
    }
    const double u = uniqueness(sets);
    oracle = oracle && std::abs(u - static_cast<double>(all.size()) / static_cast<double>(n * m)) < 1e-12;
    bounds = bounds && u >= 1.0 / static_cast<double>(n) - 1e-12 && u <= 1.0 + 1e-12;
  }
  rep.check(oracle, "1000 set systems match the union oracle");
  rep.check(bounds, "U in [1/n, 1]");

  const Model& model = nets.get(false);
  const std::string layer = "fc1", attr = "conv2";
  const std::size_t units = model.stage(layer).shape.at(0);
  std::vector<std::size_t> pick(units);
  std::iota(pick.begin(), pick.end(), 0);
  Rng prng(5);
  for (std::size_t i = units - 1; i > 0; --i) std::swap(pick[i], pick[prng.below(i + 1)]);
  std::vector<std::vector<std::size_t>> act, l1, l2;
  for (std::size_t t = 0; t < 20; ++t) {
    const FeatureRef f = FeatureRef::unit(layer, pick[t], units);
    const auto recs = attribution_records(model, mixed_set().images, f, attr);
    std::vector<double> v;
    for (const auto& r : recs) v.push_back(r.value);
    act.push_back(rank_activations(v, 50).mei.ids());
    l1.push_back(select_top_norm(recs, 50, NormKind::L1).ids());
    l2.push_back(select_top_norm(recs, 50, NormKind::L2).ids());
  }
  const double ua = uniqueness(act), u1 = uniqueness(l1), u2 = uniqueness(l2);
  rep.check(ua > u2, "U(activation) " + fmt("%.3f", ua) + " > U(L2) " + fmt("%.3f", u2));
  rep.note(std::string("U(L1) ") + fmt("%.3f", u1) + (u1 > u2 ? " > " : " <= ") + "U(L2), reported only");
  return rep.done();
}

// 9. Atlas structure and tense regions.
Outcome atlas_structure(Convnets& nets) {
  Report rep;
  const Model& model = nets.get(false);
  const Tensor& images = mixed_set().images;
  const std::string attr = "conv2";
  AtlasBuildConfig bc;
  bc.count = 2000;
  bc.grid = 8;
  bc.embed.seed = 9;

  // Candidate features: fc1 units whose incoming weights take both signs.
  const Tensor& w = model.params.at("fc1.weight");
  const std::size_t units = w.dim(0), fan = w.dim(1);
  std::vector<std::size_t> mixed;
  for (std::size_t u = 0; u < units; ++u) {
    bool pos = false, neg = false;
    for (std::size_t j = 0; j < fan; ++j) {
      pos = pos || w[u * fan + j] > 0;
      neg = neg || w[u * fan + j] < 0;
    }
    if (pos && neg) mixed.push_back(u);
  }
  rep.check(!mixed.empty(), std::to_string(mixed.size()) + " mixed-sign fc1 units");
  if (mixed.empty()) return rep.done();

  const FeatureRef f0 = FeatureRef::unit("fc1", mixed.front(), units);
  const auto recs = attribution_records(model, images, f0, attr);
  const AtlasLayout a = build_atlas_layout(recs, bc);
  const AtlasLayout b = build_atlas_layout(recs, bc);

  // Partition: every selected id lands in exactly one cell, the one its coordinates name.
  std::vector<std::size_t> seen(a.ids.size(), 0);
  bool placed = true;
  for (std::size_t c = 0; c < a.cells.size(); ++c)
    for (std::size_t m : a.cells[c].members) {
      ++seen[m];
      const auto& p = a.coords[m];
      placed = placed && c == grid_index(p[1], a.n) * a.n + grid_index(p[0], a.n) && a.cell_of[m] == c;
    }
  const bool partition = std::all_of(seen.begin(), seen.end(), [](std::size_t k) { return k == 1; });
  rep.check(a.ids.size() == 2000 && partition && placed,
            std::to_string(a.ids.size()) + " ids partitioned over " + std::to_string(a.non_empty()) + " cells");

  // Cell means against a direct average of the member attribution vectors.
  std::map<std::size_t, std::size_t> row_of;
  for (std::size_t i = 0; i < recs.size(); ++i) row_of[recs[i].input_id] = i;
  double err = 0;
  for (const auto& cell : a.cells) {
    if (cell.members.empty()) continue;
    std::vector<double> mean(cell.mean.size(), 0.0);
    for (std::size_t m : cell.members) {
      const auto S = recs[row_of.at(a.ids[m])].S.data();
      for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += S[j];
    }
    for (std::size_t j = 0; j < mean.size(); ++j)
      err = std::max(err, std::abs(mean[j] / static_cast<double>(cell.members.size()) - cell.mean[j]));
  }
  rep.check(err < 1e-6, "cell means max error " + fmt("%.1e", err));
  rep.check(a.coords == b.coords && a.cell_of == b.cell_of, "layout deterministic per seed");

  std::size_t tried = 0;
  std::optional<std::size_t> found;
  for (std::size_t u : mixed) {
    if (tried == 8) break;
    ++tried;
    const FeatureRef f = FeatureRef::unit("fc1", u, units);
    const AtlasLayout L = u == mixed.front() ? a : build_atlas_layout(attribution_records(model, images, f, attr), bc);
    if (!tense_cells(L).empty()) {
      found = u;
      rep.note("fc1:" + std::to_string(u) + " has " + std::to_string(tense_cells(L).size()) + " tense cells");
      break;
    }
  }
  rep.check(found.has_value(), "tense region found among " + std::to_string(tried) + " features");
  return rep.done();
}

std::vector<std::uint8_t> ppm_pixels(const std::vector<std::uint8_t>& ppm, std::size_t* w, std::size_t* h) {
  std::string head(ppm.begin(), ppm.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(ppm.size(), 32)));
  std::istringstream in(head);
  std::string magic;
  int maxval = 0;
  in >> magic >> *w >> *h >> maxval;
  if (magic != "P6" || maxval != 255) return {};
  const auto off = static_cast<std::ptrdiff_t>(in.tellg()) + 1;
  return {ppm.begin() + off, ppm.end()};
}

// 10. File formats.
Outcome io_exactness(Convnets& nets) {
  Report rep;
  Rng rng(1010);
  const fs::path dir = nets.paths.cache / "io";
  fs::create_directories(dir);
  std::size_t tensor_ok = 0, ckpt_ok = 0;
  for (int t = 0; t < 200; ++t) {
    Shape s(rng.below(5));
    for (auto& d : s) d = rng.below(7);
    Tensor x(s);
    for (auto& v : x.data()) v = static_cast<float>(rng.normal() * std::pow(10.0, rng.uniform(-30, 30)));
    write_tensor(dir / "t.tnsr", x);
    const Tensor y = read_tensor(dir / "t.tnsr");
    tensor_ok += y.shape() == x.shape() &&
                 std::memcmp(x.data().data(), y.data().data(), 4 * x.size()) == 0;

    bool bn = false;
    Model m = build_model(random_spec(rng, &bn), rng.below(1u << 30));
    testing::randomize_biases(m, rng);
    m.metadata["trial"] = std::to_string(t);
    const fs::path cdir = dir / "ckpt";
    fs::remove_all(cdir);
    save_checkpoint(m, cdir);
    const Model back = load_checkpoint(cdir);
    bool same = back.seed == m.seed && back.metadata == m.metadata &&
                spec_to_json(back.spec) == spec_to_json(m.spec) && back.params.size() == m.params.size();
    for (const auto& [name, p] : m.params) {
      const auto it = back.params.find(name);
      same = same && it != back.params.end() && it->second.shape() == p.shape() &&
             std::memcmp(it->second.data().data(), p.data().data(), 4 * p.size()) == 0;
    }
    ckpt_ok += same;
  }
  rep.check(tensor_ok == 200, std::to_string(tensor_ok) + "/200 tensor files bit-identical");
  rep.check(ckpt_ok == 200, std::to_string(ckpt_ok) + "/200 checkpoints bit-identical");

  std::size_t ppm_ok = 0, png_ok = 0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t c = t % 2 ? 4 : 3, h = 1 + rng.below(40), w = 1 + rng.below(40);
    Tensor img(Shape{c, h, w});
    for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
    const auto png = testing::decode_png(encode_png(img));
    bool ok = png.width == w && png.height == h;
    for (std::size_t k = 0; ok && k < h * w; ++k)
      for (std::size_t ch = 0; ch < 4; ++ch) {
        const std::uint8_t expect = ch < c ? testing::to_byte(img[ch * h * w + k]) : 255;
        ok = ok && png.rgba[k * 4 + ch] == expect;
      }
    png_ok += ok;
    if (c == 3) {
      std::size_t pw = 0, ph = 0;
      const auto px = ppm_pixels(encode_ppm(img), &pw, &ph);
      bool pok = pw == w && ph == h && px.size() == 3 * h * w;
      for (std::size_t k = 0; pok && k < h * w; ++k)
        for (std::size_t ch = 0; ch < 3; ++ch) pok = pok && px[k * 3 + ch] == testing::to_byte(img[ch * h * w + k]);
      ppm_ok += pok;
    }
  }
  rep.check(png_ok == 20, std::to_string(png_ok) + "/20 PNGs decode to source pixels");
  rep.check(ppm_ok == 10, std::to_string(ppm_ok) + "/10 PPMs decode to source pixels");

  std::size_t svg_ok = 0, svgs = 0;
  auto svg = [&](const std::string& text) {
    ++svgs;
    svg_ok += testing::parse_xml(text).ok;
  };
  std::vector<ScatterPoint> pts;
  for (int i = 0; i < 300; ++i) pts.push_back({rng.uniform(0, 5), rng.uniform(0, 5), rng.normal()});
  ScatterOptions so;
  so.title = "E+ vs E- <&>";
  so.contours = {-1, 0, 1};
  svg(svg_scatter(pts, so));
  svg(svg_matrix({{1, -0.5}, {0.25, 0}}, {"e_1", "-e_1 & co"}, {"f<1>", "f2"}, "matrix"));
  std::vector<AttributionRecord> recs;
  for (std::size_t i = 0; i < 50; ++i) {
    AttributionRecord r;
    r.input_id = i;
    r.value = rng.normal();
    r.S = testing::random_tensor({8}, rng);
    energy_split(r);
    recs.push_back(r);
  }
  svg(render_scatter(export_scatter(recs), "scatter \"quoted\""));
  rep.check(svg_ok == svgs, std::to_string(svg_ok) + "/" + std::to_string(svgs) + " SVGs parse");
  fs::remove_all(dir);
  return rep.done();
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  Outcome (*run)(Convnets&);
};

const Criterion kCriteria[] = {
    {1, "exact completeness", 10, exact_completeness},
    {2, "completeness correlation", 300, completeness_correlation},
    {3, "toy abs superposition", 900, toy_abs},
    {4, "toy xor", 900, toy_xor},
    {5, "gradient correctness", 30, gradient_correctness},
    {6, "inversion sanity", 600, inversion_sanity},
    {7, "objective properties", 120, objective_properties},
    {8, "uniqueness", 300, uniqueness_gap},
    {9, "atlas structure", 600, atlas_structure},
    {10, "io bit-exactness", 30, io_exactness},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::vector<int> only;
  Paths paths{"acceptance_cache", TENSE_CONFIG_DIR};
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--cache", paths.cache, "directory for trained convnets")->capture_default_str();
  app.add_option("--configs", paths.configs, "directory with convnet.json and convnet_bn.json")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  Convnets nets{paths};
  int failed = 0;
  for (const Criterion& c : kCriteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const double trained_before = nets.train_seconds;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(nets);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    // Shared convnet training is charged to whichever criterion triggers it.
    const double training = nets.train_seconds - trained_before;
    const double secs = seconds_since(t0);
    const bool in_budget = secs < c.budget_seconds;
    o.pass = o.pass && in_budget;
    std::ostringstream time;
    time << fmt("%.1f", secs) << " s of " << c.budget_seconds << " s";
    if (training > 0) time << ", including " << fmt("%.1f", training) << " s convnet training";
    std::cout << "criterion " << c.id << " (" << c.name << "): " << (o.pass ? "PASS" : "FAIL") << " | "
              << o.detail << " | " << (in_budget ? "" : "FAILED ") << time.str() << std::endl;
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
