#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "tense/atlas.hpp"
#include "tense/checkpoint.hpp"
#include "tense/error.hpp"
#include "tense/inversion.hpp"
#include "tense/io.hpp"
#include "tense/selection.hpp"
#include "tense/stats.hpp"
#include "tense/synth.hpp"
#include "tense/training.hpp"
#include "tense_cli/cli.hpp"

namespace tense::cli {

using nlohmann::json;

namespace {

CLI::Option* required(CLI::Option* opt) { return opt->group("Required"); }

void add_out(CLI::App& app, std::string& out) {
  required(app.add_option("--out", out, "output directory"));
}

void write_json(RunContext& ctx, const std::string& name, const json& j) {
  write_text(ctx.output(name), j.dump(2) + "\n");
}

Model load_model(RunContext& ctx, const std::string& path) {
  ctx.input("ckpt", path);
  return load_checkpoint(path);
}

SynthImageSet load_data(RunContext& ctx, const std::string& path) {
  ctx.input("data", path);
  return load_image_set(path);
}

/// "layer:index[:pre|post]"; an empty string picks unit 0 of the last stage.
FeatureRef parse_feature(const Model& model, const std::string& text) {
  if (text.empty()) {
    const auto& st = model.stages.back();
    return FeatureRef::unit(st.name, 0, st.shape.at(0));
  }
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.size() < 2 || parts.size() > 3)
    throw ConfigError("feature", "expected layer:index[:pre|post], got '" + text + "'");
  std::size_t index = 0;
  try {
    index = std::stoul(parts[1]);
  } catch (const std::exception&) {
    throw ConfigError("feature", "unit index '" + parts[1] + "' is not a number");
  }
  ReadPoint point = ReadPoint::Pre;
  if (parts.size() == 3) {
    if (parts[2] == "post") point = ReadPoint::Post;
    else if (parts[2] != "pre") throw ConfigError("feature", "read point must be pre or post");
  }
  const auto it = std::find_if(model.stages.begin(), model.stages.end(),
                               [&](const StageInfo& st) { return st.name == parts[0]; });
  if (it == model.stages.end()) throw ConfigError("feature", "no layer named '" + parts[0] + "'");
  if (index >= it->shape.at(0))
    throw ConfigError("feature", "unit " + parts[1] + " outside the " +
                                     std::to_string(it->shape.at(0)) + " units of '" + parts[0] + "'");
  return FeatureRef::unit(parts[0], index, it->shape.at(0), point);
}

std::string resolve_layer(const Model& model, const FeatureRef& f, const std::string& layer) {
  const auto eligible = attribution_layers(model, f);
  if (eligible.empty()) throw InvalidArgument("no attribution layer upstream of '" + f.layer + "'");
  if (layer.empty()) return eligible.back();
  if (std::find(eligible.begin(), eligible.end(), layer) == eligible.end())
    throw ConfigError("layer", "'" + layer + "' is not upstream of '" + f.layer + "'");
  return layer;
}

ImageFormat parse_format(const std::string& s) {
  if (s == "png") return ImageFormat::Png;
  if (s == "ppm") return ImageFormat::Ppm;
  throw ConfigError("format", "expected png or ppm");
}

std::string ext(ImageFormat f) { return f == ImageFormat::Png ? ".png" : ".ppm"; }

/// Tiles images [N, 3, H, W] (rows `ids`) into a grid with 1-pixel white gaps.
Tensor image_grid(const Tensor& images, std::span<const std::size_t> ids, std::size_t cols) {
  const std::size_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
  cols = std::max<std::size_t>(1, std::min(cols, ids.size()));
  const std::size_t rows = std::max<std::size_t>(1, (ids.size() + cols - 1) / cols);
  const std::size_t H = rows * (h + 1) + 1, W = cols * (w + 1) + 1;
  Tensor g(Shape{c, H, W}, 1.0f);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const std::size_t r0 = (k / cols) * (h + 1) + 1, c0 = (k % cols) * (w + 1) + 1;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          g[(ch * H + r0 + y) * W + c0 + x] = images[((ids[k] * c + ch) * h + y) * w + x];
  }
  return g;
}

json selection_json(const SelectionResult& s, std::span<const AttributionRecord> records) {
  json j = s.to_json();
  json items = json::array();
  for (const auto& r : s.ranked) {
    const auto& rec = records[r.id];
    items.push_back({{"id", rec.input_id},
                     {"score", r.score},
                     {"value", rec.value},
                     {"E_plus", rec.E_plus},
                     {"E_minus", rec.E_minus}});
  }
  j["items"] = items;
  return j;
}

// ---------------------------------------------------------------- train-toy
Runner setup_train_toy(CLI::App& app) {
  struct Opts {
    std::string task = "abs", out;
    std::size_t hidden = 12, seeds = 50, iterations = 20000, batch = 600, log_every = 1000;
    double lr = 1e-3, range_lo = -1, range_hi = 1;
    std::optional<double> sparsity;
    std::uint64_t base_seed = 0;
  };
  auto o = std::make_shared<Opts>();
  app.add_option("--task", o->task, "abs or xor")->check(CLI::IsMember({"abs", "xor"}))->capture_default_str();
  app.add_option("--hidden", o->hidden, "hidden width m")->capture_default_str();
  app.add_option("--seeds", o->seeds, "independent seeds; the lowest final loss wins")->capture_default_str();
  app.add_option("--base-seed", o->base_seed, "first seed")->capture_default_str();
  app.add_option("--iterations", o->iterations)->capture_default_str();
  app.add_option("--batch", o->batch)->capture_default_str();
  app.add_option("--lr", o->lr, "Adam learning rate")->capture_default_str();
  app.add_option("--sparsity", o->sparsity, "probability a feature is off (default 0.99 abs, 0.95 xor)");
  app.add_option("--range-lo", o->range_lo, "abs input range")->capture_default_str();
  app.add_option("--range-hi", o->range_hi)->capture_default_str();
  app.add_option("--log-every", o->log_every)->capture_default_str();
  add_out(app, o->out);
  return [o](RunContext& ctx) {
    ctx.out = o->out;
    ToyTask task = parse_toy_kind(o->task) == ToyKind::Abs ? ToyTask::abs() : ToyTask::xor_task();
    if (o->sparsity) task.sparsity = *o->sparsity;
    task.range_lo = o->range_lo;
    task.range_hi = o->range_hi;
    TrainConfig cfg;
    cfg.seeds = o->seeds;
    cfg.base_seed = o->base_seed;
    cfg.iterations = o->iterations;
    cfg.batch = o->batch;
    cfg.adam.lr = o->lr;
    cfg.log_every = o->log_every;
    const ToyTrainResult r = train_toy(task, o->hidden, cfg);
    for (const auto& s : r.seeds) ctx.seeds.push_back(s.seed);
    save_checkpoint(r.best, o->out);
    ctx.outputs.push_back((ctx.out / "manifest.json").string());

    std::ofstream log(ctx.output("seeds.jsonl"));
    for (const auto& s : r.seeds) {
      for (const auto& rec : s.log)
        log << json{{"seed", rec.seed}, {"iteration", rec.iteration}, {"loss", rec.loss}}.dump() << "\n";
      log << json{{"seed", s.seed},
                  {"final_loss", s.finite ? json(s.final_loss) : json(nullptr)},
                  {"finite", s.finite}}
                 .dump()
          << "\n";
    }
    const ExhaustiveEval ex = eval_exhaustive(r.best, task);
    json buckets = json::object();
    for (const auto& [k, v] : ex.bucket_mean()) buckets[std::to_string(k)] = v;
    write_json(ctx, "train_summary.json",
               {{"task", o->task},
                {"hidden", o->hidden},
                {"best_seed", r.best_seed},
                {"best_loss", r.best_loss},
                {"discarded", r.discarded},
                {"exhaustive", {{"mean", ex.mean}, {"max", ex.max}, {"bucket_mean", buckets}}}});
  };
}

// ---------------------------------------------------------------- eval-toy
Runner setup_eval_toy(CLI::App& app) {
  struct Opts {
    std::string ckpt, out;
  };
  auto o = std::make_shared<Opts>();
  required(app.add_option("--ckpt", o->ckpt, "toy checkpoint directory"));
  add_out(app, o->out);
  return [o](RunContext& ctx) {
    ctx.out = o->out;
    const Model model = load_model(ctx, o->ckpt);
    const ToyTask task = toy_task_from_metadata(model);
    const ExhaustiveEval ex = eval_exhaustive(model, task);
    json buckets = json::object();
    for (const auto& [k, losses] : ex.buckets) {
      std::vector<double> v = losses;
      buckets[std::to_string(k)] = {{"count", v.size()},
                                    {"mean", mean(v)},
                                    {"min", *std::min_element(v.begin(), v.end())},
                                    {"median", percentile(v, 50)},
                                    {"max", *std::max_element(v.begin(), v.end())}};
    }
    write_json(ctx, "exhaustive.json",
               {{"task", to_string(task.kind)},
                {"inputs", ex.losses.size()},
                {"mean", ex.mean},
                {"max", ex.max},
                {"buckets", buckets},
                {"losses", ex.losses}});
  };
}

// ---------------------------------------------------------------- attr-matrix
Runner setup_attr_matrix(CLI::App& app) {
  struct Opts {
    std::string ckpt, out;
  };
  auto o = std::make_shared<Opts>();
  required(app.add_option("--ckpt", o->ckpt, "toy checkpoint directory"));
  add_out(app, o->out);
  return [o](RunContext& ctx) {
    ctx.out = o->out;
    const Model model = load_model(ctx, o->ckpt);
    const ToyTask task = toy_task_from_metadata(model);
    const AttributionMatrix m = attribution_matrix(model, task);
    const auto scale = column_scale(m);
    const std::size_t P = m.probes.size(), F = m.features.size();
    std::vector<std::vector<double>> net(P, std::vector<double>(F)), plus = net, minus = net;
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t f = 0; f < F; ++f) {
        const double s = scale[f] > 0 ? scale[f] : 1.0;
        net[p][f] = (m.E_plus[p][f] - m.E_minus[p][f]) / s;
        plus[p][f] = m.E_plus[p][f] / s;
        minus[p][f] = -m.E_minus[p][f] / s;
      }
    write_json(ctx, "attr_matrix.json",
               {{"task", to_string(task.kind)},
                {"probes", m.probes},
                {"features", m.features},
                {"E_plus", m.E_plus},
                {"E_minus", m.E_minus},
                {"values", m.values},
                {"outputs", m.outputs},
                {"column_scale", scale},
                {"normalization", "each column divided by its largest max(E+, E-)"}});
    write_text(ctx.output("attr_matrix.svg"),
               svg_matrix(net, m.probes, m.features, "E+ - E- (column-normalized)"));
    write_text(ctx.output("attr_matrix_plus.svg"),
               svg_matrix(plus, m.probes, m.features, "E+ (column-normalized)"));
    write_text(ctx.output("attr_matrix_minus.svg"),
               svg_matrix(minus, m.probes, m.features, "E- (column-normalized, negated)"));
  };
}

// ---------------------------------------------------------------- gen-images
Runner setup_gen_images(CLI::App& app) {
  struct Opts {
    std::string kind = "curves", out;
    std::size_t count = 20000, size = 32;
    std::uint64_t seed = 0;
  };
  auto o = std::make_shared<Opts>();
  app.add_option("--kind", o->kind, "curves, patches or mixed")
      ->check(CLI::IsMember({"curves", "patches", "mixed"}))
      ->capture_default_str();
  app.add_option("--count", o->count)->capture_default_str();
  app.add_option("--size", o->size, "image side in pixels")->capture_default_str();
  app.add_option("--seed", o->seed)->capture_default_str();
  add_out(app, o->out);
  return [o](RunContext& ctx) {
    ctx.out = o->out;
    ctx.seeds.push_back(o->seed);
    SynthParams params;
    params.size = o->size;
    const SynthImageSet set = gen_synthetic_images(o->count, parse_synth_kind(o->kind), o->seed, params);
    save_image_set(set, o->out);
    ctx.outputs.push_back((ctx.out / "images.tnsr").string());
    ctx.outputs.push_back((ctx.out / "labels.json").string());
    std::vector<std::size_t> ids(std::min<std::size_t>(64, o->count));
    std::iota(ids.begin(), ids.end(), 0);
    if (!ids.empty()) write_image(ctx.output("preview.png"), image_grid(set.images, ids, 8), ImageFormat::Png);
  };
}

// ---------------------------------------------------------------- train-convnet
Runner setup_train_convnet(CLI::App& app) {
  struct Opts {
    std::string spec, data, data_kind = "curves", out;
    std::size_t count = 20000, epochs = 6, batch = 64;
    std::uint64_t data_seed = 1, seed = 0;
    double lr = 2e-3, holdout = 0.1;
  };
  auto o = std::make_shared<Opts>();
  required(app.add_option("--spec", o->spec, "model spec JSON (see configs/)"));
  app.add_option("--data", o->data, "image set directory; generated when omitted");
  app.add_option("--count", o->count, "images to generate without --data")->capture_default_str();
  app.add_option("--data-kind", o->data_kind)->check(CLI::IsMember({"curves", "patches", "mixed"}))->capture_default_str();
  app.add_option("--data-seed", o->data_seed)->capture_default_str();
  app.add_option("--epochs", o->epochs)->capture_default_str();
  app.add_option("--batch", o->batch)->capture_default_str();
  app.add_option("--lr", o->lr)->capture_default_str();
  app.add_option("--holdout", o->holdout, "held-out fraction")->capture_default_str();
  app.add_option("--seed", o->seed)->capture_default_str();
  add_out(app, o->out);
  return [o](RunContext& ctx) {
    ctx.out = o->out;
    ctx.input("spec", o->spec);
    json js;
    {
      std::ifstream in(o->spec);
      if (!in) throw ConfigError("spec", "cannot open " + o->spec);
      try {
        js = json::parse(in);
      } catch (const json::exception& e) {
        throw ConfigError("spec", std::string("not valid JSON: ") + e.what());
      }
    }
    ModelSpec spec;
    try {
      spec = spec_from_json(js);
    } catch (const FormatError& e) {
      throw ConfigError("spec." + e.field(), e.what());
    }
    SynthImageSet data;
    if (o->data.empty()) {
      data = gen_synthetic_images(o->count, parse_synth_kind(o->data_kind), o->data_seed);
      ctx.seeds.push_back(o->data_seed);
    } else {
      data = load_data(ctx, o->data);
    }
    ConvnetConfig cfg;
    cfg.epochs = o->epochs;
    cfg.batch = o->batch;
    cfg.adam.lr = o->lr;
    cfg.seed = o->seed;
    cfg.holdout = o->holdout;
    ctx.seeds.push_back(o->seed);
    const ConvnetResult r = train_convnet(data.images, data.labels, spec, cfg);
    save_checkpoint(r.model, o->out);
    ctx.outputs.push_back((ctx.out / "manifest.json").string());
    std::ofstream log(ctx.output("training_log.jsonl"));
    for (const auto& e : r.log)
      log << json{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"holdout_accuracy", e.holdout_accuracy}}
                 .dump()
          << "\n";
    write_json(ctx, "confusion.json",
               {{"holdout_accuracy", r.holdout_accuracy},
                {"confusion", r.confusion},
                {"mean_logits", r.mean_logits}});
  };
}

// ---------------------------------------------------------------- completeness
Runner setup_completeness(CLI::App& app) {
  struct Opts {
    std::string ckpt, data, out;
    std::vector<std::string> features, layers;
    std::size_t limit = 0;
  };
  auto o = std::make_shared<Opts>();
  required(app.add_option("--ckpt", o->ckpt));
  required(app.add_option("--data", o->data, "image set directory"));
  app.add_option("--features", o->features, "layer:index[:pre|post] (default: every unit of the last stage)")
      ->delimiter(',');
  app.add_option("--layers", o->layers, "attribution layers (default: input and every post-ReLU layer)")
      ->delimiter(',');
  app.add_option("--limit", o->limit, "use only the first N images (0 = all)")->capture_default_str();
  add_out(app, o->out);
  return [o](RunContext& ctx) {
    ctx.out = o->out;
    const Model model = load_model(ctx, o->ckpt);
    SynthImageSet data = load_data(ctx, o->data);
    Tensor images = data.images;
    if (o->limit > 0 && o->limit < images.dim(0)) {
      std::vector<std::size_t> ids(o->limit);
      std::iota(ids.begin(), ids.end(), 0);
      images = gather_rows(images, ids);
    }
    std::vector<FeatureRef> feats;
    if (o->features.empty()) {
      const auto& st = model.stages.back();
      for (std::size_t k = 0; k < st.shape.at(0); ++k) feats.push_back(FeatureRef::unit(st.name, k, st.shape[0]));
    } else {
      for (const auto& f : o->features) feats.push_back(parse_feature(model, f));
    }
    const CompletenessReport rep = completeness_report(model, feats, images, o->layers);
    json layers = json::array();
    for (const auto& L : rep.layers) {
      json per = json::array();
      for (const auto& f : L.features)
        per.push_back({{"pearson", f.pearson ? json(*f.pearson) : json(nullptr)},
                       {"spearman", f.spearman ? json(*f.spearman) : json(nullptr)},
                       {"l1", f.l1},
                       {"value_scale", f.value_scale}});
      layers.push_back({{"layer", L.layer},
                        {"depth", L.depth},
                        {"pearson_mean", L.pearson_mean},
                        {"pearson_sd", L.pearson_sd},
                        {"spearman_mean", L.spearman_mean},
                        {"spearman_sd", L.spearman_sd},
                        {"l1_mean", L.l1_mean},
                        {"undefined", L.undefined},
                        {"features", per}});
    }
    json names = json::array();
    for (const auto& f : feats) names.push_back(f.layer);
    write_json(ctx, "completeness.json", {{"images", images.dim(0)}, {"feature_layers", names}, {"layers", layers}});
  };
}

struct FeatureOpts {
  std::string ckpt, data, feature, layer, out;
};

void add_feature_opts(CLI::App& app, FeatureOpts& o) {
  required(app.add_option("--ckpt", o.ckpt));
  required(app.add_option("--data", o.data, "image set directory"));
  app.add_option("--feature", o.feature, "layer:index[:pre|post] (default: unit 0 of the last stage)");
  app.add_option("--layer", o.layer, "attribution layer (default: deepest eligible)");
  add_out(app, o.out);
}

// ---------------------------------------------------------------- attr
Runner setup_attr(CLI::App& app) {
  struct Opts : FeatureOpts {
    std::vector<std::size_t> ids;
    std::size_t overlays = 16;
  };
  auto o = std::make_shared<Opts>();
  add_feature_opts(app, *o);
  app.add_option("--ids", o->ids, "image ids (default: all)")->delimiter(',');
  app.add_option("--overlays", o->overlays, "phi+/phi- overlays written for the first N ids")->capture_default_str();
  return [o](RunContext& ctx) {
    ctx.out = o->out;
    const Model model = load_model(ctx, o->ckpt);
    const SynthImageSet data = load_data(ctx, o->data);
    const FeatureRef f = parse_feature(model, o->feature);
    const std::string layer = resolve_layer(model, f, o->layer);
    std::vector<std::size_t> ids = o->ids;
    if (ids.empty()) {
      ids.resize(data.images.dim(0));
      std::iota(ids.begin(), ids.end(), 0);
    }
    for (std::size_t id : ids)
      if (id >= data.images.dim(0)) throw ConfigError("ids", "image id " + std::to_string(id) + " out of range");
    const Tensor x = gather_rows(data.images, ids);
    const bool spatial = model.stage(layer == std::string(kInputLayer) ? model.stages.front().name : layer)
                             .shape.size() == 3 ||
                         layer == std::string(kInputLayer);
    auto recs = attribution_records(model, x, f, layer, spatial);
    json items = json::array();
    for (std::size_t i = 0; i < recs.size(); ++i) {
      recs[i].input_id = ids[i];
      items.push_back({{"id", ids[i]},
                       {"value", recs[i].value},
                       {"E", recs[i].E},
                       {"E_plus", recs[i].E_plus},
                       {"E_minus", recs[i].E_minus}});
    }
    write_json(ctx, "records.json", {{"feature", f.layer}, {"layer", layer}, {"records", items}});
    const ScatterExport sc = export_scatter(recs);
    write_json(ctx, "scatter.json", sc.to_json());
    write_text(ctx.output("scatter.svg"), render_scatter(sc, f.layer + " attributions at " + layer));
    if (spatial && o->overlays > 0) {
      const double scale = map_scale(recs);
      const std::size_t h = data.images.dim(2), w = data.images.dim(3);
      for (std::size_t i = 0; i < std::min(o->overlays, recs.size()); ++i) {
        const Tensor rgba = colorize_pm_map(*recs[i].phi_plus, *recs[i].phi_minus, scale, h, w);
        write_image(ctx.output("overlay_" + std::to_string(ids[i]) + ".png"),
                    composite(slice_row(x, i), rgba), ImageFormat::Png);
      }
    }
  };
}

// ---------------------------------------------------------------- select
Runner setup_select(CLI::App& app) {
  struct Opts : FeatureOpts {
    std::string mode = "mti", norm = "l1";
    std::size_t k = 10;
    double band_lo = -0.5, band_hi = 0.0, p_low = 1, p_high = 99;
  };
  auto o = std::make_shared<Opts>();
  add_feature_opts(app, *o);
  app.add_option("--mode", o->mode, "mei, mii, mti, spatial-tense, channel-tense, null-attr, top-norm")
      ->check(CLI::IsMember({"mei", "mii", "mti", "spatial-tense", "channel-tense", "null-attr", "top-norm"}))
      ->capture_default_str();
  app.add_option("--k", o->k, "images to select (0 keeps every tense image)")->capture_default_str();
  app.add_option("--norm", o->norm, "attribution norm: l1 or l2")->check(CLI::IsMember({"l1", "l2"}))->capture_default_str();
  app.add_option("--band-lo", o->band_lo, "MTI band lower edge in sigma units")->capture_default_str();
  app.add_option("--band-hi", o->band_hi, "MTI band upper edge in sigma units")->capture_default_str();
  app.add_option("--p-low", o->p_low, "tense percentile, low side")->capture_default_str();
  app.add_option("--p-high", o->p_high, "tense percentile, high side")->capture_default_str();
  return [o](RunContext& ctx) {
    ctx.out = o->out;
    const Model model = load_model(ctx, o->ckpt);
    const SynthImageSet data = load_data(ctx, o->data);
    const FeatureRef f = parse_feature(model, o->feature);
    const std::string layer = resolve_layer(model, f, o->layer);
    const NormKind norm = o->norm == "l1" ? NormKind::L1 : NormKind::L2;
    const bool maps = o->mode == "spatial-tense" || o->mode == "channel-tense";
    if (o->k == 0 && !maps) throw ConfigError("k", "must be at least 1 for mode " + o->mode);
    const auto recs = attribution_records(model, data.images, f, layer, maps);
    SelectionResult sel;
    if (o->mode == "mei" || o->mode == "mii") {
      std::vector<double> v;
      for (const auto& r : recs) v.push_back(r.value);
      auto rk = rank_activations(v, o->k);
      sel = o->mode == "mei" ? rk.mei : rk.mii;
    } else if (o->mode == "mti") {
      sel = select_mti(recs, o->k, Band{o->band_lo, o->band_hi}, norm);
    } else if (o->mode == "top-norm") {
      sel = select_top_norm(recs, o->k, norm);
    } else if (o->mode == "null-attr") {
      sel = select_null_attr(recs, o->k);
    } else {
      sel = select_tense(recs, o->mode == "spatial-tense" ? TenseMode::Spatial : TenseMode::Channel,
                         Percentiles{o->p_low, o->p_high}, o->k);
    }
    json j = selection_json(sel, recs);
    j["feature"] = f.layer;
    j["layer"] = layer;
    write_json(ctx, "selection.json", j);
    const auto ids = sel.ids();
    if (!ids.empty()) write_image(ctx.output("selection.png"), image_grid(data.images, ids, 8), ImageFormat::Png);
  };
}

struct OptimOpts {
  std::string target, seed_mode = "noise", param = "fourier", format = "png";
  std::size_t steps = 512;
  double lr = 0.05, power = 2.0, crop_min = 0.9, crop_max = 0.99, uniform_noise = 0.02, gaussian = 0.02;
  bool phase_only = false, no_transforms = false;
  std::uint64_t seed = 0;

  OptimConfig config() const {
    OptimConfig c;
    c.steps = steps;
    c.lr = lr;
    c.power = power;
    c.seed_mode = parse_seed_mode(seed_mode);
    c.param = parse_param_kind(param);
    c.phase_only = phase_only;
    c.seed = seed;
    c.transforms.enabled = !no_transforms;
    c.transforms.crop_min = crop_min;
    c.transforms.crop_max = crop_max;
    c.transforms.uniform_noise = uniform_noise;
    c.transforms.gaussian_sigma = gaussian;
    if (!target.empty()) c.target = parse_target_kind(target);
    c.validate();
    return c;
  }
};

void add_optim_opts(CLI::App& app, OptimOpts& o, std::size_t default_steps) {
  o.steps = default_steps;
  app.add_option("--steps", o.steps, "optimization steps")->capture_default_str();
  app.add_option("--lr", o.lr, "Adam learning rate (cosine decay)")->capture_default_str();
  app.add_option("--power", o.power, "cosine power p")->capture_default_str();
  app.add_option("--param", o.param, "pixel or fourier")->check(CLI::IsMember({"pixel", "fourier"}))->capture_default_str();
  app.add_flag("--phase-only", o.phase_only, "fourier phase with a dataset magnitude template");
  app.add_flag("--no-transforms", o.no_transforms, "disable crops and noise");
  app.add_option("--crop-min", o.crop_min)->capture_default_str();
  app.add_option("--crop-max", o.crop_max)->capture_default_str();
  app.add_option("--uniform-noise", o.uniform_noise)->capture_default_str();
  app.add_option("--gaussian-noise", o.gaussian)->capture_default_str();
  app.add_option("--seed", o.seed, "optimization seed")->capture_default_str();
  app.add_option("--format", o.format, "png or ppm")->check(CLI::IsMember({"png", "ppm"}))->capture_default_str();
}

// ---------------------------------------------------------------- invert
Runner setup_invert(CLI::App& app) {
  struct Opts : FeatureOpts, OptimOpts {
    std::optional<std::size_t> id;
    std::size_t sanity = 0;
  };
  auto o = std::make_shared<Opts>();
  add_feature_opts(app, *o);
  add_optim_opts(app, *o, 512);
  o->target = "S_plus";
  app.add_option("--target", o->target, "S_plus, S_minus, S_abs or raw")
      ->check(CLI::IsMember({"S_plus", "S_minus", "S_abs", "raw"}))
      ->capture_default_str();
  app.add_option("--seed-mode", o->seed_mode, "noise (inversion) or image (accentuation)")
      ->check(CLI::IsMember({"noise", "image"}))
      ->capture_default_str();
  app.add_option("--id", o->id, "source image id (default: the top L1 MTI)");
  app.add_option("--sanity", o->sanity, "also trace S+/S- inversions of the top N MTIs")->capture_default_str();
  return [o](RunContext& ctx) {
    ctx.out = o->out;
    const Model model = load_model(ctx, o->ckpt);
    const SynthImageSet data = load_data(ctx, o->data);
    const FeatureRef f = parse_feature(model, o->feature);
    const std::string layer = resolve_layer(model, f, o->layer);
    if (layer == std::string(kInputLayer)) throw ConfigError("layer", "inversion needs a hidden layer");
    const OptimConfig cfg = o->config();
    ctx.seeds.push_back(cfg.seed);
    const auto fmt = parse_format(o->format);

    const auto recs = attribution_records(model, data.images, f, layer);
    std::vector<double> values;
    for (const auto& r : recs) values.push_back(r.value);
    const double sigma = stddev(values);
    std::size_t id = 0;
    if (o->id) {
      id = *o->id;
      if (id >= recs.size()) throw ConfigError("id", "image id out of range");
    } else {
      const auto sel = select_mti(recs, 1);
      if (sel.ranked.empty()) throw InvalidArgument("no image falls in the MTI band; pass --id");
      id = sel.ranked.front().id;
    }
    std::optional<Tensor> magnitude;
    if (cfg.phase_only) magnitude = magnitude_template(data.images);
    const Tensor source = slice_row(data.images, id);
    std::vector<double> activation;
    const OptimResult r = optimize_visualization(
        model, recs[id].S, layer, cfg, cfg.seed_mode == SeedMode::Image ? std::optional<Tensor>(source) : std::nullopt,
        magnitude, [&](std::size_t step, const Tensor& image) {
          if (activation.size() <= step) activation.resize(step + 1);
          activation[step] = feature_value(model, forward_trace(model, image), f);
        });
    write_image(ctx.output("inversion" + ext(fmt)), r.rgba, fmt);
    write_image(ctx.output("source" + ext(fmt)), source, fmt);
    write_json(ctx, "curve.json",
               {{"id", id},
                {"feature", f.layer},
                {"layer", layer},
                {"source_activation", recs[id].value},
                {"sigma", sigma},
                {"objective", r.objective},
                {"activation", activation},
                {"lr_halvings", r.lr_halvings},
                {"mask_flagged", r.mask.flagged},
                {"optim", cfg.to_json()}});
    if (o->sanity > 0) {
      const auto sel = select_mti(recs, o->sanity);
      const auto ids = sel.ids();
      if (ids.empty()) throw InvalidArgument("no image falls in the MTI band for the sanity curves");
      const SanityCurves sc = sanity_curve(model, f, gather_rows(data.images, ids), layer, sigma, cfg);
      json j = sc.to_json();
      j["mti_ids"] = ids;
      write_json(ctx, "sanity.json", j);
    }
  };
}

// ---------------------------------------------------------------- atlas
Runner setup_atlas(CLI::App& app) {
  struct Opts : FeatureOpts, OptimOpts {
    std::size_t count = 2000, grid = 8, neighbors = 15, iterations = 500;
    std::string embed = "neighbor";
    std::uint64_t embed_seed = 0;
  };
  auto o = std::make_shared<Opts>();
  add_feature_opts(app, *o);
  add_optim_opts(app, *o, 128);
  app.add_option("--count", o->count, "images kept by L2 attribution norm")->capture_default_str();
  app.add_option("--grid", o->grid, "grid side n")->capture_default_str();
  app.add_option("--embed", o->embed, "pca or neighbor")->check(CLI::IsMember({"pca", "neighbor"}))->capture_default_str();
  app.add_option("--embed-seed", o->embed_seed)->capture_default_str();
  app.add_option("--neighbors", o->neighbors)->capture_default_str();
  app.add_option("--iterations", o->iterations, "layout iterations")->capture_default_str();
  return [o](RunContext& ctx) {
    ctx.out = o->out;
    const Model model = load_model(ctx, o->ckpt);
    const SynthImageSet data = load_data(ctx, o->data);
    const FeatureRef f = parse_feature(model, o->feature);
    const std::string layer = resolve_layer(model, f, o->layer);
    if (layer == std::string(kInputLayer)) throw ConfigError("layer", "atlas icons need a hidden layer");
    const auto recs = attribution_records(model, data.images, f, layer);
    AtlasBuildConfig bc;
    bc.count = o->count;
    bc.grid = o->grid;
    bc.embed.method = parse_embed_method(o->embed);
    bc.embed.seed = o->embed_seed;
    bc.embed.neighbors = o->neighbors;
    bc.embed.iterations = o->iterations;
    AtlasLayout layout = build_atlas_layout(recs, bc);
    layout.params["feature"] = f.layer;
    AtlasRenderConfig rc;
    rc.optim = o->config();
    ctx.seeds.push_back(o->embed_seed);
    ctx.seeds.push_back(rc.optim.seed);
    const AtlasArtifact art = render_atlas(model, f, layer, std::move(layout), rc);
    const auto fmt = parse_format(o->format);
    write_atlas(art, o->out, fmt);
    ctx.outputs.push_back((ctx.out / "layout.json").string());
    ctx.outputs.push_back((ctx.out / ("atlas" + ext(fmt))).string());
    for (const auto& [index, icon] : art.icons) {
      const auto& c = art.layout.cells[index];
      ctx.outputs.push_back((ctx.out / (c.icon + ext(fmt))).string());
    }
  };
}

// ---------------------------------------------------------------- uniqueness
Runner setup_uniqueness(CLI::App& app) {
  struct Opts {
    std::string ckpt, data, out, features = "units";
    std::vector<std::string> layers{"all"}, select{"act", "l1", "l2"};
    std::size_t k = 20, m = 50, kmeans_k = 128;
    std::uint64_t seed = 0;
  };
  auto o = std::make_shared<Opts>();
  required(app.add_option("--ckpt", o->ckpt));
  required(app.add_option("--data", o->data, "image set directory"));
  app.add_option("--layers", o->layers, "hidden layers or 'all'")->delimiter(',')->capture_default_str();
  app.add_option("--k", o->k, "features per layer")->capture_default_str();
  app.add_option("--m", o->m, "images per feature")->capture_default_str();
  app.add_option("--select", o->select, "act, mti, l1, l2")->delimiter(',')->capture_default_str();
  app.add_option("--features", o->features, "units or kmeans")->check(CLI::IsMember({"units", "kmeans"}))->capture_default_str();
  app.add_option("--kmeans-k", o->kmeans_k, "first-stage clusters for kmeans features")->capture_default_str();
  app.add_option("--seed", o->seed)->capture_default_str();
  add_out(app, o->out);
  return [o](RunContext& ctx) {
    ctx.out = o->out;
    ctx.seeds.push_back(o->seed);
    const Model model = load_model(ctx, o->ckpt);
    const SynthImageSet data = load_data(ctx, o->data);
    for (const auto& s : o->select)
      if (s != "act" && s != "mti" && s != "l1" && s != "l2")
        throw ConfigError("select", "unknown selector '" + s + "' (act, mti, l1, l2)");
    std::vector<std::string> layers;
    if (o->layers.size() == 1 && o->layers.front() == "all") {
      for (const auto& st : model.stages)
        if (st.has_relu) layers.push_back(st.name);
    } else {
      layers = o->layers;
    }
    json table = json::array();
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const std::string& name = layers[li];
      const StageInfo& st = model.stage(name);
      const std::size_t channels = st.shape.at(0);
      std::vector<FeatureRef> feats;
      bool flagged = false;
      if (o->features == "units") {
        std::vector<std::size_t> units(channels);
        std::iota(units.begin(), units.end(), 0);
        Rng rng(derive_seed(o->seed, li));
        for (std::size_t i = channels; i > 1; --i) std::swap(units[i - 1], units[rng.below(i)]);
        flagged = o->k > channels;
        for (std::size_t i = 0; i < std::min(o->k, channels); ++i)
          feats.push_back(FeatureRef::unit(name, units[i], channels));
      } else {
        const KMeansBasis basis = kmeans_features(model, name, data.images, o->kmeans_k, derive_seed(o->seed, li));
        for (auto& d : kmeans_two_stage(basis, o->k, derive_seed(o->seed, 100 + li))) {
          FeatureRef f;
          f.layer = name;
          f.direction = std::move(d);
          feats.push_back(std::move(f));
        }
      }
      std::string attr_layer;
      {
        const auto eligible = attribution_layers(model, feats.front());
        attr_layer = eligible.back();
      }
      std::map<std::string, std::vector<std::vector<std::size_t>>> sets;
      for (const auto& f : feats) {
        const auto recs = attribution_records(model, data.images, f, attr_layer);
        for (const auto& s : o->select) {
          SelectionResult sel;
          if (s == "act") {
            std::vector<double> v;
            for (const auto& r : recs) v.push_back(r.value);
            sel = rank_activations(v, o->m).mei;
          } else if (s == "mti") {
            sel = select_mti(recs, o->m);
          } else {
            sel = select_top_norm(recs, o->m, s == "l1" ? NormKind::L1 : NormKind::L2);
          }
          sets[s].push_back(sel.ids());
        }
      }
      json U = json::object();
      for (const auto& [s, v] : sets) {
        bool equal = std::all_of(v.begin(), v.end(), [&](const auto& x) { return x.size() == o->m; });
        U[s] = equal ? json(uniqueness(v)) : json(nullptr);
      }
      table.push_back({{"layer", name},
                       {"attribution_layer", attr_layer},
                       {"features", feats.size()},
                       {"features_flagged", flagged},
                       {"U", U}});
    }
    write_json(ctx, "uniqueness.json",
               {{"k", o->k}, {"m", o->m}, {"feature_kind", o->features}, {"layers", table}});
  };
}

// ---------------------------------------------------------------- weight-stats
Runner setup_weight_stats(CLI::App& app) {
  struct Opts {
    std::string ckpt, out;
  };
  auto o = std::make_shared<Opts>();
  required(app.add_option("--ckpt", o->ckpt));
  add_out(app, o->out);
  return [o](RunContext& ctx) {
    ctx.out = o->out;
    const Model model = load_model(ctx, o->ckpt);
    const WeightStats ws = weight_stats(model);
    json layers = json::array();
    for (const auto& L : ws.layers)
      layers.push_back({{"layer", L.layer},
                        {"count", L.count},
                        {"negative_fraction", L.negative_fraction},
                        {"histogram", L.histogram},
                        {"out_of_range", L.out_of_range},
                        {"zero_variance", L.zero_variance}});
    write_json(ctx, "weight_stats.json",
               {{"bins", WeightStats::kBins},
                {"range", {-WeightStats::kRange, WeightStats::kRange}},
                {"layers", layers},
                {"pooled_histogram", ws.pooled_histogram},
                {"pooled_negative_fraction", ws.pooled_negative_fraction}});
  };
}

}  // namespace

const std::vector<Command>& commands() {
  static const std::vector<Command> list{
      {"train-toy", "train abs/xor toy models over many seeds and keep the best", setup_train_toy},
      {"eval-toy", "exhaustive loss of a toy model, bucketed by active features", setup_eval_toy},
      {"attr-matrix", "E+/E- attribution matrix of a toy model for one-hot probes", setup_attr_matrix},
      {"gen-images", "generate a synthetic curve/patch image set", setup_gen_images},
      {"train-convnet", "train the synthetic-image classifier from a spec file", setup_train_convnet},
      {"completeness", "correlation between feature values and summed attributions", setup_completeness},
      {"attr", "attribution records, E+/E- scatter and phi overlays", setup_attr},
      {"select", "MEI/MII/MTI, tense and null-attribution image selection", setup_select},
      {"invert", "attribution inversion or accentuation of one image", setup_invert},
      {"atlas", "attribution atlas: select, embed, grid-average and render icons", setup_atlas},
      {"uniqueness", "uniqueness of activation vs attribution selections per layer", setup_uniqueness},
      {"weight-stats", "standardized weight histograms and negative fractions", setup_weight_stats},
  };
  return list;
}

}  // namespace tense::cli
