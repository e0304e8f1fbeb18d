#include "tense/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "tense/io.hpp"
#include "tense/random.hpp"

namespace tense {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

double wrap_deg(double a) {
  a = std::fmod(a, 360.0);
  return a < 0 ? a + 360.0 : a;
}

/// Distance from p to the arc of `g`.
double arc_distance(const ArcGeometry& g, double px, double py) {
  const double dx = px - g.center_x, dy = py - g.center_y;
  // y grows downward, so the visual angle uses -dy.
  const double ang = std::atan2(-dy, dx) / kDeg;
  double delta = wrap_deg(ang - g.orientation);
  if (delta > 180) delta -= 360;
  if (std::abs(delta) <= g.span / 2) return std::abs(std::hypot(dx, dy) - g.radius);
  double best = 1e30;
  for (double s : {-1.0, 1.0}) {
    const double a = (g.orientation + s * g.span / 2) * kDeg;
    const double ex = g.center_x + g.radius * std::cos(a);
    const double ey = g.center_y - g.radius * std::sin(a);
    best = std::min(best, std::hypot(px - ex, py - ey));
  }
  return best;
}

ArcGeometry make_arc(double orientation, double radius, double span, double width, double mx,
                     double my) {
  ArcGeometry g;
  g.orientation = wrap_deg(orientation);
  g.tangent = wrap_deg(orientation + 90);
  g.radius = radius;
  g.span = span;
  g.width = width;
  g.mid_x = mx;
  g.mid_y = my;
  const double a = g.orientation * kDeg;
  g.center_x = mx - radius * std::cos(a);
  g.center_y = my + radius * std::sin(a);
  return g;
}

void pick_colors(Rng& rng, const SynthParams& p, float* bg, float* fg) {
  for (;;) {
    double lb = 0, lf = 0;
    for (int c = 0; c < 3; ++c) {
      bg[c] = static_cast<float>(rng.uniform());
      fg[c] = static_cast<float>(rng.uniform());
      lb += bg[c];
      lf += fg[c];
    }
    if (std::abs(lb - lf) / 3 >= p.min_contrast) return;
  }
}

void draw_arcs(float* img, std::size_t size, const std::vector<ArcGeometry>& arcs, const float* bg,
               const float* fg, double noise, Rng& rng) {
  const std::size_t hw = size * size;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double cover = 0;
      for (const auto& g : arcs) {
        const double d = arc_distance(g, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
        cover = std::max(cover, std::clamp(g.width / 2 + 0.5 - d, 0.0, 1.0));
      }
      for (std::size_t c = 0; c < 3; ++c) {
        double v = bg[c] * (1 - cover) + fg[c] * cover;
        if (noise > 0) v += rng.normal(0, noise);
        img[c * hw + y * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
}

/// Arc whose visual centre sits near (cx, cy).
ArcGeometry random_arc(Rng& rng, const SynthParams& p, double orientation, double cx, double cy,
                       double radius_scale) {
  const double radius = rng.uniform(p.radius_min, p.radius_max) * radius_scale;
  const double span = rng.uniform(p.span_min, p.span_max);
  const double width = rng.uniform(p.width_min, p.width_max);
  const double a = wrap_deg(orientation) * kDeg;
  const double depth = radius * (1 - std::cos(span / 2 * kDeg));
  const double jx = rng.uniform(-p.position_jitter, p.position_jitter) * radius_scale;
  const double jy = rng.uniform(-p.position_jitter, p.position_jitter) * radius_scale;
  const double mx = cx + jx + 0.5 * depth * std::cos(a);
  const double my = cy + jy - 0.5 * depth * std::sin(a);
  return make_arc(orientation, radius, span, width, mx, my);
}

}  // namespace

std::string to_string(SynthKind kind) {
  switch (kind) {
    case SynthKind::Curves: return "curves";
    case SynthKind::Patches: return "patches";
    case SynthKind::Mixed: return "mixed";
  }
  return "?";
}

SynthKind parse_synth_kind(std::string_view s) {
  if (s == "curves") return SynthKind::Curves;
  if (s == "patches") return SynthKind::Patches;
  if (s == "mixed") return SynthKind::Mixed;
  throw InvalidArgument("unknown image kind '" + std::string(s) + "'");
}

std::string to_string(ImageKind kind) {
  switch (kind) {
    case ImageKind::Curve: return "curve";
    case ImageKind::Patch: return "patch";
    case ImageKind::Composite: return "composite";
  }
  return "?";
}

SynthImageSet gen_synthetic_images(std::size_t count, SynthKind kind, std::uint64_t seed,
                                   const SynthParams& p) {
  if (count == 0) throw InvalidArgument("image count must be positive");
  if (p.size < 8 || p.classes < 2 || p.classes % 2) throw InvalidArgument("invalid generator parameters");
  SynthImageSet set;
  set.kind = kind;
  set.params = p;
  set.seed = seed;
  set.images = Tensor(Shape{count, 3, p.size, p.size});
  set.labels.resize(count);
  set.meta.resize(count);
  const std::size_t per = 3 * p.size * p.size;
  const double step = 360.0 / static_cast<double>(p.classes);
  const double mid = static_cast<double>(p.size) / 2;
  for (std::size_t n = 0; n < count; ++n) {
    // Each image draws from its own stream so sets are prefix-stable.
    Rng rng(derive_seed(seed, n));
    SynthImage& m = set.meta[n];
    float* img = set.images.data().data() + n * per;
    ImageKind ik = ImageKind::Curve;
    if (kind == SynthKind::Patches) ik = ImageKind::Patch;
    if (kind == SynthKind::Mixed) {
      const auto r = rng.below(3);
      ik = r == 0 ? ImageKind::Curve : r == 1 ? ImageKind::Patch : ImageKind::Composite;
    }
    m.kind = ik;
    pick_colors(rng, p, m.background, m.foreground);
    if (ik == ImageKind::Patch) {
      m.label = static_cast<int>(p.classes);
      for (std::size_t c = 0; c < 3; ++c)
        std::fill_n(img + c * p.size * p.size, p.size * p.size, m.foreground[c]);
    } else {
      const auto k = static_cast<int>(rng.below(p.classes));
      m.label = k;
      const double o = k * step + rng.uniform(-p.jitter_deg, p.jitter_deg);
      if (ik == ImageKind::Curve) {
        m.arcs.push_back(random_arc(rng, p, o, mid, mid, 1.0));
      } else {
        const double o2 = (k + static_cast<int>(p.classes / 2)) * step +
                          rng.uniform(-p.jitter_deg, p.jitter_deg);
        m.arcs.push_back(random_arc(rng, p, o, mid * 0.5, mid, 0.5));
        m.arcs.push_back(random_arc(rng, p, o2, mid * 1.5, mid, 0.5));
      }
      draw_arcs(img, p.size, m.arcs, m.background, m.foreground, p.noise, rng);
    }
    set.labels[n] = m.label;
  }
  return set;
}

void save_image_set(const SynthImageSet& set, const std::filesystem::path& dir) {
  using nlohmann::json;
  std::filesystem::create_directories(dir);
  write_tensor(dir / "images.tnsr", set.images);
  json items = json::array();
  for (const auto& m : set.meta) {
    json arcs = json::array();
    for (const auto& g : m.arcs)
      arcs.push_back({{"orientation", g.orientation}, {"tangent", g.tangent}, {"radius", g.radius},
                      {"span", g.span}, {"width", g.width}, {"center", {g.center_x, g.center_y}},
                      {"mid", {g.mid_x, g.mid_y}}});
    items.push_back({{"kind", to_string(m.kind)},
                     {"label", m.label},
                     {"arcs", arcs},
                     {"background", m.background},
                     {"foreground", m.foreground}});
  }
  const auto& p = set.params;
  json j{{"kind", to_string(set.kind)},
         {"seed", set.seed},
         {"count", set.labels.size()},
         {"params",
          {{"size", p.size}, {"classes", p.classes}, {"jitter_deg", p.jitter_deg},
           {"radius_min", p.radius_min}, {"radius_max", p.radius_max}, {"span_min", p.span_min},
           {"span_max", p.span_max}, {"width_min", p.width_min}, {"width_max", p.width_max},
           {"position_jitter", p.position_jitter}, {"min_contrast", p.min_contrast},
           {"noise", p.noise}}},
         {"labels", set.labels},
         {"images", items}};
  write_text(dir / "labels.json", j.dump() + "\n");
}

SynthImageSet load_image_set(const std::filesystem::path& dir) {
  using nlohmann::json;
  SynthImageSet set;
  set.images = read_tensor(dir / "images.tnsr");
  json j;
  try {
    std::ifstream in(dir / "labels.json");
    if (!in) throw FormatError("labels.json", "missing in " + dir.string());
    j = json::parse(in);
    set.labels = j.at("labels").get<std::vector<int>>();
    set.kind = parse_synth_kind(j.value("kind", "curves"));
    set.seed = j.value("seed", std::uint64_t{0});
    const auto& p = j.at("params");
    set.params.size = p.at("size");
    set.params.classes = p.at("classes");
    set.meta.resize(set.labels.size());
    const auto& items = j.at("images");
    for (std::size_t n = 0; n < set.meta.size() && n < items.size(); ++n) {
      auto& m = set.meta[n];
      const auto& it = items[n];
      const auto k = it.at("kind").get<std::string>();
      m.kind = k == "patch" ? ImageKind::Patch : k == "composite" ? ImageKind::Composite : ImageKind::Curve;
      m.label = it.at("label");
      for (const auto& a : it.at("arcs")) {
        ArcGeometry g;
        g.orientation = a.at("orientation");
        g.tangent = a.at("tangent");
        g.radius = a.at("radius");
        g.span = a.at("span");
        g.width = a.at("width");
        g.center_x = a.at("center")[0];
        g.center_y = a.at("center")[1];
        g.mid_x = a.at("mid")[0];
        g.mid_y = a.at("mid")[1];
        m.arcs.push_back(g);
      }
    }
  } catch (const json::exception& e) {
    throw FormatError("labels.json", e.what());
  }
  if (set.images.rank() != 4 || set.images.dim(0) != set.labels.size())
    throw FormatError("images.tnsr", "image count does not match labels.json");
  return set;
}

}  // namespace tense
