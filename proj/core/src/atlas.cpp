#include "tense/atlas.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numeric>

#include "tense/error.hpp"
#include "tense/parallel.hpp"

namespace tense {

AtlasSelection select_atlas_set(std::span<const AttributionRecord> records, std::size_t count) {
  std::vector<std::pair<double, std::size_t>> norms;
  norms.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) norms.emplace_back(l2_norm(records[i].S.data()), i);
  std::stable_sort(norms.begin(), norms.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return records[a.second].input_id < records[b.second].input_id;
  });
  AtlasSelection out;
  out.flagged = count > records.size();
  const std::size_t take = std::min(count, records.size());
  for (std::size_t i = 0; i < take; ++i) {
    out.indices.push_back(norms[i].second);
    out.ids.push_back(records[norms[i].second].input_id);
  }
  return out;
}

std::string to_string(EmbedMethod method) { return method == EmbedMethod::Pca ? "pca" : "neighbor"; }

EmbedMethod parse_embed_method(std::string_view s) {
  if (s == "pca") return EmbedMethod::Pca;
  if (s == "neighbor") return EmbedMethod::Neighbor;
  throw InvalidArgument("unknown embedding method '" + std::string(s) + "' (pca, neighbor)");
}

nlohmann::json EmbedConfig::to_json() const {
  return {{"method", to_string(method)},
          {"seed", seed},
          {"neighbors", neighbors},
          {"iterations", iterations},
          {"negative_samples", negative_samples}};
}

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatD to_matrix(const std::vector<std::vector<float>>& vectors) {
  const std::size_t n = vectors.size(), d = vectors.front().size();
  MatD X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    if (vectors[i].size() != d) throw ShapeError("embedding vectors differ in length");
    for (std::size_t j = 0; j < d; ++j)
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = vectors[i][j];
  }
  return X;
}

Embedding embed_pca(const std::vector<std::vector<float>>& vectors) {
  MatD X = to_matrix(vectors);
  X.rowwise() -= X.colwise().mean();
  const Eigen::Index n = X.rows(), d = X.cols();
  Embedding out;
  out.coords.assign(static_cast<std::size_t>(n), Point2{0, 0});
  // Eigen-decompose the smaller of X^T X and X X^T; eigenvalues come out ascending.
  MatD scores(n, 2);
  scores.setZero();
  Eigen::VectorXd lambda;
  if (d <= n) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X.transpose() * X);
    lambda = es.eigenvalues();
    const Eigen::Index k = std::min<Eigen::Index>(2, d);
    for (Eigen::Index c = 0; c < k; ++c) scores.col(c) = X * es.eigenvectors().col(d - 1 - c);
  } else {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X * X.transpose());
    lambda = es.eigenvalues();
    const Eigen::Index k = std::min<Eigen::Index>(2, n);
    for (Eigen::Index c = 0; c < k; ++c)
      scores.col(c) = es.eigenvectors().col(n - 1 - c) * std::sqrt(std::max(0.0, lambda(n - 1 - c)));
  }
  const double top = lambda.size() ? std::max(lambda.maxCoeff(), 0.0) : 0.0;
  std::size_t usable = 0;
  for (Eigen::Index c = 0; c < std::min<Eigen::Index>(2, lambda.size()); ++c)
    if (lambda(lambda.size() - 1 - c) > 1e-10 * top && top > 0) ++usable;
  out.components = usable;
  out.flagged = usable < 2;
  for (std::size_t c = 0; c < 2; ++c) {
    if (c >= usable) {
      scores.col(static_cast<Eigen::Index>(c)).setZero();
      continue;
    }
    // Fix the sign so the largest-magnitude score is positive.
    Eigen::Index arg = 0;
    scores.col(static_cast<Eigen::Index>(c)).cwiseAbs().maxCoeff(&arg);
    if (scores(arg, static_cast<Eigen::Index>(c)) < 0) scores.col(static_cast<Eigen::Index>(c)) *= -1.0;
  }
  for (Eigen::Index i = 0; i < n; ++i) out.coords[static_cast<std::size_t>(i)] = {scores(i, 0), scores(i, 1)};
  return out;
}

/// Symmetrized cosine k-nearest-neighbour edges (i < j).
std::vector<std::pair<std::size_t, std::size_t>> knn_edges(const std::vector<std::vector<float>>& vectors,
                                                           std::size_t k) {
  MatD X = to_matrix(vectors);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double norm = X.row(i).norm();
    if (norm > 0) X.row(i) /= norm;
  }
  const std::size_t n = vectors.size();
  k = std::min(k, n - 1);
  std::vector<std::vector<std::size_t>> nbrs(n);
  constexpr std::size_t kBlock = 256;
  const std::size_t blocks = (n + kBlock - 1) / kBlock;
  parallel_for(blocks, [&](std::size_t b) {
    const auto lo = static_cast<Eigen::Index>(b * kBlock);
    const auto rows = static_cast<Eigen::Index>(std::min(kBlock, n - b * kBlock));
    const MatD sims = X.middleRows(lo, rows) * X.transpose();
    std::vector<std::size_t> order(n);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const auto i = static_cast<std::size_t>(lo + r);
      std::iota(order.begin(), order.end(), 0);
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k + 1), order.end(),
                        [&](std::size_t a, std::size_t c) {
                          // The point itself sorts first so it can be skipped.
                          if ((a == i) != (c == i)) return a == i;
                          const double sa = sims(r, static_cast<Eigen::Index>(a));
                          const double sc = sims(r, static_cast<Eigen::Index>(c));
                          if (sa != sc) return sa > sc;
                          return a < c;
                        });
      nbrs[i].assign(order.begin() + 1, order.begin() + static_cast<std::ptrdiff_t>(k + 1));
    }
  });
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j : nbrs[i]) edges.emplace_back(std::min(i, j), std::max(i, j));
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

double clip4(double v) { return std::clamp(v, -4.0, 4.0); }

Embedding embed_neighbor(const std::vector<std::vector<float>>& vectors, const EmbedConfig& config) {
  const std::size_t n = vectors.size();
  Embedding out;
  out.coords.assign(n, Point2{0, 0});
  if (n < 2) return out;
  const auto edges = knn_edges(vectors, config.neighbors);
  Rng rng(config.seed);
  for (auto& p : out.coords) p = {rng.uniform(-10, 10), rng.uniform(-10, 10)};
  auto& Y = out.coords;
  for (std::size_t e = 0; e < config.iterations; ++e) {
    const double alpha = 1.0 - static_cast<double>(e) / static_cast<double>(config.iterations);
    for (const auto& [i, j] : edges) {
      const double dx = Y[i][0] - Y[j][0], dy = Y[i][1] - Y[j][1];
      const double coef = -2.0 / (1.0 + dx * dx + dy * dy);
      const double gx = clip4(coef * dx), gy = clip4(coef * dy);
      Y[i][0] += alpha * gx;
      Y[i][1] += alpha * gy;
      Y[j][0] -= alpha * gx;
      Y[j][1] -= alpha * gy;
      for (std::size_t s = 0; s < config.negative_samples; ++s) {
        const std::size_t k = rng.below(n);
        if (k == i) continue;
        const double ex = Y[i][0] - Y[k][0], ey = Y[i][1] - Y[k][1];
        const double d2 = ex * ex + ey * ey;
        const double rep = 2.0 / ((0.001 + d2) * (1.0 + d2));
        Y[i][0] += alpha * clip4(rep * ex);
        Y[i][1] += alpha * clip4(rep * ey);
      }
    }
  }
  return out;
}

}  // namespace

Embedding embed_2d(const std::vector<std::vector<float>>& vectors, const EmbedConfig& config) {
  if (vectors.empty()) return {};
  return config.method == EmbedMethod::Pca ? embed_pca(vectors) : embed_neighbor(vectors, config);
}

std::vector<Point2> normalize_unit_square(std::vector<Point2> coords) {
  for (std::size_t a = 0; a < 2; ++a) {
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& p : coords) {
      lo = std::min(lo, p[a]);
      hi = std::max(hi, p[a]);
    }
    for (auto& p : coords) p[a] = hi > lo ? (p[a] - lo) / (hi - lo) : 0.0;
  }
  return coords;
}

std::size_t AtlasLayout::non_empty() const {
  return static_cast<std::size_t>(
      std::count_if(cells.begin(), cells.end(), [](const AtlasCell& c) { return !c.members.empty(); }));
}

nlohmann::json AtlasLayout::to_json() const {
  nlohmann::json jc = nlohmann::json::array();
  for (const auto& c : cells) {
    if (c.members.empty()) continue;
    std::vector<std::size_t> member_ids;
    for (std::size_t m : c.members) member_ids.push_back(ids[m]);
    jc.push_back({{"row", c.row},
                  {"col", c.col},
                  {"count", c.members.size()},
                  {"members", member_ids},
                  {"mean", c.mean},
                  {"E_plus", c.E_plus},
                  {"E_minus", c.E_minus},
                  {"icon", c.icon.empty() ? nlohmann::json(nullptr) : nlohmann::json(c.icon)},
                  {"icon_activation", c.icon_activation ? nlohmann::json(*c.icon_activation)
                                                        : nlohmann::json(nullptr)}});
  }
  nlohmann::json jcoords = nlohmann::json::array();
  for (std::size_t i = 0; i < coords.size(); ++i)
    jcoords.push_back({{"id", ids.at(i)}, {"x", coords[i][0]}, {"y", coords[i][1]}});
  return {{"grid", n}, {"selected", ids.size()}, {"coordinates", jcoords}, {"cells", jc},
          {"params", params}};
}

std::size_t grid_index(double x, std::size_t n) {
  const double c = std::ceil(x * static_cast<double>(n)) - 1.0;
  return static_cast<std::size_t>(std::clamp(c, 0.0, static_cast<double>(n - 1)));
}

AtlasLayout grid_average(const std::vector<Point2>& coords,
                         const std::vector<std::vector<float>>& vectors, std::size_t n) {
  if (n < 2) throw InvalidArgument("grid size must be >= 2");
  if (coords.size() != vectors.size())
    throw InvalidArgument("grid_average: " + std::to_string(coords.size()) + " coordinates for " +
                          std::to_string(vectors.size()) + " vectors");
  AtlasLayout layout;
  layout.n = n;
  layout.coords = coords;
  layout.ids.resize(coords.size());
  std::iota(layout.ids.begin(), layout.ids.end(), 0);
  layout.cells.resize(n * n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      layout.cells[r * n + c].row = r;
      layout.cells[r * n + c].col = c;
    }
  const std::size_t d = vectors.empty() ? 0 : vectors.front().size();
  layout.cell_of.resize(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    if (vectors[i].size() != d) throw ShapeError("grid_average: vectors differ in length");
    const std::size_t cell = grid_index(coords[i][1], n) * n + grid_index(coords[i][0], n);
    layout.cell_of[i] = cell;
    auto& cl = layout.cells[cell];
    if (cl.mean.empty()) cl.mean.assign(d, 0.0);
    cl.members.push_back(i);
    for (std::size_t j = 0; j < d; ++j) cl.mean[j] += vectors[i][j];
  }
  for (auto& cl : layout.cells) {
    if (cl.members.empty()) continue;
    for (auto& v : cl.mean) v /= static_cast<double>(cl.members.size());
    for (double v : cl.mean) (v > 0 ? cl.E_plus : cl.E_minus) += std::abs(v);
  }
  return layout;
}

AtlasLayout build_atlas_layout(std::span<const AttributionRecord> records,
                               const AtlasBuildConfig& config) {
  const AtlasSelection sel = select_atlas_set(records, config.count);
  if (sel.ids.empty()) throw InvalidArgument("atlas needs at least one attribution record");
  std::vector<std::vector<float>> vectors;
  vectors.reserve(sel.indices.size());
  for (std::size_t i : sel.indices) {
    const auto v = records[i].S.data();
    vectors.emplace_back(v.begin(), v.end());
  }
  const Embedding emb = embed_2d(vectors, config.embed);
  AtlasLayout layout = grid_average(normalize_unit_square(emb.coords), vectors, config.grid);
  layout.ids = sel.ids;
  layout.params = {{"count", config.count},
                   {"selected", sel.ids.size()},
                   {"selection_flagged", sel.flagged},
                   {"grid", config.grid},
                   {"embed", config.embed.to_json()},
                   {"embed_flagged", emb.flagged},
                   {"layer", records.front().layer},
                   {"selection", "top L2 norm of S"}};
  return layout;
}

std::vector<std::size_t> tense_cells(const AtlasLayout& layout, double fraction) {
  double max_plus = 0, max_minus = 0;
  for (const auto& c : layout.cells) {
    if (c.members.empty()) continue;
    max_plus = std::max(max_plus, c.E_plus);
    max_minus = std::max(max_minus, c.E_minus);
  }
  std::vector<std::size_t> out;
  if (max_plus <= 0 || max_minus <= 0) return out;
  for (std::size_t i = 0; i < layout.cells.size(); ++i) {
    const auto& c = layout.cells[i];
    if (!c.members.empty() && c.E_plus > fraction * max_plus && c.E_minus > fraction * max_minus)
      out.push_back(i);
  }
  return out;
}

AtlasArtifact render_atlas(const Model& model, const FeatureRef& feature, const std::string& layer,
                           AtlasLayout layout, const AtlasRenderConfig& config) {
  const Shape& ishape = model.spec.input_shape;
  if (ishape.size() != 3 || ishape[0] != 3) throw InvalidArgument("atlas icons need an RGB image model");
  const StageInfo& stage = model.stage(layer);
  AtlasArtifact art;
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < layout.cells.size(); ++i)
    if (!layout.cells[i].members.empty()) todo.push_back(i);

  std::vector<std::optional<Tensor>> icons(todo.size());
  std::vector<std::optional<double>> acts(todo.size());
  std::atomic<std::size_t> failures{0};
  parallel_for(todo.size(), [&](std::size_t t) {
    const AtlasCell& cell = layout.cells[todo[t]];
    if (cell.mean.size() != numel(stage.shape)) throw ShapeError("cell mean does not match layer");
    std::vector<float> mean(cell.mean.begin(), cell.mean.end());
    const Tensor S(stage.shape, std::move(mean));
    OptimConfig cfg = config.optim;
    cfg.target = TargetKind::SAbs;
    cfg.seed_mode = SeedMode::Noise;
    cfg.seed = derive_seed(config.optim.seed, todo[t]);
    try {
      OptimResult r = optimize_visualization(model, S, layer, cfg);
      acts[t] = feature_value(model, forward_trace(model, r.image), feature);
      icons[t] = std::move(r.rgba);
    } catch (const Error&) {
      ++failures;
    }
  });
  art.failures = failures;

  for (std::size_t t = 0; t < todo.size(); ++t) {
    if (!icons[t]) continue;
    auto& cell = layout.cells[todo[t]];
    cell.icon_activation = acts[t];
    cell.icon = "icon_" + std::to_string(cell.row) + "_" + std::to_string(cell.col);
    art.activation_scale = std::max(art.activation_scale, std::abs(*acts[t]));
    art.icons.emplace_back(todo[t], std::move(*icons[t]));
  }

  const std::size_t n = layout.n, h = ishape[1], w = ishape[2], b = config.border;
  const std::size_t th = h + 2 * b, tw = w + 2 * b;
  Tensor canvas(Shape{3, n * th, n * tw}, 1.0f);
  std::size_t max_count = 1;
  for (const auto& c : layout.cells) max_count = std::max(max_count, c.members.size());
  const std::size_t H = n * th, W = n * tw;
  auto put = [&](std::size_t ch, std::size_t r, std::size_t c, double v) {
    canvas[(ch * H + r) * W + c] = static_cast<float>(v);
  };
  for (const auto& cell : layout.cells) {
    if (cell.members.empty()) continue;
    const double shade = 1.0 - 0.6 * static_cast<double>(cell.members.size()) / max_count;
    for (std::size_t r = 0; r < th; ++r)
      for (std::size_t c = 0; c < tw; ++c)
        for (std::size_t ch = 0; ch < 3; ++ch) put(ch, cell.row * th + r, cell.col * tw + c, shade);
  }
  for (const auto& [index, icon] : art.icons) {
    const auto& cell = layout.cells[index];
    const Rgba border = diverging_color(*cell.icon_activation, art.activation_scale);
    const double bc[3] = {border.r, border.g, border.b};
    const double shade = 1.0 - 0.6 * static_cast<double>(cell.members.size()) / max_count;
    for (std::size_t r = 0; r < th; ++r)
      for (std::size_t c = 0; c < tw; ++c) {
        const std::size_t R = cell.row * th + r, C = cell.col * tw + c;
        const bool edge = r < b || c < b || r >= th - b || c >= tw - b;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          if (edge) {
            put(ch, R, C, bc[ch]);
          } else {
            const double a = icon[(ishape[0] * h + (r - b)) * w + (c - b)];
            const double v = icon[(ch * h + (r - b)) * w + (c - b)];
            put(ch, R, C, a * v + (1 - a) * shade);
          }
        }
      }
  }
  art.composite = std::move(canvas);
  layout.params["icon_optim"] = config.optim.to_json();
  layout.params["icon_failures"] = art.failures;
  layout.params["activation_scale"] = art.activation_scale;
  layout.params["border"] = config.border;
  art.layout = std::move(layout);
  return art;
}

void write_atlas(const AtlasArtifact& artifact, const std::filesystem::path& dir, ImageFormat format) {
  const std::string ext = format == ImageFormat::Png ? ".png" : ".ppm";
  std::filesystem::create_directories(dir);
  AtlasLayout layout = artifact.layout;
  for (const auto& [index, icon] : artifact.icons) {
    auto& cell = layout.cells[index];
    cell.icon += ext;
    write_image(dir / cell.icon, icon, format);
  }
  write_image(dir / ("atlas" + ext), artifact.composite, format);
  write_text(dir / "layout.json", layout.to_json().dump(2) + "\n");
}

}  // namespace tense
