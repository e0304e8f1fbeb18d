#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tense/inversion.hpp"
#include "tense/io.hpp"

namespace tense {

struct AtlasSelection {
  std::vector<std::size_t> ids;      // input ids, largest L2 norm first
  std::vector<std::size_t> indices;  // positions in the record list
  bool flagged = false;              // fewer records than requested
};

/// Top `count` records by L2 norm of S; ties go to the lower input id.
AtlasSelection select_atlas_set(std::span<const AttributionRecord> records, std::size_t count);

enum class EmbedMethod { Pca, Neighbor };
std::string to_string(EmbedMethod method);
EmbedMethod parse_embed_method(std::string_view s);

struct EmbedConfig {
  EmbedMethod method = EmbedMethod::Neighbor;
  std::uint64_t seed = 0;
  std::size_t neighbors = 15;
  std::size_t iterations = 500;
  std::size_t negative_samples = 5;
  nlohmann::json to_json() const;
};

using Point2 = std::array<double, 2>;

struct Embedding {
  std::vector<Point2> coords;
  /// PCA found fewer than two usable components; missing axes are zero.
  bool flagged = false;
  std::size_t components = 2;
};

/// pca: projection onto the top two principal components.
/// neighbor: cosine kNN graph plus a force layout (attraction along edges,
/// repulsion from sampled non-edges). Deterministic per seed.
Embedding embed_2d(const std::vector<std::vector<float>>& vectors, const EmbedConfig& config);

/// Min-max scales each axis to [0, 1]; a constant axis maps to 0.
std::vector<Point2> normalize_unit_square(std::vector<Point2> coords);

struct AtlasCell {
  std::size_t row = 0, col = 0;  // row follows y, col follows x
  std::vector<std::size_t> members;  // positions in the layout's id list
  std::vector<double> mean;
  double E_plus = 0.0, E_minus = 0.0;  // of the mean vector
  // Filled by render_atlas.
  std::optional<double> icon_activation;
  std::string icon;
};

struct AtlasLayout {
  std::size_t n = 0;
  std::vector<std::size_t> ids;
  std::vector<Point2> coords;  // unit square
  std::vector<AtlasCell> cells;  // n * n, row-major
  std::vector<std::size_t> cell_of;  // per id
  nlohmann::json params = nlohmann::json::object();

  const AtlasCell& cell(std::size_t row, std::size_t col) const { return cells.at(row * n + col); }
  std::size_t non_empty() const;
  nlohmann::json to_json() const;
};

/// Cell index along one axis: ceil(x n) - 1, clamped, so boundary points go to
/// the lower cell. Coordinates are expected in [0, 1].
std::size_t grid_index(double x, std::size_t n);

/// Groups vectors into an n x n grid over the unit square and averages each cell.
AtlasLayout grid_average(const std::vector<Point2>& coords,
                         const std::vector<std::vector<float>>& vectors, std::size_t n);

struct AtlasBuildConfig {
  std::size_t count = 2000;
  std::size_t grid = 8;
  EmbedConfig embed;
};

/// Selection, embedding and grid averaging over attribution records.
AtlasLayout build_atlas_layout(std::span<const AttributionRecord> records,
                               const AtlasBuildConfig& config);

/// Cells whose mean vector has E+ and E- each above `fraction` of the largest
/// cell E+ and E- respectively.
std::vector<std::size_t> tense_cells(const AtlasLayout& layout, double fraction = 0.1);

struct AtlasArtifact {
  AtlasLayout layout;
  std::vector<std::pair<std::size_t, Tensor>> icons;  // cell index, RGBA icon
  Tensor composite;  // RGB
  std::size_t failures = 0;
  double activation_scale = 0.0;
};

struct AtlasRenderConfig {
  OptimConfig optim;
  std::size_t border = 2;
};

/// Optimizes one icon per non-empty cell toward |mean S|, evaluates f_v on it
/// and composes the grid with activation-coloured borders over density shading.
AtlasArtifact render_atlas(const Model& model, const FeatureRef& feature, const std::string& layer,
                           AtlasLayout layout, const AtlasRenderConfig& config);

/// layout.json, icon_<row>_<col>.<ext> and atlas.<ext> under `dir`.
void write_atlas(const AtlasArtifact& artifact, const std::filesystem::path& dir,
                 ImageFormat format);

}  // namespace tense
