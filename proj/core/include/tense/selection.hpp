#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tense/attribution.hpp"

namespace tense {

enum class SelectMode { Mei, Mii, Mti, SpatialTense, ChannelTense, NullAttr, TopNorm };

std::string to_string(SelectMode mode);

struct Scored {
  std::size_t id = 0;
  double score = 0.0;
};

struct SelectionResult {
  SelectMode mode = SelectMode::Mei;
  std::vector<Scored> ranked;
  nlohmann::json params = nlohmann::json::object();
  /// Set when fewer than the requested items were available.
  bool flagged = false;
  std::string note;

  std::vector<std::size_t> ids() const;
  nlohmann::json to_json() const;
};

/// f_v for every input of a dataset, in parallel chunks.
std::vector<double> scan_feature(const Model& model, const FeatureRef& feature, const Tensor& inputs);

struct ActivationRanking {
  SelectionResult mei;
  SelectionResult mii;
};

/// Top-k and bottom-k by value; ties go to the lower id.
ActivationRanking rank_activations(std::span<const double> values, std::size_t k);
ActivationRanking rank_activations(const Model& model, const FeatureRef& feature,
                                   const Tensor& inputs, std::size_t k);

enum class NormKind { L1, L2 };
std::string to_string(NormKind kind);
double attribution_norm(const AttributionRecord& r, NormKind kind);

/// Activation band in units of the dataset standard deviation of f_v.
struct Band {
  double lo = -0.5;
  double hi = 0.0;
};

/// Top-k by attribution norm among records with lo*sigma < f_v < hi*sigma.
/// sigma defaults to the standard deviation of the record values.
SelectionResult select_mti(std::span<const AttributionRecord> records, std::size_t k, Band band = {},
                           NormKind norm = NormKind::L1, std::optional<double> sigma = std::nullopt);

/// Top-k by attribution norm without an activation constraint.
SelectionResult select_top_norm(std::span<const AttributionRecord> records, std::size_t k,
                                NormKind norm);

enum class TenseMode { Spatial, Channel };

struct Percentiles {
  double low = 1.0;
  double high = 99.0;
};

/// Spatial: the phi+ - phi- map holds a value below the pooled P_low and another
/// above the pooled P_high. Channel: phi+ and phi- both exceed their pooled
/// P_high at a position that is the argmax of both maps.
SelectionResult select_tense(std::span<const AttributionRecord> records, TenseMode mode,
                             Percentiles pct = {}, std::size_t k = 0);

/// k records with the smallest E+ + E-.
SelectionResult select_null_attr(std::span<const AttributionRecord> records, std::size_t k);

struct ScatterExport {
  struct Point {
    std::size_t id;
    double E_plus, E_minus, activation;
  };
  std::vector<Point> points;
  std::vector<double> contours;  // lines E+ - E- = c
  double color_max = 0.0;
  nlohmann::json to_json() const;
};

ScatterExport export_scatter(std::span<const AttributionRecord> records, std::size_t contours = 9);
std::string render_scatter(const ScatterExport& data, const std::string& title);

struct KMeansBasis {
  std::vector<std::vector<float>> centroids;  // unit length
  std::size_t iterations = 0;
  std::size_t reseeded = 0;
  std::size_t dropped_zero = 0;  // zero vectors excluded from clustering
  std::vector<std::size_t> assignment;
  std::uint64_t seed = 0;
};

/// Spherical k-means (cosine distance) with k-means++ seeding; stops when
/// assignments are stable or after max_iter iterations.
KMeansBasis spherical_kmeans(const std::vector<std::vector<float>>& vectors, std::size_t k,
                             std::uint64_t seed, std::size_t max_iter = 100);

/// Hidden vectors of `layer` (post-ReLU when available), one random spatial position per input.
std::vector<std::vector<float>> sample_hidden_vectors(const Model& model, const std::string& layer,
                                                      const Tensor& inputs, std::uint64_t seed);

KMeansBasis kmeans_features(const Model& model, const std::string& layer, const Tensor& inputs,
                            std::size_t k, std::uint64_t seed);

/// Clusters the k1 centroids again into k2 groups and draws one original
/// centroid from each group.
std::vector<std::vector<float>> kmeans_two_stage(const KMeansBasis& first, std::size_t k2,
                                                 std::uint64_t seed);

/// |union of sets| / (n m); all sets must have size m.
double uniqueness(const std::vector<std::vector<std::size_t>>& sets);

}  // namespace tense
