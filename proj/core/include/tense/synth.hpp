#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tense/tensor.hpp"

namespace tense {

enum class SynthKind { Curves, Patches, Mixed };
enum class ImageKind { Curve, Patch, Composite };

std::string to_string(SynthKind kind);
SynthKind parse_synth_kind(std::string_view s);
std::string to_string(ImageKind kind);

/// Geometry of one drawn arc. Angles are in degrees, counter-clockwise with the
/// image y axis pointing down; positions are (x, y) in pixels.
struct ArcGeometry {
  double orientation = 0;  // direction the arc bulges toward
  double tangent = 0;      // tangent direction at the arc midpoint, orientation + 90
  double radius = 0;
  double span = 0;  // angular extent of the arc
  double width = 0;
  double center_x = 0, center_y = 0;  // circle center
  double mid_x = 0, mid_y = 0;        // arc midpoint
};

struct SynthImage {
  ImageKind kind = ImageKind::Curve;
  int label = 0;
  std::vector<ArcGeometry> arcs;  // empty for patches
  float background[3] = {0, 0, 0};
  float foreground[3] = {0, 0, 0};
};

struct SynthParams {
  std::size_t size = 32;
  std::size_t classes = 8;
  double jitter_deg = 10;
  double radius_min = 6, radius_max = 14;
  double span_min = 80, span_max = 120;
  double width_min = 1.5, width_max = 2.5;
  double position_jitter = 3;
  double min_contrast = 0.3;
  double noise = 0.02;
};

/// Images [N, 3, size, size] in [0, 1]. Curve labels are orientation classes
/// 0..classes-1 (class k covers k*360/classes +- jitter); patches are labelled
/// `classes`; composites carry the label of their left arc (right arc is k + classes/2).
struct SynthImageSet {
  Tensor images;
  std::vector<int> labels;
  std::vector<SynthImage> meta;
  SynthKind kind = SynthKind::Curves;
  SynthParams params;
  std::uint64_t seed = 0;
};

SynthImageSet gen_synthetic_images(std::size_t count, SynthKind kind, std::uint64_t seed,
                                   const SynthParams& params = {});

/// Directory with images.tnsr and labels.json.
void save_image_set(const SynthImageSet& set, const std::filesystem::path& dir);
SynthImageSet load_image_set(const std::filesystem::path& dir);

}  // namespace tense
