#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tense/tensor.hpp"

namespace tense {

/// .tnsr layout, all little-endian:
///   "TNSR" | u32 version (1) | u32 dtype (0 = f32) | u32 ndim | u64 dims[ndim] | f32 payload
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

struct Rgba {
  float r = 0, g = 0, b = 0, a = 0;
};

/// Two-sided intensity colour: excess positive is red, excess negative blue,
/// the shared part green; alpha is max(p, n). p and n are clamped to [0, 1].
Rgba pm_color(double p, double n);

/// Maps phi+/phi- [H, W] to an RGBA image [4, H, W] with p = phi+/scale, n = phi-/scale.
/// With out_rows/out_cols set the maps are first bilinearly upsampled.
Tensor colorize_pm_map(const Tensor& phi_plus, const Tensor& phi_minus, double scale,
                       std::size_t out_rows = 0, std::size_t out_cols = 0);

/// Alpha-composites an RGBA [4, H, W] overlay onto an RGB [3, H, W] image.
Tensor composite(const Tensor& rgb, const Tensor& rgba);

/// Blue (-max) -> white (0) -> red (+max).
Rgba diverging_color(double value, double max_abs);

enum class ImageFormat { Ppm, Png };

/// Image tensors are [3, H, W] or [4, H, W] with values in [0, 1].
/// Out-of-range values are clamped; `clamped` receives how many.
std::vector<std::uint8_t> encode_ppm(const Tensor& image, std::size_t* clamped = nullptr);
std::vector<std::uint8_t> encode_png(const Tensor& image, std::size_t* clamped = nullptr);
/// Writes the image, warning on stderr when values were clamped. PPM drops
/// alpha by compositing over white.
void write_image(const std::filesystem::path& path, const Tensor& image, ImageFormat format);
ImageFormat image_format_for(const std::filesystem::path& path);

std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t crc = 0);
std::uint32_t adler32(std::span<const std::uint8_t> bytes);

struct ScatterPoint {
  double x = 0, y = 0, value = 0;
};

struct ScatterOptions {
  std::string title;
  std::string x_label = "E-";
  std::string y_label = "E+";
  /// Lines y = x + c drawn across the plot.
  std::vector<double> contours;
  /// Activation magnitude mapped to full red/blue; 0 uses the largest |value|.
  /// Contours are coloured with the same scale, so a point sits on the line of its own colour.
  double color_max = 0;
  double width = 480, height = 480;
  double radius = 3;
};

std::string svg_scatter(const std::vector<ScatterPoint>& points, const ScatterOptions& options);

/// Rows x cols heatmap with labels, values in [-1, 1] mapped through the diverging scale.
std::string svg_matrix(const std::vector<std::vector<double>>& values,
                       const std::vector<std::string>& row_labels,
                       const std::vector<std::string>& col_labels, const std::string& title);

}  // namespace tense
