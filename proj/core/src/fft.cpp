#include "tense/fft.hpp"

#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include "tense/error.hpp"

namespace tense::fft {

void transform(std::span<std::complex<double>> a, bool inverse) {
  const std::size_t n = a.size();
  if (!is_power_of_two(n)) throw InvalidArgument("fft length must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> w(std::cos(ang * static_cast<double>(k)),
                                     std::sin(ang * static_cast<double>(k)));
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
}

void transform_2d(std::span<std::complex<double>> data, std::size_t rows, std::size_t cols,
                  bool inverse) {
  if (data.size() != rows * cols) throw InvalidArgument("fft grid size mismatch");
  for (std::size_t r = 0; r < rows; ++r) transform(data.subspan(r * cols, cols), inverse);
  std::vector<std::complex<double>> column(rows);
  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t r = 0; r < rows; ++r) column[r] = data[r * cols + c];
    transform(column, inverse);
    for (std::size_t r = 0; r < rows; ++r) data[r * cols + c] = column[r];
  }
}

}  // namespace tense::fft
