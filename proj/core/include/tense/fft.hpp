#pragma once

#include <complex>
#include <cstddef>
#include <span>

namespace tense::fft {

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

/// In-place radix-2 transform of a power-of-two length sequence.
/// Forward uses exp(-2*pi*i*k*n/N); inverse uses the conjugate kernel and is
/// left unnormalized.
void transform(std::span<std::complex<double>> data, bool inverse);

/// In-place 2-D transform of a rows x cols row-major grid (both powers of two).
void transform_2d(std::span<std::complex<double>> data, std::size_t rows, std::size_t cols,
                  bool inverse);

}  // namespace tense::fft
