#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "centerseg/tensor.hpp"

namespace centerseg {

inline constexpr std::uint8_t kIgnoreIndex = 255;

// Integer class map, row-major. Ground truth may contain kIgnoreIndex.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), values(h * w, fill) {}

  std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  std::size_t size() const { return values.size(); }

  bool operator==(const LabelMap&) const = default;
};

// Planar float image [channels, height, width] with values in [0, 1].
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  template <typename T>
  Tensor<T> to_tensor() const {
    return Tensor<T>(Shape{channels, height, width}, std::vector<T>(pixels.begin(), pixels.end()));
  }

  bool operator==(const Image&) const = default;
};

}  // namespace centerseg
