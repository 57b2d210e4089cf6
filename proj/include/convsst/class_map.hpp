#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

namespace convsst {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;

  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Fixed colors for classes 0..19.
const std::array<Rgb, 20>& class_palette();

/// Binary PPM (P6) of a per-pixel class-index image in row-major order.
/// Negative entries are unlabeled and render black. Throws for classes
/// beyond the palette.
std::string encode_class_map(std::size_t height, std::size_t width, std::span<const std::int32_t> classes);
void write_class_map(const std::filesystem::path& path, std::size_t height, std::size_t width,
                     std::span<const std::int32_t> classes);

}  // namespace convsst
