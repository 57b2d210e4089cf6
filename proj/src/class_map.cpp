#include "convsst/class_map.hpp"

#include <fstream>

#include "convsst/error.hpp"

namespace convsst {

const std::array<Rgb, 20>& class_palette() {
  static const std::array<Rgb, 20> palette{{
      {0xe6, 0x19, 0x4b}, {0x3c, 0xb4, 0x4b}, {0xff, 0xe1, 0x19}, {0x43, 0x63, 0xd8}, {0xf5, 0x82, 0x31},
      {0x91, 0x1e, 0xb4}, {0x46, 0xf0, 0xf0}, {0xf0, 0x32, 0xe6}, {0xbc, 0xf6, 0x0c}, {0xfa, 0xbe, 0xd4},
      {0x00, 0x80, 0x80}, {0xdc, 0xbe, 0xff}, {0x9a, 0x63, 0x24}, {0xff, 0xfa, 0xc8}, {0x80, 0x00, 0x00},
      {0xaa, 0xff, 0xc3}, {0x80, 0x80, 0x00}, {0xff, 0xd8, 0xb1}, {0x00, 0x00, 0x75}, {0x80, 0x80, 0x80},
  }};
  return palette;
}

std::string encode_class_map(std::size_t height, std::size_t width, std::span<const std::int32_t> classes) {
  if (classes.size() != height * width) {
    throw ShapeError("class map holds " + std::to_string(classes.size()) + " pixels, expected " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  const auto& palette = class_palette();
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.reserve(out.size() + classes.size() * 3);
  for (std::int32_t c : classes) {
    Rgb color;
    if (c >= 0) {
      if (static_cast<std::size_t>(c) >= palette.size()) {
        throw Error("class " + std::to_string(c) + " exceeds the " + std::to_string(palette.size()) + "-color palette");
      }
      color = palette[static_cast<std::size_t>(c)];
    }
    out.push_back(static_cast<char>(color.r));
    out.push_back(static_cast<char>(color.g));
    out.push_back(static_cast<char>(color.b));
  }
  return out;
}

void write_class_map(const std::filesystem::path& path, std::size_t height, std::size_t width,
                     std::span<const std::int32_t> classes) {
  const std::string bytes = encode_class_map(height, width, classes);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw Error("cannot write " + path.string());
  }
}

}  // namespace convsst
