#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "fontctl/tensor.hpp"

namespace fontctl {

// Pixel rectangle, origin top-left.
struct BBox {
  int x = 0, y = 0, w = 0, h = 0;

  int area() const { return (w > 0 && h > 0) ? w * h : 0; }
  bool contains(int px, int py) const { return px >= x && px < x + w && py >= y && py < y + h; }
  bool intersects(const BBox& o) const {
    return x < o.x + o.w && o.x < x + w && y < o.y + o.h && o.y < y + h;
  }
  bool operator==(const BBox&) const = default;
};

// Intersection of the box with [0,width) x [0,height); may have zero area.
BBox clamp_bbox(const BBox& box, int width, int height);

struct TextRegion {
  std::string text;
  BBox bbox;
  std::string font_id;
  int font_px = 0;

  bool operator==(const TextRegion&) const = default;
};

// 8-bit interleaved image (HWC).
struct Image8 {
  int height = 0, width = 0, channels = 3;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(int h, int w, int c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  std::uint8_t& at(int y, int x, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool empty() const { return pixels.empty(); }
  bool operator==(const Image8&) const = default;
};

struct AnnotatedImage {
  std::string id;
  std::string image_path;  // as written in the manifest
  Image8 image;
  std::string caption;
  // Alternative captions keyed by source (e.g. "detailed"), for caption
  // ablations. The plain `caption` is the "default" source.
  std::map<std::string, std::string> captions;
  std::vector<TextRegion> regions;

  // Throws InputError when the source is missing.
  const std::string& caption_for(const std::string& source) const;
};

enum class HintKind { kGlyph, kCanny, kFont };

std::string_view to_string(HintKind kind);
HintKind parse_hint_kind(std::string_view s);

// Single-channel conditioning image with values in [0,1].
struct HintImage {
  HintKind kind = HintKind::kGlyph;
  int height = 0, width = 0;
  std::vector<double> pixels;
  std::string source_id;

  HintImage() = default;
  HintImage(HintKind k, int h, int w, std::string source = {})
      : kind(k), height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0.0), source_id(std::move(source)) {}

  double& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

// Luma (BT.601) of pixel (y, x) in [0, 255].
double luma(const Image8& img, int y, int x);

// [1,3,H,W] tensor in [0,1].
Tensor image_to_tensor(const Image8& img);
// Clamps to [0,1] and rounds to 8 bits. t is [N,3,H,W]; picks element n.
Image8 tensor_to_image(const Tensor& t, int n = 0);
// [1,1,H,W] tensor.
Tensor hint_to_tensor(const HintImage& hint);
Image8 hint_to_image(const HintImage& hint);

std::string trim(std::string_view s);
// Trims and collapses internal whitespace runs to one space.
std::string normalize_whitespace(std::string_view s);

// UTF-8 decoding into code points; invalid bytes map to U+FFFD.
std::vector<char32_t> utf8_decode(std::string_view s);
std::string utf8_encode(const std::vector<char32_t>& cps);

}  // namespace fontctl
