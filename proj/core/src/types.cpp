#include "fontctl/types.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "fontctl/error.hpp"

namespace fontctl {

const std::string& AnnotatedImage::caption_for(const std::string& source) const {
  if (source.empty() || source == "default") return caption;
  auto it = captions.find(source);
  if (it == captions.end()) throw InputError("image '" + id + "' has no caption for source '" + source + "'");
  return it->second;
}

BBox clamp_bbox(const BBox& box, int width, int height) {
  const int x0 = std::clamp(box.x, 0, width);
  const int y0 = std::clamp(box.y, 0, height);
  const int x1 = std::clamp(box.x + std::max(box.w, 0), 0, width);
  const int y1 = std::clamp(box.y + std::max(box.h, 0), 0, height);
  return BBox{x0, y0, x1 - x0, y1 - y0};
}

std::string_view to_string(HintKind kind) {
  switch (kind) {
    case HintKind::kGlyph:
      return "glyph";
    case HintKind::kCanny:
      return "canny";
    case HintKind::kFont:
      return "font";
  }
  return "glyph";
}

HintKind parse_hint_kind(std::string_view s) {
  if (s == "glyph") return HintKind::kGlyph;
  if (s == "canny") return HintKind::kCanny;
  if (s == "font") return HintKind::kFont;
  throw InputError("unknown hint kind '" + std::string(s) + "' (expected glyph, canny or font)");
}

double luma(const Image8& img, int y, int x) {
  if (img.channels == 1) return img.at(y, x, 0);
  return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}

Tensor image_to_tensor(const Image8& img) {
  if (img.channels != 3) throw ShapeError("image_to_tensor expects an RGB image");
  Tensor t({1, 3, img.height, img.width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) t.at(0, c, y, x) = img.at(y, x, c) / 255.0;
  return t;
}

Image8 tensor_to_image(const Tensor& t, int n) {
  if (t.rank() != 4 || t.dim(1) != 3) throw ShapeError("tensor_to_image expects [N,3,H,W], got " + shape_str(t.shape()));
  Image8 img(t.dim(2), t.dim(3), 3);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double v = t.at(n, c, y, x);
        if (!std::isfinite(v)) v = 0.0;
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
  return img;
}

Tensor hint_to_tensor(const HintImage& hint) {
  return Tensor({1, 1, hint.height, hint.width}, hint.pixels);
}

Image8 hint_to_image(const HintImage& hint) {
  Image8 img(hint.height, hint.width, 1);
  for (std::size_t i = 0; i < hint.pixels.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(hint.pixels[i], 0.0, 1.0) * 255.0));
  return img;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string normalize_whitespace(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char ch : s) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      pending_space = !out.empty();
    } else {
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.push_back(ch);
    }
  }
  return out;
}

std::vector<char32_t> utf8_decode(std::string_view s) {
  std::vector<char32_t> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    int extra = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      cp = b0;
    } else if ((b0 >> 5) == 0x6) {
      cp = b0 & 0x1f;
      extra = 1;
    } else if ((b0 >> 4) == 0xe) {
      cp = b0 & 0x0f;
      extra = 2;
    } else if ((b0 >> 3) == 0x1e) {
      cp = b0 & 0x07;
      extra = 3;
    } else {
      out.push_back(0xfffd);
      ++i;
      continue;
    }
    bool ok = true;
    for (int k = 1; k <= extra; ++k) {
      if (i + k >= s.size()) {
        ok = false;
        break;
      }
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b >> 6) != 0x2) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (b & 0x3f);
    }
    if (!ok) {
      out.push_back(0xfffd);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += static_cast<std::size_t>(extra) + 1;
  }
  return out;
}

std::string utf8_encode(const std::vector<char32_t>& cps) {
  std::string out;
  for (char32_t cp : cps) {
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else {
      out.push_back(static_cast<char>(0xf0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    }
  }
  return out;
}

}  // namespace fontctl
