#include "fontctl/fonts.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>

#define STB_TRUETYPE_IMPLEMENTATION
#define STBTT_STATIC
#include "stb_truetype.h"

#include "fontctl/error.hpp"

namespace fs = std::filesystem;

namespace fontctl {

struct Font::Impl {
  std::vector<unsigned char> data;
  stbtt_fontinfo info{};
  int ascent = 0, descent = 0, line_gap = 0;
};

Font Font::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open font: " + path.string());
  auto impl = std::make_shared<Impl>();
  impl->data.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  const int offset = stbtt_GetFontOffsetForIndex(impl->data.data(), 0);
  if (offset < 0 || !stbtt_InitFont(&impl->info, impl->data.data(), offset)) {
    throw InputError("not a TrueType font: " + path.string());
  }
  stbtt_GetFontVMetrics(&impl->info, &impl->ascent, &impl->descent, &impl->line_gap);
  Font f;
  f.impl_ = std::move(impl);
  f.path_ = path;
  return f;
}

bool Font::has_glyph(char32_t cp) const {
  return stbtt_FindGlyphIndex(&impl_->info, static_cast<int>(cp)) != 0;
}

namespace {

constexpr double kFallbackWidthEm = 0.6;

}  // namespace

int Font::text_width(std::string_view utf8, int px) const {
  const float scale = stbtt_ScaleForPixelHeight(&impl_->info, static_cast<float>(px));
  const auto cps = utf8_decode(utf8);
  double pen = 0.0;
  for (std::size_t i = 0; i < cps.size(); ++i) {
    const int glyph = stbtt_FindGlyphIndex(&impl_->info, static_cast<int>(cps[i]));
    if (glyph == 0 && cps[i] != U' ') {
      pen += kFallbackWidthEm * px;
    } else {
      int advance = 0, lsb = 0;
      stbtt_GetGlyphHMetrics(&impl_->info, glyph, &advance, &lsb);
      pen += advance * scale;
    }
    if (i + 1 < cps.size()) {
      pen += scale * stbtt_GetCodepointKernAdvance(&impl_->info, static_cast<int>(cps[i]), static_cast<int>(cps[i + 1]));
    }
  }
  return static_cast<int>(std::ceil(pen - 1e-9));
}

void Font::draw(Coverage& canvas, std::string_view utf8, int x, int y, int px, const BBox& clip_in) const {
  const BBox clip = clamp_bbox(clip_in, canvas.width, canvas.height);
  if (clip.area() == 0 || px <= 0) return;
  const float scale = stbtt_ScaleForPixelHeight(&impl_->info, static_cast<float>(px));
  const int baseline = y + static_cast<int>(std::lround(impl_->ascent * scale));
  auto put = [&](int cx, int cy, double v) {
    if (clip.contains(cx, cy)) canvas.at(cy, cx) = std::max(canvas.at(cy, cx), v);
  };

  const auto cps = utf8_decode(utf8);
  double pen = x;
  std::vector<unsigned char> buf;
  for (std::size_t i = 0; i < cps.size(); ++i) {
    const int glyph = stbtt_FindGlyphIndex(&impl_->info, static_cast<int>(cps[i]));
    if (glyph == 0 && cps[i] != U' ') {
      const int bx0 = static_cast<int>(std::floor(pen)) + 1;
      const int bw = std::max(2, static_cast<int>(std::lround(kFallbackWidthEm * px)) - 2);
      const int by0 = y + 1;
      const int by1 = baseline - 1;
      for (int cx = bx0; cx < bx0 + bw; ++cx) {
        put(cx, by0, 1.0);
        put(cx, by1, 1.0);
      }
      for (int cy = by0; cy <= by1; ++cy) {
        put(bx0, cy, 1.0);
        put(bx0 + bw - 1, cy, 1.0);
      }
      pen += kFallbackWidthEm * px;
    } else {
      const int ipen = static_cast<int>(std::floor(pen));
      const float shift = static_cast<float>(pen - ipen);
      int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
      stbtt_GetGlyphBitmapBoxSubpixel(&impl_->info, glyph, scale, scale, shift, 0.0f, &x0, &y0, &x1, &y1);
      const int gw = x1 - x0, gh = y1 - y0;
      if (gw > 0 && gh > 0) {
        buf.assign(static_cast<std::size_t>(gw) * gh, 0);
        stbtt_MakeGlyphBitmapSubpixel(&impl_->info, buf.data(), gw, gh, gw, scale, scale, shift, 0.0f, glyph);
        for (int gy = 0; gy < gh; ++gy)
          for (int gx = 0; gx < gw; ++gx) {
            const unsigned char v = buf[static_cast<std::size_t>(gy) * gw + gx];
            if (v) put(ipen + x0 + gx, baseline + y0 + gy, v / 255.0);
          }
      }
      int advance = 0, lsb = 0;
      stbtt_GetGlyphHMetrics(&impl_->info, glyph, &advance, &lsb);
      pen += advance * scale;
    }
    if (i + 1 < cps.size()) {
      pen += scale * stbtt_GetCodepointKernAdvance(&impl_->info, static_cast<int>(cps[i]), static_cast<int>(cps[i + 1]));
    }
  }
}

void FontRegistry::add(const std::string& id, const fs::path& path) { fonts_.insert_or_assign(id, Font::load(path)); }

const Font& FontRegistry::get(const std::string& id) const {
  auto it = fonts_.find(id);
  if (it == fonts_.end()) throw InputError("unknown font_id '" + id + "'");
  return it->second;
}

std::vector<std::string> FontRegistry::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, f] : fonts_) out.push_back(id);
  return out;
}

fs::path FontRegistry::default_font_dir() {
  if (const char* env = std::getenv("FONTCTL_FONT_DIR"); env && *env) return env;
  return "/usr/share/fonts/truetype/dejavu";
}

FontRegistry FontRegistry::load_default(const fs::path& dir) {
  static const std::pair<const char*, const char*> kDefaults[] = {
      {"sans", "DejaVuSans.ttf"},   {"sans-bold", "DejaVuSans-Bold.ttf"}, {"serif", "DejaVuSerif.ttf"},
      {"serif-bold", "DejaVuSerif-Bold.ttf"}, {"mono", "DejaVuSansMono.ttf"}, {"mono-bold", "DejaVuSansMono-Bold.ttf"},
  };
  FontRegistry reg;
  for (const auto& [id, file] : kDefaults) {
    const fs::path p = dir / file;
    if (fs::exists(p)) reg.add(id, p);
  }
  if (reg.empty()) throw InputError("no default fonts found in " + dir.string() + " (set FONTCTL_FONT_DIR)");
  return reg;
}

FontRegistry FontRegistry::from_spec(std::string_view spec) {
  FontRegistry reg;
  std::size_t pos = 0;
  while (pos <= spec.size()) {
    const std::size_t comma = spec.find(',', pos);
    const std::string item = trim(spec.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    if (!item.empty()) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw InputError("font spec entry '" + item + "' must be id=path");
      reg.add(trim(std::string_view(item).substr(0, eq)), trim(std::string_view(item).substr(eq + 1)));
    }
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  if (reg.empty()) throw InputError("empty font spec");
  return reg;
}

}  // namespace fontctl
