#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "fontctl/types.hpp"

namespace fontctl {

// Grayscale coverage raster, values in [0,1].
struct Coverage {
  int height = 0, width = 0;
  std::vector<double> values;

  Coverage() = default;
  Coverage(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0.0) {}
  double& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

// A TrueType outline font. Text is laid out left to right on one line; the
// pixel height maps the font's ascent-to-descent span to `px` pixels.
// Code points without a glyph are drawn as the fallback box: a one-pixel
// rectangle outline 0.6 px wide (in units of the requested height) spanning
// the ascent-to-baseline band.
class Font {
 public:
  static Font load(const std::filesystem::path& path);

  bool has_glyph(char32_t cp) const;
  // Horizontal advance of the laid-out text, rounded up.
  int text_width(std::string_view utf8, int px) const;
  // Draws the text with its top-left corner (top of the ascent band) at
  // (x, y), max-compositing coverage into `canvas` and touching only pixels
  // inside `clip`.
  void draw(Coverage& canvas, std::string_view utf8, int x, int y, int px, const BBox& clip) const;

  const std::filesystem::path& path() const { return path_; }

 private:
  struct Impl;
  std::shared_ptr<const Impl> impl_;
  std::filesystem::path path_;
};

// font_id -> Font. Read-only after construction, safe to share across threads.
class FontRegistry {
 public:
  void add(const std::string& id, const std::filesystem::path& path);
  const Font& get(const std::string& id) const;
  bool contains(const std::string& id) const { return fonts_.count(id) != 0; }
  std::vector<std::string> ids() const;
  bool empty() const { return fonts_.empty(); }

  // Built-in ids over the DejaVu family found in `dir`: sans, sans-bold,
  // serif, serif-bold, mono, mono-bold. Missing files are skipped;
  // throws if none are found.
  static FontRegistry load_default(const std::filesystem::path& dir = default_font_dir());
  // "id=path,id=path" list.
  static FontRegistry from_spec(std::string_view spec);
  // $FONTCTL_FONT_DIR, else the system DejaVu directory.
  static std::filesystem::path default_font_dir();

 private:
  std::map<std::string, Font> fonts_;
};

}  // namespace fontctl
