#include "fontctl/benchmark.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "fontctl/dataset.hpp"
#include "fontctl/error.hpp"
#include "fontctl/hints.hpp"
#include "fontctl/rng.hpp"

namespace fs = std::filesystem;

namespace fontctl {

void BenchmarkParams::validate() const {
  if (count < 0) throw InputError("count must be >= 0");
  if (canvas <= 0) throw InputError("canvas must be positive");
  if (max_lines < 1) throw InputError("max_lines must be >= 1");
  if (!(max_char_px < canvas)) throw InputError("max_char_px must be smaller than canvas");
  if (min_char_px < 1 || min_char_px >= max_char_px) throw InputError("need 1 <= min_char_px < max_char_px");
  if (min_chars < 1 || max_chars < min_chars) throw InputError("need 1 <= min_chars <= max_chars");
  if (char_pool.empty()) throw InputError("character pool is empty");
  if (placement_retries < 1) throw InputError("placement_retries must be >= 1");
}

nlohmann::json BenchmarkParams::to_json() const {
  return {{"count", count},           {"canvas", canvas},
          {"max_lines", max_lines},   {"max_char_px", max_char_px},
          {"min_char_px", min_char_px}, {"min_chars", min_chars},
          {"max_chars", max_chars},   {"seed", seed},
          {"char_pool", char_pool},   {"font_ids", font_ids},
          {"background", background == Background::kWhite ? "white" : "tinted"},
          {"placement_retries", placement_retries}};
}

namespace {

struct Rgb {
  int r, g, b;
};

std::string colour_name(const Rgb& c) {
  const int m = std::max({c.r, c.g, c.b});
  if (m - std::min({c.r, c.g, c.b}) < 24) return m > 128 ? "light gray" : "dark gray";
  if (m == c.r) return m > 128 ? "pale red" : "dark red";
  if (m == c.g) return m > 128 ? "pale green" : "dark green";
  return m > 128 ? "pale blue" : "dark blue";
}

std::string where(const BBox& b, int canvas) {
  const double cy = b.y + b.h / 2.0, cx = b.x + b.w / 2.0;
  std::string v = cy < canvas / 3.0 ? "top" : (cy < 2 * canvas / 3.0 ? "middle" : "bottom");
  std::string h = cx < canvas / 3.0 ? "left" : (cx < 2 * canvas / 3.0 ? "center" : "right");
  return v + " " + h;
}

}  // namespace

Benchmark generate_tiny_benchmark(const BenchmarkParams& params, const FontRegistry& fonts) {
  params.validate();
  std::vector<std::string> font_ids = params.font_ids.empty() ? fonts.ids() : params.font_ids;
  if (font_ids.empty()) throw InputError("no fonts available for benchmark generation");
  for (const auto& id : font_ids) fonts.get(id);
  const std::vector<char32_t> pool = utf8_decode(params.char_pool);

  Benchmark out;
  const Rng root = seeded_rng(params.seed);
  for (int i = 0; i < params.count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "img_%05d", i);
    Rng rng = root.split(id);

    AnnotatedImage img;
    img.id = id;
    img.image_path = std::string(id) + ".png";
    const int wanted = rng.uniform_int(1, params.max_lines);
    std::vector<BBox> grown;
    for (int line = 0; line < wanted; ++line) {
      bool placed = false;
      for (int attempt = 0; attempt < params.placement_retries && !placed; ++attempt) {
        TextRegion r;
        const int len = rng.uniform_int(params.min_chars, params.max_chars);
        std::vector<char32_t> cps;
        for (int k = 0; k < len; ++k) cps.push_back(pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))]);
        r.text = utf8_encode(cps);
        r.font_id = font_ids[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(font_ids.size()) - 1))];
        r.font_px = rng.uniform_int(params.min_char_px, params.max_char_px - 1);
        const int w = fonts.get(r.font_id).text_width(r.text, r.font_px) + 1;
        if (w > params.canvas) continue;
        r.bbox = BBox{rng.uniform_int(0, params.canvas - w), rng.uniform_int(0, params.canvas - r.font_px), w, r.font_px};
        const BBox g{r.bbox.x - 1, r.bbox.y - 1, r.bbox.w + 2, r.bbox.h + 2};
        if (std::any_of(grown.begin(), grown.end(), [&](const BBox& o) { return o.intersects(g); })) continue;
        grown.push_back(g);
        img.regions.push_back(std::move(r));
        placed = true;
      }
      if (!placed) {
        out.notes.push_back(img.id + ": placed " + std::to_string(img.regions.size()) + " of " +
                            std::to_string(wanted) + " lines");
        break;
      }
    }

    Rgb bg{255, 255, 255}, fg{0, 0, 0};
    if (params.background == Background::kTinted) {
      bg = {rng.uniform_int(200, 255), rng.uniform_int(200, 255), rng.uniform_int(200, 255)};
      fg = {rng.uniform_int(0, 80), rng.uniform_int(0, 80), rng.uniform_int(0, 80)};
    }
    Coverage ink(params.canvas, params.canvas);
    for (const auto& r : img.regions) {
      const Coverage cov = render_region_coverage(r, params.canvas, params.canvas, fonts.get(r.font_id));
      for (std::size_t k = 0; k < cov.values.size(); ++k) ink.values[k] = std::max(ink.values[k], cov.values[k]);
    }
    img.image = Image8(params.canvas, params.canvas, 3);
    const int bgc[3] = {bg.r, bg.g, bg.b}, fgc[3] = {fg.r, fg.g, fg.b};
    for (int y = 0; y < params.canvas; ++y)
      for (int x = 0; x < params.canvas; ++x) {
        const double a = ink.at(y, x);
        for (int c = 0; c < 3; ++c)
          img.image.at(y, x, c) = static_cast<std::uint8_t>(std::lround(bgc[c] * (1.0 - a) + fgc[c] * a));
      }

    std::ostringstream shortc, detailed;
    shortc << "a card with the text";
    for (std::size_t k = 0; k < img.regions.size(); ++k) shortc << (k ? ", \"" : " \"") << img.regions[k].text << '"';
    detailed << "a " << colour_name(bg) << " card with " << img.regions.size() << " line"
             << (img.regions.size() == 1 ? "" : "s") << " of " << colour_name(fg) << " text:";
    for (std::size_t k = 0; k < img.regions.size(); ++k) {
      const auto& r = img.regions[k];
      detailed << (k ? "; \"" : " \"") << r.text << "\" in " << r.font_id << " at the " << where(r.bbox, params.canvas);
    }
    img.caption = shortc.str();
    img.captions["detailed"] = detailed.str();
    out.images.push_back(std::move(img));
  }
  return out;
}

fs::path write_benchmark(const Benchmark& bench, const fs::path& dir, const nlohmann::json& metadata) {
  fs::create_directories(dir);
  for (const auto& img : bench.images) write_png(dir / img.image_path, img.image);
  nlohmann::json meta = metadata;
  if (!bench.notes.empty()) meta["placement_notes"] = bench.notes;
  const fs::path manifest = dir / "manifest.jsonl";
  save_manifest(manifest, bench.images, meta);
  return manifest;
}

}  // namespace fontctl
