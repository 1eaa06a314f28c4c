#include "fontctl/hints.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "fontctl/error.hpp"

namespace fontctl {

void CannyParams::validate() const {
  if (!(low_threshold > 0.0 && low_threshold < high_threshold)) {
    throw InputError("canny: need 0 < low_threshold < high_threshold");
  }
  if (!(gaussian_sigma > 0.0)) throw InputError("canny: gaussian_sigma must be positive");
}

Segmenter threshold_segmenter(double threshold) {
  return [threshold](const Image8& crop) -> std::optional<std::vector<double>> {
    std::vector<double> mask(static_cast<std::size_t>(crop.height) * crop.width, 0.0);
    for (int y = 0; y < crop.height; ++y)
      for (int x = 0; x < crop.width; ++x)
        mask[static_cast<std::size_t>(y) * crop.width + x] = luma(crop, y, x) < threshold ? 1.0 : 0.0;
    return mask;
  };
}

Coverage render_region_coverage(const TextRegion& region, int height, int width, const Font& font) {
  if (region.font_px > region.bbox.h) {
    throw InputError("region '" + region.text + "': glyph height " + std::to_string(region.font_px) +
                     " exceeds box height " + std::to_string(region.bbox.h));
  }
  if (region.font_px <= 0) throw InputError("region '" + region.text + "': font_px must be positive");
  Coverage cov(height, width);
  font.draw(cov, region.text, region.bbox.x, region.bbox.y, region.font_px, region.bbox);
  return cov;
}

Image8 render_typographic_image(const std::vector<TextRegion>& regions, int height, int width,
                                const FontRegistry& fonts) {
  Coverage ink(height, width);
  for (const auto& r : regions) {
    const Coverage cov = render_region_coverage(r, height, width, fonts.get(r.font_id));
    for (std::size_t i = 0; i < cov.values.size(); ++i) ink.values[i] = std::max(ink.values[i], cov.values[i]);
  }
  Image8 img(height, width, 3, 255);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const auto v = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - ink.at(y, x))));
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = v;
    }
  return img;
}

namespace {

Image8 crop_image(const Image8& img, const BBox& b) {
  Image8 out(b.h, b.w, img.channels);
  for (int y = 0; y < b.h; ++y)
    for (int x = 0; x < b.w; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(b.y + y, b.x + x, c);
  return out;
}

void paste_max(HintImage& hint, const std::vector<double>& plane, const BBox& b) {
  for (int y = 0; y < b.h; ++y)
    for (int x = 0; x < b.w; ++x) {
      double& dst = hint.at(b.y + y, b.x + x);
      dst = std::max(dst, plane[static_cast<std::size_t>(y) * b.w + x]);
    }
}

std::vector<double> gaussian_blur(const std::vector<double>& src, int h, int w, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double z = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    z += k[i + radius];
  }
  for (double& v : k) v /= z;
  std::vector<double> tmp(src.size()), out(src.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * src[static_cast<std::size_t>(y) * w + std::clamp(x + i, 0, w - 1)];
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0, h - 1)) * w + x];
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  return out;
}

}  // namespace

std::vector<double> canny_edges(const std::vector<double>& gray, int h, int w, const CannyParams& params) {
  params.validate();
  std::vector<double> edges(static_cast<std::size_t>(h) * w, 0.0);
  if (h <= 0 || w <= 0) return edges;
  const std::vector<double> blur = gaussian_blur(gray, h, w, params.gaussian_sigma);
  auto px = [&](int y, int x) { return blur[static_cast<std::size_t>(std::clamp(y, 0, h - 1)) * w + std::clamp(x, 0, w - 1)]; };

  std::vector<double> mag(edges.size()), gxs(edges.size()), gys(edges.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) - (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
      const double gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) - (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      gxs[i] = gx;
      gys[i] = gy;
      mag[i] = std::hypot(gx, gy) / 4.0;
    }

  auto m = [&](int y, int x) { return (y < 0 || y >= h || x < 0 || x >= w) ? 0.0 : mag[static_cast<std::size_t>(y) * w + x]; };
  std::vector<double> thin(edges.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double v = mag[i];
      if (v < params.low_threshold) continue;
      double angle = std::atan2(gys[i], gxs[i]) * 180.0 / M_PI;
      if (angle < 0) angle += 180.0;
      int dy = 0, dx = 0;
      if (angle < 22.5 || angle >= 157.5) {
        dx = 1;
      } else if (angle < 67.5) {
        dy = 1;
        dx = 1;
      } else if (angle < 112.5) {
        dy = 1;
      } else {
        dy = 1;
        dx = -1;
      }
      // Strict on the forward side, inclusive on the backward side, so a
      // two-pixel plateau keeps exactly one pixel.
      if (v > m(y + dy, x + dx) && v >= m(y - dy, x - dx)) thin[i] = v;
    }

  std::deque<std::pair<int, int>> queue;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (thin[i] >= params.high_threshold) {
        edges[i] = 1.0;
        queue.emplace_back(y, x);
      }
    }
  while (!queue.empty()) {
    const auto [y, x] = queue.front();
    queue.pop_front();
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int ny = y + dy, nx = x + dx;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        const std::size_t j = static_cast<std::size_t>(ny) * w + nx;
        if (edges[j] == 0.0 && thin[j] >= params.low_threshold) {
          edges[j] = 1.0;
          queue.emplace_back(ny, nx);
        }
      }
  }
  return edges;
}

HintResult make_canny_hint(const AnnotatedImage& image, const CannyParams& params) {
  params.validate();
  const Image8& img = image.image;
  HintResult out{HintImage(HintKind::kCanny, img.height, img.width, image.id), 0, {}};
  for (const auto& r : image.regions) {
    const BBox b = clamp_bbox(r.bbox, img.width, img.height);
    if (b.area() == 0) {
      ++out.skipped_regions;
      out.warnings.push_back("region '" + r.text + "' has no area inside the image; skipped");
      continue;
    }
    std::vector<double> gray(static_cast<std::size_t>(b.area()));
    for (int y = 0; y < b.h; ++y)
      for (int x = 0; x < b.w; ++x) gray[static_cast<std::size_t>(y) * b.w + x] = luma(img, b.y + y, b.x + x) / 255.0;
    paste_max(out.hint, canny_edges(gray, b.h, b.w, params), b);
  }
  return out;
}

HintResult make_font_hint(const AnnotatedImage& image, const Segmenter& segmenter) {
  const Image8& img = image.image;
  HintResult out{HintImage(HintKind::kFont, img.height, img.width, image.id), 0, {}};
  for (const auto& r : image.regions) {
    const BBox b = clamp_bbox(r.bbox, img.width, img.height);
    if (b.area() == 0) {
      ++out.skipped_regions;
      out.warnings.push_back("region '" + r.text + "' has no area inside the image; skipped");
      continue;
    }
    std::optional<std::vector<double>> mask;
    try {
      mask = segmenter(crop_image(img, b));
    } catch (const std::exception& e) {
      mask.reset();
    }
    if (!mask || mask->size() != static_cast<std::size_t>(b.area())) {
      ++out.skipped_regions;
      out.warnings.push_back("segmenter failed on region '" + r.text + "'; skipped");
      continue;
    }
    for (double& v : *mask) v = v >= 0.5 ? 1.0 : 0.0;
    paste_max(out.hint, *mask, b);
  }
  return out;
}

HintResult make_glyph_hint(const std::vector<TextRegion>& regions, int height, int width,
                           const std::string& uniform_font, const FontRegistry& fonts) {
  const Font& font = fonts.get(uniform_font);
  HintResult out{HintImage(HintKind::kGlyph, height, width), 0, {}};
  for (const auto& r : regions) {
    const Coverage cov = render_region_coverage(r, height, width, font);
    for (std::size_t i = 0; i < cov.values.size(); ++i) out.hint.pixels[i] = std::max(out.hint.pixels[i], cov.values[i]);
  }
  return out;
}

}  // namespace fontctl
