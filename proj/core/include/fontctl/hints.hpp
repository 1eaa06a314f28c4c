#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fontctl/fonts.hpp"
#include "fontctl/types.hpp"

namespace fontctl {

struct CannyParams {
  double low_threshold = 0.1;
  double high_threshold = 0.3;
  double gaussian_sigma = 1.0;

  void validate() const;
};

// Hint plus the regions that had to be skipped while building it.
struct HintResult {
  HintImage hint;
  int skipped_regions = 0;
  std::vector<std::string> warnings;
};

// Per-pixel text mask for an RGB crop, values in {0,1}, crop-sized
// (row-major). std::nullopt signals a failure for that crop.
using Segmenter = std::function<std::optional<std::vector<double>>(const Image8& crop)>;

// Marks pixels whose luma is below `threshold` as text.
Segmenter threshold_segmenter(double threshold = 128.0);

// Black text on a white RGB canvas, each region in its own font.
// Throws InputError when a glyph height exceeds its box or a font is unknown.
Image8 render_typographic_image(const std::vector<TextRegion>& regions, int height, int width,
                                const FontRegistry& fonts);

// Coverage of one region's text rendered at its box, clipped to the box.
Coverage render_region_coverage(const TextRegion& region, int height, int width, const Font& font);

HintResult make_canny_hint(const AnnotatedImage& image, const CannyParams& params);
HintResult make_font_hint(const AnnotatedImage& image, const Segmenter& segmenter);
// White glyphs on black, every region drawn in `uniform_font`.
HintResult make_glyph_hint(const std::vector<TextRegion>& regions, int height, int width,
                           const std::string& uniform_font, const FontRegistry& fonts);

// Canny edge map of a single-channel [0,1] plane: Gaussian blur, Sobel
// gradient (magnitude scaled so a unit step reads 1), non-maximum suppression
// along the quantized gradient direction, then hysteresis with 8-connectivity.
// Returns a {0,1} plane of the same size.
std::vector<double> canny_edges(const std::vector<double>& gray, int height, int width, const CannyParams& params);

}  // namespace fontctl
