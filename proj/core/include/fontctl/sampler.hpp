#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fontctl/fonts.hpp"
#include "fontctl/hints.hpp"
#include "fontctl/pipeline.hpp"

namespace fontctl {

struct SampleRequest {
  std::string caption;
  // Unconditional prompt used when guidance != 1.
  std::string negative_caption;
  std::vector<TextRegion> regions;
  HintKind hint_kind = HintKind::kGlyph;
  int steps = 20;
  double guidance = 1.0;
  std::uint64_t seed = 0;
  int batch = 4;
  // Optional reference image for canny/font hints. Without one the hint is
  // taken from a typographic rendering of the regions in their fonts.
  std::filesystem::path reference_image;

  nlohmann::json to_json() const;
  static SampleRequest from_json(const nlohmann::json& j);
  static SampleRequest load(const std::filesystem::path& path);
};

// Deterministic DDIM update (eta = 0) from t to t_prev (0 <= t_prev <= t;
// t_prev = 0 lands on the clean signal).
Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const Tensor& eps_hat, const NoiseSchedule& s);

// Strictly decreasing timesteps, uniformly strided over 1..T, starting at T;
// the step after the last one goes to 0.
std::vector<int> ddim_timesteps(int T, int steps);

struct SampleResult {
  std::vector<Image8> images;
  HintImage hint;
  // Denoiser predictions made, counted per image (a guided step counts once).
  long long denoiser_evaluations = 0;
  std::vector<std::string> warnings;
};

// Builds the conditioning hint for a request at the model's resolution.
HintResult build_request_hint(const SampleRequest& req, const TrainConfig& cfg, const FontRegistry& fonts);

SampleResult sample(const SampleRequest& req, const DiffusionModel& model, const FontRegistry& fonts);

// Lower level: runs DDIM for a batch sharing one hint and prompt. Exposed for
// evaluation and tests.
SampleResult sample_with_hint(const SampleRequest& req, const HintImage& hint, const DiffusionModel& model);

}  // namespace fontctl
