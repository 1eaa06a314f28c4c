#include "fontctl/sampler.hpp"

#include <cmath>
#include <fstream>

#include "fontctl/dataset.hpp"
#include "fontctl/error.hpp"

namespace fontctl {

nlohmann::json SampleRequest::to_json() const {
  nlohmann::json regs = nlohmann::json::array();
  for (const auto& r : regions) regs.push_back(region_to_json(r));
  nlohmann::json j{{"caption", caption},
                   {"negative_caption", negative_caption},
                   {"regions", regs},
                   {"hint_kind", std::string(to_string(hint_kind))},
                   {"steps", steps},
                   {"guidance", guidance},
                   {"seed", seed},
                   {"batch", batch}};
  if (!reference_image.empty()) j["reference_image"] = reference_image.string();
  return j;
}

SampleRequest SampleRequest::from_json(const nlohmann::json& j) {
  SampleRequest r;
  try {
    r.caption = j.value("caption", std::string());
    r.negative_caption = j.value("negative_caption", std::string());
    for (const auto& reg : j.value("regions", nlohmann::json::array())) r.regions.push_back(region_from_json(reg));
    r.hint_kind = parse_hint_kind(j.value("hint_kind", std::string("glyph")));
    r.steps = j.value("steps", 20);
    r.guidance = j.value("guidance", 1.0);
    r.seed = j.value("seed", std::uint64_t{0});
    r.batch = j.value("batch", 4);
    if (j.contains("reference_image")) r.reference_image = j["reference_image"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed sample request: ") + e.what());
  }
  if (r.steps < 1) throw InputError("sample request: steps must be >= 1");
  if (r.batch < 1) throw InputError("sample request: batch must be >= 1");
  return r;
}

SampleRequest SampleRequest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open request file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  SampleRequest r = from_json(j);
  if (!r.reference_image.empty() && r.reference_image.is_relative()) r.reference_image = path.parent_path() / r.reference_image;
  return r;
}

Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const Tensor& eps_hat, const NoiseSchedule& s) {
  s.check_t(t);
  s.check_t(t_prev, true);
  if (t_prev > t) throw InputError("ddim_step: t_prev " + std::to_string(t_prev) + " exceeds t " + std::to_string(t));
  if (z_t.shape() != eps_hat.shape()) throw ShapeError("ddim_step: z_t and eps_hat shapes differ");
  if (t_prev == t) return z_t;
  const double a = s.sqrt_ab(t), b = s.sqrt_one_minus_ab(t);
  const double ap = s.sqrt_ab(t_prev), bp = s.sqrt_one_minus_ab(t_prev);
  Tensor out(z_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double z0 = (z_t[i] - b * eps_hat[i]) / a;
    out[i] = ap * z0 + bp * eps_hat[i];
  }
  return out;
}

std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) {
    throw InputError("steps must be in [1, " + std::to_string(T) + "], got " + std::to_string(steps));
  }
  std::vector<int> ts;
  for (int i = 0; i < steps; ++i) {
    ts.push_back(T - static_cast<int>(static_cast<long long>(i) * T / steps));
  }
  return ts;
}

HintResult build_request_hint(const SampleRequest& req, const TrainConfig& cfg, const FontRegistry& fonts) {
  const int size = cfg.image_size;
  for (const auto& r : req.regions) {
    const BBox c = clamp_bbox(r.bbox, size, size);
    if (c.area() == 0) throw InputError("region '" + r.text + "' lies outside the " + std::to_string(size) + " px canvas");
    if (req.hint_kind != HintKind::kGlyph && !fonts.contains(r.font_id)) {
      throw InputError("region '" + r.text + "': unknown font '" + r.font_id + "'");
    }
  }
  if (req.hint_kind == HintKind::kGlyph) {
    try {
      return make_glyph_hint(req.regions, size, size, cfg.uniform_font, fonts);
    } catch (const InputError& e) {
      throw InputError(std::string("cannot build glyph hint: ") + e.what());
    }
  }
  AnnotatedImage ref;
  ref.id = "request";
  ref.regions = req.regions;
  if (!req.reference_image.empty()) {
    ref.image = read_png(req.reference_image);
    if (ref.image.height != size || ref.image.width != size) {
      throw InputError("reference image must be " + std::to_string(size) + "x" + std::to_string(size));
    }
  } else {
    try {
      ref.image = render_typographic_image(req.regions, size, size, fonts);
    } catch (const InputError& e) {
      throw InputError(std::string("cannot build hint: ") + e.what());
    }
  }
  if (req.hint_kind == HintKind::kCanny) {
    return make_canny_hint(ref, CannyParams{cfg.canny_low, cfg.canny_high, cfg.canny_sigma});
  }
  return make_font_hint(ref, threshold_segmenter());
}

SampleResult sample(const SampleRequest& req, const DiffusionModel& model, const FontRegistry& fonts) {
  HintResult h = build_request_hint(req, model.config, fonts);
  SampleResult out = sample_with_hint(req, h.hint, model);
  out.warnings = std::move(h.warnings);
  return out;
}

SampleResult sample_with_hint(const SampleRequest& req, const HintImage& hint, const DiffusionModel& model) {
  const TrainConfig& cfg = model.config;
  if (hint.height != cfg.image_size || hint.width != cfg.image_size) {
    throw InputError("hint is " + std::to_string(hint.height) + "x" + std::to_string(hint.width) + ", model expects " +
                     std::to_string(cfg.image_size));
  }
  if (req.batch < 1) throw InputError("batch must be >= 1");
  const std::vector<int> ts = ddim_timesteps(model.schedule.T, req.steps);
  ag::NoGradGuard guard;

  const int n = req.batch, c = cfg.latent_channels, m = cfg.latent_size;
  Rng rng = seeded_rng(req.seed).split("latent");
  Tensor z = Tensor::randn({n, c, m, m}, rng);

  const TextEmbedding cond = model.text(std::vector<std::string>(static_cast<std::size_t>(n), req.caption));
  const bool guided = req.guidance != 1.0;
  TextEmbedding uncond;
  if (guided) uncond = model.text(std::vector<std::string>(static_cast<std::size_t>(n), req.negative_caption));

  const Tensor h1 = hint_to_tensor(hint);
  std::vector<Var> copies(static_cast<std::size_t>(n), ag::constant(h1));
  const Var hints = ag::stack_batch(copies);

  SampleResult out;
  out.hint = hint;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    const std::vector<int> tv(static_cast<std::size_t>(n), t);
    const Var zt = ag::constant(z);
    const ControlFeatures f = model.control.encode_hint(hints, zt, tv, cond);
    Tensor eps = model.base.predict_eps(zt, tv, cond, &f).value();
    if (guided) {
      const ControlFeatures fu = model.control.encode_hint(hints, zt, tv, uncond);
      const Tensor eu = model.base.predict_eps(zt, tv, uncond, &fu).value();
      for (std::size_t k = 0; k < eps.size(); ++k) eps[k] = eu[k] + req.guidance * (eps[k] - eu[k]);
    }
    out.denoiser_evaluations += n;
    z = ddim_step(z, t, t_prev, eps, model.schedule);
  }

  Tensor x = model.codec.decode(ag::constant(z)).value();
  for (double& v : x.span()) {
    if (!std::isfinite(v)) throw Error("sampler produced a non-finite pixel");
    v = std::clamp(v, 0.0, 1.0);
  }
  for (int k = 0; k < n; ++k) out.images.push_back(tensor_to_image(x, k));
  return out;
}

}  // namespace fontctl
