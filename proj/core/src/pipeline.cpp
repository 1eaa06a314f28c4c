#include "fontctl/pipeline.hpp"

#include "fontctl/error.hpp"

namespace fontctl {

namespace {

Rng init_rng(const TrainConfig& cfg, const char* part) { return seeded_rng(cfg.seed).split(std::string("init/") + part); }

TrainConfig checked(const TrainConfig& cfg) {
  cfg.validate();
  return cfg;
}

template <typename T>
T make_part(const TrainConfig& cfg, const char* part) {
  Rng rng = init_rng(cfg, part);
  return T(ModelDims::from(cfg), rng);
}

}  // namespace

DiffusionModel::DiffusionModel(const TrainConfig& cfg)
    : config(checked(cfg)),
      dims(ModelDims::from(cfg)),
      schedule(make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)),
      text(make_part<TextEncoder>(cfg, "text")),
      base(make_part<Denoiser>(cfg, "base")),
      control(make_part<ControlNet>(cfg, "control")),
      codec([&] {
        Rng rng = init_rng(cfg, "codec");
        return Codec(cfg.codec, ModelDims::from(cfg), rng);
      }()) {
  control.init_trunk_from(base);
}

void DiffusionModel::put(TensorArchive& ar) const {
  ar.meta["config"] = config_to_json(config);
  ar.meta["latent_scale"] = codec.latent_scale();
  ar.put_params("base/", base.params());
  ar.put_params("text/", text.params());
  ar.put_params("codec/", codec.params());
  ar.put_params("control/", control.params());
}

void DiffusionModel::get(const TensorArchive& ar, bool base_groups, bool control_group) {
  if (base_groups) {
    ar.get_params("base/", base.params());
    ar.get_params("text/", text.params());
    ar.get_params("codec/", codec.params());
    if (ar.meta.contains("latent_scale")) codec.set_latent_scale(ar.meta["latent_scale"].get<double>());
  }
  if (control_group) ar.get_params("control/", control.params());
}

std::unique_ptr<DiffusionModel> DiffusionModel::load(const std::filesystem::path& path,
                                                     const std::filesystem::path& control_path) {
  const TensorArchive ar = TensorArchive::load(path);
  if (!ar.meta.contains("config")) throw InputError(path.string() + ": checkpoint has no configuration");
  auto model = std::make_unique<DiffusionModel>(config_from_json(ar.meta["config"]));
  if (control_path.empty()) {
    model->get(ar, true, ar.has_prefix("control/"));
    return model;
  }
  model->get(ar, true, false);
  const TensorArchive ctl = TensorArchive::load(control_path);
  if (ctl.meta.contains("config") && !same_geometry(model->config, config_from_json(ctl.meta["config"]))) {
    throw InputError(control_path.string() + ": control checkpoint was built for a different model geometry");
  }
  model->get(ctl, false, true);
  return model;
}

bool same_geometry(const TrainConfig& a, const TrainConfig& b) {
  return a.image_size == b.image_size && a.latent_channels == b.latent_channels && a.latent_size == b.latent_size &&
         a.width1 == b.width1 && a.width2 == b.width2 && a.norm_groups == b.norm_groups && a.text_dim == b.text_dim &&
         a.text_len == b.text_len && a.codec == b.codec && a.timesteps == b.timesteps;
}

nlohmann::json config_to_json(const TrainConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : cfg.to_key_values()) j[k] = v;
  return j;
}

TrainConfig config_from_json(const nlohmann::json& j) {
  KeyValues kv;
  for (const auto& [k, v] : j.items()) kv[k] = v.is_string() ? v.get<std::string>() : v.dump();
  TrainConfig cfg;
  cfg.apply(kv);
  cfg.validate();
  return cfg;
}

}  // namespace fontctl
