#pragma once

#include <filesystem>
#include <memory>

#include <nlohmann/json.hpp>

#include "fontctl/archive.hpp"
#include "fontctl/codec.hpp"
#include "fontctl/config.hpp"
#include "fontctl/diffusion.hpp"
#include "fontctl/models.hpp"

namespace fontctl {

// Everything the sampler needs: config, schedule and the four parameter
// groups. Checkpoints store them under base/ (denoiser), control/, codec/ and
// text/; the configuration travels in the metadata.
struct DiffusionModel {
  TrainConfig config;
  ModelDims dims;
  NoiseSchedule schedule;
  TextEncoder text;
  Denoiser base;
  ControlNet control;
  Codec codec;

  // Fresh initialization from config.seed; the control trunk starts as a copy
  // of the denoiser encoder.
  explicit DiffusionModel(const TrainConfig& cfg);

  void put(TensorArchive& ar) const;
  // Reads the groups present in the archive. Which groups are required is up
  // to the caller; see load().
  void get(const TensorArchive& ar, bool base_groups, bool control_group);

  // Base groups (base/, text/, codec/) from `path`; control/ from
  // `control_path` when given, else from `path`. The configuration stored in
  // the checkpoint is used; a control file whose model geometry disagrees is
  // rejected.
  static std::unique_ptr<DiffusionModel> load(const std::filesystem::path& path,
                                               const std::filesystem::path& control_path = {});
};

// Keys of the configuration that fix parameter shapes.
bool same_geometry(const TrainConfig& a, const TrainConfig& b);

nlohmann::json config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const nlohmann::json& j);

}  // namespace fontctl
