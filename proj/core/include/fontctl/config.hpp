#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "fontctl/types.hpp"

namespace fontctl {

using KeyValues = std::map<std::string, std::string>;

// Flat `key = value` text; '#' starts a comment. Later keys win.
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& kv);

enum class LossReduction { kMean, kSum };
std::string_view to_string(LossReduction r);
LossReduction parse_loss_reduction(std::string_view s);

enum class CodecKind { kAnalytic, kLearned };
std::string_view to_string(CodecKind c);
CodecKind parse_codec_kind(std::string_view s);

struct TrainConfig {
  // geometry
  int image_size = 64;
  int latent_channels = 4;
  int latent_size = 8;

  // noise schedule
  int timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  // objective and optimization
  double lambda_ocr = 0.1;
  double learning_rate = 1e-4;
  int batch_size = 8;
  int epochs = 1;
  int max_steps = -1;  // caps epochs * ceil(N / batch) when >= 0
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  LossReduction loss_reduction = LossReduction::kMean;
  HintKind hint_kind = HintKind::kCanny;
  bool use_ocr_loss = true;
  bool freeze_base = true;
  std::uint64_t seed = 0;
  // Which caption field conditions the text encoder ("default" = caption).
  std::string caption_source = "default";

  // architecture
  int width1 = 32;
  int width2 = 64;
  int norm_groups = 8;
  int text_dim = 32;
  int text_len = 32;

  // codec and base preparation, run before control training when no base
  // checkpoint is supplied
  CodecKind codec = CodecKind::kLearned;
  int codec_steps = 1500;
  double codec_lr = 2e-3;
  double codec_psnr_floor = 18.0;
  int base_steps = 1000;
  double base_lr = 1e-3;

  // hints
  double canny_sigma = 1.0;
  double canny_low = 0.1;
  double canny_high = 0.3;
  std::string uniform_font = "sans";

  // OCR patch geometry
  int ocr_patch_height = 32;
  int ocr_patch_max_width = 256;

  int checkpoint_every = 500;

  int downsample_factor() const { return latent_size > 0 ? image_size / latent_size : 0; }

  void validate() const;
  // Unknown keys raise InputError.
  void apply(const KeyValues& kv);
  KeyValues to_key_values() const;
};

TrainConfig load_train_config(const std::filesystem::path& path);

}  // namespace fontctl
