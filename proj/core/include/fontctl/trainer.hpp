#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fontctl/ocr.hpp"
#include "fontctl/pipeline.hpp"

namespace fontctl {

// One training example with everything precomputed: image [1,3,H,W] in
// [0,1], hint [1,1,H,W] of the configured kind, the caption selected by
// caption_source, and the regions used for OCR crops.
struct TrainingExample {
  std::string id;
  Tensor image;
  Tensor hint;
  std::string caption;
  std::vector<TextRegion> regions;
};

struct PreparedData {
  std::vector<TrainingExample> examples;
  std::vector<std::string> warnings;
};

PreparedData prepare_examples(const std::vector<AnnotatedImage>& images, const TrainConfig& cfg,
                              const FontRegistry& fonts);

struct LossRecord {
  long long step = 0;  // 1-based index of the update this record describes
  double t_mean = 0.0;
  double l_ldm = 0.0;
  std::optional<double> l_ocr;  // absent when the OCR term is off or had no regions
  double total = 0.0;
  double grad_norm = 0.0;
  double wallclock = 0.0;  // seconds since the run (or resumed run) started
  int ocr_pairs = 0;

  nlohmann::json to_json() const;
  static LossRecord from_json(const nlohmann::json& j);
};

// Mutable training state around a model: optimizer moments per parameter
// group, step counter, running loss averages and the OCR fallback counter.
// The random stream of step k is derived from (seed, k) and the data order of
// epoch e from (seed, e), so restoring the counters restores the stream.
class Trainer {
 public:
  // recognizer may be null when use_ocr_loss is false.
  Trainer(std::unique_ptr<DiffusionModel> model, std::shared_ptr<const Recognizer> recognizer);

  LossRecord train_step(const std::vector<const TrainingExample*>& batch);

  long long step() const { return step_; }
  int ocr_fallbacks() const { return ocr_fallbacks_; }
  double avg_ldm() const { return avg_[0]; }
  double avg_ocr() const { return avg_[1]; }
  double avg_total() const { return avg_[2]; }

  DiffusionModel& model() { return *model_; }
  const DiffusionModel& model() const { return *model_; }
  const TrainConfig& config() const { return model_->config; }

  TensorArchive checkpoint() const;
  // Restores parameters, moments and counters from a checkpoint written by
  // checkpoint(); the model geometry must agree.
  void restore(const TensorArchive& ar);

 private:
  std::vector<nn::ParamStore*> trainable();
  void configure_trainable();

  std::unique_ptr<DiffusionModel> model_;
  std::shared_ptr<const Recognizer> recognizer_;
  nn::AdamW opt_control_, opt_base_, opt_text_;
  long long step_ = 0;
  int ocr_fallbacks_ = 0;
  double avg_[3] = {0.0, 0.0, 0.0};
};

// Indices of the examples in step `step` (0-based) of a run over n examples.
std::vector<int> batch_indices(const TrainConfig& cfg, int n, long long step);
long long total_steps(const TrainConfig& cfg, int n);

struct InitReport {
  double codec_psnr = 0.0;
  double codec_loss = 0.0;
  double base_loss = 0.0;
};

// Prepares a fresh model for control training: fits the learned codec and
// pretrains the denoiser and text encoder with the plain diffusion loss, then
// copies the encoder into the control trunk. These stand in for the
// pretrained latent diffusion model and are part of initialization.
InitReport initialize_base(DiffusionModel& model, const std::vector<TrainingExample>& data);

struct TrainOptions {
  std::filesystem::path out_dir;
  std::filesystem::path recognizer;       // required when use_ocr_loss
  std::filesystem::path base_checkpoint;  // skips initialize_base
  bool resume = false;                    // continue from out_dir/last.ckpt
  long long stop_after = -1;              // stop once this step is reached
  std::function<void(const LossRecord&)> on_step;
  std::function<void(const std::string&)> log;
};

struct TrainOutcome {
  std::filesystem::path final_checkpoint;
  std::filesystem::path metrics_log;
  long long steps = 0;
  int ocr_fallbacks = 0;
  InitReport init;
};

// Full run: initialization (or base checkpoint / resume), then
// epochs * ceil(N / batch) steps (capped by max_steps), writing
// init.ckpt, step_XXXXXX.ckpt every checkpoint_every steps, last.ckpt,
// final.ckpt and metrics.jsonl into out_dir.
TrainOutcome train(const TrainConfig& cfg, const std::vector<AnnotatedImage>& data, const FontRegistry& fonts,
                   const TrainOptions& opts);

std::vector<LossRecord> read_metrics(const std::filesystem::path& path);

}  // namespace fontctl
