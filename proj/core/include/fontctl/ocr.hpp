#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fontctl/fonts.hpp"
#include "fontctl/nn.hpp"
#include "fontctl/types.hpp"

namespace fontctl {

using ag::Var;

// Recognizer input: inverted luma (1 - Y, so ink is bright and padding is
// zero), height `height`, right-padded with zeros. `widths` holds the
// unpadded width of each patch; `source` the index of the region it came
// from.
struct PatchBatch {
  Var patches;  // [R,1,height,W]
  std::vector<int> widths;
  std::vector<int> source;
  int size() const { return static_cast<int>(widths.size()); }
};

// Crops every region of batch element n of images ([N,3,H,W], values in
// [0,1]), resizes it bilinearly to `height` rows and round(w * height / h)
// columns (capped at max_width) and pads all patches to a common width that
// is the largest patch width rounded up to a multiple of 4. Zero-area regions
// are skipped. Differentiable in images; the same call on two images gives
// aligned patches.
PatchBatch crop_regions(const Var& images, int n, const std::vector<TextRegion>& regions, int height, int max_width);
PatchBatch crop_regions(const Image8& image, const std::vector<TextRegion>& regions, int height, int max_width);

// Per-layer feature maps that feed the perceptual loss, plus each layer's
// horizontal stride relative to the patch (to mask padding).
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<Var> features(const Var& patches) const = 0;
  virtual std::vector<int> strides() const = 0;
};

struct RecognizerConfig {
  std::string alphabet = "ABCDEFGHJK";
  int height = 32;
  int max_width = 256;
  int hidden = 48;

  nlohmann::json to_json() const;
  static RecognizerConfig from_json(const nlohmann::json& j);
};

// Four 3x3 convolutions (stride 2 at layers 2 and 4, ReLU, no bias on layer
// 1), a bidirectional LSTM over image columns and a per-column classifier
// trained with CTC (blank = class 0).
class Recognizer : public FeatureExtractor {
 public:
  explicit Recognizer(RecognizerConfig cfg, std::uint64_t seed = 0);

  // Post-ReLU outputs of conv layers 1..3.
  std::vector<Var> features(const Var& patches) const override;
  std::vector<int> strides() const override { return {1, 2, 2}; }
  // Feature shape of each layer for a patch of the given width, as [C,H,W].
  std::vector<Shape> layer_shapes(int width) const;

  // [R,T,K+1] with T = W / 4. When per-patch frame counts are given, the
  // backward recurrence restarts at each patch's last valid frame, so padding
  // does not leak into the valid frames.
  Var logits(const Var& patches, const std::vector<int>* frames = nullptr) const;
  static int frames(int width) { return (width + 3) / 4; }

  std::vector<std::string> decode(const PatchBatch& batch) const;
  std::string recognize(const Image8& image, const BBox& box) const;

  void freeze();
  bool frozen() const { return frozen_; }

  const RecognizerConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static Recognizer load(const std::filesystem::path& path);

  // Label indices (1-based into the alphabet); characters outside it are
  // dropped.
  std::vector<int> encode_label(const std::string& text) const;

 private:
  RecognizerConfig cfg_;
  nn::ParamStore params_;
  nn::Conv2d c1_, c2_, c3_, c4_;
  nn::Linear proj_;
  nn::Linear fw_x_, fw_h_, bw_x_, bw_h_;
  nn::Linear cls_;
  bool frozen_ = false;
};

struct RecognizerSample {
  Image8 image;
  TextRegion region;
};

struct RecognizerCorpusParams {
  int count = 5000;
  int min_px = 10;
  int max_px = 24;
  int min_chars = 1;
  int max_chars = 6;
  std::uint64_t seed = 0;
  std::vector<std::string> font_ids;  // empty: all
};

// Single-line renders on tinted backgrounds with random colours, slight box
// jitter and blur, resembling crops of decoded generator output.
std::vector<RecognizerSample> make_recognizer_corpus(const RecognizerCorpusParams& p, const std::string& alphabet,
                                                     const FontRegistry& fonts);

struct RecognizerTrainParams {
  int epochs = 12;
  int batch = 32;
  double lr = 2e-3;
  double holdout_fraction = 0.1;
  double accuracy_floor = 0.95;
  std::uint64_t seed = 0;
  bool verbose = false;
};

struct RecognizerTrainReport {
  double holdout_accuracy = 0.0;
  int holdout_size = 0;
  double final_loss = 0.0;
  int infeasible = 0;
};

// Trains with CTC on the corpus, measures exact-match accuracy on a held-out
// split and freezes the model. Throws Error when the floor is not met.
RecognizerTrainReport pretrain_recognizer(Recognizer& model, const std::vector<RecognizerSample>& corpus,
                                          const RecognizerTrainParams& params);

double recognizer_accuracy(const Recognizer& model, const std::vector<RecognizerSample>& samples);

struct OcrLossResult {
  Var loss;            // scalar
  bool empty = false;  // no pairs: loss is 0
};

// Multi-layer perceptual loss between aligned feature stacks. For each pair i
// and layer l: (1 / (H_l * V_il)) * sum over rows and the first V_il columns
// of the squared channel-vector distance, where V_il is the unpadded width at
// that layer. Summed over layers, averaged over pairs.
OcrLossResult ocr_loss_from_features(const std::vector<Var>& gt, const std::vector<Var>& pred,
                                     const std::vector<std::vector<int>>& valid_widths);

// Features of both patch batches through the extractor, then the loss above.
OcrLossResult ocr_loss(const PatchBatch& gt, const PatchBatch& pred, const FeatureExtractor& extractor);

// l_ldm + lambda * l_ocr; negative inputs are a contract violation.
double total_loss(double l_ldm, double l_ocr, double lambda);
Var total_loss(const Var& l_ldm, const Var& l_ocr, double lambda);

}  // namespace fontctl
