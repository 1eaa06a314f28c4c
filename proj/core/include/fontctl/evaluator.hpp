#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fontctl/ocr.hpp"
#include "fontctl/pipeline.hpp"

namespace fontctl {

// Levenshtein distance over code points.
int edit_distance(std::string_view a, std::string_view b);

// 1 - edit_distance / max length; 1 when both are empty.
double normalized_edit_distance(std::string_view pred, std::string_view gt);

// Fraction of exact matches after trimming and collapsing whitespace. Case
// is significant. Throws InputError on an empty list.
double sentence_accuracy(const std::vector<std::pair<std::string, std::string>>& pred_gt);

// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)) with eps * I added to
// both covariances. Rows are samples.
double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                        double eps = 1e-6);

// Reads the text inside `box` of an image. Throwing counts as a failure.
using OcrEngine = std::function<std::string(const Image8& image, const BBox& box)>;

OcrEngine builtin_ocr(std::shared_ptr<const Recognizer> recognizer);
// Writes each patch to a temporary PNG, runs `command <png>` and takes the
// first line of its standard output.
OcrEngine external_ocr(std::string command);

// Global-average-pooled layer-3 recognizer features of the whole image.
std::vector<double> recognizer_image_features(const Recognizer& rec, const Image8& image);

struct RegionRecord {
  std::string image_id;
  int sample = 0;  // index within the generated batch; 0 in pass-through mode
  int region = 0;
  std::string gt;
  std::string pred;
  double ned = 0.0;
  bool ocr_failed = false;
};

struct EvalReport {
  std::string label;
  double acc = 0.0;
  double ned = 0.0;
  std::optional<double> fid;
  int images = 0;
  int lines = 0;
  int ocr_failures = 0;
  std::vector<RegionRecord> records;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static EvalReport load(const std::filesystem::path& path);
};

struct EvalOptions {
  bool generate = true;  // false: OCR the benchmark images themselves
  int batch = 4;
  int steps = 20;
  double guidance = 1.0;
  std::uint64_t seed = 0;
  std::string caption_source = "default";
  std::string label;
  // When set, FID is computed between generated and benchmark images.
  std::function<std::vector<double>(const Image8&)> features;
  // Generated images are written here when non-empty.
  std::filesystem::path image_dir;
  std::function<void(const std::string&)> log;
};

// model may be null in pass-through mode.
EvalReport evaluate_benchmark(const DiffusionModel* model, const std::vector<AnnotatedImage>& benchmark,
                              const OcrEngine& ocr, const FontRegistry& fonts, const EvalOptions& opts);

struct PlotOutput {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> notes;
};

// acc_ned.png (grouped bars per report), fid.png when any report has FID,
// loss_curves.png when metrics logs are given. Fixed layout; identical
// inputs give identical bytes.
PlotOutput emit_plots(const std::vector<EvalReport>& reports, const std::vector<std::filesystem::path>& metrics_logs,
                      const std::filesystem::path& out_dir);

}  // namespace fontctl
