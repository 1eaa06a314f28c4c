#include "fontctl/evaluator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <unistd.h>

#include <Eigen/Dense>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "fontctl/dataset.hpp"
#include "fontctl/error.hpp"
#include "fontctl/sampler.hpp"
#include "fontctl/trainer.hpp"

namespace fs = std::filesystem;

namespace fontctl {

int edit_distance(std::string_view a, std::string_view b) {
  const auto x = utf8_decode(a), y = utf8_decode(b);
  std::vector<int> prev(y.size() + 1), cur(y.size() + 1);
  for (std::size_t j = 0; j <= y.size(); ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= x.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= y.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x[i - 1] == y[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[y.size()];
}

double normalized_edit_distance(std::string_view pred, std::string_view gt) {
  const std::size_t n = std::max(utf8_decode(pred).size(), utf8_decode(gt).size());
  if (n == 0) return 1.0;
  return 1.0 - static_cast<double>(edit_distance(pred, gt)) / static_cast<double>(n);
}

double sentence_accuracy(const std::vector<std::pair<std::string, std::string>>& pred_gt) {
  if (pred_gt.empty()) throw InputError("sentence_accuracy needs at least one pair");
  int hits = 0;
  for (const auto& [p, g] : pred_gt) hits += normalize_whitespace(p) == normalize_whitespace(g) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pred_gt.size());
}

namespace {

Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows, const char* what) {
  if (rows.size() < 2) throw InputError(std::string("frechet_distance: ") + what + " needs at least two samples");
  const std::size_t d = rows[0].size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d) throw InputError("frechet_distance: ragged feature rows");
    for (std::size_t j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::VectorXd& mu) {
  const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
  return (c.transpose() * c) / static_cast<double>(x.rows() - 1);
}

Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                        double eps) {
  const Eigen::MatrixXd xa = to_matrix(a, "first set"), xb = to_matrix(b, "second set");
  if (xa.cols() != xb.cols()) throw InputError("frechet_distance: feature dimensions differ");
  const Eigen::Index d = xa.cols();
  const Eigen::VectorXd ma = xa.colwise().mean(), mb = xb.colwise().mean();
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd sa = covariance(xa, ma) + eps * I, sb = covariance(xb, mb) + eps * I;
  // tr((Sa Sb)^(1/2)) = tr((Sa^(1/2) Sb Sa^(1/2))^(1/2)); the inner matrix is
  // symmetric positive semi-definite.
  const Eigen::MatrixXd ra = sym_sqrt(sa);
  const Eigen::MatrixXd inner = ra * sb * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double fd = (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  if (!std::isfinite(fd)) throw Error("frechet_distance: non-finite result");
  return std::max(0.0, fd);
}

OcrEngine builtin_ocr(std::shared_ptr<const Recognizer> recognizer) {
  if (!recognizer) throw InputError("builtin OCR needs a recognizer");
  return [recognizer](const Image8& image, const BBox& box) { return recognizer->recognize(image, box); };
}

OcrEngine external_ocr(std::string command) {
  if (trim(command).empty()) throw InputError("external OCR command is empty");
  return [command](const Image8& image, const BBox& box) {
    const BBox b = clamp_bbox(box, image.width, image.height);
    if (b.area() == 0) return std::string();
    Image8 crop(b.h, b.w, image.channels);
    for (int y = 0; y < b.h; ++y)
      for (int x = 0; x < b.w; ++x)
        for (int c = 0; c < image.channels; ++c) crop.at(y, x, c) = image.at(b.y + y, b.x + x, c);
    char tmpl[] = "/tmp/fontctl_patch_XXXXXX";
    const int fd = mkstemp(tmpl);
    if (fd < 0) throw Error("cannot create a temporary patch file");
    close(fd);
    const fs::path png = std::string(tmpl) + ".png";
    fs::rename(tmpl, png);
    write_png(png, crop);
    const std::string cmd = command + " '" + png.string() + "'";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) {
      fs::remove(png);
      throw Error("cannot run OCR command: " + command);
    }
    std::string out;
    std::array<char, 256> buf{};
    while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe)) {
      out += buf.data();
      if (out.find('\n') != std::string::npos) break;
    }
    while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe)) {
    }
    const int status = pclose(pipe);
    fs::remove(png);
    if (status != 0) throw Error("OCR command exited with status " + std::to_string(status));
    return trim(out.substr(0, out.find('\n')));
  };
}

std::vector<double> recognizer_image_features(const Recognizer& rec, const Image8& image) {
  TextRegion whole;
  whole.bbox = {0, 0, image.width, image.height};
  const int width = std::min(rec.config().max_width, image.width * rec.config().height / std::max(1, image.height));
  const PatchBatch pb = crop_regions(image, {whole}, rec.config().height, std::max(width, 4));
  ag::NoGradGuard guard;
  const Tensor f = rec.features(pb.patches)[2].value();
  const int C = f.dim(1), H = f.dim(2), W = f.dim(3);
  std::vector<double> out(static_cast<std::size_t>(C), 0.0);
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int i = 0; i < H * W; ++i) s += f[static_cast<std::size_t>(c) * H * W + i];
    out[static_cast<std::size_t>(c)] = s / (H * W);
  }
  return out;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records) {
    recs.push_back({{"image_id", r.image_id},
                    {"sample", r.sample},
                    {"region", r.region},
                    {"gt", r.gt},
                    {"pred", r.pred},
                    {"ned", r.ned},
                    {"ocr_failed", r.ocr_failed}});
  }
  return {{"label", label},
          {"acc", acc},
          {"ned", ned},
          {"fid", fid ? nlohmann::json(*fid) : nlohmann::json(nullptr)},
          {"images", images},
          {"lines", lines},
          {"ocr_failures", ocr_failures},
          {"records", recs}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.label = j.value("label", std::string());
    r.acc = j.at("acc").get<double>();
    r.ned = j.at("ned").get<double>();
    if (j.contains("fid") && !j["fid"].is_null()) r.fid = j["fid"].get<double>();
    r.images = j.value("images", 0);
    r.lines = j.value("lines", 0);
    r.ocr_failures = j.value("ocr_failures", 0);
    for (const auto& x : j.value("records", nlohmann::json::array())) {
      r.records.push_back({x.at("image_id").get<std::string>(), x.value("sample", 0), x.value("region", 0),
                           x.at("gt").get<std::string>(), x.at("pred").get<std::string>(), x.value("ned", 0.0),
                           x.value("ocr_failed", false)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed report: ") + e.what());
  }
  return r;
}

void EvalReport::save(const fs::path& path) const { write_file_atomic(path, to_json().dump(2) + "\n"); }

EvalReport EvalReport::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open report: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

EvalReport evaluate_benchmark(const DiffusionModel* model, const std::vector<AnnotatedImage>& benchmark,
                              const OcrEngine& ocr, const FontRegistry& fonts, const EvalOptions& opts) {
  if (opts.generate && !model) throw InputError("evaluation with generation needs a checkpoint");
  if (benchmark.empty()) throw InputError("benchmark is empty");
  EvalReport rep;
  rep.label = opts.label;
  std::vector<std::pair<std::string, std::string>> pairs;
  std::vector<std::vector<double>> feat_gen, feat_ref;
  double ned_sum = 0.0;
  if (!opts.image_dir.empty()) fs::create_directories(opts.image_dir);

  auto read_lines = [&](const Image8& img, const AnnotatedImage& entry, int sample) {
    for (std::size_t k = 0; k < entry.regions.size(); ++k) {
      RegionRecord r;
      r.image_id = entry.id;
      r.sample = sample;
      r.region = static_cast<int>(k);
      r.gt = entry.regions[k].text;
      try {
        r.pred = ocr(img, entry.regions[k].bbox);
      } catch (const std::exception& e) {
        r.pred.clear();
        r.ocr_failed = true;
        ++rep.ocr_failures;
      }
      r.ned = normalized_edit_distance(r.pred, r.gt);
      ned_sum += r.ned;
      pairs.emplace_back(r.pred, r.gt);
      rep.records.push_back(std::move(r));
    }
  };

  for (std::size_t i = 0; i < benchmark.size(); ++i) {
    const AnnotatedImage& entry = benchmark[i];
    if (opts.features) feat_ref.push_back(opts.features(entry.image));
    if (!opts.generate) {
      read_lines(entry.image, entry, 0);
      ++rep.images;
      continue;
    }
    if (entry.image.height != model->config.image_size || entry.image.width != model->config.image_size) {
      throw InputError("benchmark image " + entry.id + " does not match the model resolution " +
                       std::to_string(model->config.image_size));
    }
    SampleRequest req;
    req.caption = entry.caption_for(opts.caption_source);
    req.regions = entry.regions;
    req.hint_kind = model->config.hint_kind;
    req.steps = opts.steps;
    req.batch = opts.batch;
    req.guidance = opts.guidance;
    req.seed = mix_seed(opts.seed, entry.id);
    const SampleResult res = sample(req, *model, fonts);
    for (int s = 0; s < static_cast<int>(res.images.size()); ++s) {
      const Image8& img = res.images[static_cast<std::size_t>(s)];
      read_lines(img, entry, s);
      if (opts.features) feat_gen.push_back(opts.features(img));
      if (!opts.image_dir.empty()) {
        char name[64];
        std::snprintf(name, sizeof name, "_%d.png", s);
        write_png(opts.image_dir / (entry.id + name), img);
      }
      ++rep.images;
    }
    if (opts.log && (i + 1) % 10 == 0) opts.log("evaluated " + std::to_string(i + 1) + "/" + std::to_string(benchmark.size()));
  }
  rep.lines = static_cast<int>(pairs.size());
  if (!pairs.empty()) {
    rep.acc = sentence_accuracy(pairs);
    rep.ned = ned_sum / static_cast<double>(pairs.size());
  }
  if (opts.features && opts.generate && feat_gen.size() >= 2 && feat_ref.size() >= 2) {
    rep.fid = frechet_distance(feat_gen, feat_ref);
  }
  return rep;
}

namespace {

const cv::Scalar kInk(40, 40, 40), kGrid(220, 220, 220);
const std::array<cv::Scalar, 4> kColours{cv::Scalar(180, 119, 31), cv::Scalar(14, 127, 255), cv::Scalar(44, 160, 44),
                                         cv::Scalar(40, 39, 214)};

void put(cv::Mat& img, const std::string& s, cv::Point p, double scale = 0.4) {
  cv::putText(img, s, p, cv::FONT_HERSHEY_SIMPLEX, scale, kInk, 1, cv::LINE_AA);
}

std::string fmt3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

void save_png(const fs::path& path, const cv::Mat& img) {
  std::vector<unsigned char> bytes;
  if (!cv::imencode(".png", img, bytes)) throw Error("cannot encode plot " + path.string());
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

// Bars of `series` (one vector per series, one value per group) on [0, top].
cv::Mat bar_chart(const std::string& title, const std::vector<std::string>& groups,
                  const std::vector<std::string>& series_names, const std::vector<std::vector<double>>& series,
                  double top) {
  const int group_w = 40 + 30 * static_cast<int>(series.size());
  const int W = std::max(360, 80 + group_w * static_cast<int>(groups.size())), H = 320;
  const int left = 50, bottom = H - 60, plot_h = bottom - 40;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  put(img, title, {left, 22}, 0.5);
  for (int k = 0; k <= 4; ++k) {
    const int y = bottom - plot_h * k / 4;
    cv::line(img, {left, y}, {W - 10, y}, kGrid, 1);
    put(img, fmt3(top * k / 4), {4, y + 4}, 0.35);
  }
  cv::line(img, {left, bottom}, {W - 10, bottom}, kInk, 1);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const int x0 = left + 20 + static_cast<int>(g) * group_w;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = std::clamp(series[s][g], 0.0, top);
      const int h = static_cast<int>(std::lround(plot_h * v / top));
      const int x = x0 + static_cast<int>(s) * 30;
      cv::rectangle(img, cv::Rect(x, bottom - h, 24, h), kColours[s % kColours.size()], cv::FILLED);
      put(img, fmt3(series[s][g]), {x - 4, bottom - h - 4}, 0.3);
    }
    put(img, groups[g].substr(0, 14), {x0, bottom + 18}, 0.35);
  }
  for (std::size_t s = 0; s < series_names.size(); ++s) {
    const int x = W - 90, y = 40 + 16 * static_cast<int>(s);
    cv::rectangle(img, cv::Rect(x, y - 9, 10, 10), kColours[s % kColours.size()], cv::FILLED);
    put(img, series_names[s], {x + 14, y}, 0.35);
  }
  return img;
}

}  // namespace

PlotOutput emit_plots(const std::vector<EvalReport>& reports, const std::vector<fs::path>& metrics_logs,
                      const fs::path& out_dir) {
  if (reports.empty() && metrics_logs.empty()) throw InputError("nothing to plot: no reports or training logs");
  fs::create_directories(out_dir);
  PlotOutput out;
  std::vector<std::string> groups;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    groups.push_back(reports[i].label.empty() ? "run " + std::to_string(i + 1) : reports[i].label);
  }
  if (!reports.empty()) {
    std::vector<double> acc, ned;
    for (const auto& r : reports) {
      acc.push_back(r.acc);
      ned.push_back(r.ned);
    }
    const fs::path p = out_dir / "acc_ned.png";
    save_png(p, bar_chart("ACC and NED per configuration", groups, {"ACC", "NED"}, {acc, ned}, 1.0));
    out.files.push_back(p);

    std::vector<double> fid;
    std::vector<std::string> fid_groups;
    for (std::size_t i = 0; i < reports.size(); ++i) {
      if (reports[i].fid) {
        fid.push_back(*reports[i].fid);
        fid_groups.push_back(groups[i]);
      }
    }
    if (fid.empty()) {
      out.notes.push_back("no report has FID; FID plot omitted");
    } else {
      const double top = std::max(1e-9, *std::max_element(fid.begin(), fid.end())) * 1.1;
      const fs::path q = out_dir / "fid.png";
      save_png(q, bar_chart("Frechet distance", fid_groups, {"FID"}, {fid}, top));
      out.files.push_back(q);
    }
  } else {
    out.notes.push_back("no reports; metric plots omitted");
  }

  if (!metrics_logs.empty()) {
    std::vector<std::vector<LossRecord>> logs;
    long long max_step = 1;
    double max_loss = 1e-9;
    for (const auto& p : metrics_logs) {
      logs.push_back(read_metrics(p));
      for (const auto& r : logs.back()) {
        max_step = std::max(max_step, r.step);
        if (std::isfinite(r.total)) max_loss = std::max(max_loss, r.total);
      }
    }
    const int W = 560, H = 340, left = 60, right = W - 20, top = 40, bottom = H - 50;
    cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
    put(img, "training loss (total, smoothed)", {left, 22}, 0.5);
    for (int k = 0; k <= 4; ++k) {
      const int y = bottom - (bottom - top) * k / 4;
      cv::line(img, {left, y}, {right, y}, kGrid, 1);
      put(img, fmt3(max_loss * k / 4), {4, y + 4}, 0.35);
    }
    put(img, "step " + std::to_string(max_step), {right - 90, bottom + 30}, 0.35);
    for (std::size_t i = 0; i < logs.size(); ++i) {
      std::vector<cv::Point> pts;
      double ema = 0.0;
      for (std::size_t k = 0; k < logs[i].size(); ++k) {
        const auto& r = logs[i][k];
        ema = k == 0 ? r.total : 0.95 * ema + 0.05 * r.total;
        const int x = left + static_cast<int>((right - left) * r.step / max_step);
        const int y = bottom - static_cast<int>(std::lround((bottom - top) * std::clamp(ema / max_loss, 0.0, 1.0)));
        pts.emplace_back(x, y);
      }
      if (pts.size() >= 2) cv::polylines(img, pts, false, kColours[i % kColours.size()], 1, cv::LINE_AA);
      put(img, metrics_logs[i].parent_path().filename().string(), {right - 150, top + 14 * static_cast<int>(i) + 12}, 0.35);
    }
    const fs::path p = out_dir / "loss_curves.png";
    save_png(p, img);
    out.files.push_back(p);
  }
  return out;
}

}  // namespace fontctl
