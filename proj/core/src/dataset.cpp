#include "fontctl/dataset.hpp"

#include <fstream>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "fontctl/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fontctl {

json region_to_json(const TextRegion& r) {
  return json{{"text", r.text},
              {"bbox", {r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h}},
              {"font_id", r.font_id},
              {"font_px", r.font_px}};
}

TextRegion region_from_json(const json& j) {
  TextRegion r;
  r.text = j.at("text").get<std::string>();
  const auto& b = j.at("bbox");
  if (!b.is_array() || b.size() != 4) throw json::other_error::create(501, "bbox must be [x, y, w, h]", &b);
  r.bbox = BBox{b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
  r.font_id = j.value("font_id", std::string("sans"));
  r.font_px = j.value("font_px", r.bbox.h);
  return r;
}

json record_to_json(const AnnotatedImage& img) {
  json regions = json::array();
  for (const auto& r : img.regions) regions.push_back(region_to_json(r));
  json j{{"id", img.id}, {"image_path", img.image_path}, {"caption", img.caption}, {"regions", regions}};
  if (!img.captions.empty()) j["captions"] = img.captions;
  return j;
}

DatasetLoad load_dataset(const fs::path& manifest, LoadOptions options) {
  std::ifstream in(manifest);
  if (!in) throw InputError("cannot open manifest: " + manifest.string());
  const fs::path base = manifest.parent_path();
  DatasetLoad out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw InputError(manifest.string() + ":" + std::to_string(line_no) + ": parse error: " + e.what());
    }
    if (rec.contains("meta")) {
      out.metadata.update(rec["meta"]);
      continue;
    }
    AnnotatedImage img;
    std::vector<TextRegion> raw;
    try {
      img.image_path = rec.at("image_path").get<std::string>();
      img.caption = rec.value("caption", std::string());
      if (rec.contains("captions")) img.captions = rec["captions"].get<std::map<std::string, std::string>>();
      img.id = rec.value("id", fs::path(img.image_path).stem().string());
      for (const auto& r : rec.value("regions", json::array())) raw.push_back(region_from_json(r));
    } catch (const json::exception& e) {
      throw InputError(manifest.string() + ":" + std::to_string(line_no) + ": malformed record: " + e.what());
    }

    int width = 0, height = 0;
    const fs::path image_file = base / img.image_path;
    if (options.load_pixels) {
      if (!fs::exists(image_file)) {
        throw InputError(manifest.string() + ":" + std::to_string(line_no) + ": image not found: " + image_file.string());
      }
      img.image = read_png(image_file);
      width = img.image.width;
      height = img.image.height;
    } else {
      width = rec.value("width", 0);
      height = rec.value("height", 0);
    }

    for (TextRegion r : raw) {
      if (trim(r.text).empty()) {
        ++out.dropped_regions;
        continue;
      }
      if (width > 0 && height > 0) {
        const BBox clamped = clamp_bbox(r.bbox, width, height);
        if (clamped.area() == 0) {
          ++out.dropped_regions;
          continue;
        }
        if (!(clamped == r.bbox)) ++out.clamped_regions;
        r.bbox = clamped;
      }
      img.regions.push_back(std::move(r));
    }
    out.images.push_back(std::move(img));
  }
  return out;
}

void save_manifest(const fs::path& manifest, const std::vector<AnnotatedImage>& images, const json& metadata) {
  std::ostringstream os;
  if (!metadata.empty()) os << json{{"meta", metadata}}.dump() << '\n';
  for (const auto& img : images) os << record_to_json(img).dump() << '\n';
  write_file_atomic(manifest, os.str());
}

Image8 read_png(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (m.empty()) throw InputError("cannot read image: " + path.string());
  cv::Mat rgb;
  cv::cvtColor(m, rgb, cv::COLOR_BGR2RGB);
  Image8 img(rgb.rows, rgb.cols, 3);
  for (int y = 0; y < rgb.rows; ++y) std::copy_n(rgb.ptr<std::uint8_t>(y), rgb.cols * 3, &img.at(y, 0, 0));
  return img;
}

namespace {

cv::Mat to_mat(const Image8& img) {
  if (img.channels == 1) {
    cv::Mat m(img.height, img.width, CV_8UC1);
    for (int y = 0; y < img.height; ++y) std::copy_n(img.pixels.data() + static_cast<std::size_t>(y) * img.width, img.width, m.ptr<std::uint8_t>(y));
    return m;
  }
  if (img.channels != 3) throw InputError("only 1- or 3-channel images can be written");
  cv::Mat rgb(img.height, img.width, CV_8UC3);
  for (int y = 0; y < img.height; ++y) std::copy_n(img.pixels.data() + static_cast<std::size_t>(y) * img.width * 3, img.width * 3, rgb.ptr<std::uint8_t>(y));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image8& img) {
  std::vector<std::uint8_t> bytes;
  if (!cv::imencode(".png", to_mat(img), bytes)) throw Error("PNG encoding failed");
  return bytes;
}

void write_png(const fs::path& path, const Image8& img) {
  const auto bytes = encode_png(img);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw Error("write failed (disk full?): " + path.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw Error("cannot finalize " + path.string());
  }
}

}  // namespace fontctl
