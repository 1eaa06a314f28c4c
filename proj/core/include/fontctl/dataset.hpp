#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fontctl/types.hpp"

namespace fontctl {

// Line-delimited JSON manifest. Each line is either a metadata record
// {"meta": {...}} or an image record:
//   {"id": "...", "image_path": "...", "caption": "...",
//    "regions": [{"text": "...", "bbox": [x, y, w, h], "font_id": "...", "font_px": n}]}
// image_path is resolved relative to the manifest's directory.
struct DatasetLoad {
  std::vector<AnnotatedImage> images;
  int dropped_regions = 0;  // blank text or zero area after clamping
  int clamped_regions = 0;
  nlohmann::json metadata = nlohmann::json::object();
};

struct LoadOptions {
  bool load_pixels = true;
};

DatasetLoad load_dataset(const std::filesystem::path& manifest, LoadOptions options = {});

// Writes the manifest (and nothing else); images must already exist.
void save_manifest(const std::filesystem::path& manifest, const std::vector<AnnotatedImage>& images,
                   const nlohmann::json& metadata = nlohmann::json::object());

nlohmann::json region_to_json(const TextRegion& r);
TextRegion region_from_json(const nlohmann::json& j);
nlohmann::json record_to_json(const AnnotatedImage& img);

Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& img);
std::vector<std::uint8_t> encode_png(const Image8& img);

// Writes text through a temporary file and rename, removing the temporary on
// failure.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace fontctl
