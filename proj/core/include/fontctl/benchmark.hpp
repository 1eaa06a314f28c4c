#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fontctl/fonts.hpp"
#include "fontctl/types.hpp"

namespace fontctl {

enum class Background { kWhite, kTinted };

struct BenchmarkParams {
  int count = 1000;
  int canvas = 512;
  int max_lines = 20;
  int max_char_px = 64;  // exclusive bound on font_px
  int min_char_px = 8;
  int min_chars = 1;
  int max_chars = 6;
  std::uint64_t seed = 0;
  std::string char_pool = "ABCDEFGHJK";
  std::vector<std::string> font_ids;  // empty: every registered font
  // kTinted draws a light random background and dark random text colour;
  // used for training corpora.
  Background background = Background::kWhite;
  int placement_retries = 30;

  void validate() const;
  nlohmann::json to_json() const;
};

struct Benchmark {
  std::vector<AnnotatedImage> images;
  // One note per image that received fewer lines than requested.
  std::vector<std::string> notes;
};

// Each image asks for a uniform 1..max_lines lines. A line gets a random
// string from the pool, a random font and a glyph height in
// [min_char_px, max_char_px); it is placed uniformly at random and rejected if
// its box (grown by a 1 px margin) touches an earlier line. After
// `placement_retries` failures the line is dropped with a note.
// Captions: `caption` is a short prompt; captions["detailed"] also names the
// colours and layout.
Benchmark generate_tiny_benchmark(const BenchmarkParams& params, const FontRegistry& fonts);

// Writes img_00000.png ... and manifest.jsonl into dir; returns the manifest
// path.
std::filesystem::path write_benchmark(const Benchmark& bench, const std::filesystem::path& dir,
                                      const nlohmann::json& metadata = nlohmann::json::object());

}  // namespace fontctl
