#include "fontctl/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "fontctl/error.hpp"

namespace fontctl {

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw InputError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw InputError("config line " + std::to_string(line_no) + ": empty key");
    kv[key] = trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

std::string format_key_values(const KeyValues& kv) {
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
  return os.str();
}

std::string_view to_string(LossReduction r) { return r == LossReduction::kMean ? "mean" : "sum"; }

LossReduction parse_loss_reduction(std::string_view s) {
  if (s == "mean") return LossReduction::kMean;
  if (s == "sum") return LossReduction::kSum;
  throw InputError("unknown loss reduction '" + std::string(s) + "'");
}

std::string_view to_string(CodecKind c) { return c == CodecKind::kAnalytic ? "analytic" : "learned"; }

CodecKind parse_codec_kind(std::string_view s) {
  if (s == "analytic") return CodecKind::kAnalytic;
  if (s == "learned") return CodecKind::kLearned;
  throw InputError("unknown codec '" + std::string(s) + "'");
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw InputError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw InputError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

std::string format_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

struct Field {
  std::string name;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    auto int_field = [&f](const std::string& name, int TrainConfig::*m) {
      f.push_back({name, [m, name](TrainConfig& c, const std::string& v) { c.*m = parse_number<int>(name, v); },
                   [m](const TrainConfig& c) { return std::to_string(c.*m); }});
    };
    auto dbl_field = [&f](const std::string& name, double TrainConfig::*m) {
      f.push_back({name, [m, name](TrainConfig& c, const std::string& v) { c.*m = parse_number<double>(name, v); },
                   [m](const TrainConfig& c) { return format_double(c.*m); }});
    };
    auto bool_field = [&f](const std::string& name, bool TrainConfig::*m) {
      f.push_back({name, [m, name](TrainConfig& c, const std::string& v) { c.*m = parse_bool(name, v); },
                   [m](const TrainConfig& c) { return std::string(c.*m ? "true" : "false"); }});
    };
    int_field("image_size", &TrainConfig::image_size);
    int_field("latent_channels", &TrainConfig::latent_channels);
    int_field("latent_size", &TrainConfig::latent_size);
    int_field("timesteps", &TrainConfig::timesteps);
    dbl_field("beta_start", &TrainConfig::beta_start);
    dbl_field("beta_end", &TrainConfig::beta_end);
    dbl_field("lambda_ocr", &TrainConfig::lambda_ocr);
    dbl_field("learning_rate", &TrainConfig::learning_rate);
    int_field("batch_size", &TrainConfig::batch_size);
    int_field("epochs", &TrainConfig::epochs);
    int_field("max_steps", &TrainConfig::max_steps);
    dbl_field("weight_decay", &TrainConfig::weight_decay);
    dbl_field("grad_clip", &TrainConfig::grad_clip);
    f.push_back({"loss_reduction",
                 [](TrainConfig& c, const std::string& v) { c.loss_reduction = parse_loss_reduction(v); },
                 [](const TrainConfig& c) { return std::string(to_string(c.loss_reduction)); }});
    f.push_back({"hint_kind", [](TrainConfig& c, const std::string& v) { c.hint_kind = parse_hint_kind(v); },
                 [](const TrainConfig& c) { return std::string(to_string(c.hint_kind)); }});
    bool_field("use_ocr_loss", &TrainConfig::use_ocr_loss);
    bool_field("freeze_base", &TrainConfig::freeze_base);
    f.push_back({"seed", [](TrainConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); },
                 [](const TrainConfig& c) { return std::to_string(c.seed); }});
    f.push_back({"caption_source", [](TrainConfig& c, const std::string& v) { c.caption_source = v; },
                 [](const TrainConfig& c) { return c.caption_source; }});
    int_field("width1", &TrainConfig::width1);
    int_field("width2", &TrainConfig::width2);
    int_field("norm_groups", &TrainConfig::norm_groups);
    int_field("text_dim", &TrainConfig::text_dim);
    int_field("text_len", &TrainConfig::text_len);
    f.push_back({"codec", [](TrainConfig& c, const std::string& v) { c.codec = parse_codec_kind(v); },
                 [](const TrainConfig& c) { return std::string(to_string(c.codec)); }});
    int_field("codec_steps", &TrainConfig::codec_steps);
    dbl_field("codec_lr", &TrainConfig::codec_lr);
    dbl_field("codec_psnr_floor", &TrainConfig::codec_psnr_floor);
    int_field("base_steps", &TrainConfig::base_steps);
    dbl_field("base_lr", &TrainConfig::base_lr);
    dbl_field("canny_sigma", &TrainConfig::canny_sigma);
    dbl_field("canny_low", &TrainConfig::canny_low);
    dbl_field("canny_high", &TrainConfig::canny_high);
    f.push_back({"uniform_font", [](TrainConfig& c, const std::string& v) { c.uniform_font = v; },
                 [](const TrainConfig& c) { return c.uniform_font; }});
    int_field("ocr_patch_height", &TrainConfig::ocr_patch_height);
    int_field("ocr_patch_max_width", &TrainConfig::ocr_patch_max_width);
    int_field("checkpoint_every", &TrainConfig::checkpoint_every);
    return f;
  }();
  return table;
}

}  // namespace

void TrainConfig::apply(const KeyValues& kv) {
  for (const auto& [key, value] : kv) {
    bool found = false;
    for (const auto& f : fields()) {
      if (f.name == key) {
        f.set(*this, value);
        found = true;
        break;
      }
    }
    if (!found) throw InputError("unknown config key '" + key + "'");
  }
}

KeyValues TrainConfig::to_key_values() const {
  KeyValues kv;
  for (const auto& f : fields()) kv[f.name] = f.get(*this);
  return kv;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw InputError("invalid config: " + msg); };
  if (image_size <= 0 || latent_size <= 0 || latent_channels <= 0) fail("sizes must be positive");
  if (image_size % latent_size != 0) fail("image_size must be divisible by latent_size");
  const int f = downsample_factor();
  if (f < 1 || (f & (f - 1)) != 0) fail("downsampling factor must be a power of two");
  if (latent_size % 2 != 0) fail("latent_size must be even (the denoiser has two levels)");
  if (timesteps < 2) fail("timesteps must be >= 2");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) fail("need 0 < beta_start <= beta_end < 1");
  if (lambda_ocr < 0.0) fail("lambda_ocr must be >= 0");
  if (learning_rate <= 0.0) fail("learning_rate must be > 0");
  if (batch_size <= 0) fail("batch_size must be > 0");
  if (epochs < 0) fail("epochs must be >= 0");
  if (grad_clip <= 0.0) fail("grad_clip must be > 0");
  if (width1 % norm_groups != 0 || width2 % norm_groups != 0) fail("widths must be divisible by norm_groups");
  if (text_dim <= 0 || text_len < 2) fail("text_dim > 0 and text_len >= 2 required");
  if (!(canny_low > 0.0 && canny_low < canny_high)) fail("need 0 < canny_low < canny_high");
  if (canny_sigma <= 0.0) fail("canny_sigma must be > 0");
  if (codec == CodecKind::kAnalytic && latent_channels < 3) fail("analytic codec needs >= 3 latent channels");
  if (ocr_patch_height < 8 || ocr_patch_max_width < ocr_patch_height) fail("bad OCR patch geometry");
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  TrainConfig cfg;
  cfg.apply(read_key_values(path));
  cfg.validate();
  return cfg;
}

}  // namespace fontctl
