// fontctl command-line front end.
//
// Option precedence: command line, then FONTCTL_<OPTION> environment
// variables, then the --config key=value file. Every run writes the merged
// settings next to its outputs and echoes them to stderr.
//
// Exit codes: 0 success, 1 bad input or usage, 2 internal failure.

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "fontctl/benchmark.hpp"
#include "fontctl/config.hpp"
#include "fontctl/dataset.hpp"
#include "fontctl/error.hpp"
#include "fontctl/evaluator.hpp"
#include "fontctl/fonts.hpp"
#include "fontctl/hints.hpp"
#include "fontctl/ocr.hpp"
#include "fontctl/parallel.hpp"
#include "fontctl/pipeline.hpp"
#include "fontctl/sampler.hpp"
#include "fontctl/trainer.hpp"

using namespace fontctl;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void log_line(const std::string& s) { std::cerr << "fontctl: " << s << std::endl; }

std::string option_key(const CLI::Option* opt) {
  std::string k = opt->get_lnames().empty() ? opt->get_name() : opt->get_lnames().front();
  for (auto& c : k)
    if (c == '-') c = '_';
  return k;
}

std::string env_key(std::string key) {
  for (auto& c : key) c = (c == '-') ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return "FONTCTL_" + key;
}

// Common plumbing for one subcommand.
struct Command {
  CLI::App* app = nullptr;
  std::string config_file;
  int workers = default_workers();
  std::string fonts;
  std::function<int(Command&)> run;
  // Keys of the config file that match no option (train passes them on).
  KeyValues rest;
  bool accepts_rest = false;

  void finish_options() {
    for (CLI::Option* opt : app->get_options()) {
      if (opt->get_lnames().empty()) continue;
      const std::string k = option_key(opt);
      if (k == "help" || k == "config") continue;
      opt->envname(env_key(k));
    }
  }

  // Fills options still unset after the command line and environment.
  void merge_config_file() {
    if (config_file.empty()) return;
    for (const auto& [key, value] : read_key_values(config_file)) {
      std::string dashed = key;
      for (auto& c : dashed)
        if (c == '_') c = '-';
      CLI::Option* opt = nullptr;
      for (CLI::Option* o : app->get_options())
        if (!o->get_lnames().empty() && o->get_lnames().front() == dashed) opt = o;
      if (opt == nullptr) {
        if (!accepts_rest) throw InputError(config_file + ": unknown key '" + key + "'");
        rest[key] = value;
        continue;
      }
      if (opt->count() > 0) continue;
      opt->add_result(value);
      opt->run_callback();
    }
  }

  json effective() const {
    json opts = json::object();
    for (const CLI::Option* opt : app->get_options()) {
      if (opt->get_lnames().empty()) continue;
      const std::string k = option_key(opt);
      if (k == "help") continue;
      const auto& res = opt->results();
      if (res.empty()) {
        opts[k] = opt->get_default_str();
      } else if (opt->get_items_expected_max() > 1 || opt->get_expected_max() > 1) {
        opts[k] = res;
      } else {
        opts[k] = res.back();
      }
    }
    return json{{"command", app->get_name()}, {"options", opts}};
  }

  FontRegistry font_registry() const {
    return fonts.empty() ? FontRegistry::load_default() : FontRegistry::from_spec(fonts);
  }
};

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw InputError("missing required option " + flag);
}

void snapshot(const json& cfg, const fs::path& where) {
  if (!where.parent_path().empty()) fs::create_directories(where.parent_path());
  write_file_atomic(where, cfg.dump(2) + "\n");
  log_line("effective config: " + cfg.dump());
}

// Snapshot path for a command whose --out is a file: report.json ->
// report.config.json.
fs::path config_beside(const fs::path& out) {
  fs::path p = out;
  p.replace_extension(".config.json");
  return p;
}

void write_jsonl(const fs::path& path, const std::vector<json>& lines) {
  std::string s;
  for (const auto& l : lines) s += l.dump() + "\n";
  write_file_atomic(path, s);
}

// ---------------------------------------------------------------- make-benchmark

void add_make_benchmark(CLI::App& root, std::vector<std::unique_ptr<Command>>& cmds) {
  auto cmd = std::make_unique<Command>();
  auto* app = root.add_subcommand("make-benchmark", "Render a synthetic text-image benchmark");
  cmd->app = app;
  auto p = std::make_shared<BenchmarkParams>();
  auto out = std::make_shared<std::string>();
  auto background = std::make_shared<std::string>("white");
  auto font_ids = std::make_shared<std::vector<std::string>>();
  app->add_option("--out", *out, "Output directory");
  app->add_option("--count", p->count)->capture_default_str();
  app->add_option("--canvas", p->canvas)->capture_default_str();
  app->add_option("--max-lines", p->max_lines)->capture_default_str();
  app->add_option("--min-char-px", p->min_char_px)->capture_default_str();
  app->add_option("--max-char-px", p->max_char_px, "Exclusive")->capture_default_str();
  app->add_option("--min-chars", p->min_chars)->capture_default_str();
  app->add_option("--max-chars", p->max_chars)->capture_default_str();
  app->add_option("--seed", p->seed)->capture_default_str();
  app->add_option("--chars", p->char_pool, "Character pool")->capture_default_str();
  app->add_option("--font-ids", *font_ids, "Subset of font ids")->delimiter(',');
  app->add_option("--background", *background, "white or tinted")->capture_default_str();
  app->add_option("--retries", p->placement_retries)->capture_default_str();
  cmd->run = [p, out, background, font_ids](Command& c) {
    require(*out, "--out");
    if (*background == "white")
      p->background = Background::kWhite;
    else if (*background == "tinted")
      p->background = Background::kTinted;
    else
      throw InputError("--background must be white or tinted, got '" + *background + "'");
    p->font_ids = *font_ids;
    snapshot(c.effective(), fs::path(*out) / "effective_config.json");
    const FontRegistry fonts = c.font_registry();
    const Benchmark bench = generate_tiny_benchmark(*p, fonts);
    for (const auto& n : bench.notes) log_line("note: " + n);
    const fs::path manifest = write_benchmark(bench, *out, json{{"generator", "tiny"}, {"params", p->to_json()}});
    log_line("wrote " + std::to_string(bench.images.size()) + " images to " + manifest.string());
    return 0;
  };
  cmds.push_back(std::move(cmd));
}

// ---------------------------------------------------------------- make-hints

void add_make_hints(CLI::App& root, std::vector<std::unique_ptr<Command>>& cmds) {
  auto cmd = std::make_unique<Command>();
  auto* app = root.add_subcommand("make-hints", "Build conditioning images for a dataset");
  cmd->app = app;
  struct Opts {
    std::string data, out, kind = "glyph", uniform_font = "sans";
    CannyParams canny;
    double threshold = 128.0;
  };
  auto o = std::make_shared<Opts>();
  app->add_option("--data", o->data, "Dataset manifest");
  app->add_option("--out", o->out, "Output directory");
  app->add_option("--kind", o->kind, "glyph, canny or font")->capture_default_str();
  app->add_option("--uniform-font", o->uniform_font)->capture_default_str();
  app->add_option("--canny-low", o->canny.low_threshold)->capture_default_str();
  app->add_option("--canny-high", o->canny.high_threshold)->capture_default_str();
  app->add_option("--canny-sigma", o->canny.gaussian_sigma)->capture_default_str();
  app->add_option("--threshold", o->threshold, "Luma threshold of the font segmenter")->capture_default_str();
  cmd->run = [o](Command& c) {
    require(o->data, "--data");
    require(o->out, "--out");
    const HintKind kind = parse_hint_kind(o->kind);
    snapshot(c.effective(), fs::path(o->out) / "effective_config.json");
    const DatasetLoad ds = load_dataset(o->data);
    const FontRegistry fonts = c.font_registry();
    const Segmenter seg = threshold_segmenter(o->threshold);
    const int n = static_cast<int>(ds.images.size());
    std::vector<HintResult> hints(n);
    parallel_for(n, c.workers, [&](int i) {
      const auto& img = ds.images[i];
      switch (kind) {
        case HintKind::kGlyph:
          hints[i] = make_glyph_hint(img.regions, img.image.height, img.image.width, o->uniform_font, fonts);
          break;
        case HintKind::kCanny: hints[i] = make_canny_hint(img, o->canny); break;
        case HintKind::kFont: hints[i] = make_font_hint(img, seg); break;
      }
    });
    std::vector<json> lines;
    int skipped = 0;
    for (int i = 0; i < n; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "hint_%05d.png", i);
      write_png(fs::path(o->out) / name, hint_to_image(hints[i].hint));
      for (const auto& w : hints[i].warnings) log_line("warning: " + ds.images[i].id + ": " + w);
      skipped += hints[i].skipped_regions;
      lines.push_back(json{{"id", ds.images[i].id},
                           {"hint_path", name},
                           {"kind", to_string(kind)},
                           {"skipped_regions", hints[i].skipped_regions},
                           {"warnings", hints[i].warnings}});
    }
    write_jsonl(fs::path(o->out) / "hints.jsonl", lines);
    log_line("wrote " + std::to_string(n) + " hints (" + std::to_string(skipped) + " regions skipped)");
    return 0;
  };
  cmds.push_back(std::move(cmd));
}

// ---------------------------------------------------------------- recognizer

void add_pretrain_recognizer(CLI::App& root, std::vector<std::unique_ptr<Command>>& cmds) {
  auto cmd = std::make_unique<Command>();
  auto* app = root.add_subcommand("pretrain-recognizer", "Train the CRNN text recognizer with CTC");
  cmd->app = app;
  struct Opts {
    std::string out;
    RecognizerConfig rc;
    RecognizerCorpusParams corpus;
    RecognizerTrainParams train;
    std::uint64_t init_seed = 1;
  };
  auto o = std::make_shared<Opts>();
  app->add_option("--out", o->out, "Output directory");
  app->add_option("--alphabet", o->rc.alphabet)->capture_default_str();
  app->add_option("--height", o->rc.height, "Patch height")->capture_default_str();
  app->add_option("--max-width", o->rc.max_width)->capture_default_str();
  app->add_option("--hidden", o->rc.hidden)->capture_default_str();
  app->add_option("--count", o->corpus.count, "Corpus size")->capture_default_str();
  app->add_option("--min-px", o->corpus.min_px)->capture_default_str();
  app->add_option("--max-px", o->corpus.max_px)->capture_default_str();
  app->add_option("--min-chars", o->corpus.min_chars)->capture_default_str();
  app->add_option("--max-chars", o->corpus.max_chars)->capture_default_str();
  app->add_option("--epochs", o->train.epochs)->capture_default_str();
  app->add_option("--batch", o->train.batch)->capture_default_str();
  app->add_option("--lr", o->train.lr)->capture_default_str();
  app->add_option("--holdout", o->train.holdout_fraction)->capture_default_str();
  app->add_option("--floor", o->train.accuracy_floor, "Held-out accuracy floor")->capture_default_str();
  app->add_option("--seed", o->train.seed, "Corpus and batch-order seed")->capture_default_str();
  app->add_option("--init-seed", o->init_seed, "Weight initialization seed")->capture_default_str();
  cmd->run = [o](Command& c) {
    require(o->out, "--out");
    const fs::path dir = o->out;
    snapshot(c.effective(), dir / "effective_config.json");
    const FontRegistry fonts = c.font_registry();
    o->corpus.seed = o->train.seed;
    o->train.verbose = true;
    const auto corpus = make_recognizer_corpus(o->corpus, o->rc.alphabet, fonts);
    log_line("corpus: " + std::to_string(corpus.size()) + " samples");
    Recognizer rec(o->rc, o->init_seed);
    const RecognizerTrainReport r = pretrain_recognizer(rec, corpus, o->train);
    const json report{{"holdout_accuracy", r.holdout_accuracy},
                      {"holdout_size", r.holdout_size},
                      {"final_loss", r.final_loss},
                      {"infeasible", r.infeasible}};
    rec.save(dir / "recognizer.ckpt", report);
    write_file_atomic(dir / "report.json", report.dump(2) + "\n");
    log_line("held-out accuracy " + std::to_string(r.holdout_accuracy) + " over " + std::to_string(r.holdout_size));
    return 0;
  };
  cmds.push_back(std::move(cmd));
}

void add_recognizer_eval(CLI::App& root, std::vector<std::unique_ptr<Command>>& cmds) {
  auto cmd = std::make_unique<Command>();
  auto* app = root.add_subcommand("recognizer-eval", "Exact-match accuracy of a recognizer");
  cmd->app = app;
  struct Opts {
    std::string recognizer, data, out;
    RecognizerCorpusParams corpus;
  };
  auto o = std::make_shared<Opts>();
  o->corpus.count = 500;
  o->corpus.seed = 1;
  app->add_option("--recognizer", o->recognizer, "Recognizer checkpoint");
  app->add_option("--data", o->data, "Dataset manifest; a synthetic corpus is used when omitted");
  app->add_option("--out", o->out, "Report file (JSON)");
  app->add_option("--count", o->corpus.count)->capture_default_str();
  app->add_option("--min-px", o->corpus.min_px)->capture_default_str();
  app->add_option("--max-px", o->corpus.max_px)->capture_default_str();
  app->add_option("--seed", o->corpus.seed)->capture_default_str();
  cmd->run = [o](Command& c) {
    require(o->recognizer, "--recognizer");
    require(o->out, "--out");
    snapshot(c.effective(), config_beside(o->out));
    const Recognizer rec = Recognizer::load(o->recognizer);
    std::vector<RecognizerSample> samples;
    if (!o->data.empty()) {
      for (const auto& img : load_dataset(o->data).images)
        for (const auto& r : img.regions) samples.push_back({img.image, r});
    } else {
      samples = make_recognizer_corpus(o->corpus, rec.config().alphabet, c.font_registry());
    }
    if (samples.empty()) throw InputError("no text regions to evaluate");
    const int n = static_cast<int>(samples.size());
    std::vector<std::string> pred(n);
    parallel_for(n, c.workers, [&](int i) { pred[i] = rec.recognize(samples[i].image, samples[i].region.bbox); });
    std::vector<std::pair<std::string, std::string>> pairs;
    double ned = 0.0;
    for (int i = 0; i < n; ++i) {
      pairs.emplace_back(pred[i], samples[i].region.text);
      ned += normalized_edit_distance(pred[i], samples[i].region.text);
    }
    const json report{{"accuracy", sentence_accuracy(pairs)}, {"ned", ned / n}, {"samples", n}};
    if (!fs::path(o->out).parent_path().empty()) fs::create_directories(fs::path(o->out).parent_path());
    write_file_atomic(o->out, report.dump(2) + "\n");
    log_line("accuracy " + std::to_string(report["accuracy"].get<double>()) + " over " + std::to_string(n));
    return 0;
  };
  cmds.push_back(std::move(cmd));
}

// ---------------------------------------------------------------- train

void add_train(CLI::App& root, std::vector<std::unique_ptr<Command>>& cmds) {
  auto cmd = std::make_unique<Command>();
  auto* app = root.add_subcommand("train", "Train the control branch");
  cmd->app = app;
  cmd->accepts_rest = true;
  struct Opts {
    std::string data, out, recognizer, base;
    bool resume = false;
    long long stop_after = -1;
    std::vector<std::string> sets;
  };
  auto o = std::make_shared<Opts>();
  app->add_option("--data", o->data, "Training manifest");
  app->add_option("--out", o->out, "Run directory");
  app->add_option("--recognizer", o->recognizer, "Frozen recognizer for the OCR loss");
  app->add_option("--base", o->base, "Checkpoint providing codec, denoiser and text encoder");
  app->add_flag("--resume", o->resume, "Continue from <out>/last.ckpt");
  app->add_option("--stop-after", o->stop_after, "Stop once this step is reached")->capture_default_str();
  app->add_option("--set", o->sets, "Override a training key (key=value)");
  cmd->run = [o](Command& c) {
    require(o->data, "--data");
    require(o->out, "--out");
    // training keys: config file < FONTCTL_<KEY> < --set
    TrainConfig cfg;
    cfg.apply(c.rest);
    KeyValues env;
    for (const auto& [k, v] : cfg.to_key_values()) {
      (void)v;
      if (const char* e = std::getenv(env_key(k).c_str())) env[k] = e;
    }
    cfg.apply(env);
    KeyValues sets;
    for (const auto& s : o->sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw InputError("--set expects key=value, got '" + s + "'");
      sets[trim(s.substr(0, eq))] = trim(s.substr(eq + 1));
    }
    cfg.apply(sets);
    cfg.validate();

    json eff = c.effective();
    eff["train_config"] = config_to_json(cfg);
    const fs::path dir = o->out;
    snapshot(eff, dir / "effective_config.json");
    write_file_atomic(dir / "config.txt", format_key_values(cfg.to_key_values()));

    const DatasetLoad ds = load_dataset(o->data);
    if (ds.dropped_regions > 0) log_line("dropped " + std::to_string(ds.dropped_regions) + " regions");
    const FontRegistry fonts = c.font_registry();
    TrainOptions topt;
    topt.out_dir = dir;
    topt.recognizer = o->recognizer;
    topt.base_checkpoint = o->base;
    topt.resume = o->resume;
    topt.stop_after = o->stop_after;
    topt.log = log_line;
    const long long every = std::max(1, cfg.checkpoint_every / 10);
    topt.on_step = [every](const LossRecord& r) {
      if (r.step % every != 0) return;
      std::string s = "step " + std::to_string(r.step) + " ldm " + std::to_string(r.l_ldm);
      if (r.l_ocr) s += " ocr " + std::to_string(*r.l_ocr);
      log_line(s + " total " + std::to_string(r.total));
    };
    const TrainOutcome res = train(cfg, ds.images, fonts, topt);
    log_line("finished at step " + std::to_string(res.steps) + ", OCR fallbacks " +
             std::to_string(res.ocr_fallbacks) +
             (res.final_checkpoint.empty() ? std::string() : ", final " + res.final_checkpoint.string()));
    return 0;
  };
  cmds.push_back(std::move(cmd));
}

// ---------------------------------------------------------------- sample

void add_sample(CLI::App& root, std::vector<std::unique_ptr<Command>>& cmds) {
  auto cmd = std::make_unique<Command>();
  auto* app = root.add_subcommand("sample", "Generate images for a request");
  cmd->app = app;
  struct Opts {
    std::string checkpoint, control, request, out;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps, batch;
    std::optional<double> guidance;
  };
  auto o = std::make_shared<Opts>();
  app->add_option("--checkpoint", o->checkpoint, "Model checkpoint");
  app->add_option("--control", o->control, "Separate control-branch checkpoint");
  app->add_option("--request", o->request, "Request JSON");
  app->add_option("--out", o->out, "Output directory");
  app->add_option("--seed", o->seed, "Overrides the request seed");
  app->add_option("--steps", o->steps);
  app->add_option("--batch", o->batch);
  app->add_option("--guidance", o->guidance);
  cmd->run = [o](Command& c) {
    require(o->checkpoint, "--checkpoint");
    require(o->request, "--request");
    require(o->out, "--out");
    const fs::path dir = o->out;
    SampleRequest req = SampleRequest::load(o->request);
    if (o->seed) req.seed = *o->seed;
    if (o->steps) req.steps = *o->steps;
    if (o->batch) req.batch = *o->batch;
    if (o->guidance) req.guidance = *o->guidance;
    json eff = c.effective();
    eff["request"] = req.to_json();
    snapshot(eff, dir / "effective_config.json");

    const auto model = DiffusionModel::load(o->checkpoint, o->control);
    const SampleResult res = sample(req, *model, c.font_registry());
    for (const auto& w : res.warnings) log_line("warning: " + w);
    write_png(dir / "hint.png", hint_to_image(res.hint));
    std::vector<json> lines;
    lines.push_back(json{{"meta",
                          {{"request", req.to_json()},
                           {"checkpoint", o->checkpoint},
                           {"control", o->control},
                           {"denoiser_evaluations", res.denoiser_evaluations}}}});
    for (std::size_t i = 0; i < res.images.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "sample_%02zu.png", i);
      write_png(dir / name, res.images[i]);
      AnnotatedImage rec;
      rec.id = std::string(name, 9);
      rec.image_path = name;
      rec.caption = req.caption;
      rec.regions = req.regions;
      lines.push_back(record_to_json(rec));
    }
    write_jsonl(dir / "manifest.jsonl", lines);
    log_line("wrote " + std::to_string(res.images.size()) + " images, " +
             std::to_string(res.denoiser_evaluations) + " denoiser evaluations");
    return 0;
  };
  cmds.push_back(std::move(cmd));
}

// ---------------------------------------------------------------- evaluate

void add_evaluate(CLI::App& root, std::vector<std::unique_ptr<Command>>& cmds) {
  auto cmd = std::make_unique<Command>();
  auto* app = root.add_subcommand("evaluate", "OCR accuracy, NED and FID on a benchmark");
  cmd->app = app;
  struct Opts {
    std::string checkpoint, control, benchmark, ocr = "builtin", recognizer, out, label;
    bool no_generate = false, no_fid = false;
    EvalOptions eval;
  };
  auto o = std::make_shared<Opts>();
  app->add_option("--checkpoint", o->checkpoint, "Model checkpoint");
  app->add_option("--control", o->control, "Separate control-branch checkpoint");
  app->add_option("--benchmark", o->benchmark, "Benchmark manifest");
  app->add_option("--ocr", o->ocr, "builtin, or a command run as '<cmd> <png>'")->capture_default_str();
  app->add_option("--recognizer", o->recognizer, "Recognizer for builtin OCR and FID features");
  app->add_option("--out", o->out, "Report file (JSON)");
  app->add_option("--label", o->label, "Name shown in plots");
  app->add_flag("--no-generate", o->no_generate, "OCR the benchmark images themselves");
  app->add_flag("--no-fid", o->no_fid);
  app->add_option("--batch", o->eval.batch)->capture_default_str();
  app->add_option("--steps", o->eval.steps)->capture_default_str();
  app->add_option("--guidance", o->eval.guidance)->capture_default_str();
  app->add_option("--seed", o->eval.seed)->capture_default_str();
  app->add_option("--caption-source", o->eval.caption_source)->capture_default_str();
  cmd->run = [o](Command& c) {
    require(o->benchmark, "--benchmark");
    require(o->out, "--out");
    if (!o->no_generate) require(o->checkpoint, "--checkpoint");
    snapshot(c.effective(), config_beside(o->out));

    std::shared_ptr<const Recognizer> rec;
    if (!o->recognizer.empty()) rec = std::make_shared<const Recognizer>(Recognizer::load(o->recognizer));
    OcrEngine engine;
    if (o->ocr == "builtin") {
      if (!rec) throw InputError("--ocr builtin needs --recognizer");
      engine = builtin_ocr(rec);
    } else {
      engine = external_ocr(o->ocr);
    }
    std::unique_ptr<DiffusionModel> model;
    if (!o->no_generate) model = DiffusionModel::load(o->checkpoint, o->control);

    EvalOptions eo = o->eval;
    eo.generate = !o->no_generate;
    eo.label = !o->label.empty() ? o->label
               : o->no_generate  ? std::string("reference")
                                 : fs::path(o->checkpoint).stem().string();
    if (rec && !o->no_fid && eo.generate)
      eo.features = [rec](const Image8& img) { return recognizer_image_features(*rec, img); };
    eo.log = log_line;
    const DatasetLoad ds = load_dataset(o->benchmark);
    const EvalReport rep = evaluate_benchmark(model.get(), ds.images, engine, c.font_registry(), eo);
    rep.save(o->out);
    std::string s = "ACC " + std::to_string(rep.acc) + " NED " + std::to_string(rep.ned);
    if (rep.fid) s += " FID " + std::to_string(*rep.fid);
    log_line(s + " over " + std::to_string(rep.lines) + " lines, " + std::to_string(rep.ocr_failures) +
             " OCR failures");
    return 0;
  };
  cmds.push_back(std::move(cmd));
}

// ---------------------------------------------------------------- plot

void add_plot(CLI::App& root, std::vector<std::unique_ptr<Command>>& cmds) {
  auto cmd = std::make_unique<Command>();
  auto* app = root.add_subcommand("plot", "Charts from evaluation reports and training logs");
  cmd->app = app;
  struct Opts {
    std::vector<std::string> reports, logs;
    std::string out;
  };
  auto o = std::make_shared<Opts>();
  app->add_option("--reports", o->reports, "Evaluation reports")->delimiter(',');
  app->add_option("--logs", o->logs, "metrics.jsonl files")->delimiter(',');
  app->add_option("--out", o->out, "Output directory");
  cmd->run = [o](Command& c) {
    require(o->out, "--out");
    if (o->reports.empty() && o->logs.empty()) throw InputError("nothing to plot: give --reports or --logs");
    snapshot(c.effective(), fs::path(o->out) / "effective_config.json");
    std::vector<EvalReport> reps;
    for (const auto& r : o->reports) reps.push_back(EvalReport::load(r));
    std::vector<fs::path> logs(o->logs.begin(), o->logs.end());
    const PlotOutput p = emit_plots(reps, logs, o->out);
    for (const auto& n : p.notes) log_line("note: " + n);
    for (const auto& f : p.files) log_line("wrote " + f.string());
    return 0;
  };
  cmds.push_back(std::move(cmd));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App root("Text-rendering control for a small latent diffusion model", "fontctl");
  root.require_subcommand(1);
  std::vector<std::unique_ptr<Command>> cmds;
  add_make_hints(root, cmds);
  add_make_benchmark(root, cmds);
  add_pretrain_recognizer(root, cmds);
  add_recognizer_eval(root, cmds);
  add_train(root, cmds);
  add_sample(root, cmds);
  add_evaluate(root, cmds);
  add_plot(root, cmds);
  for (auto& c : cmds) {
    c->app->add_option("--config", c->config_file, "key = value file with defaults for any option");
    c->app->add_option("--workers", c->workers, "Threads for per-item stages")->capture_default_str();
    c->app->add_option("--fonts", c->fonts, "Font list id=path,...; default is the DejaVu family");
    c->finish_options();
  }

  if (argc > 1 && argv[1][0] != '-') {
    bool known = false;
    for (auto& c : cmds) known = known || c->app->get_name() == argv[1];
    if (!known) {
      std::cerr << "fontctl: unknown subcommand '" << argv[1] << "'\n" << root.help();
      return 1;
    }
  }
  try {
    root.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return root.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return root.exit(e);
  } catch (const CLI::ParseError& e) {
    root.exit(e);
    if (root.get_subcommands().empty()) std::cerr << root.help();
    return 1;
  }

  Command* chosen = nullptr;
  for (auto& c : cmds)
    if (c->app->parsed()) chosen = c.get();
  try {
    chosen->merge_config_file();
    if (chosen->workers < 1) throw InputError("--workers must be at least 1");
    return chosen->run(*chosen);
  } catch (const InputError& e) {
    log_line("error: " + std::string(e.what()));
    return 1;
  } catch (const CLI::ParseError& e) {
    log_line("error: " + std::string(e.what()));
    return 1;
  } catch (const Error& e) {
    log_line("failed: " + std::string(e.what()));
    return 2;
  } catch (const std::exception& e) {
    log_line("internal error: " + std::string(e.what()));
    return 2;
  }
}
