#pragma once

// Command-line front end. Every flag writes one path of a JSON config
// document; the document starts from --config (if any) and flags override it.
//
//   {"seed": 0, "verbose": false, "json": false,
//    "extract": {"inputs": [...], "output": "", "previews": true, "size": 0, "descriptor": {...}},
//    "train": {...TrainConfig, "resume": ""},
//    "reconstruct": {"checkpoint": "", "input": "", "output": "", "reference": "", "report": ""},
//    "edit": {"input": "", "output": "", "script": "", "ops": [...]},
//    "probe": {...ProbeConfig, "checkpoint": "", "data": "", "report": ""},
//    "sweep": {"data": "", "clusters": [2, 4, 6, 8], "output": "sweep.csv"},
//    "serve": {...ServiceConfig}}
//
// A top-level "seed" replaces train.seed, probe.seed and the extraction seed.
// sweep trains with the "train" section and probes with the "probe" section.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <csignal>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <pthread.h>

#include "visualsplit/bundle_io.hpp"
#include "visualsplit/edits.hpp"
#include "visualsplit/evaluation.hpp"
#include "visualsplit/previews.hpp"
#include "visualsplit/service.hpp"

namespace vsplit::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Malformed command line or config document.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flag-to-config-path bindings. Each bound flag copies its parsed value to
/// its path in the config document, but only when it was given.
class Bindings {
 public:
  template <class V>
  CLI::Option* option(CLI::App* app, const std::string& name, const std::string& path, const std::string& help) {
    auto value = std::make_shared<V>();
    auto* opt = app->add_option(name, *value, help + " [config: " + path + "]");
    setters_.push_back([opt, value, path](json& doc) {
      if (opt->count() > 0) doc[json::json_pointer(path)] = *value;
    });
    return opt;
  }

  /// A switch that writes `when_set` to `path`.
  CLI::Option* flag(CLI::App* app, const std::string& name, const std::string& path, const std::string& help,
                    json when_set = true) {
    const std::string description = help + " [config: " + path + "]";
    auto* opt = app->add_flag(name, description);
    setters_.push_back([opt, path, when_set](json& doc) {
      if (opt->count() > 0) doc[json::json_pointer(path)] = when_set;
    });
    return opt;
  }

  void apply(json& doc) const {
    for (const auto& set : setters_) set(doc);
  }

 private:
  std::vector<std::function<void(json&)>> setters_;
};

/// "k:a,b" as given to --recolour.
inline RecolourOp parse_recolour(const std::string& text) {
  const auto colon = text.find(':'), comma = text.find(',');
  if (colon == std::string::npos || comma == std::string::npos || comma < colon) {
    throw UsageError("--recolour expects k:a,b, got '" + text + "'");
  }
  try {
    std::size_t used = 0;
    const std::string k = text.substr(0, colon), a = text.substr(colon + 1, comma - colon - 1), b = text.substr(comma + 1);
    RecolourOp op;
    op.cluster = std::stoi(k, &used);
    if (used != k.size()) throw std::invalid_argument(k);
    op.ab[0] = std::stod(a, &used);
    if (used != a.size()) throw std::invalid_argument(a);
    op.ab[1] = std::stod(b, &used);
    if (used != b.size()) throw std::invalid_argument(b);
    return op;
  } catch (const std::logic_error&) {
    throw UsageError("--recolour expects k:a,b, got '" + text + "'");
  }
}

inline ShiftHistogramOp parse_shift(const std::string& text) {
  try {
    std::size_t used = 0;
    const double d = std::stod(text, &used);
    if (used == text.size()) return {d};
  } catch (const std::logic_error&) {
  }
  throw UsageError("--shift-hist expects a number, got '" + text + "'");
}

inline void write_text(const std::string& path, const std::string& text) {
  const auto dir = fs::path(path).parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  write_file(path, text);
}

inline std::string pretty(const json& j) { return j.dump(2) + "\n"; }

template <class V>
V section(const json& doc, const char* key) {
  try {
    return doc.value(key, json::object()).get<V>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("config section '") + key + "': " + e.what());
  }
}

inline std::string str(const json& doc, const std::string& path, const std::string& fallback = {}) {
  const json::json_pointer p(path);
  if (!doc.contains(p) || doc[p].is_null()) return fallback;
  if (!doc[p].is_string()) throw UsageError(path + " must be a string");
  return doc[p].get<std::string>();
}

inline std::string require(const json& doc, const std::string& path, const std::string& what) {
  auto s = str(doc, path);
  if (s.empty()) throw UsageError(what + " is required [config: " + path + "]");
  return s;
}

/// Runs one parsed command. Owns the output streams for a single invocation.
class Runner {
 public:
  Runner(json doc, std::ostream& out) : doc_(std::move(doc)), out_(out) {}

  bool json_output() const { return doc_.value("json", false); }

  /// Resolves and validates everything the command needs; usage errors only.
  void prepare(const std::string& command) {
    command_ = command;
    if (doc_.contains("seed")) {
      const auto seed = doc_["seed"].get<std::uint64_t>();
      doc_["/train/seed"_json_pointer] = seed;
      doc_["/probe/seed"_json_pointer] = seed;
      doc_["/extract/descriptor/seed"_json_pointer] = seed;
    }
    try {
      if (command == "extract") {
        extraction_ = section<ExtractionConfig>(doc_.value("extract", json::object()), "descriptor");
        extraction_.validate();
        if (!doc_.contains("/extract/inputs"_json_pointer) || doc_["/extract/inputs"_json_pointer].empty()) {
          throw UsageError("extract needs at least one image [config: /extract/inputs]");
        }
      } else if (command == "train" || command == "sweep") {
        train_ = section<TrainConfig>(doc_, "train");
        train_.validate();
        if (command == "sweep") {
          probe_ = section<ProbeConfig>(doc_, "probe");
          probe_.validate();
          require(doc_, "/sweep/data", "labelled dataset");
          if (doc_.contains("/sweep/clusters"_json_pointer)) {
            clusters_ = doc_["/sweep/clusters"_json_pointer].get<std::vector<int>>();
          }
          for (int k : clusters_) {
            auto ex = train_.descriptor;
            ex.clusters = k;
            ex.init_centroids.clear();
            ex.validate();
          }
        } else if (train_.dataset_root.empty()) {
          throw UsageError("training images are required [config: /train/dataset_root]");
        }
      } else if (command == "reconstruct") {
        require(doc_, "/reconstruct/checkpoint", "checkpoint");
        require(doc_, "/reconstruct/input", "bundle or image");
      } else if (command == "edit") {
        require(doc_, "/edit/input", "bundle");
        require(doc_, "/edit/output", "output bundle");
        ops_ = edit_script_from_json(doc_.value("/edit/ops"_json_pointer, json::array()));
      } else if (command == "probe") {
        probe_ = section<ProbeConfig>(doc_, "probe");
        probe_.validate();
        require(doc_, "/probe/checkpoint", "checkpoint");
        require(doc_, "/probe/data", "labelled dataset");
      } else if (command == "serve") {
        service_ = section<ServiceConfig>(doc_, "serve");
        service_.validate();
      }
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    } catch (const json::exception& e) {
      throw UsageError(e.what());
    }
  }

  void execute() {
    if (command_ == "extract") return extract();
    if (command_ == "train") return train();
    if (command_ == "reconstruct") return reconstruct();
    if (command_ == "edit") return edit();
    if (command_ == "probe") return probe_command();
    if (command_ == "sweep") return sweep();
    if (command_ == "serve") return serve();
  }

 private:
  void report(const json& result, const std::string& human) {
    if (json_output()) {
      out_ << result.dump() << '\n';
    } else {
      out_ << human;
    }
  }

  void extract() {
    const auto inputs = doc_["/extract/inputs"_json_pointer].get<std::vector<std::string>>();
    const auto output = str(doc_, "/extract/output");
    const auto size = doc_.value("/extract/size"_json_pointer, std::size_t{0});
    const bool previews = doc_.value("/extract/previews"_json_pointer, true);
    const bool single = inputs.size() == 1 && (output.empty() || fs::path(output).extension() == ".vsd");
    json written = json::array();
    std::ostringstream human;
    for (const auto& input : inputs) {
      auto image = to_float<float>(read_image(input));
      if (size > 0) image = resize_and_centre_crop(image, size);
      const auto bundle = extract_bundle(image, extraction_);
      fs::path target;
      if (single && !output.empty()) {
        target = output;
      } else {
        target = (output.empty() ? fs::path(input).parent_path() : fs::path(output)) / fs::path(input).stem();
        target.replace_extension(".vsd");
      }
      if (target.has_parent_path()) fs::create_directories(target.parent_path());
      save_bundle(bundle, target.string());
      json entry = {{"input", input}, {"bundle", target.string()}, {"height", bundle.height()}, {"width", bundle.width()}};
      human << input << " -> " << target.string() << '\n';
      if (previews) {
        const auto stem = (target.parent_path() / target.stem()).string();
        const std::vector<std::pair<std::string, Rgb8Image>> images = {
            {"edges", edge_preview(bundle.edges)},
            {"segmentation", segmentation_preview(bundle.segmentation)},
            {"histogram", histogram_preview(bundle.histogram)}};
        for (const auto& [name, img] : images) {
          const auto path = stem + "." + name + ".png";
          write_file(path, encode_png(img));
          entry["previews"][name] = path;
        }
      }
      written.push_back(entry);
    }
    report({{"extracted", written}}, human.str());
  }

  void train() {
    Trainer<float> trainer(train_);
    const auto resume = str(doc_, "/train/resume");
    if (!resume.empty()) trainer.load_checkpoint(resume);
    const auto data = prepare_batch<float>(list_images(train_.dataset_root), train_, train_.seed);
    spdlog::info("training on {} images from step {}", data.size(), trainer.step());
    trainer.run(data, static_cast<std::size_t>(-1), [](const StepRecord& r) {
      spdlog::debug("step {} loss {:.5f} lr {:.3g} |g| {:.3g}", r.step, r.loss.total, r.lr, r.grad_norm);
    });
    const auto path = trainer.checkpoint_path(trainer.step());
    trainer.save_checkpoint(path);
    report({{"checkpoint", path}, {"step", trainer.step()}, {"images", data.size()}},
           "checkpoint " + path + " at step " + std::to_string(trainer.step()) + "\n");
  }

  void reconstruct() {
    const auto ck = read_checkpoint<float>(str(doc_, "/reconstruct/checkpoint"));
    const auto input = str(doc_, "/reconstruct/input");
    DescriptorBundle<float> bundle;
    std::optional<RGBImage<float>> reference;
    if (fs::path(input).extension() == ".vsd") {
      bundle = load_bundle<float>(input);
    } else {
      reference = resize_and_centre_crop(to_float<float>(read_image(input)), ck.train.image_size);
      auto ex = ck.train.descriptor;
      if (doc_.contains("/extract/descriptor/seed"_json_pointer)) ex.seed = doc_["/extract/descriptor/seed"_json_pointer];
      bundle = extract_bundle(*reference, ex);
    }
    if (const auto ref = str(doc_, "/reconstruct/reference"); !ref.empty()) {
      auto img = to_float<float>(read_image(ref));
      if (img.height() != bundle.height() || img.width() != bundle.width()) {
        img = resize_and_centre_crop(img, bundle.height());
      }
      reference = img;
    }
    const auto recon = ck.model->reconstruct(bundle);
    auto output = str(doc_, "/reconstruct/output");
    if (output.empty()) output = fs::path(input).stem().string() + ".recon.png";
    write_text(output, encode_png(to_8bit(recon)));
    MetricReport metrics;
    if (reference) {
      require_shape(reference->pixels.shape(), recon.pixels.shape(), "reconstruct reference");
      metrics.psnr = psnr(recon, *reference);
      metrics.ssim = ssim(recon, *reference);
    }
    json result = metrics;
    result.erase("encoder_hash_before");
    result.erase("encoder_hash_after");
    result["output"] = output;
    result["height"] = recon.height();
    result["width"] = recon.width();
    result["mean_L"] = mean_lightness(recon);
    if (const auto path = str(doc_, "/reconstruct/report"); !path.empty()) write_text(path, pretty(result));
    std::ostringstream human;
    human << "wrote " << output << " (" << recon.height() << "x" << recon.width() << ")";
    if (metrics.psnr) human << " psnr " << *metrics.psnr << " ssim " << *metrics.ssim;
    report(result, human.str() + "\n");
  }

  void edit() {
    auto bundle = load_bundle<float>(str(doc_, "/edit/input"));
    std::vector<EditOp> ops;
    if (const auto script = str(doc_, "/edit/script"); !script.empty()) {
      const auto parsed = json::parse(read_file(script), nullptr, false);
      if (parsed.is_discarded()) throw FormatError("edit script " + script + " is not valid JSON");
      ops = edit_script_from_json(parsed);
    }
    ops.insert(ops.end(), ops_.begin(), ops_.end());
    apply_edits(bundle, ops);
    const auto output = str(doc_, "/edit/output");
    write_text(output, bundle_bytes(bundle));
    report({{"output", output}, {"applied", edit_script_to_json(ops)}},
           "applied " + std::to_string(ops.size()) + " edit(s) -> " + output + "\n");
  }

  void probe_command() {
    const auto ck = read_checkpoint<float>(str(doc_, "/probe/checkpoint"));
    const auto data = load_labelled_set<float>(str(doc_, "/probe/data"), ck.train.image_size);
    std::vector<DescriptorBundle<float>> bundles;
    for (std::size_t i = 0; i < data.images.size(); ++i) {
      auto ex = ck.train.descriptor;
      ex.seed = probe_.seed + i;
      bundles.push_back(extract_bundle(data.images[i], ex));
    }
    const auto metrics = probe(*ck.model, bundles, data.labels, data.num_classes, probe_);
    const json result = metrics;
    if (const auto path = str(doc_, "/probe/report"); !path.empty()) write_text(path, pretty(result));
    std::ostringstream human;
    human << "top-1 accuracy " << *metrics.accuracy << " on " << data.images.size() << " images, "
          << data.num_classes << " classes\n";
    report(result, human.str());
  }

  void sweep() {
    const auto data = load_labelled_set<float>(str(doc_, "/sweep/data"), train_.image_size);
    std::ostringstream human;
    const auto rows = sweep_clusters(clusters_, train_, probe_, data, [&](const SweepRow& r) {
      spdlog::info("K={} accuracy {:.4f} psnr {:.3f} ssim {:.4f}", r.clusters, r.accuracy, r.psnr, r.ssim);
    });
    const auto output = str(doc_, "/sweep/output", "sweep.csv");
    write_text(output, sweep_csv(rows));
    report({{"output", output}, {"rows", rows}}, sweep_csv(rows));
  }

  void serve() {
    EditingService<float> service(service_);
    HttpServer<float> server(service);
    const int port = server.bind(service_.host, service_.port);
    // SIGINT/SIGTERM stop the server from a dedicated thread.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);
    std::thread([&server, signals] {
      int sig = 0;
      sigwait(&signals, &sig);
      server.stop();
    }).detach();
    report({{"host", service_.host}, {"port", port}, {"checkpoint", service_.checkpoint}},
           "serving on http://" + service_.host + ":" + std::to_string(port) + "\n");
    out_.flush();
    server.run();
  }

  json doc_;
  std::ostream& out_;
  std::string command_;
  ExtractionConfig extraction_;
  TrainConfig train_;
  ProbeConfig probe_;
  ServiceConfig service_;
  std::vector<int> clusters_{2, 4, 6, 8};
  std::vector<EditOp> ops_;
};

inline void configure_logging(bool verbose) {
  static const auto logger = [] {
    auto l = spdlog::stderr_logger_mt("visualsplit");
    spdlog::set_default_logger(l);
    return l;
  }();
  logger->set_level(verbose ? spdlog::level::debug : spdlog::level::info);
}

inline json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  auto doc = json::parse(text, nullptr, false, true);
  if (doc.is_discarded() || !doc.is_object()) throw UsageError("config " + path + " is not a JSON object");
  return doc;
}

/// Parses `args` (without the program name) and runs the chosen subcommand.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"VisualSplit: descriptor extraction, training, reconstruction, editing and evaluation", "visualsplit"};
  app.get_formatter()->column_width(44);
  app.require_subcommand(1);
  app.fallthrough();
  Bindings bind;
  std::string config_path;
  app.add_option("--config", config_path, "JSON config document; flags override its values")->check(CLI::ExistingFile);
  bind.option<std::uint64_t>(&app, "--seed", "/seed", "seed for training, extraction and probing");
  bind.flag(&app, "-v,--verbose", "/verbose", "debug logging");
  bind.flag(&app, "--json", "/json", "machine-readable results on stdout and errors on stderr");

  auto* ex = app.add_subcommand("extract", "images -> .vsd bundles plus edge, segmentation and histogram previews");
  bind.option<std::vector<std::string>>(ex, "inputs", "/extract/inputs", "images to extract");
  bind.option<std::string>(ex, "-o,--output", "/extract/output",
                           "bundle path for one image, otherwise a directory (default: next to each image)");
  bind.option<std::size_t>(ex, "--size", "/extract/size", "resize and centre-crop to this side first (0 keeps the image)");
  bind.flag(ex, "--no-previews", "/extract/previews", "skip the preview PNGs", false);
  bind.option<int>(ex, "--clusters", "/extract/descriptor/clusters", "colour clusters K");
  bind.option<int>(ex, "--iterations", "/extract/descriptor/iterations", "soft k-means iterations");
  bind.option<double>(ex, "--temperature", "/extract/descriptor/temperature", "soft assignment temperature");
  bind.option<int>(ex, "--bins", "/extract/descriptor/num_bins", "histogram bins");
  bind.option<double>(ex, "--bandwidth", "/extract/descriptor/bandwidth", "histogram kernel bandwidth");

  auto* tr = app.add_subcommand("train", "train encoder and decoder; writes checkpoints and a metrics log");
  bind.option<std::string>(tr, "data", "/train/dataset_root", "folder of training images");
  bind.option<std::size_t>(tr, "--steps", "/train/total_steps", "total optimisation steps");
  bind.option<std::size_t>(tr, "--batch-size", "/train/batch_size", "images per step");
  bind.option<std::size_t>(tr, "--warmup", "/train/warmup_steps", "linear warm-up steps");
  bind.option<double>(tr, "--lr", "/train/base_lr", "peak learning rate");
  bind.option<double>(tr, "--weight-decay", "/train/weight_decay", "AdamW weight decay");
  bind.option<std::size_t>(tr, "--image-size", "/train/image_size", "training side length");
  bind.option<std::string>(tr, "--checkpoint-dir", "/train/checkpoint_dir", "checkpoint directory");
  bind.option<std::size_t>(tr, "--checkpoint-every", "/train/checkpoint_every", "steps between checkpoints (0: end only)");
  bind.option<std::string>(tr, "--metrics", "/train/metrics_path", "JSON-lines metrics log");
  bind.option<std::string>(tr, "--resume", "/train/resume", "checkpoint to continue from");

  auto* rc = app.add_subcommand("reconstruct", "checkpoint + bundle or image -> PNG and metric report");
  bind.option<std::string>(rc, "checkpoint", "/reconstruct/checkpoint", "trained checkpoint");
  bind.option<std::string>(rc, "input", "/reconstruct/input", ".vsd bundle or image");
  bind.option<std::string>(rc, "-o,--output", "/reconstruct/output", "output PNG (default: <input>.recon.png)");
  bind.option<std::string>(rc, "--reference", "/reconstruct/reference", "image to score the reconstruction against");
  bind.option<std::string>(rc, "--report", "/reconstruct/report", "write the metric report as JSON");

  auto* ed = app.add_subcommand("edit", "apply recolour and histogram-shift edits to a bundle");
  bind.option<std::string>(ed, "input", "/edit/input", "bundle to edit");
  bind.option<std::string>(ed, "-o,--output", "/edit/output", "edited bundle");
  bind.option<std::string>(ed, "--script", "/edit/script", "JSON list of {op, args}, applied before the other edits");
  std::vector<std::string> recolours, shifts;
  auto* recolour_opt = ed->add_option("--recolour", recolours, "set centroid k to (a,b), as k:a,b [config: /edit/ops]")
                           ->allow_extra_args(false);
  auto* shift_opt = ed->add_option("--shift-hist", shifts, "shift the grey-level histogram by delta L [config: /edit/ops]")
                        ->allow_extra_args(false);

  auto* pr = app.add_subcommand("probe", "linear or finetune classification probe on a labelled folder");
  bind.option<std::string>(pr, "checkpoint", "/probe/checkpoint", "trained checkpoint");
  bind.option<std::string>(pr, "data", "/probe/data", "folder with one subfolder per class");
  bind.option<std::string>(pr, "--mode", "/probe/mode", "linear or finetune")->check(CLI::IsMember({"linear", "finetune"}));
  bind.option<std::string>(pr, "--representation", "/probe/representation", "global or mean_local")
      ->check(CLI::IsMember({"global", "mean_local"}));
  bind.option<std::size_t>(pr, "--epochs", "/probe/epochs", "probe epochs");
  bind.option<double>(pr, "--lr", "/probe/lr", "head learning rate");
  bind.option<double>(pr, "--encoder-lr", "/probe/encoder_lr", "encoder learning rate (finetune)");
  bind.option<double>(pr, "--weight-decay", "/probe/weight_decay", "head weight decay");
  bind.option<std::size_t>(pr, "--batch-size", "/probe/batch_size", "probe batch size (0: full batch)");
  bind.option<double>(pr, "--test-fraction", "/probe/test_fraction", "held-out fraction per class");
  bind.option<std::string>(pr, "--report", "/probe/report", "write the metric report as JSON");

  auto* sw = app.add_subcommand("sweep", "train and probe once per cluster count K; writes a CSV");
  bind.option<std::string>(sw, "data", "/sweep/data", "folder with one subfolder per class");
  bind.option<std::vector<int>>(sw, "--clusters", "/sweep/clusters", "cluster counts to try")->delimiter(',');
  bind.option<std::string>(sw, "-o,--output", "/sweep/output", "CSV path (default: sweep.csv)");
  bind.option<std::size_t>(sw, "--steps", "/train/total_steps", "training steps per K");
  bind.option<std::size_t>(sw, "--image-size", "/train/image_size", "training side length");

  auto* sv = app.add_subcommand("serve", "HTTP editing service");
  bind.option<std::string>(sv, "--host", "/serve/host", "bind address");
  bind.option<int>(sv, "--port", "/serve/port", "port (0 picks a free one)");
  bind.option<std::string>(sv, "--checkpoint", "/serve/checkpoint", "checkpoint for /reconstruct");
  bind.option<double>(sv, "--session-ttl", "/serve/session_ttl_seconds", "idle seconds before a session expires");
  bind.option<std::size_t>(sv, "--max-upload", "/serve/max_upload_bytes", "largest accepted upload in bytes");
  bind.option<std::size_t>(sv, "--max-side", "/serve/max_side", "uploads are downscaled to this side");
  bind.option<std::size_t>(sv, "--undo-depth", "/serve/undo_depth", "undo steps kept per session");

  bool as_json = std::find(args.begin(), args.end(), "--json") != args.end();
  const auto fail = [&](int code, const std::string& kind, const std::string& message) {
    if (as_json) {
      err << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << '\n';
    } else {
      err << "error: " << message << '\n';
    }
    return code;
  };

  try {
    std::vector<const char*> argv{"visualsplit"};
    for (const auto& a : args) argv.push_back(a.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (!as_json) err << app.help();
    // first bare word that is not the value of --config or --seed
    for (std::size_t i = 0; i < args.size() && app.get_subcommands().empty(); ++i) {
      if (args[i] == "--config" || args[i] == "--seed") {
        ++i;
      } else if (!args[i].starts_with("-")) {
        if (!app.get_subcommand_no_throw(args[i])) return fail(kExitUsage, "usage", "unknown subcommand '" + args[i] + "'");
        break;
      }
    }
    return fail(kExitUsage, "usage", e.what());
  }
  const CLI::App* command = app.get_subcommands().front();

  std::optional<Runner> runner;
  try {
    auto doc = read_config(config_path);
    as_json = as_json || doc.value("json", false);
    // environment overrides the file, flags override both
    if (command == sv) doc["serve"] = section<ServiceConfig>(doc, "serve").with_env();
    bind.apply(doc);
    if (command == ed && (!recolours.empty() || !shifts.empty())) {
      json ops = json::array();
      std::size_t r = 0, s = 0;
      for (const auto* opt : ed->parse_order()) {
        if (opt == recolour_opt) ops.push_back(edit_to_json(parse_recolour(recolours.at(r++))));
        if (opt == shift_opt) ops.push_back(edit_to_json(parse_shift(shifts.at(s++))));
      }
      doc["/edit/ops"_json_pointer] = ops;
    }
    configure_logging(doc.value("verbose", false));
    runner.emplace(std::move(doc), out);
    runner->prepare(command->get_name());
  } catch (const std::exception& e) {
    return fail(kExitUsage, "usage", e.what());
  }

  try {
    runner->execute();
  } catch (const std::exception& e) {
    return fail(kExitRuntime, "runtime", e.what());
  }
  return kExitOk;
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace vsplit::cli
