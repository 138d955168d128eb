#pragma once

// Data preparation, learning-rate schedule, the training loop, checkpoints
// and the metrics log.

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "visualsplit/bundle_io.hpp"
#include "visualsplit/colour.hpp"
#include "visualsplit/image_io.hpp"
#include "visualsplit/losses.hpp"
#include "visualsplit/model.hpp"
#include "visualsplit/optim.hpp"

namespace vsplit {

/// Photometric jitter applied in LAB before descriptor extraction. With
/// probability `probability`, L is shifted by U(−brightness, brightness) and
/// (a,b) is rotated by U(−hue_degrees, hue_degrees).
struct AugmentConfig {
  double brightness = 0;
  double hue_degrees = 0;
  double probability = 0.5;

  bool enabled() const { return brightness > 0 || hue_degrees > 0; }
  bool operator==(const AugmentConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = {{"brightness", c.brightness}, {"hue_degrees", c.hue_degrees}, {"probability", c.probability}};
}

inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
  AugmentConfig d;
  c.brightness = j.value("brightness", d.brightness);
  c.hue_degrees = j.value("hue_degrees", d.hue_degrees);
  c.probability = j.value("probability", d.probability);
}

struct TrainConfig {
  std::size_t image_size = 224;
  std::size_t batch_size = 8;
  std::size_t total_steps = 1000;
  std::size_t warmup_steps = 50;
  double base_lr = 1.5e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::string dataset_root;
  std::size_t checkpoint_every = 0;  // 0: only at the end of a run
  std::string checkpoint_dir = "checkpoints";
  std::string metrics_path;  // empty: no metrics log
  LossConfig loss;
  ModelConfig model;
  ExtractionConfig descriptor;
  AugmentConfig augment;

  void validate() const {
    if (total_steps == 0) throw ConfigError("total_steps must be positive");
    if (warmup_steps >= total_steps) throw ConfigError("warmup_steps must be below total_steps");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(base_lr >= 0)) throw ConfigError("base_lr must be >= 0");
    if (image_size == 0 || image_size % model.encoder.patch_size != 0) {
      throw ConfigError("image_size must be a positive multiple of the patch size");
    }
    if (static_cast<std::size_t>(descriptor.num_bins) != model.encoder.hist_bins) {
      throw ConfigError("descriptor num_bins must equal encoder hist_bins");
    }
    if (!(augment.probability >= 0 && augment.probability <= 1)) throw ConfigError("augment probability must lie in [0,1]");
    model.validate();
    loss.validate();
    descriptor.validate();
    optimizer().validate();
  }

  AdamWConfig optimizer() const { return {beta1, beta2, 1e-8, weight_decay, clip_norm}; }

  bool operator==(const TrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"image_size", c.image_size},
       {"batch_size", c.batch_size},
       {"total_steps", c.total_steps},
       {"warmup_steps", c.warmup_steps},
       {"base_lr", c.base_lr},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"clip_norm", c.clip_norm},
       {"seed", c.seed},
       {"dataset_root", c.dataset_root},
       {"checkpoint_every", c.checkpoint_every},
       {"checkpoint_dir", c.checkpoint_dir},
       {"metrics_path", c.metrics_path},
       {"loss", c.loss},
       {"encoder", c.model.encoder},
       {"decoder", c.model.decoder},
       {"descriptor", c.descriptor},
       {"augment", c.augment}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.base_lr = j.value("base_lr", d.base_lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.seed = j.value("seed", d.seed);
  c.dataset_root = j.value("dataset_root", d.dataset_root);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.checkpoint_dir = j.value("checkpoint_dir", d.checkpoint_dir);
  c.metrics_path = j.value("metrics_path", d.metrics_path);
  c.loss = j.value("loss", d.loss);
  c.model.encoder = j.value("encoder", d.model.encoder);
  c.model.decoder = j.value("decoder", d.model.decoder);
  c.descriptor = j.value("descriptor", d.descriptor);
  c.augment = j.value("augment", d.augment);
}

/// Linear warmup to base_lr, then cosine decay to zero at total_steps.
inline double lr_at(std::size_t step, const TrainConfig& c) {
  if (step > c.total_steps) {
    throw std::out_of_range("step " + std::to_string(step) + " outside [0," + std::to_string(c.total_steps) + "]");
  }
  if (step < c.warmup_steps) return c.base_lr * double(step) / double(c.warmup_steps);
  const double progress = double(step - c.warmup_steps) / double(c.total_steps - c.warmup_steps);
  return c.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ------------------------------------------------------------------ data

/// Images and their descriptor bundles; bundles come from the images alone.
template <class T>
struct Batch {
  std::vector<RGBImage<T>> images;
  std::vector<DescriptorBundle<T>> bundles;
  std::vector<std::string> paths;

  std::size_t size() const { return images.size(); }

  Tensor<T> stacked_images() const {
    if (images.empty()) throw ShapeError("empty batch");
    const auto h = images[0].height(), w = images[0].width();
    Tensor<T> out({images.size(), h, w, 3});
    for (std::size_t i = 0; i < images.size(); ++i) {
      require_shape(images[i].pixels.shape(), {h, w, 3}, "batch image");
      std::copy(images[i].pixels.values().begin(), images[i].pixels.values().end(), out.data() + i * h * w * 3);
    }
    return out;
  }
};

template <class T>
RGBImage<T> load_training_image(const std::string& path, std::size_t image_size) {
  return resize_and_centre_crop(to_float<T>(read_image(path)), image_size);
}

/// Loads, resizes/crops and extracts bundles. Unreadable files are skipped
/// with a warning; a batch with no readable image is rejected.
template <class T = float>
Batch<T> prepare_batch(const std::vector<std::string>& paths, const TrainConfig& config, std::uint64_t seed) {
  Batch<T> batch;
  auto extraction = config.descriptor;
  extraction.seed = seed;
  for (const auto& p : paths) {
    RGBImage<T> img;
    try {
      img = load_training_image<T>(p, config.image_size);
    } catch (const FormatError& e) {
      spdlog::warn("skipping {}: {}", p, e.what());
      continue;
    }
    batch.bundles.push_back(extract_bundle(img, extraction));
    batch.images.push_back(std::move(img));
    batch.paths.push_back(p);
  }
  if (batch.images.empty()) throw FormatError("no readable images in batch");
  return batch;
}

inline bool has_image_extension(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

/// All image files under `root`, sorted by path.
inline std::vector<std::string> list_images(const std::string& root) {
  if (!std::filesystem::is_directory(root)) throw FormatError("dataset root " + root + " is not a directory");
  std::vector<std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && has_image_extension(e.path())) out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct LabelledImages {
  std::vector<std::string> paths;
  std::vector<int> labels;
  std::vector<std::string> classes;
};

/// Folder-per-class layout: root/<class>/<image>. Classes sorted by name.
inline LabelledImages list_labelled_images(const std::string& root) {
  if (!std::filesystem::is_directory(root)) throw FormatError("dataset root " + root + " is not a directory");
  LabelledImages out;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_directory()) out.classes.push_back(e.path().filename().string());
  }
  std::sort(out.classes.begin(), out.classes.end());
  for (std::size_t c = 0; c < out.classes.size(); ++c) {
    for (const auto& p : list_images((std::filesystem::path(root) / out.classes[c]).string())) {
      out.paths.push_back(p);
      out.labels.push_back(static_cast<int>(c));
    }
  }
  return out;
}

template <class T>
RGBImage<T> photometric_jitter(const RGBImage<T>& image, double delta_L, double hue_radians) {
  auto lab = rgb_to_lab(image);
  const double c = std::cos(hue_radians), s = std::sin(hue_radians);
  const std::size_t n = image.height() * image.width();
  for (std::size_t p = 0; p < n; ++p) {
    T* px = lab.lab.data() + 3 * p;
    const double a = px[1], b = px[2];
    px[0] = static_cast<T>(std::clamp(double(px[0]) + delta_L, 0.0, 100.0));
    px[1] = static_cast<T>(c * a - s * b);
    px[2] = static_cast<T>(s * a + c * b);
  }
  return lab_to_rgb(lab);
}

// ------------------------------------------------------------------ trainer

inline constexpr const char* kCheckpointMagic = "VSCK";
inline constexpr int kCheckpointFormatVersion = 1;

struct StepRecord {
  std::size_t step;
  double lr;
  double grad_norm;
  LossReport loss;
};

inline void to_json(nlohmann::json& j, const StepRecord& r) {
  j = {{"step", r.step}, {"lr", r.lr}, {"grad_norm", r.grad_norm}};
  j.update(nlohmann::json(r.loss));
}

/// Model, optimizer moments, step counter and RNG: everything needed to
/// resume a run exactly.
template <class T = float>
class Trainer {
 public:
  explicit Trainer(TrainConfig config)
      : config_((config.validate(), std::move(config))),
        model_(std::make_unique<VisualSplitModel<T>>(config_.model, config_.seed)),
        optimizer_(model_->params(), config_.optimizer()),
        rng_(config_.seed ^ 0x9e3779b97f4a7c15ull) {
    if (config_.loss.perceptual_mode != PerceptualMode::off) {
      perceptual_ = PerceptualFeatures<T>::from_config(config_.loss);
    }
  }

  const TrainConfig& config() const { return config_; }
  VisualSplitModel<T>& model() { return *model_; }
  const VisualSplitModel<T>& model() const { return *model_; }
  AdamW<T>& optimizer() { return optimizer_; }
  std::size_t step() const { return step_; }
  std::mt19937_64& rng() { return rng_; }

  /// One optimisation step on `batch`. A non-finite loss or gradient aborts
  /// the step before any state changes.
  StepRecord train_step(const Batch<T>& batch) {
    if (step_ >= config_.total_steps) throw std::out_of_range("training already reached total_steps");
    auto& params = model_->params();
    params.zero_grad();
    const auto in = encoder_inputs(batch.bundles);
    const auto recon = model_->reconstruct(in);
    const auto target = ad::constant(batch.stacked_images());
    const auto terms = compute_losses(recon, target, batch.bundles, config_.loss, perceptual_ ? &*perceptual_ : nullptr);
    const auto& r = terms.report;
    const std::pair<const char*, double> parts[] = {{"pixel", r.pixel}, {"perceptual", r.perceptual},
                                                    {"edge", r.edge},   {"hist", r.hist},
                                                    {"colour", r.colour}, {"total", r.total}};
    for (const auto& [name, value] : parts) {
      if (!std::isfinite(value)) {
        throw NonFiniteLossError(name, std::string("non-finite ") + name + " loss at step " + std::to_string(step_ + 1));
      }
    }
    ad::backward(terms.total);
    if (!std::isfinite(gradient_norm(params))) {
      params.zero_grad();
      throw NonFiniteLossError("gradient", "non-finite gradient at step " + std::to_string(step_ + 1));
    }
    const double lr = lr_at(step_ + 1, config_);
    const double norm = optimizer_.step(params, lr);
    params.zero_grad();
    ++step_;
    return {step_, lr, norm, r};
  }

  /// Picks the next batch from `data` (whole set when it fits, otherwise
  /// a shuffled window) and applies augmentation when configured.
  Batch<T> next_batch(const Batch<T>& data) {
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (data.size() > config_.batch_size) {
      for (std::size_t i = 0; i < config_.batch_size; ++i) {
        const auto j = i + static_cast<std::size_t>(rng_() % (idx.size() - i));
        std::swap(idx[i], idx[j]);
      }
      idx.resize(config_.batch_size);
    }
    Batch<T> out;
    const auto& aug = config_.augment;
    for (auto i : idx) {
      out.paths.push_back(i < data.paths.size() ? data.paths[i] : std::string());
      if (aug.enabled() && uniform() < aug.probability) {
        const double dl = (2 * uniform() - 1) * aug.brightness;
        const double hue = (2 * uniform() - 1) * aug.hue_degrees * std::numbers::pi / 180.0;
        auto img = photometric_jitter(data.images[i], dl, hue);
        auto extraction = data.bundles[i].config;
        extraction.init_centroids.clear();
        out.bundles.push_back(extract_bundle(img, extraction));
        out.images.push_back(std::move(img));
      } else {
        out.images.push_back(data.images[i]);
        out.bundles.push_back(data.bundles[i]);
      }
    }
    return out;
  }

  using Callback = std::function<void(const StepRecord&)>;

  /// Trains until total_steps, appending to the metrics log and writing
  /// checkpoints as configured.
  void run(const Batch<T>& data, std::size_t max_steps = static_cast<std::size_t>(-1), const Callback& on_step = {}) {
    std::ofstream metrics;
    if (!config_.metrics_path.empty()) {
      const auto dir = std::filesystem::path(config_.metrics_path).parent_path();
      if (!dir.empty()) std::filesystem::create_directories(dir);
      metrics.open(config_.metrics_path, std::ios::app);
      if (!metrics) throw FormatError("cannot open metrics log " + config_.metrics_path);
    }
    for (std::size_t n = 0; n < max_steps && step_ < config_.total_steps; ++n) {
      const auto rec = train_step(next_batch(data));
      if (metrics.is_open()) metrics << nlohmann::json(rec).dump() << '\n' << std::flush;
      if (on_step) on_step(rec);
      if (config_.checkpoint_every > 0 && step_ % config_.checkpoint_every == 0) {
        save_checkpoint(checkpoint_path(step_));
      }
    }
  }

  std::string checkpoint_path(std::size_t step) const {
    return (std::filesystem::path(config_.checkpoint_dir) / ("step_" + std::to_string(step) + ".vsck")).string();
  }

  std::string checkpoint_bytes() const {
    ArchiveWriter w(kCheckpointMagic);
    std::ostringstream rng_state;
    rng_state << rng_;
    w.header() = {{"format_version", kCheckpointFormatVersion},
                  {"model", config_.model},
                  {"train", config_},
                  {"step", step_},
                  {"optimizer_steps", optimizer_.steps()},
                  {"rng", rng_state.str()}};
    const auto& entries = model_->params().entries();
    for (const auto& p : entries) w.add(p.name, p.var.value());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      w.add("optimizer/m/" + entries[i].name, optimizer_.first_moments()[i]);
      w.add("optimizer/v/" + entries[i].name, optimizer_.second_moments()[i]);
    }
    return w.bytes();
  }

  void save_checkpoint(const std::string& path) const {
    const auto dir = std::filesystem::path(path).parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);
    write_file(path, checkpoint_bytes());
  }

  /// Restores a checkpoint written by a trainer with the same model config.
  void load_checkpoint(const std::string& path) { restore(ArchiveReader::from_file(path, kCheckpointMagic)); }

  /// Builds a trainer entirely from a checkpoint's own config header.
  static std::unique_ptr<Trainer> from_checkpoint(const std::string& path) {
    const auto r = ArchiveReader::from_file(path, kCheckpointMagic);
    check_version(r.header());
    auto t = std::make_unique<Trainer>(r.header().at("train").get<TrainConfig>());
    t->restore(r);
    return t;
  }

 private:
  static void check_version(const nlohmann::json& h) {
    if (h.value("format_version", -1) != kCheckpointFormatVersion) {
      throw FormatError("unsupported checkpoint format version " + h.value("format_version", nlohmann::json()).dump());
    }
  }

  void restore(const ArchiveReader& r) {
    check_version(r.header());
    const auto stored = r.header().at("model").get<ModelConfig>();
    if (!(stored == config_.model)) {
      throw ConfigError("checkpoint model config " + nlohmann::json(stored).dump() + " does not match " +
                        nlohmann::json(config_.model).dump());
    }
    const auto& entries = model_->params().entries();
    // read everything before touching live state
    std::vector<Tensor<T>> values, m, v;
    for (const auto& p : entries) {
      values.push_back(r.get<T>(p.name, p.var.shape()));
      m.push_back(r.get<T>("optimizer/m/" + p.name, p.var.shape()));
      v.push_back(r.get<T>("optimizer/v/" + p.name, p.var.shape()));
    }
    std::mt19937_64 rng;
    std::istringstream(r.header().at("rng").get<std::string>()) >> rng;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto var = entries[i].var;
      var.mutable_value() = std::move(values[i]);
    }
    optimizer_.first_moments() = std::move(m);
    optimizer_.second_moments() = std::move(v);
    optimizer_.set_steps(r.header().at("optimizer_steps").get<std::size_t>());
    step_ = r.header().at("step").get<std::size_t>();
    rng_ = rng;
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }

  TrainConfig config_;
  std::unique_ptr<VisualSplitModel<T>> model_;
  AdamW<T> optimizer_;
  std::mt19937_64 rng_;
  std::optional<PerceptualFeatures<T>> perceptual_;
  std::size_t step_ = 0;
};

/// Model weights plus the training record of a checkpoint, without optimizer state.
template <class T>
struct LoadedCheckpoint {
  std::unique_ptr<VisualSplitModel<T>> model;
  TrainConfig train;
  std::size_t step = 0;
  int format_version = kCheckpointFormatVersion;
};

template <class T = float>
LoadedCheckpoint<T> read_checkpoint(const std::string& path) {
  const auto r = ArchiveReader::from_file(path, kCheckpointMagic);
  if (r.header().value("format_version", -1) != kCheckpointFormatVersion) {
    throw FormatError("unsupported checkpoint format version");
  }
  LoadedCheckpoint<T> out;
  try {
    out.train = r.header().at("train").get<TrainConfig>();
    out.step = r.header().at("step").get<std::size_t>();
    out.model = std::make_unique<VisualSplitModel<T>>(r.header().at("model").get<ModelConfig>(), 0);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("malformed checkpoint header: ") + ex.what());
  }
  for (const auto& p : out.model->params().entries()) {
    auto var = p.var;
    var.mutable_value() = r.get<T>(p.name, p.var.shape());
  }
  return out;
}

/// Loads only the model (for inference) from a checkpoint.
template <class T = float>
std::unique_ptr<VisualSplitModel<T>> load_model(const std::string& path) {
  return read_checkpoint<T>(path).model;
}

}  // namespace vsplit
