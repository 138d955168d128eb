#pragma once

// HTTP editing service: sessions hold a descriptor bundle that clients edit
// and reconstruct against a read-only checkpoint.
//
//   POST /extract       raw PNG/JPEG body, or JSON {"image": <base64>}
//   POST /edit          {"session_id", "ops": [edit ops]} or {"session_id", "undo": true}
//   POST /reconstruct   {"session_id"}
//   GET  /health
//   GET  /session/{id}

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>

#include "visualsplit/edits.hpp"
#include "visualsplit/evaluation.hpp"
#include "visualsplit/previews.hpp"

namespace vsplit {

inline constexpr int kServiceSchemaVersion = 1;

inline std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

/// Strict base64 (no whitespace). Throws FormatError on malformed input.
inline std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw FormatError("base64 length must be a multiple of 4");
  if (text.empty()) return {};
  std::string out(3 * text.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw FormatError("malformed base64");
  std::size_t pad = 0;
  if (text.back() == '=') ++pad;
  if (text.size() >= 2 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string checkpoint;  // empty: extraction and editing only
  double session_ttl_seconds = 1800;
  std::size_t max_upload_bytes = std::size_t{8} << 20;
  std::size_t max_side = 1024;  // larger uploads are downscaled first
  std::size_t undo_depth = 16;
  ExtractionConfig extraction;  // used when no checkpoint is loaded

  void validate() const {
    if (port < 0 || port > 65535) throw ConfigError("port outside [0,65535]");
    if (!(session_ttl_seconds > 0)) throw ConfigError("session_ttl_seconds must be > 0");
    if (max_upload_bytes == 0 || max_side == 0) throw ConfigError("upload limits must be positive");
    if (undo_depth < 10) throw ConfigError("undo_depth must be at least 10");
    extraction.validate();
  }

  /// Overrides from VSPLIT_HOST, VSPLIT_PORT, VSPLIT_CHECKPOINT and VSPLIT_SESSION_TTL.
  ServiceConfig with_env() const {
    ServiceConfig c = *this;
    if (const char* v = std::getenv("VSPLIT_HOST")) c.host = v;
    try {
      if (const char* v = std::getenv("VSPLIT_PORT")) c.port = std::stoi(v);
      if (const char* v = std::getenv("VSPLIT_SESSION_TTL")) c.session_ttl_seconds = std::stod(v);
    } catch (const std::logic_error&) {
      throw ConfigError("VSPLIT_PORT / VSPLIT_SESSION_TTL must be numbers");
    }
    if (const char* v = std::getenv("VSPLIT_CHECKPOINT")) c.checkpoint = v;
    return c;
  }

  bool operator==(const ServiceConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ServiceConfig& c) {
  j = {{"host", c.host},
       {"port", c.port},
       {"checkpoint", c.checkpoint},
       {"session_ttl_seconds", c.session_ttl_seconds},
       {"max_upload_bytes", c.max_upload_bytes},
       {"max_side", c.max_side},
       {"undo_depth", c.undo_depth},
       {"extraction", c.extraction}};
}

inline void from_json(const nlohmann::json& j, ServiceConfig& c) {
  ServiceConfig d;
  c.host = j.value("host", d.host);
  c.port = j.value("port", d.port);
  c.checkpoint = j.value("checkpoint", d.checkpoint);
  c.session_ttl_seconds = j.value("session_ttl_seconds", d.session_ttl_seconds);
  c.max_upload_bytes = j.value("max_upload_bytes", d.max_upload_bytes);
  c.max_side = j.value("max_side", d.max_side);
  c.undo_depth = j.value("undo_depth", d.undo_depth);
  c.extraction = j.value("extraction", d.extraction);
}

/// An HTTP status with a JSON error body.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

struct ServiceReply {
  int status = 200;
  nlohmann::json body;
};

/// Transport-independent service core; HttpServer wires it to HTTP.
template <class T = float>
class EditingService {
 public:
  using Clock = std::chrono::steady_clock;

  explicit EditingService(ServiceConfig config) : config_((config.validate(), std::move(config))) {
    if (!config_.checkpoint.empty()) {
      auto loaded = read_checkpoint<T>(config_.checkpoint);
      model_ = std::move(loaded.model);
      train_ = loaded.train;
      step_ = loaded.step;
      hash_ = parameter_hash(*model_);
      extraction_ = train_.descriptor;
    } else {
      extraction_ = config_.extraction;
    }
    started_ = Clock::now();
  }

  const ServiceConfig& config() const { return config_; }
  bool has_checkpoint() const { return model_ != nullptr; }
  /// Hash over every model parameter; 0 without a checkpoint.
  std::uint64_t model_hash() const { return model_ ? parameter_hash(*model_) : 0; }
  std::size_t session_count() const {
    std::lock_guard lock(sessions_mutex_);
    return sessions_.size();
  }

  ServiceReply extract(std::string_view image_bytes) {
    return guarded([&] {
      if (image_bytes.size() > config_.max_upload_bytes) {
        throw ServiceError(413, "upload of " + std::to_string(image_bytes.size()) + " bytes exceeds the " +
                                    std::to_string(config_.max_upload_bytes) + "-byte limit");
      }
      RGBImage<T> image;
      try {
        image = to_float<T>(decode_image(image_bytes));
      } catch (const FormatError& ex) {
        throw ServiceError(400, std::string("undecodable image: ") + ex.what());
      }
      image = limit_size(image, config_.max_side);
      if (model_) image = resize_and_centre_crop(image, train_.image_size);

      auto s = std::make_shared<Session>();
      s->bundle = extract_bundle(image, extraction_);
      s->original = std::move(image);
      s->created_at = std::chrono::system_clock::now();
      s->last_access = Clock::now();
      const auto id = new_session_id();
      {
        std::lock_guard lock(sessions_mutex_);
        sessions_[id] = s;
      }
      std::lock_guard lock(s->mutex);
      auto body = describe(*s);
      body["session_id"] = id;
      return ServiceReply{200, std::move(body)};
    });
  }

  /// `request`: {"session_id", "ops": [...]} or {"session_id", "undo": true}.
  ServiceReply edit(const nlohmann::json& request) {
    return guarded([&] {
      auto s = session(request);
      std::lock_guard lock(s->mutex);
      if (request.contains("undo") && !request["undo"].is_boolean()) throw ServiceError(422, "'undo' must be a boolean");
      if (request.value("undo", false)) {
        if (s->undo.empty()) throw ServiceError(422, "nothing to undo");
        s->bundle = std::move(s->undo.back().first);
        s->undo.pop_back();
        s->history.pop_back();
      } else {
        if (!request.contains("ops")) throw ServiceError(422, "edit request needs 'ops' or 'undo'");
        std::vector<EditOp> ops;
        DescriptorBundle<T> edited = s->bundle;
        try {
          ops = edit_script_from_json(request["ops"]);
          apply_edits(edited, ops);
        } catch (const std::invalid_argument& ex) {  // ConfigError, range checks
          throw ServiceError(422, ex.what());
        } catch (const IndexError& ex) {
          throw ServiceError(422, ex.what());
        }
        s->undo.emplace_back(std::move(s->bundle), ops);
        if (s->undo.size() > config_.undo_depth) s->undo.pop_front();
        s->history.push_back(edit_script_to_json(ops));
        if (s->history.size() > config_.undo_depth) s->history.erase(s->history.begin());
        s->bundle = std::move(edited);
      }
      return ServiceReply{200, describe(*s)};
    });
  }

  ServiceReply reconstruct(const nlohmann::json& request) {
    return guarded([&] {
      auto s = session(request);
      if (!model_) throw ServiceError(503, "no checkpoint loaded");
      DescriptorBundle<T> bundle;
      std::optional<RGBImage<T>> original;
      {
        std::lock_guard lock(s->mutex);
        bundle = s->bundle;
        original = s->original;
      }
      const auto recon = model_->reconstruct(bundle);
      nlohmann::json body = envelope();
      body["image"] = base64_encode(encode_png(to_8bit(recon)));
      body["width"] = recon.width();
      body["height"] = recon.height();
      body["mean_L"] = mean_lightness(recon);
      if (original) {
        const double p = psnr(recon, *original);
        body["psnr"] = std::isinf(p) ? nlohmann::json("inf") : nlohmann::json(p);
        body["ssim"] = ssim(recon, *original);
      }
      return ServiceReply{200, std::move(body)};
    });
  }

  ServiceReply health() const {
    auto body = envelope();
    body["status"] = "ok";
    body["uptime_seconds"] = std::chrono::duration<double>(Clock::now() - started_).count();
    body["sessions"] = session_count();
    return {200, std::move(body)};
  }

  ServiceReply session_info(const std::string& id) {
    return guarded([&] {
      auto s = session(nlohmann::json{{"session_id", id}});
      std::lock_guard lock(s->mutex);
      auto body = describe(*s);
      body["session_id"] = id;
      body["created_at"] = std::chrono::duration_cast<std::chrono::seconds>(s->created_at.time_since_epoch()).count();
      return ServiceReply{200, std::move(body)};
    });
  }

  /// Drops sessions idle for longer than the TTL; returns how many went.
  std::size_t evict_expired(Clock::time_point now = Clock::now()) {
    std::lock_guard lock(sessions_mutex_);
    std::size_t dropped = 0;
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      if (expired(*it->second, now)) {
        it = sessions_.erase(it);
        ++dropped;
      } else {
        ++it;
      }
    }
    return dropped;
  }

  nlohmann::json envelope() const {
    nlohmann::json j{{"schema_version", kServiceSchemaVersion}};
    if (model_) {
      j["checkpoint"] = {{"id", checkpoint_id()},
                         {"format_version", kCheckpointFormatVersion},
                         {"step", step_},
                         {"image_size", train_.image_size},
                         {"model", train_.model}};
    } else {
      j["checkpoint"] = nullptr;
    }
    return j;
  }

 private:
  struct Session {
    std::mutex mutex;
    DescriptorBundle<T> bundle;
    std::optional<RGBImage<T>> original;
    std::deque<std::pair<DescriptorBundle<T>, std::vector<EditOp>>> undo;
    std::vector<nlohmann::json> history;
    std::chrono::system_clock::time_point created_at;
    Clock::time_point last_access;  // guarded by sessions_mutex_
  };

  bool expired(const Session& s, Clock::time_point now) const {
    return std::chrono::duration<double>(now - s.last_access).count() > config_.session_ttl_seconds;
  }

  std::shared_ptr<Session> session(const nlohmann::json& request) {
    if (!request.is_object() || !request.contains("session_id") || !request["session_id"].is_string()) {
      throw ServiceError(400, "request needs a string 'session_id'");
    }
    const auto id = request["session_id"].get<std::string>();
    std::lock_guard lock(sessions_mutex_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ServiceError(404, "unknown session '" + id + "'");
    const auto now = Clock::now();
    if (expired(*it->second, now)) {
      sessions_.erase(it);
      throw ServiceError(404, "session '" + id + "' expired");
    }
    it->second->last_access = now;
    return it->second;
  }

  std::string new_session_id() {
    std::lock_guard lock(id_mutex_);
    for (;;) {
      const std::uint64_t hi = id_rng_(), lo = id_rng_();
      char buf[33];
      std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(hi),
                    static_cast<unsigned long long>(lo));
      std::lock_guard slock(sessions_mutex_);
      if (!sessions_.contains(buf)) return std::string(buf);
    }
  }

  std::string checkpoint_id() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_));
    return std::filesystem::path(config_.checkpoint).stem().string() + "-" + buf;
  }

  /// Previews and numeric descriptor data of the session's current bundle.
  nlohmann::json describe(const Session& s) const {
    const auto& b = s.bundle;
    auto j = envelope();
    j["width"] = b.width();
    j["height"] = b.height();
    j["previews"] = {{"edges", base64_encode(encode_png(edge_preview(b.edges)))},
                     {"segmentation", base64_encode(encode_png(segmentation_preview(b.segmentation)))},
                     {"histogram", base64_encode(encode_png(histogram_preview(b.histogram)))}};
    j["histogram"] = std::vector<double>(b.histogram.weights.values().begin(), b.histogram.weights.values().end());
    j["histogram_mean_L"] = b.histogram.mean_level();
    auto centroids = nlohmann::json::array();
    for (std::size_t k = 0; k < b.segmentation.clusters(); ++k) {
      centroids.push_back({double(b.segmentation.centroids[2 * k]), double(b.segmentation.centroids[2 * k + 1])});
    }
    j["centroids"] = std::move(centroids);
    j["labels"] = argmax_labels(b.segmentation);
    j["history"] = s.history;
    j["undo_available"] = s.undo.size();
    return j;
  }

  template <class F>
  ServiceReply guarded(F&& body) const {
    try {
      return body();
    } catch (const ServiceError& ex) {
      return error(ex.status(), ex.what());
    } catch (const std::exception& ex) {
      spdlog::error("request failed: {}", ex.what());
      return error(500, ex.what());
    }
  }

  ServiceReply error(int status, const std::string& message) const {
    auto body = envelope();
    body["error"] = message;
    body["status"] = status;
    return {status, std::move(body)};
  }

  ServiceConfig config_;
  std::unique_ptr<VisualSplitModel<T>> model_;
  TrainConfig train_;
  std::size_t step_ = 0;
  std::uint64_t hash_ = 0;
  ExtractionConfig extraction_;
  Clock::time_point started_;

  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::mutex id_mutex_;
  std::mt19937_64 id_rng_{std::random_device{}()};
};

/// Binds `service` to an httplib server and runs the eviction sweeper.
/// `run` blocks until `stop` is called from another thread.
template <class T = float>
class HttpServer {
 public:
  explicit HttpServer(EditingService<T>& service) : service_(service) {
    // base64 inflates bodies by 4/3; the service checks the decoded size
    server_.set_payload_max_length(service_.config().max_upload_bytes * 4 / 3 + 4096);
    const auto send = [](httplib::Response& res, const ServiceReply& r) {
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    const auto parse = [this](const httplib::Request& req) -> std::optional<nlohmann::json> {
      auto j = nlohmann::json::parse(req.body, nullptr, false);
      if (j.is_discarded()) return std::nullopt;
      return j;
    };
    const auto bad_json = [this, send](httplib::Response& res) {
      auto body = service_.envelope();
      body["error"] = "request body is not valid JSON";
      body["status"] = 400;
      send(res, {400, body});
    };
    server_.Post("/extract", [=, this](const httplib::Request& req, httplib::Response& res) {
      if (req.get_header_value("Content-Type").rfind("application/json", 0) == 0) {
        const auto j = parse(req);
        if (!j || !j->contains("image") || !(*j)["image"].is_string()) return bad_json(res);
        std::string bytes;
        try {
          bytes = base64_decode((*j)["image"].template get<std::string>());
        } catch (const FormatError& ex) {
          auto body = service_.envelope();
          body["error"] = std::string("image field: ") + ex.what();
          body["status"] = 400;
          return send(res, {400, body});
        }
        return send(res, service_.extract(bytes));
      }
      send(res, service_.extract(req.body));
    });
    server_.Post("/edit", [=, this](const httplib::Request& req, httplib::Response& res) {
      const auto j = parse(req);
      if (!j) return bad_json(res);
      send(res, service_.edit(*j));
    });
    server_.Post("/reconstruct", [=, this](const httplib::Request& req, httplib::Response& res) {
      const auto j = parse(req);
      if (!j) return bad_json(res);
      send(res, service_.reconstruct(*j));
    });
    server_.Get("/health", [=, this](const httplib::Request&, httplib::Response& res) { send(res, service_.health()); });
    server_.Get(R"(/session/([0-9A-Za-z]+))", [=, this](const httplib::Request& req, httplib::Response& res) {
      send(res, service_.session_info(req.matches[1]));
    });
    server_.set_error_handler([this](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return;
      auto body = service_.envelope();
      body["error"] = res.status == 413 ? "payload too large" : "request failed";
      body["status"] = res.status;
      res.set_content(body.dump(), "application/json");
    });
  }

  /// Binds to `port` (0 picks a free port); returns the bound port.
  int bind(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }

  void run() {
    std::thread sweeper([this] {
      const auto period = std::chrono::duration<double>(std::clamp(service_.config().session_ttl_seconds / 4, 0.05, 30.0));
      std::unique_lock lock(stop_mutex_);
      while (!stopping_) {
        stop_cv_.wait_for(lock, period);
        if (!stopping_) service_.evict_expired();
      }
    });
    server_.listen_after_bind();
    {
      std::lock_guard lock(stop_mutex_);
      stopping_ = true;
    }
    stop_cv_.notify_all();
    sweeper.join();
  }

  void wait_until_ready() const { server_.wait_until_ready(); }

  void stop() { server_.stop(); }

 private:
  EditingService<T>& service_;
  httplib::Server server_;
  std::mutex stop_mutex_;
  std::condition_variable stop_cv_;
  bool stopping_ = false;
};

}  // namespace vsplit
