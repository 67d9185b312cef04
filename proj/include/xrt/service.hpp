#pragma once

#include <cstddef>
#include <atomic>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "xrt/training.hpp"

namespace httplib {
class Server;
}

namespace xrt {

inline constexpr std::string_view kCovidVerdict = "Result:: Xray is Abnormal!! COVID detected";
inline constexpr std::string_view kNormalVerdict = "Result:: Congrats!! Xray is Normal. No Abnormality Found.";

std::string_view verdict_message(std::string_view label);

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 5000;  // 0 picks a free port
  std::optional<double> threshold;
  std::size_t max_body_bytes = 10u << 20;
  bool plain = false;  // bare verdict text instead of JSON on success
  std::string cors_origin = "*";  // empty disables CORS headers

  void check() const;
};

/// POST /detect (multipart, part `file`, optional `patient`), GET /health.
/// The predictor is shared read-only by all worker threads.
class Service {
 public:
  Service(std::shared_ptr<const Predictor> predictor, ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds the listening socket and returns the bound port.
  int bind();
  /// Serves until stop(); requires bind().
  void run();
  /// Safe from any thread, before or during run().
  void stop();

  const ServiceConfig& config() const { return config_; }

 private:
  void install_routes();

  std::shared_ptr<const Predictor> predictor_;
  ServiceConfig config_;
  std::unique_ptr<httplib::Server> server_;
  int port_ = -1;
  std::atomic<bool> entered_{false}, stopping_{false};
};

}  // namespace xrt
