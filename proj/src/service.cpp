#include "xrt/service.hpp"

#include <httplib.h>

#include <json.hpp>
#include <thread>

#include "xrt/error.hpp"

namespace xrt {

using nlohmann::json;

std::string_view verdict_message(std::string_view label) {
  if (label == "covid") return kCovidVerdict;
  if (label == "normal") return kNormalVerdict;
  throw Error(Errc::invalid_argument, "no verdict for label '" + std::string(label) + "'");
}

void ServiceConfig::check() const {
  require(port >= 0 && port <= 65535, Errc::invalid_argument, "port must lie in [0, 65535]");
  require(max_body_bytes > 0, Errc::invalid_argument, "body limit must be positive");
  require(!threshold || (*threshold >= 0.0 && *threshold <= 1.0), Errc::invalid_argument,
          "threshold must lie in [0, 1]");
  require(!host.empty(), Errc::invalid_argument, "bind host must not be empty");
}

namespace {

void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
  res.status = status;
  res.set_content(json{{"error", code}, {"message", message}}.dump(), "application/json");
}

std::string_view status_code_name(int status) {
  switch (status) {
    case 400: return "bad_request";
    case 404: return "not_found";
    case 405: return "method_not_allowed";
    case 413: return "payload_too_large";
    case 422: return "unprocessable_image";
    default: return status < 500 ? "client_error" : "internal_error";
  }
}

}  // namespace

Service::Service(std::shared_ptr<const Predictor> predictor, ServiceConfig config)
    : predictor_(std::move(predictor)), config_(std::move(config)), server_(std::make_unique<httplib::Server>()) {
  require(predictor_ != nullptr, Errc::invalid_argument, "service needs a loaded model");
  config_.check();
  install_routes();
}

Service::~Service() { stop(); }

void Service::install_routes() {
  httplib::Server& s = *server_;
  s.set_payload_max_length(config_.max_body_bytes);

  if (!config_.cors_origin.empty()) {
    s.set_default_headers({{"Access-Control-Allow-Origin", config_.cors_origin},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"},
                           {"Vary", "Origin"}});
  }

  // Handlers that already produced a JSON body keep it; everything else
  // (routing misses, oversize bodies, malformed multipart) gets one here.
  s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
    send_error(res, res.status, status_code_name(res.status), httplib::status_message(res.status));
    return httplib::Server::HandlerResponse::Handled;
  });
  s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    send_error(res, 500, "internal_error", what);
  });

  const auto method_not_allowed = [](const char* allow) {
    return [allow](const httplib::Request&, httplib::Response& res) {
      res.set_header("Allow", allow);
      send_error(res, 405, "method_not_allowed", std::string("allowed: ") + allow);
    };
  };
  const auto preflight = [](const httplib::Request&, httplib::Response& res) { res.status = 204; };

  s.Post("/detect", [this](const httplib::Request& req, httplib::Response& res) {
    if (!req.is_multipart_form_data()) {
      send_error(res, 400, "missing_file", "expected multipart/form-data with a part named 'file'");
      return;
    }
    if (!req.has_file("file")) {
      send_error(res, 400, "missing_file", "multipart body has no part named 'file'");
      return;
    }
    const auto& part = req.get_file_value("file");
    const std::span bytes(reinterpret_cast<const std::uint8_t*>(part.content.data()), part.content.size());
    Prediction p;
    try {
      p = predictor_->predict(bytes, config_.threshold);
    } catch (const Error& e) {
      if (e.code() == Errc::decode || e.code() == Errc::invalid_argument) {
        send_error(res, 422, "undecodable_image", e.what());
        return;
      }
      throw;
    }
    const std::string_view message = verdict_message(p.label);
    if (config_.plain) {
      res.set_content(std::string(message), "text/plain; charset=utf-8");
      return;
    }
    json body{{"label", p.label},
              {"probability", p.probabilities.at(0)},
              {"message", message},
              {"model_id", predictor_->id()}};
    if (req.has_file("patient")) body["patient"] = req.get_file_value("patient").content;
    res.set_content(body.dump(), "application/json");
  });
  s.Get("/detect", method_not_allowed("POST"));
  s.Put("/detect", method_not_allowed("POST"));
  s.Delete("/detect", method_not_allowed("POST"));
  s.Options("/detect", preflight);

  s.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(json{{"status", "ok"},
                         {"model_id", predictor_->id()},
                         {"format_version", predictor_->bundle().format_version}}
                        .dump(),
                    "application/json");
  });
  s.Post("/health", method_not_allowed("GET"));
  s.Options("/health", preflight);
}

int Service::bind() {
  if (config_.port == 0) {
    port_ = server_->bind_to_any_port(config_.host);
  } else {
    port_ = server_->bind_to_port(config_.host, config_.port) ? config_.port : -1;
  }
  require(port_ > 0, Errc::io, "cannot bind " + config_.host + ":" + std::to_string(config_.port));
  return port_;
}

void Service::run() {
  require(port_ > 0, Errc::invalid_argument, "service is not bound");
  entered_ = true;
  if (!stopping_) server_->listen_after_bind();
  entered_ = false;
}

// httplib ignores stop() until its accept loop is up, so wait for that
// whenever run() has been entered.
void Service::stop() {
  if (!server_) return;
  stopping_ = true;
  while (entered_ && !server_->is_running()) std::this_thread::yield();
  server_->stop();
}

}  // namespace xrt
