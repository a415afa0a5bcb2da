#include "fabric/gateway/server.hpp"

#include <httplib.h>

namespace fabric::gateway {

using nlohmann::json;

namespace {

void send(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return nullptr;
    try {
        return json::parse(req.body);
    } catch (const json::exception& e) {
        throw ApiError::bad_request(std::string("malformed JSON: ") + e.what());
    }
}

template <class F>
httplib::Server::Handler guarded(F&& f) {
    return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
        try {
            send(res, 200, f(req));
        } catch (const ApiError& e) {
            send(res, e.http_status(), e.to_json());
        } catch (const std::exception& e) {
            send(res, 500, ApiError::internal(e.what()).to_json());
        }
    };
}

}  // namespace

Server::Server(SessionManager& sessions, ServerOptions options)
    : sessions_(sessions), options_(std::move(options)), http_(std::make_unique<httplib::Server>()) {
    auto& s = *http_;
    s.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
    s.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    s.Get("/v1/healthz", guarded([](const httplib::Request&) { return json{{"status", "ok"}}; }));
    s.Post("/v1/sessions", guarded([this](const httplib::Request& req) { return sessions_.create(parse_body(req)); }));
    s.Post(R"(/v1/sessions/([^/]+)/generate)", guarded([this](const httplib::Request& req) {
               return sessions_.generate(req.matches[1], parse_body(req));
           }));
    s.Post(R"(/v1/sessions/([^/]+)/feedback)", guarded([this](const httplib::Request& req) {
               return sessions_.feedback(req.matches[1], parse_body(req));
           }));
    s.Get(R"(/v1/sessions/([^/]+))", guarded([this](const httplib::Request& req) { return sessions_.get(req.matches[1]); }));
    if (!options_.ui_dir.empty()) s.set_mount_point("/ui", options_.ui_dir.string());
    s.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
        if (res.status == 404 && res.body.empty()) {
            send(res, 404, ApiError::bad_request("no endpoint " + req.method + " " + req.path).to_json());
        }
    });
}

Server::~Server() { stop(); }

int Server::bind() {
    const int port = options_.port == 0 ? http_->bind_to_any_port(options_.host) : (http_->bind_to_port(options_.host, options_.port) ? options_.port : -1);
    if (port < 0) throw std::runtime_error("cannot bind " + options_.host + ":" + std::to_string(options_.port));
    return port;
}

void Server::run() { http_->listen_after_bind(); }

void Server::stop() {
    if (http_) http_->stop();
}

}  // namespace fabric::gateway
