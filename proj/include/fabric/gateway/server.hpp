#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "fabric/gateway/sessions.hpp"

namespace httplib {
class Server;
}

namespace fabric::gateway {

struct ServerOptions {
    std::string host = "127.0.0.1";
    /// 0 binds an ephemeral port.
    int port = 0;
    /// Served under /ui when non-empty.
    std::filesystem::path ui_dir;
};

/// JSON-over-HTTP front end of a SessionManager under /v1/.
class Server {
public:
    Server(SessionManager& sessions, ServerOptions options);
    ~Server();

    /// Binds and returns the port actually bound.
    int bind();
    /// Serves until stop(); call after bind().
    void run();
    void stop();

private:
    SessionManager& sessions_;
    ServerOptions options_;
    std::unique_ptr<httplib::Server> http_;
};

}  // namespace fabric::gateway
