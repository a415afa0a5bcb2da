#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fabric/gateway/worker_pool.hpp"
#include "fabric/harness/models.hpp"
#include "fabric/loop/feedback.hpp"

namespace fabric::gateway {

/// Error surfaced to API clients as {"error": {"code", "message"}}.
class ApiError : public std::runtime_error {
public:
    ApiError(std::string code, const std::string& message, int http_status)
        : std::runtime_error(message), code_(std::move(code)), status_(http_status) {}

    const std::string& code() const noexcept { return code_; }
    int http_status() const noexcept { return status_; }
    nlohmann::json to_json() const { return {{"error", {{"code", code_}, {"message", what()}}}}; }

    static ApiError unknown_session(const std::string& id) { return {"unknown_session", "no session with id '" + id + "'", 404}; }
    static ApiError busy(const std::string& m) { return {"busy", m, 409}; }
    static ApiError invalid_feedback(const std::string& m) { return {"invalid_feedback", m, 422}; }
    static ApiError bad_request(const std::string& m) { return {"bad_request", m, 400}; }
    static ApiError internal(const std::string& m) { return {"internal", m, 500}; }

private:
    std::string code_;
    int status_;
};

struct RoundMetricsView {
    std::optional<double> s_pos;
    std::optional<double> s_neg;
    std::optional<double> diversity;
};

struct SessionRound {
    int round_index = 0;
    std::uint64_t seed = 0;
    loop::GenerationConfig config;
    std::vector<std::string> image_ids;
    std::vector<world::Prompt> used_prompts;
    RoundMetricsView metrics;
    /// Feedback given on this round's images.
    std::vector<std::string> liked_ids;
    std::vector<std::string> disliked_ids;
    int feedback_liked = 0;
    int feedback_disliked = 0;
};

struct Session {
    std::string id;
    world::Prompt prompt;
    loop::GenerationConfig config;
    std::vector<std::string> liked;
    std::vector<std::string> disliked;
    std::vector<SessionRound> rounds;
    std::string status = "idle";
    std::string created_at;
    std::string updated_at;

    nlohmann::json to_json() const;
    static Session from_json(const nlohmann::json& j);
};

struct SessionOptions {
    std::chrono::milliseconds timeout{120000};
    /// Generation threads; 0 picks the hardware concurrency.
    int workers = 0;
};

/// Sessions kept in memory and mirrored to <root>/sessions/{id}/session.json plus
/// <root>/sessions/{id}/images/{image_id}.png.
class SessionManager {
public:
    SessionManager(const harness::Models& models, std::filesystem::path root, SessionOptions options = {});
    ~SessionManager();

    /// Body {"prompt": {...}, "config": {...}}; returns {"session_id", "config"}.
    nlohmann::json create(const nlohmann::json& body);
    /// Optional body {"config": {...}} overriding the session config for this round only.
    nlohmann::json generate(const std::string& id, const nlohmann::json& body);
    /// Body {"liked": [ids], "disliked": [ids]}; both optional.
    nlohmann::json feedback(const std::string& id, const nlohmann::json& body);
    nlohmann::json get(const std::string& id) const;

    const std::filesystem::path& root() const noexcept { return root_; }
    std::size_t size() const;

private:
    struct Entry {
        mutable std::mutex mutex;
        Session session;
        std::map<std::string, Tensor> images;
    };

    std::shared_ptr<Entry> find(const std::string& id) const;
    std::filesystem::path session_dir(const std::string& id) const;
    void persist(const Entry& e) const;
    void load_all();
    nlohmann::json session_view(const Entry& e) const;
    nlohmann::json round_view(const Entry& e, const SessionRound& r) const;

    const harness::Models& models_;
    std::filesystem::path root_;
    SessionOptions options_;
    mutable std::mutex map_mutex_;
    std::map<std::string, std::shared_ptr<Entry>> sessions_;
    std::unique_ptr<WorkerPool> pool_;
};

/// FABRIC_DATA_DIR if set, else `fallback`.
std::filesystem::path default_data_root(const std::filesystem::path& fallback = "fabric_data");

}  // namespace fabric::gateway
