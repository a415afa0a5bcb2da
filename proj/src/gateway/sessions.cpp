#include "fabric/gateway/sessions.hpp"

#include <ctime>
#include <cstdlib>
#include <fstream>
#include <random>
#include <set>

#include <httplib.h>

#include "fabric/eval/metrics.hpp"
#include "fabric/io/png.hpp"

namespace fabric::gateway {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kSessionFormat = 1;

std::string now_utc() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string random_id() {
    std::random_device rd;
    std::uniform_int_distribution<std::uint64_t> dist;
    char buf[33];
    std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(dist(rd)),
                  static_cast<unsigned long long>(dist(rd)));
    return buf;
}

bool valid_id(const std::string& id) {
    if (id.size() != 32) return false;
    for (char c : id) {
        if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
    }
    return true;
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::optional<double> opt_from(const json& j) { return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>()); }

json prompts_json(const std::vector<world::Prompt>& ps) {
    json a = json::array();
    for (const auto& p : ps) a.push_back(world::to_json(p));
    return a;
}

void require_object(const json& body, std::initializer_list<const char*> allowed) {
    if (body.is_null()) return;
    if (!body.is_object()) throw ApiError::bad_request("request body must be a JSON object");
    for (const auto& [key, value] : body.items()) {
        bool ok = false;
        for (const char* a : allowed) ok |= key == a;
        if (!ok) throw ApiError::bad_request("unknown field '" + key + "'");
    }
}

loop::GenerationConfig parse_config(const json& j, const loop::GenerationConfig& base) {
    try {
        return loop::GenerationConfig::from_json(j, base);
    } catch (const std::invalid_argument& e) {
        throw ApiError::bad_request(e.what());
    }
}

std::vector<std::string> id_list(const json& body, const char* key) {
    if (body.is_null() || !body.contains(key)) return {};
    const json& v = body.at(key);
    if (!v.is_array()) throw ApiError::bad_request(std::string("'") + key + "' must be an array of image ids");
    std::vector<std::string> out;
    for (const auto& x : v) {
        if (!x.is_string()) throw ApiError::bad_request(std::string("'") + key + "' must contain strings");
        out.push_back(x.get<std::string>());
    }
    return out;
}

}  // namespace

json Session::to_json() const {
    json rs = json::array();
    for (const auto& r : rounds) {
        rs.push_back({{"round_index", r.round_index},
                      {"seed", r.seed},
                      {"config", r.config.to_json()},
                      {"image_ids", r.image_ids},
                      {"used_prompts", prompts_json(r.used_prompts)},
                      {"metrics", {{"s_pos", opt(r.metrics.s_pos)}, {"s_neg", opt(r.metrics.s_neg)}, {"diversity", opt(r.metrics.diversity)}}},
                      {"liked_ids", r.liked_ids},
                      {"disliked_ids", r.disliked_ids},
                      {"feedback_liked", r.feedback_liked},
                      {"feedback_disliked", r.feedback_disliked}});
    }
    return {{"format", kSessionFormat}, {"session_id", id},     {"prompt", world::to_json(prompt)},
            {"config", config.to_json()}, {"liked", liked},      {"disliked", disliked},
            {"rounds", rs},              {"status", status},     {"created_at", created_at},
            {"updated_at", updated_at}};
}

Session Session::from_json(const json& j) {
    if (j.at("format").get<int>() != kSessionFormat) throw std::runtime_error("unsupported session format");
    Session s;
    s.id = j.at("session_id").get<std::string>();
    s.prompt = world::prompt_from_json(j.at("prompt"));
    s.config = loop::GenerationConfig::from_json(j.at("config"));
    s.liked = j.at("liked").get<std::vector<std::string>>();
    s.disliked = j.at("disliked").get<std::vector<std::string>>();
    s.status = j.at("status").get<std::string>();
    s.created_at = j.at("created_at").get<std::string>();
    s.updated_at = j.at("updated_at").get<std::string>();
    for (const auto& rj : j.at("rounds")) {
        SessionRound r;
        r.round_index = rj.at("round_index").get<int>();
        r.seed = rj.at("seed").get<std::uint64_t>();
        r.config = loop::GenerationConfig::from_json(rj.at("config"));
        r.image_ids = rj.at("image_ids").get<std::vector<std::string>>();
        for (const auto& p : rj.at("used_prompts")) r.used_prompts.push_back(world::prompt_from_json(p));
        const auto& m = rj.at("metrics");
        r.metrics = {opt_from(m.at("s_pos")), opt_from(m.at("s_neg")), opt_from(m.at("diversity"))};
        r.liked_ids = rj.at("liked_ids").get<std::vector<std::string>>();
        r.disliked_ids = rj.at("disliked_ids").get<std::vector<std::string>>();
        r.feedback_liked = rj.at("feedback_liked").get<int>();
        r.feedback_disliked = rj.at("feedback_disliked").get<int>();
        s.rounds.push_back(std::move(r));
    }
    return s;
}

fs::path default_data_root(const fs::path& fallback) {
    if (const char* env = std::getenv("FABRIC_DATA_DIR"); env && *env) return env;
    return fallback;
}

SessionManager::SessionManager(const harness::Models& models, fs::path root, SessionOptions options)
    : models_(models), root_(std::move(root)), options_(options), pool_(std::make_unique<WorkerPool>(options.workers)) {
    fs::create_directories(root_ / "sessions");
    load_all();
}

SessionManager::~SessionManager() { pool_.reset(); }

std::size_t SessionManager::size() const {
    std::lock_guard lock(map_mutex_);
    return sessions_.size();
}

fs::path SessionManager::session_dir(const std::string& id) const { return root_ / "sessions" / id; }

void SessionManager::persist(const Entry& e) const {
    const std::string text = e.session.to_json().dump(1);
    io::write_file_atomic(session_dir(e.session.id) / "session.json", text.data(), text.size());
}

void SessionManager::load_all() {
    for (const auto& dir : fs::directory_iterator(root_ / "sessions")) {
        const auto file = dir.path() / "session.json";
        if (!dir.is_directory() || !valid_id(dir.path().filename().string()) || !fs::exists(file)) continue;
        auto entry = std::make_shared<Entry>();
        std::ifstream in(file);
        entry->session = Session::from_json(json::parse(in));
        if (entry->session.status != "idle") {
            entry->session.status = "idle";
            persist(*entry);
        }
        for (const auto& r : entry->session.rounds) {
            for (const auto& id : r.image_ids) entry->images[id] = io::read_png(dir.path() / "images" / (id + ".png"));
        }
        sessions_[entry->session.id] = entry;
    }
}

std::shared_ptr<SessionManager::Entry> SessionManager::find(const std::string& id) const {
    std::lock_guard lock(map_mutex_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ApiError::unknown_session(id);
    return it->second;
}

json SessionManager::create(const json& body) {
    require_object(body, {"prompt", "config"});
    if (body.is_null() || !body.contains("prompt")) throw ApiError::bad_request("missing 'prompt'");
    auto entry = std::make_shared<Entry>();
    Session& s = entry->session;
    try {
        s.prompt = world::prompt_from_json(body.at("prompt"));
    } catch (const std::exception& e) {
        throw ApiError::bad_request(std::string("malformed prompt: ") + e.what());
    }
    loop::GenerationConfig base;
    std::random_device rd;
    base.seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    s.config = body.contains("config") ? parse_config(body.at("config"), base) : base;
    s.created_at = s.updated_at = now_utc();
    {
        std::lock_guard lock(map_mutex_);
        do {
            s.id = random_id();
        } while (sessions_.count(s.id));
        fs::create_directories(session_dir(s.id) / "images");
        persist(*entry);
        sessions_[s.id] = entry;
    }
    return {{"session_id", s.id}, {"config", s.config.to_json()}};
}

json SessionManager::generate(const std::string& id, const json& body) {
    require_object(body, {"config"});
    auto entry = find(id);
    loop::FeedbackState state;
    world::Prompt prompt;
    loop::GenerationConfig config;
    int round = 0;
    {
        std::lock_guard lock(entry->mutex);
        Session& s = entry->session;
        if (s.status != "idle") throw ApiError::busy("session " + id + " is already generating");
        config = (!body.is_null() && body.contains("config")) ? parse_config(body.at("config"), s.config) : s.config;
        prompt = s.prompt;
        round = static_cast<int>(s.rounds.size()) + 1;
        for (const auto& l : s.liked) state.liked.push_back({l, entry->images.at(l)});
        for (const auto& d : s.disliked) state.disliked.push_back({d, entry->images.at(d)});
        state.round_index = round - 1;
        s.status = "generating";
        s.updated_at = now_utc();
    }

    auto job = [this, entry, state, prompt, config, round] {
        try {
            const std::uint64_t seed = loop::round_seed(config.seed, round);
            const auto batch = models_.generator().generate(prompt, state, config, seed);
            SessionRound r;
            r.round_index = round;
            r.seed = seed;
            r.config = config;
            r.used_prompts = batch.prompts;
            r.feedback_liked = static_cast<int>(state.liked.size());
            r.feedback_disliked = static_cast<int>(state.disliked.size());

            const Tensor e = models_.embedder().embed(batch.images);
            auto embed_refs = [&](const std::vector<loop::FeedbackImage>& refs) {
                std::vector<Tensor> imgs;
                for (const auto& f : refs) imgs.push_back(f.image);
                return imgs.empty() ? Tensor{} : models_.embedder().embed(stack(imgs));
            };
            const auto sim = eval::feedback_similarity(e, embed_refs(state.liked), embed_refs(state.disliked));
            r.metrics.s_pos = sim.s_pos;
            r.metrics.s_neg = sim.s_neg;
            if (config.n >= 2) r.metrics.diversity = eval::in_batch_diversity(e).d;

            std::map<std::string, Tensor> images;
            for (int i = 0; i < config.n; ++i) {
                const std::string image = loop::image_id(round, i);
                r.image_ids.push_back(image);
                images[image] = item(batch.images, i);
                io::write_png(session_dir(entry->session.id) / "images" / (image + ".png"), images[image]);
            }
            std::lock_guard lock(entry->mutex);
            for (auto& [k, v] : images) entry->images[k] = std::move(v);
            entry->session.rounds.push_back(std::move(r));
            entry->session.status = "idle";
            entry->session.updated_at = now_utc();
            persist(*entry);
        } catch (...) {
            std::lock_guard lock(entry->mutex);
            entry->session.status = "idle";
            throw;
        }
    };

    auto done = pool_->submit(job);
    if (done.wait_for(options_.timeout) != std::future_status::ready) {
        throw ApiError::internal("generation did not finish within " + std::to_string(options_.timeout.count()) + " ms");
    }
    try {
        done.get();
    } catch (const ApiError&) {
        throw;
    } catch (const std::exception& e) {
        throw ApiError::internal(std::string("generation failed: ") + e.what());
    }
    std::lock_guard lock(entry->mutex);
    const SessionRound& r = entry->session.rounds.at(static_cast<std::size_t>(round - 1));
    json out = round_view(*entry, r);
    out["session_id"] = id;
    return out;
}

json SessionManager::feedback(const std::string& id, const json& body) {
    require_object(body, {"liked", "disliked"});
    const auto liked = id_list(body, "liked");
    const auto disliked = id_list(body, "disliked");
    auto entry = find(id);
    std::lock_guard lock(entry->mutex);
    Session& s = entry->session;
    if (s.status != "idle") throw ApiError::busy("session " + id + " is generating");

    std::set<std::string> seen(s.liked.begin(), s.liked.end());
    seen.insert(s.disliked.begin(), s.disliked.end());
    for (const auto* list : {&liked, &disliked}) {
        for (const auto& image : *list) {
            if (!entry->images.count(image)) throw ApiError::invalid_feedback("image '" + image + "' does not belong to this session");
            if (!seen.insert(image).second) throw ApiError::invalid_feedback("image '" + image + "' already has feedback or is listed twice");
        }
    }
    auto round_of = [&](const std::string& image) -> SessionRound& {
        for (auto& r : s.rounds) {
            if (std::find(r.image_ids.begin(), r.image_ids.end(), image) != r.image_ids.end()) return r;
        }
        throw ApiError::internal("image '" + image + "' has no round");
    };
    for (const auto& image : liked) {
        s.liked.push_back(image);
        round_of(image).liked_ids.push_back(image);
    }
    for (const auto& image : disliked) {
        s.disliked.push_back(image);
        round_of(image).disliked_ids.push_back(image);
    }
    if (!liked.empty() || !disliked.empty()) {
        s.updated_at = now_utc();
        persist(*entry);
    }
    return {{"session_id", id}, {"feedback", {{"liked", s.liked}, {"disliked", s.disliked}}}};
}

json SessionManager::round_view(const Entry& e, const SessionRound& r) const {
    json images = json::array();
    for (const auto& image : r.image_ids) {
        const auto png = io::encode_png(e.images.at(image));
        images.push_back({{"id", image}, {"png_base64", httplib::detail::base64_encode(std::string(png.begin(), png.end()))}});
    }
    return {{"round_index", r.round_index},
            {"seed", r.seed},
            {"config", r.config.to_json()},
            {"images", images},
            {"used_prompts", prompts_json(r.used_prompts)},
            {"metrics", {{"s_pos", opt(r.metrics.s_pos)}, {"s_neg", opt(r.metrics.s_neg)}, {"diversity", opt(r.metrics.diversity)}}},
            {"liked_ids", r.liked_ids},
            {"disliked_ids", r.disliked_ids},
            {"feedback_liked", r.feedback_liked},
            {"feedback_disliked", r.feedback_disliked}};
}

json SessionManager::session_view(const Entry& e) const {
    const Session& s = e.session;
    json rounds = json::array();
    for (const auto& r : s.rounds) rounds.push_back(round_view(e, r));
    return {{"session_id", s.id},
            {"prompt", world::to_json(s.prompt)},
            {"config", s.config.to_json()},
            {"status", s.status},
            {"created_at", s.created_at},
            {"updated_at", s.updated_at},
            {"feedback", {{"liked", s.liked}, {"disliked", s.disliked}}},
            {"rounds", rounds}};
}

json SessionManager::get(const std::string& id) const {
    auto entry = find(id);
    std::lock_guard lock(entry->mutex);
    return session_view(*entry);
}

}  // namespace fabric::gateway
