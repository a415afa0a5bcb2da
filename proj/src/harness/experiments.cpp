#include "fabric/harness/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "fabric/io/png.hpp"

namespace fabric::harness {

using loop::GenerationConfig;
using world::Prompt;

std::string experiment_name(Experiment e) {
    switch (e) {
        case Experiment::preference: return "preference";
        case Experiment::target: return "target";
        case Experiment::schedule: return "schedule";
        case Experiment::dropout: return "dropout";
    }
    throw std::invalid_argument("unknown experiment");
}

Experiment parse_experiment(const std::string& s) {
    for (auto e : {Experiment::preference, Experiment::target, Experiment::schedule, Experiment::dropout}) {
        if (experiment_name(e) == s) return e;
    }
    throw std::invalid_argument("unknown experiment '" + s + "' (expected preference, target, schedule or dropout)");
}

ExperimentConfig ExperimentConfig::defaults(Experiment e) {
    ExperimentConfig c;
    c.experiment = e;
    c.w = e == Experiment::preference ? 0.1f : 0.8f;
    return c;
}

void ExperimentConfig::validate() const {
    if (prompts < 1) throw std::invalid_argument("experiment needs at least one prompt");
    if (rounds < 1) throw std::invalid_argument("experiment needs at least one round");
    if (n < 2) throw std::invalid_argument("experiment batches need at least two images");
    if (!(w >= 0.0f)) throw std::invalid_argument("feedback strength must be >= 0");
    if (!(dropout_p >= 0.0 && dropout_p <= 1.0)) throw std::invalid_argument("dropout_p must be in [0, 1]");
    if (sampling_steps < 1) throw std::invalid_argument("sampling_steps must be >= 1");
    if (workers < 0) throw std::invalid_argument("workers must be >= 0");
}

nlohmann::json ExperimentConfig::to_json() const {
    return {{"experiment", experiment_name(experiment)},
            {"prompts", prompts},
            {"rounds", rounds},
            {"n", n},
            {"w", w},
            {"schedule", loop::schedule_name(schedule)},
            {"dropout_p", dropout_p},
            {"sampling_steps", sampling_steps},
            {"seed", seed}};
}

nlohmann::json AggregateRow::to_json() const {
    return {{"round", round},
            {"score_min", score_min},
            {"score_mean", score_mean},
            {"score_max", score_max},
            {"score_cummax", score_cummax},
            {"s_pos", s_pos ? nlohmann::json(*s_pos) : nlohmann::json(nullptr)},
            {"s_neg", s_neg ? nlohmann::json(*s_neg) : nlohmann::json(nullptr)},
            {"diversity", diversity}};
}

nlohmann::json ClaimCheck::to_json() const {
    return {{"name", name},       {"kind", kind},       {"a", a}, {"b", b}, {"forward", forward.to_json()},
            {"reverse", reverse.to_json()}, {"passed", passed}};
}

const ArmResult& ExperimentResult::arm(const std::string& name) const {
    for (const auto& a : arms) {
        if (a.name == name) return a;
    }
    throw std::out_of_range("no arm named " + name);
}

namespace {

struct ArmSpec {
    std::string name;
    GenerationConfig generation;
    std::string similarity_reference;
};

std::string dropout_arm(double p) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "p%.1f", p);
    return buf;
}

std::vector<ArmSpec> arm_specs(const ExperimentConfig& c) {
    GenerationConfig base;
    base.n = c.n;
    base.rounds = c.rounds;
    base.sampling_steps = c.sampling_steps;
    base.schedule.kind = c.schedule;
    base.schedule.w_max = c.w;

    auto with = [&](auto edit) {
        GenerationConfig g = base;
        edit(g);
        return g;
    };
    switch (c.experiment) {
        case Experiment::preference:
            return {{"baseline", with([](auto& g) { g.use_feedback = false; }), "fabric"}, {"fabric", base, ""}};
        case Experiment::target:
            return {{"baseline", with([](auto& g) { g.use_feedback = false; }), "pos_neg"},
                    {"pos_only", with([](auto& g) { g.use_negative = false; }), ""},
                    {"pos_neg", base, ""}};
        case Experiment::schedule:
            return {{"full", with([](auto& g) { g.schedule.kind = loop::ScheduleKind::constant; }), ""},
                    {"first_half", with([](auto& g) { g.schedule.kind = loop::ScheduleKind::first_half; }), ""},
                    {"second_half", with([](auto& g) { g.schedule.kind = loop::ScheduleKind::second_half; }), ""}};
        case Experiment::dropout:
            return {{dropout_arm(0.0), base, ""},
                    {dropout_arm(c.dropout_p), with([&](auto& g) { g.dropout_p = c.dropout_p; }), ""}};
    }
    throw std::invalid_argument("unknown experiment");
}

bool target_protocol(Experiment e) { return e != Experiment::preference; }

/// Embeddings of the feedback images in effect at each round, from an arm's history.
struct FeedbackEmbeddings {
    Tensor liked;
    Tensor disliked;
};

FeedbackEmbeddings feedback_in_effect(const std::vector<loop::RoundRecord>& history, const std::vector<Tensor>& embeddings,
                                      int round, bool use_negative) {
    std::vector<Tensor> liked, disliked;
    for (int r = 1; r < round; ++r) {
        const auto& rec = history[static_cast<std::size_t>(r - 1)];
        const auto& e = embeddings[static_cast<std::size_t>(r - 1)];
        auto index_of = [&](const std::string& id) {
            const auto it = std::find(rec.image_ids.begin(), rec.image_ids.end(), id);
            return static_cast<int>(it - rec.image_ids.begin());
        };
        for (const auto& id : rec.liked_ids) liked.push_back(item(e, index_of(id)));
        if (use_negative) {
            for (const auto& id : rec.disliked_ids) disliked.push_back(item(e, index_of(id)));
        }
    }
    return {liked.empty() ? Tensor{} : stack(liked), disliked.empty() ? Tensor{} : stack(disliked)};
}

ClaimCheck claim(const std::string& name, const std::string& kind, const std::string& a, const std::string& b,
                 const std::vector<double>& va, const std::vector<double>& vb) {
    ClaimCheck c{name, kind, a, b, sign_test(va, vb), sign_test(vb, va), false};
    c.passed = kind == "greater" ? c.forward.significant() : !c.reverse.significant();
    return c;
}

std::vector<double> per_prompt(const ArmResult& arm, int round, double RoundMetrics::*field) {
    std::vector<double> v;
    for (const auto& p : arm.records) v.push_back(p[static_cast<std::size_t>(round - 1)].*field);
    return v;
}

std::vector<double> per_prompt(const ArmResult& arm, int round, std::optional<double> RoundMetrics::*field) {
    std::vector<double> v;
    for (const auto& p : arm.records) v.push_back((p[static_cast<std::size_t>(round - 1)].*field).value_or(0.0));
    return v;
}

std::vector<ClaimCheck> claims_for(const ExperimentResult& r) {
    const int last = r.config.rounds;
    std::vector<ClaimCheck> out;
    auto compare = [&](const std::string& name, const std::string& kind, const std::string& a, const std::string& b,
                       int round, auto field) {
        out.push_back(claim(name, kind, a, b, per_prompt(r.arm(a), round, field), per_prompt(r.arm(b), round, field)));
    };
    switch (r.config.experiment) {
        case Experiment::preference:
            compare("final_score_fabric_gt_baseline", "greater", "fabric", "baseline", last, &RoundMetrics::score_mean);
            for (int round = 2; round <= last; ++round) {
                const std::string suffix = "_round" + std::to_string(round);
                compare("s_pos_fabric_gt_baseline" + suffix, "greater", "fabric", "baseline", round, &RoundMetrics::s_pos);
                compare("s_neg_baseline_gt_fabric" + suffix, "greater", "baseline", "fabric", round, &RoundMetrics::s_neg);
            }
            break;
        case Experiment::target:
            compare("final_similarity_pos_only_gt_baseline", "greater", "pos_only", "baseline", last, &RoundMetrics::score_mean);
            compare("final_similarity_pos_neg_gt_pos_only", "greater", "pos_neg", "pos_only", last, &RoundMetrics::score_mean);
            break;
        case Experiment::schedule:
            compare("final_similarity_first_half_ge_full", "not_less", "first_half", "full", last, &RoundMetrics::score_mean);
            compare("final_similarity_full_ge_second_half", "not_less", "full", "second_half", last, &RoundMetrics::score_mean);
            break;
        case Experiment::dropout: {
            const std::string p0 = dropout_arm(0.0), p1 = dropout_arm(r.config.dropout_p);
            for (int round = 1; round <= last; ++round) {
                compare("diversity_dropout_gt_none_round" + std::to_string(round), "greater", p1, p0, round,
                        &RoundMetrics::diversity);
            }
            compare("best_similarity_none_ge_dropout", "not_less", p0, p1, last, &RoundMetrics::score_cummax);
            for (const auto& name : {p0, p1}) {
                const auto& a = r.arm(name);
                out.push_back(claim("diversity_collapse_" + name, "greater", name + "@round1", name + "@round" + std::to_string(last),
                                    per_prompt(a, 1, &RoundMetrics::diversity), per_prompt(a, last, &RoundMetrics::diversity)));
            }
            break;
        }
    }
    return out;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::string image_file(const std::string& arm, int prompt, const std::string& id) {
    return "images/" + arm + "/p" + std::to_string(prompt) + "/" + id + ".png";
}

}  // namespace

std::vector<PromptCase> make_cases(const ExperimentConfig& config) {
    config.validate();
    std::vector<PromptCase> cases;
    for (int k = 0; k < config.prompts; ++k) {
        PromptCase c;
        c.id = k;
        c.seed = derive_seed(config.seed, {2, static_cast<std::uint64_t>(k)});
        Rng rng(derive_seed(config.seed, {1, static_cast<std::uint64_t>(k)}));
        const Prompt full = world::class_prompt(rng.below(world::kNumClasses));
        if (target_protocol(config.experiment)) {
            c.target_spec = world::random_spec(*full.shape, *full.color, *full.size, rng);
            c.target_image = world::render(*c.target_spec, world::Variant::target, rng.engine()());
            c.prompt.shape = full.shape;
        } else {
            switch (k % 3) {
                case 0: c.prompt.shape = full.shape; break;
                case 1: c.prompt.color = full.color; break;
                default: c.prompt.size = full.size; break;
            }
        }
        cases.push_back(std::move(c));
    }
    return cases;
}

std::vector<AggregateRow> aggregate(const std::vector<std::vector<RoundMetrics>>& records) {
    std::vector<AggregateRow> rows;
    if (records.empty()) return rows;
    const std::size_t rounds = records.front().size();
    for (std::size_t r = 0; r < rounds; ++r) {
        AggregateRow row;
        row.round = static_cast<int>(r) + 1;
        double sp = 0.0, sn = 0.0;
        int np = 0, nn = 0;
        for (const auto& p : records) {
            const auto& m = p.at(r);
            row.score_min += m.score_min;
            row.score_mean += m.score_mean;
            row.score_max += m.score_max;
            row.score_cummax += m.score_cummax;
            row.diversity += m.diversity;
            if (m.s_pos) sp += *m.s_pos, ++np;
            if (m.s_neg) sn += *m.s_neg, ++nn;
        }
        const double count = static_cast<double>(records.size());
        row.score_min /= count;
        row.score_mean /= count;
        row.score_max /= count;
        row.score_cummax /= count;
        row.diversity /= count;
        if (np) row.s_pos = sp / np;
        if (nn) row.s_neg = sn / nn;
        rows.push_back(row);
    }
    return rows;
}

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
    if (workers <= 0) workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    workers = std::min(workers, std::max(n, 1));
    std::atomic<int> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&] {
        for (int i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next = n;
            }
        }
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> threads;
        for (int w = 0; w < workers; ++w) threads.emplace_back(work);
        for (auto& t : threads) t.join();
    }
    if (failure) std::rethrow_exception(failure);
}

ExperimentResult run_experiment(const Models& models, const ExperimentConfig& config, const ProgressFn& progress) {
    config.validate();
    ExperimentResult result;
    result.config = config;
    result.cases = make_cases(config);
    const auto specs = arm_specs(config);
    for (const auto& s : specs) {
        ArmResult a;
        a.name = s.name;
        a.generation = s.generation;
        a.similarity_reference = s.similarity_reference;
        a.records.resize(result.cases.size());
        result.arms.push_back(std::move(a));
    }
    const eval::Embedder& embedder = models.embedder();
    const bool targets = target_protocol(config.experiment);

    std::atomic<int> done{0};
    std::mutex progress_mutex;
    parallel_for(config.prompts, config.workers, [&](int k) {
        const PromptCase& pc = result.cases[static_cast<std::size_t>(k)];
        Tensor target_embedding;
        if (targets) target_embedding = embedder.embed(stack(std::vector<Tensor>{pc.target_image}));

        auto score = [&](const Tensor& e) {
            if (!targets) return models.oracle().score(e);
            std::vector<double> s;
            for (int i = 0; i < e.dim(0); ++i) s.push_back(eval::cosine(eval::row(e, i), eval::row(target_embedding, 0)));
            return s;
        };
        const loop::FeedbackSource source = [&](const loop::GeneratedBatch& b, int) {
            const Tensor e = embedder.embed(b.images);
            const auto sel = targets ? eval::target_select(e, eval::row(target_embedding, 0))
                                     : eval::preference_select(e, models.oracle());
            return loop::FeedbackChoice{{sel.liked}, {sel.disliked}};
        };

        std::map<std::string, std::vector<loop::RoundRecord>> histories;
        std::map<std::string, std::vector<Tensor>> embeddings;
        for (const auto& s : specs) {
            GenerationConfig g = s.generation;
            g.seed = pc.seed;
            auto history = loop::run_feedback_rounds(models.generator(), pc.prompt, source, g);
            for (const auto& rec : history) embeddings[s.name].push_back(embedder.embed(rec.images));
            histories[s.name] = std::move(history);
        }

        for (std::size_t a = 0; a < specs.size(); ++a) {
            const auto& s = specs[a];
            const std::string& ref = s.similarity_reference.empty() ? s.name : s.similarity_reference;
            const bool ref_negative = [&] {
                for (const auto& o : specs) {
                    if (o.name == ref) return o.generation.use_negative;
                }
                return true;
            }();
            std::vector<RoundMetrics> rounds;
            double cummax = -2.0;
            for (int r = 1; r <= config.rounds; ++r) {
                RoundMetrics m;
                m.record = histories[s.name][static_cast<std::size_t>(r - 1)];
                const Tensor& e = embeddings[s.name][static_cast<std::size_t>(r - 1)];
                m.scores = score(e);
                m.score_min = *std::min_element(m.scores.begin(), m.scores.end());
                m.score_max = *std::max_element(m.scores.begin(), m.scores.end());
                m.score_mean = 0.0;
                for (double x : m.scores) m.score_mean += x;
                m.score_mean /= static_cast<double>(m.scores.size());
                cummax = std::max(cummax, m.score_max);
                m.score_cummax = cummax;
                m.diversity = eval::in_batch_diversity(e).d;
                const auto fb = feedback_in_effect(histories[ref], embeddings[ref], r, ref_negative);
                const auto sim = eval::feedback_similarity(e, fb.liked, fb.disliked);
                m.s_pos = sim.s_pos;
                m.s_neg = sim.s_neg;
                rounds.push_back(std::move(m));
            }
            result.arms[a].records[static_cast<std::size_t>(k)] = std::move(rounds);
        }
        const int finished = ++done;
        if (progress) {
            std::lock_guard lock(progress_mutex);
            progress(finished, config.prompts);
        }
    });

    for (auto& a : result.arms) a.aggregates = aggregate(a.records);
    result.claims = claims_for(result);
    return result;
}

nlohmann::json ExperimentResult::to_json() const {
    nlohmann::json j;
    j["schema_version"] = kResultsSchemaVersion;
    j["experiment"] = experiment_name(config.experiment);
    j["config"] = config.to_json();
    j["cases"] = nlohmann::json::array();
    for (const auto& c : cases) {
        nlohmann::json cj{{"prompt_id", c.id}, {"prompt", world::to_json(c.prompt)}, {"seed", c.seed}};
        if (c.target_spec) cj["target_spec"] = world::to_json(*c.target_spec);
        j["cases"].push_back(cj);
    }
    j["arms"] = nlohmann::json::array();
    for (const auto& a : arms) {
        nlohmann::json aj{{"name", a.name}, {"generation", a.generation.to_json()}};
        aj["similarity_reference"] = a.similarity_reference.empty() ? a.name : a.similarity_reference;
        aj["aggregates"] = nlohmann::json::array();
        for (const auto& row : a.aggregates) aj["aggregates"].push_back(row.to_json());
        aj["records"] = nlohmann::json::array();
        for (std::size_t p = 0; p < a.records.size(); ++p) {
            nlohmann::json pj = nlohmann::json::array();
            for (const auto& m : a.records[p]) {
                nlohmann::json used = nlohmann::json::array();
                for (const auto& up : m.record.used_prompts) used.push_back(world::to_json(up));
                nlohmann::json files = nlohmann::json::array();
                for (const auto& id : m.record.image_ids) files.push_back(image_file(a.name, static_cast<int>(p), id));
                pj.push_back({{"prompt_id", p},
                              {"round", m.record.round_index},
                              {"prompt", world::to_json(m.record.prompt)},
                              {"used_prompts", used},
                              {"image_ids", m.record.image_ids},
                              {"image_files", files},
                              {"scores", m.scores},
                              {"score_min", m.score_min},
                              {"score_mean", m.score_mean},
                              {"score_max", m.score_max},
                              {"score_cummax", m.score_cummax},
                              {"s_pos", opt(m.s_pos)},
                              {"s_neg", opt(m.s_neg)},
                              {"diversity", m.diversity},
                              {"liked_ids", m.record.liked_ids},
                              {"disliked_ids", m.record.disliked_ids},
                              {"feedback_liked", m.record.feedback_liked},
                              {"feedback_disliked", m.record.feedback_disliked}});
            }
            aj["records"].push_back(pj);
        }
        j["arms"].push_back(aj);
    }
    j["claims"] = nlohmann::json::array();
    for (const auto& c : claims) j["claims"].push_back(c.to_json());
    return j;
}

std::string ExperimentResult::csv() const {
    std::string out = "experiment,arm,prompt_id,round,score_min,score_mean,score_max,score_cummax,s_pos,s_neg,diversity\n";
    const std::string exp = experiment_name(config.experiment);
    for (const auto& a : arms) {
        for (std::size_t p = 0; p < a.records.size(); ++p) {
            for (const auto& m : a.records[p]) {
                out += exp + "," + a.name + "," + std::to_string(p) + "," + std::to_string(m.record.round_index) + "," +
                       fmt(m.score_min) + "," + fmt(m.score_mean) + "," + fmt(m.score_max) + "," + fmt(m.score_cummax) +
                       "," + fmt(m.s_pos) + "," + fmt(m.s_neg) + "," + fmt(m.diversity) + "\n";
            }
        }
    }
    return out;
}

void write_results(const ExperimentResult& result, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& a : result.arms) {
        for (std::size_t p = 0; p < a.records.size(); ++p) {
            for (const auto& m : a.records[p]) {
                for (std::size_t i = 0; i < m.record.image_ids.size(); ++i) {
                    const auto path = dir / image_file(a.name, static_cast<int>(p), m.record.image_ids[i]);
                    std::filesystem::create_directories(path.parent_path());
                    io::write_png(path, item(m.record.images, static_cast<int>(i)));
                }
            }
        }
    }
    for (const auto& c : result.cases) {
        if (c.target_spec) {
            const auto path = dir / ("images/targets/p" + std::to_string(c.id) + ".png");
            std::filesystem::create_directories(path.parent_path());
            io::write_png(path, c.target_image);
        }
    }
    const std::string json = result.to_json().dump(1);
    io::write_file_atomic(dir / "results.json", json.data(), json.size());
    const std::string csv = result.csv();
    io::write_file_atomic(dir / "results.csv", csv.data(), csv.size());
}

}  // namespace fabric::harness
