#include "fabric/loop/feedback.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include "fabric/io/png.hpp"

namespace fabric::loop {

using world::Prompt;

namespace {

constexpr std::uint64_t kDropoutStream = 2;
constexpr std::uint64_t kReferenceStream = 3;

Tensor rows_range(const Tensor& batch, int begin, int count) {
    Shape shape = batch.shape();
    shape[0] = count;
    const std::size_t per = batch.size() / static_cast<std::size_t>(batch.dim(0));
    const auto first = batch.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(begin) * per);
    return Tensor(shape, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(count) * per)));
}

Tensor twice(const Tensor& z) {
    Shape shape = z.shape();
    shape[0] *= 2;
    std::vector<float> data(z.data().begin(), z.data().end());
    data.insert(data.end(), z.data().begin(), z.data().end());
    return Tensor(shape, std::move(data));
}

void check_images(const std::vector<FeedbackImage>& images, int size) {
    for (const auto& f : images) {
        const Shape expected{3, size, size};
        if (f.image.shape() != expected) {
            throw ShapeError("feedback image " + f.id + " has shape " + shape_str(f.image.shape()) + ", expected " +
                             shape_str(expected));
        }
    }
}

}  // namespace

std::string schedule_name(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::constant: return "constant";
        case ScheduleKind::first_half: return "first_half";
        case ScheduleKind::second_half: return "second_half";
        case ScheduleKind::linear_interp: return "linear_interp";
    }
    throw std::invalid_argument("unknown schedule kind");
}

ScheduleKind parse_schedule(const std::string& s) {
    for (auto k : {ScheduleKind::constant, ScheduleKind::first_half, ScheduleKind::second_half, ScheduleKind::linear_interp}) {
        if (schedule_name(k) == s) return k;
    }
    if (s == "full") return ScheduleKind::constant;
    throw std::invalid_argument("unknown schedule '" + s + "'");
}

void FeedbackSchedule::validate() const {
    if (!(w_max >= 0.0f) || !(w_start >= 0.0f) || !(w_end >= 0.0f)) throw std::invalid_argument("feedback weights must be >= 0");
    if (!(cutoff >= 0.0 && cutoff <= 1.0)) throw std::invalid_argument("schedule cutoff must be in [0, 1]");
}

nlohmann::json FeedbackSchedule::to_json() const {
    return {{"kind", schedule_name(kind)}, {"w_max", w_max}, {"cutoff", cutoff}, {"w_start", w_start}, {"w_end", w_end}};
}

FeedbackSchedule FeedbackSchedule::from_json(const nlohmann::json& j) {
    FeedbackSchedule s;
    s.kind = parse_schedule(j.at("kind").get<std::string>());
    s.w_max = j.at("w_max").get<float>();
    s.cutoff = j.at("cutoff").get<double>();
    s.w_start = j.at("w_start").get<float>();
    s.w_end = j.at("w_end").get<float>();
    s.validate();
    return s;
}

FeedbackWeights schedule_weight(const FeedbackSchedule& schedule, int step_index, int total_steps) {
    if (total_steps < 1 || step_index < 0 || step_index >= total_steps) {
        throw std::out_of_range("schedule_weight: step " + std::to_string(step_index) + " outside [0, " +
                                std::to_string(total_steps) + ")");
    }
    const bool early = step_index < schedule.cutoff * total_steps;
    float w = 0.0f;
    switch (schedule.kind) {
        case ScheduleKind::constant: w = schedule.w_max; break;
        case ScheduleKind::first_half: w = early ? schedule.w_max : 0.0f; break;
        case ScheduleKind::second_half: w = early ? 0.0f : schedule.w_max; break;
        case ScheduleKind::linear_interp: {
            const double frac = total_steps > 1 ? static_cast<double>(step_index) / (total_steps - 1) : 0.0;
            w = static_cast<float>(schedule.w_start + (schedule.w_end - schedule.w_start) * frac);
            break;
        }
    }
    w = std::max(w, 0.0f);
    return {w, w};
}

Prompt prompt_dropout(const Prompt& prompt, double p, Rng& rng) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("dropout probability must be in [0, 1]");
    Prompt out = prompt;
    const bool drop_shape = rng.uniform() < p;
    const bool drop_color = rng.uniform() < p;
    const bool drop_size = rng.uniform() < p;
    if (drop_shape) out.shape.reset();
    if (drop_color) out.color.reset();
    if (drop_size) out.size.reset();
    return out;
}

void FeedbackState::add(std::vector<FeedbackImage> new_liked, std::vector<FeedbackImage> new_disliked) {
    for (auto& f : new_liked) liked.push_back(std::move(f));
    for (auto& f : new_disliked) disliked.push_back(std::move(f));
}

void GenerationConfig::validate() const {
    if (n < 1) throw std::invalid_argument("batch size n must be >= 1");
    if (rounds < 1) throw std::invalid_argument("rounds must be >= 1");
    if (!(dropout_p >= 0.0 && dropout_p <= 1.0)) throw std::invalid_argument("dropout_p must be in [0, 1]");
    if (sampling_steps < 1) throw std::invalid_argument("sampling_steps must be >= 1");
    if (!(guidance_scale >= 0.0f)) throw std::invalid_argument("guidance_scale must be >= 0");
    schedule.validate();
}

nlohmann::json GenerationConfig::to_json() const {
    return {{"n", n},
            {"rounds", rounds},
            {"w", schedule.w_max},
            {"schedule", schedule_name(schedule.kind)},
            {"cutoff", schedule.cutoff},
            {"w_start", schedule.w_start},
            {"w_end", schedule.w_end},
            {"dropout_p", dropout_p},
            {"use_feedback", use_feedback},
            {"use_negative", use_negative},
            {"sampling_steps", sampling_steps},
            {"guidance_scale", guidance_scale},
            {"seed", seed}};
}

GenerationConfig GenerationConfig::from_json(const nlohmann::json& j, GenerationConfig c) {
    if (!j.is_object()) throw std::invalid_argument("generation config must be an object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "n") c.n = value.get<int>();
            else if (key == "rounds") c.rounds = value.get<int>();
            else if (key == "w") c.schedule.w_max = value.get<float>();
            else if (key == "schedule") c.schedule.kind = parse_schedule(value.get<std::string>());
            else if (key == "cutoff") c.schedule.cutoff = value.get<double>();
            else if (key == "w_start") c.schedule.w_start = value.get<float>();
            else if (key == "w_end") c.schedule.w_end = value.get<float>();
            else if (key == "dropout_p") c.dropout_p = value.get<double>();
            else if (key == "use_feedback") c.use_feedback = value.get<bool>();
            else if (key == "use_negative") c.use_negative = value.get<bool>();
            else if (key == "sampling_steps") c.sampling_steps = value.get<int>();
            else if (key == "guidance_scale") c.guidance_scale = value.get<float>();
            else if (key == "seed") c.seed = value.get<std::uint64_t>();
            else throw std::invalid_argument("unknown config key '" + key + "'");
        } catch (const nlohmann::json::exception&) {
            throw std::invalid_argument("config key '" + key + "' has the wrong type");
        }
    }
    c.validate();
    return c;
}

GenerationConfig GenerationConfig::from_json(const nlohmann::json& j) { return from_json(j, GenerationConfig{}); }

Generator::Generator(const denoiser::UNet& net)
    : net_(net),
      schedule_(diffusion::build_schedule(net.config().train_steps, diffusion::kDefaultBetaStart, diffusion::kDefaultBetaEnd)) {}

GeneratedBatch Generator::generate(const Prompt& prompt, const FeedbackState& feedback, const GenerationConfig& config,
                                   std::uint64_t seed) const {
    config.validate();
    const int n = config.n, size = net_.config().image_size;
    const auto sampler = diffusion::SamplerConfig::strided(schedule_, config.sampling_steps, config.guidance_scale, seed);

    std::vector<FeedbackImage> liked, disliked;
    if (config.use_feedback) {
        check_images(feedback.liked, size);
        check_images(feedback.disliked, size);
        liked = feedback.liked;
        if (config.use_negative) disliked = feedback.disliked;
    }

    Rng noise(derive_seed(seed, {kLatentStream}));
    Rng drop(derive_seed(seed, {kDropoutStream}));
    GeneratedBatch out;
    std::vector<Prompt> prompts;
    for (int i = 0; i < n; ++i) out.prompts.push_back(prompt_dropout(prompt, config.dropout_p, drop));
    prompts = out.prompts;
    prompts.insert(prompts.end(), static_cast<std::size_t>(n), Prompt::null());

    Tensor z = gaussian_tensor({n, 3, size, size}, noise);
    const int steps = sampler.steps();
    for (int i = 0; i < steps; ++i) {
        const int t = sampler.timesteps[static_cast<std::size_t>(i)];
        const FeedbackWeights w = schedule_weight(config.schedule, i, steps);
        const bool pos_on = w.pos > 0.0f && !liked.empty();
        const bool neg_on = w.neg > 0.0f && !disliked.empty();
        const std::vector<int> ts(static_cast<std::size_t>(2 * n), t);

        Tensor eps;
        if (!pos_on && !neg_on) {
            eps = net_.predict(twice(z), ts, prompts);
        } else {
            std::vector<Tensor> noised;
            std::vector<std::string> ids;
            auto add_refs = [&](const std::vector<FeedbackImage>& refs, std::uint64_t side) {
                for (std::size_t j = 0; j < refs.size(); ++j) {
                    Rng ref_rng(derive_seed(seed, {kReferenceStream, side, j, static_cast<std::uint64_t>(i)}));
                    noised.push_back(diffusion::forward_noise(refs[j].image, t, schedule_, ref_rng));
                    ids.push_back(refs[j].id);
                }
            };
            if (pos_on) add_refs(liked, 0);
            if (neg_on) add_refs(disliked, 1);
            const std::vector<Prompt> ref_prompts(noised.size(), Prompt::null());
            const auto caches = net_.precompute_hidden_states(stack(noised), t, ref_prompts, ids);

            denoiser::Injection cond, uncond;
            std::size_t next = 0;
            if (pos_on) {
                for (std::size_t j = 0; j < liked.size(); ++j) cond.refs.push_back(&caches[next++]);
                cond.weight = w.pos;
            }
            if (neg_on) {
                for (std::size_t j = 0; j < disliked.size(); ++j) uncond.refs.push_back(&caches[next++]);
                uncond.weight = w.neg;
            }
            std::vector<denoiser::Injection> injections(static_cast<std::size_t>(n), cond);
            injections.insert(injections.end(), static_cast<std::size_t>(n), uncond);
            eps = net_.modified_unet(twice(z), ts, prompts, injections);
        }
        const Tensor eps_hat = diffusion::cfg_combine(rows_range(eps, 0, n), rows_range(eps, n, n), config.guidance_scale);
        z = diffusion::euler_ancestral_step(z, eps_hat, t, sampler.next_timestep(i), schedule_, noise);
    }
    out.images = io::quantize(z);
    return out;
}

std::string image_id(int round, int index) { return "r" + std::to_string(round) + "_i" + std::to_string(index); }

std::uint64_t round_seed(std::uint64_t seed, int round) {
    return derive_seed(seed, {0x726f756e64ULL, static_cast<std::uint64_t>(round)});
}

std::vector<RoundRecord> run_feedback_rounds(const Generator& gen, const Prompt& prompt, const FeedbackSource& source,
                                             const GenerationConfig& config) {
    config.validate();
    FeedbackState state;
    std::vector<RoundRecord> history;
    for (int r = 1; r <= config.rounds; ++r) {
        RoundRecord rec;
        rec.round_index = r;
        rec.prompt = prompt;
        rec.feedback_liked = static_cast<int>(state.liked.size());
        rec.feedback_disliked = static_cast<int>(state.disliked.size());
        GeneratedBatch batch = gen.generate(prompt, state, config, round_seed(config.seed, r));
        for (int i = 0; i < config.n; ++i) rec.image_ids.push_back(image_id(r, i));

        const FeedbackChoice choice = source ? source(batch, r) : FeedbackChoice{};
        std::set<int> seen;
        for (const auto* list : {&choice.liked, &choice.disliked}) {
            for (int idx : *list) {
                if (idx < 0 || idx >= config.n) throw std::invalid_argument("feedback selects an image outside the batch");
                if (!seen.insert(idx).second) throw std::invalid_argument("feedback selects an image twice or as both liked and disliked");
            }
        }
        std::vector<FeedbackImage> liked, disliked;
        for (int idx : choice.liked) {
            liked.push_back({rec.image_ids[static_cast<std::size_t>(idx)], item(batch.images, idx)});
            rec.liked_ids.push_back(liked.back().id);
        }
        for (int idx : choice.disliked) {
            disliked.push_back({rec.image_ids[static_cast<std::size_t>(idx)], item(batch.images, idx)});
            rec.disliked_ids.push_back(disliked.back().id);
        }
        state.add(std::move(liked), std::move(disliked));
        state.round_index = r;
        rec.used_prompts = std::move(batch.prompts);
        rec.images = std::move(batch.images);
        history.push_back(std::move(rec));
    }
    return history;
}

}  // namespace fabric::loop
