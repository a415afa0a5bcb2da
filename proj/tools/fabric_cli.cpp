#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "fabric/gateway/server.hpp"
#include "fabric/harness/experiments.hpp"
#include "fabric/harness/gates.hpp"
#include "fabric/io/png.hpp"
#include "fabric/train/pipeline.hpp"

using namespace fabric;
namespace fs = std::filesystem;

namespace {

/// Bad input from the user; exits with status 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

void write_json(const fs::path& path, const nlohmann::json& j) {
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    const std::string text = j.dump(1);
    io::write_file_atomic(path, text.data(), text.size());
}

std::unique_ptr<harness::Models> load_models(const fs::path& dir) {
    if (!fs::exists(dir / harness::kDenoiserFile) || !fs::exists(dir / harness::kEmbedderFile)) {
        throw UsageError("checkpoints not found in " + dir.string() + " (run train-embedder and train-denoiser first)");
    }
    return harness::Models::load(dir);
}

gateway::Server* g_server = nullptr;

void on_signal(int) {
    if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Iterative feedback conditioning of a toy diffusion model"};
    app.require_subcommand(1);

    auto recipe = train::TrainingRecipe::desk();
    fs::path checkpoint_dir = "checkpoints";

    auto* gen_data = app.add_subcommand("gen-data", "Render a shapes dataset to PNGs plus a JSON manifest");
    int data_n = 1000;
    std::string data_variant = "train";
    std::uint64_t data_seed = 1;
    fs::path data_out;
    gen_data->add_option("--n", data_n, "Number of images")->check(CLI::PositiveNumber);
    gen_data->add_option("--variant", data_variant, "train or target")->check(CLI::IsMember({"train", "target"}));
    gen_data->add_option("--seed", data_seed, "Sampling seed");
    gen_data->add_option("--out", data_out, "Output directory")->required();

    auto* train_den = app.add_subcommand("train-denoiser", "Train the denoiser and write denoiser.ckpt");
    auto* train_emb = app.add_subcommand("train-embedder", "Train the embedder and write embedder.ckpt");
    for (auto* cmd : {train_den, train_emb}) {
        cmd->add_option("--checkpoint-dir", checkpoint_dir, "Checkpoint directory");
        cmd->add_option("--train-images", recipe.train_images, "Training set size")->check(CLI::PositiveNumber);
        cmd->add_option("--data-seed", recipe.data_seed, "Dataset seed");
    }
    train_den->add_option("--epochs", recipe.denoiser.epochs)->check(CLI::PositiveNumber);
    train_den->add_option("--batch", recipe.denoiser.batch)->check(CLI::PositiveNumber);
    train_den->add_option("--lr", recipe.denoiser.lr)->check(CLI::PositiveNumber);
    train_den->add_option("--seed", recipe.denoiser.seed);
    train_emb->add_option("--epochs", recipe.embedder.epochs)->check(CLI::PositiveNumber);
    train_emb->add_option("--batch", recipe.embedder.batch)->check(CLI::PositiveNumber);
    train_emb->add_option("--lr", recipe.embedder.lr)->check(CLI::PositiveNumber);
    train_emb->add_option("--seed", recipe.embedder.seed);

    auto* generate = app.add_subcommand("generate", "Generate one batch, optionally conditioned on feedback images");
    std::string prompt_text;
    std::vector<fs::path> liked_paths, disliked_paths;
    loop::GenerationConfig gen_cfg;
    std::string schedule_text = "first_half";
    std::uint64_t gen_seed = 0;
    fs::path gen_out;
    generate->add_option("--prompt", prompt_text, "shape,color,size with empty or 'null' slots")->required();
    generate->add_option("--liked", liked_paths, "Liked PNG images")->check(CLI::ExistingFile);
    generate->add_option("--disliked", disliked_paths, "Disliked PNG images")->check(CLI::ExistingFile);
    generate->add_option("--w", gen_cfg.schedule.w_max, "Feedback strength")->check(CLI::NonNegativeNumber);
    generate->add_option("--schedule", schedule_text, "constant, first_half, second_half or linear_interp");
    generate->add_option("--dropout-p", gen_cfg.dropout_p, "Prompt dropout probability")->check(CLI::Range(0.0, 1.0));
    generate->add_option("--n", gen_cfg.n, "Batch size")->check(CLI::PositiveNumber);
    generate->add_option("--seed", gen_seed, "Sampling seed");
    generate->add_option("--out", gen_out, "Output directory")->required();
    generate->add_option("--checkpoint-dir", checkpoint_dir, "Checkpoint directory");

    auto* experiment = app.add_subcommand("experiment", "Run a feedback experiment");
    std::string experiment_kind;
    int prompts = 50;
    fs::path exp_out;
    std::uint64_t exp_seed = 7;
    int exp_workers = 0;
    int exp_steps = diffusion::kDefaultSamplingSteps;
    experiment->add_option("kind", experiment_kind, "preference, target, schedule or dropout")
        ->required()
        ->check(CLI::IsMember({"preference", "target", "schedule", "dropout"}));
    experiment->add_option("--prompts", prompts, "Number of prompts or targets")->check(CLI::PositiveNumber);
    experiment->add_option("--out", exp_out, "Output directory")->required();
    experiment->add_option("--seed", exp_seed, "Base seed");
    experiment->add_option("--workers", exp_workers, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
    experiment->add_option("--sampling-steps", exp_steps, "Sampler steps")->check(CLI::PositiveNumber);
    experiment->add_option("--checkpoint-dir", checkpoint_dir, "Checkpoint directory");

    auto* serve = app.add_subcommand("serve", "Run the session HTTP service");
    gateway::ServerOptions server_opts;
    fs::path data_dir;
    int serve_workers = 0;
    double timeout_s = 120.0;
    serve->add_option("--port", server_opts.port, "Port (0 = ephemeral)")->check(CLI::Range(0, 65535));
    serve->add_option("--host", server_opts.host, "Bind address");
    serve->add_option("--checkpoint-dir", checkpoint_dir, "Checkpoint directory");
    serve->add_option("--data-dir", data_dir, "Session storage root (default: $FABRIC_DATA_DIR or ./fabric_data)");
    serve->add_option("--workers", serve_workers, "Generation threads (0 = all cores)")->check(CLI::NonNegativeNumber);
    serve->add_option("--timeout", timeout_s, "Generation timeout in seconds")->check(CLI::PositiveNumber);
    serve->add_option("--ui-dir", server_opts.ui_dir, "Static UI bundle served under /ui")->check(CLI::ExistingDirectory);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (*gen_data) {
            Rng rng(data_seed);
            const auto variant = data_variant == "train" ? world::Variant::train : world::Variant::target;
            const auto samples = world::sample_dataset(data_n, variant, rng);
            for (std::size_t i = 0; i < samples.size(); ++i) {
                io::write_png(data_out / "images" / (std::to_string(i) + ".png"), samples[i].image);
            }
            write_json(data_out / "manifest.json", world::manifest(samples, variant));
            std::cout << "wrote " << samples.size() << " images to " << data_out.string() << "\n";
        } else if (*train_emb) {
            const auto report = train::train_embedder_to(checkpoint_dir, recipe, log_line);
            std::cout << "embedder validation accuracy " << report.validation.at("accuracy").get<double>() << "\n";
        } else if (*train_den) {
            const auto report = train::train_denoiser_to(checkpoint_dir, recipe, log_line);
            std::cout << "denoiser validation eps mse " << report.validation.at("eps_mse").get<double>() << "\n";
        } else if (*generate) {
            world::Prompt prompt;
            try {
                prompt = world::parse_prompt(prompt_text);
                gen_cfg.schedule.kind = loop::parse_schedule(schedule_text);
                gen_cfg.validate();
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
            const auto models = load_models(checkpoint_dir);
            loop::FeedbackState state;
            for (const auto& p : liked_paths) state.liked.push_back({p.filename().string(), io::read_png(p)});
            for (const auto& p : disliked_paths) state.disliked.push_back({p.filename().string(), io::read_png(p)});
            gen_cfg.seed = gen_seed;
            const auto batch = models->generator().generate(prompt, state, gen_cfg, gen_seed);
            nlohmann::json files = nlohmann::json::array();
            for (int i = 0; i < gen_cfg.n; ++i) {
                const std::string name = "image_" + std::to_string(i) + ".png";
                io::write_png(gen_out / name, item(batch.images, i));
                files.push_back(name);
            }
            write_json(gen_out / "generation.json",
                       {{"prompt", world::to_json(prompt)}, {"config", gen_cfg.to_json()}, {"images", files}});
            std::cout << "wrote " << gen_cfg.n << " images to " << gen_out.string() << "\n";
        } else if (*experiment) {
            auto cfg = harness::ExperimentConfig::defaults(harness::parse_experiment(experiment_kind));
            cfg.prompts = prompts;
            cfg.seed = exp_seed;
            cfg.workers = exp_workers;
            cfg.sampling_steps = exp_steps;
            const auto models = load_models(checkpoint_dir);
            const auto result = harness::run_experiment(*models, cfg, [](int done, int total) {
                std::cerr << "\r" << done << "/" << total << " prompts" << std::flush;
                if (done == total) std::cerr << "\n";
            });
            harness::write_results(result, exp_out);
            for (const auto& c : result.claims) {
                std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << " (wins " << c.forward.wins << ", losses "
                          << c.forward.losses << ", p " << c.forward.p_value << ")\n";
            }
            std::cout << "results in " << (exp_out / "results.json").string() << "\n";
        } else if (*serve) {
            const auto models = load_models(checkpoint_dir);
            gateway::SessionOptions opts;
            opts.workers = serve_workers;
            opts.timeout = std::chrono::milliseconds(static_cast<long long>(timeout_s * 1000.0));
            gateway::SessionManager sessions(*models, data_dir.empty() ? gateway::default_data_root() : data_dir, opts);
            gateway::Server server(sessions, server_opts);
            const int port = server.bind();
            std::cout << "listening on http://" << server_opts.host << ":" << port << std::endl;
            g_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            server.run();
            g_server = nullptr;
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
