// Command-line front end: dataset generation, the three training stages,
// evaluation, the MNIST toy ablation, and plot emission from score dumps.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "hf2vad/pipeline.hpp"

using namespace hf2vad;

namespace {

std::string env_data_dir() {
    const char* v = std::getenv("HF2VAD_DATA_DIR");
    return v ? std::string(v) : std::string();
}

RunConfig load_base_config(const std::string& config_path) {
    RunConfig cfg;
    if (!config_path.empty()) {
        auto bytes = read_file_bytes(config_path);
        cfg = run_config_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
    }
    if (cfg.dataset_dir.empty()) cfg.dataset_dir = env_data_dir();
    return cfg;
}

void print_structured_error(const std::string& kind, const std::string& message) {
    nlohmann::json err;
    err["error"] = kind;
    err["message"] = message;
    std::cerr << err.dump() << std::endl;
}

// shared flags for stages that read a RunConfig
void add_run_options(CLI::App* cmd, std::string& config_path, RunConfig& cfg, bool& has_seed,
                     uint64_t& seed) {
    cmd->add_option("--config", config_path, "JSON config file (flags override it)");
    cmd->add_option("--data", cfg.dataset_dir, "dataset root (default: $HF2VAD_DATA_DIR)");
    cmd->add_option("--out", cfg.out_dir, "output directory");
    cmd->add_option("--epochs", cfg.epochs, "training epochs");
    cmd->add_option("--batch", cfg.batch_size, "batch size");
    cmd->add_option("--lr", cfg.optim.lr, "initial learning rate");
    cmd->add_option("--t", cfg.t, "temporal window t");
    cmd->add_option("--k,--recon-flows", cfg.recon_flow_count,
                    "number of reconstructed flows fed to the predictor (1..t)");
    cmd->add_option("--w-r", cfg.w_r, "fusion weight for the reconstruction cue");
    cmd->add_option("--w-p", cfg.w_p, "fusion weight for the prediction cue");
    cmd->add_flag("--stochastic", cfg.stochastic_eval, "stochastic latent sampling at eval");
    cmd->add_option("--median-window", cfg.median_window, "median filter window (odd)");
    auto* seed_opt = cmd->add_option("--seed", seed, "RNG seed");
    seed_opt->each([&has_seed](const std::string&) { has_seed = true; });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"HF2-VAD: hybrid flow-reconstruction / frame-prediction video anomaly detection"};
    app.require_subcommand(1);

    // ---- synth-gen ----
    auto* gen = app.add_subcommand("synth-gen", "generate the synthetic sprite benchmark");
    SynthConfig synth;
    std::string gen_out = "data/synth";
    gen->add_option("--seed", synth.seed, "dataset seed");
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--frame-size", synth.frame_size, "frame side length");
    gen->add_option("--sprites", synth.sprite_count, "sprites per video");
    gen->add_option("--length", synth.video_length, "frames per video");
    gen->add_option("--train-videos", synth.train_videos, "training videos");
    gen->add_option("--test-videos", synth.test_videos, "test videos");
    gen->add_option("--speed-factor", synth.speed_factor, "speed anomaly multiplier");
    gen->add_option("--anomaly-length", synth.anomaly_length, "labeled frames per event");
    std::string anomaly_kind = "speed";
    gen->add_option("--anomaly", anomaly_kind, "anomaly type: speed|reverse|teleport");

    // ---- training stages ----
    std::string config_path;
    RunConfig cfg;
    bool has_seed = false;
    uint64_t seed = 1;

    auto* train_recon_cmd = app.add_subcommand("train-recon", "stage 1: train flow reconstruction");
    add_run_options(train_recon_cmd, config_path, cfg, has_seed, seed);

    auto* train_pred_cmd = app.add_subcommand("train-pred", "stage 2: train the predictor");
    std::string recon_ckpt;
    add_run_options(train_pred_cmd, config_path, cfg, has_seed, seed);
    train_pred_cmd->add_option("--recon-ckpt", recon_ckpt, "stage-1 checkpoint directory")
        ->required();

    auto* finetune_cmd = app.add_subcommand("finetune", "stage 3: joint finetuning");
    std::string pred_ckpt;
    add_run_options(finetune_cmd, config_path, cfg, has_seed, seed);
    finetune_cmd->add_option("--recon-ckpt", recon_ckpt, "stage-1 checkpoint")->required();
    finetune_cmd->add_option("--pred-ckpt", pred_ckpt, "stage-2 checkpoint")->required();

    auto* eval_cmd = app.add_subcommand("eval", "score a test split and report AUROC");
    add_run_options(eval_cmd, config_path, cfg, has_seed, seed);
    eval_cmd->add_option("--recon-ckpt", recon_ckpt, "reconstruction checkpoint")->required();
    eval_cmd->add_option("--pred-ckpt", pred_ckpt, "prediction checkpoint")->required();

    // ---- toy-mnist ----
    auto* toy = app.add_subcommand("toy-mnist", "digit-2 toy ablation over architecture variants");
    ToyOptions topt;
    std::string variants_arg = "a,c,f";
    std::string toy_data, toy_out = "toy_out";
    toy->add_option("--variants", variants_arg, "comma list from a..f");
    toy->add_option("--data", toy_data, "MNIST IDX directory (default: $HF2VAD_DATA_DIR/mnist)");
    toy->add_option("--out", toy_out, "output directory");
    toy->add_option("--epochs", topt.epochs, "epochs");
    toy->add_option("--subset", topt.subset_size, "training subset size");
    toy->add_option("--seed", topt.seed, "seed");
    toy->add_option("--batch", topt.batch_size, "batch size");
    toy->add_option("--lr", topt.lr, "learning rate");
    toy->add_option("--slots", topt.slot_count, "memory slots");
    toy->add_option("--widths", topt.base_channels, "channel widths per level")
        ->delimiter(',')
        ->expected(4);

    // ---- plot ----
    auto* plot_cmd = app.add_subcommand("plot", "render curves from a score dump");
    std::string scores_path, plot_out = "plots";
    plot_cmd->add_option("--scores", scores_path, "scores.jsonl from eval")->required();
    plot_cmd->add_option("--out", plot_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) {
            if (anomaly_kind == "speed") synth.anomaly = AnomalyType::speed;
            else if (anomaly_kind == "reverse") synth.anomaly = AnomalyType::reverse;
            else if (anomaly_kind == "teleport") synth.anomaly = AnomalyType::teleport;
            else throw ConfigError("unknown anomaly type: " + anomaly_kind);
            SynthResult res = gen_synthetic(synth, gen_out);
            std::cout << "wrote " << res.train_manifest.string() << " and "
                      << res.test_manifest.string() << "\n";
            return 0;
        }

        if (train_recon_cmd->parsed() || train_pred_cmd->parsed() || finetune_cmd->parsed() ||
            eval_cmd->parsed()) {
            RunConfig base = load_base_config(config_path);
            // flags already wrote into cfg; merge: start from file config, then
            // re-parse flags into it
            std::swap(base.dataset_dir, cfg.dataset_dir);
            if (!cfg.dataset_dir.empty()) base.dataset_dir = cfg.dataset_dir;
            // the simple merge: any flag the user passed overrides the base
            for (CLI::App* cmd : {train_recon_cmd, train_pred_cmd, finetune_cmd, eval_cmd}) {
                if (!cmd->parsed()) continue;
                if (cmd->count("--out")) base.out_dir = cfg.out_dir;
                if (cmd->count("--epochs")) base.epochs = cfg.epochs;
                if (cmd->count("--batch")) base.batch_size = cfg.batch_size;
                if (cmd->count("--lr")) base.optim.lr = cfg.optim.lr;
                if (cmd->count("--t")) base.t = cfg.t;
                if (cmd->count("--k") || cmd->count("--recon-flows"))
                    base.recon_flow_count = cfg.recon_flow_count;
                if (cmd->count("--w-r")) base.w_r = cfg.w_r;
                if (cmd->count("--w-p")) base.w_p = cfg.w_p;
                if (cmd->count("--stochastic")) base.stochastic_eval = cfg.stochastic_eval;
                if (cmd->count("--median-window")) base.median_window = cfg.median_window;
                if (cmd->count("--data")) base.dataset_dir = cfg.dataset_dir;
            }
            if (has_seed) base.seed = seed;
            if (base.dataset_dir.empty())
                throw ConfigError("no dataset directory: pass --data or set HF2VAD_DATA_DIR");

            if (train_recon_cmd->parsed()) {
                TrainResult r = train_recon(base);
                std::cout << "checkpoint: " << r.ckpt_dir.string()
                          << " final_loss=" << (r.epoch_losses.empty() ? 0.0
                                                                       : r.epoch_losses.back())
                          << "\n";
            } else if (train_pred_cmd->parsed()) {
                TrainResult r = train_pred(base, recon_ckpt);
                std::cout << "checkpoint: " << r.ckpt_dir.string()
                          << " final_loss=" << (r.epoch_losses.empty() ? 0.0
                                                                       : r.epoch_losses.back())
                          << "\n";
            } else if (finetune_cmd->parsed()) {
                FinetuneResult r = finetune(base, recon_ckpt, pred_ckpt);
                std::cout << "checkpoint: " << r.ckpt_dir.string() << "\n";
            } else {
                EvalResult r = evaluate(base, recon_ckpt, pred_ckpt);
                nlohmann::json summary;
                summary["dump"] = r.dump_path.string();
                if (r.auroc_hybrid) summary["auroc_hybrid"] = *r.auroc_hybrid;
                if (r.auroc_recon_only) summary["auroc_recon_only"] = *r.auroc_recon_only;
                if (r.auroc_pred_only) summary["auroc_pred_only"] = *r.auroc_pred_only;
                for (const auto& v : r.videos)
                    if (v.auroc) summary["per_video"][v.video_id] = *v.auroc;
                std::cout << summary.dump(2) << "\n";
            }
            return 0;
        }

        if (toy->parsed()) {
            topt.variants.clear();
            for (char ch : variants_arg)
                if (ch != ',' && ch != ' ') topt.variants.push_back(ch);
            topt.data_dir = toy_data.empty() ? fs::path(env_data_dir()) / "mnist"
                                             : fs::path(toy_data);
            topt.out_dir = toy_out;
            ToyReport report = run_mnist_toy(topt);
            std::cout << toy_report_json(report).dump(2) << "\n";
            return 0;
        }

        if (plot_cmd->parsed()) {
            auto bytes = read_file_bytes(scores_path);
            std::map<std::string, CurvePlot> per_video;
            std::istringstream in(std::string(bytes.begin(), bytes.end()));
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                auto rec = nlohmann::json::parse(line);
                auto& plot = per_video[rec["video_id"].get<std::string>()];
                if (plot.values.empty())
                    plot.first_frame_index = rec["frame_index"].get<int64_t>();
                plot.title = rec["video_id"].get<std::string>();
                plot.values.push_back(rec["smoothed"].get<double>());
                if (rec.contains("label")) plot.labels.push_back(rec["label"].get<int>());
            }
            for (auto& [video_id, plot] : per_video)
                write_curve_plot(plot, fs::path(plot_out) / ("curve_" + video_id));
            std::cout << "wrote " << per_video.size() << " curve plots to " << plot_out << "\n";
            return 0;
        }
    } catch (const ConfigError& e) {
        print_structured_error("config", e.what());
        return 1;
    } catch (const DatasetError& e) {
        print_structured_error("dataset", e.what());
        return 1;
    } catch (const FormatError& e) {
        print_structured_error("format", e.what());
        return 1;
    } catch (const Error& e) {
        print_structured_error("runtime", e.what());
        return 1;
    } catch (const std::exception& e) {
        print_structured_error("internal", e.what());
        return 1;
    }
    return 0;
}
