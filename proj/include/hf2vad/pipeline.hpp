#pragma once

// Orchestration: run configuration, checkpoints, the three-stage training
// schedule (flow reconstruction, flow-conditioned prediction, joint
// finetuning), evaluation with score dumps and plots, and the
// reconstructed-flow-count sweep.

#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hf2vad/plot.hpp"
#include "hf2vad/prednet.hpp"
#include "hf2vad/reconnet.hpp"
#include "hf2vad/scoring.hpp"
#include "hf2vad/synthlab.hpp"
#include "hf2vad/tensorstore.hpp"

namespace hf2vad {

// ---------------------------------------------------------------------------
// configuration

struct OptimParams {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float decay_factor = 0.8f;
    int decay_every = 50;  // epochs

    float lr_at(int epoch) const {
        return lr * std::pow(decay_factor, static_cast<float>(epoch / decay_every));
    }
};

enum class Stage { train_recon, train_pred, finetune, eval, toy, synth_gen };

inline std::string stage_name(Stage s) {
    switch (s) {
        case Stage::train_recon: return "train_recon";
        case Stage::train_pred: return "train_pred";
        case Stage::finetune: return "finetune";
        case Stage::eval: return "eval";
        case Stage::toy: return "toy";
        case Stage::synth_gen: return "synth_gen";
    }
    throw ConfigError("unknown stage");
}

struct RunConfig {
    std::string dataset_dir;
    int t = 4;
    int stc_size = 32;
    OptimParams optim;
    int batch_size = 128;
    int epochs = 80;
    float finetune_lr_scale = 0.1f;
    float lambda_recon = 1.0f;
    float lambda_ent = 2e-4f;
    float lambda_cvae = 1.0f;
    float lambda_gd = 1.0f;
    double w_r = 1.0;
    double w_p = 0.1;
    int recon_flow_count = 4;  // k: last k flows into the CVAE are reconstructed
    uint64_t seed = 1;
    bool stochastic_eval = false;  // sample_mode at test time
    int median_window = 17;
    bool smooth_per_video = true;
    bool normalize_per_video = false;
    std::string out_dir = "runs";
    // network shape knobs
    ReconConfig recon;
    PredConfig pred;

    void validate_common() const {
        if (t < 1) throw ConfigError("config: t must be >= 1");
        if (recon_flow_count < 1 || recon_flow_count > t)
            throw ConfigError("config: recon_flow_count must lie in 1..t");
        if (batch_size < 1 || epochs < 0) throw ConfigError("config: bad batch/epochs");
        if (median_window < 1 || median_window % 2 == 0)
            throw ConfigError("config: median window must be odd");
    }
};

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["dataset_dir"] = c.dataset_dir;
    j["t"] = c.t;
    j["stc_size"] = c.stc_size;
    j["optim"] = {{"lr", c.optim.lr},
                  {"beta1", c.optim.beta1},
                  {"beta2", c.optim.beta2},
                  {"decay_factor", c.optim.decay_factor},
                  {"decay_every", c.optim.decay_every}};
    j["batch_size"] = c.batch_size;
    j["epochs"] = c.epochs;
    j["finetune_lr_scale"] = c.finetune_lr_scale;
    j["lambda"] = {{"recon", c.lambda_recon},
                   {"ent", c.lambda_ent},
                   {"cvae", c.lambda_cvae},
                   {"gd", c.lambda_gd}};
    j["w_r"] = c.w_r;
    j["w_p"] = c.w_p;
    j["recon_flow_count"] = c.recon_flow_count;
    j["seed"] = c.seed;
    j["stochastic_eval"] = c.stochastic_eval;
    j["median_window"] = c.median_window;
    j["smooth_per_video"] = c.smooth_per_video;
    j["normalize_per_video"] = c.normalize_per_video;
    j["out_dir"] = c.out_dir;
    j["recon_net"] = {{"variant", std::string(1, variant_letter(c.recon.variant))},
                      {"levels", c.recon.levels},
                      {"in_channels", c.recon.in_channels},
                      {"base_channels", c.recon.base_channels},
                      {"slot_count", c.recon.slot_count},
                      {"shrink_threshold", c.recon.shrink_threshold}};
    j["pred_net"] = {{"frame_channels", c.pred.frame_channels},
                     {"levels", c.pred.levels},
                     {"base_channels", c.pred.base_channels},
                     {"z_channels", c.pred.z_channels}};
    return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("dataset_dir", c.dataset_dir);
    get("t", c.t);
    get("stc_size", c.stc_size);
    if (j.contains("optim")) {
        const auto& o = j["optim"];
        if (o.contains("lr")) c.optim.lr = o["lr"].get<float>();
        if (o.contains("beta1")) c.optim.beta1 = o["beta1"].get<float>();
        if (o.contains("beta2")) c.optim.beta2 = o["beta2"].get<float>();
        if (o.contains("decay_factor")) c.optim.decay_factor = o["decay_factor"].get<float>();
        if (o.contains("decay_every")) c.optim.decay_every = o["decay_every"].get<int>();
    }
    get("batch_size", c.batch_size);
    get("epochs", c.epochs);
    get("finetune_lr_scale", c.finetune_lr_scale);
    if (j.contains("lambda")) {
        const auto& l = j["lambda"];
        if (l.contains("recon")) c.lambda_recon = l["recon"].get<float>();
        if (l.contains("ent")) c.lambda_ent = l["ent"].get<float>();
        if (l.contains("cvae")) c.lambda_cvae = l["cvae"].get<float>();
        if (l.contains("gd")) c.lambda_gd = l["gd"].get<float>();
    }
    get("w_r", c.w_r);
    get("w_p", c.w_p);
    get("recon_flow_count", c.recon_flow_count);
    get("seed", c.seed);
    get("stochastic_eval", c.stochastic_eval);
    get("median_window", c.median_window);
    get("smooth_per_video", c.smooth_per_video);
    get("normalize_per_video", c.normalize_per_video);
    get("out_dir", c.out_dir);
    if (j.contains("recon_net")) {
        const auto& r = j["recon_net"];
        if (r.contains("variant"))
            c.recon.variant = variant_from_letter(r["variant"].get<std::string>().at(0));
        if (r.contains("levels")) c.recon.levels = r["levels"].get<int>();
        if (r.contains("in_channels")) c.recon.in_channels = r["in_channels"].get<int64_t>();
        if (r.contains("base_channels"))
            c.recon.base_channels = r["base_channels"].get<std::vector<int64_t>>();
        if (r.contains("slot_count")) c.recon.slot_count = r["slot_count"].get<int64_t>();
        if (r.contains("shrink_threshold"))
            c.recon.shrink_threshold = r["shrink_threshold"].get<float>();
    }
    if (j.contains("pred_net")) {
        const auto& p = j["pred_net"];
        if (p.contains("frame_channels"))
            c.pred.frame_channels = p["frame_channels"].get<int64_t>();
        if (p.contains("levels")) c.pred.levels = p["levels"].get<int>();
        if (p.contains("base_channels"))
            c.pred.base_channels = p["base_channels"].get<std::vector<int64_t>>();
        if (p.contains("z_channels")) c.pred.z_channels = p["z_channels"].get<int64_t>();
    }
    c.recon.lambda_recon = c.lambda_recon;
    c.recon.lambda_ent = c.lambda_ent;
    c.pred.lambda_cvae = c.lambda_cvae;
    c.pred.lambda_gd = c.lambda_gd;
    c.pred.t = c.t;
    return c;
}

// ---------------------------------------------------------------------------
// in-memory STC dataset

struct StcSample {
    std::string video_id;
    int64_t frame_index = 0;
    int label = 0;
    Tensor flows;    // (2t, s, s), temporal-major channel order
    Tensor context;  // (t*C, s, s), frames 1..t
    Tensor target;   // (C, s, s), frame t+1
};

struct StcDataset {
    std::vector<StcSample> samples;
    int t = 4;
    int size = 32;
    int64_t frame_channels = 1;
    std::map<std::string, int64_t> video_frame_counts;
    std::map<std::string, std::vector<int>> video_labels;
};

inline StcDataset load_stc_dataset(const fs::path& manifest_path, int t, int size,
                                   bool expect_labels) {
    DatasetManifest manifest = load_manifest(manifest_path);
    manifest.validate(expect_labels);
    StcDataset ds;
    ds.t = t;
    ds.size = size;
    for (const auto& video : manifest.videos) {
        ds.video_frame_counts[video.video_id] = video.frame_count();
        if (expect_labels) ds.video_labels[video.video_id] = video.labels;
        extract_stcs(manifest, video.video_id, t, size, [&](STCPair&& stc) {
            StcSample s;
            s.video_id = stc.video_id;
            s.frame_index = stc.target_frame_index;
            s.label = stc.label;
            int64_t c = stc.frames.dim(1);
            ds.frame_channels = c;
            s.flows = stc.flows.reshaped({static_cast<int64_t>(t) * 2, size, size});
            Tensor ctx({static_cast<int64_t>(t) * c, size, size});
            std::memcpy(ctx.data(), stc.frames.data(),
                        static_cast<size_t>(ctx.numel()) * 4);
            s.context = std::move(ctx);
            Tensor tgt({c, size, size});
            std::memcpy(tgt.data(),
                        stc.frames.data() + static_cast<int64_t>(t) * c * size * size,
                        static_cast<size_t>(tgt.numel()) * 4);
            s.target = std::move(tgt);
            ds.samples.push_back(std::move(s));
        });
    }
    if (ds.samples.empty()) throw DatasetError("no STCs in " + manifest_path.string());
    return ds;
}

namespace detail {

inline Tensor stack_field(const StcDataset& ds, const std::vector<size_t>& idx, size_t lo,
                          size_t hi, Tensor StcSample::*field) {
    const Tensor& probe = ds.samples[idx[lo]].*field;
    Shape shape = probe.shape();
    shape.insert(shape.begin(), static_cast<int64_t>(hi - lo));
    Tensor out(shape);
    int64_t n = probe.numel();
    for (size_t i = lo; i < hi; ++i)
        std::memcpy(out.data() + static_cast<int64_t>(i - lo) * n,
                    (ds.samples[idx[i]].*field).data(), static_cast<size_t>(n) * 4);
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// checkpoints

struct Checkpoint {
    nlohmann::json meta;
    std::map<std::string, Tensor> tensors;
};

inline void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
    fs::create_directories(dir / "tensors");
    nlohmann::json meta = ckpt.meta;
    nlohmann::json index = nlohmann::json::array();
    int i = 0;
    for (const auto& [name, tensor] : ckpt.tensors) {
        std::ostringstream file;
        file << std::setw(5) << std::setfill('0') << i++ << ".hf2t";
        write_tensor(tensor, dir / "tensors" / file.str());
        index.push_back({{"name", name}, {"file", "tensors/" + file.str()}});
    }
    meta["tensors"] = index;
    meta["format_version"] = 1;
    write_file_bytes(dir / "meta.json", meta.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const fs::path& dir) {
    auto bytes = read_file_bytes(dir / "meta.json");
    Checkpoint ckpt;
    ckpt.meta = nlohmann::json::parse(bytes.begin(), bytes.end());
    if (!ckpt.meta.contains("tensors")) throw FormatError("checkpoint meta lacks tensor index");
    for (const auto& entry : ckpt.meta["tensors"])
        ckpt.tensors[entry["name"].get<std::string>()] =
            read_tensor(dir / entry["file"].get<std::string>());
    return ckpt;
}

// capture/restore between a model's named entries and a tensor map
inline void capture_entries(ParamList& entries, const std::string& prefix,
                            std::map<std::string, Tensor>& out) {
    for (auto& [name, v] : entries.params) out[prefix + name] = v->value;
    for (auto& [name, t] : entries.buffers) out[prefix + name] = *t;
}

inline void restore_entries(ParamList& entries, const std::string& prefix,
                            const std::map<std::string, Tensor>& in) {
    auto fetch = [&](const std::string& name) -> const Tensor& {
        auto it = in.find(prefix + name);
        if (it == in.end()) throw FormatError("checkpoint missing tensor " + prefix + name);
        return it->second;
    };
    for (auto& [name, v] : entries.params) {
        const Tensor& t = fetch(name);
        if (!t.same_shape(v->value))
            throw ShapeError("checkpoint tensor " + name + " has shape " +
                             shape_str(t.shape()) + ", expected " +
                             shape_str(v->value.shape()));
        v->value = t;
    }
    for (auto& [name, ptr] : entries.buffers) {
        const Tensor& t = fetch(name);
        if (!t.same_shape(*ptr))
            throw ShapeError("checkpoint buffer " + name + " shape mismatch");
        *ptr = t;
    }
}

// ---------------------------------------------------------------------------
// training stages

struct TrainResult {
    fs::path ckpt_dir;
    std::vector<double> epoch_losses;
};

inline Value assemble_mixed_flows(const Value& original, const Value& reconstructed, int t,
                                  int k) {
    if (k == t) return reconstructed;
    Value head = slice_channels(original, 0, 2 * static_cast<int64_t>(t - k));
    Value tail = slice_channels(reconstructed, 2 * static_cast<int64_t>(t - k),
                                2 * static_cast<int64_t>(t));
    return concat_channels({head, tail});
}

inline TrainResult train_recon(const RunConfig& cfg) {
    cfg.validate_common();
    StcDataset ds = load_stc_dataset(fs::path(cfg.dataset_dir) / "train.jsonl", cfg.t,
                                     cfg.stc_size, /*expect_labels=*/false);
    ReconConfig rcfg = cfg.recon;
    rcfg.in_channels = 2 * static_cast<int64_t>(cfg.t);
    rcfg.lambda_recon = cfg.lambda_recon;
    rcfg.lambda_ent = cfg.lambda_ent;
    ReconModel model(rcfg, cfg.seed);
    ParamList entries = model.named_entries();
    Adam optim(entries.params, cfg.optim.beta1, cfg.optim.beta2);

    Rng shuffle_rng(cfg.seed ^ 0xabcdef12345ull);
    std::vector<size_t> order(ds.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainResult result;
    model.set_training(true);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle(order.begin(), order.end(), shuffle_rng);
        float lr = cfg.optim.lr_at(epoch);
        double loss_sum = 0.0;
        int64_t batches = 0;
        for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
            size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(cfg.batch_size));
            Value flows = make_leaf(detail::stack_field(ds, order, b0, b1, &StcSample::flows));
            optim.zero_grad();
            ReconForward fwd = model.forward(flows);
            Value loss = total_recon_loss(flows, fwd, cfg.lambda_recon, cfg.lambda_ent);
            backward(loss);
            optim.step(lr);
            loss_sum += loss->value[0];
            ++batches;
        }
        result.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
    }

    Checkpoint ckpt;
    ckpt.meta["stage"] = stage_name(Stage::train_recon);
    ckpt.meta["epoch"] = cfg.epochs;
    ckpt.meta["seed"] = cfg.seed;
    ckpt.meta["config"] = to_json(cfg);
    ckpt.meta["config"]["recon_net"]["in_channels"] = rcfg.in_channels;
    ckpt.meta["epoch_losses"] = result.epoch_losses;
    capture_entries(entries, "recon.", ckpt.tensors);
    std::map<std::string, Tensor> adam_state;
    optim.export_state(adam_state);
    for (auto& [name, tensor] : adam_state) ckpt.tensors["recon." + name] = tensor;
    ckpt.meta["adam_step"] = optim.step_count();
    result.ckpt_dir = fs::path(cfg.out_dir) / "recon_ckpt";
    save_checkpoint(ckpt, result.ckpt_dir);
    return result;
}

// loads the reconstruction model stored in a checkpoint (any stage)
inline ReconModel load_recon_model(const Checkpoint& ckpt) {
    RunConfig stored = run_config_from_json(ckpt.meta.at("config"));
    ReconConfig rcfg = stored.recon;
    rcfg.in_channels = ckpt.meta["config"]["recon_net"]["in_channels"].get<int64_t>();
    ReconModel model(rcfg, stored.seed);
    ParamList entries = model.named_entries();
    restore_entries(entries, "recon.", ckpt.tensors);
    return model;
}

inline PredModel load_pred_model(const Checkpoint& ckpt) {
    RunConfig stored = run_config_from_json(ckpt.meta.at("config"));
    PredConfig pcfg = stored.pred;
    pcfg.t = stored.t;
    PredModel model(pcfg, stored.seed + 1);
    ParamList entries = model.named_entries();
    restore_entries(entries, "pred.", ckpt.tensors);
    return model;
}

inline TrainResult train_pred(const RunConfig& cfg, const fs::path& recon_ckpt_dir) {
    cfg.validate_common();
    Checkpoint recon_ckpt = load_checkpoint(recon_ckpt_dir);
    ReconModel recon = load_recon_model(recon_ckpt);
    recon.set_training(false);  // frozen conditioner

    StcDataset ds = load_stc_dataset(fs::path(cfg.dataset_dir) / "train.jsonl", cfg.t,
                                     cfg.stc_size, false);
    PredConfig pcfg = cfg.pred;
    pcfg.t = cfg.t;
    pcfg.frame_channels = ds.frame_channels;
    pcfg.lambda_cvae = cfg.lambda_cvae;
    pcfg.lambda_gd = cfg.lambda_gd;
    PredModel model(pcfg, cfg.seed + 1);
    ParamList entries = model.named_entries();
    Adam optim(entries.params, cfg.optim.beta1, cfg.optim.beta2);

    Rng shuffle_rng(cfg.seed ^ 0x7777777ull);
    Rng sample_rng(cfg.seed ^ 0x2222222ull);
    std::vector<size_t> order(ds.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainResult result;
    model.set_training(true);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle(order.begin(), order.end(), shuffle_rng);
        float lr = cfg.optim.lr_at(epoch);
        double loss_sum = 0.0;
        int64_t batches = 0;
        for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
            size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(cfg.batch_size));
            Tensor flows_t = detail::stack_field(ds, order, b0, b1, &StcSample::flows);
            Tensor ctx_t = detail::stack_field(ds, order, b0, b1, &StcSample::context);
            Tensor tgt_t = detail::stack_field(ds, order, b0, b1, &StcSample::target);
            Value flows_orig = make_leaf(flows_t);
            Value recon_flows;
            {
                NoGradGuard ng;
                recon_flows = recon.forward(flows_orig).y_hat;
            }
            Value mixed = assemble_mixed_flows(flows_orig, recon_flows, cfg.t,
                                               cfg.recon_flow_count);
            Value ctx = make_leaf(ctx_t);
            Value tgt = make_leaf(tgt_t);
            optim.zero_grad();
            PredForward fwd = model.forward(ctx, mixed, /*stochastic=*/true, &sample_rng);
            Value loss = total_pred_loss(tgt, fwd, cfg.lambda_cvae, cfg.lambda_gd);
            backward(loss);
            optim.step(lr);
            loss_sum += loss->value[0];
            ++batches;
        }
        result.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
    }

    Checkpoint ckpt;
    ckpt.meta["stage"] = stage_name(Stage::train_pred);
    ckpt.meta["epoch"] = cfg.epochs;
    ckpt.meta["seed"] = cfg.seed;
    ckpt.meta["config"] = to_json(cfg);
    ckpt.meta["config"]["pred_net"]["frame_channels"] = pcfg.frame_channels;
    ckpt.meta["config"]["recon_net"] = recon_ckpt.meta["config"]["recon_net"];
    ckpt.meta["recon_ckpt"] = recon_ckpt_dir.string();
    ckpt.meta["epoch_losses"] = result.epoch_losses;
    capture_entries(entries, "pred.", ckpt.tensors);
    std::map<std::string, Tensor> adam_state;
    optim.export_state(adam_state);
    for (auto& [name, tensor] : adam_state) ckpt.tensors["pred." + name] = tensor;
    ckpt.meta["adam_step"] = optim.step_count();
    result.ckpt_dir = fs::path(cfg.out_dir) / ("pred_ckpt_k" +
                                               std::to_string(cfg.recon_flow_count));
    save_checkpoint(ckpt, result.ckpt_dir);
    return result;
}

struct FinetuneResult {
    fs::path ckpt_dir;
    std::vector<double> epoch_losses;
    // the first batch's loss decomposition, for the definitional identity
    double first_total = 0.0, first_recon_term = 0.0, first_pred_term = 0.0;
};

inline FinetuneResult finetune(const RunConfig& cfg, const fs::path& recon_ckpt_dir,
                               const fs::path& pred_ckpt_dir) {
    cfg.validate_common();
    Checkpoint rc = load_checkpoint(recon_ckpt_dir);
    Checkpoint pc = load_checkpoint(pred_ckpt_dir);
    ReconModel recon = load_recon_model(rc);
    PredModel pred = load_pred_model(pc);

    StcDataset ds = load_stc_dataset(fs::path(cfg.dataset_dir) / "train.jsonl", cfg.t,
                                     cfg.stc_size, false);
    ParamList recon_entries = recon.named_entries();
    ParamList pred_entries = pred.named_entries();
    std::vector<std::pair<std::string, Value>> all_params;
    for (auto& [n, v] : recon_entries.params) all_params.emplace_back("recon." + n, v);
    for (auto& [n, v] : pred_entries.params) all_params.emplace_back("pred." + n, v);
    Adam optim(all_params, cfg.optim.beta1, cfg.optim.beta2);

    Rng shuffle_rng(cfg.seed ^ 0x31415926ull);
    Rng sample_rng(cfg.seed ^ 0x27182818ull);
    std::vector<size_t> order(ds.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    FinetuneResult result;
    recon.set_training(true);
    pred.set_training(true);
    bool first = true;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle(order.begin(), order.end(), shuffle_rng);
        float lr = cfg.finetune_lr_scale * cfg.optim.lr_at(epoch);
        double loss_sum = 0.0;
        int64_t batches = 0;
        for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
            size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(cfg.batch_size));
            Value flows = make_leaf(detail::stack_field(ds, order, b0, b1, &StcSample::flows));
            Value ctx = make_leaf(detail::stack_field(ds, order, b0, b1, &StcSample::context));
            Value tgt = make_leaf(detail::stack_field(ds, order, b0, b1, &StcSample::target));
            optim.zero_grad();
            ReconForward rfwd = recon.forward(flows);
            Value mixed = assemble_mixed_flows(flows, rfwd.y_hat, cfg.t, cfg.recon_flow_count);
            PredForward pfwd = pred.forward(ctx, mixed, true, &sample_rng);
            Value recon_term = total_recon_loss(flows, rfwd, cfg.lambda_recon, cfg.lambda_ent);
            Value pred_term = total_pred_loss(tgt, pfwd, cfg.lambda_cvae, cfg.lambda_gd);
            Value loss = add(recon_term, pred_term);
            if (first) {
                result.first_total = loss->value[0];
                result.first_recon_term = recon_term->value[0];
                result.first_pred_term = pred_term->value[0];
                first = false;
            }
            backward(loss);
            optim.step(lr);
            loss_sum += loss->value[0];
            ++batches;
        }
        result.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
    }

    Checkpoint ckpt;
    ckpt.meta["stage"] = stage_name(Stage::finetune);
    ckpt.meta["epoch"] = cfg.epochs;
    ckpt.meta["seed"] = cfg.seed;
    ckpt.meta["config"] = to_json(cfg);
    ckpt.meta["config"]["recon_net"] = rc.meta["config"]["recon_net"];
    ckpt.meta["config"]["pred_net"] = pc.meta["config"]["pred_net"];
    ckpt.meta["epoch_losses"] = result.epoch_losses;
    capture_entries(recon_entries, "recon.", ckpt.tensors);
    capture_entries(pred_entries, "pred.", ckpt.tensors);
    std::map<std::string, Tensor> adam_state;
    optim.export_state(adam_state);
    for (auto& [name, tensor] : adam_state) ckpt.tensors[name] = tensor;
    ckpt.meta["adam_step"] = optim.step_count();
    result.ckpt_dir = fs::path(cfg.out_dir) / "finetune_ckpt";
    save_checkpoint(ckpt, result.ckpt_dir);
    return result;
}

// ---------------------------------------------------------------------------
// evaluation

struct CueList {
    std::vector<double> s_r, s_p;
};

// batched cue computation over a dataset; deterministic order
inline CueList compute_cues(ReconModel& recon, PredModel& pred, const StcDataset& ds,
                            const RunConfig& cfg, bool stochastic, Rng* rng,
                            std::vector<Tensor>* error_maps = nullptr) {
    recon.set_training(false);
    pred.set_training(false);
    NoGradGuard ng;
    CueList cues;
    std::vector<size_t> idx(ds.samples.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const size_t bs = 64;
    for (size_t b0 = 0; b0 < idx.size(); b0 += bs) {
        size_t b1 = std::min(idx.size(), b0 + bs);
        Value flows = make_leaf(detail::stack_field(ds, idx, b0, b1, &StcSample::flows));
        Value ctx = make_leaf(detail::stack_field(ds, idx, b0, b1, &StcSample::context));
        Value tgt = make_leaf(detail::stack_field(ds, idx, b0, b1, &StcSample::target));
        ReconForward rfwd = recon.forward(flows);
        Value mixed = assemble_mixed_flows(flows, rfwd.y_hat, cfg.t, cfg.recon_flow_count);
        PredForward pfwd = pred.forward(ctx, mixed, stochastic, rng);
        int64_t n = static_cast<int64_t>(b1 - b0);
        int64_t flow_elems = flows->value.numel() / n;
        int64_t tgt_elems = tgt->value.numel() / n;
        for (int64_t i = 0; i < n; ++i) {
            const float* fo = flows->value.data() + i * flow_elems;
            const float* fr = rfwd.y_hat->value.data() + i * flow_elems;
            double acc = 0.0;
            for (int64_t j = 0; j < flow_elems; ++j) {
                double d = static_cast<double>(fo[j]) - fr[j];
                acc += d * d;
            }
            cues.s_r.push_back(acc / static_cast<double>(flow_elems));
            const float* to = tgt->value.data() + i * tgt_elems;
            const float* tp = pfwd.x_hat->value.data() + i * tgt_elems;
            acc = 0.0;
            for (int64_t j = 0; j < tgt_elems; ++j) {
                double d = static_cast<double>(to[j]) - tp[j];
                acc += d * d;
            }
            cues.s_p.push_back(acc / static_cast<double>(tgt_elems));
            if (error_maps) {
                int64_t c = ds.frame_channels;
                int64_t plane = static_cast<int64_t>(ds.size) * ds.size;
                Tensor emap({1, ds.size, ds.size});
                for (int64_t pix = 0; pix < plane; ++pix) {
                    double e = 0.0;
                    for (int64_t ch = 0; ch < c; ++ch) {
                        double d = static_cast<double>(to[ch * plane + pix]) -
                                   tp[ch * plane + pix];
                        e += d * d;
                    }
                    emap[pix] = static_cast<float>(e / static_cast<double>(c));
                }
                error_maps->push_back(std::move(emap));
            }
        }
    }
    return cues;
}

struct VideoEval {
    std::string video_id;
    FrameScoreSeries series;
    std::optional<double> auroc;
};

struct EvalResult {
    std::optional<double> auroc_hybrid;
    std::optional<double> auroc_recon_only;
    std::optional<double> auroc_pred_only;
    std::vector<VideoEval> videos;
    ScoreStats stats;
    fs::path dump_path;
};

// Fits (or reuses) training statistics, scores the test split, fuses,
// max-pools per frame, smooths, and reports AUROC. Cached training cues are
// written back into the prediction checkpoint.
inline EvalResult evaluate(const RunConfig& cfg, const fs::path& recon_ckpt_dir,
                           const fs::path& pred_ckpt_dir) {
    cfg.validate_common();
    Checkpoint rc = load_checkpoint(recon_ckpt_dir);
    Checkpoint pc = load_checkpoint(pred_ckpt_dir);
    ReconModel recon = load_recon_model(rc);
    PredModel pred = load_pred_model(pc);

    Rng eval_rng(cfg.seed ^ 0xe7a1e7a1ull);

    // training cue lists: reuse the checkpoint cache when it matches this
    // configuration (cues depend on the flow-mixing count)
    CueList train_cues;
    bool cache_ok = !cfg.stochastic_eval && pc.meta.contains("train_cues") &&
                    pc.meta["train_cues"].value("k", -1) == cfg.recon_flow_count &&
                    pc.meta["train_cues"].value("recon_ckpt", std::string()) ==
                        recon_ckpt_dir.string();
    if (cache_ok) {
        train_cues.s_r = pc.meta["train_cues"]["s_r"].get<std::vector<double>>();
        train_cues.s_p = pc.meta["train_cues"]["s_p"].get<std::vector<double>>();
    } else {
        StcDataset train_ds = load_stc_dataset(fs::path(cfg.dataset_dir) / "train.jsonl", cfg.t,
                                               cfg.stc_size, false);
        train_cues = compute_cues(recon, pred, train_ds, cfg, cfg.stochastic_eval,
                                  cfg.stochastic_eval ? &eval_rng : nullptr);
        if (!cfg.stochastic_eval) {
            pc.meta["train_cues"] = {{"s_r", train_cues.s_r},
                                     {"s_p", train_cues.s_p},
                                     {"k", cfg.recon_flow_count},
                                     {"recon_ckpt", recon_ckpt_dir.string()}};
            save_checkpoint(pc, pred_ckpt_dir);
        }
    }

    bool have_labels = true;
    StcDataset test_ds;
    try {
        test_ds = load_stc_dataset(fs::path(cfg.dataset_dir) / "test.jsonl", cfg.t,
                                   cfg.stc_size, true);
    } catch (const DatasetError&) {
        // tolerate label-free test manifests: metrics skipped, scores dumped
        test_ds = load_stc_dataset(fs::path(cfg.dataset_dir) / "test.jsonl", cfg.t,
                                   cfg.stc_size, false);
        have_labels = false;
    }

    std::vector<Tensor> error_maps;
    CueList test_cues = compute_cues(recon, pred, test_ds, cfg, cfg.stochastic_eval,
                                     cfg.stochastic_eval ? &eval_rng : nullptr, &error_maps);

    EvalResult result;
    fs::create_directories(cfg.out_dir);

    // three fusion settings share the same cues
    struct Mode {
        const char* name;
        double w_r, w_p;
        std::optional<double>* out;
    };
    result.stats = fit_stats(train_cues.s_r, train_cues.s_p, cfg.w_r, cfg.w_p);
    std::vector<Mode> modes = {{"hybrid", cfg.w_r, cfg.w_p, &result.auroc_hybrid},
                               {"recon_only", cfg.w_r, 0.0, &result.auroc_recon_only},
                               {"pred_only", 0.0, cfg.w_p, &result.auroc_pred_only}};

    for (auto& mode : modes) {
        ScoreStats stats = fit_stats(train_cues.s_r, train_cues.s_p, mode.w_r, mode.w_p);
        std::vector<VideoEval> videos;
        for (const auto& [video_id, frame_count] : test_ds.video_frame_counts) {
            std::vector<ObjectScore> objects;
            for (size_t i = 0; i < test_ds.samples.size(); ++i) {
                if (test_ds.samples[i].video_id != video_id) continue;
                objects.push_back(ObjectScore{test_ds.samples[i].frame_index, test_cues.s_r[i],
                                              test_cues.s_p[i]});
            }
            const std::vector<int>* labels =
                have_labels ? &test_ds.video_labels.at(video_id) : nullptr;
            FrameScoreSeries series =
                frame_scores(video_id, cfg.t, frame_count, objects, stats, labels);
            if (cfg.smooth_per_video) {
                std::vector<double> smooth =
                    median_smooth(series.fused_values(), cfg.median_window);
                if (cfg.normalize_per_video) smooth = normalize_series(smooth);
                for (size_t i = 0; i < series.records.size(); ++i)
                    series.records[i].smoothed = smooth[i];
            }
            VideoEval ve;
            ve.video_id = video_id;
            ve.series = std::move(series);
            videos.push_back(std::move(ve));
        }
        if (!cfg.smooth_per_video) {
            // global smoothing across the concatenated timeline
            std::vector<double> all;
            for (auto& ve : videos)
                for (auto& r : ve.series.records) all.push_back(r.fused);
            auto smooth = median_smooth(all, cfg.median_window);
            size_t k = 0;
            for (auto& ve : videos)
                for (auto& r : ve.series.records) r.smoothed = smooth[k++];
        }
        if (have_labels) {
            std::vector<double> pooled_scores;
            std::vector<int> pooled_labels;
            for (auto& ve : videos) {
                std::vector<double> vals;
                std::vector<int> lab;
                for (const auto& r : ve.series.records) {
                    vals.push_back(r.smoothed);
                    lab.push_back(*r.label);
                }
                pooled_scores.insert(pooled_scores.end(), vals.begin(), vals.end());
                pooled_labels.insert(pooled_labels.end(), lab.begin(), lab.end());
                try {
                    ve.auroc = auroc(vals, lab);
                } catch (const StatsError&) {
                    ve.auroc = std::nullopt;  // one-class video
                }
            }
            try {
                *mode.out = auroc(pooled_scores, pooled_labels);
            } catch (const StatsError&) {
                *mode.out = std::nullopt;
            }
        }
        if (std::string(mode.name) == "hybrid") result.videos = std::move(videos);
    }

    // score dump: one JSON line per scored frame (hybrid fusion)
    result.dump_path = fs::path(cfg.out_dir) / "scores.jsonl";
    {
        std::ostringstream out;
        for (const auto& ve : result.videos) {
            for (const auto& r : ve.series.records) {
                nlohmann::json line;
                line["video_id"] = ve.video_id;
                line["frame_index"] = r.frame_index;
                line["s_r"] = r.s_r.has_value() ? nlohmann::json(*r.s_r) : nlohmann::json();
                line["s_p"] = r.s_p.has_value() ? nlohmann::json(*r.s_p) : nlohmann::json();
                line["fused"] = r.fused;
                line["smoothed"] = r.smoothed;
                if (r.label.has_value()) line["label"] = *r.label;
                out << line.dump() << '\n';
            }
        }
        write_file_bytes(result.dump_path, out.str());
    }

    // anomaly curves and prediction-error heat maps
    for (const auto& ve : result.videos) {
        CurvePlot plot;
        plot.title = ve.video_id +
                     (ve.auroc ? " auroc=" + std::to_string(*ve.auroc) : std::string());
        plot.first_frame_index = cfg.t;
        for (const auto& r : ve.series.records) {
            plot.values.push_back(r.smoothed);
            if (r.label) plot.labels.push_back(*r.label);
        }
        write_curve_plot(plot, fs::path(cfg.out_dir) / ("curve_" + ve.video_id));
    }
    {
        // per-video heat map grids from the argmax objects
        std::map<std::string, std::vector<Tensor>> maps_by_video;
        std::map<std::string, std::map<int64_t, std::pair<double, size_t>>> best;
        for (size_t i = 0; i < test_ds.samples.size(); ++i) {
            const auto& s = test_ds.samples[i];
            double f = fuse(test_cues.s_r[i], test_cues.s_p[i], result.stats);
            auto& slot = best[s.video_id];
            auto it = slot.find(s.frame_index);
            if (it == slot.end() || f > it->second.first)
                slot[s.frame_index] = {f, i};
        }
        for (auto& [video_id, frames] : best) {
            std::vector<Tensor> tiles;
            size_t stride = std::max<size_t>(1, frames.size() / 64);
            size_t j = 0;
            for (auto& [frame_index, pick] : frames) {
                if (j++ % stride == 0) tiles.push_back(error_maps[pick.second]);
            }
            if (!tiles.empty())
                write_png(compose_grid(tiles, 8),
                          fs::path(cfg.out_dir) / ("heatmap_" + video_id + ".png"));
        }
    }
    return result;
}

// Appendix-style sweep over the number of reconstructed flows fed to the
// predictor: trains one predictor per k and evaluates each.
struct SweepEntry {
    int k = 0;
    std::optional<double> auroc;
    fs::path ckpt_dir;
};

inline std::vector<SweepEntry> flow_count_sweep(RunConfig cfg, const fs::path& recon_ckpt_dir) {
    std::vector<SweepEntry> out;
    for (int k = 1; k <= cfg.t; ++k) {
        RunConfig c = cfg;
        c.recon_flow_count = k;
        TrainResult tr = train_pred(c, recon_ckpt_dir);
        RunConfig ec = c;
        ec.out_dir = (fs::path(cfg.out_dir) / ("sweep_eval_k" + std::to_string(k))).string();
        EvalResult ev = evaluate(ec, recon_ckpt_dir, tr.ckpt_dir);
        out.push_back(SweepEntry{k, ev.auroc_hybrid, tr.ckpt_dir});
    }
    return out;
}

}  // namespace hf2vad
