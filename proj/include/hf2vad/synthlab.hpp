#pragma once

// Desk-scale verification beds.
//
// gen_synthetic: deterministic videos of flat-textured sprites moving with
// constant integer per-track velocity over a black background. Ground-truth
// flow at every pixel covered by a sprite equals that sprite's per-frame
// displacement (channel 0 = x, channel 1 = y), zero elsewhere, so warping a
// frame by its flow reproduces the next frame up to sprite-border
// rasterization. Test videos carry one anomalous sprite each.
//
// run_mnist_toy: trains reconstruction variants on digit-2 images only and
// scores the full held-out split, treating other digits as anomalies.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hf2vad/plot.hpp"
#include "hf2vad/reconnet.hpp"
#include "hf2vad/scoring.hpp"
#include "hf2vad/tensorstore.hpp"

namespace hf2vad {

// ---------------------------------------------------------------------------
// synthetic sprite benchmark

enum class AnomalyType { speed, reverse, teleport };

inline std::string anomaly_name(AnomalyType t) {
    switch (t) {
        case AnomalyType::speed: return "speed";
        case AnomalyType::reverse: return "reverse";
        case AnomalyType::teleport: return "teleport";
    }
    throw ConfigError("unknown anomaly type");
}

struct AnomalyInterval {
    int64_t start = 0;  // first labeled frame
    int64_t end = 0;    // last labeled frame, inclusive
    AnomalyType type = AnomalyType::speed;
};

struct SynthConfig {
    uint64_t seed = 7;
    int frame_size = 128;
    int sprite_count = 2;
    int min_speed = 1;  // px/frame, per axis max
    int max_speed = 2;
    int video_length = 40;
    int train_videos = 8;
    int test_videos = 4;
    AnomalyType anomaly = AnomalyType::speed;
    int speed_factor = 4;     // speed anomaly multiplier
    int anomaly_length = 10;  // labeled frames per test video
};

namespace detail {

struct Sprite {
    bool circle = false;
    int size = 10;  // box side (rect) or diameter (circle)
    float intensity = 0.8f;
    int vx = 1, vy = 0;
    // per-frame integer positions (top-left corner), length = video_length
    std::vector<int> xs, ys;
};

inline void rasterize(const Sprite& s, int frame, Tensor& img) {
    int64_t hw = img.dim(1);
    int x0 = s.xs[static_cast<size_t>(frame)], y0 = s.ys[static_cast<size_t>(frame)];
    float r = s.size / 2.0f;
    for (int y = y0; y < y0 + s.size; ++y)
        for (int x = x0; x < x0 + s.size; ++x) {
            if (x < 0 || y < 0 || x >= hw || y >= hw) continue;
            if (s.circle) {
                float dx = x - x0 - r + 0.5f, dy = y - y0 - r + 0.5f;
                if (dx * dx + dy * dy > r * r) continue;
            }
            img.at({0, y, x}) = s.intensity;
        }
}

inline bool covers(const Sprite& s, int frame, int x, int y) {
    int x0 = s.xs[static_cast<size_t>(frame)], y0 = s.ys[static_cast<size_t>(frame)];
    if (x < x0 || y < y0 || x >= x0 + s.size || y >= y0 + s.size) return false;
    if (s.circle) {
        float r = s.size / 2.0f;
        float dx = x - x0 - r + 0.5f, dy = y - y0 - r + 0.5f;
        return dx * dx + dy * dy <= r * r;
    }
    return true;
}

}  // namespace detail

// Builds one video's sprites with deterministic trajectories that remain in
// bounds for the whole clip (anomalous motion included).
inline std::vector<detail::Sprite> plan_video(const SynthConfig& cfg, Rng& rng, bool test_split,
                                              const std::vector<AnomalyInterval>& events,
                                              int anomalous_sprite) {
    std::vector<detail::Sprite> sprites;
    for (int si = 0; si < cfg.sprite_count; ++si) {
        detail::Sprite s;
        for (int attempt = 0;; ++attempt) {
            if (attempt > 200)
                throw ConfigError("plan_video: cannot fit trajectory; reduce speed or length");
            s.circle = rng.index(2) == 1;
            s.size = 8 + static_cast<int>(rng.index(6));
            s.intensity = 0.4f + 0.55f * rng.uniform();
            auto speed = [&] {
                int v = cfg.min_speed + static_cast<int>(
                            rng.index(static_cast<uint64_t>(cfg.max_speed - cfg.min_speed + 1)));
                return rng.index(2) ? v : -v;
            };
            s.vx = speed();
            s.vy = speed();
            int x = static_cast<int>(rng.index(static_cast<uint64_t>(cfg.frame_size - s.size)));
            int y = static_cast<int>(rng.index(static_cast<uint64_t>(cfg.frame_size - s.size)));
            s.xs.assign(static_cast<size_t>(cfg.video_length), 0);
            s.ys.assign(static_cast<size_t>(cfg.video_length), 0);
            bool ok = true;
            for (int f = 0; f < cfg.video_length; ++f) {
                s.xs[static_cast<size_t>(f)] = x;
                s.ys[static_cast<size_t>(f)] = y;
                if (x < 0 || y < 0 || x + s.size > cfg.frame_size ||
                    y + s.size > cfg.frame_size) {
                    ok = false;
                    break;
                }
                int dx = s.vx, dy = s.vy;
                if (test_split && si == anomalous_sprite) {
                    for (const auto& ev : events) {
                        if (f < ev.start || f >= ev.end) continue;  // steps start..end-1
                        switch (ev.type) {
                            case AnomalyType::speed:
                                dx *= cfg.speed_factor;
                                dy *= cfg.speed_factor;
                                break;
                            case AnomalyType::reverse:
                                dx = -dx;
                                dy = -dy;
                                break;
                            case AnomalyType::teleport:
                                if (f == ev.start) {
                                    dx += 3 * s.size;
                                    dy += 2 * s.size;
                                }
                                break;
                        }
                    }
                }
                x += dx;
                y += dy;
            }
            if (ok) break;
        }
        sprites.push_back(std::move(s));
    }
    return sprites;
}

struct SynthResult {
    fs::path train_manifest;
    fs::path test_manifest;
};

inline SynthResult gen_synthetic(const SynthConfig& cfg, const fs::path& out_dir) {
    if (cfg.frame_size < 24 || cfg.video_length < 8)
        throw ConfigError("gen_synthetic: frame size or video length too small");
    if (cfg.min_speed < 1 || cfg.max_speed < cfg.min_speed)
        throw ConfigError("gen_synthetic: bad speed range");

    Rng root(cfg.seed);
    SynthResult result;
    for (int split = 0; split < 2; ++split) {
        bool test_split = split == 1;
        DatasetManifest manifest;
        manifest.root = out_dir;
        int n_videos = test_split ? cfg.test_videos : cfg.train_videos;
        for (int vid = 0; vid < n_videos; ++vid) {
            std::string video_id =
                (test_split ? std::string("test_") : std::string("train_")) + std::to_string(vid);
            Rng rng = root.fork((static_cast<uint64_t>(split) << 32) ^
                                static_cast<uint64_t>(vid));

            std::vector<AnomalyInterval> events;
            int anomalous_sprite = 0;
            if (test_split) {
                AnomalyInterval ev;
                ev.type = cfg.anomaly;
                int span = cfg.anomaly_length;
                int margin = 6;
                ev.start = margin + static_cast<int64_t>(rng.index(static_cast<uint64_t>(
                                        std::max(1, cfg.video_length - span - 2 * margin))));
                ev.end = ev.start + span - 1;
                events.push_back(ev);
                anomalous_sprite = static_cast<int>(rng.index(
                    static_cast<uint64_t>(cfg.sprite_count)));
                for (size_t i = 1; i < events.size(); ++i)
                    if (events[i].start <= events[i - 1].end)
                        throw ConfigError("gen_synthetic: overlapping anomaly intervals");
            }

            auto sprites = plan_video(cfg, rng, test_split, events, anomalous_sprite);

            VideoEntry entry;
            entry.video_id = video_id;
            int hw = cfg.frame_size;
            for (int f = 0; f < cfg.video_length; ++f) {
                Tensor frame({1, hw, hw});
                for (const auto& s : sprites) detail::rasterize(s, f, frame);
                std::string rel = video_id + "/frames/" + std::to_string(f) + ".png";
                write_png(frame, out_dir / rel);
                entry.frames.push_back(rel);

                std::vector<Box> boxes;
                for (const auto& s : sprites)
                    boxes.push_back(Box{s.xs[static_cast<size_t>(f)],
                                        s.ys[static_cast<size_t>(f)],
                                        s.xs[static_cast<size_t>(f)] + s.size,
                                        s.ys[static_cast<size_t>(f)] + s.size});
                entry.boxes.push_back(std::move(boxes));

                if (test_split) {
                    int label = 0;
                    for (const auto& ev : events)
                        if (f >= ev.start && f <= ev.end) label = 1;
                    entry.labels.push_back(label);
                }
            }
            for (int f = 0; f + 1 < cfg.video_length; ++f) {
                Tensor flow({2, hw, hw});
                // painter's order: later sprites overwrite earlier at overlaps,
                // matching the rendering order
                for (const auto& s : sprites) {
                    int dx = s.xs[static_cast<size_t>(f + 1)] - s.xs[static_cast<size_t>(f)];
                    int dy = s.ys[static_cast<size_t>(f + 1)] - s.ys[static_cast<size_t>(f)];
                    int x0 = s.xs[static_cast<size_t>(f)], y0 = s.ys[static_cast<size_t>(f)];
                    for (int y = y0; y < y0 + s.size; ++y)
                        for (int x = x0; x < x0 + s.size; ++x) {
                            if (x < 0 || y < 0 || x >= hw || y >= hw) continue;
                            if (!detail::covers(s, f, x, y)) continue;
                            flow.at({0, y, x}) = static_cast<float>(dx);
                            flow.at({1, y, x}) = static_cast<float>(dy);
                        }
                }
                std::string rel = video_id + "/flows/" + std::to_string(f) + ".hf2t";
                write_tensor(flow, out_dir / rel);
                entry.flows.push_back(rel);
            }
            manifest.videos.push_back(std::move(entry));
        }
        fs::path mpath = out_dir / (test_split ? "test.jsonl" : "train.jsonl");
        manifest.validate(test_split);
        save_manifest(manifest, mpath);
        (test_split ? result.test_manifest : result.train_manifest) = mpath;
    }
    return result;
}

// ---------------------------------------------------------------------------
// MNIST loading (standard IDX files)

struct DigitData {
    std::vector<Tensor> images;  // (1,28,28), values in [0,1]
    std::vector<int> labels;
};

namespace detail {

inline uint32_t read_u32be(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) << 24 | static_cast<uint32_t>(p[1]) << 16 |
           static_cast<uint32_t>(p[2]) << 8 | static_cast<uint32_t>(p[3]);
}

}  // namespace detail

inline DigitData load_mnist_idx(const fs::path& dir, bool train) {
    fs::path img_path = dir / (train ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte");
    fs::path lbl_path = dir / (train ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte");
    auto img_bytes = read_file_bytes(img_path);
    auto lbl_bytes = read_file_bytes(lbl_path);
    if (img_bytes.size() < 16 || detail::read_u32be(img_bytes.data()) != 2051)
        throw FormatError("not an IDX image file: " + img_path.string());
    if (lbl_bytes.size() < 8 || detail::read_u32be(lbl_bytes.data()) != 2049)
        throw FormatError("not an IDX label file: " + lbl_path.string());
    uint32_t n = detail::read_u32be(img_bytes.data() + 4);
    uint32_t rows = detail::read_u32be(img_bytes.data() + 8);
    uint32_t cols = detail::read_u32be(img_bytes.data() + 12);
    if (rows != 28 || cols != 28) throw FormatError("expected 28x28 digit images");
    if (detail::read_u32be(lbl_bytes.data() + 4) != n)
        throw FormatError("image/label count mismatch");
    if (img_bytes.size() < 16 + static_cast<size_t>(n) * 784)
        throw CorruptionError("truncated IDX image payload");
    DigitData out;
    out.images.reserve(n);
    out.labels.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        Tensor img({1, 28, 28});
        const unsigned char* src = img_bytes.data() + 16 + static_cast<size_t>(i) * 784;
        for (int64_t j = 0; j < 784; ++j) img[j] = static_cast<float>(src[j]) / 255.0f;
        out.images.push_back(std::move(img));
        out.labels.push_back(lbl_bytes[8 + i]);
    }
    return out;
}

// zero-pad 28x28 to 32x32 so four stride-2 levels divide evenly
inline Tensor pad_digit_to_32(const Tensor& img) {
    Tensor out({1, 32, 32});
    for (int64_t y = 0; y < 28; ++y)
        for (int64_t x = 0; x < 28; ++x) out.at({0, y + 2, x + 2}) = img.at({0, y, x});
    return out;
}

// integer translation with zero fill, for topping up small training pools
inline Tensor shift_digit(const Tensor& img, int dx, int dy) {
    Tensor out(img.shape());
    int64_t h = img.dim(1), w = img.dim(2);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            int64_t sy = y - dy, sx = x - dx;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
            out.at({0, y, x}) = img.at({0, sy, sx});
        }
    return out;
}

// ---------------------------------------------------------------------------
// MNIST toy ablation

struct ToyOptions {
    std::vector<char> variants = {'a', 'c', 'f'};
    int epochs = 10;
    int subset_size = 2000;
    uint64_t seed = 1;
    int batch_size = 128;
    float lr = 1e-3f;
    std::vector<int64_t> base_channels = {16, 32, 64, 128};
    int64_t slot_count = 64;
    float lambda_recon = 1.0f;
    float lambda_ent = 2e-4f;
    int normal_digit = 2;
    fs::path data_dir;
    fs::path out_dir;
};

struct ToyVariantReport {
    char variant = '?';
    double auroc = 0.0;
    double mean_normal_error = 0.0;
    double mean_abnormal_error = 0.0;
    double error_ratio = 0.0;  // abnormal / normal
    std::string grid_path;
    std::vector<double> epoch_losses;
};

struct ToyReport {
    std::vector<ToyVariantReport> variants;
    uint64_t seed = 0;

    const ToyVariantReport& variant(char v) const {
        for (const auto& r : variants)
            if (r.variant == v) return r;
        throw ConfigError(std::string("variant not in report: ") + v);
    }
};

inline nlohmann::json toy_report_json(const ToyReport& report) {
    nlohmann::json j;
    j["seed"] = report.seed;
    j["variants"] = nlohmann::json::array();
    for (const auto& r : report.variants) {
        nlohmann::json v;
        v["variant"] = std::string(1, r.variant);
        v["auroc"] = r.auroc;
        v["mean_normal_error"] = r.mean_normal_error;
        v["mean_abnormal_error"] = r.mean_abnormal_error;
        v["error_ratio"] = r.error_ratio;
        v["grid"] = r.grid_path;
        v["epoch_losses"] = r.epoch_losses;
        j["variants"].push_back(v);
    }
    return j;
}

namespace detail {

inline Tensor stack_images(const std::vector<Tensor>& images, const std::vector<size_t>& idx,
                           size_t lo, size_t hi) {
    int64_t b = static_cast<int64_t>(hi - lo);
    Tensor out({b, 1, 32, 32});
    for (size_t i = lo; i < hi; ++i)
        std::memcpy(out.data() + static_cast<int64_t>(i - lo) * 1024,
                    images[idx[i]].data(), 1024 * 4);
    return out;
}

}  // namespace detail

inline ToyReport run_mnist_toy(const ToyOptions& opt) {
    for (char v : opt.variants) variant_from_letter(v);  // validates early
    DigitData train = load_mnist_idx(opt.data_dir, true);
    DigitData test = load_mnist_idx(opt.data_dir, false);

    // digit-"normal" training pool, padded; topped up with shifted copies when
    // the corpus has fewer unique images than requested
    Rng data_rng(opt.seed * 7919 + 13);
    std::vector<Tensor> pool;
    for (size_t i = 0; i < train.images.size(); ++i)
        if (train.labels[i] == opt.normal_digit) pool.push_back(pad_digit_to_32(train.images[i]));
    if (pool.empty()) throw DatasetError("run_mnist_toy: no images of the normal digit");
    size_t unique_count = pool.size();
    while (pool.size() < static_cast<size_t>(opt.subset_size)) {
        const Tensor& src = pool[data_rng.index(unique_count)];
        int dx = static_cast<int>(data_rng.index(5)) - 2;
        int dy = static_cast<int>(data_rng.index(5)) - 2;
        pool.push_back(shift_digit(src, dx, dy));
    }
    pool.resize(static_cast<size_t>(opt.subset_size));

    std::vector<Tensor> test_images;
    test_images.reserve(test.images.size());
    for (const auto& img : test.images) test_images.push_back(pad_digit_to_32(img));
    std::vector<int> test_anomaly(test.labels.size());
    for (size_t i = 0; i < test.labels.size(); ++i)
        test_anomaly[i] = test.labels[i] == opt.normal_digit ? 0 : 1;

    // fixed probe digits shared by every variant's grid
    std::vector<size_t> probes;
    for (size_t i = 0; i < test.labels.size() && probes.size() < 8; ++i)
        if (test.labels[i] == opt.normal_digit) probes.push_back(i);
    for (size_t i = 0; i < test.labels.size() && probes.size() < 16; ++i)
        if (test.labels[i] != opt.normal_digit) probes.push_back(i);

    ToyReport report;
    report.seed = opt.seed;
    for (char vc : opt.variants) {
        ReconConfig cfg;
        cfg.variant = variant_from_letter(vc);
        cfg.levels = 4;
        cfg.in_channels = 1;
        cfg.base_channels = opt.base_channels;
        cfg.slot_count = opt.slot_count;
        cfg.lambda_recon = opt.lambda_recon;
        cfg.lambda_ent = opt.lambda_ent;
        ReconModel model(cfg, opt.seed);
        ParamList entries = model.named_entries();
        Adam optim(entries.params);

        ToyVariantReport vr;
        vr.variant = vc;
        Rng shuffle_rng(opt.seed ^ 0x5eedf00dull ^ static_cast<uint64_t>(vc));
        std::vector<size_t> order(pool.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;

        model.set_training(true);
        for (int epoch = 0; epoch < opt.epochs; ++epoch) {
            shuffle(order.begin(), order.end(), shuffle_rng);
            double epoch_loss = 0.0;
            int64_t batches = 0;
            for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(opt.batch_size)) {
                size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(opt.batch_size));
                Value batch = make_leaf(detail::stack_images(pool, order, b0, b1));
                optim.zero_grad();
                ReconForward fwd = model.forward(batch);
                Value loss = total_recon_loss(batch, fwd, cfg.lambda_recon, cfg.lambda_ent);
                backward(loss);
                optim.step(opt.lr);
                epoch_loss += loss->value[0];
                ++batches;
            }
            vr.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));
        }

        // score the full held-out split
        model.set_training(false);
        NoGradGuard ng;
        std::vector<double> errors(test_images.size());
        std::vector<size_t> all_idx(test_images.size());
        for (size_t i = 0; i < all_idx.size(); ++i) all_idx[i] = i;
        const size_t eval_batch = 256;
        for (size_t b0 = 0; b0 < test_images.size(); b0 += eval_batch) {
            size_t b1 = std::min(test_images.size(), b0 + eval_batch);
            Value batch = make_leaf(detail::stack_images(test_images, all_idx, b0, b1));
            ReconForward fwd = model.forward(batch);
            for (size_t i = b0; i < b1; ++i) {
                double acc = 0.0;
                const float* in = batch->value.data() + static_cast<int64_t>(i - b0) * 1024;
                const float* out = fwd.y_hat->value.data() + static_cast<int64_t>(i - b0) * 1024;
                for (int64_t j = 0; j < 1024; ++j) {
                    double d = static_cast<double>(in[j]) - out[j];
                    acc += d * d;
                }
                errors[i] = acc / 1024.0;
            }
        }
        vr.auroc = auroc(errors, test_anomaly);
        double sn = 0.0, sa = 0.0;
        int64_t nn = 0, na = 0;
        for (size_t i = 0; i < errors.size(); ++i) {
            if (test_anomaly[i]) {
                sa += errors[i];
                ++na;
            } else {
                sn += errors[i];
                ++nn;
            }
        }
        vr.mean_normal_error = sn / static_cast<double>(nn);
        vr.mean_abnormal_error = sa / static_cast<double>(na);
        vr.error_ratio = vr.mean_abnormal_error / vr.mean_normal_error;

        if (!opt.out_dir.empty()) {
            std::vector<Tensor> tiles;
            Tensor probe_batch({static_cast<int64_t>(probes.size()), 1, 32, 32});
            for (size_t i = 0; i < probes.size(); ++i)
                std::memcpy(probe_batch.data() + static_cast<int64_t>(i) * 1024,
                            test_images[probes[i]].data(), 1024 * 4);
            ReconForward fwd = model.forward(make_leaf(probe_batch));
            for (size_t i = 0; i < probes.size(); ++i)
                tiles.push_back(Tensor({1, 32, 32},
                                       std::vector<float>(probe_batch.data() + i * 1024,
                                                          probe_batch.data() + (i + 1) * 1024)));
            for (size_t i = 0; i < probes.size(); ++i)
                tiles.push_back(Tensor(
                    {1, 32, 32},
                    std::vector<float>(fwd.y_hat->value.data() + i * 1024,
                                       fwd.y_hat->value.data() + (i + 1) * 1024)));
            Tensor grid = compose_grid(tiles, static_cast<int>(probes.size()));
            fs::path grid_path =
                opt.out_dir / (std::string("toy_grid_") + vc + "_seed" +
                               std::to_string(opt.seed) + ".png");
            write_png(grid, grid_path);
            vr.grid_path = grid_path.string();
        }
        report.variants.push_back(std::move(vr));
    }
    if (!opt.out_dir.empty()) {
        fs::path json_path = opt.out_dir / ("toy_report_seed" + std::to_string(opt.seed) + ".json");
        write_file_bytes(json_path, toy_report_json(report).dump(2) + "\n");
    }
    return report;
}

}  // namespace hf2vad
