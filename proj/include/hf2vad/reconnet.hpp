#pragma once

// ML-MemAE-SC flow reconstruction network and its architecture variants.
//
// Levels are numbered 1 (outermost, full resolution) to L (bottleneck).
// Encoder level: two conv blocks, then a stride-2 conv into the next level.
// Decoder level: [concat skip] -> two conv blocks -> [memory] -> stride-2
// deconv up. The outermost level has no skip in any variant; requesting one
// is a configuration error. Memory width follows the level width.

#include <array>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "hf2vad/nn.hpp"

namespace hf2vad {

enum class ReconVariant { memae, ml_memae, memae_sc_all, ml_memae_sc_all, two_mem_one_skip, three_mem_two_skip };

inline char variant_letter(ReconVariant v) {
    switch (v) {
        case ReconVariant::memae: return 'a';
        case ReconVariant::ml_memae: return 'b';
        case ReconVariant::memae_sc_all: return 'c';
        case ReconVariant::ml_memae_sc_all: return 'd';
        case ReconVariant::two_mem_one_skip: return 'e';
        case ReconVariant::three_mem_two_skip: return 'f';
    }
    throw ConfigError("unknown variant");
}

inline ReconVariant variant_from_letter(char c) {
    switch (c) {
        case 'a': return ReconVariant::memae;
        case 'b': return ReconVariant::ml_memae;
        case 'c': return ReconVariant::memae_sc_all;
        case 'd': return ReconVariant::ml_memae_sc_all;
        case 'e': return ReconVariant::two_mem_one_skip;
        case 'f': return ReconVariant::three_mem_two_skip;
    }
    throw ConfigError(std::string("unknown variant letter '") + c + "'");
}

struct ReconConfig {
    ReconVariant variant = ReconVariant::three_mem_two_skip;
    int levels = 4;
    int64_t in_channels = 8;                           // t=4 flows x 2 channels
    std::vector<int64_t> base_channels = {32, 64, 128, 256};
    int64_t slot_count = 2000;
    float lambda_recon = 1.0f;
    float lambda_ent = 2e-4f;
    float shrink_threshold = 0.0f;  // optional hard shrinkage, off by default
    // explicit placement overrides; empty means "derive from variant"
    std::vector<int> memory_levels_override;
    std::vector<int> skip_levels_override;
};

// Memory placement by level (1 = outermost decoder level, levels = bottleneck).
inline std::set<int> memory_levels(const ReconConfig& cfg) {
    if (!cfg.memory_levels_override.empty())
        return {cfg.memory_levels_override.begin(), cfg.memory_levels_override.end()};
    int L = cfg.levels;
    switch (cfg.variant) {
        case ReconVariant::memae:
        case ReconVariant::memae_sc_all:
            return {L};
        case ReconVariant::ml_memae:
        case ReconVariant::ml_memae_sc_all: {
            std::set<int> s;
            for (int l = 1; l <= L; ++l) s.insert(l);
            return s;
        }
        case ReconVariant::two_mem_one_skip:
            return {L, L - 1};
        case ReconVariant::three_mem_two_skip:
            return {L, L - 1, L - 2};
    }
    throw ConfigError("unknown variant");
}

// Skip placement by level. Level 1 (outermost) is never constructible.
inline std::set<int> skip_levels(const ReconConfig& cfg) {
    std::set<int> s;
    if (!cfg.skip_levels_override.empty()) {
        s.insert(cfg.skip_levels_override.begin(), cfg.skip_levels_override.end());
        return s;
    }
    int L = cfg.levels;
    switch (cfg.variant) {
        case ReconVariant::memae:
        case ReconVariant::ml_memae:
            return {};
        case ReconVariant::memae_sc_all:
        case ReconVariant::ml_memae_sc_all:
            for (int l = 2; l < L; ++l) s.insert(l);
            return s;
        case ReconVariant::two_mem_one_skip:
            return {L - 1};
        case ReconVariant::three_mem_two_skip:
            return {L - 1, L - 2};
    }
    throw ConfigError("unknown variant");
}

inline void validate(const ReconConfig& cfg) {
    if (cfg.levels < 2) throw ConfigError("reconnet: at least 2 levels required");
    if (static_cast<int>(cfg.base_channels.size()) != cfg.levels)
        throw ConfigError("reconnet: base_channels must list one width per level");
    if (cfg.slot_count < 1) throw ConfigError("reconnet: slot_count must be >= 1");
    if (cfg.lambda_recon < 0.0f || cfg.lambda_ent < 0.0f)
        throw ConfigError("reconnet: loss weights must be nonnegative");
    auto mems = memory_levels(cfg);
    auto skips = skip_levels(cfg);
    for (int l : mems)
        if (l < 1 || l > cfg.levels)
            throw ConfigError("reconnet: memory level " + std::to_string(l) +
                              " outside 1.." + std::to_string(cfg.levels));
    for (int l : skips) {
        if (l == 1)
            throw ConfigError(
                "reconnet: the outermost skip connection is not constructible; it would "
                "override every memory module");
        if (l < 2 || l >= cfg.levels)
            throw ConfigError("reconnet: skip level " + std::to_string(l) +
                              " outside 2.." + std::to_string(cfg.levels - 1));
    }
    if (mems.empty()) throw ConfigError("reconnet: at least one memory module required");
    if ((cfg.variant == ReconVariant::two_mem_one_skip && cfg.levels < 3) ||
        (cfg.variant == ReconVariant::three_mem_two_skip && cfg.levels < 4))
        throw ConfigError("reconnet: variant needs more levels than configured");
}

struct ReconForward {
    Value y_hat;                 // same shape as the input
    std::vector<Value> weights;  // one (rows,N) node per memory module
};

class ReconModel {
public:
    explicit ReconModel(const ReconConfig& cfg, uint64_t seed = 1) : cfg_(cfg) {
        validate(cfg);
        Rng rng(seed);
        int L = cfg.levels;
        const auto& ch = cfg.base_channels;
        mems_at_ = memory_levels(cfg);
        skips_at_ = skip_levels(cfg);

        enc1_.resize(static_cast<size_t>(L));
        enc2_.resize(static_cast<size_t>(L));
        for (int l = 1; l <= L; ++l) {
            int64_t cin = l == 1 ? cfg.in_channels : ch[static_cast<size_t>(l - 1)];
            int64_t cw = ch[static_cast<size_t>(l - 1)];
            enc1_[static_cast<size_t>(l - 1)] = ConvBlock(cin, cw, rng);
            enc2_[static_cast<size_t>(l - 1)] = ConvBlock(cw, cw, rng);
        }
        down_conv_.resize(static_cast<size_t>(L - 1));
        down_bn_.resize(static_cast<size_t>(L - 1));
        for (int l = 1; l < L; ++l) {
            down_conv_[static_cast<size_t>(l - 1)] =
                Conv2d(ch[static_cast<size_t>(l - 1)], ch[static_cast<size_t>(l)], 3, 2, 1,
                       /*bias=*/false, rng);
            down_bn_[static_cast<size_t>(l - 1)] = BatchNorm2d(ch[static_cast<size_t>(l)]);
        }

        for (int l : mems_at_)
            mems_.emplace(l, MemoryModule(cfg.slot_count, ch[static_cast<size_t>(l - 1)], rng,
                                          cfg.shrink_threshold));

        up_conv_.resize(static_cast<size_t>(L - 1));
        up_bn_.resize(static_cast<size_t>(L - 1));
        for (int l = L; l > 1; --l) {
            up_conv_[static_cast<size_t>(l - 2)] =
                ConvTranspose2d(ch[static_cast<size_t>(l - 1)], ch[static_cast<size_t>(l - 2)],
                                rng);
            up_bn_[static_cast<size_t>(l - 2)] = BatchNorm2d(ch[static_cast<size_t>(l - 2)]);
        }
        dec1_.resize(static_cast<size_t>(L - 1));
        dec2_.resize(static_cast<size_t>(L - 1));
        for (int l = L - 1; l >= 1; --l) {
            int64_t cw = ch[static_cast<size_t>(l - 1)];
            int64_t cin = skips_at_.count(l) ? 2 * cw : cw;
            dec1_[static_cast<size_t>(l - 1)] = ConvBlock(cin, cw, rng);
            dec2_[static_cast<size_t>(l - 1)] = ConvBlock(cw, cw, rng);
        }
        out_conv_ = Conv2d(ch[0], cfg.in_channels, 3, 1, 1, /*bias=*/true, rng);
    }

    const ReconConfig& config() const { return cfg_; }
    int memory_count() const { return static_cast<int>(mems_.size()); }
    void set_training(bool t) { training_ = t; }
    bool training() const { return training_; }

    // (H,W,C) per encoder level, recorded during the last forward
    const std::vector<std::array<int64_t, 3>>& encoder_shapes() const { return enc_shapes_; }

    ReconForward forward(const Value& y) {
        const Tensor& Y = y->value;
        if (Y.ndim() != 4 || Y.dim(1) != cfg_.in_channels)
            throw ShapeError("reconnet: expected (B," + std::to_string(cfg_.in_channels) +
                             ",H,W), got " + shape_str(Y.shape()));
        int64_t div = int64_t{1} << (cfg_.levels - 1);
        if (Y.dim(2) % div != 0 || Y.dim(3) % div != 0)
            throw ShapeError("reconnet: spatial dims must be divisible by " + std::to_string(div));

        int L = cfg_.levels;
        enc_shapes_.clear();
        std::vector<Value> enc(static_cast<size_t>(L));
        Value h = y;
        for (int l = 1; l <= L; ++l) {
            h = enc1_[static_cast<size_t>(l - 1)](h, training_);
            h = enc2_[static_cast<size_t>(l - 1)](h, training_);
            enc[static_cast<size_t>(l - 1)] = h;
            enc_shapes_.push_back({h->value.dim(2), h->value.dim(3), h->value.dim(1)});
            if (l < L)
                h = down_bn_[static_cast<size_t>(l - 1)](
                    down_conv_[static_cast<size_t>(l - 1)](h), training_, true);
        }

        ReconForward out;
        // bottleneck memory
        if (auto it = mems_.find(L); it != mems_.end()) {
            MemoryForward mf = it->second(h);
            h = mf.out;
            out.weights.push_back(mf.weights);
        }
        for (int l = L - 1; l >= 1; --l) {
            h = up_bn_[static_cast<size_t>(l - 1)](
                up_conv_[static_cast<size_t>(l - 1)](h), training_, true);
            if (skips_at_.count(l))
                h = concat_channels({enc[static_cast<size_t>(l - 1)], h});
            h = dec1_[static_cast<size_t>(l - 1)](h, training_);
            h = dec2_[static_cast<size_t>(l - 1)](h, training_);
            if (auto it = mems_.find(l); it != mems_.end()) {
                MemoryForward mf = it->second(h);
                h = mf.out;
                out.weights.push_back(mf.weights);
            }
        }
        out.y_hat = out_conv_(h);
        return out;
    }

    ParamList named_entries() {
        ParamList out;
        int L = cfg_.levels;
        for (int l = 1; l <= L; ++l) {
            std::string p = "enc" + std::to_string(l);
            enc1_[static_cast<size_t>(l - 1)].collect(p + ".block1", out);
            enc2_[static_cast<size_t>(l - 1)].collect(p + ".block2", out);
        }
        for (int l = 1; l < L; ++l) {
            std::string p = "down" + std::to_string(l);
            down_conv_[static_cast<size_t>(l - 1)].collect(p + ".conv", out);
            down_bn_[static_cast<size_t>(l - 1)].collect(p + ".bn", out);
        }
        for (auto& [l, mem] : mems_) mem.collect("mem" + std::to_string(l), out);
        for (int l = 1; l < L; ++l) {
            std::string p = "up" + std::to_string(l);
            up_conv_[static_cast<size_t>(l - 1)].collect(p + ".deconv", out);
            up_bn_[static_cast<size_t>(l - 1)].collect(p + ".bn", out);
        }
        for (int l = 1; l < L; ++l) {
            std::string p = "dec" + std::to_string(l);
            dec1_[static_cast<size_t>(l - 1)].collect(p + ".block1", out);
            dec2_[static_cast<size_t>(l - 1)].collect(p + ".block2", out);
        }
        out_conv_.collect("out", out);
        return out;
    }

private:
    ReconConfig cfg_;
    bool training_ = true;
    std::set<int> mems_at_, skips_at_;
    std::vector<ConvBlock> enc1_, enc2_;
    std::vector<Conv2d> down_conv_;
    std::vector<BatchNorm2d> down_bn_;
    std::map<int, MemoryModule> mems_;
    std::vector<ConvTranspose2d> up_conv_;
    std::vector<BatchNorm2d> up_bn_;
    std::vector<ConvBlock> dec1_, dec2_;
    Conv2d out_conv_;
    std::vector<std::array<int64_t, 3>> enc_shapes_;
};

// Eq. 1 as a per-element mean of squared differences.
inline Value recon_loss(const Value& y, const Value& y_hat) { return mse_mean(y, y_hat); }

// Eq. 3: lambda_recon * L_recon + lambda_ent * L_ent.
inline Value total_recon_loss(const Value& y, const ReconForward& out, float lambda_recon,
                              float lambda_ent) {
    if (lambda_recon < 0.0f || lambda_ent < 0.0f)
        throw ConfigError("total_recon_loss: weights must be nonnegative");
    Value loss = scale(recon_loss(y, out.y_hat), lambda_recon);
    if (lambda_ent > 0.0f && !out.weights.empty())
        loss = add(loss, scale(entropy_loss(out.weights), lambda_ent));
    return loss;
}

}  // namespace hf2vad
