#pragma once

// Flow-conditioned CVAE for future frame prediction. Encoder E consumes the
// flow cube and yields the conditional prior; encoder F consumes frames plus
// flows and yields the posterior; the decoder combines sampled latents with
// the flow conditions and F-side skip connections. Latent variables live at
// the last two bottleneck levels as spatial maps.

#include <array>
#include <string>
#include <vector>

#include "hf2vad/nn.hpp"

namespace hf2vad {

struct PredConfig {
    int t = 4;
    int64_t frame_channels = 3;
    int levels = 4;
    std::vector<int64_t> base_channels = {64, 128, 128, 128};
    int64_t z_channels = 64;
    float lambda_cvae = 1.0f;
    float lambda_gd = 1.0f;
    float logvar_clamp = 10.0f;
};

inline void validate(const PredConfig& cfg) {
    if (cfg.t < 1) throw ConfigError("prednet: t must be >= 1");
    if (cfg.levels < 2) throw ConfigError("prednet: at least 2 levels required");
    if (static_cast<int>(cfg.base_channels.size()) != cfg.levels)
        throw ConfigError("prednet: base_channels must list one width per level");
    if (cfg.z_channels < 1) throw ConfigError("prednet: z_channels must be >= 1");
    if (cfg.lambda_cvae < 0.0f || cfg.lambda_gd < 0.0f)
        throw ConfigError("prednet: loss weights must be nonnegative");
}

struct GaussianLevel {
    Value mean;
    Value logvar;  // clamped to [-clamp, clamp]
};
using GaussianParams = std::vector<GaussianLevel>;

// z = mean (deterministic) or mean + sigma*eps (stochastic, seeded generator)
inline std::vector<Value> sample_latents(const GaussianParams& params, bool stochastic,
                                         Rng* rng) {
    std::vector<Value> z;
    for (const auto& lvl : params) {
        if (stochastic) {
            if (rng == nullptr) throw ConfigError("stochastic sampling requires a generator");
            Tensor eps(lvl.mean->value.shape());
            for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = rng->normal();
            z.push_back(gaussian_sample(lvl.mean, lvl.logvar, &eps));
        } else {
            z.push_back(gaussian_sample(lvl.mean, lvl.logvar, nullptr));
        }
    }
    return z;
}

// KL between two per-level diagonal Gaussians, summed over latent dims and
// levels, averaged over batch.
inline Value kl_loss(const GaussianParams& posterior, const GaussianParams& prior) {
    if (posterior.size() != prior.size()) throw ShapeError("kl_loss: level count mismatch");
    if (posterior.empty()) throw ShapeError("kl_loss: no levels");
    Value total;
    for (size_t i = 0; i < posterior.size(); ++i) {
        Value term = kl_diag_gaussian(posterior[i].mean, posterior[i].logvar, prior[i].mean,
                                      prior[i].logvar);
        total = total ? add(total, term) : term;
    }
    return total;
}

// One encoder tower: conv-in, then per level a residual block, with stride-2
// transitions. Records per-level features.
class EncoderTower {
public:
    EncoderTower() = default;
    EncoderTower(int64_t in_channels, const std::vector<int64_t>& ch, Rng& rng) {
        int L = static_cast<int>(ch.size());
        in_conv_ = Conv2d(in_channels, ch[0], 3, 1, 1, /*bias=*/false, rng);
        in_bn_ = BatchNorm2d(ch[0]);
        blocks_.reserve(static_cast<size_t>(L));
        for (int l = 0; l < L; ++l) blocks_.emplace_back(ch[static_cast<size_t>(l)], rng);
        down_conv_.resize(static_cast<size_t>(L - 1));
        down_bn_.resize(static_cast<size_t>(L - 1));
        for (int l = 0; l + 1 < L; ++l) {
            down_conv_[static_cast<size_t>(l)] = Conv2d(ch[static_cast<size_t>(l)],
                                                        ch[static_cast<size_t>(l + 1)], 3, 2, 1,
                                                        /*bias=*/false, rng);
            down_bn_[static_cast<size_t>(l)] = BatchNorm2d(ch[static_cast<size_t>(l + 1)]);
        }
    }

    // returns one feature node per level
    std::vector<Value> operator()(const Value& x, bool training) {
        std::vector<Value> feats;
        Value h = in_bn_(in_conv_(x), training, /*fuse_relu=*/true);
        for (size_t l = 0; l < blocks_.size(); ++l) {
            h = blocks_[l](h, training);
            feats.push_back(h);
            if (l + 1 < blocks_.size()) h = down_bn_[l](down_conv_[l](h), training, true);
        }
        return feats;
    }

    void collect(const std::string& prefix, ParamList& out) {
        in_conv_.collect(prefix + ".in_conv", out);
        in_bn_.collect(prefix + ".in_bn", out);
        for (size_t l = 0; l < blocks_.size(); ++l)
            blocks_[l].collect(prefix + ".res" + std::to_string(l + 1), out);
        for (size_t l = 0; l < down_conv_.size(); ++l) {
            down_conv_[l].collect(prefix + ".down" + std::to_string(l + 1) + ".conv", out);
            down_bn_[l].collect(prefix + ".down" + std::to_string(l + 1) + ".bn", out);
        }
    }

private:
    Conv2d in_conv_;
    BatchNorm2d in_bn_;
    std::vector<ResBlock> blocks_;
    std::vector<Conv2d> down_conv_;
    std::vector<BatchNorm2d> down_bn_;
};

struct PredForward {
    Value x_hat;               // (B, frame_channels, H, W)
    GaussianParams prior;      // [level L-1, level L]
    GaussianParams posterior;  // same layout
    std::vector<Value> z;      // sampled latents per level
};

class PredModel {
public:
    explicit PredModel(const PredConfig& cfg, uint64_t seed = 1) : cfg_(cfg) {
        validate(cfg);
        Rng rng(seed);
        const auto& ch = cfg.base_channels;
        int L = cfg.levels;
        int64_t flow_ch = static_cast<int64_t>(cfg.t) * 2;
        int64_t frame_ch = static_cast<int64_t>(cfg.t) * cfg.frame_channels;

        enc_flow_ = EncoderTower(flow_ch, ch, rng);
        enc_joint_ = EncoderTower(frame_ch + flow_ch, ch, rng);

        // distribution heads start at zero so both distributions are standard
        // normal before training
        for (int i = 0; i < 2; ++i) {
            int lvl = L - 1 + i;  // 1-based level index
            int64_t cw = ch[static_cast<size_t>(lvl - 1)];
            prior_heads_[static_cast<size_t>(i)] =
                Conv2d(cw, 2 * cfg.z_channels, 3, 1, 1, /*bias=*/true, rng, /*zero_init=*/true);
            posterior_heads_[static_cast<size_t>(i)] =
                Conv2d(cw, 2 * cfg.z_channels, 3, 1, 1, /*bias=*/true, rng, /*zero_init=*/true);
        }

        // decoder
        int64_t cl = ch[static_cast<size_t>(L - 1)];
        dec_in_conv_ = Conv2d(cfg.z_channels + cl, cl, 3, 1, 1, false, rng);
        dec_in_bn_ = BatchNorm2d(cl);
        dec_in_res_ = ResBlock(cl, rng);
        up_.resize(static_cast<size_t>(L - 1));
        dec_conv_.resize(static_cast<size_t>(L - 1));
        dec_bn_.resize(static_cast<size_t>(L - 1));
        dec_res_.resize(static_cast<size_t>(L - 1));
        for (int l = L - 1; l >= 1; --l) {
            int64_t cw = ch[static_cast<size_t>(l - 1)];
            int64_t clow = ch[static_cast<size_t>(l)];
            up_[static_cast<size_t>(l - 1)] = SubpixelUp(clow, cw, rng);
            // level L-1 also concatenates z and the flow condition
            int64_t cin = l == L - 1 ? cw + cfg.z_channels + cw + cw : cw + cw;
            dec_conv_[static_cast<size_t>(l - 1)] = Conv2d(cin, cw, 3, 1, 1, false, rng);
            dec_bn_[static_cast<size_t>(l - 1)] = BatchNorm2d(cw);
            dec_res_[static_cast<size_t>(l - 1)] = ResBlock(cw, rng);
        }
        out_conv_ = Conv2d(ch[0], cfg.frame_channels, 3, 1, 1, /*bias=*/true, rng);
    }

    const PredConfig& config() const { return cfg_; }
    void set_training(bool t) { training_ = t; }
    bool training() const { return training_; }
    const std::vector<std::array<int64_t, 3>>& encoder_shapes() const { return enc_shapes_; }

    // prior from flows only; also returns the per-level flow features used as
    // decoder conditions
    std::pair<GaussianParams, std::vector<Value>> encode_prior(const Value& flows) {
        check_flows(flows);
        std::vector<Value> feats = enc_flow_(flows, training_);
        record_shapes(feats);
        GaussianParams prior;
        for (int i = 0; i < 2; ++i) {
            const Value& f = feats[static_cast<size_t>(cfg_.levels - 2 + i)];
            prior.push_back(split_head(prior_heads_[static_cast<size_t>(i)](f)));
        }
        return {std::move(prior), std::move(feats)};
    }

    // posterior from frames + flows; features double as decoder skips
    std::pair<GaussianParams, std::vector<Value>> encode_posterior(const Value& frames,
                                                                   const Value& flows) {
        check_frames(frames);
        check_flows(flows);
        Value joint = concat_channels({frames, flows});
        std::vector<Value> feats = enc_joint_(joint, training_);
        GaussianParams post;
        for (int i = 0; i < 2; ++i) {
            const Value& f = feats[static_cast<size_t>(cfg_.levels - 2 + i)];
            post.push_back(split_head(posterior_heads_[static_cast<size_t>(i)](f)));
        }
        return {std::move(post), std::move(feats)};
    }

    // decoder: z at the two bottleneck levels, flow conditions from E, skips
    // from F only
    Value decode(const std::vector<Value>& z, const std::vector<Value>& cond,
                 const std::vector<Value>& skips) {
        if (z.size() != 2) throw ShapeError("decode: expected latents for two levels");
        int L = cfg_.levels;
        Value h = concat_channels({z[1], cond[static_cast<size_t>(L - 1)]});
        h = dec_in_bn_(dec_in_conv_(h), training_, /*fuse_relu=*/true);
        h = dec_in_res_(h, training_);
        for (int l = L - 1; l >= 1; --l) {
            h = up_[static_cast<size_t>(l - 1)](h);
            std::vector<Value> cat = {h};
            if (l == L - 1) {
                cat.push_back(z[0]);
                cat.push_back(cond[static_cast<size_t>(l - 1)]);
            }
            cat.push_back(skips[static_cast<size_t>(l - 1)]);
            h = concat_channels(cat);
            h = dec_bn_[static_cast<size_t>(l - 1)](dec_conv_[static_cast<size_t>(l - 1)](h),
                                                    training_, /*fuse_relu=*/true);
            h = dec_res_[static_cast<size_t>(l - 1)](h, training_);
        }
        return out_conv_(h);
    }

    // full pass: posterior sampling (training and default test path)
    PredForward forward(const Value& frames, const Value& flows, bool stochastic, Rng* rng) {
        PredForward out;
        auto [prior, cond] = encode_prior(flows);
        auto [post, skips] = encode_posterior(frames, flows);
        out.prior = std::move(prior);
        out.posterior = std::move(post);
        out.z = sample_latents(out.posterior, stochastic, rng);
        out.x_hat = decode(out.z, cond, skips);
        return out;
    }

    ParamList named_entries() {
        ParamList out;
        enc_flow_.collect("enc_flow", out);
        enc_joint_.collect("enc_joint", out);
        for (int i = 0; i < 2; ++i) {
            prior_heads_[static_cast<size_t>(i)].collect("prior_head" + std::to_string(i + 1),
                                                         out);
            posterior_heads_[static_cast<size_t>(i)].collect(
                "posterior_head" + std::to_string(i + 1), out);
        }
        dec_in_conv_.collect("dec_in.conv", out);
        dec_in_bn_.collect("dec_in.bn", out);
        dec_in_res_.collect("dec_in.res", out);
        for (size_t l = 0; l < up_.size(); ++l) {
            std::string p = "dec" + std::to_string(l + 1);
            up_[l].collect(p + ".up", out);
            dec_conv_[l].collect(p + ".conv", out);
            dec_bn_[l].collect(p + ".bn", out);
            dec_res_[l].collect(p + ".res", out);
        }
        out_conv_.collect("out", out);
        return out;
    }

private:
    void check_flows(const Value& flows) const {
        int64_t want = static_cast<int64_t>(cfg_.t) * 2;
        if (flows->value.ndim() != 4 || flows->value.dim(1) != want)
            throw ShapeError("prednet: flow cube must have " + std::to_string(want) +
                             " channels, got " + shape_str(flows->value.shape()));
    }
    void check_frames(const Value& frames) const {
        int64_t want = static_cast<int64_t>(cfg_.t) * cfg_.frame_channels;
        if (frames->value.ndim() != 4 || frames->value.dim(1) != want)
            throw ShapeError("prednet: frame stack must have " + std::to_string(want) +
                             " channels, got " + shape_str(frames->value.shape()));
    }
    GaussianLevel split_head(const Value& head) {
        int64_t zc = cfg_.z_channels;
        Value mean = slice_channels(head, 0, zc);
        Value logvar = clamp(slice_channels(head, zc, 2 * zc), -cfg_.logvar_clamp,
                             cfg_.logvar_clamp);
        return {mean, logvar};
    }
    void record_shapes(const std::vector<Value>& feats) {
        enc_shapes_.clear();
        for (const auto& f : feats)
            enc_shapes_.push_back({f->value.dim(2), f->value.dim(3), f->value.dim(1)});
    }

    PredConfig cfg_;
    bool training_ = true;
    EncoderTower enc_flow_, enc_joint_;
    std::array<Conv2d, 2> prior_heads_, posterior_heads_;
    Conv2d dec_in_conv_;
    BatchNorm2d dec_in_bn_;
    ResBlock dec_in_res_;
    std::vector<SubpixelUp> up_;
    std::vector<Conv2d> dec_conv_;
    std::vector<BatchNorm2d> dec_bn_;
    std::vector<ResBlock> dec_res_;
    Conv2d out_conv_;
    std::vector<std::array<int64_t, 3>> enc_shapes_;
};

// Eq. 8: lambda_CVAE * (KL + mean squared prediction error) + lambda_gd * gradient loss.
inline Value total_pred_loss(const Value& x_next, const PredForward& out, float lambda_cvae,
                             float lambda_gd) {
    if (lambda_cvae < 0.0f || lambda_gd < 0.0f)
        throw ConfigError("total_pred_loss: weights must be nonnegative");
    Value cvae = add(kl_loss(out.posterior, out.prior), mse_mean(x_next, out.x_hat));
    Value loss = scale(cvae, lambda_cvae);
    if (lambda_gd != 0.0f) loss = add(loss, scale(gradient_loss(x_next, out.x_hat), lambda_gd));
    return loss;
}

}  // namespace hf2vad
