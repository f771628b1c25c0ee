#pragma once

// Network building blocks: conv / deconv / batch-norm / subpixel layers,
// pre-activation residual blocks, the memory module wrapper, and Adam.
// Parameters and buffers register under hierarchical names so checkpoints
// can address them individually.

#include <map>
#include <string>
#include <vector>

#include "hf2vad/memaddr.hpp"
#include "hf2vad/ops.hpp"

namespace hf2vad {

struct ParamList {
    std::vector<std::pair<std::string, Value>> params;
    std::vector<std::pair<std::string, Tensor*>> buffers;  // batch-norm running stats

    void add_param(const std::string& name, const Value& v) { params.emplace_back(name, v); }
    void add_buffer(const std::string& name, Tensor* t) { buffers.emplace_back(name, t); }
};

inline Value make_param(Tensor t) { return make_leaf(std::move(t), true); }

inline Value conv_weight(int64_t cout, int64_t cin, int64_t k, Rng& rng) {
    float bound = 1.0f / std::sqrt(static_cast<float>(cin * k * k));
    return make_param(Tensor::uniform({cout, cin, k, k}, -bound, bound, rng));
}

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(int64_t cin, int64_t cout, int64_t k, int64_t stride, int64_t pad, bool bias, Rng& rng,
           bool zero_init = false)
        : spec_{stride, pad} {
        if (zero_init) {
            w_ = make_param(Tensor({cout, cin, k, k}));
        } else {
            w_ = conv_weight(cout, cin, k, rng);
        }
        if (bias) {
            float bound = 1.0f / std::sqrt(static_cast<float>(cin * k * k));
            b_ = make_param(zero_init ? Tensor({cout})
                                      : Tensor::uniform({cout}, -bound, bound, rng));
        }
    }

    Value operator()(const Value& x) const { return conv2d(x, w_, b_, spec_); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.add_param(prefix + ".weight", w_);
        if (b_) out.add_param(prefix + ".bias", b_);
    }

private:
    Value w_, b_;
    Conv2dSpec spec_;
};

class ConvTranspose2d {
public:
    ConvTranspose2d() = default;
    ConvTranspose2d(int64_t cin, int64_t cout, Rng& rng) {
        float bound = 1.0f / std::sqrt(static_cast<float>(cin * 9));
        w_ = make_param(Tensor::uniform({cin, cout, 3, 3}, -bound, bound, rng));
        b_ = make_param(Tensor::uniform({cout}, -bound, bound, rng));
    }

    Value operator()(const Value& x) const { return conv_transpose2d(x, w_, b_); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.add_param(prefix + ".weight", w_);
        out.add_param(prefix + ".bias", b_);
    }

private:
    Value w_, b_;
};

class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(int64_t c) {
        gamma_ = make_param(Tensor::full({c}, 1.0f));
        beta_ = make_param(Tensor({c}));
        state_.running_mean = Tensor({c});
        state_.running_var = Tensor::full({c}, 1.0f);
    }

    Value operator()(const Value& x, bool training, bool fuse_relu = false) {
        return batch_norm2d(x, gamma_, beta_, state_, training, fuse_relu);
    }

    void collect(const std::string& prefix, ParamList& out) {
        out.add_param(prefix + ".weight", gamma_);
        out.add_param(prefix + ".bias", beta_);
        out.add_buffer(prefix + ".running_mean", &state_.running_mean);
        out.add_buffer(prefix + ".running_var", &state_.running_var);
    }

private:
    Value gamma_, beta_;
    BatchNormState state_;
};

// convolution + batch norm + ReLU
class ConvBlock {
public:
    ConvBlock() = default;
    ConvBlock(int64_t cin, int64_t cout, Rng& rng)
        : conv_(cin, cout, 3, 1, 1, /*bias=*/false, rng), bn_(cout) {}

    Value operator()(const Value& x, bool training) {
        return bn_(conv_(x), training, /*fuse_relu=*/true);
    }

    void collect(const std::string& prefix, ParamList& out) {
        conv_.collect(prefix + ".conv", out);
        bn_.collect(prefix + ".bn", out);
    }

private:
    Conv2d conv_;
    BatchNorm2d bn_;
};

// pre-activation residual block, identity shortcut (equal widths only)
class ResBlock {
public:
    ResBlock() = default;
    ResBlock(int64_t c, Rng& rng)
        : bn1_(c), conv1_(c, c, 3, 1, 1, false, rng), bn2_(c), conv2_(c, c, 3, 1, 1, false, rng) {}

    Value operator()(const Value& x, bool training) {
        Value h = conv1_(bn1_(x, training, /*fuse_relu=*/true));
        h = conv2_(bn2_(h, training, /*fuse_relu=*/true));
        return add(x, h);
    }

    void collect(const std::string& prefix, ParamList& out) {
        bn1_.collect(prefix + ".bn1", out);
        conv1_.collect(prefix + ".conv1", out);
        bn2_.collect(prefix + ".bn2", out);
        conv2_.collect(prefix + ".conv2", out);
    }

private:
    BatchNorm2d bn1_;
    Conv2d conv1_;
    BatchNorm2d bn2_;
    Conv2d conv2_;
};

// conv to 4x channels + pixel shuffle: doubles spatial size
class SubpixelUp {
public:
    SubpixelUp() = default;
    SubpixelUp(int64_t cin, int64_t cout, Rng& rng)
        : conv_(cin, cout * 4, 3, 1, 1, /*bias=*/true, rng) {}

    Value operator()(const Value& x) const { return pixel_shuffle(conv_(x), 2); }

    void collect(const std::string& prefix, ParamList& out) const {
        conv_.collect(prefix + ".conv", out);
    }

private:
    Conv2d conv_;
};

struct MemoryForward {
    Value out;      // (B,C,H,W)
    Value weights;  // (B*H*W, N)
};

class MemoryModule {
public:
    MemoryModule() = default;
    MemoryModule(int64_t n, int64_t c, Rng& rng, float shrink_threshold = 0.0f)
        : shrink_(shrink_threshold) {
        MemoryBank bank(n, c, rng);
        slots_ = make_param(std::move(bank.slots));
    }

    MemoryForward operator()(const Value& x) const {
        Value w = address_weights(x, slots_, shrink_);
        Value out = address_retrieve(w, slots_, x->value.dim(0), x->value.dim(2),
                                     x->value.dim(3));
        return {out, w};
    }

    const Value& slots() const { return slots_; }

    void collect(const std::string& prefix, ParamList& out) const {
        out.add_param(prefix + ".slots", slots_);
    }

private:
    Value slots_;
    float shrink_ = 0.0f;
};

// ---------------------------------------------------------------------------
// Adam

class Adam {
public:
    Adam() = default;
    Adam(std::vector<std::pair<std::string, Value>> params, float beta1 = 0.9f,
         float beta2 = 0.999f, float eps = 1e-8f)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto& [name, p] : params_) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p->zero_grad();
    }

    void step(float lr) {
        ++t_;
        float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
        float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Value& p = params_[i].second;
            if (p->grad.empty()) continue;
            float* w = p->value.data();
            const float* g = p->grad.data();
            float* m = m_[i].data();
            float* v = v_[i].data();
            int64_t n = p->value.numel();
            for (int64_t j = 0; j < n; ++j) {
                m[j] = beta1_ * m[j] + (1.0f - beta1_) * g[j];
                v[j] = beta2_ * v[j] + (1.0f - beta2_) * g[j] * g[j];
                w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
            }
        }
    }

    int64_t step_count() const { return t_; }
    void set_step_count(int64_t t) { t_ = t; }

    // optimizer state keyed by parameter name, for checkpoints
    void export_state(std::map<std::string, Tensor>& out) const {
        for (size_t i = 0; i < params_.size(); ++i) {
            out["adam.m." + params_[i].first] = m_[i];
            out["adam.v." + params_[i].first] = v_[i];
        }
    }
    void import_state(const std::map<std::string, Tensor>& in) {
        for (size_t i = 0; i < params_.size(); ++i) {
            auto mi = in.find("adam.m." + params_[i].first);
            auto vi = in.find("adam.v." + params_[i].first);
            if (mi != in.end() && mi->second.same_shape(m_[i])) m_[i] = mi->second;
            if (vi != in.end() && vi->second.same_shape(v_[i])) v_[i] = vi->second;
        }
    }

private:
    std::vector<std::pair<std::string, Value>> params_;
    std::vector<Tensor> m_, v_;
    float beta1_ = 0.9f, beta2_ = 0.999f, eps_ = 1e-8f;
    int64_t t_ = 0;
};

}  // namespace hf2vad
