// Analytic gradients of every training loss against central finite
// differences on miniature configurations, float32, relative error < 1e-3.

#include <catch2/catch_amalgamated.hpp>

#include "hf2vad/prednet.hpp"
#include "hf2vad/reconnet.hpp"
#include "support/gradcheck.hpp"

using namespace hf2vad;
using hf2vad::testing::gradcheck;

namespace {

constexpr double kTol = 1e-3;

// Widths and seeds are chosen so no memory-module query location sits at a
// dead (all-zero) ReLU column: the cosine addressing is non-smooth there and
// finite differences would measure the kink rather than the gradient.
struct MiniRecon {
    ReconConfig cfg;
    ReconModel model;
    Value input;

    explicit MiniRecon(uint64_t seed, ReconVariant variant = ReconVariant::ml_memae)
        : cfg(make_config(variant)), model(cfg, seed), input(make_input(seed)) {
        model.set_training(true);
    }
    static ReconConfig make_config(ReconVariant variant) {
        ReconConfig cfg;
        cfg.variant = variant;
        cfg.levels = 2;
        cfg.in_channels = 2;
        cfg.base_channels = {6, 8};
        cfg.slot_count = 5;
        return cfg;
    }
    static Value make_input(uint64_t seed) {
        Rng rng(seed + 1000);
        return make_leaf(Tensor::normal({1, 2, 8, 8}, 0.0f, 1.0f, rng));
    }
};

struct MiniPred {
    PredConfig cfg;
    PredModel model;
    Value frames, flows, target;

    explicit MiniPred(uint64_t seed, int t = 2) : cfg(make_config(t)), model(cfg, seed) {
        Rng rng(seed + 2000);
        flows = make_leaf(Tensor::normal({1, 2 * t, 8, 8}, 0.0f, 1.0f, rng));
        frames = make_leaf(Tensor::normal({1, t, 8, 8}, 0.0f, 1.0f, rng));
        target = make_leaf(Tensor::uniform({1, 1, 8, 8}, 0.0f, 1.0f, rng));
        model.set_training(true);
        // nudge the distribution heads off their zero initialization so the
        // KL term has nontrivial gradients in every direction
        ParamList entries = model.named_entries();
        Rng jrng(seed + 3000);
        for (auto& [name, v] : entries.params)
            if (name.find("head") != std::string::npos)
                for (int64_t i = 0; i < v->value.numel(); ++i)
                    v->value[i] += jrng.normal(0.0f, 0.05f);
    }
    static PredConfig make_config(int t) {
        PredConfig cfg;
        cfg.t = t;
        cfg.frame_channels = 1;
        cfg.levels = 2;
        cfg.base_channels = {4, 6};
        cfg.z_channels = 3;
        return cfg;
    }
};

}  // namespace

TEST_CASE("reconstruction loss gradients match finite differences") {
    MiniRecon mini(2);
    auto loss = [&] {
        ReconForward out = mini.model.forward(mini.input);
        return recon_loss(mini.input, out.y_hat);
    };
    auto report = gradcheck(loss, mini.model.named_entries().params);
    INFO("worst: " << report.worst_param << " rel err " << report.max_rel_err);
    CHECK(report.max_rel_err < kTol);
}

TEST_CASE("entropy regularizer gradients match finite differences") {
    MiniRecon mini(17);
    auto loss = [&] {
        ReconForward out = mini.model.forward(mini.input);
        return entropy_loss(out.weights);
    };
    auto report = gradcheck(loss, mini.model.named_entries().params);
    INFO("worst: " << report.worst_param << " rel err " << report.max_rel_err);
    CHECK(report.max_rel_err < kTol);
}

TEST_CASE("addressing gradients w.r.t. queries and slots on a random 4x3 bank") {
    Rng rng(23);
    Value features = make_leaf(Tensor::normal({1, 3, 1, 2}, 0.0f, 1.0f, rng), true);
    Value slots = make_leaf(Tensor::normal({4, 3}, 0.0f, 1.0f, rng), true);
    Value target = make_leaf(Tensor::normal({1, 3, 1, 2}, 0.0f, 1.0f, rng));
    auto loss = [&] {
        Value w = address_weights(features, slots);
        Value out = address_retrieve(w, slots, 1, 1, 2);
        return add(mse_mean(target, out), entropy_loss_rows(w));
    };
    auto report = gradcheck(loss, {{"features", features}, {"slots", slots}}, 2e-3f);
    INFO("worst: " << report.worst_param << " rel err " << report.max_rel_err);
    CHECK(report.max_rel_err < kTol);
}

TEST_CASE("combined reconstruction objective gradients match finite differences") {
    MiniRecon mini(25);
    auto loss = [&] {
        ReconForward out = mini.model.forward(mini.input);
        return total_recon_loss(mini.input, out, 1.0f, 0.05f);
    };
    auto report = gradcheck(loss, mini.model.named_entries().params);
    INFO("worst: " << report.worst_param << " rel err " << report.max_rel_err);
    CHECK(report.max_rel_err < kTol);
}

TEST_CASE("KL term gradients match finite differences") {
    MiniPred mini(25);
    auto loss = [&] {
        auto [prior, cond] = mini.model.encode_prior(mini.flows);
        auto [post, skips] = mini.model.encode_posterior(mini.frames, mini.flows);
        return kl_loss(post, prior);
    };
    auto report = gradcheck(loss, mini.model.named_entries().params);
    INFO("worst: " << report.worst_param << " rel err " << report.max_rel_err);
    CHECK(report.max_rel_err < kTol);
}

TEST_CASE("prediction error term gradients match finite differences") {
    MiniPred mini(26);
    auto loss = [&] {
        PredForward out = mini.model.forward(mini.frames, mini.flows, false, nullptr);
        return mse_mean(mini.target, out.x_hat);
    };
    auto report = gradcheck(loss, mini.model.named_entries().params);
    INFO("worst: " << report.worst_param << " rel err " << report.max_rel_err);
    CHECK(report.max_rel_err < kTol);
}

TEST_CASE("gradient loss gradients match finite differences") {
    MiniPred mini(27);
    auto loss = [&] {
        PredForward out = mini.model.forward(mini.frames, mini.flows, false, nullptr);
        return gradient_loss(mini.target, out.x_hat);
    };
    auto report = gradcheck(loss, mini.model.named_entries().params);
    INFO("worst: " << report.worst_param << " rel err " << report.max_rel_err);
    CHECK(report.max_rel_err < kTol);
}

TEST_CASE("full prediction objective gradients match finite differences") {
    MiniPred mini(28);
    auto loss = [&] {
        PredForward out = mini.model.forward(mini.frames, mini.flows, false, nullptr);
        return total_pred_loss(mini.target, out, 1.0f, 1.0f);
    };
    auto report = gradcheck(loss, mini.model.named_entries().params);
    INFO("worst: " << report.worst_param << " rel err " << report.max_rel_err);
    CHECK(report.max_rel_err < kTol);
}

TEST_CASE("joint finetuning objective gradients flow through both networks") {
    MiniRecon recon(44, ReconVariant::ml_memae);
    MiniPred pred(29, /*t=*/1);
    // the predictor consumes the reconstructed flows, so prediction-loss
    // gradients must reach the reconstruction weights too
    auto loss = [&] {
        ReconForward rf = recon.model.forward(pred.flows);
        PredForward pf = pred.model.forward(pred.frames, rf.y_hat, false, nullptr);
        return add(total_recon_loss(pred.flows, rf, 1.0f, 0.05f),
                   total_pred_loss(pred.target, pf, 1.0f, 1.0f));
    };
    std::vector<std::pair<std::string, Value>> params;
    for (auto& [n, v] : recon.model.named_entries().params)
        params.emplace_back("recon." + n, v);
    for (auto& [n, v] : pred.model.named_entries().params)
        params.emplace_back("pred." + n, v);
    auto report = gradcheck(loss, params);
    INFO("worst: " << report.worst_param << " rel err " << report.max_rel_err);
    CHECK(report.max_rel_err < kTol);
}
