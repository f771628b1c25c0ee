#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "hf2vad/prednet.hpp"

using namespace hf2vad;

namespace {

PredConfig paper_config() {
    PredConfig cfg;  // t=4, frames 3ch, widths (64,128,128,128), z 64
    return cfg;
}

PredConfig mini_config() {
    PredConfig cfg;
    cfg.t = 2;
    cfg.frame_channels = 1;
    cfg.levels = 4;
    cfg.base_channels = {6, 8, 8, 8};
    cfg.z_channels = 4;
    return cfg;
}

}  // namespace

TEST_CASE("encoder towers hit the documented level sizes") {
    PredModel model(paper_config(), 11);
    model.set_training(false);
    Rng rng(3);
    Value flows = make_leaf(Tensor::normal({1, 8, 32, 32}, 0.0f, 1.0f, rng));
    auto [prior, cond] = model.encode_prior(flows);
    const auto& shapes = model.encoder_shapes();
    REQUIRE(shapes.size() == 4);
    CHECK(shapes[0] == std::array<int64_t, 3>{32, 32, 64});
    CHECK(shapes[1] == std::array<int64_t, 3>{16, 16, 128});
    CHECK(shapes[2] == std::array<int64_t, 3>{8, 8, 128});
    CHECK(shapes[3] == std::array<int64_t, 3>{4, 4, 128});
    // two latent levels at 8x8 and 4x4
    REQUIRE(prior.size() == 2);
    CHECK(prior[0].mean->value.shape() == Shape{1, 64, 8, 8});
    CHECK(prior[1].mean->value.shape() == Shape{1, 64, 4, 4});
}

TEST_CASE("zero-initialized heads make both distributions standard normal") {
    PredModel model(mini_config(), 5);
    Rng rng(4);
    Value flows = make_leaf(Tensor::normal({2, 4, 32, 32}, 0.0f, 1.0f, rng));
    Value frames = make_leaf(Tensor::normal({2, 2, 32, 32}, 0.0f, 1.0f, rng));
    auto [prior, cond] = model.encode_prior(flows);
    auto [post, skips] = model.encode_posterior(frames, flows);
    for (const auto& lvl : {prior[0], prior[1], post[0], post[1]}) {
        CHECK(lvl.mean->value.max_abs() == 0.0f);
        CHECK(lvl.logvar->value.max_abs() == 0.0f);
    }
    // and therefore the KL between them is exactly zero at initialization
    CHECK(kl_loss(post, prior)->value[0] == 0.0f);
}

TEST_CASE("full prediction pass has the contracted output shape") {
    PredConfig cfg = paper_config();
    PredModel model(cfg, 1);
    model.set_training(false);
    Rng rng(5);
    Value flows = make_leaf(Tensor::normal({2, 8, 32, 32}, 0.0f, 1.0f, rng));
    Value frames = make_leaf(Tensor::normal({2, 12, 32, 32}, 0.0f, 1.0f, rng));
    PredForward out = model.forward(frames, flows, /*stochastic=*/false, nullptr);
    CHECK(out.x_hat->value.shape() == Shape{2, 3, 32, 32});
    CHECK(out.x_hat->value.all_finite());
    CHECK(out.z.size() == 2);
    CHECK(out.z[0]->value.shape() == out.posterior[0].mean->value.shape());
}

TEST_CASE("deterministic sampling is repeatable and equals the posterior mean") {
    PredModel model(mini_config(), 6);
    model.set_training(false);
    Rng rng(6);
    Value flows = make_leaf(Tensor::normal({1, 4, 32, 32}, 0.0f, 1.0f, rng));
    Value frames = make_leaf(Tensor::normal({1, 2, 32, 32}, 0.0f, 1.0f, rng));
    NoGradGuard ng;
    PredForward a = model.forward(frames, flows, false, nullptr);
    PredForward b = model.forward(frames, flows, false, nullptr);
    CHECK(std::memcmp(a.x_hat->value.data(), b.x_hat->value.data(),
                      static_cast<size_t>(a.x_hat->value.numel()) * 4) == 0);
    for (size_t lvl = 0; lvl < 2; ++lvl)
        CHECK(std::memcmp(a.z[lvl]->value.data(), a.posterior[lvl].mean->value.data(),
                          static_cast<size_t>(a.z[lvl]->value.numel()) * 4) == 0);
}

TEST_CASE("stochastic sampling is reproducible under a fixed seed") {
    PredModel model(mini_config(), 6);
    model.set_training(false);
    Rng rng(7);
    Value flows = make_leaf(Tensor::normal({1, 4, 32, 32}, 0.0f, 1.0f, rng));
    Value frames = make_leaf(Tensor::normal({1, 2, 32, 32}, 0.0f, 1.0f, rng));
    NoGradGuard ng;
    Rng g1(123), g2(123), g3(77);
    PredForward a = model.forward(frames, flows, true, &g1);
    PredForward b = model.forward(frames, flows, true, &g2);
    PredForward c = model.forward(frames, flows, true, &g3);
    CHECK(std::memcmp(a.x_hat->value.data(), b.x_hat->value.data(),
                      static_cast<size_t>(a.x_hat->value.numel()) * 4) == 0);
    // a different stream gives a different prediction (heads are zero-init,
    // so z varies with eps only through sigma=1)
    bool same = std::memcmp(a.x_hat->value.data(), c.x_hat->value.data(),
                            static_cast<size_t>(a.x_hat->value.numel()) * 4) == 0;
    CHECK_FALSE(same);
    CHECK_THROWS_AS(model.forward(frames, flows, true, nullptr), ConfigError);
}

TEST_CASE("decoder output responds to latent perturbations") {
    PredModel model(mini_config(), 8);
    model.set_training(false);
    Rng rng(8);
    Value flows = make_leaf(Tensor::normal({1, 4, 32, 32}, 0.0f, 1.0f, rng));
    Value frames = make_leaf(Tensor::normal({1, 2, 32, 32}, 0.0f, 1.0f, rng));
    NoGradGuard ng;
    auto [prior, cond] = model.encode_prior(flows);
    auto [post, skips] = model.encode_posterior(frames, flows);
    std::vector<Value> z = sample_latents(post, false, nullptr);
    Value base = model.decode(z, cond, skips);
    std::vector<Value> z2 = z;
    Tensor bumped = z[0]->value;
    for (int64_t i = 0; i < bumped.numel(); ++i) bumped[i] += 0.5f;
    z2[0] = make_leaf(bumped);
    Value moved = model.decode(z2, cond, skips);
    double delta = 0.0;
    for (int64_t i = 0; i < base->value.numel(); ++i)
        delta += std::abs(static_cast<double>(base->value[i]) - moved->value[i]);
    CHECK(delta > 0.0);
}

TEST_CASE("shape violations are rejected") {
    PredModel model(mini_config(), 9);
    Rng rng(9);
    Value bad_flows = make_leaf(Tensor::normal({1, 6, 32, 32}, 0.0f, 1.0f, rng));
    CHECK_THROWS_AS(model.encode_prior(bad_flows), ShapeError);
    Value flows = make_leaf(Tensor::normal({1, 4, 32, 32}, 0.0f, 1.0f, rng));
    Value bad_frames = make_leaf(Tensor::normal({1, 3, 32, 32}, 0.0f, 1.0f, rng));
    CHECK_THROWS_AS(model.encode_posterior(bad_frames, flows), ShapeError);
}

TEST_CASE("logvar outputs are clamped to the configured band") {
    PredConfig cfg = mini_config();
    PredModel model(cfg, 10);
    ParamList entries = model.named_entries();
    // push a head bias to an extreme value to force clamping
    for (auto& [name, v] : entries.params)
        if (name == "posterior_head2.bias")
            for (int64_t i = cfg.z_channels; i < 2 * cfg.z_channels; ++i) v->value[i] = 50.0f;
    Rng rng(10);
    Value flows = make_leaf(Tensor::normal({1, 4, 32, 32}, 0.0f, 1.0f, rng));
    Value frames = make_leaf(Tensor::normal({1, 2, 32, 32}, 0.0f, 1.0f, rng));
    auto [post, skips] = model.encode_posterior(frames, flows);
    CHECK(post[1].logvar->value.max_abs() <= 10.0f);
}

TEST_CASE("total prediction loss composes and vanishes in the perfect case") {
    Rng rng(11);
    Tensor x = Tensor::normal({2, 1, 4, 4}, 0.0f, 1.0f, rng);
    PredForward out;
    out.x_hat = make_leaf(x);
    Tensor mu = Tensor::normal({2, 3, 1, 1}, 0.0f, 1.0f, rng);
    Tensor lv = Tensor::normal({2, 3, 1, 1}, 0.0f, 0.3f, rng);
    out.posterior = {{make_leaf(mu), make_leaf(lv)}};
    out.prior = {{make_leaf(mu), make_leaf(lv)}};  // matched distributions
    CHECK(total_pred_loss(make_leaf(x), out, 1.0f, 1.0f)->value[0] == 0.0f);
    CHECK_THROWS_AS(total_pred_loss(make_leaf(x), out, -0.5f, 1.0f), ConfigError);
}

TEST_CASE("defaults match the reference hyperparameters") {
    PredConfig cfg;
    CHECK(cfg.t == 4);
    CHECK(cfg.lambda_cvae == 1.0f);
    CHECK(cfg.lambda_gd == 1.0f);
    CHECK(cfg.base_channels == std::vector<int64_t>{64, 128, 128, 128});
    CHECK(cfg.z_channels == 64);
}
