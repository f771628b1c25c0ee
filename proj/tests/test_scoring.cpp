#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "hf2vad/scoring.hpp"

using namespace hf2vad;

namespace {

// brute-force pairwise AUROC: P(pos > neg) + 0.5 P(tie)
double auroc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0.0;
    int64_t pos = 0, neg = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        ++pos;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    for (int l : labels) neg += l ? 0 : 1;
    return wins / (static_cast<double>(pos) * static_cast<double>(neg));
}

// naive sort-based median filter with replicated edges
std::vector<double> median_oracle(const std::vector<double>& xs, int window) {
    int64_t n = static_cast<int64_t>(xs.size());
    int64_t r = window / 2;
    std::vector<double> out(xs.size());
    for (int64_t i = 0; i < n; ++i) {
        std::vector<double> buf;
        for (int64_t k = i - r; k <= i + r; ++k)
            buf.push_back(xs[static_cast<size_t>(std::min(n - 1, std::max<int64_t>(0, k)))]);
        std::sort(buf.begin(), buf.end());
        out[static_cast<size_t>(i)] = buf[static_cast<size_t>(r)];
    }
    return out;
}

}  // namespace

TEST_CASE("error cues are the mean of squared differences") {
    Tensor y({2});
    y[0] = 2.0f;
    CHECK(recon_error(y, Tensor({2})) == Catch::Approx(2.0));  // (4+0)/2
    CHECK(pred_error(y, y) == 0.0);
    Tensor x({2, 3, 4, 4});
    CHECK_THROWS_AS(recon_error(x, Tensor({2, 3, 4, 5})), ShapeError);
}

TEST_CASE("elementwise-larger deviations give larger scores") {
    Rng rng(4);
    Tensor y = Tensor::normal({3, 5}, 0.0f, 1.0f, rng);
    Tensor d1 = y, d2 = y;
    for (int64_t i = 0; i < y.numel(); ++i) {
        float e = rng.uniform(0.1f, 1.0f);
        d1[i] += e;
        d2[i] += 1.5f * e;
    }
    CHECK(recon_error(y, d2) > recon_error(y, d1));
}

TEST_CASE("fit_stats computes population moments and the fused minimum") {
    ScoreStats st = fit_stats({1.0, 3.0}, {5.0, 9.0}, 1.0, 0.5);
    CHECK(st.mu_r == Catch::Approx(2.0));
    CHECK(st.sigma_r == Catch::Approx(1.0));
    CHECK(st.mu_p == Catch::Approx(7.0));
    CHECK(st.sigma_p == Catch::Approx(2.0));
    // fused of (1,5) = -1 - 0.25 = -1.25; of (3,9) = +1.25
    CHECK(st.min_fused == Catch::Approx(-1.5));

    CHECK_THROWS_AS(fit_stats({1.0}, {2.0}, 1.0, 1.0), StatsError);
    CHECK_THROWS_AS(fit_stats({2.0, 2.0, 2.0}, {1.0, 2.0, 3.0}, 1.0, 1.0), StatsError);
}

TEST_CASE("fusion weight presets match the reference settings") {
    CHECK(fusion_preset("ped2") == std::pair<double, double>{1.0, 0.1});
    CHECK(fusion_preset("avenue") == std::pair<double, double>{0.05, 1.0});
    CHECK(fusion_preset("shanghaitech") == std::pair<double, double>{0.02, 1.0});
    CHECK_THROWS_AS(fusion_preset("ped3"), ConfigError);
}

TEST_CASE("fuse is the weighted z-score sum") {
    ScoreStats st;
    st.mu_r = 0.0;
    st.sigma_r = 1.0;
    st.mu_p = 0.0;
    st.sigma_p = 2.0;
    st.w_r = 1.0;
    st.w_p = 0.1;
    CHECK(fuse(2.0, 4.0, st) == Catch::Approx(2.2));
    CHECK(fuse(st.mu_r, st.mu_p, st) == Catch::Approx(0.0));

    // w_p = 0: prediction cue has no influence
    st.w_p = 0.0;
    CHECK(fuse(1.5, -100.0, st) == fuse(1.5, 100.0, st));
}

TEST_CASE("fuse is affine in each cue") {
    Rng rng(8);
    ScoreStats st;
    st.mu_r = 0.3;
    st.sigma_r = 0.7;
    st.mu_p = -1.0;
    st.sigma_p = 2.5;
    st.w_r = 0.9;
    st.w_p = 0.4;
    for (int i = 0; i < 10; ++i) {
        double a = rng.normal(), b = rng.normal(), d = rng.uniform(0.1f, 2.0f);
        double lhs = fuse(a + d, b, st) - fuse(a, b, st);
        CHECK(lhs == Catch::Approx(st.w_r * d / st.sigma_r).margin(1e-9));
        double rhs = fuse(a, b + d, st) - fuse(a, b, st);
        CHECK(rhs == Catch::Approx(st.w_p * d / st.sigma_p).margin(1e-9));
    }
}

TEST_CASE("frame scores take the max over objects and pad empty frames") {
    ScoreStats st;  // identity stats, w_p = 0 so fused == s_r
    st.w_p = 0.0;
    st.min_fused = -3.25;
    std::vector<ObjectScore> objects = {
        {4, 0.1, 0.0}, {4, 0.9, 0.0}, {4, 0.3, 0.0},  // three objects at frame 4
        {5, 0.42, 0.0},                               // single object
    };                                                // frame 6 has none
    auto series = frame_scores("v", 4, 7, objects, st);
    REQUIRE(series.records.size() == 3);
    CHECK(series.records[0].fused == Catch::Approx(0.9));
    CHECK(series.records[0].object_count == 3);
    CHECK(series.records[1].fused == Catch::Approx(0.42));
    CHECK(series.records[2].fused == Catch::Approx(-3.25));
    CHECK(series.records[2].object_count == 0);
    CHECK_FALSE(series.records[2].s_r.has_value());

    // per-frame argmax is invariant to adding a constant to all scores
    std::vector<ObjectScore> shifted = objects;
    for (auto& o : shifted) o.s_r += 10.0;
    auto series2 = frame_scores("v", 4, 7, shifted, st);
    for (size_t i = 0; i < 2; ++i)
        CHECK(series2.records[i].fused == Catch::Approx(series.records[i].fused + 10.0));
}

TEST_CASE("median smoothing removes isolated spikes and matches the sort oracle") {
    std::vector<double> spike = {0, 0, 0, 10, 0, 0, 0};
    auto sm = median_smooth(spike, 3);
    for (double v : sm) CHECK(v == 0.0);

    std::vector<double> flat(9, 1.25);
    CHECK(median_smooth(flat, 5) == flat);

    Rng rng(12);
    std::vector<double> xs;
    for (int i = 0; i < 200; ++i) xs.push_back(rng.normal());
    for (int window : {1, 3, 5, 17}) {
        CHECK(median_smooth(xs, window) == median_oracle(xs, window));
    }
    CHECK_THROWS_AS(median_smooth(xs, 4), ConfigError);
    CHECK_THROWS_AS(median_smooth(xs, -1), ConfigError);
}

TEST_CASE("median smoothing leaves monotone series unchanged") {
    std::vector<double> xs;
    for (int i = 0; i < 40; ++i) xs.push_back(0.1 * i * i);
    auto once = median_smooth(xs, 17);
    CHECK(once == xs);
    CHECK(median_smooth(once, 17) == once);
}

TEST_CASE("auroc equals the brute-force pairwise oracle exactly") {
    Rng rng(99);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 1000; ++i) {
        // coarse grid forces plenty of ties
        scores.push_back(static_cast<double>(rng.index(50)) / 10.0);
        labels.push_back(static_cast<int>(rng.index(2)));
    }
    double fast = auroc(scores, labels);
    double slow = auroc_pairwise(scores, labels);
    CHECK(fast == slow);
    CHECK(fast >= 0.0);
    CHECK(fast <= 1.0);
}

TEST_CASE("auroc hits the boundary values and fails on one-class input") {
    std::vector<double> s = {0.1, 0.2, 0.8, 0.9};
    std::vector<int> perfect = {0, 0, 1, 1};
    CHECK(auroc(s, perfect) == 1.0);
    std::vector<int> inverted = {1, 1, 0, 0};
    CHECK(auroc(s, inverted) == 0.0);
    CHECK_THROWS_AS(auroc(s, std::vector<int>{1, 1, 1, 1}), StatsError);
    CHECK_THROWS_AS(auroc(s, std::vector<int>{0, 1, 2, 0}), ValueError);
}

TEST_CASE("labels independent of scores give auroc near one half") {
    Rng rng(123);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 20000; ++i) {
        scores.push_back(rng.normal());
        labels.push_back(static_cast<int>(rng.index(2)));
    }
    CHECK(auroc(scores, labels) == Catch::Approx(0.5).margin(0.02));
}

TEST_CASE("auroc is invariant under strictly increasing transforms") {
    Rng rng(77);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 500; ++i) {
        scores.push_back(rng.normal() * 2.0);
        labels.push_back(static_cast<int>(rng.index(2)));
    }
    double base = auroc(scores, labels);
    for (int trial = 0; trial < 5; ++trial) {
        double a = rng.uniform(0.5f, 3.0f), b = rng.uniform(0.1f, 2.0f);
        std::vector<double> mapped(scores.size());
        for (size_t i = 0; i < scores.size(); ++i)
            mapped[i] = a * scores[i] + b * std::tanh(scores[i]) + std::exp(scores[i] / 10.0);
        CHECK(auroc(mapped, labels) == base);
    }
}

TEST_CASE("per-series normalization yields zero mean and unit variance") {
    Rng rng(31);
    std::vector<double> xs;
    for (int i = 0; i < 64; ++i) xs.push_back(rng.normal(3.0f, 2.0f));
    auto z = normalize_series(xs);
    double mu = 0.0;
    for (double v : z) mu += v;
    mu /= static_cast<double>(z.size());
    CHECK(mu == Catch::Approx(0.0).margin(1e-9));
    double var = 0.0;
    for (double v : z) var += (v - mu) * (v - mu);
    var /= static_cast<double>(z.size());
    CHECK(var == Catch::Approx(1.0).margin(1e-9));
}
