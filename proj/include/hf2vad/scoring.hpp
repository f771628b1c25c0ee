#pragma once

// Anomaly scoring: per-STC error cues, training-set normalization statistics,
// weighted fusion, per-frame max pooling, median smoothing, and AUROC.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "hf2vad/tensor.hpp"

namespace hf2vad {

// mean of squared differences; shared convention for S_r and S_p
inline double mean_sq_error(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("score: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    if (a.numel() == 0) throw ShapeError("score: empty tensors");
    double acc = 0.0;
    const float* pa = a.data();
    const float* pb = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.numel());
}

inline double recon_error(const Tensor& y, const Tensor& y_hat) { return mean_sq_error(y, y_hat); }
inline double pred_error(const Tensor& x, const Tensor& x_hat) { return mean_sq_error(x, x_hat); }

struct ScoreStats {
    double mu_r = 0.0, sigma_r = 1.0;
    double mu_p = 0.0, sigma_p = 1.0;
    double w_r = 1.0, w_p = 1.0;
    // smallest fused training score; assigned to frames without objects
    double min_fused = 0.0;
};

inline double fuse(double s_r, double s_p, const ScoreStats& st) {
    return st.w_r * (s_r - st.mu_r) / st.sigma_r + st.w_p * (s_p - st.mu_p) / st.sigma_p;
}

// Population mean/std over the training scores of both cues. Degenerate
// (constant) score lists are an error.
inline ScoreStats fit_stats(const std::vector<double>& train_s_r,
                            const std::vector<double>& train_s_p, double w_r, double w_p) {
    if (train_s_r.size() < 2 || train_s_p.size() < 2)
        throw StatsError("fit_stats: need at least 2 training scores per cue");
    auto moments = [](const std::vector<double>& xs) {
        double mu = 0.0;
        for (double v : xs) mu += v;
        mu /= static_cast<double>(xs.size());
        double var = 0.0;
        for (double v : xs) var += (v - mu) * (v - mu);
        var /= static_cast<double>(xs.size());
        return std::pair<double, double>(mu, std::sqrt(var));
    };
    ScoreStats st;
    st.w_r = w_r;
    st.w_p = w_p;
    std::tie(st.mu_r, st.sigma_r) = moments(train_s_r);
    std::tie(st.mu_p, st.sigma_p) = moments(train_s_p);
    if (st.sigma_r <= 0.0) throw StatsError("fit_stats: reconstruction scores are constant");
    if (st.sigma_p <= 0.0) throw StatsError("fit_stats: prediction scores are constant");
    if (train_s_r.size() != train_s_p.size())
        throw StatsError("fit_stats: cue lists must be paired");
    st.min_fused = fuse(train_s_r[0], train_s_p[0], st);
    for (size_t i = 1; i < train_s_r.size(); ++i)
        st.min_fused = std::min(st.min_fused, fuse(train_s_r[i], train_s_p[i], st));
    return st;
}

// one scored object within a frame
struct ObjectScore {
    int64_t frame_index = 0;
    double s_r = 0.0;
    double s_p = 0.0;
};

struct FrameRecord {
    int64_t frame_index = 0;
    int object_count = 0;
    // cues of the highest-fused object in the frame (unset when empty)
    std::optional<double> s_r, s_p;
    double fused = 0.0;
    double smoothed = 0.0;
    std::optional<int> label;
};

struct FrameScoreSeries {
    std::string video_id;
    std::vector<FrameRecord> records;  // frames t .. frame_count-1, in order

    std::vector<double> fused_values() const {
        std::vector<double> v;
        v.reserve(records.size());
        for (const auto& r : records) v.push_back(r.fused);
        return v;
    }
    std::vector<double> smoothed_values() const {
        std::vector<double> v;
        v.reserve(records.size());
        for (const auto& r : records) v.push_back(r.smoothed);
        return v;
    }
};

// Frame score = max fused score over the frame's objects; frames without
// objects receive the training-minimum sentinel. Frames before index t are
// unscored and excluded.
inline FrameScoreSeries frame_scores(const std::string& video_id, int t, int64_t frame_count,
                                     const std::vector<ObjectScore>& objects,
                                     const ScoreStats& stats,
                                     const std::vector<int>* labels = nullptr) {
    FrameScoreSeries out;
    out.video_id = video_id;
    if (frame_count <= t) return out;
    out.records.resize(static_cast<size_t>(frame_count - t));
    for (size_t i = 0; i < out.records.size(); ++i) {
        auto& r = out.records[i];
        r.frame_index = static_cast<int64_t>(i) + t;
        r.fused = stats.min_fused;
        if (labels) r.label = (*labels)[static_cast<size_t>(r.frame_index)];
    }
    for (const auto& obj : objects) {
        if (obj.frame_index < t || obj.frame_index >= frame_count)
            throw ValueError("frame_scores: object at unscored frame " +
                             std::to_string(obj.frame_index));
        auto& r = out.records[static_cast<size_t>(obj.frame_index - t)];
        double f = fuse(obj.s_r, obj.s_p, stats);
        if (r.object_count == 0 || f > r.fused) {
            r.fused = f;
            r.s_r = obj.s_r;
            r.s_p = obj.s_p;
        }
        r.object_count += 1;
    }
    return out;
}

// centered median filter with edge replication
inline std::vector<double> median_smooth(const std::vector<double>& xs, int window = 17) {
    if (window < 1 || window % 2 == 0)
        throw ConfigError("median_smooth: window must be odd and >= 1");
    if (xs.empty() || window == 1) return xs;
    int64_t n = static_cast<int64_t>(xs.size());
    int64_t r = window / 2;
    std::vector<double> out(xs.size());
    std::vector<double> buf(static_cast<size_t>(window));
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t k = -r; k <= r; ++k) {
            int64_t j = std::min(n - 1, std::max<int64_t>(0, i + k));
            buf[static_cast<size_t>(k + r)] = xs[static_cast<size_t>(j)];
        }
        std::sort(buf.begin(), buf.end());
        out[static_cast<size_t>(i)] = buf[static_cast<size_t>(r)];
    }
    return out;
}

// Frame-level AUROC: P(score_pos > score_neg) + 0.5 P(tie), computed exactly
// via sorted tie groups. Requires both classes.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("auroc: length mismatch");
    int64_t pos = 0, neg = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw ValueError("auroc: labels must be 0/1");
        l ? ++pos : ++neg;
    }
    if (pos == 0 || neg == 0)
        throw StatsError("auroc: undefined, needs both normal and anomalous frames");
    std::vector<size_t> idx(scores.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    double u = 0.0;
    int64_t neg_below = 0;
    size_t i = 0;
    while (i < idx.size()) {
        size_t j = i;
        int64_t p = 0, q = 0;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            labels[idx[j]] ? ++p : ++q;
            ++j;
        }
        u += static_cast<double>(p) * static_cast<double>(neg_below) +
             0.5 * static_cast<double>(p) * static_cast<double>(q);
        neg_below += q;
        i = j;
    }
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

// Fusion weight presets (w_r, w_p) for the reference benchmarks.
inline std::pair<double, double> fusion_preset(const std::string& dataset) {
    if (dataset == "ped2") return {1.0, 0.1};
    if (dataset == "avenue") return {0.05, 1.0};
    if (dataset == "shanghaitech") return {0.02, 1.0};
    throw ConfigError("unknown fusion preset: " + dataset);
}

// z-normalization within one series (per-video normalization option)
inline std::vector<double> normalize_series(const std::vector<double>& xs) {
    if (xs.empty()) return xs;
    double mu = 0.0;
    for (double v : xs) mu += v;
    mu /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double v : xs) var += (v - mu) * (v - mu);
    var /= static_cast<double>(xs.size());
    double sd = std::sqrt(var);
    std::vector<double> out(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) out[i] = sd > 0.0 ? (xs[i] - mu) / sd : 0.0;
    return out;
}

}  // namespace hf2vad
