#pragma once

// Minimal plot emission: anomaly-score curves with shaded ground-truth
// intervals (PNG + SVG) and grayscale heat-map grids, each with a JSON
// sidecar carrying the numbers so tests assert values rather than pixels.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hf2vad/tensorstore.hpp"

namespace hf2vad {

struct Rgb {
    unsigned char r, g, b;
};

class Canvas {
public:
    Canvas(int w, int h, Rgb bg = {255, 255, 255}) : w_(w), h_(h), px_(static_cast<size_t>(w) * h) {
        for (auto& p : px_) p = bg;
    }
    int width() const { return w_; }
    int height() const { return h_; }

    void set(int x, int y, Rgb c) {
        if (x < 0 || x >= w_ || y < 0 || y >= h_) return;
        px_[static_cast<size_t>(y) * w_ + x] = c;
    }
    void fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
        for (int y = std::max(0, y0); y < std::min(h_, y1); ++y)
            for (int x = std::max(0, x0); x < std::min(w_, x1); ++x)
                px_[static_cast<size_t>(y) * w_ + x] = c;
    }
    void line(int x0, int y0, int x1, int y1, Rgb c) {
        int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
        int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        while (true) {
            set(x0, y0, c);
            if (x0 == x1 && y0 == y1) break;
            int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    }

    Tensor to_tensor() const {
        Tensor t({3, h_, w_});
        for (int y = 0; y < h_; ++y)
            for (int x = 0; x < w_; ++x) {
                const Rgb& p = px_[static_cast<size_t>(y) * w_ + x];
                t.at({0, y, x}) = p.r / 255.0f;
                t.at({1, y, x}) = p.g / 255.0f;
                t.at({2, y, x}) = p.b / 255.0f;
            }
        return t;
    }

private:
    int w_, h_;
    std::vector<Rgb> px_;
};

struct CurvePlot {
    std::string title;
    int64_t first_frame_index = 0;
    std::vector<double> values;
    std::vector<int> labels;  // optional, same length; 1 marks ground-truth anomaly
};

// PNG + SVG + JSON sidecar under `stem`.{png,svg,json}
inline void write_curve_plot(const CurvePlot& plot, const fs::path& stem) {
    const int W = 840, H = 240, ml = 10, mr = 10, mt = 10, mb = 10;
    int n = static_cast<int>(plot.values.size());
    double lo = 0.0, hi = 1.0;
    if (n > 0) {
        lo = hi = plot.values[0];
        for (double v : plot.values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (hi - lo < 1e-12) hi = lo + 1.0;
    }
    auto xpix = [&](int i) {
        return ml + (n > 1 ? static_cast<int>((W - ml - mr - 1) *
                                              (static_cast<double>(i) / (n - 1)))
                           : 0);
    };
    auto ypix = [&](double v) {
        return mt + static_cast<int>((H - mt - mb - 1) * (1.0 - (v - lo) / (hi - lo)));
    };

    Canvas canvas(W, H);
    if (!plot.labels.empty()) {
        int i = 0;
        while (i < n) {
            if (plot.labels[static_cast<size_t>(i)] == 1) {
                int j = i;
                while (j < n && plot.labels[static_cast<size_t>(j)] == 1) ++j;
                canvas.fill_rect(xpix(i), mt, xpix(j - 1) + 1, H - mb, {255, 214, 214});
                i = j;
            } else {
                ++i;
            }
        }
    }
    canvas.fill_rect(ml, H - mb, W - mr, H - mb + 1, {120, 120, 120});
    for (int i = 0; i + 1 < n; ++i)
        canvas.line(xpix(i), ypix(plot.values[static_cast<size_t>(i)]), xpix(i + 1),
                    ypix(plot.values[static_cast<size_t>(i + 1)]), {32, 64, 192});
    write_png(canvas.to_tensor(), fs::path(stem.string() + ".png"));

    // SVG
    std::ostringstream svg;
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H
        << "' viewBox='0 0 " << W << ' ' << H << "'>\n";
    svg << "<rect width='" << W << "' height='" << H << "' fill='white'/>\n";
    if (!plot.labels.empty()) {
        int i = 0;
        while (i < n) {
            if (plot.labels[static_cast<size_t>(i)] == 1) {
                int j = i;
                while (j < n && plot.labels[static_cast<size_t>(j)] == 1) ++j;
                svg << "<rect x='" << xpix(i) << "' y='" << mt << "' width='"
                    << xpix(j - 1) - xpix(i) + 1 << "' height='" << H - mt - mb
                    << "' fill='#ffd6d6'/>\n";
                i = j;
            } else {
                ++i;
            }
        }
    }
    svg << "<polyline fill='none' stroke='#2040c0' stroke-width='1.5' points='";
    for (int i = 0; i < n; ++i)
        svg << xpix(i) << ',' << ypix(plot.values[static_cast<size_t>(i)]) << ' ';
    svg << "'/>\n";
    if (!plot.title.empty())
        svg << "<text x='" << ml + 4 << "' y='" << mt + 12
            << "' font-family='monospace' font-size='11'>" << plot.title << "</text>\n";
    svg << "</svg>\n";
    write_file_bytes(fs::path(stem.string() + ".svg"), svg.str());

    nlohmann::json sidecar;
    sidecar["title"] = plot.title;
    sidecar["first_frame_index"] = plot.first_frame_index;
    sidecar["values"] = plot.values;
    if (!plot.labels.empty()) sidecar["labels"] = plot.labels;
    write_file_bytes(fs::path(stem.string() + ".json"), sidecar.dump(2) + "\n");
}

// Tiles (1,h,w) maps into a grid image, normalizing all tiles jointly.
inline Tensor compose_grid(const std::vector<Tensor>& tiles, int cols, int pad = 1) {
    if (tiles.empty()) throw ShapeError("compose_grid: no tiles");
    int64_t h = tiles[0].dim(1), w = tiles[0].dim(2);
    int rows = (static_cast<int>(tiles.size()) + cols - 1) / cols;
    Tensor grid({1, rows * (h + pad) - pad, cols * (w + pad) - pad});
    float lo = tiles[0][0], hi = tiles[0][0];
    for (const auto& t : tiles)
        for (int64_t i = 0; i < t.numel(); ++i) {
            lo = std::min(lo, t[i]);
            hi = std::max(hi, t[i]);
        }
    float scale = hi - lo > 1e-12f ? 1.0f / (hi - lo) : 1.0f;
    for (size_t k = 0; k < tiles.size(); ++k) {
        int r = static_cast<int>(k) / cols, c = static_cast<int>(k) % cols;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                grid.at({0, r * (h + pad) + y, c * (w + pad) + x}) =
                    (tiles[k].at({0, y, x}) - lo) * scale;
    }
    return grid;
}

}  // namespace hf2vad
