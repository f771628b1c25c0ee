#pragma once

// Tensor file format, PNG frame IO, dataset manifest, and spatio-temporal
// cube extraction.
//
// Tensor files ("HF2T") are bit-exact: magic, version byte, dtype byte
// (0 = float32), ndim byte, little-endian u32 dims, then the row-major
// float32 payload.

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hf2vad/tensor.hpp"

namespace hf2vad {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// TensorFile

namespace detail {

inline void put_u32le(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline uint32_t get_u32le(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
           static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

static_assert(sizeof(float) == 4, "float32 layout assumed");

}  // namespace detail

inline constexpr char kTensorMagic[4] = {'H', 'F', '2', 'T'};
inline constexpr uint8_t kTensorVersion = 1;
inline constexpr uint8_t kDtypeF32 = 0;
inline constexpr int kMaxTensorNdim = 8;

inline std::string encode_tensor(const Tensor& t) {
    if (t.ndim() > kMaxTensorNdim)
        throw FormatError("tensor ndim " + std::to_string(t.ndim()) + " exceeds limit 8");
    std::string out;
    out.append(kTensorMagic, 4);
    out.push_back(static_cast<char>(kTensorVersion));
    out.push_back(static_cast<char>(kDtypeF32));
    out.push_back(static_cast<char>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) {
        int64_t d = t.dim(i);
        if (d < 0 || d > 0xffffffffll) throw FormatError("dimension out of u32 range");
        detail::put_u32le(out, static_cast<uint32_t>(d));
    }
    size_t payload = static_cast<size_t>(t.numel()) * 4;
    size_t head = out.size();
    out.resize(head + payload);
    if (payload) std::memcpy(out.data() + head, t.data(), payload);
    return out;
}

inline Tensor decode_tensor(const unsigned char* p, size_t n) {
    if (n < 7) throw CorruptionError("tensor file shorter than header");
    if (std::memcmp(p, kTensorMagic, 4) != 0) throw FormatError("bad tensor file magic");
    if (p[4] != kTensorVersion)
        throw FormatError("unsupported tensor file version " + std::to_string(p[4]));
    if (p[5] != kDtypeF32) throw FormatError("unsupported dtype code " + std::to_string(p[5]));
    int ndim = p[6];
    if (ndim > kMaxTensorNdim) throw FormatError("ndim exceeds limit 8");
    size_t off = 7;
    if (n < off + static_cast<size_t>(ndim) * 4) throw CorruptionError("truncated dims");
    Shape shape(static_cast<size_t>(ndim));
    for (int i = 0; i < ndim; ++i) {
        shape[static_cast<size_t>(i)] = detail::get_u32le(p + off);
        off += 4;
    }
    Tensor t(shape);
    size_t payload = static_cast<size_t>(t.numel()) * 4;
    if (n < off + payload) throw CorruptionError("truncated payload");
    if (payload) std::memcpy(t.data(), p + off, payload);
    return t;
}

inline std::vector<unsigned char> read_file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError("cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_file_bytes(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DatasetError("cannot create " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DatasetError("short write to " + path.string());
}

inline void write_tensor(const Tensor& t, const fs::path& path) {
    write_file_bytes(path, encode_tensor(t));
}

inline Tensor read_tensor(const fs::path& path) {
    auto bytes = read_file_bytes(path);
    return decode_tensor(bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------
// PNG frames. Grayscale or RGB, 8-bit. Loaded as (C,H,W) floats in [0,1].

namespace detail {

struct PngReadCtx {
    const unsigned char* p;
    size_t n;
    size_t off;
};

inline void png_mem_read(png_structp png, png_bytep out, png_size_t len) {
    auto* ctx = static_cast<PngReadCtx*>(png_get_io_ptr(png));
    if (ctx->off + len > ctx->n) png_error(png, "png read past end");
    std::memcpy(out, ctx->p + ctx->off, len);
    ctx->off += len;
}

inline void png_mem_write(png_structp png, png_bytep data, png_size_t len) {
    auto* out = static_cast<std::string*>(png_get_io_ptr(png));
    out->append(reinterpret_cast<const char*>(data), len);
}

inline void png_mem_flush(png_structp) {}

}  // namespace detail

inline Tensor decode_png(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0)
        throw FormatError("not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    std::vector<png_bytep> rows;
    std::vector<unsigned char> raster;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("PNG decode failed");
    }
    detail::PngReadCtx ctx{bytes.data(), bytes.size(), 0};
    png_set_read_fn(png, &ctx, detail::png_mem_read);
    png_read_info(png, info);
    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    int channels = png_get_channels(png, info);
    size_t rowbytes = png_get_rowbytes(png, info);
    raster.resize(rowbytes * h);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = raster.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);

    Tensor t({channels, static_cast<int64_t>(h), static_cast<int64_t>(w)});
    float* dst = t.data();
    int64_t plane = static_cast<int64_t>(h) * w;
    for (png_uint_32 y = 0; y < h; ++y) {
        const unsigned char* src = raster.data() + y * rowbytes;
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                dst[c * plane + y * w + x] = static_cast<float>(src[x * channels + c]) / 255.0f;
    }
    return t;
}

// Expects a (C,H,W) tensor with C in {1,3}; values clamped to [0,1].
inline std::string encode_png(const Tensor& img) {
    if (img.ndim() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
        throw ShapeError("encode_png expects (C,H,W) with C in {1,3}, got " +
                         shape_str(img.shape()));
    int channels = static_cast<int>(img.dim(0));
    png_uint_32 h = static_cast<png_uint_32>(img.dim(1));
    png_uint_32 w = static_cast<png_uint_32>(img.dim(2));
    std::vector<unsigned char> raster(static_cast<size_t>(channels) * h * w);
    const float* src = img.data();
    int64_t plane = static_cast<int64_t>(h) * w;
    for (png_uint_32 y = 0; y < h; ++y)
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c) {
                float v = src[c * plane + y * w + x];
                v = std::min(1.0f, std::max(0.0f, v));
                raster[(static_cast<size_t>(y) * w + x) * channels + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0f));
            }

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    std::string out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw FormatError("PNG encode failed");
    }
    png_set_write_fn(png, &out, detail::png_mem_write, detail::png_mem_flush);
    png_set_IHDR(png, info, w, h, 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y)
        rows[y] = raster.data() + static_cast<size_t>(y) * w * channels;
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

inline void write_png(const Tensor& img, const fs::path& path) {
    write_file_bytes(path, encode_png(img));
}

inline Tensor read_png(const fs::path& path) { return decode_png(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// Dataset manifest: one JSON-lines file per split, one record per video.

struct Box {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    Box clamped(int width, int height) const {
        Box b;
        b.x0 = std::min(std::max(x0, 0), width);
        b.y0 = std::min(std::max(y0, 0), height);
        b.x1 = std::min(std::max(x1, 0), width);
        b.y1 = std::min(std::max(y1, 0), height);
        return b;
    }
    bool empty() const { return x1 <= x0 || y1 <= y0; }
};

struct VideoEntry {
    std::string video_id;
    std::vector<std::string> frames;            // image files, in temporal order
    std::vector<std::string> flows;             // one per consecutive frame pair
    std::vector<std::vector<Box>> boxes;        // per frame
    std::vector<int> labels;                    // per frame, test split only

    int64_t frame_count() const { return static_cast<int64_t>(frames.size()); }
};

struct DatasetManifest {
    std::vector<VideoEntry> videos;
    fs::path root;  // directory that relative paths resolve against

    const VideoEntry& video(const std::string& id) const {
        for (const auto& v : videos)
            if (v.video_id == id) return v;
        throw DatasetError("video_id not in manifest: " + id);
    }

    fs::path resolve(const std::string& rel) const { return root / rel; }

    void validate(bool expect_labels) const {
        for (const auto& v : videos) {
            if (v.flows.size() + 1 != v.frames.size())
                throw DatasetError("video " + v.video_id + ": |flows| must equal |frames|-1");
            if (v.boxes.size() != v.frames.size())
                throw DatasetError("video " + v.video_id + ": box list must cover every frame");
            if (expect_labels && v.labels.size() != v.frames.size())
                throw DatasetError("video " + v.video_id + ": labels must cover every frame");
            if (!expect_labels && !v.labels.empty())
                throw DatasetError("video " + v.video_id + ": labels only belong to the test split");
        }
    }
};

inline void save_manifest(const DatasetManifest& m, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DatasetError("cannot create " + path.string());
    for (const auto& v : m.videos) {
        nlohmann::json rec;
        rec["video_id"] = v.video_id;
        rec["frames"] = v.frames;
        rec["flows"] = v.flows;
        nlohmann::json boxes = nlohmann::json::array();
        for (const auto& per_frame : v.boxes) {
            nlohmann::json bl = nlohmann::json::array();
            for (const auto& b : per_frame) bl.push_back({b.x0, b.y0, b.x1, b.y1});
            boxes.push_back(bl);
        }
        rec["boxes"] = boxes;
        if (!v.labels.empty()) rec["labels"] = v.labels;
        out << rec.dump() << '\n';
    }
}

inline DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DatasetError("cannot open manifest " + path.string());
    DatasetManifest m;
    m.root = path.has_parent_path() ? path.parent_path() : fs::path(".");
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
        VideoEntry v;
        v.video_id = rec.at("video_id").get<std::string>();
        v.frames = rec.at("frames").get<std::vector<std::string>>();
        v.flows = rec.at("flows").get<std::vector<std::string>>();
        for (const auto& bl : rec.at("boxes")) {
            std::vector<Box> per_frame;
            for (const auto& b : bl)
                per_frame.push_back(Box{b.at(0).get<int>(), b.at(1).get<int>(),
                                        b.at(2).get<int>(), b.at(3).get<int>()});
            v.boxes.push_back(std::move(per_frame));
        }
        if (rec.contains("labels")) v.labels = rec["labels"].get<std::vector<int>>();
        m.videos.push_back(std::move(v));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Bilinear resize of a (C,H,W) crop to (C,size,size). Pixel centers at
// half-integer coordinates; when the output size equals the input size the
// map is the identity.

inline Tensor resize_bilinear(const Tensor& img, int64_t out_h, int64_t out_w) {
    if (img.ndim() != 3) throw ShapeError("resize expects (C,H,W)");
    int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (h < 1 || w < 1) throw ShapeError("resize of empty image");
    Tensor out = Tensor::uninit({c, out_h, out_w});
    float sy = static_cast<float>(h) / static_cast<float>(out_h);
    float sx = static_cast<float>(w) / static_cast<float>(out_w);
    const float* src = img.data();
    float* dst = out.data();
    for (int64_t oy = 0; oy < out_h; ++oy) {
        float fy = (static_cast<float>(oy) + 0.5f) * sy - 0.5f;
        int64_t y0 = static_cast<int64_t>(std::floor(fy));
        float wy = fy - static_cast<float>(y0);
        int64_t y0c = std::min(std::max(y0, int64_t{0}), h - 1);
        int64_t y1c = std::min(std::max(y0 + 1, int64_t{0}), h - 1);
        for (int64_t ox = 0; ox < out_w; ++ox) {
            float fx = (static_cast<float>(ox) + 0.5f) * sx - 0.5f;
            int64_t x0 = static_cast<int64_t>(std::floor(fx));
            float wx = fx - static_cast<float>(x0);
            int64_t x0c = std::min(std::max(x0, int64_t{0}), w - 1);
            int64_t x1c = std::min(std::max(x0 + 1, int64_t{0}), w - 1);
            for (int64_t ch = 0; ch < c; ++ch) {
                const float* plane = src + ch * h * w;
                float v00 = plane[y0c * w + x0c];
                float v01 = plane[y0c * w + x1c];
                float v10 = plane[y1c * w + x0c];
                float v11 = plane[y1c * w + x1c];
                float top = v00 + (v01 - v00) * wx;
                float bot = v10 + (v11 - v10) * wx;
                dst[(ch * out_h + oy) * out_w + ox] = top + (bot - top) * wy;
            }
        }
    }
    return out;
}

inline Tensor crop(const Tensor& img, const Box& b) {
    int64_t c = img.dim(0);
    Tensor out = Tensor::uninit({c, b.y1 - b.y0, b.x1 - b.x0});
    int64_t h = img.dim(1), w = img.dim(2);
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = b.y0; y < b.y1; ++y)
            std::memcpy(out.data() + ((ch * (b.y1 - b.y0)) + (y - b.y0)) * (b.x1 - b.x0),
                        img.data() + (ch * h + y) * w + b.x0,
                        static_cast<size_t>(b.x1 - b.x0) * 4);
    return out;
}

// ---------------------------------------------------------------------------
// STC extraction

struct STCPair {
    Tensor frames;  // (t+1, C, size, size), values in [0,1]
    Tensor flows;   // (t, 2, size, size)
    std::string video_id;
    int64_t target_frame_index = 0;
    Box box;
    int label = 0;  // frame label at the target index when the split has labels
};

// Streams STCs for one video in deterministic order (target index, then box
// order). Frames are decoded once each thanks to a sliding window.
inline void extract_stcs(const DatasetManifest& manifest, const std::string& video_id, int t,
                         int size, const std::function<void(STCPair&&)>& sink,
                         std::ostream* warn = nullptr) {
    if (t < 1) throw ConfigError("extract_stcs: t must be >= 1");
    if (size < 8) throw ConfigError("extract_stcs: size must be >= 8");
    const VideoEntry& v = manifest.video(video_id);
    int64_t n = v.frame_count();

    std::vector<Tensor> frame_cache(static_cast<size_t>(n));
    std::vector<Tensor> flow_cache(static_cast<size_t>(std::max<int64_t>(n - 1, 0)));
    auto frame_at = [&](int64_t i) -> const Tensor& {
        auto& slot = frame_cache[static_cast<size_t>(i)];
        if (slot.empty()) slot = read_png(manifest.resolve(v.frames[static_cast<size_t>(i)]));
        return slot;
    };
    auto flow_at = [&](int64_t i) -> const Tensor& {
        auto& slot = flow_cache[static_cast<size_t>(i)];
        if (slot.empty()) {
            fs::path p = manifest.resolve(v.flows[static_cast<size_t>(i)]);
            if (!fs::exists(p)) throw DatasetError("missing flow file " + p.string());
            slot = read_tensor(p);
            if (slot.ndim() != 3 || slot.dim(0) != 2)
                throw DatasetError("flow file " + p.string() + " must be (2,H,W)");
        }
        return slot;
    };

    for (int64_t i = t; i < n; ++i) {
        const auto& per_frame = v.boxes[static_cast<size_t>(i)];
        for (const Box& raw : per_frame) {
            const Tensor& probe = frame_at(i);
            int w = static_cast<int>(probe.dim(2)), h = static_cast<int>(probe.dim(1));
            Box b = raw.clamped(w, h);
            if (b.empty()) {
                if (warn)
                    (*warn) << "warning: " << video_id << " frame " << i
                            << ": box degenerate after clamping, skipped\n";
                continue;
            }
            int64_t channels = probe.dim(0);
            STCPair stc;
            stc.video_id = video_id;
            stc.target_frame_index = i;
            stc.box = b;
            if (!v.labels.empty()) stc.label = v.labels[static_cast<size_t>(i)];
            stc.frames = Tensor({t + 1, channels, size, size});
            stc.flows = Tensor({t, 2, size, size});
            for (int k = 0; k <= t; ++k) {
                Tensor patch = resize_bilinear(crop(frame_at(i - t + k), b), size, size);
                std::memcpy(stc.frames.data() + static_cast<int64_t>(k) * channels * size * size,
                            patch.data(), static_cast<size_t>(patch.numel()) * 4);
            }
            for (int k = 0; k < t; ++k) {
                Tensor patch = resize_bilinear(crop(flow_at(i - t + k), b), size, size);
                std::memcpy(stc.flows.data() + static_cast<int64_t>(k) * 2 * size * size,
                            patch.data(), static_cast<size_t>(patch.numel()) * 4);
            }
            sink(std::move(stc));
        }
        // drop cache entries that can no longer be referenced
        frame_cache[static_cast<size_t>(i - t)] = Tensor();
        if (i - t < static_cast<int64_t>(flow_cache.size()))
            flow_cache[static_cast<size_t>(i - t)] = Tensor();
    }
}

inline std::vector<STCPair> extract_stcs_all(const DatasetManifest& manifest,
                                             const std::string& video_id, int t, int size,
                                             std::ostream* warn = nullptr) {
    std::vector<STCPair> out;
    extract_stcs(manifest, video_id, t, size, [&](STCPair&& s) { out.push_back(std::move(s)); },
                 warn);
    return out;
}

}  // namespace hf2vad
