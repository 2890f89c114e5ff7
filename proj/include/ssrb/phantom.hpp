#ifndef SSRB_PHANTOM_HPP
#define SSRB_PHANTOM_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ssrb/core/errors.hpp"
#include "ssrb/core/hash.hpp"
#include "ssrb/core/image.hpp"
#include "ssrb/core/rng.hpp"

namespace ssrb {

using json = nlohmann::json;

// ------------------------------- domain types -------------------------------

struct Ellipse {
    double cx = 0, cy = 0;  // center, pixel units
    double rx = 0, ry = 0;  // semi-axes
    double angle = 0;       // radians, CCW

    // squared normalized radius; <= 1 means inside
    double rho2(double x, double y) const {
        double dx = x - cx, dy = y - cy;
        double ca = std::cos(angle), sa = std::sin(angle);
        double u = (dx * ca + dy * sa) / rx;
        double v = (-dx * sa + dy * ca) / ry;
        return u * u + v * v;
    }
    bool contains(double x, double y) const { return rho2(x, y) <= 1.0; }
};

// Canonical organ vocabulary; order is the caption order.
inline const std::vector<std::string>& organ_vocabulary() {
    static const std::vector<std::string> v = {"liver",  "spleen",   "kidney",
                                               "aorta",  "vertebra", "bowel"};
    return v;
}

inline int organ_vocab_index(const std::string& name) {
    const auto& v = organ_vocabulary();
    for (size_t i = 0; i < v.size(); i++)
        if (v[i] == name) return static_cast<int>(i);
    return -1;
}

struct Organ {
    std::string name;
    Ellipse region;
    float mean_hu = 0.0f;
};

struct AnatomyMeta {
    Ellipse body;
    std::vector<Organ> organs;
};

// 2-D grayscale slice in Hounsfield units, optionally with known anatomy.
struct SliceImage {
    Image hu;
    std::optional<AnatomyMeta> meta;
};

// Image after HU windowing; all model I/O uses this. Pixels in [0, 1].
struct NormalizedImage {
    Image px;
    std::optional<AnatomyMeta> meta;
};

struct HuWindow {
    float hu_lo = -135.0f;
    float hu_hi = 215.0f;
};

// --------------------------------- JSON -----------------------------------

inline void to_json(json& j, const Ellipse& e) {
    j = json{{"cx", e.cx}, {"cy", e.cy}, {"rx", e.rx}, {"ry", e.ry}, {"angle", e.angle}};
}
inline void from_json(const json& j, Ellipse& e) {
    j.at("cx").get_to(e.cx);
    j.at("cy").get_to(e.cy);
    j.at("rx").get_to(e.rx);
    j.at("ry").get_to(e.ry);
    j.at("angle").get_to(e.angle);
}
inline void to_json(json& j, const Organ& o) {
    j = json{{"name", o.name}, {"region", o.region}, {"mean_hu", o.mean_hu}};
}
inline void from_json(const json& j, Organ& o) {
    j.at("name").get_to(o.name);
    j.at("region").get_to(o.region);
    j.at("mean_hu").get_to(o.mean_hu);
}
inline void to_json(json& j, const AnatomyMeta& m) {
    j = json{{"body", m.body}, {"organs", m.organs}};
}
inline void from_json(const json& j, AnatomyMeta& m) {
    j.at("body").get_to(m.body);
    j.at("organs").get_to(m.organs);
}

// ------------------------------- operations --------------------------------

namespace detail {

// Value noise: coarse seeded grid, cosine-smoothed bilinear interpolation.
// Low-frequency texture so super-resolution has structure to recover.
struct ValueNoise {
    int step;
    int gw, gh;
    std::vector<float> g;

    ValueNoise(int h, int w, int step_, rng::Stream& s) : step(step_) {
        gw = w / step + 2;
        gh = h / step + 2;
        g.resize(static_cast<size_t>(gw) * gh);
        for (auto& x : g) x = s.uniformf(-1.0f, 1.0f);
    }

    float at(int y, int x) const {
        double fx = static_cast<double>(x) / step;
        double fy = static_cast<double>(y) / step;
        int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
        double tx = fx - x0, ty = fy - y0;
        // cosine smoothing
        tx = 0.5 - 0.5 * std::cos(3.14159265358979323846 * tx);
        ty = 0.5 - 0.5 * std::cos(3.14159265358979323846 * ty);
        auto at_g = [&](int yy, int xx) {
            return static_cast<double>(g[static_cast<size_t>(yy) * gw + xx]);
        };
        double a = at_g(y0, x0) * (1 - tx) + at_g(y0, x0 + 1) * tx;
        double b = at_g(y0 + 1, x0) * (1 - tx) + at_g(y0 + 1, x0 + 1) * tx;
        return static_cast<float>(a * (1 - ty) + b * ty);
    }
};

// Feathered ellipse coverage: ~1 inside, ~0 outside, smooth over ~1.5 px.
inline float ellipse_coverage(const Ellipse& e, double x, double y) {
    double rho = std::sqrt(e.rho2(x, y));
    double d   = (1.0 - rho) * std::min(e.rx, e.ry);  // approx signed distance, px
    double t   = d / 1.5 + 0.5;
    if (t <= 0.0) return 0.0f;
    if (t >= 1.0) return 1.0f;
    return static_cast<float>(t * t * (3.0 - 2.0 * t));
}

// True if the whole organ ellipse (with margin, px) sits inside the body.
inline bool region_inside_body(const Ellipse& organ, const Ellipse& body, double margin) {
    for (int i = 0; i < 24; i++) {
        double th = 2.0 * 3.14159265358979323846 * i / 24;
        double ca = std::cos(organ.angle), sa = std::sin(organ.angle);
        double u = organ.rx * std::cos(th), v = organ.ry * std::sin(th);
        double x = organ.cx + u * ca - v * sa;
        double y = organ.cy + u * sa + v * ca;
        Ellipse shrunk = body;
        shrunk.rx      = std::max(1.0, body.rx - margin);
        shrunk.ry      = std::max(1.0, body.ry - margin);
        if (!shrunk.contains(x, y)) return false;
    }
    return true;
}

struct OrganTemplate {
    const char* name;
    float hu, hu_jitter;
    double rlo, rhi;    // semi-axis range as fraction of body rx
    double aspect_lo, aspect_hi;
};

inline const std::vector<OrganTemplate>& organ_templates() {
    // plausible HU: soft tissue ~40, liver ~60, bone ~400
    static const std::vector<OrganTemplate> t = {
        {"liver", 60.0f, 8.0f, 0.30, 0.45, 0.6, 0.9},
        {"spleen", 55.0f, 8.0f, 0.14, 0.24, 0.6, 0.9},
        {"kidney", 45.0f, 8.0f, 0.10, 0.18, 0.5, 0.8},
        {"aorta", 50.0f, 5.0f, 0.04, 0.07, 0.85, 1.0},
        {"vertebra", 400.0f, 50.0f, 0.10, 0.16, 0.7, 1.0},
        {"bowel", 20.0f, 10.0f, 0.14, 0.28, 0.5, 0.9},
    };
    return t;
}

}  // namespace detail

// Synthetic abdomen-like slice: body ellipse on air, 2-6 organ ellipses with
// plausible HU, low-frequency texture (amplitude 15 HU), populated meta.
inline SliceImage generate_phantom(uint64_t seed, int size) {
    if (size != 64 && size != 128 && size != 256)
        throw ConfigError("generate_phantom: size must be one of {64, 128, 256}");

    rng::Stream s = rng::derive_stream(seed, "phantom");
    const double W = size, H = size;

    AnatomyMeta meta;
    meta.body.cx    = W * 0.5 + s.uniform(-0.03, 0.03) * W;
    meta.body.cy    = H * 0.5 + s.uniform(-0.03, 0.03) * H;
    meta.body.rx    = W * s.uniform(0.38, 0.44);
    meta.body.ry    = H * s.uniform(0.30, 0.37);
    meta.body.angle = s.uniform(-0.08, 0.08);

    int organ_count = static_cast<int>(s.uniform_int(2, 6));
    // random subset of the vocabulary, partial Fisher-Yates
    std::vector<int> order(detail::organ_templates().size());
    for (size_t i = 0; i < order.size(); i++) order[i] = static_cast<int>(i);
    for (int i = 0; i < organ_count; i++) {
        int j = static_cast<int>(s.uniform_int(i, static_cast<int64_t>(order.size()) - 1));
        std::swap(order[i], order[j]);
    }

    for (int i = 0; i < organ_count; i++) {
        const auto& tpl = detail::organ_templates()[order[i]];
        Organ organ;
        organ.name    = tpl.name;
        organ.mean_hu = tpl.hu + s.uniformf(-tpl.hu_jitter, tpl.hu_jitter);
        double rx     = meta.body.rx * s.uniform(tpl.rlo, tpl.rhi);
        double ry     = rx * s.uniform(tpl.aspect_lo, tpl.aspect_hi);
        double angle  = s.uniform(0.0, 3.14159265358979323846);
        bool placed   = false;
        for (int shrink = 0; shrink < 8 && !placed; shrink++) {
            for (int attempt = 0; attempt < 50; attempt++) {
                double u = s.uniform(), th = s.uniform(0.0, 2 * 3.14159265358979323846);
                double rad = std::sqrt(u) * 0.75;
                Ellipse e;
                e.cx    = meta.body.cx + rad * meta.body.rx * std::cos(th);
                e.cy    = meta.body.cy + rad * meta.body.ry * std::sin(th);
                e.rx    = rx;
                e.ry    = ry;
                e.angle = angle;
                if (!detail::region_inside_body(e, meta.body, 2.0)) continue;
                bool clash = false;
                for (const auto& prev : meta.organs) {
                    double d = std::hypot(e.cx - prev.region.cx, e.cy - prev.region.cy);
                    if (d < 0.55 * (std::max(e.rx, e.ry) +
                                    std::max(prev.region.rx, prev.region.ry))) {
                        clash = true;
                        break;
                    }
                }
                if (clash && attempt < 40) continue;
                organ.region = e;
                placed       = true;
                break;
            }
            if (!placed) {
                rx *= 0.75;
                ry *= 0.75;
            }
        }
        if (!placed) {
            // last resort: centered, tiny
            organ.region = {meta.body.cx, meta.body.cy, std::max(2.0, rx * 0.5),
                            std::max(2.0, ry * 0.5), angle};
        }
        meta.organs.push_back(organ);
    }

    detail::ValueNoise texture(size, size, std::max(8, size / 8), s);

    SliceImage out;
    out.hu = Image(size, size, -1000.0f);
    const float soft_tissue = 40.0f;
    for (int y = 0; y < size; y++) {
        for (int x = 0; x < size; x++) {
            float body_cov = detail::ellipse_coverage(meta.body, x, y);
            if (body_cov <= 0.0f) continue;  // air stays -1000
            float tex = 15.0f * texture.at(y, x);
            float val = soft_tissue + tex;
            for (const auto& organ : meta.organs) {
                float cov = detail::ellipse_coverage(organ.region, x, y);
                if (cov > 0.0f) val = val * (1.0f - cov) + (organ.mean_hu + tex) * cov;
            }
            out.hu.at(y, x) = -1000.0f * (1.0f - body_cov) + val * body_cov;
        }
    }
    out.meta = meta;
    return out;
}

inline SliceImage clip_hu(const SliceImage& img, float hu_lo = -135.0f, float hu_hi = 215.0f) {
    if (!(hu_lo < hu_hi)) throw PreconditionError("clip_hu: hu_lo must be < hu_hi");
    SliceImage out = img;
    out.hu.clamp(hu_lo, hu_hi);
    return out;
}

inline NormalizedImage normalize(const SliceImage& img, float hu_lo = -135.0f,
                                 float hu_hi = 215.0f) {
    if (!(hu_lo < hu_hi)) throw PreconditionError("normalize: hu_lo must be < hu_hi");
    for (float v : img.hu.v)
        if (v < hu_lo || v > hu_hi)
            throw PreconditionError("normalize: input not clipped to the HU window");
    NormalizedImage out;
    out.px = img.hu;
    float span = hu_hi - hu_lo;
    for (auto& v : out.px.v) v = (v - hu_lo) / span;
    out.meta = img.meta;
    return out;
}

// Raw slice ingestion: width*height little-endian u16, HU = raw*slope + intercept.
inline SliceImage load_slice_raw(const std::filesystem::path& path, int width, int height,
                                 float slope, float intercept) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    f.seekg(0, std::ios::end);
    auto bytes = static_cast<size_t>(f.tellg());
    f.seekg(0);
    size_t expect = static_cast<size_t>(width) * height * 2;
    if (bytes != expect)
        throw FormatError("raw slice size mismatch: got " + std::to_string(bytes) +
                          " bytes, expected " + std::to_string(expect));
    std::vector<uint16_t> raw(static_cast<size_t>(width) * height);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
    if (!f) throw IoError("read failed: " + path.string());
    SliceImage out;
    out.hu = Image(height, width);
    for (size_t i = 0; i < raw.size(); i++)
        out.hu.v[i] = static_cast<float>(raw[i]) * slope + intercept;
    return out;
}

// ------------------------------ dataset build -------------------------------

struct DatasetConfig {
    int train_count = 512;
    int test_count  = 64;
    int size        = 128;
    uint64_t seed   = 1;
    HuWindow window;
    std::filesystem::path out_dir;
};

struct ManifestItem {
    std::string image;  // path relative to manifest dir
    std::string meta;
    uint64_t seed = 0;
};

struct DatasetManifest {
    std::string split;  // "train" | "test"
    int size = 0;
    HuWindow window;
    std::string config_hash;
    uint64_t global_seed = 0;
    std::vector<ManifestItem> items;
    std::filesystem::path dir;  // where the manifest lives (not serialized)
};

inline void to_json(json& j, const ManifestItem& it) {
    j = json{{"image", it.image}, {"meta", it.meta}, {"seed", it.seed}};
}
inline void from_json(const json& j, ManifestItem& it) {
    j.at("image").get_to(it.image);
    j.at("meta").get_to(it.meta);
    j.at("seed").get_to(it.seed);
}
inline void to_json(json& j, const DatasetManifest& m) {
    j = json{{"split", m.split},
             {"size", m.size},
             {"window", {{"hu_lo", m.window.hu_lo}, {"hu_hi", m.window.hu_hi}}},
             {"created_with", {{"config_hash", m.config_hash}, {"seed", m.global_seed}}},
             {"items", m.items}};
}
inline void from_json(const json& j, DatasetManifest& m) {
    j.at("split").get_to(m.split);
    j.at("size").get_to(m.size);
    j.at("window").at("hu_lo").get_to(m.window.hu_lo);
    j.at("window").at("hu_hi").get_to(m.window.hu_hi);
    j.at("created_with").at("config_hash").get_to(m.config_hash);
    j.at("created_with").at("seed").get_to(m.global_seed);
    j.at("items").get_to(m.items);
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw FormatError("manifest parse error in " + path.string() + ": " + e.what());
    }
    DatasetManifest m = j.get<DatasetManifest>();
    m.dir             = path.parent_path();
    return m;
}

// Regenerates the normalized image + meta for one manifest item from its seed.
inline NormalizedImage regenerate_item(const DatasetManifest& m, size_t index) {
    const auto& it = m.items.at(index);
    SliceImage ph  = generate_phantom(it.seed, m.size);
    return normalize(clip_hu(ph, m.window.hu_lo, m.window.hu_hi), m.window.hu_lo,
                     m.window.hu_hi);
}

struct DatasetPair {
    DatasetManifest train;
    DatasetManifest test;
};

// Generates, windows, normalizes and persists both splits. Train/test seed
// ranges are disjoint by construction; everything is a pure function of the
// config, so rebuilding gives byte-identical outputs.
inline DatasetPair build_dataset(const DatasetConfig& cfg) {
    if (cfg.size != 64 && cfg.size != 128 && cfg.size != 256)
        throw ConfigError("build_dataset: size must be one of {64, 128, 256}");
    if (cfg.train_count < 1 || cfg.test_count < 1)
        throw ConfigError("build_dataset: counts must be positive");
    make_dirs(cfg.out_dir / "train");
    make_dirs(cfg.out_dir / "test");

    json cfg_j = {{"train_count", cfg.train_count}, {"test_count", cfg.test_count},
                  {"size", cfg.size},               {"seed", cfg.seed},
                  {"hu_lo", cfg.window.hu_lo},      {"hu_hi", cfg.window.hu_hi}};
    std::string cfg_hash = sha256_hex(cfg_j.dump());

    auto build_split = [&](const std::string& split, int count,
                           uint64_t seed_base) -> DatasetManifest {
        DatasetManifest m;
        m.split       = split;
        m.size        = cfg.size;
        m.window      = cfg.window;
        m.config_hash = cfg_hash;
        m.global_seed = cfg.seed;
        m.dir         = cfg.out_dir;
        for (int i = 0; i < count; i++) {
            uint64_t item_seed = seed_base + static_cast<uint64_t>(i);
            SliceImage ph      = generate_phantom(item_seed, cfg.size);
            NormalizedImage ni = normalize(clip_hu(ph, cfg.window.hu_lo, cfg.window.hu_hi),
                                           cfg.window.hu_lo, cfg.window.hu_hi);
            char name[64];
            std::snprintf(name, sizeof(name), "%s/img_%04d", split.c_str(), i);
            ManifestItem item;
            item.image = std::string(name) + ".ssrb";
            item.meta  = std::string(name) + ".meta.json";
            item.seed  = item_seed;
            write_image_ssrb(cfg.out_dir / item.image, ni.px);
            json meta_j = {{"seed", item_seed}, {"anatomy", *ph.meta}};
            atomic_write_file(cfg.out_dir / item.meta, meta_j.dump(2) + "\n");
            m.items.push_back(item);
        }
        json mj;
        to_json(mj, m);
        atomic_write_file(cfg.out_dir / (split + ".manifest.json"), mj.dump(2) + "\n");
        return m;
    };

    DatasetPair pair;
    pair.train = build_split("train", cfg.train_count, cfg.seed);
    pair.test  = build_split("test", cfg.test_count,
                             cfg.seed + static_cast<uint64_t>(cfg.train_count));
    return pair;
}

inline NormalizedImage load_dataset_item(const DatasetManifest& m, size_t index) {
    const auto& it = m.items.at(index);
    NormalizedImage ni;
    ni.px  = read_image_ssrb(m.dir / it.image);
    json j = json::parse(read_text_file(m.dir / it.meta));
    if (j.contains("anatomy")) ni.meta = j.at("anatomy").get<AnatomyMeta>();
    return ni;
}

}  // namespace ssrb

#endif
