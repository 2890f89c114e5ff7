#ifndef SSRB_DEGRADE_HPP
#define SSRB_DEGRADE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "ssrb/core/errors.hpp"
#include "ssrb/core/image.hpp"
#include "ssrb/core/rng.hpp"
#include "ssrb/phantom.hpp"

namespace ssrb {

// ------------------------------- dose noise ---------------------------------

struct DoseParams {
    float blank_flux = 5.0e4f;  // photons per detector element
    float mu_scale   = 4.0f;    // attenuation proxy coefficient
};

// Image-domain surrogate for projection-domain dose noise: treat each pixel as
// a line integral, draw the photon count, log-transform back.
inline NormalizedImage simulate_low_dose(const NormalizedImage& img, const DoseParams& dose,
                                         uint64_t seed) {
    if (!(dose.blank_flux > 0.0f)) throw ConfigError("simulate_low_dose: blank_flux must be > 0");
    if (!(dose.mu_scale > 0.0f)) throw ConfigError("simulate_low_dose: mu_scale must be > 0");
    rng::Stream s = rng::derive_stream(seed, "low-dose");
    NormalizedImage out = img;
    const double b = dose.blank_flux, m = dose.mu_scale;
    for (auto& v : out.px.v) {
        double lam = b * std::exp(-m * static_cast<double>(v));
        double n   = static_cast<double>(s.poisson(lam));
        double px  = -std::log(std::max(n, 1.0) / b) / m;
        v = static_cast<float>(std::clamp(px, 0.0, 1.0));
    }
    return out;
}

// ------------------------------ resize kernels ------------------------------

enum class ResizeKernel { nearest, bilinear, bicubic };

inline const char* to_string(ResizeKernel k) {
    switch (k) {
        case ResizeKernel::nearest: return "nearest";
        case ResizeKernel::bilinear: return "bilinear";
        case ResizeKernel::bicubic: return "bicubic";
    }
    return "?";
}
inline ResizeKernel resize_kernel_from_string(const std::string& s) {
    if (s == "nearest") return ResizeKernel::nearest;
    if (s == "bilinear") return ResizeKernel::bilinear;
    if (s == "bicubic") return ResizeKernel::bicubic;
    throw ConfigError("unknown resize kernel: " + s);
}

namespace detail {

inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

// Catmull-Rom (a = -0.5)
inline double cubic_weight(double t) {
    constexpr double a = -0.5;
    t = std::abs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return (((t - 5.0) * t + 8.0) * t - 4.0) * a;
    return 0.0;
}

// One separable pass along a line of length n_in -> n_out. src/dst strides let
// the same code do rows and columns.
inline void resize_line(const float* src, int n_in, int s_in, float* dst, int n_out,
                        int s_out, ResizeKernel k) {
    const double scale = static_cast<double>(n_in) / n_out;
    for (int i = 0; i < n_out; i++) {
        double sx = (i + 0.5) * scale - 0.5;
        double acc = 0.0;
        if (k == ResizeKernel::nearest) {
            int j = std::clamp(static_cast<int>(std::floor(sx + 0.5)), 0, n_in - 1);
            acc   = src[j * s_in];
        } else if (k == ResizeKernel::bilinear) {
            int x0   = static_cast<int>(std::floor(sx));
            double t = sx - x0;
            acc = src[reflect_index(x0, n_in) * s_in] * (1.0 - t) +
                  src[reflect_index(x0 + 1, n_in) * s_in] * t;
        } else {
            int x0   = static_cast<int>(std::floor(sx));
            double t = sx - x0;
            for (int d = -1; d <= 2; d++)
                acc += cubic_weight(static_cast<double>(d) - t) *
                       src[reflect_index(x0 + d, n_in) * s_in];
        }
        dst[i * s_out] = static_cast<float>(acc);
    }
}

}  // namespace detail

inline Image resize_image(const Image& img, int h_out, int w_out, ResizeKernel k) {
    if (h_out < 8 || w_out < 8) throw PreconditionError("resize: target side must be >= 8");
    // horizontal pass, then vertical
    Image tmp(img.h, w_out);
    for (int y = 0; y < img.h; y++)
        detail::resize_line(&img.v[static_cast<size_t>(y) * img.w], img.w, 1,
                            &tmp.v[static_cast<size_t>(y) * w_out], w_out, 1, k);
    Image out(h_out, w_out);
    for (int x = 0; x < w_out; x++)
        detail::resize_line(&tmp.v[x], img.h, w_out, &out.v[x], h_out, w_out, k);
    for (auto& v : out.v) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

inline NormalizedImage resize(const NormalizedImage& img, double factor, ResizeKernel k) {
    int h = std::max(8, static_cast<int>(std::lround(img.px.h * factor)));
    int w = std::max(8, static_cast<int>(std::lround(img.px.w * factor)));
    NormalizedImage out;
    out.px   = resize_image(img.px, h, w, k);
    out.meta = img.meta;
    return out;
}

// ------------------------------ gaussian blur -------------------------------

inline Image gaussian_blur(const Image& img, double sigma_x, double sigma_y, double angle,
                           int ksize) {
    if (ksize < 3 || ksize > 11 || ksize % 2 == 0)
        throw PreconditionError("gaussian_blur: kernel_size must be odd in [3, 11]");
    const int r = ksize / 2;
    std::vector<double> k(static_cast<size_t>(ksize) * ksize);
    const double ca = std::cos(angle), sa = std::sin(angle);
    double sum = 0.0;
    for (int y = -r; y <= r; y++) {
        for (int x = -r; x <= r; x++) {
            double u = x * ca + y * sa, v = -x * sa + y * ca;
            double e = 0.5 * (u * u / (sigma_x * sigma_x) + v * v / (sigma_y * sigma_y));
            double w = std::exp(-e);
            k[static_cast<size_t>(y + r) * ksize + (x + r)] = w;
            sum += w;
        }
    }
    for (auto& w : k) w /= sum;

    Image out(img.h, img.w);
    for (int y = 0; y < img.h; y++) {
        for (int x = 0; x < img.w; x++) {
            double acc = 0.0;
            for (int dy = -r; dy <= r; dy++) {
                int yy = detail::reflect_index(y + dy, img.h);
                for (int dx = -r; dx <= r; dx++) {
                    int xx = detail::reflect_index(x + dx, img.w);
                    acc += k[static_cast<size_t>(dy + r) * ksize + (dx + r)] *
                           img.at(yy, xx);
                }
            }
            out.at(y, x) = static_cast<float>(acc);
        }
    }
    return out;
}

// --------------------------- compression surrogate --------------------------

namespace detail {

// JPEG Annex K luminance quantization table
inline const int* jpeg_luminance_table() {
    static const int q[64] = {16, 11, 10, 16, 24,  40,  51,  61,   //
                              12, 12, 14, 19, 26,  58,  60,  55,   //
                              14, 13, 16, 24, 40,  57,  69,  56,   //
                              14, 17, 22, 29, 51,  87,  80,  62,   //
                              18, 22, 37, 56, 68,  109, 103, 77,   //
                              24, 35, 55, 64, 81,  104, 113, 92,   //
                              49, 64, 78, 87, 103, 121, 120, 101,  //
                              72, 92, 95, 98, 112, 100, 103, 99};
    return q;
}

// orthonormal 8x8 DCT-II basis, row k = basis function k
inline const double* dct8_matrix() {
    static double c[64];
    static bool init = false;
    if (!init) {
        for (int k = 0; k < 8; k++) {
            double s = (k == 0) ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
            for (int n = 0; n < 8; n++)
                c[k * 8 + n] = s * std::cos((2.0 * n + 1.0) * k * 3.14159265358979323846 / 16.0);
        }
        init = true;
    }
    return c;
}

}  // namespace detail

// Block-DCT quantization with the standard luminance table; DC coefficients
// pass through unquantized so constant regions survive exactly. Codec-free
// stand-in for JPEG artifacts, not a bitstream-compatible encoder.
inline NormalizedImage compress_surrogate(const NormalizedImage& img, int quality) {
    if (quality < 10 || quality > 95)
        throw PreconditionError("compress_surrogate: quality must be in [10, 95]");
    const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    double qtab[64];
    for (int i = 0; i < 64; i++) {
        int q   = std::clamp((detail::jpeg_luminance_table()[i] * scale + 50) / 100, 1, 255);
        qtab[i] = static_cast<double>(q);
    }
    const double* C = detail::dct8_matrix();

    const int h = img.px.h, w = img.px.w;
    const int hp = (h + 7) / 8 * 8, wp = (w + 7) / 8 * 8;
    // edge-replicate pad to a multiple of 8
    std::vector<double> pix(static_cast<size_t>(hp) * wp);
    for (int y = 0; y < hp; y++)
        for (int x = 0; x < wp; x++)
            pix[static_cast<size_t>(y) * wp + x] =
                img.px.at(std::min(y, h - 1), std::min(x, w - 1)) * 255.0 - 128.0;

    double blk[64], tmp[64];
    for (int by = 0; by < hp; by += 8) {
        for (int bx = 0; bx < wp; bx += 8) {
            for (int y = 0; y < 8; y++)
                for (int x = 0; x < 8; x++)
                    blk[y * 8 + x] = pix[static_cast<size_t>(by + y) * wp + bx + x];
            // D = C * B * C^T
            for (int i = 0; i < 8; i++)
                for (int j = 0; j < 8; j++) {
                    double a = 0;
                    for (int n = 0; n < 8; n++) a += C[i * 8 + n] * blk[n * 8 + j];
                    tmp[i * 8 + j] = a;
                }
            for (int i = 0; i < 8; i++)
                for (int j = 0; j < 8; j++) {
                    double a = 0;
                    for (int n = 0; n < 8; n++) a += tmp[i * 8 + n] * C[j * 8 + n];
                    blk[i * 8 + j] = a;
                }
            // quantize AC only; DC kept exact
            for (int i = 1; i < 64; i++)
                blk[i] = std::round(blk[i] / qtab[i]) * qtab[i];
            // B = C^T * D * C
            for (int i = 0; i < 8; i++)
                for (int j = 0; j < 8; j++) {
                    double a = 0;
                    for (int n = 0; n < 8; n++) a += C[n * 8 + i] * blk[n * 8 + j];
                    tmp[i * 8 + j] = a;
                }
            for (int i = 0; i < 8; i++)
                for (int j = 0; j < 8; j++) {
                    double a = 0;
                    for (int n = 0; n < 8; n++) a += tmp[i * 8 + n] * C[n * 8 + j];
                    pix[static_cast<size_t>(by + i) * wp + bx + j] = a;
                }
        }
    }

    NormalizedImage out;
    out.px   = Image(h, w);
    out.meta = img.meta;
    for (int y = 0; y < h; y++)
        for (int x = 0; x < w; x++) {
            double v = (pix[static_cast<size_t>(y) * wp + x] + 128.0) / 255.0;
            out.px.at(y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    return out;
}

// ----------------------------- blind recipe ---------------------------------

struct BlurSpec {
    std::string kind = "iso";  // iso | aniso
    double sigma_x = 1.0, sigma_y = 1.0;
    double angle    = 0.0;
    int kernel_size = 7;
};

struct ResizeSpec {
    ResizeKernel kernel = ResizeKernel::bicubic;
    double factor       = 1.0;
};

struct NoiseSpec {
    std::string kind = "gaussian";  // gaussian | poisson
    double strength  = 0.0;
};

struct DegradeOrder {
    BlurSpec blur;
    ResizeSpec resize;
    NoiseSpec noise;
    int quality = 95;
};

struct DegradationRecipe {
    DegradeOrder order1;
    DegradeOrder order2;
    bool has_order2 = true;
    int final_scale = 2;  // {2, 4}; 1 allowed as a debug bypass
    uint64_t seed   = 0;
};

struct RecipeRanges {
    double sigma_lo = 0.2, sigma_hi = 3.0;
    int ksize_lo = 3, ksize_hi = 11;
    double resize_lo = 0.5, resize_hi = 1.5;
    double gauss_lo = 0.002, gauss_hi = 0.05;       // additive sigma, [0,1] units
    double poisson_lo = 0.05, poisson_hi = 2.0;     // peak = 250/strength
    int quality_lo = 10, quality_hi = 95;
    double p_skip_order2 = 0.2;
    double p_aniso       = 0.5;
    double p_gaussian    = 0.5;
};

inline void to_json(json& j, const BlurSpec& b) {
    j = json{{"kind", b.kind},
             {"sigma_x", b.sigma_x},
             {"sigma_y", b.sigma_y},
             {"angle", b.angle},
             {"kernel_size", b.kernel_size}};
}
inline void from_json(const json& j, BlurSpec& b) {
    j.at("kind").get_to(b.kind);
    j.at("sigma_x").get_to(b.sigma_x);
    j.at("sigma_y").get_to(b.sigma_y);
    j.at("angle").get_to(b.angle);
    j.at("kernel_size").get_to(b.kernel_size);
}
inline void to_json(json& j, const ResizeSpec& r) {
    j = json{{"kernel", to_string(r.kernel)}, {"factor", r.factor}};
}
inline void from_json(const json& j, ResizeSpec& r) {
    r.kernel = resize_kernel_from_string(j.at("kernel").get<std::string>());
    j.at("factor").get_to(r.factor);
}
inline void to_json(json& j, const NoiseSpec& n) {
    j = json{{"kind", n.kind}, {"strength", n.strength}};
}
inline void from_json(const json& j, NoiseSpec& n) {
    j.at("kind").get_to(n.kind);
    j.at("strength").get_to(n.strength);
}
inline void to_json(json& j, const DegradeOrder& o) {
    j = json{{"blur", o.blur}, {"resize", o.resize}, {"noise", o.noise}, {"quality", o.quality}};
}
inline void from_json(const json& j, DegradeOrder& o) {
    j.at("blur").get_to(o.blur);
    j.at("resize").get_to(o.resize);
    j.at("noise").get_to(o.noise);
    j.at("quality").get_to(o.quality);
}
inline void to_json(json& j, const DegradationRecipe& r) {
    j = json{{"order1", r.order1},
             {"order2", r.order2},
             {"has_order2", r.has_order2},
             {"final_scale", r.final_scale},
             {"seed", r.seed}};
}
inline void from_json(const json& j, DegradationRecipe& r) {
    j.at("order1").get_to(r.order1);
    j.at("order2").get_to(r.order2);
    j.at("has_order2").get_to(r.has_order2);
    j.at("final_scale").get_to(r.final_scale);
    j.at("seed").get_to(r.seed);
}

inline DegradationRecipe sample_recipe(uint64_t seed, const RecipeRanges& ranges,
                                       int final_scale) {
    if (final_scale != 2 && final_scale != 4)
        throw PreconditionError("sample_recipe: final_scale must be 2 or 4");
    rng::Stream s = rng::derive_stream(seed, "recipe");

    auto sample_order = [&]() {
        DegradeOrder o;
        bool aniso   = s.bernoulli(ranges.p_aniso);
        o.blur.kind  = aniso ? "aniso" : "iso";
        o.blur.sigma_x = s.log_uniform(ranges.sigma_lo, ranges.sigma_hi);
        o.blur.sigma_y = aniso ? s.log_uniform(ranges.sigma_lo, ranges.sigma_hi)
                               : o.blur.sigma_x;
        o.blur.angle = aniso ? s.uniform(0.0, 3.14159265358979323846) : 0.0;
        int steps    = (ranges.ksize_hi - ranges.ksize_lo) / 2;
        o.blur.kernel_size =
            ranges.ksize_lo + 2 * static_cast<int>(s.uniform_int(0, steps));
        switch (s.uniform_int(0, 2)) {
            case 0: o.resize.kernel = ResizeKernel::nearest; break;
            case 1: o.resize.kernel = ResizeKernel::bilinear; break;
            default: o.resize.kernel = ResizeKernel::bicubic; break;
        }
        o.resize.factor = s.uniform(ranges.resize_lo, ranges.resize_hi);
        bool gauss      = s.bernoulli(ranges.p_gaussian);
        o.noise.kind    = gauss ? "gaussian" : "poisson";
        o.noise.strength = gauss ? s.uniform(ranges.gauss_lo, ranges.gauss_hi)
                                 : s.uniform(ranges.poisson_lo, ranges.poisson_hi);
        o.quality = static_cast<int>(s.uniform_int(ranges.quality_lo, ranges.quality_hi));
        return o;
    };

    DegradationRecipe r;
    r.order1 = sample_order();
    r.order2 = sample_order();  // always drawn so the stream layout is fixed
    r.has_order2  = !s.bernoulli(ranges.p_skip_order2);
    r.final_scale = final_scale;
    r.seed        = seed;
    return r;
}

namespace detail {

inline void add_noise(Image& img, const NoiseSpec& noise, rng::Stream& s) {
    if (noise.kind == "gaussian") {
        for (auto& v : img.v)
            v = std::clamp(v + s.normalf() * static_cast<float>(noise.strength), 0.0f, 1.0f);
    } else if (noise.kind == "poisson") {
        double peak = 250.0 / std::max(noise.strength, 1e-6);
        for (auto& v : img.v) {
            double n = static_cast<double>(s.poisson(static_cast<double>(v) * peak));
            v = static_cast<float>(std::clamp(n / peak, 0.0, 1.0));
        }
    } else {
        throw ConfigError("unknown noise kind: " + noise.kind);
    }
}

}  // namespace detail

// Runs the sampled chain: per order blur -> resize -> noise -> compression,
// then the deterministic final bicubic resize to side / final_scale.
inline NormalizedImage apply_degradation(const NormalizedImage& img,
                                         const DegradationRecipe& recipe) {
    if (recipe.final_scale != 1 && recipe.final_scale != 2 && recipe.final_scale != 4)
        throw PreconditionError("apply_degradation: final_scale must be 1, 2 or 4");
    if (img.px.h % recipe.final_scale != 0 || img.px.w % recipe.final_scale != 0)
        throw PreconditionError("apply_degradation: image side not divisible by final_scale");

    const int h_out = img.px.h / recipe.final_scale;
    const int w_out = img.px.w / recipe.final_scale;

    NormalizedImage cur = img;
    int order_idx       = 0;
    auto run_order = [&](const DegradeOrder& o) {
        rng::Stream s = rng::derive_stream(recipe.seed, "chain-noise",
                                           static_cast<uint64_t>(order_idx));
        order_idx++;
        cur.px = gaussian_blur(cur.px, o.blur.sigma_x, o.blur.sigma_y, o.blur.angle,
                               o.blur.kernel_size);
        cur = resize(cur, o.resize.factor, o.resize.kernel);
        detail::add_noise(cur.px, o.noise, s);
        cur = compress_surrogate(cur, o.quality);
    };

    run_order(recipe.order1);
    if (recipe.has_order2) run_order(recipe.order2);

    cur.px = resize_image(cur.px, h_out, w_out, ResizeKernel::bicubic);
    return cur;
}

// Full LR synthesis as used by training/eval: dose noise on the HR image
// first, then the blind chain.
inline NormalizedImage make_low_res(const NormalizedImage& hr, const DegradationRecipe& recipe,
                                    const DoseParams& dose) {
    NormalizedImage dosed = simulate_low_dose(hr, dose, rng::derive_seed(recipe.seed, "dose"));
    return apply_degradation(dosed, recipe);
}

}  // namespace ssrb

#endif
