#ifndef SSRB_METRICS_HPP
#define SSRB_METRICS_HPP

#include <cmath>
#include <vector>

#include "ssrb/core/errors.hpp"
#include "ssrb/core/image.hpp"
#include "ssrb/phantom.hpp"

namespace ssrb {

// images are in [0,1], so MAX = 1; zero MSE reported as the 99 dB sentinel
inline double psnr(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw PreconditionError("psnr: shape mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < a.v.size(); i++) {
        double d = static_cast<double>(a.v[i]) - b.v[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.v.size());
    if (mse <= 0.0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

inline double psnr(const NormalizedImage& a, const NormalizedImage& b) {
    return psnr(a.px, b.px);
}

namespace detail {

inline std::vector<double> ssim_window() {
    std::vector<double> w(11);
    double sum = 0.0;
    for (int i = 0; i < 11; i++) {
        double d = i - 5;
        w[i]     = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        sum += w[i];
    }
    for (auto& x : w) x /= sum;
    return w;
}

inline int ssim_reflect(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

// separable 11x11 gaussian, sigma 1.5, reflect padding
inline std::vector<double> gaussian_filter_11(const std::vector<double>& img, int h, int w) {
    static const std::vector<double> win = ssim_window();
    std::vector<double> tmp(img.size()), out(img.size());
    for (int y = 0; y < h; y++)
        for (int x = 0; x < w; x++) {
            double acc = 0.0;
            for (int k = -5; k <= 5; k++)
                acc += win[k + 5] * img[static_cast<size_t>(y) * w + ssim_reflect(x + k, w)];
            tmp[static_cast<size_t>(y) * w + x] = acc;
        }
    for (int y = 0; y < h; y++)
        for (int x = 0; x < w; x++) {
            double acc = 0.0;
            for (int k = -5; k <= 5; k++)
                acc += win[k + 5] * tmp[static_cast<size_t>(ssim_reflect(y + k, h)) * w + x];
            out[static_cast<size_t>(y) * w + x] = acc;
        }
    return out;
}

}  // namespace detail

// mean of the local SSIM map; 11x11 gaussian window (sigma 1.5), K1 = 0.01,
// K2 = 0.03, dynamic range L = 1
inline double ssim(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw PreconditionError("ssim: shape mismatch");
    const int h = a.h, w = a.w;
    if (h < 11 || w < 11) throw PreconditionError("ssim: image smaller than the 11x11 window");
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;

    const size_t n = a.v.size();
    std::vector<double> xa(n), xb(n), xaa(n), xbb(n), xab(n);
    for (size_t i = 0; i < n; i++) {
        xa[i]  = a.v[i];
        xb[i]  = b.v[i];
        xaa[i] = xa[i] * xa[i];
        xbb[i] = xb[i] * xb[i];
        xab[i] = xa[i] * xb[i];
    }
    auto mu_a  = detail::gaussian_filter_11(xa, h, w);
    auto mu_b  = detail::gaussian_filter_11(xb, h, w);
    auto e_aa  = detail::gaussian_filter_11(xaa, h, w);
    auto e_bb  = detail::gaussian_filter_11(xbb, h, w);
    auto e_ab  = detail::gaussian_filter_11(xab, h, w);

    double total = 0.0;
    for (size_t i = 0; i < n; i++) {
        double ma = mu_a[i], mb = mu_b[i];
        double va = e_aa[i] - ma * ma;
        double vb = e_bb[i] - mb * mb;
        double cov = e_ab[i] - ma * mb;
        double num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
        double den = (ma * ma + mb * mb + C1) * (va + vb + C2);
        total += num / den;
    }
    return total / static_cast<double>(n);
}

inline double ssim(const NormalizedImage& a, const NormalizedImage& b) {
    return ssim(a.px, b.px);
}

}  // namespace ssrb

#endif
