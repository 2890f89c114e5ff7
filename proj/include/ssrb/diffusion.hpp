#ifndef SSRB_DIFFUSION_HPP
#define SSRB_DIFFUSION_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ssrb/core/errors.hpp"
#include "ssrb/core/rng.hpp"
#include "ssrb/core/tensor.hpp"

namespace ssrb {

// ------------------------------ noise schedule ------------------------------

// 1-indexed tables stored at offset t-1
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta, alpha, alpha_bar;

    double beta_at(int t) const { return beta[static_cast<size_t>(t) - 1]; }
    double alpha_at(int t) const { return alpha[static_cast<size_t>(t) - 1]; }
    double alpha_bar_at(int t) const { return alpha_bar[static_cast<size_t>(t) - 1]; }
};

inline NoiseSchedule make_schedule(int T = 1000, double beta_1 = 1e-4, double beta_T = 0.02) {
    if (T < 1) throw ConfigError("make_schedule: T must be >= 1");
    if (!(beta_1 > 0.0 && beta_1 <= beta_T && beta_T < 1.0))
        throw ConfigError("make_schedule: need 0 < beta_1 <= beta_T < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    double prod = 1.0;
    for (int t = 1; t <= T; t++) {
        double b = (T == 1) ? beta_1
                            : beta_1 + (beta_T - beta_1) * static_cast<double>(t - 1) / (T - 1);
        s.beta[t - 1]  = b;
        s.alpha[t - 1] = 1.0 - b;
        prod *= s.alpha[t - 1];
        s.alpha_bar[t - 1] = prod;
    }
    return s;
}

// --------------------------- forward process (q) ----------------------------

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
inline Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps,
                              const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T) throw PreconditionError("forward_diffuse: t out of range");
    if (!z0.same_shape(eps)) throw PreconditionError("forward_diffuse: eps shape mismatch");
    const float a = static_cast<float>(std::sqrt(sched.alpha_bar_at(t)));
    const float b = static_cast<float>(std::sqrt(1.0 - sched.alpha_bar_at(t)));
    Tensor zt = z0;
    for (size_t i = 0; i < zt.numel(); i++) zt.data[i] = a * z0.data[i] + b * eps.data[i];
    return zt;
}

inline int sample_timestep(rng::Stream& s, const NoiseSchedule& sched) {
    return static_cast<int>(s.uniform_int(1, sched.T));
}

// ------------------------------- training loss ------------------------------

inline double mse(const Tensor& pred, const Tensor& target) {
    if (!pred.same_shape(target)) throw PreconditionError("mse: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < pred.numel(); i++) {
        double d = static_cast<double>(pred.data[i]) - target.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.numel());
}

// d(mse)/d(pred)
inline Tensor mse_grad(const Tensor& pred, const Tensor& target) {
    Tensor g = pred;
    const float s = 2.0f / static_cast<float>(pred.numel());
    for (size_t i = 0; i < g.numel(); i++) g.data[i] = s * (pred.data[i] - target.data[i]);
    return g;
}

// Noise-prediction objective: ||eps - model(z_t, t, f_lr, f_p)||^2 / numel.
// `model` is any callable (z_t, t, f_lr, f_p) -> Tensor; empty tensors stand
// for absent conditions.
template <typename Model>
double training_loss(Model&& model, const Tensor& z0, const Tensor& f_lr, const Tensor& f_p,
                     int t, const Tensor& eps, const NoiseSchedule& sched) {
    Tensor zt   = forward_diffuse(z0, t, eps, sched);
    Tensor pred = model(zt, t, f_lr, f_p);
    if (!pred.all_finite())
        throw NumericError("training_loss: non-finite model output at t=" + std::to_string(t));
    return mse(pred, eps);
}

// ------------------------------ spaced sampling -----------------------------

struct SpacedSteps {
    std::vector<int> tau;              // increasing, tau.back() == T
    std::vector<double> eff_beta;      // beta_i = 1 - abar(tau_i)/abar(tau_{i-1})
    std::vector<double> eff_alpha_bar; // abar at tau_i
};

inline SpacedSteps spaced_subsequence(const NoiseSchedule& sched, int S) {
    if (S < 1 || S > sched.T) throw PreconditionError("spaced_subsequence: need 1 <= S <= T");
    SpacedSteps out;
    for (int i = 1; i <= S; i++) {
        int t = static_cast<int>(std::lround(static_cast<double>(i) * sched.T / S));
        t     = std::max(1, std::min(sched.T, t));
        if (out.tau.empty() || t > out.tau.back()) out.tau.push_back(t);
    }
    if (out.tau.back() != sched.T) out.tau.push_back(sched.T);
    double prev_ab = 1.0;
    for (int t : out.tau) {
        double ab = sched.alpha_bar_at(t);
        out.eff_alpha_bar.push_back(ab);
        out.eff_beta.push_back(1.0 - ab / prev_ab);
        prev_ab = ab;
    }
    return out;
}

// Ancestral DDPM over the spaced subsequence, posterior variance = effective
// beta, no noise on the final step. Starts from a seeded standard normal.
template <typename Model>
Tensor ddpm_sample(Model&& model, const NoiseSchedule& sched, const SpacedSteps& steps,
                   const Tensor& f_lr, const Tensor& f_p, int n, int c, int h, int w,
                   uint64_t seed) {
    rng::Stream s = rng::derive_stream(seed, "ddpm");
    Tensor z(n, c, h, w);
    s.fill_normal(z);
    const int S = static_cast<int>(steps.tau.size());
    for (int i = S - 1; i >= 0; i--) {
        const int t      = steps.tau[static_cast<size_t>(i)];
        const double ab  = steps.eff_alpha_bar[static_cast<size_t>(i)];
        const double bet = steps.eff_beta[static_cast<size_t>(i)];
        const double alp = 1.0 - bet;
        Tensor eps_hat = model(z, t, f_lr, f_p);
        if (!eps_hat.all_finite())
            throw NumericError("ddpm_sample: non-finite prediction at step " +
                               std::to_string(i) + " (t=" + std::to_string(t) + ")");
        const float k1 = static_cast<float>(1.0 / std::sqrt(alp));
        const float k2 = static_cast<float>(bet / std::sqrt(1.0 - ab));
        for (size_t j = 0; j < z.numel(); j++)
            z.data[j] = k1 * (z.data[j] - k2 * eps_hat.data[j]);
        if (i > 0) {
            const float sd = static_cast<float>(std::sqrt(bet));
            for (size_t j = 0; j < z.numel(); j++)
                z.data[j] += sd * s.normalf();
        }
        if (!z.all_finite())
            throw NumericError("ddpm_sample: non-finite latent after step " +
                               std::to_string(i));
    }
    return z;
}

}  // namespace ssrb

#endif
