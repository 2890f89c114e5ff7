#ifndef SSRB_NN_ADAM_HPP
#define SSRB_NN_ADAM_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "ssrb/core/errors.hpp"
#include "ssrb/nn/layers.hpp"

namespace ssrb::nn {

// Adam over an explicit parameter list. Anything not in the list is frozen by
// construction. Moment buffers are indexed in list order, so the list must be
// stable across save/load (names are checked by the checkpoint layer).
struct Adam {
    float lr    = 5e-5f;
    float beta1 = 0.9f, beta2 = 0.999f;
    float eps = 1e-8f;
    int64_t t = 0;

    std::vector<std::vector<float>> m, v;

    void init(const std::vector<ParamRef>& ps) {
        m.assign(ps.size(), {});
        v.assign(ps.size(), {});
        for (size_t i = 0; i < ps.size(); i++) {
            m[i].assign(ps[i].w->numel(), 0.0f);
            v[i].assign(ps[i].w->numel(), 0.0f);
        }
        t = 0;
    }

    void step(const std::vector<ParamRef>& ps) {
        if (m.size() != ps.size()) throw StateError("Adam: not initialized for this param list");
        t++;
        const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(t));
        const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(t));
        for (size_t i = 0; i < ps.size(); i++) {
            float* w       = ps[i].w->data.data();
            const float* g = ps[i].g->data.data();
            float* mi      = m[i].data();
            float* vi      = v[i].data();
            const size_t n = ps[i].w->numel();
            if (m[i].size() != n) throw StateError("Adam: param size changed");
            for (size_t j = 0; j < n; j++) {
                mi[j] = beta1 * mi[j] + (1.0f - beta1) * g[j];
                vi[j] = beta2 * vi[j] + (1.0f - beta2) * g[j] * g[j];
                float mhat = mi[j] / bc1;
                float vhat = vi[j] / bc2;
                w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }
};

// global-norm gradient clipping; returns the pre-clip norm
inline float clip_grad_norm(const std::vector<ParamRef>& ps, float max_norm) {
    double sq = 0.0;
    for (const auto& p : ps)
        for (float g : p.g->data) sq += static_cast<double>(g) * g;
    float norm = static_cast<float>(std::sqrt(sq));
    if (norm > max_norm && norm > 0.0f) {
        float s = max_norm / norm;
        for (const auto& p : ps)
            for (auto& g : p.g->data) g *= s;
    }
    return norm;
}

}  // namespace ssrb::nn

#endif
