#ifndef SSRB_CONTROL_HPP
#define SSRB_CONTROL_HPP

#include <string>
#include <vector>

#include "ssrb/core/errors.hpp"
#include "ssrb/core/rng.hpp"
#include "ssrb/core/tensor.hpp"
#include "ssrb/nn/layers.hpp"
#include "ssrb/unet.hpp"

namespace ssrb {

namespace detail {

template <typename A, typename B>
void copy_layer_params(A& dst, B& src) {
    std::vector<nn::ParamRef> d, s;
    dst.collect("x", d);
    src.collect("x", s);
    if (d.size() != s.size()) throw StateError("copy_layer_params: structure mismatch");
    for (size_t i = 0; i < d.size(); i++) {
        if (d[i].w->dims != s[i].w->dims)
            throw StateError("copy_layer_params: shape mismatch at " + d[i].name);
        d[i].w->data = s[i].w->data;
    }
}

}  // namespace detail

// ------------------------------ condition network ---------------------------

// Trainable copy of the base encoder + middle. Its stem takes the channel
// concatenation (z_t, f_lr), i.e. twice the latent channels.
struct CondNet {
    DenoiserConfig cfg;

    nn::TimeEmbed temb;
    nn::Conv2d stem;  // 2C -> w0
    nn::ResBlock enc0;
    nn::Conv2d down0;
    nn::ResBlock enc1;
    nn::Conv2d down1;
    nn::ResBlock mid1;
    nn::CrossAttention mid_attn;
    nn::ResBlock mid2;

    CondNet() = default;
    CondNet(const DenoiserConfig& cfg_, uint64_t seed) : cfg(cfg_) {
        cfg.validate();
        const int c  = cfg.latent_channels;
        const auto w = cfg.widths;
        rng::Stream s = rng::derive_stream(seed, "cond-init");
        temb     = nn::TimeEmbed(cfg.temb_dim, s);
        stem     = nn::Conv2d(2 * c, w[0], 3, 1, 1, s);
        enc0     = nn::ResBlock(w[0], w[0], cfg.temb_dim, s);
        down0    = nn::Conv2d(w[0], w[1], 3, 2, 1, s);
        enc1     = nn::ResBlock(w[1], w[1], cfg.temb_dim, s);
        down1    = nn::Conv2d(w[1], w[2], 3, 2, 1, s);
        mid1     = nn::ResBlock(w[2], w[2], cfg.temb_dim, s);
        mid_attn = nn::CrossAttention(w[2], cfg.ctx_dim, w[2] / cfg.head_dim, s);
        mid2     = nn::ResBlock(w[2], w[2], cfg.temb_dim, s);
    }

    void collect(const std::string& prefix, std::vector<nn::ParamRef>& out) {
        temb.collect(prefix + ".temb", out);
        stem.collect(prefix + ".stem", out);
        enc0.collect(prefix + ".enc0", out);
        down0.collect(prefix + ".down0", out);
        enc1.collect(prefix + ".enc1", out);
        down1.collect(prefix + ".down1", out);
        mid1.collect(prefix + ".mid1", out);
        mid_attn.collect(prefix + ".mid_attn", out);
        mid2.collect(prefix + ".mid2", out);
    }

    // Deep-copies the base encoder + middle; widened stem keeps base weights
    // on the original latent channels, exact zeros on the f_lr channels.
    void clone_from(BaseUnet& base) {
        detail::copy_layer_params(temb, base.temb);
        detail::copy_layer_params(enc0, base.enc0);
        detail::copy_layer_params(down0, base.down0);
        detail::copy_layer_params(enc1, base.enc1);
        detail::copy_layer_params(down1, base.down1);
        detail::copy_layer_params(mid1, base.mid1);
        detail::copy_layer_params(mid_attn, base.mid_attn);
        detail::copy_layer_params(mid2, base.mid2);
        const int c = cfg.latent_channels;
        stem.w.zero();
        for (int oc = 0; oc < stem.out_c; oc++)
            for (int ic = 0; ic < c; ic++)
                for (int ky = 0; ky < 3; ky++)
                    for (int kx = 0; kx < 3; kx++)
                        stem.w.at(oc, ic, ky, kx) = base.stem.w.at(oc, ic, ky, kx);
        stem.b.data = base.stem.b.data;
    }

    struct Feats {
        Tensor c0, c1, c2;  // w0@32, w1@16, w2@8
    };

    Feats forward(const Tensor& x2c, const std::vector<int>& t, const Tensor& ctx) {
        if (x2c.c() != 2 * cfg.latent_channels)
            throw PreconditionError("CondNet: expected concat(z_t, f_lr) input");
        MatRM te = temb.forward(t);
        Feats f;
        Tensor h = stem.forward(x2c);
        f.c0     = enc0.forward(h, &te);
        h        = down0.forward(f.c0);
        f.c1     = enc1.forward(h, &te);
        h        = down1.forward(f.c1);
        h        = mid1.forward(h, &te);
        h        = mid_attn.forward(h, ctx);
        f.c2     = mid2.forward(h, &te);
        return f;
    }

    // gradients w.r.t. the three emitted features; returns d(input)
    Tensor backward(const Tensor& dc0, const Tensor& dc1, const Tensor& dc2) {
        MatRM dte = MatRM::Zero(dc0.n(), cfg.temb_dim);
        Tensor dh = mid2.backward(dc2, &dte);
        dh        = mid_attn.backward(dh);
        dh        = mid1.backward(dh, &dte);
        Tensor d1 = down1.backward(dh);
        d1 += dc1;
        Tensor d0 = down0.backward(enc1.backward(d1, &dte));
        d0 += dc0;
        Tensor dx = stem.backward(enc0.backward(d0, &dte));
        temb.backward(dte);
        return dx;
    }
};

// ------------------------------ controlled model ----------------------------

enum class FusionMode { zero_init, bare };

inline const char* to_string(FusionMode m) {
    return m == FusionMode::zero_init ? "zero-init" : "bare";
}
inline FusionMode fusion_mode_from_string(const std::string& s) {
    if (s == "zero-init" || s == "zero_init") return FusionMode::zero_init;
    if (s == "bare") return FusionMode::bare;
    throw ConfigError("unknown fusion mode: " + s + " (expected bare|zero-init)");
}

// Frozen base + trainable condition branch, fused additively at each decoder
// resolution. With zero-init fusion the model is an exact functional extension
// of the base at initialization.
struct ControlledModel {
    DenoiserConfig cfg;
    BaseUnet base;
    CondNet cond;
    FusionMode fusion_mode = FusionMode::zero_init;
    bool fusion_enabled    = true;  // runtime kill switch for the ablation harness

    nn::Conv2d fuse_at8, fuse_at16, fuse_at32;  // square 1x1, zero-init

    Tensor inj8_cache, inj16_cache, inj32_cache;

    ControlledModel() = default;
    ControlledModel(const DenoiserConfig& cfg_, uint64_t seed, FusionMode mode)
        : cfg(cfg_), base(cfg_, seed), cond(cfg_, rng::derive_seed(seed, "cond-branch")),
          fusion_mode(mode) {
        rng::Stream s = rng::derive_stream(seed, "fusion-init");
        fuse_at8  = nn::Conv2d(cfg.widths[2], cfg.widths[2], 1, 1, 0, s, 0.0f);
        fuse_at16 = nn::Conv2d(cfg.widths[1], cfg.widths[1], 1, 1, 0, s, 0.0f);
        fuse_at32 = nn::Conv2d(cfg.widths[0], cfg.widths[0], 1, 1, 0, s, 0.0f);
    }

    // cond starts as a clone of the pretrained encoder + middle
    void clone_condition_network() { cond.clone_from(base); }

    void collect_base(std::vector<nn::ParamRef>& out) { base.collect("base", out); }
    void collect_cond(std::vector<nn::ParamRef>& out) { cond.collect("cond", out); }
    void collect_fusion(std::vector<nn::ParamRef>& out) {
        if (fusion_mode == FusionMode::bare) return;  // bare sum has no parameters
        fuse_at8.collect("fusion.at8", out);
        fuse_at16.collect("fusion.at16", out);
        fuse_at32.collect("fusion.at32", out);
    }

    // the frozen set: everything the finetune optimizer must not touch
    std::vector<nn::ParamRef> trainable_params() {
        std::vector<nn::ParamRef> ps;
        collect_cond(ps);
        collect_fusion(ps);
        return ps;
    }

    Tensor forward(const Tensor& z, const std::vector<int>& t, const Tensor& ctx,
                   const Tensor& f_lr) {
        if (!fusion_enabled) return base.forward(z, t, ctx, nullptr);
        if (f_lr.h() != z.h() || f_lr.w() != z.w() || f_lr.n() != z.n())
            throw PreconditionError("controlled_forward: f_lr spatial dims must match z_t");
        Tensor x2c = concat_channels(z, f_lr);
        CondNet::Feats f = cond.forward(x2c, t, ctx);
        if (fusion_mode == FusionMode::zero_init) {
            inj8_cache  = fuse_at8.forward(f.c2);
            inj16_cache = fuse_at16.forward(f.c1);
            inj32_cache = fuse_at32.forward(f.c0);
        } else {
            inj8_cache  = f.c2;
            inj16_cache = f.c1;
            inj32_cache = f.c0;
        }
        FusionInput fi;
        fi.at8  = &inj8_cache;
        fi.at16 = &inj16_cache;
        fi.at32 = &inj32_cache;
        return base.forward(z, t, ctx, &fi);
    }

    // Full backward; base parameter gradients are computed but the finetune
    // optimizer never consumes them (freeze by exclusion). Returns gradient
    // w.r.t. the stem input concat(z_t, f_lr) so a learnable visual encoder
    // can keep propagating.
    Tensor backward(const Tensor& dy) {
        if (!fusion_enabled) {
            base.backward(dy);
            return Tensor();
        }
        FusionGrad fg;
        base.backward(dy, &fg);
        Tensor dc0, dc1, dc2;
        if (fusion_mode == FusionMode::zero_init) {
            dc2 = fuse_at8.backward(fg.at8);
            dc1 = fuse_at16.backward(fg.at16);
            dc0 = fuse_at32.backward(fg.at32);
        } else {
            dc2 = fg.at8;
            dc1 = fg.at16;
            dc0 = fg.at32;
        }
        return cond.backward(dc0, dc1, dc2);
    }
};

// convenience wrappers over the struct API

inline BaseUnet build_base_unet(const DenoiserConfig& cfg, uint64_t seed) {
    return BaseUnet(cfg, seed);
}

inline void clone_condition_network(ControlledModel& m) { m.clone_condition_network(); }

// Freezing is structural: the optimizer is built over trainable_params() only.
inline std::vector<nn::ParamRef> freeze_base(ControlledModel& m) {
    return m.trainable_params();
}

}  // namespace ssrb

#endif
