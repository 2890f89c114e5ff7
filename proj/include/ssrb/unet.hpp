#ifndef SSRB_UNET_HPP
#define SSRB_UNET_HPP

#include <array>
#include <string>
#include <vector>

#include "ssrb/core/errors.hpp"
#include "ssrb/core/rng.hpp"
#include "ssrb/core/tensor.hpp"
#include "ssrb/nn/layers.hpp"

namespace ssrb {

// ------------------------------- configuration ------------------------------

struct DenoiserConfig {
    int latent_channels = 4;
    std::array<int, 3> widths = {32, 64, 96};  // at 32x32, 16x16, 8x8
    int ctx_dim  = 64;   // must match PromptEmbedding d
    int temb_dim = 128;
    int head_dim = 32;

    void validate() const {
        if (latent_channels < 1) throw ConfigError("DenoiserConfig: latent_channels < 1");
        for (int w : widths) {
            if (w < 1) throw ConfigError("DenoiserConfig: widths must be positive");
            if (w % head_dim != 0)
                throw ConfigError("DenoiserConfig: width not divisible by attention head_dim");
        }
        if (ctx_dim < 1 || temb_dim < 2) throw ConfigError("DenoiserConfig: bad dims");
    }
};

// fused condition features added into the decoder, one per resolution
struct FusionInput {
    const Tensor* at8  = nullptr;
    const Tensor* at16 = nullptr;
    const Tensor* at32 = nullptr;
};

struct FusionGrad {
    Tensor at8, at16, at32;
};

// --------------------------------- base U-Net -------------------------------

// Text-conditioned epsilon predictor on 4-channel latents. Three resolutions,
// residual blocks with timestep bias, cross-attention at the bottleneck and at
// every decoder resolution, skip connections encoder -> decoder.
struct BaseUnet {
    DenoiserConfig cfg;

    nn::TimeEmbed temb;
    nn::Conv2d stem;
    nn::ResBlock enc0;
    nn::Conv2d down0;
    nn::ResBlock enc1;
    nn::Conv2d down1;
    nn::ResBlock mid1;
    nn::CrossAttention mid_attn;
    nn::ResBlock mid2;
    nn::ResBlock dec2;
    nn::CrossAttention attn2;
    nn::UpsampleConv up2;
    nn::ResBlock dec1;
    nn::CrossAttention attn1;
    nn::UpsampleConv up1;
    nn::ResBlock dec0;
    nn::CrossAttention attn0;
    nn::GroupNorm out_gn;
    nn::SiLU out_act;
    nn::Conv2d out_conv;

    bool has_fusion_cache = false;

    BaseUnet() = default;
    explicit BaseUnet(const DenoiserConfig& cfg_, uint64_t seed) : cfg(cfg_) {
        cfg.validate();
        const int c  = cfg.latent_channels;
        const auto w = cfg.widths;
        rng::Stream s = rng::derive_stream(seed, "unet-init");
        temb     = nn::TimeEmbed(cfg.temb_dim, s);
        stem     = nn::Conv2d(c, w[0], 3, 1, 1, s);
        enc0     = nn::ResBlock(w[0], w[0], cfg.temb_dim, s);
        down0    = nn::Conv2d(w[0], w[1], 3, 2, 1, s);
        enc1     = nn::ResBlock(w[1], w[1], cfg.temb_dim, s);
        down1    = nn::Conv2d(w[1], w[2], 3, 2, 1, s);
        mid1     = nn::ResBlock(w[2], w[2], cfg.temb_dim, s);
        mid_attn = nn::CrossAttention(w[2], cfg.ctx_dim, w[2] / cfg.head_dim, s);
        mid2     = nn::ResBlock(w[2], w[2], cfg.temb_dim, s);
        dec2     = nn::ResBlock(w[2] * 2, w[2], cfg.temb_dim, s);
        attn2    = nn::CrossAttention(w[2], cfg.ctx_dim, w[2] / cfg.head_dim, s);
        up2      = nn::UpsampleConv(w[2], w[1], s);
        dec1     = nn::ResBlock(w[1] * 2, w[1], cfg.temb_dim, s);
        attn1    = nn::CrossAttention(w[1], cfg.ctx_dim, w[1] / cfg.head_dim, s);
        up1      = nn::UpsampleConv(w[1], w[0], s);
        dec0     = nn::ResBlock(w[0] * 2, w[0], cfg.temb_dim, s);
        attn0    = nn::CrossAttention(w[0], cfg.ctx_dim, w[0] / cfg.head_dim, s);
        out_gn   = nn::GroupNorm(w[0]);
        out_conv = nn::Conv2d(w[0], c, 3, 1, 1, s, 0.0f);  // zero-init output head
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
        dec2.collect(prefix + ".dec2", out);
        attn2.collect(prefix + ".attn2", out);
        up2.collect(prefix + ".up2", out);
        dec1.collect(prefix + ".dec1", out);
        attn1.collect(prefix + ".attn1", out);
        up1.collect(prefix + ".up1", out);
        dec0.collect(prefix + ".dec0", out);
        attn0.collect(prefix + ".attn0", out);
        out_gn.collect(prefix + ".out_gn", out);
        out_conv.collect(prefix + ".out_conv", out);
    }

    // z: (n, 4, 32, 32); ctx: (n, 1, L, ctx_dim); optional fused injections
    Tensor forward(const Tensor& z, const std::vector<int>& t, const Tensor& ctx,
                   const FusionInput* fuse = nullptr) {
        if (z.c() != cfg.latent_channels)
            throw PreconditionError("BaseUnet: latent channel mismatch");
        if (ctx.w() != cfg.ctx_dim) throw PreconditionError("BaseUnet: ctx width mismatch");
        if (static_cast<int>(t.size()) != z.n())
            throw PreconditionError("BaseUnet: one timestep per batch item required");
        has_fusion_cache = fuse != nullptr;

        MatRM te = temb.forward(t);
        Tensor h = stem.forward(z);
        Tensor s0 = enc0.forward(h, &te);
        h         = down0.forward(s0);
        Tensor s1 = enc1.forward(h, &te);
        Tensor s2 = down1.forward(s1);
        h = mid1.forward(s2, &te);
        h = mid_attn.forward(h, ctx);
        h = mid2.forward(h, &te);

        h = dec2.forward(concat_channels(h, s2), &te);
        h = attn2.forward(h, ctx);
        if (fuse && fuse->at8) h += *fuse->at8;
        h = up2.forward(h);
        h = dec1.forward(concat_channels(h, s1), &te);
        h = attn1.forward(h, ctx);
        if (fuse && fuse->at16) h += *fuse->at16;
        h = up1.forward(h);
        h = dec0.forward(concat_channels(h, s0), &te);
        h = attn0.forward(h, ctx);
        if (fuse && fuse->at32) h += *fuse->at32;

        return out_conv.forward(out_act.forward(out_gn.forward(h)));
    }

    // Returns dz; when fusion was active, dfuse receives the gradients flowing
    // into each injection site (identical to the decoder-path gradient there).
    Tensor backward(const Tensor& dy, FusionGrad* dfuse = nullptr) {
        const int n = dy.n();
        MatRM dte = MatRM::Zero(n, cfg.temb_dim);

        Tensor dh = out_gn.backward(out_act.backward(out_conv.backward(dy)));
        if (has_fusion_cache && dfuse) dfuse->at32 = dh;
        dh = attn0.backward(dh);
        Tensor dcat0 = dec0.backward(dh, &dte);
        Tensor dup1, ds0_dec;
        split_channels(dcat0, dup1, ds0_dec, cfg.widths[0]);
        dh = up1.backward(dup1);
        if (has_fusion_cache && dfuse) dfuse->at16 = dh;
        dh = attn1.backward(dh);
        Tensor dcat1 = dec1.backward(dh, &dte);
        Tensor dup2, ds1_dec;
        split_channels(dcat1, dup2, ds1_dec, cfg.widths[1]);
        dh = up2.backward(dup2);
        if (has_fusion_cache && dfuse) dfuse->at8 = dh;
        dh = attn2.backward(dh);
        Tensor dcat2 = dec2.backward(dh, &dte);
        Tensor dmid, ds2_dec;
        split_channels(dcat2, dmid, ds2_dec, cfg.widths[2]);

        dh = mid2.backward(dmid, &dte);
        dh = mid_attn.backward(dh);
        Tensor ds2 = mid1.backward(dh, &dte);
        ds2 += ds2_dec;
        Tensor ds1 = down1.backward(ds2);
        ds1 += ds1_dec;
        Tensor ds0 = down0.backward(enc1.backward(ds1, &dte));
        ds0 += ds0_dec;
        Tensor dz = stem.backward(enc0.backward(ds0, &dte));
        temb.backward(dte);
        return dz;
    }
};

}  // namespace ssrb

#endif
