#ifndef SSRB_VAE_HPP
#define SSRB_VAE_HPP

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ssrb/checkpoint.hpp"
#include "ssrb/core/errors.hpp"
#include "ssrb/core/rng.hpp"
#include "ssrb/core/tensor.hpp"
#include "ssrb/diffusion.hpp"
#include "ssrb/nn/adam.hpp"
#include "ssrb/nn/layers.hpp"
#include "ssrb/phantom.hpp"

namespace ssrb {

// Latents are NCHW tensors with C = 4 at 1/4 spatial resolution.
using LatentTensor = Tensor;

inline constexpr int kLatentChannels = 4;

// --------------------------- image <-> tensor glue --------------------------

inline Tensor image_to_tensor(const Image& img) {
    Tensor t(1, 1, img.h, img.w);
    std::copy(img.v.begin(), img.v.end(), t.data.begin());
    return t;
}

inline Image tensor_to_image(const Tensor& t, int n = 0) {
    if (t.c() != 1) throw PreconditionError("tensor_to_image: expected a 1-channel tensor");
    Image img(t.h(), t.w());
    const float* p = t.chan(n, 0);
    std::copy(p, p + img.numel(), img.v.begin());
    return img;
}

enum class EncodeMode { mean, sample };

// ------------------------------- architecture -------------------------------

// f4 VAE: two stride-2 convs down, mean/logvar heads, mirrored decoder with
// nearest-upsample convs and a sigmoid squashing output.
struct Vae {
    // encoder
    nn::Conv2d e_conv1, e_conv2;
    nn::SiLU e_act1, e_act2, e_act3;
    nn::ResBlock e_res;
    nn::GroupNorm e_gn;
    nn::Conv2d e_head;  // -> 2 * kLatentChannels (mean, logvar)
    // decoder
    nn::Conv2d d_in;
    nn::ResBlock d_res;
    nn::UpsampleConv d_up1, d_up2;
    nn::SiLU d_act1, d_act2;
    nn::Conv2d d_out;
    nn::Sigmoid d_squash;

    float latent_scale = 1.0f;  // multiplier bringing train latents to ~unit std
    bool trained       = false;

    Tensor mean_cache, logvar_cache, logvar_raw_cache;

    explicit Vae(uint64_t init_seed = 0x76616531ULL) {
        rng::Stream s = rng::derive_stream(init_seed, "vae-init");
        e_conv1 = nn::Conv2d(1, 32, 3, 2, 1, s);
        e_conv2 = nn::Conv2d(32, 64, 3, 2, 1, s);
        e_res   = nn::ResBlock(64, 64, 0, s);
        e_gn    = nn::GroupNorm(64);
        e_head  = nn::Conv2d(64, 2 * kLatentChannels, 1, 1, 0, s);
        d_in    = nn::Conv2d(kLatentChannels, 64, 1, 1, 0, s);
        d_res   = nn::ResBlock(64, 64, 0, s);
        d_up1   = nn::UpsampleConv(64, 32, s);
        d_up2   = nn::UpsampleConv(32, 16, s);
        d_out   = nn::Conv2d(16, 1, 3, 1, 1, s);
    }

    void collect_encoder(const std::string& prefix, std::vector<nn::ParamRef>& out) {
        e_conv1.collect(prefix + ".conv1", out);
        e_conv2.collect(prefix + ".conv2", out);
        e_res.collect(prefix + ".res", out);
        e_gn.collect(prefix + ".gn", out);
        e_head.collect(prefix + ".head", out);
    }
    void collect_decoder(const std::string& prefix, std::vector<nn::ParamRef>& out) {
        d_in.collect(prefix + ".in", out);
        d_res.collect(prefix + ".res", out);
        d_up1.collect(prefix + ".up1", out);
        d_up2.collect(prefix + ".up2", out);
        d_out.collect(prefix + ".out", out);
    }

    ParamGroups param_groups() {
        ParamGroups g;
        g.push_back({"encoder", {}});
        collect_encoder("enc", g.back().second);
        g.push_back({"decoder", {}});
        collect_decoder("dec", g.back().second);
        return g;
    }

    void copy_weights_from(Vae& other) {
        auto mine   = param_groups();
        auto theirs = other.param_groups();
        for (size_t gi = 0; gi < mine.size(); gi++)
            for (size_t pi = 0; pi < mine[gi].second.size(); pi++)
                mine[gi].second[pi].w->data = theirs[gi].second[pi].w->data;
        latent_scale = other.latent_scale;
        trained      = other.trained;
    }

    // ---- encoder ----

    void require_trained() const {
        if (!trained) throw StateError("vae: weights are untrained; run train-vae first");
    }

    // (mean, logvar) with logvar clamped to [-30, 20]
    std::pair<Tensor, Tensor> forward_moments(const Tensor& x) {
        if (x.h() % 4 != 0 || x.w() % 4 != 0)
            throw PreconditionError("vae encode: image side must be divisible by 4");
        Tensor h = e_act1.forward(e_conv1.forward(x));
        h        = e_act2.forward(e_conv2.forward(h));
        h        = e_res.forward(h);
        h        = e_act3.forward(e_gn.forward(h));
        Tensor mo = e_head.forward(h);
        Tensor mean, logvar;
        split_channels(mo, mean, logvar, kLatentChannels);
        logvar_raw_cache = logvar;
        for (auto& v : logvar.data) v = std::min(20.0f, std::max(-30.0f, v));
        mean_cache   = mean;
        logvar_cache = logvar;
        return {mean, logvar};
    }

    Tensor encoder_backward(const Tensor& dmean, const Tensor& dlogvar) {
        Tensor dlv = dlogvar;
        for (size_t i = 0; i < dlv.numel(); i++) {
            float raw = logvar_raw_cache.data[i];
            if (raw < -30.0f || raw > 20.0f) dlv.data[i] = 0.0f;  // clamp gate
        }
        Tensor dmo = concat_channels(dmean, dlv);
        Tensor dh  = e_head.backward(dmo);
        dh         = e_gn.backward(e_act3.backward(dh));
        dh         = e_res.backward(dh);
        dh         = e_conv2.backward(e_act2.backward(dh));
        return e_conv1.backward(e_act1.backward(dh));
    }

    Tensor encode(const Tensor& x, EncodeMode mode, uint64_t seed = 0) {
        require_trained();
        auto [mean, logvar] = forward_moments(x);
        if (mode == EncodeMode::mean) return mean;
        rng::Stream s = rng::derive_stream(seed, "vae-sample");
        Tensor z      = mean;
        for (size_t i = 0; i < z.numel(); i++)
            z.data[i] += std::exp(0.5f * logvar.data[i]) * s.normalf();
        return z;
    }

    // ---- decoder ----

    Tensor decode(const Tensor& z) {
        if (z.c() != kLatentChannels)
            throw PreconditionError("vae decode: latent must have 4 channels");
        Tensor h = d_res.forward(d_in.forward(z));
        h        = d_act1.forward(d_up1.forward(h));
        h        = d_act2.forward(d_up2.forward(h));
        return d_squash.forward(d_out.forward(h));
    }

    Tensor decode_backward(const Tensor& dy) {
        Tensor dh = d_out.backward(d_squash.backward(dy));
        dh        = d_up2.backward(d_act2.backward(dh));
        dh        = d_up1.backward(d_act1.backward(dh));
        return d_in.backward(d_res.backward(dh));
    }

    // ---- scaled latent helpers used by the diffusion pipeline ----

    Tensor encode_scaled(const Tensor& x) {
        Tensor z = encode(x, EncodeMode::mean);
        z *= latent_scale;
        return z;
    }

    Tensor decode_scaled(const Tensor& z) {
        require_trained();
        Tensor zu = z;
        zu *= (1.0f / latent_scale);
        return decode(zu);
    }
};

// ------------------------------ checkpoints ---------------------------------

inline void save_vae(Vae& vae, const std::filesystem::path& path, const json& extra_meta) {
    json meta         = extra_meta;
    meta["kind"]      = "vae";
    meta["latent_scale"] = vae.latent_scale;
    meta["trained"]      = vae.trained;
    save_checkpoint(path, vae.param_groups(), meta);
}

inline json load_vae(Vae& vae, const std::filesystem::path& path) {
    json meta = load_checkpoint(path, vae.param_groups());
    if (meta.value("kind", "") != "vae")
        throw FormatError("not a vae checkpoint: " + path.string());
    vae.latent_scale = meta.value("latent_scale", 1.0f);
    vae.trained      = meta.value("trained", false);
    return meta;
}

// -------------------------------- training ----------------------------------

struct VaeTrainConfig {
    int iterations = 900;
    int batch      = 8;
    float lr       = 2e-3f;
    float kappa    = 1e-6f;  // KL weight
    uint64_t seed  = 1;
    int start_iter = 0;  // nonzero when resuming
    int log_every  = 50;
};

struct TrainCurve {
    std::vector<double> losses;

    void save(const std::filesystem::path& path) const {
        json j;
        j["losses"] = losses;
        atomic_write_file(path, j.dump() + "\n");
    }
};

// Minimizes MSE(recon, x) + kappa * sum KL(mean, logvar || N(0,1)) / batch
// over the train split; fills in the global latent scale afterwards. Batches
// and noise are keyed by the absolute iteration index, so resuming with
// start_iter and a restored optimizer reproduces the uninterrupted run.
inline TrainCurve train_vae(Vae& vae, const DatasetManifest& manifest,
                            const VaeTrainConfig& cfg,
                            const std::function<void(int, double)>& progress = {},
                            nn::Adam* opt_io = nullptr) {
    if (cfg.iterations < 1 || cfg.batch < 1 || !(cfg.lr > 0.0f))
        throw ConfigError("train_vae: bad config");
    const int count = static_cast<int>(manifest.items.size());
    if (count < 1) throw PreconditionError("train_vae: empty manifest");

    // images are small; keep the whole split resident
    std::vector<Image> images;
    images.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; i++) images.push_back(load_dataset_item(manifest, i).px);
    const int H = images[0].h, W = images[0].w;

    std::vector<nn::ParamRef> params;
    vae.collect_encoder("enc", params);
    vae.collect_decoder("dec", params);
    nn::Adam local_opt;
    nn::Adam& opt = opt_io ? *opt_io : local_opt;
    opt.lr        = cfg.lr;
    if (opt.m.size() != params.size()) opt.init(params);  // fresh, not resumed

    vae.trained = true;  // weights are live from here on
    TrainCurve curve;
    for (int it = cfg.start_iter; it < cfg.start_iter + cfg.iterations; it++) {
        rng::Stream pick = rng::derive_stream(cfg.seed, "vae-batch", it);
        Tensor x(cfg.batch, 1, H, W);
        for (int b = 0; b < cfg.batch; b++) {
            const Image& img = images[static_cast<size_t>(pick.uniform_int(0, count - 1))];
            std::copy(img.v.begin(), img.v.end(), x.data.begin() + static_cast<ptrdiff_t>(b) * H * W);
        }

        auto [mean, logvar] = vae.forward_moments(x);
        rng::Stream es = rng::derive_stream(cfg.seed, "vae-eps", it);
        Tensor eps(mean.n(), mean.c(), mean.h(), mean.w());
        es.fill_normal(eps);
        Tensor z = mean;
        for (size_t i = 0; i < z.numel(); i++)
            z.data[i] += std::exp(0.5f * logvar.data[i]) * eps.data[i];

        Tensor recon = vae.decode(z);
        double l_rec = mse(recon, x);
        double kl    = 0.0;
        for (size_t i = 0; i < mean.numel(); i++) {
            double mu = mean.data[i], lv = logvar.data[i];
            kl += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
        }
        kl /= cfg.batch;
        double loss = l_rec + cfg.kappa * kl;
        if (!std::isfinite(loss))
            throw NumericError("train_vae: non-finite loss at iteration " + std::to_string(it));
        curve.losses.push_back(loss);

        nn::zero_grads(params);
        Tensor dz = vae.decode_backward(mse_grad(recon, x));
        Tensor dmean = dz, dlogvar = dz;
        const float kb = cfg.kappa / static_cast<float>(cfg.batch);
        for (size_t i = 0; i < dz.numel(); i++) {
            float sig       = std::exp(0.5f * logvar.data[i]);
            dmean.data[i]   = dz.data[i] + kb * mean.data[i];
            dlogvar.data[i] = dz.data[i] * eps.data[i] * 0.5f * sig +
                              kb * 0.5f * (std::exp(logvar.data[i]) - 1.0f);
        }
        vae.encoder_backward(dmean, dlogvar);
        opt.step(params);

        if (progress && (it % cfg.log_every == 0 || it + 1 == cfg.start_iter + cfg.iterations))
            progress(it, loss);
    }

    // global latent scale: 1 / std of mean-mode train latents
    double sq = 0.0, sm = 0.0;
    size_t total = 0;
    for (const auto& img : images) {
        Tensor z = vae.encode(image_to_tensor(img), EncodeMode::mean);
        for (float v : z.data) {
            sm += v;
            sq += static_cast<double>(v) * v;
        }
        total += z.numel();
    }
    double m   = sm / static_cast<double>(total);
    double var = sq / static_cast<double>(total) - m * m;
    vae.latent_scale = static_cast<float>(1.0 / std::max(std::sqrt(var), 1e-6));
    return curve;
}

}  // namespace ssrb

#endif
