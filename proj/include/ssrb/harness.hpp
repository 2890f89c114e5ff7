#ifndef SSRB_HARNESS_HPP
#define SSRB_HARNESS_HPP

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ssrb/control.hpp"
#include "ssrb/degrade.hpp"
#include "ssrb/diffusion.hpp"
#include "ssrb/metrics.hpp"
#include "ssrb/phantom.hpp"
#include "ssrb/text_cond.hpp"
#include "ssrb/vae.hpp"

namespace ssrb {

// ------------------------------- run config ---------------------------------

enum class VisualEncoderMode { frozen, learnable };
enum class CondInit { pretrained, random };

inline const char* to_string(VisualEncoderMode m) {
    return m == VisualEncoderMode::frozen ? "frozen" : "learnable";
}
inline VisualEncoderMode visual_encoder_from_string(const std::string& s) {
    if (s == "frozen") return VisualEncoderMode::frozen;
    if (s == "learnable") return VisualEncoderMode::learnable;
    throw ConfigError("unknown visual encoder mode: " + s + " (expected frozen|learnable)");
}

inline const char* to_string(CondInit c) {
    return c == CondInit::pretrained ? "pretrained" : "random";
}
inline CondInit cond_init_from_string(const std::string& s) {
    if (s == "pretrained") return CondInit::pretrained;
    if (s == "random") return CondInit::random;
    throw ConfigError("unknown cond init: " + s + " (expected pretrained|random)");
}

// One knob set for either training phase. The ablation flags only matter for
// the finetune phase; the pretrain prior always trains text-conditioned,
// without f_lr.
struct TrainConfig {
    int iterations = 4000;
    int batch      = 4;
    float lr       = 5e-5f;
    uint64_t seed  = 1;
    int scale      = 2;
    InstructionVariant text          = InstructionVariant::describe;
    VisualEncoderMode visual_encoder = VisualEncoderMode::frozen;
    CondInit cond_init               = CondInit::pretrained;
    FusionMode fusion                = FusionMode::zero_init;
    int start_iter = 0;  // nonzero when resuming
    int log_every  = 200;

    void validate() const {
        if (iterations < 1) throw ConfigError("TrainConfig: iterations must be positive");
        if (batch < 1) throw ConfigError("TrainConfig: batch must be positive");
        if (!(lr > 0.0f)) throw ConfigError("TrainConfig: learning rate must be positive");
        if (scale != 2 && scale != 4) throw ConfigError("TrainConfig: scale must be 2 or 4");
        if (start_iter < 0) throw ConfigError("TrainConfig: start_iter must be >= 0");
    }
};

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"iterations", c.iterations},
             {"batch", c.batch},
             {"lr", c.lr},
             {"seed", c.seed},
             {"scale", c.scale},
             {"text", to_string(c.text)},
             {"visual_encoder", to_string(c.visual_encoder)},
             {"cond_init", to_string(c.cond_init)},
             {"fusion", to_string(c.fusion)},
             {"start_iter", c.start_iter},
             {"log_every", c.log_every}};
}
inline void from_json(const json& j, TrainConfig& c) {
    j.at("iterations").get_to(c.iterations);
    j.at("batch").get_to(c.batch);
    j.at("lr").get_to(c.lr);
    j.at("seed").get_to(c.seed);
    j.at("scale").get_to(c.scale);
    c.text           = instruction_from_string(j.at("text").get<std::string>());
    c.visual_encoder = visual_encoder_from_string(j.at("visual_encoder").get<std::string>());
    c.cond_init      = cond_init_from_string(j.at("cond_init").get<std::string>());
    c.fusion         = fusion_mode_from_string(j.at("fusion").get<std::string>());
    c.start_iter = j.value("start_iter", 0);
    c.log_every  = j.value("log_every", 200);
}

inline void to_json(json& j, const DenoiserConfig& c) {
    j = json{{"latent_channels", c.latent_channels},
             {"widths", c.widths},
             {"ctx_dim", c.ctx_dim},
             {"temb_dim", c.temb_dim},
             {"head_dim", c.head_dim}};
}
inline void from_json(const json& j, DenoiserConfig& c) {
    j.at("latent_channels").get_to(c.latent_channels);
    j.at("widths").get_to(c.widths);
    j.at("ctx_dim").get_to(c.ctx_dim);
    j.at("temb_dim").get_to(c.temb_dim);
    j.at("head_dim").get_to(c.head_dim);
}

constexpr int kSampleSteps = 50;

inline NoiseSchedule default_schedule() { return make_schedule(); }

// --------------------------- conditioning plumbing --------------------------

// (1, 1, L, d) context tensor from a prompt embedding; tokens are row-major
inline Tensor ctx_from_embedding(const PromptEmbedding& e) {
    Tensor c(1, 1, static_cast<int>(e.tokens.rows()), static_cast<int>(e.tokens.cols()));
    std::copy(e.tokens.data(), e.tokens.data() + e.tokens.size(), c.data.begin());
    return c;
}

// Everything a training loop needs per dataset item, computed once up front:
// the scaled target latent, the caption and its embedding, and the HR pixels
// for on-the-fly degradation.
struct TrainItem {
    Image hr;
    std::optional<AnatomyMeta> meta;
    uint64_t seed = 0;
    Tensor z0;            // (1, 4, H/4, W/4), scaled
    Tensor ctx;           // (1, 1, L, d)
    std::string caption;  // "" for text:none
};

inline std::vector<TrainItem> build_train_items(Vae& vae, const TextEncoder& enc,
                                                const DatasetManifest& man,
                                                InstructionVariant text) {
    if (man.items.empty()) throw PreconditionError("build_train_items: empty manifest");
    Instruction ins = make_instruction(text);
    std::vector<TrainItem> items;
    items.reserve(man.items.size());
    for (size_t i = 0; i < man.items.size(); i++) {
        NormalizedImage ni = load_dataset_item(man, i);
        TrainItem it;
        it.hr   = ni.px;
        it.meta = ni.meta;
        it.seed = man.items[i].seed;
        it.z0   = vae.encode_scaled(image_to_tensor(ni.px));
        PromptText p = get_prompt(ni.meta, ins);
        it.caption   = p.text;
        it.ctx       = ctx_from_embedding(enc.encode_text(p));
        items.push_back(std::move(it));
    }
    return items;
}

// writes item (n=1) into batch slot; shapes past dim 0 must agree
inline void set_slot(Tensor& batch, const Tensor& item, int slot) {
    if (item.n() != 1 || batch.c() != item.c() || batch.h() != item.h() || batch.w() != item.w())
        throw PreconditionError("set_slot: shape mismatch");
    std::copy(item.data.begin(), item.data.end(),
              batch.data.begin() + static_cast<ptrdiff_t>(slot) * item.numel());
}

inline Tensor get_slot(const Tensor& batch, int slot) {
    Tensor out(1, batch.c(), batch.h(), batch.w());
    const float* p = batch.data.data() + static_cast<ptrdiff_t>(slot) * out.numel();
    std::copy(p, p + out.numel(), out.data.begin());
    return out;
}

// ------------------------------- pretraining --------------------------------

// Trains the base prior with the noise-prediction objective on HR latents,
// text conditioning only (no f_lr). Batches, timesteps and noise are keyed by
// the absolute iteration index, so resuming with start_iter and a restored
// optimizer reproduces the uninterrupted run.
inline TrainCurve pretrain_base(BaseUnet& net, Vae& vae, const TextEncoder& enc,
                                const DatasetManifest& train, const TrainConfig& cfg,
                                const std::function<void(int, double)>& progress = {},
                                nn::Adam* opt_io = nullptr) {
    cfg.validate();
    vae.require_trained();
    NoiseSchedule sched = default_schedule();
    auto items          = build_train_items(vae, enc, train, cfg.text);
    const int count     = static_cast<int>(items.size());
    const int lh = items[0].z0.h(), lw = items[0].z0.w();
    const int L = items[0].ctx.h(), d = items[0].ctx.w();

    std::vector<nn::ParamRef> params;
    net.collect("base", params);
    nn::Adam local_opt;
    nn::Adam& opt = opt_io ? *opt_io : local_opt;
    opt.lr        = cfg.lr;
    if (opt.m.size() != params.size()) opt.init(params);  // fresh, not resumed

    TrainCurve curve;
    for (int it = cfg.start_iter; it < cfg.start_iter + cfg.iterations; it++) {
        rng::Stream pick = rng::derive_stream(cfg.seed, "pre-batch", it);
        rng::Stream trng = rng::derive_stream(cfg.seed, "pre-t", it);
        rng::Stream erng = rng::derive_stream(cfg.seed, "pre-eps", it);

        Tensor z0(cfg.batch, net.cfg.latent_channels, lh, lw);
        Tensor ctx(cfg.batch, 1, L, d);
        std::vector<int> ts(cfg.batch);
        for (int b = 0; b < cfg.batch; b++) {
            const TrainItem& item = items[static_cast<size_t>(pick.uniform_int(0, count - 1))];
            set_slot(z0, item.z0, b);
            set_slot(ctx, item.ctx, b);
            ts[b] = sample_timestep(trng, sched);
        }
        Tensor eps(z0.n(), z0.c(), z0.h(), z0.w());
        erng.fill_normal(eps);

        Tensor zt = z0;
        for (int b = 0; b < cfg.batch; b++) {
            const float a  = static_cast<float>(std::sqrt(sched.alpha_bar_at(ts[b])));
            const float bb = static_cast<float>(std::sqrt(1.0 - sched.alpha_bar_at(ts[b])));
            float* z       = zt.chan(b, 0);
            const float* e = eps.chan(b, 0);
            const size_t m = zt.numel() / static_cast<size_t>(cfg.batch);
            for (size_t i = 0; i < m; i++) z[i] = a * z[i] + bb * e[i];
        }

        Tensor pred = net.forward(zt, ts, ctx);
        double loss = mse(pred, eps);
        if (!pred.all_finite() || !std::isfinite(loss))
            throw NumericError("pretrain_base: non-finite loss at iteration " + std::to_string(it));
        curve.losses.push_back(loss);

        nn::zero_grads(params);
        net.backward(mse_grad(pred, eps));
        opt.step(params);

        if (progress && (it % cfg.log_every == 0 || it + 1 == cfg.start_iter + cfg.iterations))
            progress(it, loss);
    }
    return curve;
}

// ------------------------------ checkpoints ---------------------------------

inline void save_base_unet(BaseUnet& net, const std::filesystem::path& path,
                           const json& extra_meta, const nn::Adam* opt = nullptr) {
    ParamGroups g;
    g.push_back({"base", {}});
    net.collect("base", g.back().second);
    json meta    = extra_meta;
    meta["kind"] = "base-unet";
    json dj;
    to_json(dj, net.cfg);
    meta["denoiser"] = dj;
    save_checkpoint(path, g, meta, opt);
}

inline json load_base_unet(BaseUnet& net, const std::filesystem::path& path) {
    ParamGroups g;
    g.push_back({"base", {}});
    net.collect("base", g.back().second);
    json meta = load_checkpoint(path, g);
    if (meta.value("kind", "") != "base-unet")
        throw FormatError("not a base-unet checkpoint: " + path.string());
    return meta;
}

// Group layout of a control checkpoint. The frozen base is stored too, so the
// file is self-contained for sampling and its base hash witnesses the freeze.
inline ParamGroups control_param_groups(ControlledModel& m, Vae* flr_enc) {
    ParamGroups g;
    g.push_back({"base", {}});
    m.collect_base(g.back().second);
    g.push_back({"cond", {}});
    m.collect_cond(g.back().second);
    if (m.fusion_mode == FusionMode::zero_init) {
        g.push_back({"fusion", {}});
        m.collect_fusion(g.back().second);
    }
    if (flr_enc) {
        g.push_back({"flr_encoder", {}});
        flr_enc->collect_encoder("flr_enc", g.back().second);
    }
    return g;
}

// -------------------------------- finetuning --------------------------------

// Builds the finetune model per cfg. cond_init=pretrained loads the frozen
// base and clones it into the condition branch; cond_init=random starts the
// whole stack from seeded random weights (no checkpoint involved).
inline ControlledModel build_finetune_model(const DenoiserConfig& dcfg, const TrainConfig& cfg,
                                            const std::filesystem::path& base_ckpt) {
    ControlledModel m(dcfg, rng::derive_seed(cfg.seed, "model"), cfg.fusion);
    if (cfg.cond_init == CondInit::pretrained) {
        if (base_ckpt.empty() || !std::filesystem::exists(base_ckpt))
            throw StateError("finetune: cond_init=pretrained needs a base checkpoint (got '" +
                             base_ckpt.string() + "'); run pretrain-base first");
        load_base_unet(m.base, base_ckpt);
        m.clone_condition_network();
    } else {
        // A frozen random prior has to be a random function, not the zero
        // one: the zero-init output head only earns its keep when pretraining
        // follows, and here it would kill every gradient behind it.
        rng::Stream hs = rng::derive_stream(rng::derive_seed(cfg.seed, "model"), "random-head");
        m.base.out_conv =
            nn::Conv2d(dcfg.widths[0], dcfg.latent_channels, 3, 1, 1, hs, 1.0f);
    }
    return m;
}

// Adapts the condition branch to degraded inputs: per item, degrade the HR
// image on the fly, upsample the LR result back to HR size bicubically,
// encode it to f_lr, and minimize the noise-prediction loss over cond+fusion
// (plus the f_lr encoder copy when it is learnable). The base and the target
// encoder stay frozen throughout; freezing is structural (the optimizer only
// ever sees trainable_params).
inline TrainCurve finetune_control(ControlledModel& m, Vae& vae, Vae* flr_enc,
                                   const TextEncoder& enc, const DatasetManifest& train,
                                   const TrainConfig& cfg,
                                   const std::function<void(int, double)>& progress = {},
                                   nn::Adam* opt_io = nullptr) {
    cfg.validate();
    vae.require_trained();
    const bool learnable = flr_enc != nullptr;
    if (learnable != (cfg.visual_encoder == VisualEncoderMode::learnable))
        throw PreconditionError("finetune_control: flr_enc must be given exactly when "
                                "visual_encoder=learnable");

    NoiseSchedule sched = default_schedule();
    auto items          = build_train_items(vae, enc, train, cfg.text);
    const int count     = static_cast<int>(items.size());
    const int H = items[0].hr.h, W = items[0].hr.w;
    if (H % (4 * cfg.scale) != 0 || W % (4 * cfg.scale) != 0)
        throw PreconditionError("finetune_control: image side must be divisible by 4*scale");
    const int L = items[0].ctx.h(), d = items[0].ctx.w();

    RecipeRanges ranges;
    DoseParams dose;

    std::vector<nn::ParamRef> trainable = m.trainable_params();
    if (learnable) flr_enc->collect_encoder("flr_enc", trainable);
    std::vector<nn::ParamRef> all = trainable;
    m.collect_base(all);  // zeroed each step; never optimized

    nn::Adam local_opt;
    nn::Adam& opt = opt_io ? *opt_io : local_opt;
    opt.lr        = cfg.lr;
    if (opt.m.size() != trainable.size()) opt.init(trainable);

    TrainCurve curve;
    for (int it = cfg.start_iter; it < cfg.start_iter + cfg.iterations; it++) {
        rng::Stream pick = rng::derive_stream(cfg.seed, "ft-batch", it);
        rng::Stream trng = rng::derive_stream(cfg.seed, "ft-t", it);
        rng::Stream erng = rng::derive_stream(cfg.seed, "ft-eps", it);

        Tensor z0(cfg.batch, m.cfg.latent_channels, H / 4, W / 4);
        Tensor ctx(cfg.batch, 1, L, d);
        Tensor x_up(cfg.batch, 1, H, W);
        std::vector<int> ts(cfg.batch);
        for (int b = 0; b < cfg.batch; b++) {
            const TrainItem& item = items[static_cast<size_t>(pick.uniform_int(0, count - 1))];
            set_slot(z0, item.z0, b);
            set_slot(ctx, item.ctx, b);
            ts[b] = sample_timestep(trng, sched);

            DegradationRecipe rec = sample_recipe(rng::derive_seed(cfg.seed, "ft-recipe", it, b),
                                                  ranges, cfg.scale);
            NormalizedImage hr{item.hr, item.meta};
            NormalizedImage lr = make_low_res(hr, rec, dose);
            NormalizedImage up = resize(lr, static_cast<double>(cfg.scale), ResizeKernel::bicubic);
            set_slot(x_up, image_to_tensor(up.px), b);
        }
        Tensor eps(z0.n(), z0.c(), z0.h(), z0.w());
        erng.fill_normal(eps);

        Tensor f_lr;
        if (learnable) {
            auto [mean, logvar] = flr_enc->forward_moments(x_up);
            f_lr                = mean;
            f_lr *= flr_enc->latent_scale;
        } else {
            f_lr = vae.encode_scaled(x_up);
        }

        Tensor zt = z0;
        for (int b = 0; b < cfg.batch; b++) {
            const float a  = static_cast<float>(std::sqrt(sched.alpha_bar_at(ts[b])));
            const float bb = static_cast<float>(std::sqrt(1.0 - sched.alpha_bar_at(ts[b])));
            float* z       = zt.chan(b, 0);
            const float* e = eps.chan(b, 0);
            const size_t n = zt.numel() / static_cast<size_t>(cfg.batch);
            for (size_t i = 0; i < n; i++) z[i] = a * z[i] + bb * e[i];
        }

        Tensor pred = m.forward(zt, ts, ctx, f_lr);
        double loss = mse(pred, eps);
        if (!pred.all_finite() || !std::isfinite(loss))
            throw NumericError("finetune_control: non-finite loss at iteration " +
                               std::to_string(it));
        curve.losses.push_back(loss);

        nn::zero_grads(all);
        Tensor dx2c = m.backward(mse_grad(pred, eps));
        if (learnable) {
            Tensor dz_part, df_lr;
            split_channels(dx2c, dz_part, df_lr, m.cfg.latent_channels);
            df_lr *= flr_enc->latent_scale;
            Tensor dlogvar(df_lr.n(), df_lr.c(), df_lr.h(), df_lr.w());
            flr_enc->encoder_backward(df_lr, dlogvar);
        }
        opt.step(trainable);

        if (progress && (it % cfg.log_every == 0 || it + 1 == cfg.start_iter + cfg.iterations))
            progress(it, loss);
    }
    return curve;
}

// ------------------------------ super-resolution ----------------------------

// A loaded restoration stack: frozen VAE, controlled denoiser, and the f_lr
// encoder (a separate copy when the learnable arm trained one).
struct SrModel {
    DenoiserConfig dcfg;
    FusionMode fusion                = FusionMode::zero_init;
    InstructionVariant text          = InstructionVariant::describe;
    VisualEncoderMode visual_encoder = VisualEncoderMode::frozen;
    CondInit cond_init               = CondInit::pretrained;
    int scale        = 2;
    int hr_size      = 128;
    int sample_steps = kSampleSteps;
    ControlledModel model;
    Vae vae;
    Vae flr_enc;  // weight-identical to vae unless visual_encoder=learnable
    NoiseSchedule sched;
};

inline void save_control(SrModel& sr, const std::filesystem::path& path,
                         const json& extra_meta, const nn::Adam* opt = nullptr) {
    Vae* fe = sr.visual_encoder == VisualEncoderMode::learnable ? &sr.flr_enc : nullptr;
    json meta            = extra_meta;
    meta["kind"]         = "control";
    meta["fusion"]       = to_string(sr.fusion);
    meta["text"]         = to_string(sr.text);
    meta["visual_encoder"] = to_string(sr.visual_encoder);
    meta["cond_init"]    = to_string(sr.cond_init);
    meta["scale"]        = sr.scale;
    meta["hr_size"]      = sr.hr_size;
    meta["sample_steps"] = sr.sample_steps;
    json dj;
    to_json(dj, sr.dcfg);
    meta["denoiser"] = dj;
    json vh          = json::object();
    for (auto& [name, ps] : sr.vae.param_groups()) vh[name] = group_hash(ps);
    meta["vae_hashes"]         = vh;
    meta["text_encoder_hash"]  = default_text_encoder().param_hash();
    save_checkpoint(path, control_param_groups(sr.model, fe), meta, opt);
}

// Rebuilds a full restoration stack from a control checkpoint + the VAE
// checkpoint it was trained against (identity is verified by group hash).
inline SrModel load_sr_model(const std::filesystem::path& control_ckpt,
                             const std::filesystem::path& vae_ckpt) {
    json meta = checkpoint_meta(control_ckpt);
    if (meta.value("kind", "") != "control")
        throw FormatError("not a control checkpoint: " + control_ckpt.string());

    SrModel sr;
    sr.dcfg           = meta.at("denoiser").get<DenoiserConfig>();
    sr.fusion         = fusion_mode_from_string(meta.at("fusion").get<std::string>());
    sr.text           = instruction_from_string(meta.at("text").get<std::string>());
    sr.visual_encoder = visual_encoder_from_string(meta.at("visual_encoder").get<std::string>());
    sr.cond_init      = cond_init_from_string(meta.at("cond_init").get<std::string>());
    sr.scale          = meta.at("scale").get<int>();
    sr.hr_size        = meta.at("hr_size").get<int>();
    sr.sample_steps   = meta.value("sample_steps", kSampleSteps);
    sr.sched          = default_schedule();

    load_vae(sr.vae, vae_ckpt);
    json vh = json::object();
    for (auto& [name, ps] : sr.vae.param_groups()) vh[name] = group_hash(ps);
    if (meta.value("vae_hashes", json::object()) != vh)
        throw StateError("load_sr_model: VAE checkpoint does not match the one this control "
                         "checkpoint was trained with");

    sr.model = ControlledModel(sr.dcfg, 0, sr.fusion);
    Vae* fe  = nullptr;
    if (sr.visual_encoder == VisualEncoderMode::learnable) {
        sr.flr_enc.copy_weights_from(sr.vae);
        fe = &sr.flr_enc;
    }
    load_checkpoint(control_ckpt, control_param_groups(sr.model, fe));
    if (sr.visual_encoder == VisualEncoderMode::frozen) sr.flr_enc.copy_weights_from(sr.vae);
    return sr;
}

// LR -> HR: bicubic upsample, encode to f_lr, caption + embed, spaced
// ancestral sampling from seeded noise, decode.
inline NormalizedImage super_resolve(SrModel& sr, const NormalizedImage& lr, int scale,
                                     const Instruction& instruction, uint64_t seed) {
    if (scale != 2 && scale != 4) throw PreconditionError("super_resolve: scale must be 2 or 4");
    if (lr.px.h * scale != sr.hr_size || lr.px.w * scale != sr.hr_size)
        throw PreconditionError("super_resolve: lr side x scale must equal the model HR side (" +
                                std::to_string(sr.hr_size) + ")");

    NormalizedImage up = resize(lr, static_cast<double>(scale), ResizeKernel::bicubic);
    Tensor f_lr        = sr.flr_enc.encode_scaled(image_to_tensor(up.px));
    PromptText prompt  = get_prompt(lr.meta, instruction);
    Tensor ctx         = ctx_from_embedding(default_text_encoder().encode_text(prompt));

    SpacedSteps steps = spaced_subsequence(sr.sched, sr.sample_steps);
    auto model = [&](const Tensor& z, int t, const Tensor& f, const Tensor& fp) {
        return sr.model.forward(z, std::vector<int>(static_cast<size_t>(z.n()), t), fp, f);
    };
    const int side = sr.hr_size / 4;
    Tensor z = ddpm_sample(model, sr.sched, steps, f_lr, ctx, 1, sr.dcfg.latent_channels, side,
                           side, seed);
    NormalizedImage out;
    out.px   = tensor_to_image(sr.vae.decode_scaled(z));
    out.meta = lr.meta;
    return out;
}

// -------------------------------- evaluation --------------------------------

// The frozen test-time LR input for one dataset item. Seeded purely by the
// item's own seed, so every evaluation of any checkpoint sees the same bytes.
inline NormalizedImage make_test_lr(const NormalizedImage& hr, uint64_t item_seed, int scale) {
    RecipeRanges ranges;
    DoseParams dose;
    DegradationRecipe rec = sample_recipe(rng::derive_seed(item_seed, "test-lr"), ranges, scale);
    return make_low_res(hr, rec, dose);
}

struct ItemMetrics {
    int index = 0;
    double psnr_sr = 0.0, ssim_sr = 0.0;
    double psnr_bicubic = 0.0, ssim_bicubic = 0.0;
    std::string caption;
};

inline void to_json(json& j, const ItemMetrics& m) {
    j = json{{"index", m.index},
             {"psnr_sr", m.psnr_sr},
             {"ssim_sr", m.ssim_sr},
             {"psnr_bicubic", m.psnr_bicubic},
             {"ssim_bicubic", m.ssim_bicubic},
             {"caption", m.caption}};
}

struct MetricReport {
    int scale     = 2;
    uint64_t seed = 0;
    std::string config_hash;
    std::string base_hash;  // freeze ledger: group hash of the frozen base
    std::string text_encoder_hash;
    std::vector<ItemMetrics> items;
    double mean_psnr_sr = 0.0, mean_ssim_sr = 0.0;
    double mean_psnr_bicubic = 0.0, mean_ssim_bicubic = 0.0;

    json to_json() const {
        json it = json::array();
        for (const auto& m : items) {
            json mj;
            ssrb::to_json(mj, m);
            it.push_back(mj);
        }
        return json{{"scale", scale},
                    {"seed", seed},
                    {"config_hash", config_hash},
                    {"base_hash", base_hash},
                    {"text_encoder_hash", text_encoder_hash},
                    {"items", it},
                    {"mean_psnr_sr", mean_psnr_sr},
                    {"mean_ssim_sr", mean_ssim_sr},
                    {"mean_psnr_bicubic", mean_psnr_bicubic},
                    {"mean_ssim_bicubic", mean_ssim_bicubic}};
    }

    std::string hash() const { return sha256_hex(to_json().dump()); }

    std::string table() const {
        std::string out;
        char line[160];
        std::snprintf(line, sizeof(line), "%-6s %10s %8s %12s %10s\n", "item", "psnr", "ssim",
                      "psnr_bicub", "ssim_bicub");
        out += line;
        for (const auto& m : items) {
            std::snprintf(line, sizeof(line), "%-6d %10.4f %8.4f %12.4f %10.4f\n", m.index,
                          m.psnr_sr, m.ssim_sr, m.psnr_bicubic, m.ssim_bicubic);
            out += line;
        }
        std::snprintf(line, sizeof(line), "%-6s %10.4f %8.4f %12.4f %10.4f\n", "mean",
                      mean_psnr_sr, mean_ssim_sr, mean_psnr_bicubic, mean_ssim_bicubic);
        out += line;
        return out;
    }
};

struct EvalOutputs {
    std::vector<Image> sr, lr, bicubic;
};

namespace detail {

inline ItemMetrics eval_one(SrModel& sr, const DatasetManifest& test, int scale, uint64_t seed,
                            int i, EvalOutputs* dump) {
    NormalizedImage hr = load_dataset_item(test, static_cast<size_t>(i));
    NormalizedImage lr = make_test_lr(hr, test.items[static_cast<size_t>(i)].seed, scale);
    Instruction ins    = make_instruction(sr.text);
    NormalizedImage up = super_resolve(sr, lr, scale, ins, rng::derive_seed(seed, "sample",
                                                                            static_cast<uint64_t>(i)));
    NormalizedImage bic = resize(lr, static_cast<double>(scale), ResizeKernel::bicubic);

    ItemMetrics m;
    m.index        = i;
    m.psnr_sr      = psnr(hr.px, up.px);
    m.ssim_sr      = ssim(hr.px, up.px);
    m.psnr_bicubic = psnr(hr.px, bic.px);
    m.ssim_bicubic = ssim(hr.px, bic.px);
    m.caption      = get_prompt(lr.meta, ins).text;
    if (dump) {
        dump->sr[static_cast<size_t>(i)]      = up.px;
        dump->lr[static_cast<size_t>(i)]      = lr.px;
        dump->bicubic[static_cast<size_t>(i)] = bic.px;
    }
    return m;
}

}  // namespace detail

// Runs super_resolve over the whole test split with fixed per-item seeds and
// the bicubic baseline alongside. Items are independent; jobs > 1 distributes
// them over threads with private model copies, merged by index, so the report
// does not depend on the job count.
inline MetricReport evaluate(SrModel& sr, const DatasetManifest& test, int scale, uint64_t seed,
                             const std::string& config_hash, int jobs = 1,
                             EvalOutputs* dump = nullptr,
                             const std::function<void(int)>& progress = {}) {
    const int n = static_cast<int>(test.items.size());
    if (n < 1) throw PreconditionError("evaluate: empty test manifest");
    if (dump) {
        dump->sr.assign(static_cast<size_t>(n), Image());
        dump->lr.assign(static_cast<size_t>(n), Image());
        dump->bicubic.assign(static_cast<size_t>(n), Image());
    }

    MetricReport rep;
    rep.scale       = scale;
    rep.seed        = seed;
    rep.config_hash = config_hash;
    {
        std::vector<nn::ParamRef> bp;
        sr.model.collect_base(bp);
        rep.base_hash = group_hash(bp);
    }
    rep.text_encoder_hash = default_text_encoder().param_hash();
    rep.items.resize(static_cast<size_t>(n));

    if (jobs <= 1) {
        for (int i = 0; i < n; i++) {
            rep.items[static_cast<size_t>(i)] = detail::eval_one(sr, test, scale, seed, i, dump);
            if (progress) progress(i);
        }
    } else {
        const int J = std::min(jobs, n);
        std::vector<std::thread> threads;
        std::vector<std::exception_ptr> errors(static_cast<size_t>(J));
        for (int j = 0; j < J; j++) {
            threads.emplace_back([&, j]() {
                try {
                    SrModel local = sr;  // private caches
                    for (int i = j; i < n; i += J)
                        rep.items[static_cast<size_t>(i)] =
                            detail::eval_one(local, test, scale, seed, i, dump);
                } catch (...) {
                    errors[static_cast<size_t>(j)] = std::current_exception();
                }
            });
        }
        for (auto& t : threads) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    for (const auto& m : rep.items) {
        rep.mean_psnr_sr += m.psnr_sr;
        rep.mean_ssim_sr += m.ssim_sr;
        rep.mean_psnr_bicubic += m.psnr_bicubic;
        rep.mean_ssim_bicubic += m.ssim_bicubic;
    }
    rep.mean_psnr_sr /= n;
    rep.mean_ssim_sr /= n;
    rep.mean_psnr_bicubic /= n;
    rep.mean_ssim_bicubic /= n;
    return rep;
}

// -------------------------------- ablation ----------------------------------

// One-fielded variations around the base arm, per scale. Table rows contrast
// prompts (none/describe/list), the f_lr encoder (frozen/learnable) and the
// condition-branch init (pretrained/random).
struct AblationArm {
    std::string name;
    TrainConfig cfg;
};

inline std::vector<AblationArm> ablation_arms(const TrainConfig& base, int scale) {
    std::vector<AblationArm> arms;
    TrainConfig b = base;
    b.scale       = scale;
    arms.push_back({"text-describe", b});
    {
        TrainConfig c = b;
        c.text        = InstructionVariant::none;
        arms.push_back({"text-none", c});
    }
    {
        TrainConfig c = b;
        c.text        = InstructionVariant::list;
        arms.push_back({"text-list", c});
    }
    {
        TrainConfig c    = b;
        c.visual_encoder = VisualEncoderMode::learnable;
        arms.push_back({"enc-learnable", c});
    }
    {
        TrainConfig c = b;
        c.cond_init   = CondInit::random;
        arms.push_back({"init-random", c});
    }
    return arms;
}

struct ArmResult {
    std::string name;
    int scale = 2;
    TrainConfig cfg;
    bool ok = false;
    std::string error;
    double mean_psnr_sr = 0.0, mean_ssim_sr = 0.0;
    double mean_psnr_bicubic = 0.0, mean_ssim_bicubic = 0.0;
    std::string config_hash, base_hash, report_hash;
};

struct AblationResult {
    std::vector<ArmResult> rows;
    // soft paper-direction check, reported not gated: describe minus none
    std::vector<std::pair<int, double>> text_delta_db;  // (scale, delta)

    json to_json() const {
        json rows_j = json::array();
        for (const auto& r : rows) {
            json cj;
            ssrb::to_json(cj, r.cfg);
            rows_j.push_back(json{{"name", r.name},
                                  {"scale", r.scale},
                                  {"config", cj},
                                  {"ok", r.ok},
                                  {"error", r.error},
                                  {"mean_psnr_sr", r.mean_psnr_sr},
                                  {"mean_ssim_sr", r.mean_ssim_sr},
                                  {"mean_psnr_bicubic", r.mean_psnr_bicubic},
                                  {"mean_ssim_bicubic", r.mean_ssim_bicubic},
                                  {"config_hash", r.config_hash},
                                  {"base_hash", r.base_hash},
                                  {"report_hash", r.report_hash}});
        }
        json deltas = json::array();
        for (auto [s, d] : text_delta_db) deltas.push_back(json{{"scale", s}, {"delta_db", d}});
        return json{{"rows", rows_j}, {"text_delta_db", deltas}};
    }

    std::string table() const {
        std::string out;
        char line[200];
        std::snprintf(line, sizeof(line), "%-14s %6s %6s %10s %8s %12s %10s\n", "arm", "scale",
                      "ok", "psnr", "ssim", "psnr_bicub", "ssim_bicub");
        out += line;
        for (const auto& r : rows) {
            if (r.ok) {
                std::snprintf(line, sizeof(line), "%-14s %6d %6s %10.4f %8.4f %12.4f %10.4f\n",
                              r.name.c_str(), r.scale, "yes", r.mean_psnr_sr, r.mean_ssim_sr,
                              r.mean_psnr_bicubic, r.mean_ssim_bicubic);
            } else {
                std::snprintf(line, sizeof(line), "%-14s %6d %6s  failed: %s\n", r.name.c_str(),
                              r.scale, "no", r.error.c_str());
            }
            out += line;
        }
        for (auto [s, d] : text_delta_db) {
            std::snprintf(line, sizeof(line),
                          "text prompt delta at x%d (describe - none): %+.4f dB\n", s, d);
            out += line;
        }
        return out;
    }
};

struct AblationConfig {
    std::vector<int> scales = {2, 4};
    TrainConfig arm;  // per-arm budget; flags are overridden per arm
    uint64_t eval_seed = 7;
    int jobs = 1;
    std::filesystem::path train_manifest;
    std::filesystem::path test_manifest;
    std::filesystem::path vae_ckpt;
    std::filesystem::path base_ckpt;
    std::filesystem::path out_dir;  // per-arm checkpoints, curves and reports
    int sample_steps = kSampleSteps;
};

// Runs every arm end to end (finetune + evaluate); a failing arm is recorded
// and the rest continue. All arms share the pretrained base (and thus its
// hash) except init-random, which records its own.
inline AblationResult run_ablation(const AblationConfig& acfg,
                                   const std::function<void(const std::string&)>& progress = {}) {
    DatasetManifest train = load_manifest(acfg.train_manifest);
    DatasetManifest test  = load_manifest(acfg.test_manifest);
    Vae vae;
    load_vae(vae, acfg.vae_ckpt);
    make_dirs(acfg.out_dir);

    AblationResult result;
    for (int scale : acfg.scales) {
        for (const auto& arm : ablation_arms(acfg.arm, scale)) {
            ArmResult row;
            row.name  = arm.name;
            row.scale = scale;
            row.cfg   = arm.cfg;
            json cj;
            to_json(cj, arm.cfg);
            row.config_hash = sha256_hex(cj.dump());
            if (progress) progress(arm.name + " x" + std::to_string(scale));
            try {
                DenoiserConfig dcfg;
                ControlledModel m = build_finetune_model(dcfg, arm.cfg, acfg.base_ckpt);
                Vae flr_enc;
                Vae* fe = nullptr;
                if (arm.cfg.visual_encoder == VisualEncoderMode::learnable) {
                    flr_enc.copy_weights_from(vae);
                    fe = &flr_enc;
                }
                TrainCurve curve = finetune_control(m, vae, fe, default_text_encoder(), train,
                                                    arm.cfg);

                SrModel sr;
                sr.dcfg           = dcfg;
                sr.fusion         = arm.cfg.fusion;
                sr.text           = arm.cfg.text;
                sr.visual_encoder = arm.cfg.visual_encoder;
                sr.cond_init      = arm.cfg.cond_init;
                sr.scale          = scale;
                sr.hr_size        = train.size;
                sr.sample_steps   = acfg.sample_steps;
                sr.model          = std::move(m);
                sr.vae            = vae;
                sr.flr_enc        = fe ? flr_enc : vae;
                sr.sched          = default_schedule();

                std::string tag = arm.name + "_x" + std::to_string(scale);
                curve.save(acfg.out_dir / (tag + ".losses.json"));
                save_control(sr, acfg.out_dir / (tag + ".ckpt.json"), json{{"arm", arm.name}});

                MetricReport rep = evaluate(sr, test, scale, acfg.eval_seed, row.config_hash,
                                            acfg.jobs);
                atomic_write_file(acfg.out_dir / (tag + ".report.json"),
                                  rep.to_json().dump(2) + "\n");
                atomic_write_file(acfg.out_dir / (tag + ".report.txt"), rep.table());

                row.ok                = true;
                row.mean_psnr_sr      = rep.mean_psnr_sr;
                row.mean_ssim_sr      = rep.mean_ssim_sr;
                row.mean_psnr_bicubic = rep.mean_psnr_bicubic;
                row.mean_ssim_bicubic = rep.mean_ssim_bicubic;
                row.base_hash         = rep.base_hash;
                row.report_hash       = rep.hash();
            } catch (const std::exception& e) {
                row.ok    = false;
                row.error = e.what();
            }
            result.rows.push_back(row);
        }
        const ArmResult *describe = nullptr, *none = nullptr;
        for (const auto& r : result.rows) {
            if (r.scale != scale || !r.ok) continue;
            if (r.name == "text-describe") describe = &r;
            if (r.name == "text-none") none = &r;
        }
        if (describe && none)
            result.text_delta_db.push_back(
                {scale, describe->mean_psnr_sr - none->mean_psnr_sr});
    }

    atomic_write_file(acfg.out_dir / "ablation.json", result.to_json().dump(2) + "\n");
    atomic_write_file(acfg.out_dir / "ablation.txt", result.table());
    return result;
}

}  // namespace ssrb

#endif
