#ifndef SSRB_CLI_HPP
#define SSRB_CLI_HPP

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "ssrb/config.hpp"
#include "ssrb/harness.hpp"

namespace ssrb {

inline constexpr int kArtifactVersion = 1;

inline std::string utc_now_string() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Written atomically at the end of every run; the stored config re-resolves
// to the same hash, so a run is re-executable from this file alone.
struct RunManifest {
    std::string subcommand;
    RunConfig config;
    json paths        = json::object();
    json group_hashes = json::object();
    std::string started_utc;
    std::string finished_utc;
};

inline json run_manifest_json(const RunManifest& rm) {
    json cj;
    to_json(cj, rm.config);
    return json{{"artifact_version", kArtifactVersion},
                {"subcommand", rm.subcommand},
                {"config", cj},
                {"config_hash", sha256_hex(cj.dump())},
                {"seeds", {{"seed", rm.config.seed}, {"eval_seed", rm.config.eval_seed}}},
                {"paths", rm.paths},
                {"group_hashes", rm.group_hashes},
                {"started_utc", rm.started_utc},
                {"finished_utc", rm.finished_utc}};
}

inline void write_run_manifest(RunManifest& rm, const std::filesystem::path& out_dir) {
    rm.finished_utc = utc_now_string();
    std::filesystem::path p = out_dir / "run_manifest.json";
    atomic_write_file(p, run_manifest_json(rm).dump(2) + "\n");
    std::printf("run manifest: %s\n", p.string().c_str());
}

inline std::filesystem::path default_out_root() {
    const char* env = std::getenv("SSRB_OUT");
    return (env && *env) ? std::filesystem::path(env) : std::filesystem::path("out");
}

// pre-parse scan so config/manifest values land before flag overrides
inline std::string find_arg(int argc, char** argv, const std::string& name) {
    for (int i = 1; i < argc; i++) {
        std::string a = argv[i];
        if (a == name && i + 1 < argc) return argv[i + 1];
        if (a.rfind(name + "=", 0) == 0) return a.substr(name.size() + 1);
    }
    return "";
}

inline TrainConfig train_config_from(const RunConfig& c) {
    TrainConfig t;
    t.iterations     = c.iterations;
    t.batch          = c.batch;
    t.lr             = c.lr;
    t.seed           = c.seed;
    t.scale          = c.scale;
    t.text           = instruction_from_string(c.text);
    t.visual_encoder = visual_encoder_from_string(c.visual_encoder);
    t.cond_init      = cond_init_from_string(c.cond_init);
    t.fusion         = fusion_mode_from_string(c.fusion);
    t.log_every      = c.log_every;
    t.validate();
    return t;
}

inline json hashes_json(const std::vector<std::pair<std::string, std::string>>& hs) {
    json j = json::object();
    for (const auto& [name, hash] : hs) j[name] = hash;
    return j;
}

inline int cli_main(int argc, char** argv) {
    RunConfig cfg;
    json mpaths = json::object();

    // precedence: defaults <- run manifest (if rerunning) <- config file <- flags
    try {
        std::string from_manifest = find_arg(argc, argv, "--from-manifest");
        if (!from_manifest.empty()) {
            json m;
            try {
                m = json::parse(read_text_file(from_manifest));
            } catch (const json::parse_error& e) {
                throw ConfigError("run manifest " + from_manifest + ": " + e.what());
            }
            if (!m.contains("config"))
                throw ConfigError("run manifest " + from_manifest + " has no config block");
            apply_config_json(cfg, m.at("config"));
            mpaths = m.value("paths", json::object());
        }
        std::string config_path = find_arg(argc, argv, "--config");
        if (!config_path.empty()) load_config_file(cfg, config_path);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }

    CLI::App app{"desk-scale latent-diffusion blind super-resolution for CT slices"};
    app.require_subcommand(1);

    std::string out, data, vae_path, base_path, ckpt_path, in_path, meta_path;
    std::string dummy_config, dummy_from;
    int jobs = 1;

    auto add_common = [&](CLI::App* s) {
        s->add_option("--config", dummy_config, "JSON config file (defaults <- file <- flags)");
        s->add_option("--from-manifest", dummy_from,
                      "re-execute from a run_manifest.json (config + paths)");
        s->add_option("--out", out, "output directory (default $SSRB_OUT or ./out, per subcommand)");
    };
    auto fill = [&](std::string& var, const char* key) {
        if (var.empty() && mpaths.contains(key)) var = mpaths[key].get<std::string>();
    };
    auto need = [&](std::string& var, const char* key, const char* flag) {
        fill(var, key);
        if (var.empty()) throw ConfigError(std::string(flag) + " is required");
    };
    auto resolve_out = [&](const char* sub) {
        fill(out, "out");
        if (out.empty()) out = (default_out_root() / sub).string();
        make_dirs(out);
    };
    auto begin_run = [&](const char* sub) {
        RunManifest rm;
        rm.subcommand  = sub;
        rm.config      = cfg;
        rm.started_utc = utc_now_string();
        return rm;
    };
    auto train_progress = [](int it, double loss) {
        std::printf("iter %6d  loss %.6f\n", it, loss);
        std::fflush(stdout);
    };

    // ------------------------------ synth-data ------------------------------
    auto* sc_synth = app.add_subcommand("synth-data", "generate the synthetic CT slice dataset");
    sc_synth->add_option("--count", cfg.count, "train image count");
    sc_synth->add_option("--test-count", cfg.test_count, "test image count");
    sc_synth->add_option("--size", cfg.size, "image side (64|128|256)");
    sc_synth->add_option("--seed", cfg.seed, "dataset seed");
    add_common(sc_synth);
    sc_synth->callback([&] {
        resolve_out("synth-data");
        RunManifest rm = begin_run("synth-data");
        DatasetConfig dc;
        dc.train_count = cfg.count;
        dc.test_count  = cfg.test_count;
        dc.size        = cfg.size;
        dc.seed        = cfg.seed;
        dc.out_dir     = out;
        build_dataset(dc);
        std::printf("train manifest: %s\n", (dc.out_dir / "train.manifest.json").string().c_str());
        std::printf("test manifest:  %s\n", (dc.out_dir / "test.manifest.json").string().c_str());
        rm.paths = json{{"out", out}};
        write_run_manifest(rm, out);
    });

    // -------------------------------- degrade -------------------------------
    auto* sc_deg = app.add_subcommand("degrade", "apply a seeded degradation chain to one image");
    sc_deg->add_option("--in", in_path, "input .ssrb image (normalized [0,1])");
    sc_deg->add_option("--scale", cfg.scale, "downscale factor (2|4)");
    sc_deg->add_option("--seed", cfg.seed, "recipe seed");
    sc_deg->add_option("--blank-flux", cfg.blank_flux, "incident photon count for dose noise");
    add_common(sc_deg);
    sc_deg->callback([&] {
        need(in_path, "in", "--in");
        resolve_out("degrade");
        RunManifest rm = begin_run("degrade");
        NormalizedImage hr{read_image_ssrb(in_path), std::nullopt};
        DegradationRecipe rec = sample_recipe(cfg.seed, RecipeRanges{}, cfg.scale);
        DoseParams dose;
        dose.blank_flux    = cfg.blank_flux;
        NormalizedImage lr = make_low_res(hr, rec, dose);
        write_image_ssrb(std::filesystem::path(out) / "lr.ssrb", lr.px);
        write_pgm(std::filesystem::path(out) / "lr.pgm", lr.px);
        json rj;
        to_json(rj, rec);
        atomic_write_file(std::filesystem::path(out) / "recipe.json", rj.dump(2) + "\n");
        std::printf("lr image: %s (and .pgm)\n",
                    (std::filesystem::path(out) / "lr.ssrb").string().c_str());
        rm.paths = json{{"in", in_path}, {"out", out}};
        write_run_manifest(rm, out);
    });

    // ------------------------------- train-vae ------------------------------
    auto* sc_vae = app.add_subcommand("train-vae", "train the latent autoencoder");
    sc_vae->add_option("--data", data, "dataset root (from synth-data)");
    sc_vae->add_option("--iterations", cfg.vae_iterations, "training iterations");
    sc_vae->add_option("--batch", cfg.vae_batch, "batch size");
    sc_vae->add_option("--lr", cfg.vae_lr, "learning rate");
    sc_vae->add_option("--kappa", cfg.kappa, "KL weight");
    sc_vae->add_option("--seed", cfg.seed, "training seed");
    add_common(sc_vae);
    sc_vae->callback([&] {
        need(data, "data", "--data");
        resolve_out("train-vae");
        RunManifest rm        = begin_run("train-vae");
        DatasetManifest train = load_manifest(std::filesystem::path(data) / "train.manifest.json");
        Vae vae(rng::derive_seed(cfg.seed, "vae-init"));
        VaeTrainConfig vc;
        vc.iterations = cfg.vae_iterations;
        vc.batch      = cfg.vae_batch;
        vc.lr         = cfg.vae_lr;
        vc.kappa      = cfg.kappa;
        vc.seed       = cfg.seed;
        vc.log_every  = cfg.log_every;
        TrainCurve curve = train_vae(vae, train, vc, train_progress);
        std::filesystem::path ckpt = std::filesystem::path(out) / "vae.ckpt.json";
        save_vae(vae, ckpt, json{{"config_hash", config_hash(cfg)}});
        curve.save(std::filesystem::path(out) / "vae.losses.json");
        std::printf("vae checkpoint: %s\n", ckpt.string().c_str());
        rm.paths        = json{{"data", data}, {"out", out}};
        rm.group_hashes = hashes_json(checkpoint_hashes(ckpt));
        write_run_manifest(rm, out);
    });

    // ----------------------------- pretrain-base ----------------------------
    auto* sc_pre = app.add_subcommand("pretrain-base", "pretrain the base denoiser prior");
    sc_pre->add_option("--data", data, "dataset root");
    sc_pre->add_option("--vae", vae_path, "trained VAE checkpoint");
    sc_pre->add_option("--iterations", cfg.iterations, "training iterations");
    sc_pre->add_option("--batch", cfg.batch, "batch size");
    sc_pre->add_option("--lr", cfg.lr, "learning rate");
    sc_pre->add_option("--seed", cfg.seed, "training seed");
    sc_pre->add_option("--text", cfg.text, "prompt variant (none|describe|list)");
    add_common(sc_pre);
    sc_pre->callback([&] {
        need(data, "data", "--data");
        need(vae_path, "vae", "--vae");
        resolve_out("pretrain-base");
        RunManifest rm        = begin_run("pretrain-base");
        DatasetManifest train = load_manifest(std::filesystem::path(data) / "train.manifest.json");
        Vae vae;
        load_vae(vae, vae_path);
        TrainConfig tc = train_config_from(cfg);
        DenoiserConfig dcfg;
        BaseUnet net(dcfg, rng::derive_seed(cfg.seed, "base-init"));
        TrainCurve curve =
            pretrain_base(net, vae, default_text_encoder(), train, tc, train_progress);
        std::filesystem::path ckpt = std::filesystem::path(out) / "base.ckpt.json";
        save_base_unet(net, ckpt, json{{"config_hash", config_hash(cfg)}});
        curve.save(std::filesystem::path(out) / "base.losses.json");
        std::printf("base checkpoint: %s\n", ckpt.string().c_str());
        rm.paths        = json{{"data", data}, {"vae", vae_path}, {"out", out}};
        rm.group_hashes = hashes_json(checkpoint_hashes(ckpt));
        write_run_manifest(rm, out);
    });

    // ----------------------------- train-control ----------------------------
    auto* sc_ctl = app.add_subcommand("train-control",
                                      "finetune the condition network on degraded inputs");
    sc_ctl->add_option("--data", data, "dataset root");
    sc_ctl->add_option("--vae", vae_path, "trained VAE checkpoint");
    sc_ctl->add_option("--base", base_path, "pretrained base checkpoint");
    sc_ctl->add_option("--scale", cfg.scale, "SR factor (2|4)");
    sc_ctl->add_option("--iterations", cfg.iterations, "training iterations");
    sc_ctl->add_option("--batch", cfg.batch, "batch size");
    sc_ctl->add_option("--lr", cfg.lr, "learning rate");
    sc_ctl->add_option("--seed", cfg.seed, "training seed");
    sc_ctl->add_option("--text", cfg.text, "prompt variant (none|describe|list)");
    sc_ctl->add_option("--visual-encoder", cfg.visual_encoder, "f_lr encoder (frozen|learnable)");
    sc_ctl->add_option("--cond-init", cfg.cond_init, "condition branch init (pretrained|random)");
    sc_ctl->add_option("--fusion", cfg.fusion, "fusion mode (zero_init|bare)");
    add_common(sc_ctl);
    sc_ctl->callback([&] {
        need(data, "data", "--data");
        need(vae_path, "vae", "--vae");
        fill(base_path, "base");  // optional for cond_init=random
        resolve_out("train-control");
        RunManifest rm        = begin_run("train-control");
        DatasetManifest train = load_manifest(std::filesystem::path(data) / "train.manifest.json");
        Vae vae;
        load_vae(vae, vae_path);
        TrainConfig tc = train_config_from(cfg);
        DenoiserConfig dcfg;
        ControlledModel m = build_finetune_model(dcfg, tc, base_path);
        Vae flr;
        Vae* fe = nullptr;
        if (tc.visual_encoder == VisualEncoderMode::learnable) {
            flr.copy_weights_from(vae);
            fe = &flr;
        }
        TrainCurve curve =
            finetune_control(m, vae, fe, default_text_encoder(), train, tc, train_progress);
        SrModel sr;
        sr.dcfg           = dcfg;
        sr.fusion         = tc.fusion;
        sr.text           = tc.text;
        sr.visual_encoder = tc.visual_encoder;
        sr.cond_init      = tc.cond_init;
        sr.scale          = tc.scale;
        sr.hr_size        = train.size;
        sr.sample_steps   = cfg.sample_steps;
        sr.model          = std::move(m);
        sr.vae            = vae;
        sr.flr_enc        = fe ? flr : vae;
        sr.sched          = default_schedule();
        std::filesystem::path ckpt = std::filesystem::path(out) / "control.ckpt.json";
        save_control(sr, ckpt, json{{"config_hash", config_hash(cfg)}});
        curve.save(std::filesystem::path(out) / "control.losses.json");
        std::printf("control checkpoint: %s\n", ckpt.string().c_str());
        rm.paths = json{{"data", data}, {"vae", vae_path}, {"base", base_path}, {"out", out}};
        rm.group_hashes = hashes_json(checkpoint_hashes(ckpt));
        write_run_manifest(rm, out);
    });

    // -------------------------------- sample --------------------------------
    auto* sc_smp = app.add_subcommand("sample", "super-resolve one LR image");
    sc_smp->add_option("--ckpt", ckpt_path, "control checkpoint");
    sc_smp->add_option("--vae", vae_path, "VAE checkpoint the control run used");
    sc_smp->add_option("--in", in_path, "LR .ssrb image");
    sc_smp->add_option("--meta", meta_path, "optional anatomy meta JSON for captioning");
    sc_smp->add_option("--scale", cfg.scale, "SR factor (2|4)");
    sc_smp->add_option("--instruction", cfg.text, "prompt variant (none|describe|list)");
    sc_smp->add_option("--seed", cfg.eval_seed, "sampling noise seed");
    sc_smp->add_option("--steps", cfg.sample_steps, "spaced sampling steps");
    add_common(sc_smp);
    sc_smp->callback([&] {
        need(ckpt_path, "ckpt", "--ckpt");
        need(vae_path, "vae", "--vae");
        need(in_path, "in", "--in");
        resolve_out("sample");
        RunManifest rm = begin_run("sample");
        SrModel sr     = load_sr_model(ckpt_path, vae_path);
        sr.sample_steps = cfg.sample_steps;
        NormalizedImage lr{read_image_ssrb(in_path), std::nullopt};
        if (!meta_path.empty()) {
            json mj;
            try {
                mj = json::parse(read_text_file(meta_path));
            } catch (const json::parse_error& e) {
                throw ConfigError("meta file " + meta_path + ": " + e.what());
            }
            lr.meta = (mj.contains("anatomy") ? mj.at("anatomy") : mj).get<AnatomyMeta>();
        }
        Instruction ins    = make_instruction(instruction_from_string(cfg.text));
        NormalizedImage hr = super_resolve(sr, lr, cfg.scale, ins, cfg.eval_seed);
        write_image_ssrb(std::filesystem::path(out) / "sr.ssrb", hr.px);
        write_pgm(std::filesystem::path(out) / "sr.pgm", hr.px);
        std::printf("sr image: %s (and .pgm)\n",
                    (std::filesystem::path(out) / "sr.ssrb").string().c_str());
        rm.paths = json{{"ckpt", ckpt_path}, {"vae", vae_path}, {"in", in_path}, {"out", out}};
        if (!meta_path.empty()) rm.paths["meta"] = meta_path;
        rm.group_hashes = hashes_json(checkpoint_hashes(ckpt_path));
        write_run_manifest(rm, out);
    });

    // --------------------------------- eval ---------------------------------
    auto* sc_eval = app.add_subcommand("eval", "metric run over the frozen test split");
    sc_eval->add_option("--ckpt", ckpt_path, "control checkpoint");
    sc_eval->add_option("--vae", vae_path, "VAE checkpoint the control run used");
    sc_eval->add_option("--data", data, "dataset root");
    sc_eval->add_option("--scale", cfg.scale, "SR factor (2|4)");
    sc_eval->add_option("--seed", cfg.eval_seed, "evaluation seed (per-item sampler seeds)");
    sc_eval->add_option("--steps", cfg.sample_steps, "spaced sampling steps");
    sc_eval->add_option("--jobs", jobs, "parallel eval workers (default 1)");
    add_common(sc_eval);
    sc_eval->callback([&] {
        need(ckpt_path, "ckpt", "--ckpt");
        need(vae_path, "vae", "--vae");
        need(data, "data", "--data");
        resolve_out("eval");
        RunManifest rm       = begin_run("eval");
        SrModel sr           = load_sr_model(ckpt_path, vae_path);
        sr.sample_steps      = cfg.sample_steps;
        DatasetManifest test = load_manifest(std::filesystem::path(data) / "test.manifest.json");
        EvalOutputs dumps;
        MetricReport rep = evaluate(sr, test, cfg.scale, cfg.eval_seed, config_hash(cfg),
                                    jobs, &dumps, [](int i) {
                                        std::printf("item %d done\n", i);
                                        std::fflush(stdout);
                                    });
        std::filesystem::path od(out);
        atomic_write_file(od / "report.json", rep.to_json().dump(2) + "\n");
        atomic_write_file(od / "report.txt", rep.table());
        char name[64];
        for (size_t i = 0; i < dumps.sr.size(); i++) {
            std::snprintf(name, sizeof(name), "sr_%04zu", i);
            write_image_ssrb(od / "images" / (std::string(name) + ".ssrb"), dumps.sr[i]);
            write_pgm(od / "images" / (std::string(name) + ".pgm"), dumps.sr[i]);
            std::snprintf(name, sizeof(name), "lr_%04zu", i);
            write_image_ssrb(od / "images" / (std::string(name) + ".ssrb"), dumps.lr[i]);
            write_pgm(od / "images" / (std::string(name) + ".pgm"), dumps.lr[i]);
            std::snprintf(name, sizeof(name), "bicubic_%04zu", i);
            write_image_ssrb(od / "images" / (std::string(name) + ".ssrb"), dumps.bicubic[i]);
            write_pgm(od / "images" / (std::string(name) + ".pgm"), dumps.bicubic[i]);
        }
        std::printf("%s", rep.table().c_str());
        std::printf("report: %s\n", (od / "report.json").string().c_str());
        std::printf("report hash: %s\n", rep.hash().c_str());
        rm.paths = json{{"ckpt", ckpt_path}, {"vae", vae_path}, {"data", data}, {"out", out}};
        rm.group_hashes = hashes_json(checkpoint_hashes(ckpt_path));
        write_run_manifest(rm, out);
    });

    // -------------------------------- ablate --------------------------------
    auto* sc_abl = app.add_subcommand("ablate", "run the ablation grid (text/encoder/init arms)");
    sc_abl->add_option("--data", data, "dataset root");
    sc_abl->add_option("--vae", vae_path, "trained VAE checkpoint");
    sc_abl->add_option("--base", base_path, "pretrained base checkpoint");
    sc_abl->add_option("--scales", cfg.scales, "comma-separated SR factors (default 2,4)");
    sc_abl->add_option("--iterations", cfg.ablate_iterations, "finetune iterations per arm");
    sc_abl->add_option("--batch", cfg.batch, "batch size");
    sc_abl->add_option("--lr", cfg.lr, "learning rate");
    sc_abl->add_option("--seed", cfg.seed, "training seed");
    sc_abl->add_option("--eval-seed", cfg.eval_seed, "evaluation seed");
    sc_abl->add_option("--steps", cfg.sample_steps, "spaced sampling steps");
    sc_abl->add_option("--jobs", jobs, "parallel eval workers");
    add_common(sc_abl);
    sc_abl->callback([&] {
        need(data, "data", "--data");
        need(vae_path, "vae", "--vae");
        need(base_path, "base", "--base");
        resolve_out("ablate");
        RunManifest rm = begin_run("ablate");
        AblationConfig ac;
        ac.scales         = parse_scales(cfg.scales);
        ac.arm            = train_config_from(cfg);
        ac.arm.iterations = cfg.ablate_iterations;
        ac.eval_seed      = cfg.eval_seed;
        ac.jobs           = jobs;
        ac.train_manifest = std::filesystem::path(data) / "train.manifest.json";
        ac.test_manifest  = std::filesystem::path(data) / "test.manifest.json";
        ac.vae_ckpt       = vae_path;
        ac.base_ckpt      = base_path;
        ac.out_dir        = out;
        ac.sample_steps   = cfg.sample_steps;
        AblationResult res = run_ablation(ac, [](const std::string& arm) {
            std::printf("arm %s\n", arm.c_str());
            std::fflush(stdout);
        });
        std::printf("%s", res.table().c_str());
        std::printf("grid: %s\n", (std::filesystem::path(out) / "ablation.json").string().c_str());
        rm.paths = json{{"data", data}, {"vae", vae_path}, {"base", base_path}, {"out", out}};
        write_run_manifest(rm, out);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);  // prints help or the usage error
        return code == 0 ? 0 : 1;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 2;
    }
    return 0;
}

}  // namespace ssrb

#endif
