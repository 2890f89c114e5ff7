#ifndef SSRB_CONFIG_HPP
#define SSRB_CONFIG_HPP

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssrb/core/errors.hpp"
#include "ssrb/core/hash.hpp"
#include "ssrb/core/image.hpp"

namespace ssrb {

using json = nlohmann::json;

// Every knob any subcommand reads, in one flat bag. An empty config file
// resolves to exactly these defaults (blank flux 5e4, S = 50, lr 5e-5);
// precedence is defaults <- file <- command-line flags.
struct RunConfig {
    // data synthesis
    int count      = 32;   // train images
    int test_count = 8;
    int size       = 128;  // HR side
    uint64_t seed  = 1;

    // degradation
    float blank_flux = 5.0e4f;
    int scale        = 2;

    // autoencoder training
    int vae_iterations = 900;
    int vae_batch      = 4;
    float vae_lr       = 2e-3f;
    float kappa        = 1e-6f;

    // denoiser training (both phases)
    int iterations = 4000;
    int batch      = 4;
    float lr       = 5e-5f;
    int log_every  = 200;

    // ablation flags (finetune only)
    std::string text           = "describe";
    std::string visual_encoder = "frozen";
    std::string cond_init      = "pretrained";
    std::string fusion         = "zero_init";

    // sampling / evaluation (parallelism is a CLI orchestration flag, not
    // part of the experiment identity, so --jobs lives outside this struct)
    int sample_steps   = 50;
    uint64_t eval_seed = 7;

    // ablation grid budget (per arm; the full-length finetune is a separate
    // subcommand, so the grid defaults to a quick pass over every arm)
    int ablate_iterations = 40;
    std::string scales    = "2,4";
};

inline void to_json(json& j, const RunConfig& c) {
    j = json{{"count", c.count},
             {"test_count", c.test_count},
             {"size", c.size},
             {"seed", c.seed},
             {"blank_flux", c.blank_flux},
             {"scale", c.scale},
             {"vae_iterations", c.vae_iterations},
             {"vae_batch", c.vae_batch},
             {"vae_lr", c.vae_lr},
             {"kappa", c.kappa},
             {"iterations", c.iterations},
             {"batch", c.batch},
             {"lr", c.lr},
             {"log_every", c.log_every},
             {"text", c.text},
             {"visual_encoder", c.visual_encoder},
             {"cond_init", c.cond_init},
             {"fusion", c.fusion},
             {"sample_steps", c.sample_steps},
             {"eval_seed", c.eval_seed},
             {"ablate_iterations", c.ablate_iterations},
             {"scales", c.scales}};
}

// Applies the keys present in j over c; unknown keys warn (forward
// compatibility) instead of failing. Returns the unknown keys for callers
// that want them.
inline std::vector<std::string> apply_config_json(RunConfig& c, const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    std::vector<std::string> unknown;
    for (auto& [key, val] : j.items()) {
        try {
            if (key == "count") val.get_to(c.count);
            else if (key == "test_count") val.get_to(c.test_count);
            else if (key == "size") val.get_to(c.size);
            else if (key == "seed") val.get_to(c.seed);
            else if (key == "blank_flux") val.get_to(c.blank_flux);
            else if (key == "scale") val.get_to(c.scale);
            else if (key == "vae_iterations") val.get_to(c.vae_iterations);
            else if (key == "vae_batch") val.get_to(c.vae_batch);
            else if (key == "vae_lr") val.get_to(c.vae_lr);
            else if (key == "kappa") val.get_to(c.kappa);
            else if (key == "iterations") val.get_to(c.iterations);
            else if (key == "batch") val.get_to(c.batch);
            else if (key == "lr") val.get_to(c.lr);
            else if (key == "log_every") val.get_to(c.log_every);
            else if (key == "text") val.get_to(c.text);
            else if (key == "visual_encoder") val.get_to(c.visual_encoder);
            else if (key == "cond_init") val.get_to(c.cond_init);
            else if (key == "fusion") val.get_to(c.fusion);
            else if (key == "sample_steps") val.get_to(c.sample_steps);
            else if (key == "eval_seed") val.get_to(c.eval_seed);
            else if (key == "ablate_iterations") val.get_to(c.ablate_iterations);
            else if (key == "scales") val.get_to(c.scales);
            else {
                unknown.push_back(key);
                std::fprintf(stderr, "warning: unknown config key '%s' (ignored)\n", key.c_str());
            }
        } catch (const json::exception& e) {
            throw ConfigError("config key '" + key + "': " + e.what());
        }
    }
    return unknown;
}

// defaults <- file; malformed JSON surfaces nlohmann's line/column diagnostics
inline void load_config_file(RunConfig& c, const std::filesystem::path& path) {
    std::string text = read_text_file(path);
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) return;  // empty -> defaults
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file " + path.string() + ": " + e.what());
    }
    apply_config_json(c, j);
}

inline std::string config_hash(const RunConfig& c) {
    json j;
    to_json(j, c);
    return sha256_hex(j.dump());
}

inline std::vector<int> parse_scales(const std::string& s) {
    std::vector<int> out;
    size_t pos = 0;
    while (pos < s.size()) {
        size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        std::string tok = s.substr(pos, comma - pos);
        if (!tok.empty()) {
            int v = 0;
            try {
                v = std::stoi(tok);
            } catch (const std::exception&) {
                throw ConfigError("scales: '" + tok + "' is not an integer");
            }
            if (v != 2 && v != 4) throw ConfigError("scales: entries must be 2 or 4");
            out.push_back(v);
        }
        pos = comma + 1;
    }
    if (out.empty()) throw ConfigError("scales: empty list");
    return out;
}

}  // namespace ssrb

#endif
