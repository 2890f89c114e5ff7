#ifndef SSRB_CHECKPOINT_HPP
#define SSRB_CHECKPOINT_HPP

#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ssrb/core/errors.hpp"
#include "ssrb/core/hash.hpp"
#include "ssrb/core/image.hpp"
#include "ssrb/nn/adam.hpp"
#include "ssrb/nn/layers.hpp"

namespace ssrb {

using json = nlohmann::json;

// Checkpoints are a JSON manifest (names, shapes, offsets, group hashes, free
// meta) next to a flat little-endian float32 blob. Groups let the harness
// freeze/hash parameter families (base vs cond vs fusion) independently.

using ParamGroups = std::vector<std::pair<std::string, std::vector<nn::ParamRef>>>;

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline std::filesystem::path ckpt_bin_path(const std::filesystem::path& json_path) {
    auto p = json_path;
    p.replace_extension(".bin");
    return p;
}

}  // namespace detail

inline std::string group_hash(const std::vector<nn::ParamRef>& params) {
    Sha256 h;
    for (const auto& p : params)
        h.update(p.w->data.data(), p.w->data.size() * sizeof(float));
    return h.hex();
}

inline void save_checkpoint(const std::filesystem::path& json_path, const ParamGroups& groups,
                            const json& meta, const nn::Adam* opt = nullptr) {
    std::string blob;
    json manifest;
    manifest["magic"]   = "ssrb-ckpt";
    manifest["version"] = kCheckpointVersion;
    manifest["meta"]    = meta;
    manifest["groups"]  = json::array();

    size_t offset = 0;
    for (const auto& [gname, params] : groups) {
        json g;
        g["name"]   = gname;
        g["sha256"] = group_hash(params);
        g["params"] = json::array();
        for (const auto& p : params) {
            json pj;
            pj["name"]   = p.name;
            pj["dims"]   = p.w->dims;
            pj["offset"] = offset;
            pj["numel"]  = p.w->numel();
            g["params"].push_back(pj);
            blob.append(reinterpret_cast<const char*>(p.w->data.data()),
                        p.w->data.size() * sizeof(float));
            offset += p.w->numel();
        }
        manifest["groups"].push_back(g);
    }
    if (opt) {
        json oj;
        oj["t"]      = opt->t;
        oj["offset"] = offset;
        size_t count = 0;
        for (const auto& m : opt->m) {
            blob.append(reinterpret_cast<const char*>(m.data()), m.size() * sizeof(float));
            count += m.size();
        }
        for (const auto& v : opt->v) {
            blob.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
            count += v.size();
        }
        oj["count"] = count;
        offset += count;
        manifest["optimizer"] = oj;
    }
    manifest["total_floats"] = offset;

    atomic_write_file(detail::ckpt_bin_path(json_path), blob);
    atomic_write_file(json_path, manifest.dump(2) + "\n");
}

namespace detail {

inline json load_ckpt_manifest(const std::filesystem::path& json_path) {
    json manifest;
    try {
        manifest = json::parse(read_text_file(json_path));
    } catch (const json::parse_error& e) {
        throw FormatError("checkpoint manifest parse error in " + json_path.string() + ": " +
                          e.what());
    }
    if (manifest.value("magic", "") != "ssrb-ckpt")
        throw FormatError("not a checkpoint manifest: " + json_path.string());
    if (manifest.value("version", -1) != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version in " + json_path.string());
    return manifest;
}

inline std::vector<float> load_ckpt_blob(const std::filesystem::path& json_path,
                                         size_t expect_floats) {
    auto bin = ckpt_bin_path(json_path);
    std::ifstream f(bin, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint blob " + bin.string());
    f.seekg(0, std::ios::end);
    size_t bytes = static_cast<size_t>(f.tellg());
    f.seekg(0);
    if (bytes != expect_floats * sizeof(float))
        throw FormatError("checkpoint blob size mismatch in " + bin.string());
    std::vector<float> data(expect_floats);
    f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
    if (!f) throw IoError("checkpoint blob read failed: " + bin.string());
    return data;
}

}  // namespace detail

// Loads parameters into an already-built model whose registry must match the
// manifest exactly (names, shapes, order). Returns the stored meta.
inline json load_checkpoint(const std::filesystem::path& json_path, const ParamGroups& groups) {
    json manifest = detail::load_ckpt_manifest(json_path);
    auto blob     = detail::load_ckpt_blob(json_path, manifest.at("total_floats").get<size_t>());

    if (manifest.at("groups").size() != groups.size())
        throw FormatError("checkpoint group count mismatch in " + json_path.string());
    for (size_t gi = 0; gi < groups.size(); gi++) {
        const json& g = manifest.at("groups")[gi];
        const auto& [gname, params] = groups[gi];
        if (g.at("name").get<std::string>() != gname)
            throw FormatError("checkpoint group order mismatch: expected " + gname + ", got " +
                              g.at("name").get<std::string>());
        if (g.at("params").size() != params.size())
            throw FormatError("checkpoint param count mismatch in group " + gname);
        for (size_t pi = 0; pi < params.size(); pi++) {
            const json& pj = g.at("params")[pi];
            if (pj.at("name").get<std::string>() != params[pi].name)
                throw FormatError("checkpoint param name mismatch: expected " + params[pi].name);
            auto dims = pj.at("dims").get<std::array<int, 4>>();
            if (dims != params[pi].w->dims)
                throw FormatError("checkpoint shape mismatch for " + params[pi].name);
            size_t off = pj.at("offset").get<size_t>();
            size_t num = pj.at("numel").get<size_t>();
            if (num != params[pi].w->numel() || off + num > blob.size())
                throw FormatError("checkpoint offsets corrupt for " + params[pi].name);
            std::copy(blob.begin() + static_cast<ptrdiff_t>(off),
                      blob.begin() + static_cast<ptrdiff_t>(off + num),
                      params[pi].w->data.begin());
        }
        // verify integrity against the stored group hash
        if (group_hash(params) != g.at("sha256").get<std::string>())
            throw FormatError("checkpoint hash mismatch for group " + gname);
    }
    return manifest.value("meta", json::object());
}

// Restores Adam moments saved alongside the parameters (for exact resume).
inline bool load_optimizer(const std::filesystem::path& json_path, nn::Adam& opt,
                           const std::vector<nn::ParamRef>& params) {
    json manifest = detail::load_ckpt_manifest(json_path);
    if (!manifest.contains("optimizer")) return false;
    auto blob = detail::load_ckpt_blob(json_path, manifest.at("total_floats").get<size_t>());
    const json& oj = manifest.at("optimizer");
    opt.init(params);
    opt.t      = oj.at("t").get<int64_t>();
    size_t off = oj.at("offset").get<size_t>();
    size_t need = 0;
    for (const auto& p : params) need += 2 * p.w->numel();
    if (oj.at("count").get<size_t>() != need || off + need > blob.size())
        throw FormatError("optimizer state size mismatch in " + json_path.string());
    for (auto& m : opt.m) {
        std::copy(blob.begin() + static_cast<ptrdiff_t>(off),
                  blob.begin() + static_cast<ptrdiff_t>(off + m.size()), m.begin());
        off += m.size();
    }
    for (auto& v : opt.v) {
        std::copy(blob.begin() + static_cast<ptrdiff_t>(off),
                  blob.begin() + static_cast<ptrdiff_t>(off + v.size()), v.begin());
        off += v.size();
    }
    return true;
}

// Group hashes as stored in a manifest, without loading the blob.
inline std::vector<std::pair<std::string, std::string>> checkpoint_hashes(
    const std::filesystem::path& json_path) {
    json manifest = detail::load_ckpt_manifest(json_path);
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& g : manifest.at("groups"))
        out.push_back({g.at("name").get<std::string>(), g.at("sha256").get<std::string>()});
    return out;
}

inline json checkpoint_meta(const std::filesystem::path& json_path) {
    return detail::load_ckpt_manifest(json_path).value("meta", json::object());
}

}  // namespace ssrb

#endif
