#ifndef SSRB_CORE_IMAGE_HPP
#define SSRB_CORE_IMAGE_HPP

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ssrb/core/errors.hpp"

namespace ssrb {

// 2-D float grid, row-major. Carries no semantics by itself; SliceImage and
// NormalizedImage wrap it with their invariants.
struct Image {
    int h = 0;
    int w = 0;
    std::vector<float> v;

    Image() = default;
    Image(int h_, int w_, float fill = 0.0f)
        : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {}

    float& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    float at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
    size_t numel() const { return v.size(); }

    bool same_shape(const Image& o) const { return h == o.h && w == o.w; }

    float min() const { return v.empty() ? 0.0f : *std::min_element(v.begin(), v.end()); }
    float max() const { return v.empty() ? 0.0f : *std::max_element(v.begin(), v.end()); }

    void clamp(float lo, float hi) {
        for (auto& x : v) x = std::min(hi, std::max(lo, x));
    }
};

inline void make_dirs(const std::filesystem::path& p) {
    std::error_code ec;
    std::filesystem::create_directories(p, ec);
    if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return s;
}

// Write-to-temp then rename, so readers never observe a partial file.
inline void atomic_write_file(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) make_dirs(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write " + tmp.string());
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!f) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed for " + path.string() + ": " + ec.message());
}

// Repo image format: magic "SSRB", u32 height, u32 width, u32 version,
// then h*w little-endian float32, row-major. 16-byte header total.
inline constexpr uint32_t kSsrbImageVersion = 1;

inline void write_image_ssrb(const std::filesystem::path& path, const Image& img) {
    if (path.has_parent_path()) make_dirs(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    uint32_t hdr[3] = {static_cast<uint32_t>(img.h), static_cast<uint32_t>(img.w),
                       kSsrbImageVersion};
    f.write("SSRB", 4);
    f.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
    f.write(reinterpret_cast<const char*>(img.v.data()),
            static_cast<std::streamsize>(img.v.size() * sizeof(float)));
    if (!f) throw IoError("write failed: " + path.string());
}

inline Image read_image_ssrb(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    char magic[4];
    uint32_t hdr[3];
    f.read(magic, 4);
    f.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
    if (!f || std::memcmp(magic, "SSRB", 4) != 0)
        throw FormatError("not an SSRB image: " + path.string());
    if (hdr[2] != kSsrbImageVersion)
        throw FormatError("unsupported SSRB image version in " + path.string());
    Image img(static_cast<int>(hdr[0]), static_cast<int>(hdr[1]));
    f.read(reinterpret_cast<char*>(img.v.data()),
           static_cast<std::streamsize>(img.v.size() * sizeof(float)));
    if (!f) throw FormatError("truncated SSRB image: " + path.string());
    return img;
}

// 8-bit PGM dump for eyeballing; values clamped to [0,1].
inline void write_pgm(const std::filesystem::path& path, const Image& img) {
    if (path.has_parent_path()) make_dirs(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << "P5\n" << img.w << " " << img.h << "\n255\n";
    std::vector<unsigned char> row(img.w);
    for (int y = 0; y < img.h; y++) {
        for (int x = 0; x < img.w; x++) {
            float v = std::min(1.0f, std::max(0.0f, img.at(y, x)));
            row[x]  = static_cast<unsigned char>(std::lround(v * 255.0f));
        }
        f.write(reinterpret_cast<const char*>(row.data()), img.w);
    }
    if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace ssrb

#endif
