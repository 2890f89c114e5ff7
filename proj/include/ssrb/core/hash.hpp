#ifndef SSRB_CORE_HASH_HPP
#define SSRB_CORE_HASH_HPP

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "ssrb/core/errors.hpp"
#include "ssrb/core/tensor.hpp"

namespace ssrb {

// Incremental SHA-256, used for parameter-group hashes and report hashes.
class Sha256 {
   public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1)
            throw Error("sha256 init failed");
    }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, size_t len) {
        if (EVP_DigestUpdate(ctx_, data, len) != 1) throw Error("sha256 update failed");
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    template <class Alloc>
    void update(const std::vector<float, Alloc>& v) {
        update(v.data(), v.size() * sizeof(float));
    }
    void update(const Tensor& t) { update(t.data); }

    std::string hex() {
        unsigned char digest[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        if (EVP_DigestFinal_ex(ctx_, digest, &len) != 1) throw Error("sha256 final failed");
        static const char* k = "0123456789abcdef";
        std::string out;
        out.reserve(2 * len);
        for (unsigned int i = 0; i < len; i++) {
            out.push_back(k[digest[i] >> 4]);
            out.push_back(k[digest[i] & 0xf]);
        }
        return out;
    }

   private:
    EVP_MD_CTX* ctx_;
};

inline std::string sha256_hex(const void* data, size_t len) {
    Sha256 h;
    h.update(data, len);
    return h.hex();
}

inline std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

}  // namespace ssrb

#endif
