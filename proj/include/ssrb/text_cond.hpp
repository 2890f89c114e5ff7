#ifndef SSRB_TEXT_COND_HPP
#define SSRB_TEXT_COND_HPP

#include <cctype>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ssrb/core/errors.hpp"
#include "ssrb/core/hash.hpp"
#include "ssrb/core/rng.hpp"
#include "ssrb/core/tensor.hpp"
#include "ssrb/phantom.hpp"

namespace ssrb {

// ------------------------------- instructions -------------------------------

enum class InstructionVariant { none, describe, list };

struct Instruction {
    std::string text;
    InstructionVariant variant = InstructionVariant::list;
};

inline Instruction make_instruction(InstructionVariant v) {
    switch (v) {
        case InstructionVariant::none: return {"", v};
        case InstructionVariant::describe:
            return {"Describe the anatomical structures in this CT image of the abdomen", v};
        case InstructionVariant::list:
            return {"List the major anatomic structures in this CT image of the abdomen", v};
    }
    throw ConfigError("unknown instruction variant");
}

inline InstructionVariant instruction_from_string(const std::string& s) {
    if (s == "none") return InstructionVariant::none;
    if (s == "describe") return InstructionVariant::describe;
    if (s == "list") return InstructionVariant::list;
    throw ConfigError("unknown instruction: " + s + " (expected none|describe|list)");
}

inline const char* to_string(InstructionVariant v) {
    switch (v) {
        case InstructionVariant::none: return "none";
        case InstructionVariant::describe: return "describe";
        case InstructionVariant::list: return "list";
    }
    return "?";
}

struct PromptText {
    std::string text;
    bool missing_meta = false;  // warning flag: no anatomy was available
};

// ----------------------------- prompt provider ------------------------------

// Stand-in for an external vision-language captioner. The default provider is
// a deterministic template over known anatomy; an adapter implementing this
// interface can wire a real model in later.
class PromptProvider {
  public:
    virtual ~PromptProvider() = default;
    virtual PromptText get_prompt(const std::optional<AnatomyMeta>& meta,
                                  const Instruction& instruction) const = 0;
};

namespace detail {

// organ names present in meta, deduplicated, canonical vocabulary order
inline std::vector<std::string> canonical_organs(const AnatomyMeta& meta) {
    std::vector<std::string> out;
    for (const auto& name : organ_vocabulary()) {
        for (const auto& o : meta.organs) {
            if (o.name == name) {
                out.push_back(name);
                break;
            }
        }
    }
    return out;
}

inline std::string join_prose(const std::vector<std::string>& xs) {
    std::string out;
    for (size_t i = 0; i < xs.size(); i++) {
        if (i > 0) out += (i + 1 == xs.size()) ? " and " : ", ";
        out += xs[i];
    }
    return out;
}

inline std::string join_commas(const std::vector<std::string>& xs) {
    std::string out;
    for (size_t i = 0; i < xs.size(); i++) {
        if (i > 0) out += ", ";
        out += xs[i];
    }
    return out;
}

}  // namespace detail

class TemplateCaptioner : public PromptProvider {
  public:
    PromptText get_prompt(const std::optional<AnatomyMeta>& meta,
                          const Instruction& instruction) const override {
        if (instruction.variant == InstructionVariant::none) return {"", false};
        if (!meta) return {"", true};
        auto organs = detail::canonical_organs(*meta);
        switch (instruction.variant) {
            case InstructionVariant::describe:
                return {"CT image of the abdomen showing " + detail::join_prose(organs) + ".",
                        false};
            case InstructionVariant::list:
                return {"abdomen CT: " + detail::join_commas(organs) + ".", false};
            default: throw ConfigError("unknown instruction variant");
        }
    }
};

inline PromptText get_prompt(const std::optional<AnatomyMeta>& meta,
                             const Instruction& instruction) {
    static const TemplateCaptioner captioner;
    return captioner.get_prompt(meta, instruction);
}

// ------------------------------ text encoder --------------------------------

struct PromptEmbedding {
    MatRM tokens;                // L_max x d
    std::vector<bool> pad_mask;  // true at padded positions
};

class TextEncoder {
  public:
    virtual ~TextEncoder() = default;
    virtual PromptEmbedding encode_text(const PromptText& p) const = 0;
    virtual int length() const = 0;
    virtual int dim() const = 0;
    virtual std::string param_hash() const = 0;  // freeze-invariance witness
};

// Frozen hash-embedding encoder: lowercase tokenization, fixed 4096-row table
// (row 0 reserved as pad), sinusoidal position codes, one tanh mixing layer.
// Weights are generated once from a fixed seed and never trained.
class HashTextEncoder : public TextEncoder {
  public:
    static constexpr int kTableRows = 4096;
    static constexpr uint64_t kFrozenSeed = 0x74657874656e63ULL;  // arbitrary fixed constant

    explicit HashTextEncoder(int l_max = 32, int d = 64) : l_max_(l_max), d_(d) {
        rng::Stream s = rng::derive_stream(kFrozenSeed, "table");
        table_.resize(kTableRows, d_);
        for (int r = 0; r < kTableRows; r++)
            for (int c = 0; c < d_; c++) table_(r, c) = s.normalf() * 0.125f;
        rng::Stream sw = rng::derive_stream(kFrozenSeed, "mixing");
        mix_w_.resize(d_, d_);
        for (int r = 0; r < d_; r++)
            for (int c = 0; c < d_; c++)
                mix_w_(r, c) = sw.normalf() / std::sqrt(static_cast<float>(d_));
        mix_b_ = Eigen::VectorXf::Zero(d_);
        pos_.resize(l_max_, d_);
        for (int j = 0; j < l_max_; j++)
            for (int c = 0; c < d_; c++) {
                double rate = std::pow(10000.0, -2.0 * (c / 2) / static_cast<double>(d_));
                pos_(j, c)  = static_cast<float>((c % 2 == 0) ? std::sin(j * rate)
                                                              : std::cos(j * rate));
            }
        // pad rows never receive a position code, so every pad slot carries
        // this exact vector
        Eigen::VectorXf p = (mix_w_ * table_.row(0).transpose() + mix_b_).array().tanh();
        pad_vec_          = p;
    }

    static std::vector<std::string> tokenize(const std::string& text) {
        std::vector<std::string> toks;
        std::string cur;
        for (char ch : text) {
            unsigned char u = static_cast<unsigned char>(ch);
            if (std::isalnum(u)) {
                cur += static_cast<char>(std::tolower(u));
            } else if (!cur.empty()) {
                toks.push_back(cur);
                cur.clear();
            }
        }
        if (!cur.empty()) toks.push_back(cur);
        return toks;
    }

    PromptEmbedding encode_text(const PromptText& p) const override {
        auto toks = tokenize(p.text);
        if (static_cast<int>(toks.size()) > l_max_) toks.resize(l_max_);
        PromptEmbedding out;
        out.tokens.resize(l_max_, d_);
        out.pad_mask.assign(l_max_, true);
        for (int j = 0; j < l_max_; j++) {
            if (j < static_cast<int>(toks.size())) {
                int row = static_cast<int>(rng::fnv1a64(toks[j]) % (kTableRows - 1)) + 1;
                Eigen::VectorXf x = table_.row(row).transpose() + pos_.row(j).transpose();
                out.tokens.row(j) = ((mix_w_ * x + mix_b_).array().tanh()).transpose();
                out.pad_mask[j]   = false;
            } else {
                out.tokens.row(j) = pad_vec_.transpose();
            }
        }
        return out;
    }

    int length() const override { return l_max_; }
    int dim() const override { return d_; }

    std::string param_hash() const override {
        Sha256 h;
        h.update(table_.data(), sizeof(float) * static_cast<size_t>(table_.size()));
        h.update(mix_w_.data(), sizeof(float) * static_cast<size_t>(mix_w_.size()));
        h.update(mix_b_.data(), sizeof(float) * static_cast<size_t>(mix_b_.size()));
        h.update(pos_.data(), sizeof(float) * static_cast<size_t>(pos_.size()));
        return h.hex();
    }

  private:
    int l_max_, d_;
    MatRM table_;   // kTableRows x d
    MatRM mix_w_;   // d x d
    Eigen::VectorXf mix_b_;
    MatRM pos_;     // l_max x d
    Eigen::VectorXf pad_vec_;
};

inline const HashTextEncoder& default_text_encoder() {
    static const HashTextEncoder enc;
    return enc;
}

inline PromptEmbedding encode_text(const PromptText& p) {
    return default_text_encoder().encode_text(p);
}

}  // namespace ssrb

#endif
