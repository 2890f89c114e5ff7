#ifndef SSRB_NN_LAYERS_HPP
#define SSRB_NN_LAYERS_HPP

#include <cmath>
#include <string>
#include <vector>

#include "ssrb/core/errors.hpp"
#include "ssrb/core/rng.hpp"
#include "ssrb/core/tensor.hpp"

namespace ssrb::nn {

// ------------------------------ param registry ------------------------------

struct ParamRef {
    std::string name;
    Tensor* w = nullptr;
    Tensor* g = nullptr;
};

inline void collect_param(std::vector<ParamRef>& out, const std::string& name, Tensor& w,
                          Tensor& g) {
    out.push_back({name, &w, &g});
}

inline size_t param_count(const std::vector<ParamRef>& ps) {
    size_t n = 0;
    for (const auto& p : ps) n += p.w->numel();
    return n;
}

inline void zero_grads(const std::vector<ParamRef>& ps) {
    for (const auto& p : ps) p.g->zero();
}

// --------------------------------- conv2d -----------------------------------

// im2col + GEMM convolution; weight layout [out_c, in_c, k, k].
struct Conv2d {
    int in_c = 0, out_c = 0, k = 3, stride = 1, pad = 1;
    Tensor w, gw;  // [out_c, in_c, k, k]
    Tensor b, gb;  // [1, out_c, 1, 1]

    Tensor x_cache;
    FloatVec col;  // scratch, reused

    Conv2d() = default;
    Conv2d(int in_c_, int out_c_, int k_, int stride_, int pad_, rng::Stream& init,
           float gain = 1.0f)
        : in_c(in_c_), out_c(out_c_), k(k_), stride(stride_), pad(pad_) {
        w  = Tensor(out_c, in_c, k, k);
        gw = Tensor(out_c, in_c, k, k);
        b  = Tensor(1, out_c, 1, 1);
        gb = Tensor(1, out_c, 1, 1);
        float std = gain * std::sqrt(2.0f / static_cast<float>(in_c * k * k));
        if (gain > 0.0f)
            for (auto& v : w.data) v = init.normalf() * std;
    }

    int out_h(int h) const { return (h + 2 * pad - k) / stride + 1; }

    void collect(const std::string& prefix, std::vector<ParamRef>& out) {
        collect_param(out, prefix + ".w", w, gw);
        collect_param(out, prefix + ".b", b, gb);
    }

    void im2col(const float* x, int h, int wd, int oh, int ow, float* dst) const {
        for (int c = 0; c < in_c; c++) {
            for (int ky = 0; ky < k; ky++) {
                for (int kx = 0; kx < k; kx++) {
                    float* row = dst + (static_cast<size_t>(c) * k * k + ky * k + kx) *
                                           (static_cast<size_t>(oh) * ow);
                    for (int oy = 0; oy < oh; oy++) {
                        int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) {
                            std::fill(row + static_cast<size_t>(oy) * ow,
                                      row + static_cast<size_t>(oy + 1) * ow, 0.0f);
                            continue;
                        }
                        const float* src = x + static_cast<size_t>(c) * h * wd +
                                           static_cast<size_t>(iy) * wd;
                        for (int ox = 0; ox < ow; ox++) {
                            int ix = ox * stride + kx - pad;
                            row[static_cast<size_t>(oy) * ow + ox] =
                                (ix >= 0 && ix < wd) ? src[ix] : 0.0f;
                        }
                    }
                }
            }
        }
    }

    void col2im(const float* src, int h, int wd, int oh, int ow, float* dx) const {
        for (int c = 0; c < in_c; c++) {
            for (int ky = 0; ky < k; ky++) {
                for (int kx = 0; kx < k; kx++) {
                    const float* row = src + (static_cast<size_t>(c) * k * k + ky * k + kx) *
                                                 (static_cast<size_t>(oh) * ow);
                    for (int oy = 0; oy < oh; oy++) {
                        int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        float* dst = dx + static_cast<size_t>(c) * h * wd +
                                     static_cast<size_t>(iy) * wd;
                        for (int ox = 0; ox < ow; ox++) {
                            int ix = ox * stride + kx - pad;
                            if (ix >= 0 && ix < wd)
                                dst[ix] += row[static_cast<size_t>(oy) * ow + ox];
                        }
                    }
                }
            }
        }
    }

    Tensor forward(const Tensor& x) {
        if (x.c() != in_c) throw PreconditionError("Conv2d: channel mismatch");
        x_cache      = x;
        const int oh = out_h(x.h()), ow = out_h(x.w());
        const int ick2 = in_c * k * k, ohw = oh * ow;
        col.resize(static_cast<size_t>(ick2) * ohw);
        Tensor y(x.n(), out_c, oh, ow);
        CMatMap wm(w.data.data(), out_c, ick2);
        for (int n = 0; n < x.n(); n++) {
            im2col(x.chan(n, 0), x.h(), x.w(), oh, ow, col.data());
            CMatMap cm(col.data(), ick2, ohw);
            MatMap ym(y.chan(n, 0), out_c, ohw);
            ym.noalias() = wm * cm;
            for (int c = 0; c < out_c; c++) ym.row(c).array() += b.data[c];
        }
        return y;
    }

    Tensor backward(const Tensor& dy) {
        const Tensor& x = x_cache;
        const int oh = dy.h(), ow = dy.w();
        const int ick2 = in_c * k * k, ohw = oh * ow;
        col.resize(static_cast<size_t>(ick2) * ohw);
        FloatVec dcol(static_cast<size_t>(ick2) * ohw);
        Tensor dx = Tensor::zeros(x.n(), in_c, x.h(), x.w());
        CMatMap wm(w.data.data(), out_c, ick2);
        MatMap gwm(gw.data.data(), out_c, ick2);
        for (int n = 0; n < x.n(); n++) {
            im2col(x.chan(n, 0), x.h(), x.w(), oh, ow, col.data());
            CMatMap cm(col.data(), ick2, ohw);
            CMatMap dym(const_cast<float*>(dy.chan(n, 0)), out_c, ohw);
            gwm.noalias() += dym * cm.transpose();
            for (int c = 0; c < out_c; c++) gb.data[c] += dym.row(c).sum();
            MatMap dcm(dcol.data(), ick2, ohw);
            dcm.noalias() = wm.transpose() * dym;
            col2im(dcol.data(), x.h(), x.w(), oh, ow, dx.chan(n, 0));
        }
        return dx;
    }
};

// -------------------------------- group norm --------------------------------

// largest group count <= 8 that divides the channel count
inline int norm_groups(int c) {
    for (int g = 8; g > 1; g--)
        if (c % g == 0) return g;
    return 1;
}

struct GroupNorm {
    int c = 0, groups = 8;
    float eps = 1e-5f;
    Tensor gamma, ggamma;  // [1, c, 1, 1]
    Tensor beta, gbeta;

    Tensor xhat_cache;
    std::vector<float> inv_std_cache;  // n * groups

    GroupNorm() = default;
    explicit GroupNorm(int c_) : GroupNorm(c_, norm_groups(c_)) {}
    GroupNorm(int c_, int groups_) : c(c_), groups(groups_) {
        if (c % groups != 0) throw ConfigError("GroupNorm: channels not divisible by groups");
        gamma  = Tensor::full(1, c, 1, 1, 1.0f);
        ggamma = Tensor(1, c, 1, 1);
        beta   = Tensor(1, c, 1, 1);
        gbeta  = Tensor(1, c, 1, 1);
    }

    void collect(const std::string& prefix, std::vector<ParamRef>& out) {
        collect_param(out, prefix + ".gamma", gamma, ggamma);
        collect_param(out, prefix + ".beta", beta, gbeta);
    }

    Tensor forward(const Tensor& x) {
        if (x.c() != c) throw PreconditionError("GroupNorm: channel mismatch");
        const int cg = c / groups;
        const size_t gsz = static_cast<size_t>(cg) * x.h() * x.w();
        Tensor y(x.n(), c, x.h(), x.w());
        xhat_cache = Tensor(x.n(), c, x.h(), x.w());
        inv_std_cache.assign(static_cast<size_t>(x.n()) * groups, 0.0f);
        for (int n = 0; n < x.n(); n++) {
            for (int g = 0; g < groups; g++) {
                const float* xp = x.chan(n, g * cg);
                double mean = 0.0;
                for (size_t i = 0; i < gsz; i++) mean += xp[i];
                mean /= static_cast<double>(gsz);
                double var = 0.0;
                for (size_t i = 0; i < gsz; i++) {
                    double d = xp[i] - mean;
                    var += d * d;
                }
                var /= static_cast<double>(gsz);
                float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
                inv_std_cache[static_cast<size_t>(n) * groups + g] = istd;
                float* xh = xhat_cache.chan(n, g * cg);
                float* yp = y.chan(n, g * cg);
                const float mu = static_cast<float>(mean);
                for (int cc = 0; cc < cg; cc++) {
                    const float ga = gamma.data[g * cg + cc], be = beta.data[g * cg + cc];
                    const size_t off = static_cast<size_t>(cc) * x.h() * x.w();
                    for (size_t i = 0; i < static_cast<size_t>(x.h()) * x.w(); i++) {
                        float v       = (xp[off + i] - mu) * istd;
                        xh[off + i]   = v;
                        yp[off + i]   = ga * v + be;
                    }
                }
            }
        }
        return y;
    }

    Tensor backward(const Tensor& dy) {
        const Tensor& xh = xhat_cache;
        const int cg = c / groups;
        const size_t hw  = static_cast<size_t>(dy.h()) * dy.w();
        const size_t gsz = cg * hw;
        Tensor dx(dy.n(), c, dy.h(), dy.w());
        for (int n = 0; n < dy.n(); n++) {
            for (int g = 0; g < groups; g++) {
                const float istd = inv_std_cache[static_cast<size_t>(n) * groups + g];
                const float* dyp = dy.chan(n, g * cg);
                const float* xhp = xh.chan(n, g * cg);
                double s1 = 0.0, s2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
                for (int cc = 0; cc < cg; cc++) {
                    const float ga = gamma.data[g * cg + cc];
                    const size_t off = cc * hw;
                    double a = 0.0, bsum = 0.0, c2 = 0.0;
                    for (size_t i = 0; i < hw; i++) {
                        float d = dyp[off + i];
                        a += d;
                        bsum += static_cast<double>(d) * xhp[off + i];
                    }
                    (void)c2;
                    ggamma.data[g * cg + cc] += static_cast<float>(bsum);
                    gbeta.data[g * cg + cc] += static_cast<float>(a);
                    s1 += ga * a;
                    s2 += ga * bsum;
                }
                s1 /= static_cast<double>(gsz);
                s2 /= static_cast<double>(gsz);
                float* dxp = dx.chan(n, g * cg);
                for (int cc = 0; cc < cg; cc++) {
                    const float ga = gamma.data[g * cg + cc];
                    const size_t off = cc * hw;
                    for (size_t i = 0; i < hw; i++) {
                        double dxhat = static_cast<double>(ga) * dyp[off + i];
                        dxp[off + i] = static_cast<float>(
                            istd * (dxhat - s1 - static_cast<double>(xhp[off + i]) * s2));
                    }
                }
            }
        }
        return dx;
    }
};

// ------------------------------- activations --------------------------------

struct SiLU {
    Tensor x_cache;
    Tensor forward(const Tensor& x) {
        x_cache = x;
        Tensor y = x;
        auto a = y.arr();
        a = a / (1.0f + (-a).exp());
        return y;
    }
    Tensor backward(const Tensor& dy) {
        Tensor dx = x_cache;
        CArrMap x(x_cache.data.data(), static_cast<Eigen::Index>(x_cache.numel()));
        CArrMap d(dy.data.data(), static_cast<Eigen::Index>(dy.numel()));
        ArrMap o(dx.data.data(), static_cast<Eigen::Index>(dx.numel()));
        auto sig = 1.0f / (1.0f + (-x).exp());
        o = d * sig * (1.0f + x * (1.0f - sig));
        return dx;
    }
};

struct Sigmoid {
    Tensor y_cache;
    Tensor forward(const Tensor& x) {
        Tensor y = x;
        auto a = y.arr();
        a = 1.0f / (1.0f + (-a).exp());
        y_cache = y;
        return y;
    }
    Tensor backward(const Tensor& dy) {
        Tensor dx = dy;
        CArrMap y(y_cache.data.data(), static_cast<Eigen::Index>(y_cache.numel()));
        ArrMap o(dx.data.data(), static_cast<Eigen::Index>(dx.numel()));
        o = o * y * (1.0f - y);
        return dx;
    }
};

// --------------------------------- linear -----------------------------------

// y = x * W^T + b over row-stacked token matrices.
struct Linear {
    int in = 0, out = 0;
    bool has_bias = true;
    Tensor w, gw;  // [1, 1, out, in]
    Tensor b, gb;  // [1, 1, 1, out]

    MatRM x_cache;

    Linear() = default;
    Linear(int in_, int out_, rng::Stream& init, bool bias = true, float gain = 1.0f)
        : in(in_), out(out_), has_bias(bias) {
        w  = Tensor(1, 1, out, in);
        gw = Tensor(1, 1, out, in);
        b  = Tensor(1, 1, 1, out);
        gb = Tensor(1, 1, 1, out);
        float std = gain / std::sqrt(static_cast<float>(in));
        if (gain > 0.0f)
            for (auto& v : w.data) v = init.normalf() * std;
    }

    void collect(const std::string& prefix, std::vector<ParamRef>& out_ps) {
        collect_param(out_ps, prefix + ".w", w, gw);
        if (has_bias) collect_param(out_ps, prefix + ".b", b, gb);
    }

    MatRM forward(const MatRM& x) {
        x_cache = x;
        CMatMap wm(w.data.data(), out, in);
        MatRM y = x * wm.transpose();
        if (has_bias) {
            CMatMap bm(b.data.data(), 1, out);
            y.rowwise() += bm.row(0);
        }
        return y;
    }

    MatRM backward(const MatRM& dy) {
        CMatMap wm(w.data.data(), out, in);
        MatMap gwm(gw.data.data(), out, in);
        gwm.noalias() += dy.transpose() * x_cache;
        if (has_bias) {
            MatMap gbm(gb.data.data(), 1, out);
            gbm.row(0) += dy.colwise().sum();
        }
        return dy * wm;
    }
};

// --------------------------- timestep embeddings ----------------------------

// standard sinusoidal code for integer timesteps
inline MatRM sinusoidal_embedding(const std::vector<int>& t, int dim) {
    const int half = dim / 2;
    MatRM out(static_cast<Eigen::Index>(t.size()), dim);
    for (size_t n = 0; n < t.size(); n++) {
        for (int i = 0; i < half; i++) {
            double freq = std::exp(-std::log(10000.0) * i / (half - 1));
            out(static_cast<Eigen::Index>(n), i)        = static_cast<float>(std::sin(t[n] * freq));
            out(static_cast<Eigen::Index>(n), half + i) = static_cast<float>(std::cos(t[n] * freq));
        }
    }
    return out;
}

// two-layer MLP applied to the sinusoidal code
struct TimeEmbed {
    int dim = 0;
    Linear l1, l2;
    MatRM h_cache;  // pre-activation of l2 input

    TimeEmbed() = default;
    TimeEmbed(int dim_, rng::Stream& init)
        : dim(dim_), l1(dim_, dim_, init), l2(dim_, dim_, init) {}

    void collect(const std::string& prefix, std::vector<ParamRef>& out) {
        l1.collect(prefix + ".l1", out);
        l2.collect(prefix + ".l2", out);
    }

    MatRM forward(const std::vector<int>& t) {
        MatRM s = sinusoidal_embedding(t, dim);
        MatRM h = l1.forward(s);
        h_cache = h;
        MatRM a = h.array() / (1.0f + (-h.array()).exp());
        return l2.forward(a);
    }

    void backward(const MatRM& dy) {
        MatRM da  = l2.backward(dy);
        auto x    = h_cache.array();
        auto sig  = 1.0f / (1.0f + (-x).exp());
        MatRM dh  = (da.array() * sig * (1.0f + x * (1.0f - sig))).matrix();
        l1.backward(dh);  // gradient stops at the sinusoidal code
    }
};

// -------------------------------- res block ---------------------------------

// GN -> SiLU -> conv3 -> (+ time bias) -> GN -> SiLU -> conv3, residual skip
// (1x1 conv when channel counts differ). temb_dim = 0 disables conditioning.
struct ResBlock {
    int c_in = 0, c_out = 0, temb_dim = 0;
    GroupNorm gn1, gn2;
    SiLU act1, act2, act_t;
    Conv2d conv1, conv2, skip;
    Linear temb_proj;
    bool has_skip = false;

    MatRM temb_cache;  // raw temb rows (pre-SiLU), n x temb_dim

    ResBlock() = default;
    ResBlock(int c_in_, int c_out_, int temb_dim_, rng::Stream& init)
        : c_in(c_in_), c_out(c_out_), temb_dim(temb_dim_) {
        gn1   = GroupNorm(c_in);
        gn2   = GroupNorm(c_out);
        conv1 = Conv2d(c_in, c_out, 3, 1, 1, init);
        conv2 = Conv2d(c_out, c_out, 3, 1, 1, init);
        if (c_in != c_out) {
            skip     = Conv2d(c_in, c_out, 1, 1, 0, init);
            has_skip = true;
        }
        if (temb_dim > 0) temb_proj = Linear(temb_dim, c_out, init);
    }

    void collect(const std::string& prefix, std::vector<ParamRef>& out) {
        gn1.collect(prefix + ".gn1", out);
        conv1.collect(prefix + ".conv1", out);
        if (temb_dim > 0) temb_proj.collect(prefix + ".temb", out);
        gn2.collect(prefix + ".gn2", out);
        conv2.collect(prefix + ".conv2", out);
        if (has_skip) skip.collect(prefix + ".skip", out);
    }

    Tensor forward(const Tensor& x, const MatRM* temb = nullptr) {
        Tensor h = conv1.forward(act1.forward(gn1.forward(x)));
        if (temb_dim > 0) {
            if (!temb) throw PreconditionError("ResBlock: temb required");
            temb_cache = *temb;
            Tensor ta(temb->rows(), temb_dim, 1, 1);
            std::copy(temb->data(), temb->data() + temb->size(), ta.data.begin());
            Tensor tact = act_t.forward(ta);
            MatRM tm(temb->rows(), temb_dim);
            std::copy(tact.data.begin(), tact.data.end(), tm.data());
            MatRM bias = temb_proj.forward(tm);  // n x c_out
            for (int n = 0; n < h.n(); n++)
                for (int c = 0; c < c_out; c++) {
                    float bv = bias(n, c);
                    float* p = h.chan(n, c);
                    for (int i = 0; i < h.h() * h.w(); i++) p[i] += bv;
                }
        }
        Tensor y = conv2.forward(act2.forward(gn2.forward(h)));
        Tensor s = has_skip ? skip.forward(x) : x;
        y += s;
        return y;
    }

    // dtemb (n x temb_dim) accumulated into dtemb_out when conditioning is on
    Tensor backward(const Tensor& dy, MatRM* dtemb_out = nullptr) {
        Tensor dh = gn2.backward(act2.backward(conv2.backward(dy)));
        if (temb_dim > 0) {
            MatRM dbias(dh.n(), c_out);
            for (int n = 0; n < dh.n(); n++)
                for (int c = 0; c < c_out; c++) {
                    const float* p = dh.chan(n, c);
                    double s = 0.0;
                    for (int i = 0; i < dh.h() * dh.w(); i++) s += p[i];
                    dbias(n, c) = static_cast<float>(s);
                }
            MatRM dtm = temb_proj.backward(dbias);
            Tensor dta(dtm.rows(), temb_dim, 1, 1);
            std::copy(dtm.data(), dtm.data() + dtm.size(), dta.data.begin());
            Tensor dt = act_t.backward(dta);
            if (dtemb_out) {
                MatMap m(dt.data.data(), dt.n(), temb_dim);
                *dtemb_out += m;
            }
        }
        Tensor dx = gn1.backward(act1.backward(conv1.backward(dh)));
        if (has_skip)
            dx += skip.backward(dy);
        else
            dx += dy;
        return dx;
    }
};

// ----------------------------- cross attention ------------------------------

// Pre-normed multi-head cross-attention from spatial features to a fixed-size
// context (the prompt embedding). Residual output. The context is produced by
// the frozen text encoder, so no gradient flows into it.
struct CrossAttention {
    int c = 0, ctx_dim = 0, heads = 1, head_dim = 0;
    GroupNorm norm;
    Linear wq, wk, wv, wo;

    int n_cache = 0, hw_cache = 0, L_cache = 0;
    MatRM q_all, k_all, v_all;        // (n*hw x c), (n*L x c), (n*L x c)
    std::vector<MatRM> probs;         // per (item, head): hw x L

    CrossAttention() = default;
    CrossAttention(int c_, int ctx_dim_, int heads_, rng::Stream& init)
        : c(c_), ctx_dim(ctx_dim_), heads(heads_), head_dim(c_ / heads_) {
        if (c % heads != 0) throw ConfigError("CrossAttention: heads must divide channels");
        norm = GroupNorm(c);
        wq   = Linear(c, c, init, false);
        wk   = Linear(ctx_dim, c, init, false);
        wv   = Linear(ctx_dim, c, init, false);
        wo   = Linear(c, c, init, true);
    }

    void collect(const std::string& prefix, std::vector<ParamRef>& out) {
        norm.collect(prefix + ".norm", out);
        wq.collect(prefix + ".wq", out);
        wk.collect(prefix + ".wk", out);
        wv.collect(prefix + ".wv", out);
        wo.collect(prefix + ".wo", out);
    }

    // ctx: Tensor (n, 1, L, ctx_dim)
    Tensor forward(const Tensor& x, const Tensor& ctx) {
        if (ctx.n() != x.n() || ctx.w() != ctx_dim)
            throw PreconditionError("CrossAttention: bad context shape");
        const int n = x.n(), hw = x.h() * x.w(), L = ctx.h();
        n_cache = n; hw_cache = hw; L_cache = L;

        Tensor xn = norm.forward(x);
        MatRM x_all(static_cast<Eigen::Index>(n) * hw, c);
        for (int i = 0; i < n; i++)
            for (int ch = 0; ch < c; ch++) {
                const float* p = xn.chan(i, ch);
                for (int t = 0; t < hw; t++) x_all(static_cast<Eigen::Index>(i) * hw + t, ch) = p[t];
            }
        MatRM ctx_all(static_cast<Eigen::Index>(n) * L, ctx_dim);
        for (int i = 0; i < n; i++)
            std::copy(ctx.chan(i, 0), ctx.chan(i, 0) + static_cast<size_t>(L) * ctx_dim,
                      ctx_all.data() + static_cast<size_t>(i) * L * ctx_dim);

        q_all = wq.forward(x_all);
        k_all = wk.forward(ctx_all);
        v_all = wv.forward(ctx_all);

        const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
        MatRM o_all(static_cast<Eigen::Index>(n) * hw, c);
        probs.assign(static_cast<size_t>(n) * heads, MatRM());
        for (int i = 0; i < n; i++) {
            for (int h = 0; h < heads; h++) {
                auto qh = q_all.block(static_cast<Eigen::Index>(i) * hw, h * head_dim, hw, head_dim);
                auto kh = k_all.block(static_cast<Eigen::Index>(i) * L, h * head_dim, L, head_dim);
                auto vh = v_all.block(static_cast<Eigen::Index>(i) * L, h * head_dim, L, head_dim);
                MatRM s = (qh * kh.transpose()) * scale;  // hw x L
                for (Eigen::Index r = 0; r < s.rows(); r++) {
                    float m = s.row(r).maxCoeff();
                    Eigen::ArrayXf e = (s.row(r).array() - m).exp();
                    s.row(r) = (e / e.sum()).matrix();
                }
                probs[static_cast<size_t>(i) * heads + h] = s;
                o_all.block(static_cast<Eigen::Index>(i) * hw, h * head_dim, hw, head_dim)
                    .noalias() = s * vh;
            }
        }
        MatRM y_all = wo.forward(o_all);

        Tensor y = x;  // residual
        for (int i = 0; i < n; i++)
            for (int ch = 0; ch < c; ch++) {
                float* p = y.chan(i, ch);
                for (int t = 0; t < hw; t++) p[t] += y_all(static_cast<Eigen::Index>(i) * hw + t, ch);
            }
        return y;
    }

    Tensor backward(const Tensor& dy) {
        const int n = n_cache, hw = hw_cache, L = L_cache;
        MatRM dy_all(static_cast<Eigen::Index>(n) * hw, c);
        for (int i = 0; i < n; i++)
            for (int ch = 0; ch < c; ch++) {
                const float* p = dy.chan(i, ch);
                for (int t = 0; t < hw; t++) dy_all(static_cast<Eigen::Index>(i) * hw + t, ch) = p[t];
            }
        MatRM do_all = wo.backward(dy_all);

        const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
        MatRM dq_all = MatRM::Zero(static_cast<Eigen::Index>(n) * hw, c);
        for (int i = 0; i < n; i++) {
            for (int h = 0; h < heads; h++) {
                const MatRM& p = probs[static_cast<size_t>(i) * heads + h];
                auto kh = k_all.block(static_cast<Eigen::Index>(i) * L, h * head_dim, L, head_dim);
                auto doh =
                    do_all.block(static_cast<Eigen::Index>(i) * hw, h * head_dim, hw, head_dim);
                MatRM dp = doh * v_all
                                     .block(static_cast<Eigen::Index>(i) * L, h * head_dim, L,
                                            head_dim)
                                     .transpose();  // hw x L
                // softmax backward (rowwise)
                MatRM ds(hw, L);
                for (int r = 0; r < hw; r++) {
                    float dot = p.row(r).dot(dp.row(r));
                    ds.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
                }
                dq_all.block(static_cast<Eigen::Index>(i) * hw, h * head_dim, hw, head_dim)
                    .noalias() = ds * kh * scale;
                // dk/dv feed the frozen context; wk/wv still need weight grads
                // via their backward below, so accumulate dk_all/dv_all.
            }
        }
        // weight grads for wk/wv need d(k_all), d(v_all)
        MatRM dk_all = MatRM::Zero(static_cast<Eigen::Index>(n) * L, c);
        MatRM dv_all = MatRM::Zero(static_cast<Eigen::Index>(n) * L, c);
        for (int i = 0; i < n; i++) {
            for (int h = 0; h < heads; h++) {
                const MatRM& p = probs[static_cast<size_t>(i) * heads + h];
                auto qh = q_all.block(static_cast<Eigen::Index>(i) * hw, h * head_dim, hw, head_dim);
                auto doh =
                    do_all.block(static_cast<Eigen::Index>(i) * hw, h * head_dim, hw, head_dim);
                MatRM dp = doh * v_all
                                     .block(static_cast<Eigen::Index>(i) * L, h * head_dim, L,
                                            head_dim)
                                     .transpose();
                MatRM ds(hw, L);
                for (int r = 0; r < hw; r++) {
                    float dot = p.row(r).dot(dp.row(r));
                    ds.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
                }
                dk_all.block(static_cast<Eigen::Index>(i) * L, h * head_dim, L, head_dim)
                    .noalias() = ds.transpose() * qh * scale;
                dv_all.block(static_cast<Eigen::Index>(i) * L, h * head_dim, L, head_dim)
                    .noalias() = p.transpose() * doh;
            }
        }
        wk.backward(dk_all);  // context grad discarded (frozen encoder)
        wv.backward(dv_all);
        MatRM dx_all = wq.backward(dq_all);

        Tensor dxn(n, c, dy.h(), dy.w());
        for (int i = 0; i < n; i++)
            for (int ch = 0; ch < c; ch++) {
                float* p = dxn.chan(i, ch);
                for (int t = 0; t < hw; t++) p[t] = dx_all(static_cast<Eigen::Index>(i) * hw + t, ch);
            }
        Tensor dx = norm.backward(dxn);
        dx += dy;  // residual
        return dx;
    }
};

// ------------------------------ upsample conv -------------------------------

// nearest-neighbor x2 followed by a 3x3 conv
struct UpsampleConv {
    Conv2d conv;

    UpsampleConv() = default;
    UpsampleConv(int in_c, int out_c, rng::Stream& init) : conv(in_c, out_c, 3, 1, 1, init) {}

    void collect(const std::string& prefix, std::vector<ParamRef>& out) {
        conv.collect(prefix + ".conv", out);
    }

    static Tensor upsample2(const Tensor& x) {
        Tensor y(x.n(), x.c(), x.h() * 2, x.w() * 2);
        for (int n = 0; n < x.n(); n++)
            for (int c = 0; c < x.c(); c++) {
                const float* src = x.chan(n, c);
                float* dst       = y.chan(n, c);
                for (int yy = 0; yy < y.h(); yy++)
                    for (int xx = 0; xx < y.w(); xx++)
                        dst[static_cast<size_t>(yy) * y.w() + xx] =
                            src[static_cast<size_t>(yy / 2) * x.w() + xx / 2];
            }
        return y;
    }

    static Tensor downsample_grad(const Tensor& dy) {
        Tensor dx(dy.n(), dy.c(), dy.h() / 2, dy.w() / 2);
        dx.zero();
        for (int n = 0; n < dy.n(); n++)
            for (int c = 0; c < dy.c(); c++) {
                const float* src = dy.chan(n, c);
                float* dst       = dx.chan(n, c);
                for (int yy = 0; yy < dy.h(); yy++)
                    for (int xx = 0; xx < dy.w(); xx++)
                        dst[static_cast<size_t>(yy / 2) * dx.w() + xx / 2] +=
                            src[static_cast<size_t>(yy) * dy.w() + xx];
            }
        return dx;
    }

    Tensor forward(const Tensor& x) { return conv.forward(upsample2(x)); }
    Tensor backward(const Tensor& dy) { return downsample_grad(conv.backward(dy)); }
};

}  // namespace ssrb::nn

#endif
