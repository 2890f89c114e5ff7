#ifndef SSRB_CORE_TENSOR_HPP
#define SSRB_CORE_TENSOR_HPP

#include <array>
#include <cmath>
#include <cstddef>
#include <new>
#include <vector>

#include <Eigen/Dense>

#include "ssrb/core/errors.hpp"

namespace ssrb {

using MatRM    = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap   = Eigen::Map<MatRM>;
using CMatMap  = Eigen::Map<const MatRM>;
using ArrMap   = Eigen::Map<Eigen::ArrayXf>;
using CArrMap  = Eigen::Map<const Eigen::ArrayXf>;

// 64-byte-aligned storage for everything Eigen touches. Eigen's vectorized
// elementwise/reduction kernels peel to the first aligned element, so results
// depend on the buffer address modulo the packet size; pinning the alignment
// makes every op a pure function of shape and keeps runs bit-reproducible
// across allocations and processes.
template <typename T, std::size_t Align>
struct AlignedAlloc {
    using value_type = T;
    template <typename U>
    struct rebind {
        using other = AlignedAlloc<U, Align>;
    };
    AlignedAlloc() noexcept = default;
    template <typename U>
    AlignedAlloc(const AlignedAlloc<U, Align>&) noexcept {}
    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
    }
    void deallocate(T* p, std::size_t) noexcept {
        ::operator delete(p, std::align_val_t(Align));
    }
    template <typename U>
    bool operator==(const AlignedAlloc<U, Align>&) const noexcept {
        return true;
    }
};

using FloatVec = std::vector<float, AlignedAlloc<float, 64>>;

// Dense float tensor, NCHW, contiguous row-major. Conv weights reuse the
// same container as (cout, cin, kh, kw).
struct Tensor {
    std::array<int, 4> dims{0, 0, 0, 0};
    FloatVec data;

    Tensor() = default;
    Tensor(int n, int c, int h, int w)
        : dims{n, c, h, w}, data(static_cast<size_t>(n) * c * h * w, 0.0f) {}

    static Tensor zeros(int n, int c, int h, int w) { return Tensor(n, c, h, w); }
    static Tensor full(int n, int c, int h, int w, float v) {
        Tensor t(n, c, h, w);
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    int n() const { return dims[0]; }
    int c() const { return dims[1]; }
    int h() const { return dims[2]; }
    int w() const { return dims[3]; }
    size_t numel() const { return data.size(); }
    bool empty() const { return data.empty(); }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    float& at(int n_, int c_, int y, int x) {
        return data[((static_cast<size_t>(n_) * dims[1] + c_) * dims[2] + y) * dims[3] + x];
    }
    float at(int n_, int c_, int y, int x) const {
        return data[((static_cast<size_t>(n_) * dims[1] + c_) * dims[2] + y) * dims[3] + x];
    }

    float* chan(int n_, int c_) {
        return data.data() + (static_cast<size_t>(n_) * dims[1] + c_) * dims[2] * dims[3];
    }
    const float* chan(int n_, int c_) const {
        return data.data() + (static_cast<size_t>(n_) * dims[1] + c_) * dims[2] * dims[3];
    }

    // Flat views. Shapes are the caller's contract; only the element count is checked.
    MatMap mat(int rows, int cols) {
        if (static_cast<size_t>(rows) * cols != numel())
            throw PreconditionError("tensor mat view: element count mismatch");
        return MatMap(data.data(), rows, cols);
    }
    CMatMap mat(int rows, int cols) const {
        if (static_cast<size_t>(rows) * cols != numel())
            throw PreconditionError("tensor mat view: element count mismatch");
        return CMatMap(data.data(), rows, cols);
    }
    ArrMap arr() { return ArrMap(data.data(), static_cast<Eigen::Index>(numel())); }
    CArrMap arr() const { return CArrMap(data.data(), static_cast<Eigen::Index>(numel())); }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(0.0f); }

    Tensor& operator+=(const Tensor& o) {
        if (!same_shape(o)) throw PreconditionError("tensor +=: shape mismatch");
        arr() += o.arr();
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        if (!same_shape(o)) throw PreconditionError("tensor -=: shape mismatch");
        arr() -= o.arr();
        return *this;
    }
    Tensor& operator*=(float s) {
        arr() *= s;
        return *this;
    }
    // this += a * s
    void add_scaled(const Tensor& a, float s) {
        if (!same_shape(a)) throw PreconditionError("tensor add_scaled: shape mismatch");
        arr() += a.arr() * s;
    }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    float max_abs() const {
        float m = 0.0f;
        for (float v : data) m = std::max(m, std::fabs(v));
        return m;
    }
};

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw PreconditionError("max_abs_diff: shape mismatch");
    float m = 0.0f;
    for (size_t i = 0; i < a.numel(); i++) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

// Channel-wise concat along dim 1. Inputs must agree on n/h/w.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
        throw PreconditionError("concat_channels: spatial/batch mismatch");
    Tensor out(a.n(), a.c() + b.c(), a.h(), a.w());
    size_t plane = static_cast<size_t>(a.h()) * a.w();
    for (int n = 0; n < a.n(); n++) {
        float* dst = out.chan(n, 0);
        std::copy(a.chan(n, 0), a.chan(n, 0) + plane * a.c(), dst);
        std::copy(b.chan(n, 0), b.chan(n, 0) + plane * b.c(), dst + plane * a.c());
    }
    return out;
}

// Inverse of concat_channels for gradients: splits dy into (dy_a, dy_b).
inline void split_channels(const Tensor& dy, Tensor& da, Tensor& db, int ca) {
    int cb = dy.c() - ca;
    da = Tensor(dy.n(), ca, dy.h(), dy.w());
    db = Tensor(dy.n(), cb, dy.h(), dy.w());
    size_t plane = static_cast<size_t>(dy.h()) * dy.w();
    for (int n = 0; n < dy.n(); n++) {
        const float* src = dy.chan(n, 0);
        std::copy(src, src + plane * ca, da.chan(n, 0));
        std::copy(src + plane * ca, src + plane * dy.c(), db.chan(n, 0));
    }
}

}  // namespace ssrb

#endif
