#pragma once

#include <Eigen/Core>

#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace ragdiff {

/// std::allocator that skips zero-initialization for trivial element types;
/// Tensor's constructors still zero-fill unless Tensor::uninit is used.
template <typename T>
struct DefaultInitAlloc : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = DefaultInitAlloc<U>;
    };
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) == 0)
            ::new ((void*)p) U;
        else
            ::new ((void*)p) U(std::forward<Args>(args)...);
    }
};

/// Dense row-major tensor. Images are stored CHW with values in [-1, 1].
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T, DefaultInitAlloc<T>> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data((size_t)count(shape)) {
        std::fill(data.begin(), data.end(), T(0));
    }
    Tensor(std::vector<int> s, T fill_value) : shape(std::move(s)), data((size_t)count(shape), fill_value) {}

    /// Allocation without zero-fill, for buffers that are fully overwritten.
    static Tensor uninit(std::vector<int> s) {
        Tensor t;
        t.shape = std::move(s);
        t.data.resize((size_t)count(t.shape));
        return t;
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }
    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, T v) { return Tensor(std::move(s), v); }

    int64_t numel() const { return (int64_t)data.size(); }
    bool empty() const { return data.empty(); }
    int dim(int i) const { return shape[(size_t)i]; }
    int rank() const { return (int)shape.size(); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }
    T& operator[](int64_t i) { return data[(size_t)i]; }
    const T& operator[](int64_t i) const { return data[(size_t)i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(T(0)); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = (U)data[i];
        return out;
    }
};

// C(M,N) = A(M,K) * B(K,N), all row-major. accumulate=true adds into C.
template <typename T>
inline void gemm(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> A(a, m, k);
    Eigen::Map<const Mat> B(b, k, n);
    Eigen::Map<Mat> C(c, m, n);
    if (accumulate)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

// C(M,N) = A(M,K) * B(N,K)^T
template <typename T>
inline void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> A(a, m, k);
    Eigen::Map<const Mat> B(b, n, k);
    Eigen::Map<Mat> C(c, m, n);
    if (accumulate)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

// C(M,N) = A(K,M)^T * B(K,N)
template <typename T>
inline void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> A(a, k, m);
    Eigen::Map<const Mat> B(b, k, n);
    Eigen::Map<Mat> C(c, m, n);
    if (accumulate)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

template <typename T>
inline void axpy(Tensor<T>& y, const Tensor<T>& x, T alpha) {
    assert(y.numel() == x.numel());
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    Eigen::Map<Arr>(y.ptr(), y.numel()) += alpha * Eigen::Map<const Arr>(x.ptr(), x.numel());
}

template <typename T>
inline T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    assert(a.numel() == b.numel());
    T m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
inline double mse(const Tensor<T>& a, const Tensor<T>& b) {
    assert(a.numel() == b.numel());
    double acc = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = (double)a[i] - (double)b[i];
        acc += d * d;
    }
    return a.numel() ? acc / (double)a.numel() : 0.0;
}

template <typename T>
inline bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.ptr(), b.ptr(), sizeof(T) * (size_t)a.numel()) == 0;
}

template <typename T>
inline bool all_finite(const Tensor<T>& a) {
    for (int64_t i = 0; i < a.numel(); ++i)
        if (!std::isfinite((double)a[i])) return false;
    return true;
}

}  // namespace ragdiff
