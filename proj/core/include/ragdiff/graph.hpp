#pragma once

#include "ragdiff/error.hpp"
#include "ragdiff/rng.hpp"
#include "ragdiff/tensor.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

namespace ragdiff {

/// Reverse-mode tape over dense tensors. Nodes are created in topological
/// order by construction, so backward() is a reverse sweep over the arena.
/// Parameter nodes reference external storage; their gradients stay on the
/// node and are harvested by the caller after backward().
template <typename T>
class Graph {
  public:
    using Id = int32_t;

    struct Node {
        Tensor<T> own;
        const Tensor<T>* ext = nullptr;
        Tensor<T> grad;
        bool needs = false;
        std::function<void(Graph&, Id)> back;
    };

    const Tensor<T>& val(Id id) const {
        const Node& n = nodes_[(size_t)id];
        return n.ext ? *n.ext : n.own;
    }
    bool needs_grad(Id id) const { return nodes_[(size_t)id].needs; }
    bool has_grad(Id id) const { return !nodes_[(size_t)id].grad.data.empty(); }
    Tensor<T>& grad(Id id) {
        Node& n = nodes_[(size_t)id];
        if (n.grad.data.empty()) n.grad = Tensor<T>(val(id).shape);
        return n.grad;
    }

    Id input(Tensor<T> v, bool requires_grad = false) {
        Node n;
        n.own = std::move(v);
        n.needs = requires_grad;
        nodes_.push_back(std::move(n));
        return (Id)nodes_.size() - 1;
    }

    Id external(const Tensor<T>* v, bool requires_grad = true) {
        Node n;
        n.ext = v;
        n.needs = requires_grad;
        nodes_.push_back(std::move(n));
        return (Id)nodes_.size() - 1;
    }

    void backward(Id loss) {
        require(val(loss).numel() == 1, kUsageError, "backward: loss must be scalar");
        grad(loss).fill(T(1));
        for (Id id = (Id)nodes_.size() - 1; id >= 0; --id) {
            Node& n = nodes_[(size_t)id];
            if (n.back && n.needs && !n.grad.data.empty()) n.back(*this, id);
        }
    }

    size_t size() const { return nodes_.size(); }

    // ---- elementwise ----

    Id lincomb(Id a, Id b, T ca, T cb) {
        const Tensor<T>&A = val(a), &B = val(b);
        require(A.same_shape(B), kUsageError, "lincomb: shape mismatch");
        Tensor<T> y = Tensor<T>::uninit(A.shape);
        using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
        Eigen::Map<Arr>(y.ptr(), y.numel()) = ca * Eigen::Map<const Arr>(A.ptr(), A.numel()) +
                                              cb * Eigen::Map<const Arr>(B.ptr(), B.numel());
        return make(std::move(y), {a, b}, [a, b, ca, cb](Graph& g, Id self) {
            const Tensor<T>& dy = g.grad(self);
            if (g.needs_grad(a)) axpy(g.grad(a), dy, ca);
            if (g.needs_grad(b)) axpy(g.grad(b), dy, cb);
        });
    }

    Id add(Id a, Id b) { return lincomb(a, b, T(1), T(1)); }

    Id scale(Id a, T s) {
        const Tensor<T>& A = val(a);
        Tensor<T> y = Tensor<T>::uninit(A.shape);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] = s * A[i];
        return make(std::move(y), {a}, [a, s](Graph& g, Id self) {
            if (g.needs_grad(a)) axpy(g.grad(a), g.grad(self), s);
        });
    }

    Id silu(Id a) {
        using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
        const Tensor<T>& A = val(a);
        Tensor<T> y = Tensor<T>::uninit(A.shape), sig = Tensor<T>::uninit(A.shape);
        int64_t n = A.numel();
        Eigen::Map<Arr>(sig.ptr(), n) = T(1) / (T(1) + (-Eigen::Map<const Arr>(A.ptr(), n)).exp());
        Eigen::Map<Arr>(y.ptr(), n) = Eigen::Map<const Arr>(A.ptr(), n) * Eigen::Map<const Arr>(sig.ptr(), n);
        return make(std::move(y), {a}, [a, sig = std::move(sig)](Graph& g, Id self) {
            if (!g.needs_grad(a)) return;
            const Tensor<T>&dy = g.grad(self), &A = g.val(a);
            Tensor<T>& da = g.grad(a);
            int64_t n = dy.numel();
            Eigen::Map<Arr>(da.ptr(), n) +=
                Eigen::Map<const Arr>(dy.ptr(), n) * Eigen::Map<const Arr>(sig.ptr(), n) *
                (T(1) + Eigen::Map<const Arr>(A.ptr(), n) * (T(1) - Eigen::Map<const Arr>(sig.ptr(), n)));
        });
    }

    // ---- shape plumbing ----

    /// {C,H,W} -> {H*W, C} token matrix
    Id image_to_tokens(Id x) {
        const Tensor<T>& X = val(x);
        int c = X.dim(0), hw = X.dim(1) * X.dim(2);
        Tensor<T> y = Tensor<T>::uninit({hw, c});
        for (int i = 0; i < c; ++i)
            for (int j = 0; j < hw; ++j) y[(int64_t)j * c + i] = X[(int64_t)i * hw + j];
        return make(std::move(y), {x}, [x, c, hw](Graph& g, Id self) {
            if (!g.needs_grad(x)) return;
            const Tensor<T>& dy = g.grad(self);
            Tensor<T>& dx = g.grad(x);
            for (int i = 0; i < c; ++i)
                for (int j = 0; j < hw; ++j) dx[(int64_t)i * hw + j] += dy[(int64_t)j * c + i];
        });
    }

    /// {H*W, C} -> {C,H,W}
    Id tokens_to_image(Id x, int h, int w) {
        const Tensor<T>& X = val(x);
        int c = X.dim(1), hw = X.dim(0);
        require(hw == h * w, kUsageError, "tokens_to_image: size mismatch");
        Tensor<T> y = Tensor<T>::uninit({c, h, w});
        for (int j = 0; j < hw; ++j)
            for (int i = 0; i < c; ++i) y[(int64_t)i * hw + j] = X[(int64_t)j * c + i];
        return make(std::move(y), {x}, [x, c, hw](Graph& g, Id self) {
            if (!g.needs_grad(x)) return;
            const Tensor<T>& dy = g.grad(self);
            Tensor<T>& dx = g.grad(x);
            for (int j = 0; j < hw; ++j)
                for (int i = 0; i < c; ++i) dx[(int64_t)j * c + i] += dy[(int64_t)i * hw + j];
        });
    }

    Id concat_channels(Id a, Id b) {
        const Tensor<T>&A = val(a), &B = val(b);
        require(A.dim(1) == B.dim(1) && A.dim(2) == B.dim(2), kUsageError, "concat: spatial mismatch");
        int ca = A.dim(0), cb = B.dim(0), hw = A.dim(1) * A.dim(2);
        Tensor<T> y = Tensor<T>::uninit({ca + cb, A.dim(1), A.dim(2)});
        std::memcpy(y.ptr(), A.ptr(), sizeof(T) * (size_t)(ca * hw));
        std::memcpy(y.ptr() + (int64_t)ca * hw, B.ptr(), sizeof(T) * (size_t)(cb * hw));
        return make(std::move(y), {a, b}, [a, b, ca, cb, hw](Graph& g, Id self) {
            const Tensor<T>& dy = g.grad(self);
            if (g.needs_grad(a)) {
                Tensor<T>& da = g.grad(a);
                for (int64_t i = 0; i < (int64_t)ca * hw; ++i) da[i] += dy[i];
            }
            if (g.needs_grad(b)) {
                Tensor<T>& db = g.grad(b);
                for (int64_t i = 0; i < (int64_t)cb * hw; ++i) db[i] += dy[(int64_t)ca * hw + i];
            }
        });
    }

    Id upsample_nearest2(Id x) {
        const Tensor<T>& X = val(x);
        int c = X.dim(0), h = X.dim(1), w = X.dim(2);
        Tensor<T> y = Tensor<T>::uninit({c, 2 * h, 2 * w});
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < 2 * h; ++i)
                for (int j = 0; j < 2 * w; ++j)
                    y[((int64_t)ch * 2 * h + i) * 2 * w + j] = X[((int64_t)ch * h + i / 2) * w + j / 2];
        return make(std::move(y), {x}, [x, c, h, w](Graph& g, Id self) {
            if (!g.needs_grad(x)) return;
            const Tensor<T>& dy = g.grad(self);
            Tensor<T>& dx = g.grad(x);
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < 2 * h; ++i)
                    for (int j = 0; j < 2 * w; ++j)
                        dx[((int64_t)ch * h + i / 2) * w + j / 2] += dy[((int64_t)ch * 2 * h + i) * 2 * w + j];
        });
    }

    // ---- dense layers ----

    /// x {N,Din}, w {Dout,Din}, b {Dout} (or -1 for no bias) -> {N,Dout}
    Id linear(Id x, Id w, Id b) {
        const Tensor<T>&X = val(x), &W = val(w);
        int n = X.dim(0), din = X.dim(1), dout = W.dim(0);
        require(W.dim(1) == din, kUsageError, "linear: weight shape mismatch");
        Tensor<T> y = Tensor<T>::uninit({n, dout});
        gemm_nt(X.ptr(), W.ptr(), y.ptr(), n, din, dout);
        if (b >= 0) {
            const Tensor<T>& B = val(b);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < dout; ++j) y[(int64_t)i * dout + j] += B[j];
        }
        return make(std::move(y), {x, w, b}, [x, w, b, n, din, dout](Graph& g, Id self) {
            const Tensor<T>& dy = g.grad(self);
            if (g.needs_grad(x)) gemm(dy.ptr(), g.val(w).ptr(), g.grad(x).ptr(), n, dout, din, true);
            if (g.needs_grad(w)) gemm_tn(dy.ptr(), g.val(x).ptr(), g.grad(w).ptr(), dout, n, din, true);
            if (b >= 0 && g.needs_grad(b)) {
                Tensor<T>& db = g.grad(b);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < dout; ++j) db[j] += dy[(int64_t)i * dout + j];
            }
        });
    }

    /// table {V,D}, ids -> {n,D}
    Id embedding(Id table, std::vector<int> ids) {
        const Tensor<T>& Tb = val(table);
        int v = Tb.dim(0), d = Tb.dim(1);
        for (int id : ids) require(id >= 0 && id < v, kUsageError, "embedding: token id outside vocabulary");
        Tensor<T> y = Tensor<T>::uninit({(int)ids.size(), d});
        for (size_t i = 0; i < ids.size(); ++i)
            std::memcpy(y.ptr() + (int64_t)i * d, Tb.ptr() + (int64_t)ids[i] * d, sizeof(T) * (size_t)d);
        return make(std::move(y), {table}, [table, ids = std::move(ids), d](Graph& g, Id self) {
            if (!g.needs_grad(table)) return;
            const Tensor<T>& dy = g.grad(self);
            Tensor<T>& dt = g.grad(table);
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < d; ++j) dt[(int64_t)ids[i] * d + j] += dy[(int64_t)i * d + j];
        });
    }

    /// {N,D} -> {1,D} mean over rows
    Id mean_rows(Id x) {
        const Tensor<T>& X = val(x);
        int n = X.dim(0), d = X.dim(1);
        Tensor<T> y({1, d}, T(0));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) y[j] += X[(int64_t)i * d + j];
        for (int j = 0; j < d; ++j) y[j] /= (T)n;
        return make(std::move(y), {x}, [x, n, d](Graph& g, Id self) {
            if (!g.needs_grad(x)) return;
            const Tensor<T>& dy = g.grad(self);
            Tensor<T>& dx = g.grad(x);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) dx[(int64_t)i * d + j] += dy[j] / (T)n;
        });
    }

    /// x {C,H,W} plus per-channel bias (numel == C)
    Id channel_bias(Id x, Id v) {
        const Tensor<T>&X = val(x), &V = val(v);
        int c = X.dim(0), hw = X.dim(1) * X.dim(2);
        require((int)V.numel() == c, kUsageError, "channel_bias: bias size mismatch");
        Tensor<T> y = Tensor<T>::uninit(X.shape);
        for (int i = 0; i < c; ++i)
            for (int j = 0; j < hw; ++j) y[(int64_t)i * hw + j] = X[(int64_t)i * hw + j] + V[i];
        return make(std::move(y), {x, v}, [x, v, c, hw](Graph& g, Id self) {
            const Tensor<T>& dy = g.grad(self);
            if (g.needs_grad(x)) axpy(g.grad(x), dy, T(1));
            if (g.needs_grad(v)) {
                Tensor<T>& dv = g.grad(v);
                for (int i = 0; i < c; ++i) {
                    T acc = 0;
                    for (int j = 0; j < hw; ++j) acc += dy[(int64_t)i * hw + j];
                    dv[i] += acc;
                }
            }
        });
    }

    // ---- conv / norm ----

    /// x {Cin,H,W}, w {Cout, Cin*k*k}, b {Cout} or -1; k in {1,3}, pad=k/2
    Id conv2d(Id x, Id w, Id b, int k, int stride) {
        const Tensor<T>&X = val(x), &W = val(w);
        int cin = X.dim(0), h = X.dim(1), wd = X.dim(2);
        int cout = W.dim(0);
        require(W.dim(1) == cin * k * k, kUsageError, "conv2d: weight shape mismatch");
        int pad = k / 2;
        int ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;

        Tensor<T> col;
        const T* col_ptr;
        if (k == 1 && stride == 1) {
            col_ptr = X.ptr();  // {Cin, H*W} already
        } else {
            col = im2col(X, k, stride, pad, ho, wo);
            col_ptr = col.ptr();
        }
        Tensor<T> y = Tensor<T>::uninit({cout, ho, wo});
        gemm(W.ptr(), col_ptr, y.ptr(), cout, cin * k * k, ho * wo);
        if (b >= 0) {
            const Tensor<T>& B = val(b);
            for (int i = 0; i < cout; ++i)
                for (int j = 0; j < ho * wo; ++j) y[(int64_t)i * ho * wo + j] += B[i];
        }
        return make(std::move(y), {x, w, b},
                    [x, w, b, k, stride, pad, cin, h, wd, cout, ho, wo, col = std::move(col)](Graph& g, Id self) {
                        const Tensor<T>& dy = g.grad(self);
                        int kk = cin * k * k, hw = ho * wo;
                        const bool direct = (k == 1 && stride == 1);
                        const T* col_ptr = direct ? g.val(x).ptr() : col.ptr();
                        if (g.needs_grad(w)) gemm_nt(dy.ptr(), col_ptr, g.grad(w).ptr(), cout, hw, kk, true);
                        if (b >= 0 && g.needs_grad(b)) {
                            Tensor<T>& db = g.grad(b);
                            for (int i = 0; i < cout; ++i) {
                                T acc = 0;
                                for (int j = 0; j < hw; ++j) acc += dy[(int64_t)i * hw + j];
                                db[i] += acc;
                            }
                        }
                        if (g.needs_grad(x)) {
                            if (direct) {
                                gemm_tn(g.val(w).ptr(), dy.ptr(), g.grad(x).ptr(), kk, cout, hw, true);
                            } else {
                                Tensor<T> dcol = Tensor<T>::uninit({kk, hw});
                                gemm_tn(g.val(w).ptr(), dy.ptr(), dcol.ptr(), kk, cout, hw);
                                col2im_add(dcol, g.grad(x), cin, h, wd, k, stride, pad, ho, wo);
                            }
                        }
                    });
    }

    /// GroupNorm with per-channel affine. x {C,H,W}, gamma/beta {C}.
    Id group_norm(Id x, Id gamma, Id beta, int groups, T eps = (T)1e-5) {
        const Tensor<T>& X = val(x);
        int c = X.dim(0), hw = X.dim(1) * X.dim(2);
        require(c % groups == 0, kUsageError, "group_norm: channels not divisible by groups");
        int gc = c / groups;
        int64_t m = (int64_t)gc * hw;
        Tensor<T> xhat = Tensor<T>::uninit(X.shape);
        Tensor<T> inv_std = Tensor<T>::uninit({groups});
        const Tensor<T>&G = val(gamma), &B = val(beta);
        Tensor<T> y = Tensor<T>::uninit(X.shape);
        for (int gi = 0; gi < groups; ++gi) {
            const T* xs = X.ptr() + (int64_t)gi * m;
            double mu = 0;
            for (int64_t i = 0; i < m; ++i) mu += (double)xs[i];
            mu /= (double)m;
            double var = 0;
            for (int64_t i = 0; i < m; ++i) {
                double d = (double)xs[i] - mu;
                var += d * d;
            }
            var /= (double)m;
            T is = (T)(1.0 / std::sqrt(var + (double)eps));
            inv_std[gi] = is;
            for (int64_t i = 0; i < m; ++i) xhat[(int64_t)gi * m + i] = (T)(((double)xs[i] - mu) * (double)is);
        }
        for (int ch = 0; ch < c; ++ch)
            for (int j = 0; j < hw; ++j) {
                int64_t i = (int64_t)ch * hw + j;
                y[i] = G[ch] * xhat[i] + B[ch];
            }
        return make(std::move(y), {x, gamma, beta},
                    [x, gamma, beta, groups, c, hw, gc, m, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](Graph& g, Id self) {
                        const Tensor<T>& dy = g.grad(self);
                        const Tensor<T>& G = g.val(gamma);
                        if (g.needs_grad(gamma)) {
                            Tensor<T>& dg = g.grad(gamma);
                            for (int ch = 0; ch < c; ++ch) {
                                T acc = 0;
                                for (int j = 0; j < hw; ++j)
                                    acc += dy[(int64_t)ch * hw + j] * xhat[(int64_t)ch * hw + j];
                                dg[ch] += acc;
                            }
                        }
                        if (g.needs_grad(beta)) {
                            Tensor<T>& db = g.grad(beta);
                            for (int ch = 0; ch < c; ++ch) {
                                T acc = 0;
                                for (int j = 0; j < hw; ++j) acc += dy[(int64_t)ch * hw + j];
                                db[ch] += acc;
                            }
                        }
                        if (!g.needs_grad(x)) return;
                        Tensor<T>& dx = g.grad(x);
                        for (int gi = 0; gi < groups; ++gi) {
                            double sum_dxh = 0, sum_dxh_xh = 0;
                            for (int ci = 0; ci < gc; ++ci) {
                                int ch = gi * gc + ci;
                                for (int j = 0; j < hw; ++j) {
                                    int64_t i = (int64_t)ch * hw + j;
                                    double dxh = (double)dy[i] * (double)G[ch];
                                    sum_dxh += dxh;
                                    sum_dxh_xh += dxh * (double)xhat[i];
                                }
                            }
                            double mean_dxh = sum_dxh / (double)m, mean_dxh_xh = sum_dxh_xh / (double)m;
                            for (int ci = 0; ci < gc; ++ci) {
                                int ch = gi * gc + ci;
                                for (int j = 0; j < hw; ++j) {
                                    int64_t i = (int64_t)ch * hw + j;
                                    double dxh = (double)dy[i] * (double)G[ch];
                                    dx[i] += (T)((double)inv_std[gi] *
                                                 (dxh - mean_dxh - (double)xhat[i] * mean_dxh_xh));
                                }
                            }
                        }
                    });
    }

    // ---- attention ----

    /// Multi-head cross-attention of `q_tokens` {Nq,D} over the concatenation
    /// of key/value token groups (one per retrieved neighbor, or a single
    /// group for text tokens). Group contributions are reduced in a canonical
    /// content-sorted order, so permuting the groups changes nothing, bit for
    /// bit, in either the output or the gradients.
    Id mha(Id q_tokens, const std::vector<Id>& kv_groups, Id wq, Id wk, Id wv, Id wo, int heads) {
        const Tensor<T>& Q_in = val(q_tokens);
        int nq = Q_in.dim(0), d = Q_in.dim(1);
        require(d % heads == 0, kUsageError, "mha: dim not divisible by heads");
        int dh = d / heads;
        T scale = (T)(1.0 / std::sqrt((double)dh));
        size_t ng = kv_groups.size();
        require(ng >= 1, kUsageError, "mha: need at least one kv group");

        // canonical group order: content hash, full bytes on ties
        std::vector<int> ord((size_t)ng);
        std::iota(ord.begin(), ord.end(), 0);
        std::vector<uint64_t> hashes(ng);
        for (size_t i = 0; i < ng; ++i) {
            const Tensor<T>& kv = val(kv_groups[i]);
            hashes[i] = fnv1a(kv.ptr(), sizeof(T) * (size_t)kv.numel());
        }
        std::sort(ord.begin(), ord.end(), [&](int a, int b) {
            if (hashes[(size_t)a] != hashes[(size_t)b]) return hashes[(size_t)a] < hashes[(size_t)b];
            const Tensor<T>&A = val(kv_groups[(size_t)a]), &B = val(kv_groups[(size_t)b]);
            if (A.numel() != B.numel()) return A.numel() < B.numel();
            return std::memcmp(A.ptr(), B.ptr(), sizeof(T) * (size_t)A.numel()) < 0;
        });

        const int dkv = val(wk).dim(1);
        require(val(wk).dim(0) == d && val(wv).dim(0) == d && val(wv).dim(1) == dkv, kUsageError,
                "mha: k/v projection shape mismatch");
        Tensor<T> Q = Tensor<T>::uninit({nq, d});
        gemm_nt(Q_in.ptr(), val(wq).ptr(), Q.ptr(), nq, d, d);
        std::vector<Tensor<T>> K(ng), V(ng), E(ng);
        for (size_t i = 0; i < ng; ++i) {
            const Tensor<T>& kv = val(kv_groups[i]);
            require(kv.dim(1) == dkv, kUsageError, "mha: kv dim mismatch");
            int nk = kv.dim(0);
            K[i] = Tensor<T>::uninit({nk, d});
            V[i] = Tensor<T>::uninit({nk, d});
            gemm_nt(kv.ptr(), val(wk).ptr(), K[i].ptr(), nk, dkv, d);
            gemm_nt(kv.ptr(), val(wv).ptr(), V[i].ptr(), nk, dkv, d);
            E[i] = Tensor<T>::uninit({nq, heads, nk});
        }

        // logits, global max, exp, and canonical-order reduction
        Tensor<T> denom({nq, heads}, T(0));
        Tensor<T> O({nq, d}, T(0));
        Tensor<T> mx({nq, heads}, std::numeric_limits<T>::lowest());
        for (size_t oi = 0; oi < ng; ++oi) {
            int i = ord[oi];
            int nk = K[(size_t)i].dim(0);
            for (int n = 0; n < nq; ++n)
                for (int hd = 0; hd < heads; ++hd) {
                    const T* qp = Q.ptr() + (int64_t)n * d + hd * dh;
                    for (int kk = 0; kk < nk; ++kk) {
                        const T* kp = K[(size_t)i].ptr() + (int64_t)kk * d + hd * dh;
                        T s = 0;
                        for (int e = 0; e < dh; ++e) s += qp[e] * kp[e];
                        s *= scale;
                        E[(size_t)i][((int64_t)n * heads + hd) * nk + kk] = s;  // logits for now
                        mx[(int64_t)n * heads + hd] = std::max(mx[(int64_t)n * heads + hd], s);
                    }
                }
        }
        for (size_t oi = 0; oi < ng; ++oi) {
            int i = ord[oi];
            int nk = K[(size_t)i].dim(0);
            for (int n = 0; n < nq; ++n)
                for (int hd = 0; hd < heads; ++hd) {
                    T m = mx[(int64_t)n * heads + hd];
                    T* ep = E[(size_t)i].ptr() + ((int64_t)n * heads + hd) * nk;
                    T* op = O.ptr() + (int64_t)n * d + hd * dh;
                    T dsum = 0;
                    for (int kk = 0; kk < nk; ++kk) {
                        T e = std::exp(ep[kk] - m);
                        ep[kk] = e;
                        dsum += e;
                        const T* vp = V[(size_t)i].ptr() + (int64_t)kk * d + hd * dh;
                        for (int el = 0; el < dh; ++el) op[el] += e * vp[el];
                    }
                    denom[(int64_t)n * heads + hd] += dsum;
                }
        }
        for (int n = 0; n < nq; ++n)
            for (int hd = 0; hd < heads; ++hd) {
                T inv = T(1) / denom[(int64_t)n * heads + hd];
                T* op = O.ptr() + (int64_t)n * d + hd * dh;
                for (int el = 0; el < dh; ++el) op[el] *= inv;
            }
        Tensor<T> y = Tensor<T>::uninit({nq, d});
        gemm_nt(O.ptr(), val(wo).ptr(), y.ptr(), nq, d, d);

        std::vector<Id> parents = {q_tokens, wq, wk, wv, wo};
        for (Id kv : kv_groups) parents.push_back(kv);
        return make_multi(
            std::move(y), parents,
            [q_tokens, kv_groups, wq, wk, wv, wo, heads, nq, d, dh, scale, ord = std::move(ord),
             Q = std::move(Q), K = std::move(K), V = std::move(V), E = std::move(E), denom = std::move(denom),
             O = std::move(O)](Graph& g, Id self) {
                const Tensor<T>& dy = g.grad(self);
                size_t ng = kv_groups.size();
                // dO = dy * Wo ; dWo += dy^T * O
                Tensor<T> dO = Tensor<T>::uninit({nq, d});
                gemm(dy.ptr(), g.val(wo).ptr(), dO.ptr(), nq, d, d);
                if (g.needs_grad(wo)) gemm_tn(dy.ptr(), O.ptr(), g.grad(wo).ptr(), d, nq, d, true);

                Tensor<T> dQ({nq, d}, T(0));
                std::vector<Tensor<T>> dK(ng), dV(ng);
                for (size_t i = 0; i < ng; ++i) {
                    dK[i] = Tensor<T>(K[i].shape, T(0));
                    dV[i] = Tensor<T>(V[i].shape, T(0));
                }
                // softmax backward per (query, head), groups in canonical order
                for (int n = 0; n < nq; ++n)
                    for (int hd = 0; hd < heads; ++hd) {
                        T inv = T(1) / denom[(int64_t)n * heads + hd];
                        const T* dop = dO.ptr() + (int64_t)n * d + hd * dh;
                        // gsum = sum_k p_k * (V_k . dО)
                        T gsum = 0;
                        for (size_t oi = 0; oi < ng; ++oi) {
                            int i = ord[oi];
                            int nk = K[(size_t)i].dim(0);
                            const T* ep = E[(size_t)i].ptr() + ((int64_t)n * heads + hd) * nk;
                            for (int kk = 0; kk < nk; ++kk) {
                                const T* vp = V[(size_t)i].ptr() + (int64_t)kk * d + hd * dh;
                                T gv = 0;
                                for (int el = 0; el < dh; ++el) gv += vp[el] * dop[el];
                                gsum += ep[kk] * inv * gv;
                            }
                        }
                        for (size_t oi = 0; oi < ng; ++oi) {
                            int i = ord[oi];
                            int nk = K[(size_t)i].dim(0);
                            const T* ep = E[(size_t)i].ptr() + ((int64_t)n * heads + hd) * nk;
                            const T* qp = Q.ptr() + (int64_t)n * d + hd * dh;
                            for (int kk = 0; kk < nk; ++kk) {
                                T p = ep[kk] * inv;
                                const T* vp = V[(size_t)i].ptr() + (int64_t)kk * d + hd * dh;
                                T* dvp = dV[(size_t)i].ptr() + (int64_t)kk * d + hd * dh;
                                T gv = 0;
                                for (int el = 0; el < dh; ++el) {
                                    dvp[el] += p * dop[el];
                                    gv += vp[el] * dop[el];
                                }
                                T ds = p * (gv - gsum) * scale;
                                const T* kp = K[(size_t)i].ptr() + (int64_t)kk * d + hd * dh;
                                T* dkp = dK[(size_t)i].ptr() + (int64_t)kk * d + hd * dh;
                                T* dqp = dQ.ptr() + (int64_t)n * d + hd * dh;
                                for (int el = 0; el < dh; ++el) {
                                    dqp[el] += ds * kp[el];
                                    dkp[el] += ds * qp[el];
                                }
                            }
                        }
                    }
                // project back through the q/k/v maps
                if (g.needs_grad(q_tokens)) gemm(dQ.ptr(), g.val(wq).ptr(), g.grad(q_tokens).ptr(), nq, d, d, true);
                if (g.needs_grad(wq)) gemm_tn(dQ.ptr(), g.val(q_tokens).ptr(), g.grad(wq).ptr(), d, nq, d, true);
                const int dkv = g.val(wk).dim(1);
                for (size_t i = 0; i < ng; ++i) {
                    const Tensor<T>& kv = g.val(kv_groups[i]);
                    int nk = kv.dim(0);
                    if (g.needs_grad(kv_groups[i])) {
                        gemm(dK[i].ptr(), g.val(wk).ptr(), g.grad(kv_groups[i]).ptr(), nk, d, dkv, true);
                        gemm(dV[i].ptr(), g.val(wv).ptr(), g.grad(kv_groups[i]).ptr(), nk, d, dkv, true);
                    }
                    if (g.needs_grad(wk)) gemm_tn(dK[i].ptr(), kv.ptr(), g.grad(wk).ptr(), d, nk, dkv, true);
                    if (g.needs_grad(wv)) gemm_tn(dV[i].ptr(), kv.ptr(), g.grad(wv).ptr(), d, nk, dkv, true);
                }
            });
    }

    // ---- losses ----

    /// mean((pred - target)^2), target is a constant
    Id mse_loss(Id pred, Tensor<T> target) {
        const Tensor<T>& P = val(pred);
        require(P.same_shape(target), kUsageError, "mse_loss: shape mismatch");
        double acc = 0;
        for (int64_t i = 0; i < P.numel(); ++i) {
            double dd = (double)P[i] - (double)target[i];
            acc += dd * dd;
        }
        Tensor<T> y({1});
        y[0] = (T)(acc / (double)P.numel());
        return make(std::move(y), {pred}, [pred, target = std::move(target)](Graph& g, Id self) {
            if (!g.needs_grad(pred)) return;
            T gy = g.grad(self)[0];
            const Tensor<T>& P = g.val(pred);
            Tensor<T>& dp = g.grad(pred);
            T c = gy * T(2) / (T)P.numel();
            for (int64_t i = 0; i < P.numel(); ++i) dp[i] += c * (P[i] - target[i]);
        });
    }

    /// cross-entropy of logits {1,C} against a class label
    Id softmax_ce(Id logits, int label) {
        const Tensor<T>& L = val(logits);
        int c = (int)L.numel();
        require(label >= 0 && label < c, kUsageError, "softmax_ce: label out of range");
        T m = L[0];
        for (int i = 1; i < c; ++i) m = std::max(m, L[i]);
        Tensor<T> p({c});
        double z = 0;
        for (int i = 0; i < c; ++i) {
            p[i] = std::exp(L[i] - m);
            z += (double)p[i];
        }
        for (int i = 0; i < c; ++i) p[i] = (T)((double)p[i] / z);
        Tensor<T> y({1});
        y[0] = (T)(std::log(z) + (double)m - (double)L[label]);
        return make(std::move(y), {logits}, [logits, label, p = std::move(p)](Graph& g, Id self) {
            if (!g.needs_grad(logits)) return;
            T gy = g.grad(self)[0];
            Tensor<T>& dl = g.grad(logits);
            for (int64_t i = 0; i < dl.numel(); ++i) dl[i] += gy * (p[i] - (i == label ? T(1) : T(0)));
        });
    }

  private:
    std::vector<Node> nodes_;

    Id make(Tensor<T> y, std::initializer_list<Id> parents, std::function<void(Graph&, Id)> back) {
        bool req = false;
        for (Id p : parents)
            if (p >= 0 && needs_grad(p)) req = true;
        Node n;
        n.own = std::move(y);
        n.needs = req;
        if (req) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return (Id)nodes_.size() - 1;
    }

    Id make_multi(Tensor<T> y, const std::vector<Id>& parents, std::function<void(Graph&, Id)> back) {
        bool req = false;
        for (Id p : parents)
            if (p >= 0 && needs_grad(p)) req = true;
        Node n;
        n.own = std::move(y);
        n.needs = req;
        if (req) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return (Id)nodes_.size() - 1;
    }

    static Tensor<T> im2col(const Tensor<T>& x, int k, int stride, int pad, int ho, int wo) {
        int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
        Tensor<T> col = Tensor<T>::uninit({cin * k * k, ho * wo});
        for (int c = 0; c < cin; ++c)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    T* dst = col.ptr() + ((int64_t)(c * k + ky) * k + kx) * ho * wo;
                    for (int oy = 0; oy < ho; ++oy) {
                        int iy = oy * stride + ky - pad;
                        T* row = dst + (int64_t)oy * wo;
                        if (iy < 0 || iy >= h) {
                            std::fill(row, row + wo, T(0));
                            continue;
                        }
                        const T* src = x.ptr() + ((int64_t)c * h + iy) * w;
                        if (stride == 1) {
                            // contiguous run: ix = ox + kx - pad valid for
                            // ox in [lo, hi)
                            int lo = std::max(0, pad - kx);
                            int hi = std::min(wo, w + pad - kx);
                            for (int ox = 0; ox < lo; ++ox) row[ox] = T(0);
                            if (hi > lo) std::memcpy(row + lo, src + lo + kx - pad, sizeof(T) * (size_t)(hi - lo));
                            for (int ox = hi; ox < wo; ++ox) row[ox] = T(0);
                        } else {
                            for (int ox = 0; ox < wo; ++ox) {
                                int ix = ox * stride + kx - pad;
                                row[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                            }
                        }
                    }
                }
        return col;
    }

    static void col2im_add(const Tensor<T>& col, Tensor<T>& dx, int cin, int h, int w, int k, int stride,
                           int pad, int ho, int wo) {
        using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
        for (int c = 0; c < cin; ++c)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const T* src = col.ptr() + ((int64_t)(c * k + ky) * k + kx) * ho * wo;
                    for (int oy = 0; oy < ho; ++oy) {
                        int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        T* dst = dx.ptr() + ((int64_t)c * h + iy) * w;
                        const T* row = src + (int64_t)oy * wo;
                        if (stride == 1) {
                            int lo = std::max(0, pad - kx);
                            int hi = std::min(wo, w + pad - kx);
                            if (hi > lo)
                                Eigen::Map<Arr>(dst + lo + kx - pad, hi - lo) +=
                                    Eigen::Map<const Arr>(row + lo, hi - lo);
                        } else {
                            for (int ox = 0; ox < wo; ++ox) {
                                int ix = ox * stride + kx - pad;
                                if (ix >= 0 && ix < w) dst[ix] += row[ox];
                            }
                        }
                    }
                }
    }
};

}  // namespace ragdiff
