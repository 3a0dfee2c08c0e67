#pragma once

#include "ragdiff/denoiser.hpp"
#include "ragdiff/diffusion.hpp"

#include <map>
#include <string>
#include <vector>

namespace ragdiff::testutil {

/// Training loss of one example in any precision, with per-entry parameter
/// gradients on request (mirrors the float trainer path).
template <typename T>
T model_loss(const Denoiser<T>& model, const Tensor<T>& x0, const Conditioning<T>& cond, int t,
             const Tensor<T>& eps, const NoiseSchedule& schedule,
             std::map<int, Tensor<T>>* grads_out = nullptr) {
    NoisedSample<T> ns = forward_noise(x0, t, eps, schedule);
    double ab = schedule.alpha_bar_at(t);
    T c1 = (T)(1.0 / std::sqrt(ab));
    T c2 = (T)(-std::sqrt(1.0 - ab) / std::sqrt(ab));
    Graph<T> g;
    typename Denoiser<T>::BuildCtx ctx{g, &model, {}, grads_out != nullptr};
    auto x_in = g.input(model.make_input(ns.x_t, cond));
    auto eps_pred = model.build_predict_eps(ctx, x_in, cond, t);
    auto x0_hat = g.lincomb(g.input(ns.x_t), eps_pred, c1, c2);
    auto loss = g.mse_loss(x0_hat, x0);
    T value = g.val(loss)[0];
    if (grads_out) {
        g.backward(loss);
        for (const auto& [entry, node] : ctx.param_nodes)
            if (g.has_grad(node)) (*grads_out)[entry] = g.grad(node);
    }
    return value;
}

struct BlockCheckResult {
    std::string name;
    double analytic = 0, fd = 0, rel_err = 0;
    bool touched = false;
};

/// Directional finite-difference check per parameter block: a seeded unit
/// direction v restricted to the block, central difference at step h against
/// the analytic directional derivative <grad, v>.
template <typename T>
std::vector<BlockCheckResult> gradcheck_model(Denoiser<T>& model, const Tensor<T>& x0,
                                              const Conditioning<T>& cond, int t, const Tensor<T>& eps,
                                              const NoiseSchedule& schedule, double h, uint64_t seed) {
    std::map<int, Tensor<T>> grads;
    model_loss(model, x0, cond, t, eps, schedule, &grads);

    std::vector<BlockCheckResult> results;
    for (int entry = 0; entry < model.params().count(); ++entry) {
        BlockCheckResult r;
        r.name = model.params().entry(entry).name;
        auto it = grads.find(entry);
        if (it == grads.end()) {
            results.push_back(r);  // block not touched by this conditioning
            continue;
        }
        r.touched = true;
        Tensor<T>& value = model.params().value(entry);
        RandomStream rs = RandomStream::derive(seed, "gradcheck/" + r.name);
        Tensor<T> dir(value.shape);
        rs.fill_normal(dir);
        double norm = 0;
        for (int64_t i = 0; i < dir.numel(); ++i) norm += (double)dir[i] * (double)dir[i];
        norm = std::sqrt(norm);
        for (int64_t i = 0; i < dir.numel(); ++i) dir[i] = (T)((double)dir[i] / norm);

        double an = 0;
        for (int64_t i = 0; i < dir.numel(); ++i) an += (double)it->second[i] * (double)dir[i];

        Tensor<T> saved = value;
        for (int64_t i = 0; i < value.numel(); ++i) value[i] = saved[i] + (T)(h * (double)dir[i]);
        double up = (double)model_loss(model, x0, cond, t, eps, schedule);
        for (int64_t i = 0; i < value.numel(); ++i) value[i] = saved[i] - (T)(h * (double)dir[i]);
        double down = (double)model_loss(model, x0, cond, t, eps, schedule);
        value = saved;

        r.fd = (up - down) / (2 * h);
        r.analytic = an;
        r.rel_err = std::abs(r.fd - an) / std::max({std::abs(r.fd), std::abs(an), 1e-10});
        results.push_back(r);
    }
    return results;
}

/// Every parameter randomized so no path is inactive during checks.
template <typename T>
void randomize_all_params(Denoiser<T>& model, uint64_t seed, double scale = 0.15) {
    for (int i = 0; i < model.params().count(); ++i) {
        RandomStream rs = RandomStream::derive(seed, "rand/" + model.params().entry(i).name);
        rs.fill_normal(model.params().value(i), scale);
    }
}

template <typename T>
Conditioning<T> micro_conditioning(int vocab, int side, uint64_t seed, int k, bool with_lowres) {
    RandomStream rs(seed);
    Conditioning<T> cond;
    cond.text = {(int)rs.uniform_int(0, vocab - 1), (int)rs.uniform_int(0, vocab - 1),
                 (int)rs.uniform_int(0, vocab - 1)};
    for (int i = 0; i < k; ++i) {
        NeighborInput<T> n;
        n.image = rs.normal_tensor<T>({3, side, side}, 0.4);
        n.text = {(int)rs.uniform_int(0, vocab - 1), (int)rs.uniform_int(0, vocab - 1)};
        cond.neighbors.push_back(std::move(n));
    }
    if (with_lowres) cond.lowres = rs.normal_tensor<T>({3, side / 2, side / 2}, 0.4);
    return cond;
}

}  // namespace ragdiff::testutil
