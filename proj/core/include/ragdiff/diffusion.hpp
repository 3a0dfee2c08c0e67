#pragma once

#include "ragdiff/error.hpp"
#include "ragdiff/rng.hpp"
#include "ragdiff/tensor.hpp"

#include <functional>
#include <vector>

namespace ragdiff {

enum class ScheduleKind { linear, cosine };

/// Per-step noise variances beta_t and the cumulative signal-retention
/// products alpha_bar_t of the forward Markov chain. Arrays are stored at
/// index t-1 for step t in [1, T]; alpha_bar_0 == 1 by convention.
struct NoiseSchedule {
    int T = 0;
    ScheduleKind kind = ScheduleKind::linear;
    double beta_start = 0, beta_end = 0;
    std::vector<double> beta;       // beta_t
    std::vector<double> alpha;      // 1 - beta_t
    std::vector<double> alpha_bar;  // prod_{s<=t} alpha_s

    double alpha_bar_at(int t) const { return t == 0 ? 1.0 : alpha_bar[(size_t)(t - 1)]; }

    /// Model-facing timestep for schedule index t (differs from t only for
    /// strided sub-schedules, which keep the parent chain's timesteps).
    int model_t(int t) const { return parent_t.empty() ? t : parent_t[(size_t)(t - 1)]; }

    std::vector<int> parent_t;  // empty for a base schedule
};

NoiseSchedule make_schedule(int T, ScheduleKind kind, double beta_start = 1e-4, double beta_end = 0.02);

/// Evenly strided sub-schedule with `steps` entries; alpha_bar is re-indexed
/// from the parent and per-step betas recomputed so the chain invariants hold.
NoiseSchedule strided_schedule(const NoiseSchedule& parent, int steps);

void validate_schedule(const NoiseSchedule& s);

template <typename T>
struct NoisedSample {
    Tensor<T> x_t;
    int t = 0;
    Tensor<T> eps;
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename T>
NoisedSample<T> forward_noise(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
    require(t >= 1 && t <= s.T, kUsageError, "forward_noise: t out of range");
    require(x0.same_shape(eps), kUsageError, "forward_noise: x0/eps shape mismatch");
    double ab = s.alpha_bar_at(t);
    T ca = (T)std::sqrt(ab), cb = (T)std::sqrt(1.0 - ab);
    NoisedSample<T> out{Tensor<T>(x0.shape), t, eps};
    for (int64_t i = 0; i < x0.numel(); ++i) out.x_t[i] = ca * x0[i] + cb * eps[i];
    return out;
}

// x0_hat = (x_t - sqrt(1 - abar_t) eps_pred) / sqrt(abar_t)
template <typename T>
Tensor<T> recover_x0(const Tensor<T>& x_t, const Tensor<T>& eps_pred, int t, const NoiseSchedule& s,
                     bool clamp_unit = false) {
    require(t >= 1 && t <= s.T, kUsageError, "recover_x0: t out of range");
    double ab = s.alpha_bar_at(t);
    T cb = (T)std::sqrt(1.0 - ab), inv = (T)(1.0 / std::sqrt(ab));
    Tensor<T> out(x_t.shape);
    for (int64_t i = 0; i < x_t.numel(); ++i) {
        T v = (x_t[i] - cb * eps_pred[i]) * inv;
        if (clamp_unit) v = std::min<T>(T(1), std::max<T>(T(-1), v));
        out[i] = v;
    }
    return out;
}

struct DdpmCoeffs {
    double c_x0, c_xt, c_noise;
};

inline DdpmCoeffs ddpm_coeffs(const NoiseSchedule& s, int t) {
    require(t >= 1 && t <= s.T, kUsageError, "ddpm_coeffs: t out of range");
    // at t=1 the formulas collapse exactly (1 - abar_1 = beta_1, abar_0 = 1)
    if (t == 1) return {1.0, 0.0, 0.0};
    double ab = s.alpha_bar_at(t), ab_prev = s.alpha_bar_at(t - 1);
    double beta = s.beta[(size_t)(t - 1)], alpha = s.alpha[(size_t)(t - 1)];
    double denom = 1.0 - ab;
    return {std::sqrt(ab_prev) * beta / denom, std::sqrt(alpha) * (1.0 - ab_prev) / denom,
            std::sqrt((1.0 - ab_prev) * beta) / std::sqrt(denom)};
}

// One reverse step; the injected noise is ignored at t=1 (final step collapses
// to x0_hat exactly).
template <typename T>
Tensor<T> ddpm_step(const Tensor<T>& x_t, const Tensor<T>& x0_hat, int t, const Tensor<T>& noise,
                    const NoiseSchedule& s) {
    DdpmCoeffs c = ddpm_coeffs(s, t);
    Tensor<T> out(x_t.shape);
    if (t == 1) {
        for (int64_t i = 0; i < x_t.numel(); ++i) out[i] = (T)c.c_x0 * x0_hat[i] + (T)c.c_xt * x_t[i];
        return out;
    }
    require(noise.same_shape(x_t), kUsageError, "ddpm_step: noise shape mismatch");
    for (int64_t i = 0; i < x_t.numel(); ++i)
        out[i] = (T)c.c_x0 * x0_hat[i] + (T)c.c_xt * x_t[i] + (T)c.c_noise * noise[i];
    return out;
}

/// Denoising training objective: t ~ U[1, T], eps ~ N(0, I),
/// loss = w_t * mean((x0_hat(x_t, c) - x0)^2) with w_t fixed to 1.
/// `model` maps (x_t, t) -> eps prediction under the caller's conditioning.
template <typename T, typename Model>
T training_loss(const Tensor<T>& x0, Model&& model, const NoiseSchedule& s, RandomStream& rs) {
    int t = (int)rs.uniform_int(1, s.T);
    Tensor<T> eps(x0.shape);
    rs.fill_normal(eps);
    NoisedSample<T> ns = forward_noise(x0, t, eps, s);
    Tensor<T> eps_pred = model(ns.x_t, t);
    require(eps_pred.same_shape(x0), kUsageError, "training_loss: model output shape mismatch");
    Tensor<T> x0_hat = recover_x0(ns.x_t, eps_pred, t, s, /*clamp_unit=*/false);
    double acc = 0;
    for (int64_t i = 0; i < x0.numel(); ++i) {
        double d = (double)x0_hat[i] - (double)x0[i];
        acc += d * d;
    }
    T loss = (T)(acc / (double)x0.numel());
    require(std::isfinite((double)loss), kDataError, "training_loss: non-finite loss");
    return loss;
}

}  // namespace ragdiff
