#pragma once

#include "ragdiff/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace ragdiff {

/// Adam with bias correction and optional global-norm gradient clipping.
/// Operates on a flat gradient laid out to match the parameter entries.
class AdamOptimizer {
  public:
    AdamOptimizer(int64_t total_size, double lr, double clip_norm = 0.0)
        : lr_(lr), clip_norm_(clip_norm), m_((size_t)total_size, 0.0f), v_((size_t)total_size, 0.0f) {}

    /// Applies one update. `apply` is called per flat index with the update
    /// delta to subtract; the caller owns the parameter layout.
    template <typename ParamAt>
    void step(const std::vector<float>& grad, ParamAt&& param_at) {
        ++t_;
        double scale = 1.0;
        if (clip_norm_ > 0) {
            double norm_sq = 0;
            for (float g : grad) norm_sq += (double)g * (double)g;
            double norm = std::sqrt(norm_sq);
            if (norm > clip_norm_) scale = clip_norm_ / norm;
        }
        double bc1 = 1.0 - std::pow(kBeta1, (double)t_);
        double bc2 = 1.0 - std::pow(kBeta2, (double)t_);
        for (size_t i = 0; i < grad.size(); ++i) {
            double g = (double)grad[i] * scale;
            m_[i] = (float)(kBeta1 * m_[i] + (1 - kBeta1) * g);
            v_[i] = (float)(kBeta2 * v_[i] + (1 - kBeta2) * g * g);
            double mh = m_[i] / bc1, vh = v_[i] / bc2;
            param_at(i) -= (float)(lr_ * mh / (std::sqrt(vh) + kEps));
        }
    }

    int64_t steps_taken() const { return t_; }

  private:
    static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    double lr_, clip_norm_;
    int64_t t_ = 0;
    std::vector<float> m_, v_;
};

}  // namespace ragdiff
