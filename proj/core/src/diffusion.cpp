#include "ragdiff/diffusion.hpp"

#include <cmath>

namespace ragdiff {

NoiseSchedule make_schedule(int T, ScheduleKind kind, double beta_start, double beta_end) {
    require(T >= 1, kUsageError, "make_schedule: T must be >= 1");
    NoiseSchedule s;
    s.T = T;
    s.kind = kind;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.resize((size_t)T);
    if (kind == ScheduleKind::linear) {
        require(beta_start > 0 && beta_start <= beta_end && beta_end < 1, kUsageError,
                "make_schedule: need 0 < beta_start <= beta_end < 1");
        for (int t = 1; t <= T; ++t)
            s.beta[(size_t)(t - 1)] =
                T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (double)(t - 1) / (double)(T - 1);
    } else {
        // squared-cosine alpha_bar; beta_start/beta_end are ignored for this kind
        const double offs = 0.008;
        auto ab = [&](double u) {
            double v = std::cos((u + offs) / (1.0 + offs) * M_PI / 2.0);
            return v * v;
        };
        double ab0 = ab(0.0), prev = 1.0;
        for (int t = 1; t <= T; ++t) {
            double cur = ab((double)t / (double)T) / ab0;
            double beta = 1.0 - cur / prev;
            s.beta[(size_t)(t - 1)] = std::min(beta, 0.999);
            prev = cur;
        }
    }
    s.alpha.resize((size_t)T);
    s.alpha_bar.resize((size_t)T);
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        s.alpha[(size_t)(t - 1)] = 1.0 - s.beta[(size_t)(t - 1)];
        prod *= s.alpha[(size_t)(t - 1)];
        s.alpha_bar[(size_t)(t - 1)] = prod;
    }
    validate_schedule(s);
    return s;
}

NoiseSchedule strided_schedule(const NoiseSchedule& parent, int steps) {
    require(steps >= 1 && steps <= parent.T, kUsageError, "strided_schedule: steps out of range");
    if (steps == parent.T && parent.parent_t.empty()) return parent;
    NoiseSchedule s;
    s.T = steps;
    s.kind = parent.kind;
    s.beta_start = parent.beta_start;
    s.beta_end = parent.beta_end;
    s.parent_t.resize((size_t)steps);
    s.beta.resize((size_t)steps);
    s.alpha.resize((size_t)steps);
    s.alpha_bar.resize((size_t)steps);
    double prev_ab = 1.0;
    for (int j = 1; j <= steps; ++j) {
        // even stride covering the full chain and ending at the parent's T
        int tau = (int)(((int64_t)j * parent.T) / steps);
        double ab = parent.alpha_bar_at(tau);
        s.parent_t[(size_t)(j - 1)] = parent.model_t(tau);
        s.alpha_bar[(size_t)(j - 1)] = ab;
        s.alpha[(size_t)(j - 1)] = ab / prev_ab;
        s.beta[(size_t)(j - 1)] = 1.0 - ab / prev_ab;
        prev_ab = ab;
    }
    validate_schedule(s);
    return s;
}

void validate_schedule(const NoiseSchedule& s) {
    require(s.T >= 1 && (int)s.beta.size() == s.T, kDataError, "schedule: bad size");
    double prev = 1.0;
    for (int t = 1; t <= s.T; ++t) {
        double b = s.beta[(size_t)(t - 1)];
        require(b > 0.0 && b < 1.0, kDataError, "schedule: beta out of (0,1)");
        double ab = s.alpha_bar[(size_t)(t - 1)];
        require(ab < prev, kDataError, "schedule: alpha_bar not strictly decreasing");
        double rel = std::abs(ab - s.alpha[(size_t)(t - 1)] * prev) / ab;
        require(rel < 1e-12, kDataError, "schedule: alpha_bar recursion violated");
        prev = ab;
    }
}

}  // namespace ragdiff
