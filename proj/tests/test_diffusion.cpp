#include "ragdiff/diffusion.hpp"

#include <doctest.h>

#include <cmath>

using namespace ragdiff;

TEST_SUITE_BEGIN("diffusion");

TEST_CASE("linear schedule T=4 matches the cumulative product by definition") {
    NoiseSchedule s = make_schedule(4, ScheduleKind::linear, 0.1, 0.4);
    double want_beta[] = {0.1, 0.2, 0.3, 0.4};
    double want_abar[] = {0.9, 0.72, 0.504, 0.3024};
    for (int t = 1; t <= 4; ++t) {
        CHECK(s.beta[t - 1] == doctest::Approx(want_beta[t - 1]).epsilon(1e-12));
        CHECK(s.alpha_bar[t - 1] == doctest::Approx(want_abar[t - 1]).epsilon(1e-12));
    }
}

TEST_CASE("T=1 schedule: alpha_bar_1 = 1 - beta_1") {
    NoiseSchedule s = make_schedule(1, ScheduleKind::linear, 0.25, 0.25);
    CHECK(s.alpha_bar[0] == doctest::Approx(1 - 0.25).epsilon(1e-15));
}

TEST_CASE("alpha_bar strictly decreasing for valid schedules") {
    for (ScheduleKind kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
        NoiseSchedule s = make_schedule(100, kind, 1e-4, 0.02);
        for (int t = 1; t <= s.T; ++t) {
            CHECK(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
            CHECK(s.beta[t - 1] > 0);
            CHECK(s.beta[t - 1] < 1);
        }
    }
}

TEST_CASE("schedule bounds are rejected") {
    CHECK_THROWS_AS(make_schedule(0, ScheduleKind::linear, 0.1, 0.2), Error);
    CHECK_THROWS_AS(make_schedule(10, ScheduleKind::linear, 0.0, 0.2), Error);
    CHECK_THROWS_AS(make_schedule(10, ScheduleKind::linear, 0.3, 0.2), Error);
    CHECK_THROWS_AS(make_schedule(10, ScheduleKind::linear, 0.1, 1.0), Error);
}

TEST_CASE("forward_noise formula cases") {
    NoiseSchedule s = make_schedule(4, ScheduleKind::linear, 0.1, 0.4);
    Tensor<double> x0({2, 2}, 1.0), zero({2, 2}, 0.0), eps({2, 2}, 1.0);

    // eps = 0 -> x_t = sqrt(abar_t) x0
    auto a = forward_noise(x0, 2, zero, s);
    CHECK(a.x_t[0] == doctest::Approx(std::sqrt(0.72)).epsilon(1e-12));
    // x0 = 0 -> x_t = sqrt(1-abar_t) eps
    auto b = forward_noise(zero, 2, eps, s);
    CHECK(b.x_t[0] == doctest::Approx(std::sqrt(1 - 0.72)).epsilon(1e-12));
    CHECK_THROWS_AS(forward_noise(x0, 5, eps, s), Error);
    Tensor<double> wrong({3, 2});
    CHECK_THROWS_AS(forward_noise(x0, 2, wrong, s), Error);
}

TEST_CASE("scalar substitution: abar=0.25, x0=1, eps=1") {
    // schedule with abar_1 = 0.25
    NoiseSchedule s = make_schedule(1, ScheduleKind::linear, 0.75, 0.75);
    Tensor<double> x0({1}, 1.0), eps({1}, 1.0);
    auto ns = forward_noise(x0, 1, eps, s);
    CHECK(ns.x_t[0] == doctest::Approx(0.5 + std::sqrt(0.75)).epsilon(1e-12));
}

TEST_CASE("recover_x0 inverts forward_noise to 1e-6 at every t") {
    NoiseSchedule s = make_schedule(1000, ScheduleKind::linear, 1e-4, 0.02);
    RandomStream rs(5);
    Tensor<double> x0 = rs.normal_tensor<double>({3, 4, 4}, 0.5);
    for (int t = 1; t <= s.T; t += 37) {
        Tensor<double> eps = rs.normal_tensor<double>({3, 4, 4});
        auto ns = forward_noise(x0, t, eps, s);
        Tensor<double> rec = recover_x0(ns.x_t, eps, t, s, false);
        CHECK(max_abs_diff(rec, x0) < 1e-6);
    }
    // final t as well
    Tensor<double> eps = rs.normal_tensor<double>({3, 4, 4});
    auto ns = forward_noise(x0, s.T, eps, s);
    CHECK(max_abs_diff(recover_x0(ns.x_t, eps, s.T, s, false), x0) < 1e-6);
}

TEST_CASE("recover_x0 fixed substitutions and clamping flag") {
    NoiseSchedule s = make_schedule(4, ScheduleKind::linear, 0.1, 0.4);
    int t = 3;
    double ab = s.alpha_bar_at(t);
    Tensor<double> zero({1}, 0.0);
    // eps_pred = 0 -> x_t / sqrt(abar)
    Tensor<double> xt({1}, 0.7);
    CHECK(recover_x0(xt, zero, t, s, false)[0] == doctest::Approx(0.7 / std::sqrt(ab)).epsilon(1e-12));
    // x_t = 2 sqrt(1-abar), eps_pred = 1 -> sqrt(1-abar)/sqrt(abar)
    Tensor<double> xt2({1}, 2 * std::sqrt(1 - ab));
    Tensor<double> one({1}, 1.0);
    CHECK(recover_x0(xt2, one, t, s, false)[0] ==
          doctest::Approx(std::sqrt(1 - ab) / std::sqrt(ab)).epsilon(1e-12));
    // clamping on caps to [-1, 1]
    Tensor<double> big({1}, 50.0);
    CHECK(recover_x0(big, zero, t, s, true)[0] == 1.0);
}

TEST_CASE("ddpm_step final step collapses to x0_hat exactly") {
    NoiseSchedule s = make_schedule(10, ScheduleKind::linear, 1e-4, 0.02);
    DdpmCoeffs c = ddpm_coeffs(s, 1);
    CHECK(c.c_x0 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(c.c_xt == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(c.c_noise == doctest::Approx(0.0).epsilon(1e-12));

    RandomStream rs(7);
    Tensor<double> x_t = rs.normal_tensor<double>({3, 2, 2});
    Tensor<double> x0_hat = rs.normal_tensor<double>({3, 2, 2});
    Tensor<double> out = ddpm_step(x_t, x0_hat, 1, Tensor<double>(), s);
    for (int64_t i = 0; i < out.numel(); ++i)
        CHECK(out[i] == doctest::Approx(x0_hat[i]).epsilon(1e-15));
}

TEST_CASE("ddpm_step perfect-prediction consistency: x0_hat = x_t at abar ~ 1 returns x_t") {
    NoiseSchedule s = make_schedule(1000, ScheduleKind::linear, 1e-4, 0.02);
    // at t=2 coefficients sum applied to identical inputs: c_x0 + c_xt ~ 1
    for (int t : {2, 100, 1000}) {
        DdpmCoeffs c = ddpm_coeffs(s, t);
        Tensor<double> v({4}, 0.37);
        Tensor<double> zero({4}, 0.0);
        Tensor<double> out = ddpm_step(v, v, t, zero, s);
        // (sqrt(abar_{t-1}) beta + sqrt(alpha)(1-abar_{t-1})) / (1-abar) == coefficient identity
        double combined = c.c_x0 + c.c_xt;
        for (int64_t i = 0; i < out.numel(); ++i)
            CHECK(out[i] == doctest::Approx(0.37 * combined).epsilon(1e-12));
        if (t == 2) CHECK(combined == doctest::Approx(1.0).epsilon(1e-6));
    }
}

// Analytic Gaussian data: x0 ~ N(mu, sigma^2) per element. The posterior-mean
// noise predictor has the closed form
//   eps*(x_t, t) = sqrt(1-abar) (x_t - sqrt(abar) mu) / (abar sigma^2 + 1 - abar).
namespace {
double eps_star(double x, double ab, double mu, double sigma) {
    return std::sqrt(1 - ab) * (x - std::sqrt(ab) * mu) / (ab * sigma * sigma + 1 - ab);
}
}  // namespace

TEST_CASE("closed-form eps* matches a brute-force discretized posterior") {
    // E[eps | x_t] = (x_t - sqrt(ab) E[x0|x_t]) / sqrt(1-ab) with E[x0|x_t]
    // computed by quadrature over the prior-times-likelihood density
    double mu = 0.3, sigma = 0.8;
    for (double ab : {0.95, 0.5, 0.11, 0.004}) {
        for (double x : {-1.2, 0.0, 0.6, 2.3}) {
            double num = 0, den = 0;
            int n = 20001;
            for (int i = 0; i < n; ++i) {
                double x0 = mu - 8 * sigma + 16.0 * sigma * i / (n - 1);
                double like = std::exp(-0.5 * (x - std::sqrt(ab) * x0) * (x - std::sqrt(ab) * x0) / (1 - ab));
                double prior = std::exp(-0.5 * (x0 - mu) * (x0 - mu) / (sigma * sigma));
                num += x0 * like * prior;
                den += like * prior;
            }
            double post_mean = num / den;
            double eps_brute = (x - std::sqrt(ab) * post_mean) / std::sqrt(1 - ab);
            CHECK(eps_star(x, ab, mu, sigma) == doctest::Approx(eps_brute).epsilon(1e-6));
        }
    }
}

TEST_CASE("analytic Gaussian chain reaches the data distribution at T in {64,256,1000}") {
    const double mu = 0.3, sigma = 0.8;
    const int n_chains = 2000, dim = 16;
    for (int T : {64, 256, 1000}) {
        NoiseSchedule s = make_schedule(T, ScheduleKind::linear, 1e-4, 0.02);
        RandomStream rs(1234 + (uint64_t)T);
        double sum = 0, sum_sq = 0;
        int64_t count = 0;
        for (int chain = 0; chain < n_chains; ++chain) {
            // start from the true forward marginal at t = T
            double ab_T = s.alpha_bar_at(T);
            double sd_T = std::sqrt(ab_T * sigma * sigma + 1 - ab_T);
            Tensor<double> x({dim});
            for (int i = 0; i < dim; ++i) x[i] = std::sqrt(ab_T) * mu + sd_T * rs.normal();
            for (int t = T; t >= 1; --t) {
                double ab = s.alpha_bar_at(t);
                Tensor<double> eps_pred({dim});
                for (int i = 0; i < dim; ++i) eps_pred[i] = eps_star(x[i], ab, mu, sigma);
                Tensor<double> x0_hat = recover_x0(x, eps_pred, t, s, /*clamp=*/false);
                Tensor<double> noise({dim});
                if (t > 1) rs.fill_normal(noise);
                x = ddpm_step(x, x0_hat, t, noise, s);
            }
            for (int i = 0; i < dim; ++i) {
                sum += x[i];
                sum_sq += x[i] * x[i];
                ++count;
            }
        }
        double mean = sum / (double)count;
        double var = sum_sq / (double)count - mean * mean;
        INFO("T=", T, " mean=", mean, " var=", var);
        CHECK(std::abs(mean - mu) < 0.05 * sigma);
        CHECK(std::abs(var - sigma * sigma) < 0.10 * sigma * sigma);
    }
}

TEST_CASE("strided sub-schedule keeps chain invariants and parent timesteps") {
    NoiseSchedule parent = make_schedule(1000, ScheduleKind::linear, 1e-4, 0.02);
    for (int steps : {32, 128, 256}) {
        NoiseSchedule sub = strided_schedule(parent, steps);
        CHECK(sub.T == steps);
        CHECK(sub.model_t(steps) == 1000);  // covers the full chain
        CHECK(sub.alpha_bar_at(steps) == doctest::Approx(parent.alpha_bar_at(1000)).epsilon(1e-15));
        validate_schedule(sub);
        // re-indexed alpha_bar comes straight from the parent
        for (int j = 1; j <= steps; ++j)
            CHECK(sub.alpha_bar_at(j) == doctest::Approx(parent.alpha_bar_at(sub.model_t(j))).epsilon(1e-15));
    }
}

TEST_CASE("training_loss: perfect predictor gives zero") {
    NoiseSchedule s = make_schedule(50, ScheduleKind::linear, 1e-4, 0.02);
    RandomStream data_rs(3);
    Tensor<double> x0 = data_rs.normal_tensor<double>({3, 4, 4}, 0.4);
    // the model sees x_t; recover the eps used from x_t and x0
    auto perfect = [&](const Tensor<double>& x_t, int t) {
        double ab = s.alpha_bar_at(t);
        Tensor<double> eps(x_t.shape);
        for (int64_t i = 0; i < eps.numel(); ++i)
            eps[i] = (x_t[i] - std::sqrt(ab) * x0[i]) / std::sqrt(1 - ab);
        return eps;
    };
    RandomStream rs(11);
    double loss = training_loss(x0, perfect, s, rs);
    CHECK(loss < 1e-12);
}

TEST_CASE("training_loss: zero predictor on zero data reduces to (1-abar)/abar") {
    // with x0 = 0 and eps_pred = 0: x0_hat = x_t/sqrt(ab), x_t = sqrt(1-ab) eps
    // so the per-element expectation at fixed t is (1-ab)/ab; probe via a
    // single-step schedule where t is forced
    NoiseSchedule s = make_schedule(1, ScheduleKind::linear, 0.4, 0.4);
    double ab = s.alpha_bar_at(1);
    Tensor<double> x0({1, 64, 64}, 0.0);
    auto zero_model = [&](const Tensor<double>& x_t, int) { return Tensor<double>(x_t.shape, 0.0); };
    double acc = 0;
    int reps = 200;
    RandomStream rs(21);
    for (int r = 0; r < reps; ++r) acc += training_loss(x0, zero_model, s, rs);
    acc /= reps;
    double want = (1 - ab) / ab;
    CHECK(acc == doctest::Approx(want).epsilon(0.05));
}

TEST_CASE("training_loss: fixed seed reproduces exactly") {
    NoiseSchedule s = make_schedule(100, ScheduleKind::linear, 1e-4, 0.02);
    Tensor<double> x0 = RandomStream(9).normal_tensor<double>({3, 4, 4}, 0.3);
    auto model = [&](const Tensor<double>& x_t, int) {
        Tensor<double> out(x_t.shape);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = 0.9 * x_t[i];
        return out;
    };
    RandomStream a(77), b(77);
    CHECK(training_loss(x0, model, s, a) == training_loss(x0, model, s, b));
}

TEST_CASE("forward-marginal statistics match the schedule") {
    NoiseSchedule s = make_schedule(100, ScheduleKind::linear, 1e-3, 0.05);
    int t = 60;
    double ab = s.alpha_bar_at(t);
    Tensor<double> x0({16}, 0.5);
    RandomStream rs(13);
    int draws = 10000;
    double sum = 0, sum_sq = 0;
    for (int i = 0; i < draws; ++i) {
        Tensor<double> eps = rs.normal_tensor<double>({16});
        auto ns = forward_noise(x0, t, eps, s);
        for (int j = 0; j < 16; ++j) {
            double centered = ns.x_t[j] - std::sqrt(ab) * 0.5;
            sum += ns.x_t[j];
            sum_sq += centered * centered;
        }
    }
    int64_t n = (int64_t)draws * 16;
    double mean = sum / (double)n;
    double var = sum_sq / (double)n;
    double se = std::sqrt((1 - ab) / (double)n);
    CHECK(std::abs(mean - std::sqrt(ab) * 0.5) < 3 * se);
    CHECK(std::abs(var - (1 - ab)) < 0.05 * (1 - ab));
}

TEST_SUITE_END();
