#include "ragdiff/guidance.hpp"

#include "ragdiff/rng.hpp"

#include <fstream>
#include <memory>

namespace ragdiff {

const char* guidance_mode_name(GuidanceMode m) {
    switch (m) {
        case GuidanceMode::standard: return "standard";
        case GuidanceMode::joint: return "joint";
        case GuidanceMode::weighted: return "weighted";
        case GuidanceMode::interleaved: return "interleaved";
    }
    return "?";
}

GuidanceMode guidance_mode_from(const std::string& name) {
    if (name == "standard") return GuidanceMode::standard;
    if (name == "joint") return GuidanceMode::joint;
    if (name == "weighted") return GuidanceMode::weighted;
    if (name == "interleaved") return GuidanceMode::interleaved;
    raise_usage("unknown guidance mode: " + name);
}

void GuidanceConfig::validate(const NoiseSchedule& schedule) const {
    require(eta >= 0.0 && eta <= 1.0, kUsageError, "guidance: eta must be in [0,1]");
    require(lambda_mix >= 0.0 && lambda_mix <= 1.0, kUsageError, "guidance: lambda_mix must be in [0,1]");
    require(steps >= 1 && steps <= schedule.T, kUsageError, "guidance: steps must be in [1, T]");
    require(std::isfinite(w) && std::isfinite(w_p) && std::isfinite(w_n), kUsageError,
            "guidance: weights must be finite");
}

EpsFn make_eps_fn(const Denoiser<float>& model, const Conditioning<float>& cond) {
    auto encoded = std::make_shared<std::vector<Tensor<float>>>();
    if (!cond.drop_neighbors && !cond.neighbors.empty()) *encoded = model.encode_neighbors(cond.neighbors);
    auto base = std::make_shared<Conditioning<float>>(cond);
    return [&model, base, encoded](const Tensor<float>& x_t, int t, bool drop_text, bool drop_neighbors) {
        Conditioning<float> c = *base;
        c.drop_text = base->drop_text || drop_text;
        c.drop_neighbors = base->drop_neighbors || drop_neighbors;
        const std::vector<Tensor<float>>* enc =
            (!c.drop_neighbors && !encoded->empty()) ? encoded.get() : nullptr;
        return model.predict_eps(x_t, c, t, enc);
    };
}

namespace {

Tensor<float> combine(const Tensor<float>& a, const Tensor<float>& b, double wa, double wb) {
    Tensor<float> out(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = (float)wa * a[i] + (float)wb * b[i];
    return out;
}

}  // namespace

Tensor<float> guided_eps_standard(const EpsFn& fn, const Tensor<float>& x_t, int t, double w) {
    Tensor<float> cond = fn(x_t, t, false, false);
    Tensor<float> uncond = fn(x_t, t, true, true);
    return combine(cond, uncond, w, -(w - 1.0));
}

Tensor<float> guided_eps_text(const EpsFn& fn, const Tensor<float>& x_t, int t, double w_p) {
    Tensor<float> joint = fn(x_t, t, false, false);
    Tensor<float> neighbors_only = fn(x_t, t, true, false);
    return combine(joint, neighbors_only, w_p, -(w_p - 1.0));
}

Tensor<float> guided_eps_neighbor(const EpsFn& fn, const Tensor<float>& x_t, int t, double w_n) {
    Tensor<float> joint = fn(x_t, t, false, false);
    Tensor<float> text_only = fn(x_t, t, false, true);
    return combine(joint, text_only, w_n, -(w_n - 1.0));
}

int SampleTrace::count_branch(char b) const {
    int n = 0;
    for (const auto& s : steps)
        if (s.branch == b) ++n;
    return n;
}

void SampleTrace::save(const std::string& path) const {
    std::ofstream out(path);
    require((bool)out, kDataError, "cannot write trace: " + path);
    for (const auto& s : steps) out << s.t << '\t' << s.branch << '\n';
}

std::pair<Tensor<float>, SampleTrace> sample_chain(const EpsFn& fn, const NoiseSchedule& schedule,
                                                   const GuidanceConfig& cfg, int side) {
    cfg.validate(schedule);
    NoiseSchedule sub = cfg.steps < schedule.T ? strided_schedule(schedule, cfg.steps) : schedule;

    RandomStream noise = RandomStream::derive(cfg.seed, "sample/noise");
    RandomStream branch = RandomStream::derive(cfg.seed, "sample/branch");

    Tensor<float> x = noise.normal_tensor<float>({3, side, side});
    SampleTrace trace;
    trace.steps.reserve((size_t)sub.T);

    for (int j = sub.T; j >= 1; --j) {
        int t_model = sub.model_t(j);
        Tensor<float> eps_hat;
        char tag = 0;
        switch (cfg.mode) {
            case GuidanceMode::standard:
                eps_hat = guided_eps_standard(fn, x, t_model, cfg.w);
                tag = 's';
                break;
            case GuidanceMode::joint:
                eps_hat = fn(x, t_model, false, false);
                tag = 'j';
                break;
            case GuidanceMode::weighted: {
                Tensor<float> p = guided_eps_text(fn, x, t_model, cfg.w_p);
                Tensor<float> n = guided_eps_neighbor(fn, x, t_model, cfg.w_n);
                eps_hat = combine(p, n, cfg.lambda_mix, 1.0 - cfg.lambda_mix);
                tag = 'w';
                break;
            }
            case GuidanceMode::interleaved: {
                double r = branch.uniform();
                if (r < cfg.eta) {
                    eps_hat = guided_eps_text(fn, x, t_model, cfg.w_p);
                    tag = 'p';
                } else {
                    eps_hat = guided_eps_neighbor(fn, x, t_model, cfg.w_n);
                    tag = 'n';
                }
                break;
            }
        }
        trace.steps.push_back({t_model, tag});
        Tensor<float> x0_hat = recover_x0(x, eps_hat, j, sub, /*clamp_unit=*/true);
        Tensor<float> step_noise;
        if (j > 1) step_noise = noise.normal_tensor<float>({3, side, side});
        x = ddpm_step(x, x0_hat, j, step_noise, sub);
    }
    return {std::move(x), std::move(trace)};
}

std::pair<Tensor<float>, SampleTrace> sample(const Denoiser<float>& model, const Conditioning<float>& cond,
                                             const NoiseSchedule& schedule, const GuidanceConfig& cfg) {
    if (cfg.mode != GuidanceMode::standard)
        require(!cond.neighbors.empty() || cond.drop_neighbors, kUsageError,
                "sample: neighbor-dependent guidance mode without retrieved neighbors");
    EpsFn fn = make_eps_fn(model, cond);
    return sample_chain(fn, schedule, cfg, model.arch().image_size);
}

Tensor<float> sample_cascade(const Denoiser<float>& base_model, const Denoiser<float>& sr_model,
                             const Conditioning<float>& cond, const NoiseSchedule& base_schedule,
                             const NoiseSchedule& sr_schedule, const GuidanceConfig& base_cfg,
                             const GuidanceConfig& sr_cfg) {
    require(sr_model.arch().kind == "super_resolution", kUsageError, "sample_cascade: second model must be SR");
    require(sr_model.arch().image_size == 2 * base_model.arch().image_size, kUsageError,
            "sample_cascade: stage resolution mismatch");
    auto [low, trace] = sample(base_model, cond, base_schedule, base_cfg);
    Conditioning<float> sr_cond = cond;
    sr_cond.lowres = low;
    auto [high, sr_trace] = sample(sr_model, sr_cond, sr_schedule, sr_cfg);
    return high;
}

}  // namespace ragdiff
