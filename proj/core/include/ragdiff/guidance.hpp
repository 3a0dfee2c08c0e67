#pragma once

#include "ragdiff/denoiser.hpp"
#include "ragdiff/diffusion.hpp"

#include <functional>
#include <string>
#include <vector>

namespace ragdiff {

enum class GuidanceMode { standard, joint, weighted, interleaved };

const char* guidance_mode_name(GuidanceMode m);
GuidanceMode guidance_mode_from(const std::string& name);

struct GuidanceConfig {
    GuidanceMode mode = GuidanceMode::interleaved;
    double w = 30.0;    // standard classifier-free guidance weight
    double w_p = 30.0;  // text guidance weight
    double w_n = 30.0;  // neighbor guidance weight
    double eta = 0.5;   // interleave ratio (text branch probability)
    double lambda_mix = 0.5;
    int steps = 256;
    uint64_t seed = 0;

    void validate(const NoiseSchedule& schedule) const;
};

/// Noise prediction under toggled condition drops; everything else about the
/// conditioning is fixed inside the closure.
using EpsFn =
    std::function<Tensor<float>(const Tensor<float>& x_t, int t, bool drop_text, bool drop_neighbors)>;

/// Wraps a denoiser and conditioning bundle; neighbor encodings are computed
/// once and reused across all steps and drop variants.
EpsFn make_eps_fn(const Denoiser<float>& model, const Conditioning<float>& cond);

// Adjusted epsilon predictions. All collapse identities (w = 1, w_p = 1,
// w_n = 1) hold bit-exactly.
Tensor<float> guided_eps_standard(const EpsFn& fn, const Tensor<float>& x_t, int t, double w);
Tensor<float> guided_eps_text(const EpsFn& fn, const Tensor<float>& x_t, int t, double w_p);
Tensor<float> guided_eps_neighbor(const EpsFn& fn, const Tensor<float>& x_t, int t, double w_n);

struct SampleTrace {
    struct StepRecord {
        int t = 0;       // model-facing timestep
        char branch = 0; // 'p'/'n' interleaved, 's' standard, 'j' joint, 'w' weighted
    };
    std::vector<StepRecord> steps;

    int count_branch(char b) const;
    void save(const std::string& path) const;
};

/// Reverse-chain sampler. Per step the adjusted epsilon is chosen by mode
/// (interleaved draws a fresh uniform R from a dedicated stream and takes the
/// text branch iff R < eta), converted to a clamped x0 estimate and advanced
/// with a DDPM step. The DDPM noise stream is independent of the branch
/// stream, so degenerate eta values reproduce pure-branch trajectories
/// bit-exactly under a shared seed.
std::pair<Tensor<float>, SampleTrace> sample_chain(const EpsFn& fn, const NoiseSchedule& schedule,
                                                   const GuidanceConfig& cfg, int side);

/// Validating wrapper over sample_chain for a full conditioning bundle.
std::pair<Tensor<float>, SampleTrace> sample(const Denoiser<float>& model, const Conditioning<float>& cond,
                                             const NoiseSchedule& schedule, const GuidanceConfig& cfg);

/// Two-stage cascade: the base sample becomes the super-resolution stage's
/// low-res condition.
Tensor<float> sample_cascade(const Denoiser<float>& base_model, const Denoiser<float>& sr_model,
                             const Conditioning<float>& cond, const NoiseSchedule& base_schedule,
                             const NoiseSchedule& sr_schedule, const GuidanceConfig& base_cfg,
                             const GuidanceConfig& sr_cfg);

}  // namespace ragdiff
