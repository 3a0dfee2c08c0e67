#pragma once

#include "ragdiff/denoiser.hpp"
#include "ragdiff/diffusion.hpp"

#include <string>
#include <utility>
#include <vector>

namespace ragdiff {

/// On-disk model container. Byte layout (all integers little-endian):
///   [8]  magic "RGDFCKP1"
///   [u32] container version (1)
///   [u64] descriptor length, then that many bytes of UTF-8 JSON holding the
///         architecture descriptor, the noise schedule parameters
///         (kind/T/beta_start/beta_end) and the training step count
///   [u32] parameter count, then per parameter:
///         [u32 name length][name bytes]
///         [u32 rank][rank x u32 dims]
///         [numel x f32] raw little-endian values
struct Checkpoint {
    ArchDescriptor arch;
    NoiseSchedule schedule;
    int64_t step = 0;
    std::vector<std::pair<std::string, Tensor<float>>> params;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

template <typename T>
Checkpoint make_checkpoint(const Denoiser<T>& model, const NoiseSchedule& schedule, int64_t step) {
    Checkpoint c;
    c.arch = model.arch();
    c.schedule = schedule;
    c.step = step;
    for (int i = 0; i < model.params().count(); ++i) {
        const auto& e = model.params().entry(i);
        c.params.emplace_back(e.name, e.value.template cast<float>());
    }
    return c;
}

/// Restores parameters into a model with a matching descriptor; rejects
/// mismatched stages or layouts.
template <typename T>
void restore_params(Denoiser<T>& model, const Checkpoint& ckpt) {
    require(model.arch() == ckpt.arch, kVersionError,
            "checkpoint architecture descriptor does not match this model");
    require((int)ckpt.params.size() == model.params().count(), kVersionError,
            "checkpoint parameter count mismatch");
    for (const auto& [name, value] : ckpt.params) {
        int idx = model.params().find(name);
        require(idx >= 0, kVersionError, "checkpoint has unknown parameter " + name);
        Tensor<T>& dst = model.params().value(idx);
        require(dst.shape == value.shape, kVersionError, "checkpoint shape mismatch for " + name);
        for (int64_t i = 0; i < dst.numel(); ++i) dst[i] = (T)value[i];
    }
}

}  // namespace ragdiff
