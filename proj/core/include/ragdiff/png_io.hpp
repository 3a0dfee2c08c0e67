#pragma once

#include "ragdiff/tensor.hpp"

#include <string>

namespace ragdiff {

/// Decode an RGB(A)/gray PNG into a CHW float tensor in [-1, 1].
Tensor<float> read_png(const std::string& path);

/// Encode a CHW float tensor in [-1, 1] as an 8-bit RGB PNG (deterministic output).
void write_png(const std::string& path, const Tensor<float>& img);

}  // namespace ragdiff
