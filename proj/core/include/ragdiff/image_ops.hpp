#pragma once

#include "ragdiff/error.hpp"
#include "ragdiff/tensor.hpp"

#include <algorithm>
#include <vector>

namespace ragdiff {

/// 2x box downsample of a CHW image (sides must be even).
template <typename T>
Tensor<T> box_downsample2(const Tensor<T>& img) {
    require(img.rank() == 3 && img.dim(1) % 2 == 0 && img.dim(2) % 2 == 0, kUsageError,
            "box_downsample2: need CxHxW with even sides");
    int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    Tensor<T> out({c, h / 2, w / 2});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h / 2; ++y)
            for (int x = 0; x < w / 2; ++x) {
                const T* p = img.ptr() + ((int64_t)ch * h + 2 * y) * w + 2 * x;
                out[((int64_t)ch * (h / 2) + y) * (w / 2) + x] = (T)((p[0] + p[1] + p[w] + p[w + 1]) * T(0.25));
            }
    return out;
}

/// Bilinear resize of a CHW image to side x side (half-pixel centers).
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& img, int side) {
    require(img.rank() == 3, kUsageError, "bilinear_resize: need CxHxW");
    int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (h == side && w == side) return img;
    Tensor<T> out({c, side, side});
    double sy = (double)h / side, sx = (double)w / side;
    for (int y = 0; y < side; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = (int)std::floor(fy);
        double wy = fy - y0;
        int ya = std::clamp(y0, 0, h - 1), yb = std::clamp(y0 + 1, 0, h - 1);
        for (int x = 0; x < side; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = (int)std::floor(fx);
            double wx = fx - x0;
            int xa = std::clamp(x0, 0, w - 1), xb = std::clamp(x0 + 1, 0, w - 1);
            for (int ch = 0; ch < c; ++ch) {
                const T* p = img.ptr() + (int64_t)ch * h * w;
                double v = (1 - wy) * ((1 - wx) * p[ya * w + xa] + wx * p[ya * w + xb]) +
                           wy * ((1 - wx) * p[yb * w + xa] + wx * p[yb * w + xb]);
                out[((int64_t)ch * side + y) * side + x] = (T)v;
            }
        }
    }
    return out;
}

/// Tile equally sized CHW images into a grid (row-major), gray background.
template <typename T>
Tensor<T> tile_grid(const std::vector<Tensor<T>>& images, int cols, int pad = 2) {
    require(!images.empty(), kUsageError, "tile_grid: no images");
    int c = images[0].dim(0), h = images[0].dim(1), w = images[0].dim(2);
    int rows = ((int)images.size() + cols - 1) / cols;
    Tensor<T> out({c, rows * (h + pad) + pad, cols * (w + pad) + pad}, T(0));
    for (size_t i = 0; i < images.size(); ++i) {
        int r = (int)i / cols, col = (int)i % cols;
        int oy = pad + r * (h + pad), ox = pad + col * (w + pad);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    out[((int64_t)ch * out.dim(1) + oy + y) * out.dim(2) + ox + x] =
                        images[i][((int64_t)ch * h + y) * w + x];
    }
    return out;
}

}  // namespace ragdiff
