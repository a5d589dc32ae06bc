#pragma once

#include <array>
#include <string>
#include <vector>

#include "wsseg/cam.hpp"
#include "wsseg/postprocess.hpp"
#include "wsseg/tensor.hpp"

namespace wsseg {

/// Any 8-bit PNG, converted to RGB.
RgbImage read_png_rgb(const std::string& path);
void write_png_rgb(const RgbImage& img, const std::string& path);

/// Raw single-channel values of an 8-bit grayscale or palette PNG (palette indices, not colors).
Mask read_png_labels(const std::string& path);
/// 8-bit paletted PNG; `palette` supplies colors for indices 0.. (missing entries are black).
void write_png_labels(const Mask& values, const std::string& path, const std::vector<std::array<uint8_t, 3>>& palette);
/// 8-bit grayscale PNG from values in [0, 1].
void write_png_gray(const Tensor& map, const std::string& path);

/// Fixed mask palette: index 0 (ignored/background) black, then one color per class.
const std::vector<std::array<uint8_t, 3>>& mask_palette();

/// [3, H, W] with (x / 255 - mean) / std per channel.
Tensor image_to_tensor(const RgbImage& img, double mean = 0.5, double std = 0.5);

/// Little-endian float32 .npy of any shape.
void write_npy(const Tensor& t, const std::string& path);
/// Reads float32 or float64 little-endian C-order .npy files.
Tensor read_npy(const std::string& path);

}  // namespace wsseg
