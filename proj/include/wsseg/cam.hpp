#pragma once

#include <cstdint>
#include <vector>

#include "wsseg/autograd.hpp"

namespace wsseg {

/// Per-image integer label map.
struct Mask {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<int32_t> labels;

  Mask() = default;
  Mask(int64_t h, int64_t w, int32_t fill = 0) : height(h), width(w), labels(static_cast<size_t>(h * w), fill) {}
  int32_t& at(int64_t y, int64_t x) { return labels[static_cast<size_t>(y * width + x)]; }
  int32_t at(int64_t y, int64_t x) const { return labels[static_cast<size_t>(y * width + x)]; }
  bool operator==(const Mask&) const = default;
};

constexpr double kDefaultLogitScaleInit = 2.6592600369327779;  // ln(1 / 0.07)
constexpr double kLogitScaleMin = 1.0;
constexpr double kLogitScaleMax = 100.0;

/// exp(log_scale) clamped to [1, 100].
ag::Var logit_scale(const ag::Var& log_scale);

/// logit_scale * <feat/|feat|, bank_k> per pixel: [B, D, H, W] x [K, D] -> [B, K, H, W].
/// Bank rows must be unit norm (1e-6); zero feature vectors give 0.
ag::Var compute_cam(const ag::Var& features, const ag::Var& bank, const ag::Var& scale);

/// Bilinear, align_corners = false; identity when already at the target size.
ag::Var upsample_cam(const ag::Var& cam, int64_t height, int64_t width);

/// Element-wise arithmetic mean of equally shaped maps.
ag::Var fuse(const std::vector<ag::Var>& maps);

ag::Var reduce_to_classes(const ag::Var& cam, const std::vector<int64_t>& class_of, int64_t num_classes,
                          ag::Reduction reduction = ag::Reduction::kMax);

/// Per-pixel argmax over classes of [B, C, H, W]; ties go to the lowest class index.
std::vector<Mask> pseudo_mask(const Tensor& scores);

}  // namespace wsseg
