#pragma once

#include <cstdint>
#include <vector>

#include "wsseg/cam.hpp"
#include "wsseg/tensor.hpp"

namespace wsseg {

struct CrfParams {
  int64_t iterations = 10;
  double w_gauss = 3.0;
  double w_bilateral = 5.0;
  double theta_gamma = 3.0;   // smoothness kernel, spatial std (pixels)
  double theta_alpha = 60.0;  // bilateral kernel, spatial std (pixels)
  double theta_beta = 10.0;   // bilateral kernel, color std (intensity units)

  void validate() const;
};

/// 8-bit interleaved RGB, row-major.
struct RgbImage {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint8_t> pixels;  // height * width * 3

  RgbImage() = default;
  RgbImage(int64_t h, int64_t w) : height(h), width(w), pixels(static_cast<size_t>(h * w * 3), 0) {}
  uint8_t* at(int64_t y, int64_t x) { return pixels.data() + (y * width + x) * 3; }
  const uint8_t* at(int64_t y, int64_t x) const { return pixels.data() + (y * width + x) * 3; }
};

enum class CrfMethod {
  kFast,        // separable Gaussian + permutohedral lattice
  kBruteForce,  // exact O(N^2) pairwise sums
};

/// Softmax over the leading (class) axis of [C, H, W] at temperature 1.
Tensor softmax_channels(const Tensor& scores);

/// Per-pixel argmax of [C, H, W], ties to the lowest index.
Mask argmax_mask(const Tensor& probs);

/// Mean-field marginals Q [C, H, W] after params.iterations updates with Potts compatibility.
/// `history`, if given, receives Q after every iteration.
Tensor crf_mean_field(const RgbImage& image, const Tensor& probs, const CrfParams& params,
                      CrfMethod method = CrfMethod::kFast, std::vector<Tensor>* history = nullptr);

/// argmax of the mean-field marginals; probs must sum to 1 (1e-4) at every pixel.
Mask crf_refine(const RgbImage& image, const Tensor& probs, const CrfParams& params,
                CrfMethod method = CrfMethod::kFast);

/// Approximate high-dimensional Gaussian filter: out_i ~ sum_j exp(-|f_i - f_j|^2 / 2) v_j.
class PermutohedralLattice {
 public:
  /// features: N x d, row-major, already divided by their standard deviations.
  PermutohedralLattice(const std::vector<double>& features, int64_t n, int64_t d);

  /// Filters `channels` value vectors stored channel-major (channels x N).
  std::vector<double> filter(const std::vector<double>& values, int64_t channels) const;

  int64_t lattice_points() const { return points_; }

  static constexpr int64_t kMaxDim = 8;

 private:
  int64_t n_, d_, points_ = 0;
  std::vector<int32_t> offset_;      // n * (d + 1) lattice indices
  std::vector<double> barycentric_;  // n * (d + 1) weights
  std::vector<int32_t> plus_, minus_;  // points * (d + 1) neighbour indices along each axis, -1 if absent
};

}  // namespace wsseg
