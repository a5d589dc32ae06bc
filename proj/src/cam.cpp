#include "wsseg/cam.hpp"

#include <cmath>

namespace wsseg {

ag::Var logit_scale(const ag::Var& log_scale) {
  return ag::clamp(ag::exp(log_scale), kLogitScaleMin, kLogitScaleMax);
}

ag::Var compute_cam(const ag::Var& features, const ag::Var& bank, const ag::Var& scale) {
  if (features->value.ndim() != 4 || bank->value.ndim() != 2 || features->value.dim(1) != bank->value.dim(1))
    throw ValidationError("compute_cam: features " + shape_str(features->shape()) + " incompatible with bank " +
                          shape_str(bank->shape()));
  const int64_t K = bank->value.dim(0), D = bank->value.dim(1);
  for (int64_t k = 0; k < K; ++k) {
    double s = 0.0;
    for (int64_t j = 0; j < D; ++j) s += bank->value[k * D + j] * bank->value[k * D + j];
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6)
      throw ValidationError("compute_cam: prototype " + std::to_string(k) + " is not unit norm");
  }
  return ag::channel_project(bank, ag::normalize_channels(features), scale);
}

ag::Var upsample_cam(const ag::Var& cam, int64_t height, int64_t width) {
  return ag::upsample_bilinear(cam, height, width);
}

ag::Var fuse(const std::vector<ag::Var>& maps) {
  if (maps.empty()) throw ValidationError("fuse: no maps");
  for (const ag::Var& m : maps)
    if (m->shape() != maps[0]->shape())
      throw ValidationError("fuse: shape mismatch " + shape_str(m->shape()) + " vs " + shape_str(maps[0]->shape()));
  ag::Var acc = maps[0];
  for (size_t i = 1; i < maps.size(); ++i) acc = ag::add(acc, maps[i]);
  return ag::scale(acc, 1.0 / static_cast<double>(maps.size()));
}

ag::Var reduce_to_classes(const ag::Var& cam, const std::vector<int64_t>& class_of, int64_t num_classes,
                          ag::Reduction reduction) {
  return ag::group_reduce(cam, class_of, num_classes, reduction);
}

std::vector<Mask> pseudo_mask(const Tensor& scores) {
  if (scores.ndim() != 4 || scores.dim(1) < 1) throw ValidationError("pseudo_mask: expected [B,C,H,W] scores");
  const int64_t B = scores.dim(0), C = scores.dim(1), H = scores.dim(2), W = scores.dim(3), HW = H * W;
  std::vector<Mask> out;
  for (int64_t b = 0; b < B; ++b) {
    Mask m(H, W, 0);
    const double* base = scores.ptr() + b * C * HW;
    for (int64_t i = 0; i < HW; ++i) {
      int32_t best = 0;
      for (int64_t c = 1; c < C; ++c)
        if (base[c * HW + i] > base[best * HW + i]) best = static_cast<int32_t>(c);
      m.labels[static_cast<size_t>(i)] = best;
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace wsseg
