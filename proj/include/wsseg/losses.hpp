#pragma once

#include <array>
#include <vector>

#include "wsseg/protobank.hpp"

namespace wsseg {

struct LossConfig {
  std::array<double, 4> level_weights{1.0, 1.0, 1.0, 1.0};
  double align_weight = 0.0;
  double diversity_weight = 0.0;
  ag::Pooling pooling = ag::Pooling::kAverage;
};

/// Class logits of one level CAM: prototype reduction then spatial pooling, [B, C].
ag::Var level_logits(const ag::Var& cam, const CombinedBank& bank, ag::Reduction reduction, ag::Pooling pooling);

/// Multi-hot labels [B, C] with every entry exactly 0 or 1.
void validate_labels(const Tensor& labels, int64_t num_classes);

/// Mean over classes with both modalities of 1 - cos(mean image prototype, mean text prototype).
/// `missing` is set when no class has both modalities (the loss is then 0).
ag::Var alignment_loss(const CombinedBank& bank, bool* missing = nullptr);

/// Mean squared cosine over distinct same-class image prototype pairs (0 if there are none).
ag::Var diversity_loss(const CombinedBank& bank);

struct LossBreakdown {
  ag::Var total;
  std::array<double, 4> level{};
  std::vector<ag::Var> level_logits;  // per level, [B, C]
  double align = 0.0;
  double diversity = 0.0;
  bool align_missing = false;
};

/// sum_i w_i BCE(level_logits_i, labels) + align_weight L_align + diversity_weight L_div.
LossBreakdown total_loss(const std::vector<ag::Var>& level_cams, const Tensor& labels, const CombinedBank& bank,
                         const LossConfig& cfg, ag::Reduction reduction = ag::Reduction::kMax);

}  // namespace wsseg
