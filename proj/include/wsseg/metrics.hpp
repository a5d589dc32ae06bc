#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wsseg/cam.hpp"
#include "wsseg/encoder.hpp"

namespace wsseg {

/// Per-class pixel counts; pixels whose ground truth equals ignore_index are never counted.
struct ConfusionCounts {
  std::vector<int64_t> tp, fp, fn;
  int32_t ignore_index = -1;

  ConfusionCounts() = default;
  ConfusionCounts(int64_t num_classes, int32_t ignore) : tp(num_classes), fp(num_classes), fn(num_classes),
                                                          ignore_index(ignore) {}
  int64_t num_classes() const { return static_cast<int64_t>(tp.size()); }
  ConfusionCounts& operator+=(const ConfusionCounts& other);
  bool operator==(const ConfusionCounts&) const = default;
};

/// Adds the pixel counts of one (prediction, ground truth) pair into `counts`.
void accumulate(const Mask& pred, const Mask& gt, ConfusionCounts& counts);
ConfusionCounts accumulate(const Mask& pred, const Mask& gt, int64_t num_classes, int32_t ignore_index);

struct SegmentationScores {
  std::vector<std::optional<double>> iou;   // nullopt when tp + fp + fn = 0
  std::vector<std::optional<double>> dice;
  double miou = 0.0;
  double mdice = 0.0;
  int64_t counted_classes = 0;
};

SegmentationScores iou_dice(const ConfusionCounts& counts);

/// Probability that a positive outranks a negative, ties counted as one half.
double roc_auc(std::span<const double> positives, std::span<const double> negatives);

enum class AucAggregation { kMax, kMean };

/// Cosine of each image's global embedding with each class's raw (un-tuned) descriptions,
/// aggregated over descriptions: [N, C].
Tensor zero_shot_scores(const VisionLanguageEncoder& enc, const std::vector<std::vector<std::string>>& descriptions,
                        const Tensor& images, AucAggregation agg = AucAggregation::kMax);

/// AUC per class from a score matrix [N, C] and multi-hot labels; classes lacking positives
/// or negatives are omitted.
std::map<int64_t, double> per_class_auc(const Tensor& scores, const std::vector<std::vector<double>>& labels);

std::map<int64_t, double> zero_shot_auc(const VisionLanguageEncoder& enc,
                                        const std::vector<std::vector<std::string>>& descriptions,
                                        const Tensor& images, const std::vector<std::vector<double>>& labels,
                                        AucAggregation agg = AucAggregation::kMax);

}  // namespace wsseg
