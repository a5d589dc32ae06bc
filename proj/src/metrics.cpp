#include "wsseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace wsseg {

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& other) {
  if (other.num_classes() != num_classes() || other.ignore_index != ignore_index)
    throw ValidationError("cannot merge confusion counts with different class sets");
  for (int64_t c = 0; c < num_classes(); ++c) {
    tp[c] += other.tp[c];
    fp[c] += other.fp[c];
    fn[c] += other.fn[c];
  }
  return *this;
}

void accumulate(const Mask& pred, const Mask& gt, ConfusionCounts& counts) {
  if (pred.height != gt.height || pred.width != gt.width || pred.labels.size() != gt.labels.size())
    throw ValidationError("accumulate: mask shapes differ");
  const int64_t C = counts.num_classes();
  const int32_t ignore = counts.ignore_index;
  auto valid = [&](int32_t v) { return v == ignore || (v >= 0 && v < C); };
  for (size_t i = 0; i < gt.labels.size(); ++i) {
    const int32_t g = gt.labels[i], p = pred.labels[i];
    if (!valid(g) || !valid(p))
      throw ValidationError("accumulate: label " + std::to_string(valid(g) ? p : g) + " outside [0," +
                            std::to_string(C) + ") and not the ignore label");
  }
  for (size_t i = 0; i < gt.labels.size(); ++i) {
    const int32_t g = gt.labels[i], p = pred.labels[i];
    if (g == ignore) continue;
    if (p == g) {
      ++counts.tp[g];
    } else {
      ++counts.fn[g];
      if (p != ignore) ++counts.fp[p];
    }
  }
}

ConfusionCounts accumulate(const Mask& pred, const Mask& gt, int64_t num_classes, int32_t ignore_index) {
  ConfusionCounts c(num_classes, ignore_index);
  accumulate(pred, gt, c);
  return c;
}

SegmentationScores iou_dice(const ConfusionCounts& counts) {
  SegmentationScores s;
  double iou_sum = 0.0, dice_sum = 0.0;
  for (int64_t c = 0; c < counts.num_classes(); ++c) {
    const auto tp = static_cast<double>(counts.tp[c]);
    const auto fp = static_cast<double>(counts.fp[c]);
    const auto fn = static_cast<double>(counts.fn[c]);
    if (tp + fp + fn == 0.0) {
      s.iou.emplace_back();
      s.dice.emplace_back();
      continue;
    }
    const double iou = tp / (tp + fp + fn);
    const double dice = 2.0 * tp / (2.0 * tp + fp + fn);
    s.iou.emplace_back(iou);
    s.dice.emplace_back(dice);
    iou_sum += iou;
    dice_sum += dice;
    ++s.counted_classes;
  }
  if (s.counted_classes > 0) {
    s.miou = iou_sum / static_cast<double>(s.counted_classes);
    s.mdice = dice_sum / static_cast<double>(s.counted_classes);
  }
  return s;
}

double roc_auc(std::span<const double> positives, std::span<const double> negatives) {
  if (positives.empty() || negatives.empty()) throw ValidationError("roc_auc: need positives and negatives");
  // Mann-Whitney U with midranks for ties.
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> all;
  for (double v : positives) all.push_back({v, true});
  for (double v : negatives) all.push_back({v, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });
  double rank_sum = 0.0;
  size_t i = 0;
  while (i < all.size()) {
    size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
    for (size_t k = i; k < j; ++k)
      if (all[k].positive) rank_sum += mid;
    i = j;
  }
  const auto np = static_cast<double>(positives.size()), nn = static_cast<double>(negatives.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

namespace {

std::vector<double> unit(const double* v, int64_t d) {
  double s = 0.0;
  for (int64_t i = 0; i < d; ++i) s += v[i] * v[i];
  const double inv = 1.0 / (std::sqrt(s) + 1e-12);
  std::vector<double> out(v, v + d);
  for (double& x : out) x *= inv;
  return out;
}

}  // namespace

Tensor zero_shot_scores(const VisionLanguageEncoder& enc, const std::vector<std::vector<std::string>>& descriptions,
                        const Tensor& images, AucAggregation agg) {
  const Tensor img = enc.encode_image_global(images);
  const int64_t N = img.dim(0), E = img.dim(1), C = static_cast<int64_t>(descriptions.size());
  std::vector<std::vector<std::vector<double>>> text(C);
  for (int64_t c = 0; c < C; ++c) {
    if (descriptions[c].empty()) throw ValidationError("class " + std::to_string(c) + " has no descriptions");
    for (const std::string& d : descriptions[c]) {
      const Tensor t = enc.encode_text_global(enc.tokenizer().encode(d, enc.spec().prompt_len));
      text[c].push_back(unit(t.ptr(), E));
    }
  }
  Tensor scores({N, C});
  for (int64_t n = 0; n < N; ++n) {
    const auto iv = unit(img.ptr() + n * E, E);
    for (int64_t c = 0; c < C; ++c) {
      double best = -std::numeric_limits<double>::infinity(), sum = 0.0;
      for (const auto& tv : text[c]) {
        const double cs = std::inner_product(iv.begin(), iv.end(), tv.begin(), 0.0);
        best = std::max(best, cs);
        sum += cs;
      }
      scores[n * C + c] = agg == AucAggregation::kMax ? best : sum / static_cast<double>(text[c].size());
    }
  }
  return scores;
}

std::map<int64_t, double> per_class_auc(const Tensor& scores, const std::vector<std::vector<double>>& labels) {
  if (scores.ndim() != 2 || scores.dim(0) != static_cast<int64_t>(labels.size()))
    throw ValidationError("per_class_auc: scores and labels disagree on the image count");
  const int64_t N = scores.dim(0), C = scores.dim(1);
  std::map<int64_t, double> out;
  for (int64_t c = 0; c < C; ++c) {
    std::vector<double> pos, neg;
    for (int64_t n = 0; n < N; ++n) {
      if (static_cast<int64_t>(labels[n].size()) != C) throw ValidationError("per_class_auc: label length mismatch");
      (labels[n][c] > 0.5 ? pos : neg).push_back(scores[n * C + c]);
    }
    if (pos.empty() || neg.empty()) continue;
    out[c] = roc_auc(pos, neg);
  }
  return out;
}

std::map<int64_t, double> zero_shot_auc(const VisionLanguageEncoder& enc,
                                        const std::vector<std::vector<std::string>>& descriptions,
                                        const Tensor& images, const std::vector<std::vector<double>>& labels,
                                        AucAggregation agg) {
  return per_class_auc(zero_shot_scores(enc, descriptions, images, agg), labels);
}

}  // namespace wsseg
