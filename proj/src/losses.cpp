#include "wsseg/losses.hpp"

namespace wsseg {

ag::Var level_logits(const ag::Var& cam, const CombinedBank& bank, ag::Reduction reduction, ag::Pooling pooling) {
  return ag::spatial_pool(ag::group_reduce(cam, bank.class_of, bank.num_classes, reduction), pooling);
}

void validate_labels(const Tensor& labels, int64_t num_classes) {
  if (labels.ndim() != 2 || labels.dim(1) != num_classes)
    throw ValidationError("labels must be [B, " + std::to_string(num_classes) + "], got " +
                          shape_str(labels.shape));
  for (double v : labels.data)
    if (v != 0.0 && v != 1.0) throw ValidationError("labels must be multi-hot 0/1, found " + std::to_string(v));
}

namespace {

std::vector<int64_t> rows_of(const CombinedBank& bank, int64_t c, Modality m) {
  std::vector<int64_t> out;
  for (int64_t k = 0; k < bank.size(); ++k)
    if (bank.class_of[k] == c && bank.modality_of[k] == m) out.push_back(k);
  return out;
}

// Rows are class-grouped and modality-grouped, so a class/modality selection is contiguous.
ag::Var contiguous_rows(const ag::Var& v, const std::vector<int64_t>& rows) {
  return ag::slice_rows(v, rows.front(), static_cast<int64_t>(rows.size()));
}

}  // namespace

ag::Var alignment_loss(const CombinedBank& bank, bool* missing) {
  std::vector<ag::Var> terms;
  for (int64_t c = 0; c < bank.num_classes; ++c) {
    const auto img = rows_of(bank, c, Modality::kImage);
    const auto txt = rows_of(bank, c, Modality::kText);
    if (img.empty() || txt.empty()) continue;
    const ag::Var a = ag::normalize_rows(ag::mean_rows(contiguous_rows(bank.vectors, img)));
    const ag::Var b = ag::normalize_rows(ag::mean_rows(contiguous_rows(bank.vectors, txt)));
    terms.push_back(ag::add_scalar(ag::scale(ag::sum_all(ag::mul(a, b)), -1.0), 1.0));
  }
  if (missing) *missing = terms.empty();
  if (terms.empty()) return ag::constant(Tensor::scalar(0.0));
  ag::Var acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = ag::add(acc, terms[i]);
  return ag::scale(acc, 1.0 / static_cast<double>(terms.size()));
}

ag::Var diversity_loss(const CombinedBank& bank) {
  ag::Var acc;
  int64_t pairs = 0;
  for (int64_t c = 0; c < bank.num_classes; ++c) {
    const auto img = rows_of(bank, c, Modality::kImage);
    const auto n = static_cast<int64_t>(img.size());
    if (n < 2) continue;
    const ag::Var p = contiguous_rows(bank.vectors, img);
    const ag::Var gram = ag::matmul(p, ag::transpose(p));
    Tensor off({n, n}, 1.0);
    for (int64_t i = 0; i < n; ++i) off[i * n + i] = 0.0;
    const ag::Var sq = ag::sum_all(ag::mul_const(ag::mul(gram, gram), off));
    acc = acc ? ag::add(acc, sq) : sq;
    pairs += n * (n - 1);
  }
  if (!acc) return ag::constant(Tensor::scalar(0.0));
  return ag::scale(acc, 1.0 / static_cast<double>(pairs));
}

LossBreakdown total_loss(const std::vector<ag::Var>& level_cams, const Tensor& labels, const CombinedBank& bank,
                         const LossConfig& cfg, ag::Reduction reduction) {
  if (level_cams.size() != 4) throw ValidationError("total_loss expects 4 level CAMs");
  validate_labels(labels, bank.num_classes);
  LossBreakdown out;
  ag::Var total;
  for (size_t i = 0; i < 4; ++i) {
    if (level_cams[i]->value.dim(0) != labels.dim(0))
      throw ValidationError("level " + std::to_string(i + 1) + " batch does not match labels");
    ag::Var logits = level_logits(level_cams[i], bank, reduction, cfg.pooling);
    ag::Var l = ag::bce_with_logits(logits, labels);
    out.level[i] = l->value[0];
    out.level_logits.push_back(logits);
    if (cfg.level_weights[i] == 0.0) continue;
    ag::Var w = ag::scale(l, cfg.level_weights[i]);
    total = total ? ag::add(total, w) : w;
  }
  if (!total) total = ag::constant(Tensor::scalar(0.0));
  const ag::Var align = alignment_loss(bank, &out.align_missing);
  const ag::Var div = diversity_loss(bank);
  out.align = align->value[0];
  out.diversity = div->value[0];
  if (cfg.align_weight != 0.0) total = ag::add(total, ag::scale(align, cfg.align_weight));
  if (cfg.diversity_weight != 0.0) total = ag::add(total, ag::scale(div, cfg.diversity_weight));
  out.total = total;
  return out;
}

}  // namespace wsseg
