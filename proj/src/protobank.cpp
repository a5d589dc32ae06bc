#include "wsseg/protobank.hpp"

#include <cmath>

namespace wsseg {

Tensor init_image_prototypes(int64_t num_classes, int64_t n_img, int64_t d_img, std::mt19937_64& rng) {
  if (num_classes <= 0 || n_img < 0 || d_img <= 0) throw ConfigError("image prototype dimensions must be positive");
  Tensor t = Tensor::randn({num_classes * n_img, d_img}, rng);
  for (int64_t r = 0; r < num_classes * n_img; ++r) {
    double s = 0.0;
    for (int64_t j = 0; j < d_img; ++j) s += t[r * d_img + j] * t[r * d_img + j];
    const double inv = 1.0 / std::sqrt(s);
    for (int64_t j = 0; j < d_img; ++j) t[r * d_img + j] *= inv;
  }
  return t;
}

std::vector<int64_t> CombinedBank::channels_of(Modality m) const {
  std::vector<int64_t> out;
  for (int64_t k = 0; k < size(); ++k)
    if (modality_of[k] == m) out.push_back(k);
  return out;
}

CombinedBank build_bank(const TextPrototypeSet* text, const ag::Var& image_raw, int64_t num_classes, int64_t n_img) {
  if (!text && !image_raw) throw ConfigError("prototype bank needs at least one modality");
  CombinedBank bank;
  bank.num_classes = num_classes;
  ag::Var image_unit;
  int64_t d = -1;
  if (image_raw) {
    if (image_raw->value.ndim() != 2 || image_raw->value.dim(0) != num_classes * n_img)
      throw ValidationError("image prototypes must be [C*n_img, D_img], got " + shape_str(image_raw->shape()));
    image_unit = ag::normalize_rows(image_raw);
    d = image_raw->value.dim(1);
  }
  std::vector<std::vector<int64_t>> text_rows(num_classes);
  if (text) {
    if (text->vectors->value.dim(0) != static_cast<int64_t>(text->owner.size()))
      throw ValidationError("text prototype owner list does not match its rows");
    if (d >= 0 && text->vectors->value.dim(1) != d)
      throw ValidationError("text prototypes have width " + std::to_string(text->vectors->value.dim(1)) +
                            " but image prototypes have width " + std::to_string(d));
    for (size_t r = 0; r < text->owner.size(); ++r) {
      const int64_t c = text->owner[r].first;
      if (c < 0 || c >= num_classes) throw ValidationError("text prototype class out of range");
      text_rows[c].push_back(static_cast<int64_t>(r));
    }
  }
  std::vector<ag::Var> parts;
  for (int64_t c = 0; c < num_classes; ++c) {
    // Text rows of one class are contiguous by construction (class-major owner order).
    if (!text_rows[c].empty()) {
      const int64_t first = text_rows[c].front(), count = static_cast<int64_t>(text_rows[c].size());
      if (text_rows[c].back() - first + 1 != count) throw ValidationError("text prototypes are not class-grouped");
      parts.push_back(ag::slice_rows(text->vectors, first, count));
      for (int64_t i = 0; i < count; ++i) {
        bank.class_of.push_back(c);
        bank.modality_of.push_back(Modality::kText);
      }
    }
    if (image_unit && n_img > 0) {
      parts.push_back(ag::slice_rows(image_unit, c * n_img, n_img));
      for (int64_t i = 0; i < n_img; ++i) {
        bank.class_of.push_back(c);
        bank.modality_of.push_back(Modality::kImage);
      }
    }
  }
  if (parts.empty()) throw ConfigError("prototype bank is empty");
  bank.vectors = ag::concat_rows(parts);
  return bank;
}

ag::Var project_bank(const CombinedBank& bank, const ag::Var& w_proto, int scale) {
  if (scale < 1 || scale > 4) throw ValidationError("scale must be in 1..4, got " + std::to_string(scale));
  return ag::normalize_rows(ag::matmul(bank.vectors, w_proto));
}

PrototypeBank::PrototypeBank(int64_t num_classes, const BankOptions& opt, const std::vector<int64_t>& scale_dims,
                             ParamSet& params, std::mt19937_64& rng)
    : num_classes_(num_classes), opt_(opt) {
  if (opt_.n_img_per_class < 0) throw ConfigError("bank.n_img_per_class must be non-negative");
  if (scale_dims.size() != 4) throw ConfigError("prototype bank needs 4 scale dimensions");
  if (opt_.n_img_per_class > 0)
    image_raw = params.add("bank.image_prototypes",
                           init_image_prototypes(num_classes, opt_.n_img_per_class, opt_.d_img, rng));
  for (int s = 1; s <= 4; ++s)
    w_proto.push_back(params.add("bank.w_proto" + std::to_string(s),
                                 dense_init({opt_.d_img, scale_dims[s - 1]}, rng)));
}

CombinedBank PrototypeBank::combine(const TextPrototypeSet* text) const {
  return build_bank(text, image_raw, num_classes_, opt_.n_img_per_class);
}

std::vector<ag::Var> PrototypeBank::project_all(const CombinedBank& bank) const {
  std::vector<ag::Var> out;
  for (int s = 1; s <= 4; ++s) out.push_back(project_bank(bank, w_proto[s - 1], s));
  return out;
}

}  // namespace wsseg
