#pragma once

#include <random>
#include <vector>

#include "wsseg/params.hpp"
#include "wsseg/prompts.hpp"

namespace wsseg {

enum class Modality { kText, kImage };

/// Gaussian rows scaled to unit norm, [C * n_img, D_img].
Tensor init_image_prototypes(int64_t num_classes, int64_t n_img, int64_t d_img, std::mt19937_64& rng);

/// Class-grouped unit-norm prototypes; within a class, text rows precede image rows.
struct CombinedBank {
  ag::Var vectors;  // [K_total, D_img]
  std::vector<int64_t> class_of;
  std::vector<Modality> modality_of;
  int64_t num_classes = 0;

  int64_t size() const { return static_cast<int64_t>(class_of.size()); }
  /// Channel indices of one modality, ascending.
  std::vector<int64_t> channels_of(Modality m) const;
};

/// `text` may be null (no text branch) and `image_raw` may be null (n_img = 0); image rows
/// are normalized here on every call.
CombinedBank build_bank(const TextPrototypeSet* text, const ag::Var& image_raw, int64_t num_classes, int64_t n_img);

/// normalize(bank W_proto) for scale s in 1..4; `w_proto` is [D_img, D_s].
ag::Var project_bank(const CombinedBank& bank, const ag::Var& w_proto, int scale);

struct BankOptions {
  int64_t n_img_per_class = 10;
  int64_t d_img = 64;
};

/// Learnable image prototypes plus one projection per pyramid scale.
class PrototypeBank {
 public:
  /// scale_dims[s-1] is D_s.
  PrototypeBank(int64_t num_classes, const BankOptions& opt, const std::vector<int64_t>& scale_dims, ParamSet& params,
                std::mt19937_64& rng);

  CombinedBank combine(const TextPrototypeSet* text) const;
  std::vector<ag::Var> project_all(const CombinedBank& bank) const;

  const BankOptions& options() const { return opt_; }
  ag::Var image_raw;  // null when n_img_per_class = 0
  std::vector<ag::Var> w_proto;

 private:
  int64_t num_classes_;
  BankOptions opt_;
};

}  // namespace wsseg
