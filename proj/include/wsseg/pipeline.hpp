#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "wsseg/cam.hpp"
#include "wsseg/encoder.hpp"
#include "wsseg/losses.hpp"
#include "wsseg/params.hpp"
#include "wsseg/prompts.hpp"
#include "wsseg/protobank.hpp"
#include "wsseg/pyramid.hpp"

namespace wsseg {

struct ModelConfig {
  PyramidOptions pyramid;  // in_dim is taken from the encoder
  PromptOptions prompts;   // n_desc = 0 disables the text branch; d_img is taken from `bank`
  BankOptions bank;        // n_img_per_class = 0 disables the image branch
  ag::Reduction reduction = ag::Reduction::kMax;
  double logit_scale_init = kDefaultLogitScaleInit;
  uint64_t seed = 0;
};

struct ForwardOptions {
  /// Upsample, fuse and reduce to full-resolution class maps. Training only needs level CAMs.
  bool full_resolution = true;
  const LossConfig* loss = nullptr;  // defaults when null
};

struct ForwardOutput {
  CombinedBank bank;
  std::vector<ag::Var> scaled_banks;  // per level, [K, D_i]
  std::vector<ag::Var> scales;        // per level, clamped logit scale (one element)
  std::vector<ag::Var> pyramid;       // per level, [B, D_i, 2^i H', 2^i W']
  std::vector<ag::Var> level_cams;    // per level, [B, K, 2^i H', 2^i W']
  std::vector<ag::Var> upsampled;     // per level, [B, K, H_img, W_img]; empty unless full_resolution
  ag::Var fused;                      // [B, K, H_img, W_img]
  ag::Var class_scores;               // [B, C, H_img, W_img]
  std::optional<LossBreakdown> losses;
};

/// Trainable state around a frozen encoder: refiners, pyramid, prompts, prototype bank, logit scales.
class Model {
 public:
  Model(std::shared_ptr<const VisionLanguageEncoder> encoder, std::vector<std::string> class_names,
        std::vector<std::vector<std::string>> descriptions, ModelConfig cfg);

  /// images [B, 3, H, W]; labels [B, C] multi-hot or null.
  ForwardOutput forward(const Tensor& images, const Tensor* labels = nullptr, const ForwardOptions& opt = {}) const;
  /// Same data flow starting from precomputed encoder hidden states of images of size image_h x image_w.
  ForwardOutput forward_hidden(const HiddenStateSet& hidden, int64_t image_h, int64_t image_w,
                               const Tensor* labels = nullptr, const ForwardOptions& opt = {}) const;

  /// Inference-only class score maps [B, C, H, W] (no graph recorded).
  Tensor class_score_maps(const Tensor& images) const;

  const VisionLanguageEncoder& encoder() const { return *encoder_; }
  std::shared_ptr<const VisionLanguageEncoder> encoder_ptr() const { return encoder_; }
  const ModelConfig& config() const { return cfg_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::vector<std::vector<std::string>>& descriptions() const { return descriptions_; }
  int64_t num_classes() const { return static_cast<int64_t>(class_names_.size()); }
  const ParamSet& params() const { return params_; }
  const FeaturePyramid& pyramid() const { return *pyramid_; }
  const PromptLearner* prompts() const { return prompts_.get(); }
  const PrototypeBank& bank() const { return *bank_; }
  const std::vector<ag::Var>& log_scales() const { return log_scales_; }

  /// Prototype bank (text + image) for the current parameter values.
  CombinedBank current_bank() const;

 private:
  std::shared_ptr<const VisionLanguageEncoder> encoder_;
  std::vector<std::string> class_names_;
  std::vector<std::vector<std::string>> descriptions_;
  ModelConfig cfg_;
  ParamSet params_;
  std::unique_ptr<FeaturePyramid> pyramid_;
  std::unique_ptr<PromptLearner> prompts_;
  std::unique_ptr<PrototypeBank> bank_;
  std::vector<ag::Var> log_scales_;
};

}  // namespace wsseg
