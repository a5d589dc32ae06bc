#include "wsseg/pipeline.hpp"

#include <cmath>
#include <random>

namespace wsseg {

namespace {

// Re-throws validation and configuration errors with the name of the stage that raised them.
template <typename F>
auto stage(const char* name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("[") + name + "] " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("[") + name + "] " + e.what());
  }
}

}  // namespace

Model::Model(std::shared_ptr<const VisionLanguageEncoder> encoder, std::vector<std::string> class_names,
             std::vector<std::vector<std::string>> descriptions, ModelConfig cfg)
    : encoder_(std::move(encoder)),
      class_names_(std::move(class_names)),
      descriptions_(std::move(descriptions)),
      cfg_(std::move(cfg)) {
  if (!encoder_) throw ConfigError("model needs an encoder");
  if (class_names_.empty()) throw ConfigError("model needs at least one class");
  if (cfg_.prompts.n_desc < 0) throw ConfigError("prompts.n_desc must be non-negative");
  if (cfg_.prompts.n_desc == 0 && cfg_.bank.n_img_per_class == 0)
    throw ConfigError("n_desc = 0 and n_img = 0 leaves the prototype bank empty");
  if (cfg_.prompts.n_desc > 0 && descriptions_.size() != class_names_.size())
    throw ConfigError("got descriptions for " + std::to_string(descriptions_.size()) + " classes, expected " +
                      std::to_string(class_names_.size()));
  cfg_.pyramid.in_dim = encoder_->spec().vit_dim;
  cfg_.prompts.d_img = cfg_.bank.d_img;
  if (cfg_.bank.d_img <= 0) throw ConfigError("bank.d_img must be positive");

  std::mt19937_64 rng(cfg_.seed);
  pyramid_ = std::make_unique<FeaturePyramid>(cfg_.pyramid, params_, rng);
  if (cfg_.prompts.n_desc > 0)
    prompts_ = std::make_unique<PromptLearner>(*encoder_, descriptions_, cfg_.prompts, params_, rng);
  std::vector<int64_t> dims;
  for (int i = 1; i <= 4; ++i) dims.push_back(cfg_.pyramid.level_channels(i));
  bank_ = std::make_unique<PrototypeBank>(num_classes(), cfg_.bank, dims, params_, rng);
  for (int i = 1; i <= 4; ++i)
    log_scales_.push_back(params_.add("cam.log_scale" + std::to_string(i), Tensor::scalar(cfg_.logit_scale_init)));
}

CombinedBank Model::current_bank() const {
  return stage("prototypes", [&] {
    if (!prompts_) return bank_->combine(nullptr);
    const TextPrototypeSet text = prompts_->compute(*encoder_);
    return bank_->combine(&text);
  });
}

ForwardOutput Model::forward(const Tensor& images, const Tensor* labels, const ForwardOptions& opt) const {
  if (images.ndim() != 4) throw ValidationError("[encoder] images must be [B,3,H,W], got " + shape_str(images.shape));
  const HiddenStateSet hidden = stage("encoder", [&] { return encoder_->encode_image(images); });
  return forward_hidden(hidden, images.dim(2), images.dim(3), labels, opt);
}

ForwardOutput Model::forward_hidden(const HiddenStateSet& hidden, int64_t image_h, int64_t image_w,
                                    const Tensor* labels, const ForwardOptions& opt) const {
  stage("encoder", [&] { hidden.validate(); });
  ForwardOutput out;
  stage("pyramid", [&] {
    std::vector<ag::Var> grids;
    for (const Tensor& g : hidden.grids) grids.push_back(ag::constant(g));
    out.pyramid = pyramid_->build(pyramid_->refine(grids));
  });
  out.bank = current_bank();
  stage("prototypes", [&] { out.scaled_banks = bank_->project_all(out.bank); });
  stage("cam", [&] {
    for (size_t i = 0; i < 4; ++i) {
      out.scales.push_back(logit_scale(log_scales_[i]));
      out.level_cams.push_back(compute_cam(out.pyramid[i], out.scaled_banks[i], out.scales[i]));
    }
    if (opt.full_resolution) {
      for (const ag::Var& c : out.level_cams) out.upsampled.push_back(upsample_cam(c, image_h, image_w));
      out.fused = fuse(out.upsampled);
      out.class_scores = reduce_to_classes(out.fused, out.bank.class_of, out.bank.num_classes, cfg_.reduction);
    }
  });
  if (labels) {
    const LossConfig defaults;
    const LossConfig& lc = opt.loss ? *opt.loss : defaults;
    out.losses = stage("loss", [&] { return total_loss(out.level_cams, *labels, out.bank, lc, cfg_.reduction); });
  }
  return out;
}

Tensor Model::class_score_maps(const Tensor& images) const {
  ag::NoGradGuard guard;
  return forward(images).class_scores->value;
}

}  // namespace wsseg
