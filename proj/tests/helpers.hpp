#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "wsseg/dataset.hpp"
#include "wsseg/io.hpp"
#include "wsseg/pipeline.hpp"
#include "wsseg/training.hpp"

namespace wsseg::testing {

// 32x32 images, 2x2 patch grid, four blocks tapped at every layer.
inline MockEncoderConfig tiny_encoder_config(uint64_t seed = 99) {
  MockEncoderConfig c;
  c.spec.patch_grid_side = 2;
  c.spec.patch_size = 16;
  c.spec.vit_dim = 16;
  c.spec.text_dim = 16;
  c.spec.embed_dim = 16;
  c.spec.tap_layers = {0, 1, 2, 3};
  c.image_blocks = 4;
  c.text_blocks = 2;
  c.heads = 2;
  c.seed = seed;
  return c;
}

inline std::shared_ptr<const MockEncoder> tiny_encoder(uint64_t seed = 99) {
  return std::make_shared<MockEncoder>(tiny_encoder_config(seed));
}

inline ModelConfig tiny_model_config(int64_t n_desc = 2, int64_t n_img = 2, int64_t n_ctx = 4) {
  ModelConfig m;
  m.pyramid.d_ref = 32;
  m.pyramid.res_blocks = 1;
  m.pyramid.groupnorm_groups = 4;
  m.prompts.n_ctx = n_ctx;
  m.prompts.n_desc = n_desc;
  m.bank.n_img_per_class = n_img;
  m.bank.d_img = 16;
  m.seed = 5;
  return m;
}

inline std::vector<std::string> tiny_classes() { return {"TUM", "STR", "LYM"}; }

inline std::vector<std::vector<std::string>> tiny_descriptions() {
  return {{"dense tumor cells", "large nuclei", "malignant epithelium"},
          {"pink fibrous stroma", "wavy collagen"},
          {"small round lymphocytes", "dark blue cells", "immune infiltrate"}};
}

inline std::unique_ptr<Model> tiny_model(int64_t n_desc = 2, int64_t n_img = 2, int64_t n_ctx = 4) {
  return std::make_unique<Model>(tiny_encoder(), tiny_classes(), tiny_descriptions(),
                                 tiny_model_config(n_desc, n_img, n_ctx));
}

inline Tensor random_images(int64_t b, int64_t side, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor::uniform({b, 3, side, side}, rng, -1.0, 1.0);
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

// Central difference of f with respect to x[i].
inline double central_diff(Tensor& x, int64_t i, const std::function<double()>& f, double h = 1e-5) {
  const double orig = x[i];
  x[i] = orig + h;
  const double up = f();
  x[i] = orig - h;
  const double down = f();
  x[i] = orig;
  return (up - down) / (2.0 * h);
}

// Synthetic blob samples over the tiny classes, with masks and mask-derived labels.
inline std::vector<Sample> tiny_samples(int64_t n, uint64_t seed, int64_t side = 32) {
  std::mt19937_64 rng(seed);
  std::vector<Sample> out;
  for (int64_t i = 0; i < n; ++i) {
    std::vector<int64_t> cls{i % 3};
    if (i % 2) cls.push_back((i + 1) % 3);
    auto [img, mask] = synth_blob_image(side, cls, rng);
    out.push_back({"s" + std::to_string(i), image_to_tensor(img), labels_from_mask(mask, 3), mask});
  }
  return out;
}

// Encoder whose global embeddings are class indicators: an image embeds as the normalized sum of
// e_c over the classes flagged in its first C channel-0 pixels (> 0.5), and a description embeds as
// e_c for the class it was registered under.
class RiggedEncoder final : public VisionLanguageEncoder {
 public:
  RiggedEncoder(int64_t num_classes, std::vector<std::vector<std::string>> descriptions)
      : C_(num_classes), inner_(tiny_encoder_config()) {
    spec_ = inner_.spec();
    spec_.embed_dim = num_classes;
    for (size_t c = 0; c < descriptions.size(); ++c)
      for (const auto& d : descriptions[c]) owner_[Tokenizer::normalize(d)] = static_cast<int64_t>(c);
  }
  const EncoderSpec& spec() const override { return spec_; }
  const Tokenizer& tokenizer() const override { return inner_.tokenizer(); }
  std::string name() const override { return "rigged"; }
  HiddenStateSet encode_image(const Tensor& images) const override { return inner_.encode_image(images); }
  Tensor encode_image_global(const Tensor& images) const override {
    const int64_t B = images.dim(0), HW = images.dim(2) * images.dim(3);
    Tensor out({B, C_});
    for (int64_t b = 0; b < B; ++b) {
      double n = 0;
      for (int64_t c = 0; c < C_; ++c)
        if (images[b * 3 * HW + c] > 0.5) {
          out[b * C_ + c] = 1.0;
          n += 1.0;
        }
      for (int64_t c = 0; c < C_; ++c) out[b * C_ + c] /= std::max(1.0, std::sqrt(n));
    }
    return out;
  }
  Tensor token_embedding(std::span<const int64_t> ids) const override { return inner_.token_embedding(ids); }
  ag::Var encode_text_from_embeddings(const ag::Var& e, int64_t eot) const override {
    return inner_.encode_text_from_embeddings(e, eot);
  }
  Tensor encode_text_global(const TokenizedText& t) const override {
    const std::vector<int64_t> span(t.ids.begin() + 1, t.ids.begin() + t.eot_index);
    const auto it = owner_.find(tokenizer().decode(span));
    if (it == owner_.end()) throw ValidationError("rigged encoder: unregistered description");
    Tensor out({1, C_});
    out[it->second] = 1.0;
    return out;
  }
  std::vector<ag::Var> frozen_parameters() const override { return inner_.frozen_parameters(); }

 private:
  int64_t C_;
  MockEncoder inner_;
  EncoderSpec spec_;
  std::map<std::string, int64_t> owner_;
};

// Images whose first C channel-0 pixels carry the multi-hot label (read by RiggedEncoder).
inline Tensor labelled_images(const std::vector<std::vector<double>>& labels, int64_t side) {
  Tensor t({static_cast<int64_t>(labels.size()), 3, side, side}, 0.0);
  for (size_t b = 0; b < labels.size(); ++b)
    for (size_t c = 0; c < labels[b].size(); ++c) t[static_cast<int64_t>(b) * 3 * side * side + c] = labels[b][c];
  return t;
}

}  // namespace wsseg::testing
