#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "wsseg/encoder.hpp"
#include "wsseg/params.hpp"

namespace wsseg {

struct PromptOptions {
  int64_t n_ctx = 16;
  int64_t n_desc = 10;
  double sigma = 0.02;
  std::string template_text = "a histopathology image of";
  bool class_specific = true;
  int64_t d_img = 64;
};

/// Frozen template embedding padded with the filler token to n_ctx rows: [n_ctx, D_text].
Tensor template_embedding(const VisionLanguageEncoder& enc, const std::string& template_text, int64_t n_ctx);

/// Context rows for `num_sets` token sets: template embedding plus N(0, sigma^2) noise,
/// [num_sets * n_ctx, D_text].
Tensor init_context(const VisionLanguageEncoder& enc, const std::string& template_text, int64_t num_sets,
                    int64_t n_ctx, double sigma, std::mt19937_64& rng);

/// Unit-norm text prototypes, one row per (class, description), class-major.
struct TextPrototypeSet {
  ag::Var vectors;  // [sum_c n_desc(c), D_img]
  std::vector<std::pair<int64_t, int64_t>> owner;
};

struct AssembledPrompt {
  ag::Var embedded;  // [prompt_len, D_text]
  int64_t eot_index = 0;
};

/// Learnable context tokens spliced ahead of frozen class descriptions.
class PromptLearner {
 public:
  /// descriptions[c] holds the descriptions of class c; only the first n_desc are used.
  PromptLearner(const VisionLanguageEncoder& enc, std::vector<std::vector<std::string>> descriptions,
                const PromptOptions& opt, ParamSet& params, std::mt19937_64& rng);

  int64_t num_classes() const { return static_cast<int64_t>(descriptions_.size()); }
  int64_t num_descriptions(int64_t c) const { return static_cast<int64_t>(desc_tokens_.at(c).size()); }
  const PromptOptions& options() const { return opt_; }
  const std::vector<std::vector<std::string>>& descriptions() const { return descriptions_; }

  /// [BOS, T_c, description tokens, EOS, PAD...], description truncated so EOS fits.
  AssembledPrompt assemble(int64_t c, int64_t d) const;
  /// normalize(LayerNorm(EOT output) W_proj) for every (class, description).
  TextPrototypeSet compute(const VisionLanguageEncoder& enc) const;

  /// Context rows of class c, [n_ctx, D_text].
  ag::Var context(int64_t c) const;

  ag::Var ctx;  // [sets * n_ctx, D_text]; sets = C when class-specific, else 1
  ag::Var ln_g, ln_b;
  ag::Var w_proj;  // [D_text, D_img]

 private:
  const VisionLanguageEncoder* enc_;
  PromptOptions opt_;
  std::vector<std::vector<std::string>> descriptions_;
  std::vector<std::vector<std::vector<int64_t>>> desc_tokens_;
  Tensor bos_;
};

}  // namespace wsseg
