#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "wsseg/autograd.hpp"
#include "wsseg/tensor.hpp"

namespace wsseg {

/// Where a tap reads the residual stream relative to its transformer block.
enum class TapPoint { kPostBlock, kPreBlock };

struct EncoderSpec {
  int64_t patch_grid_side = 14;  // H' = W'
  int64_t patch_size = 16;
  int64_t vit_dim = 64;
  int64_t text_dim = 64;
  int64_t embed_dim = 64;  // shared image/text embedding width after the pretrained projections
  int64_t prompt_len = 77;
  std::vector<int64_t> tap_layers{2, 5, 8, 11};
  int64_t layer_index_base = 0;
  TapPoint tap_point = TapPoint::kPostBlock;

  int64_t image_side() const { return patch_grid_side * patch_size; }
  int64_t token_count() const { return patch_grid_side * patch_grid_side; }
  /// Throws ConfigError unless taps are 4 strictly increasing in-range layers and prompt_len = 77.
  void validate(int64_t num_layers) const;
};

struct TokenizedText {
  std::vector<int64_t> ids;  // exactly prompt_len entries
  int64_t eot_index = 0;
};

/// Whitespace word vocabulary with a byte fallback for out-of-vocabulary words.
///
/// Ids: 0 PAD, 1 BOS, 2 EOS, 3 context filler, 4..259 raw bytes, 260.. words.
/// A word token after the first word implies a separating space; an out-of-vocabulary
/// word after the first is spelled as the space byte followed by its own bytes.
class Tokenizer {
 public:
  static constexpr int64_t kPad = 0;
  static constexpr int64_t kBos = 1;
  static constexpr int64_t kEos = 2;
  static constexpr int64_t kFiller = 3;
  static constexpr int64_t kByteBase = 4;
  static constexpr int64_t kWordBase = 260;
  static constexpr int64_t kVocabSize = 512;

  Tokenizer();

  /// Lower-cases ASCII and collapses whitespace runs to single spaces.
  static std::string normalize(std::string_view text);
  /// Content token ids without BOS/EOS/PAD.
  std::vector<int64_t> encode_content(std::string_view text) const;
  /// [BOS, content (truncated), EOS, PAD...] of exactly prompt_len ids.
  TokenizedText encode(std::string_view text, int64_t prompt_len = 77) const;
  /// Inverse of encode_content for normalized text; special ids are skipped.
  std::string decode(std::span<const int64_t> ids) const;

  int64_t vocab_size() const { return kVocabSize; }
  bool has_word(std::string_view w) const { return word_ids_.count(std::string(w)) > 0; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int64_t> word_ids_;
};

/// Four tapped hidden-state grids, each [B, D_vit, H', W'].
struct HiddenStateSet {
  std::vector<Tensor> grids;
  void validate() const;
};

/// Frozen vision-language backbone interface.
class VisionLanguageEncoder {
 public:
  virtual ~VisionLanguageEncoder() = default;

  virtual const EncoderSpec& spec() const = 0;
  virtual const Tokenizer& tokenizer() const = 0;
  virtual std::string name() const = 0;

  /// images: [B, 3, H, W], H = W = patch_grid_side * patch_size.
  virtual HiddenStateSet encode_image(const Tensor& images) const = 0;
  /// Pooled image embeddings after the pretrained visual projection, [B, embed_dim].
  virtual Tensor encode_image_global(const Tensor& images) const = 0;
  /// Frozen token embeddings, [n, D_text].
  virtual Tensor token_embedding(std::span<const int64_t> ids) const = 0;
  /// Transformer output row at eot_index, [1, D_text], before any final norm or projection.
  /// Gradients propagate into `embedded` only.
  virtual ag::Var encode_text_from_embeddings(const ag::Var& embedded, int64_t eot_index) const = 0;
  /// Frozen sentence embedding for a tokenized prompt, [1, embed_dim].
  virtual Tensor encode_text_global(const TokenizedText& tokens) const = 0;
  /// Pretrained text projection [D_text, embed_dim], if the backbone has one.
  virtual std::optional<Tensor> text_projection() const { return std::nullopt; }
  virtual std::vector<ag::Var> frozen_parameters() const = 0;
};

struct MockEncoderConfig {
  EncoderSpec spec;
  int64_t image_blocks = 12;
  int64_t text_blocks = 12;
  int64_t heads = 4;
  int64_t mlp_ratio = 2;
  uint64_t seed = 1234;
  /// Multiplies every random weight; 0 gives an all-zero network whose blocks are identities.
  double weight_scale = 1.0;
};

/// Deterministic toy ViT + causal text transformer with real tap semantics.
class MockEncoder final : public VisionLanguageEncoder {
 public:
  struct Block {
    ag::Var ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  explicit MockEncoder(MockEncoderConfig cfg = {});

  const EncoderSpec& spec() const override { return cfg_.spec; }
  const Tokenizer& tokenizer() const override { return tokenizer_; }
  std::string name() const override { return "mock"; }
  const MockEncoderConfig& config() const { return cfg_; }

  HiddenStateSet encode_image(const Tensor& images) const override;
  Tensor encode_image_global(const Tensor& images) const override;
  Tensor token_embedding(std::span<const int64_t> ids) const override;
  ag::Var encode_text_from_embeddings(const ag::Var& embedded, int64_t eot_index) const override;
  Tensor encode_text_global(const TokenizedText& tokens) const override;
  std::optional<Tensor> text_projection() const override { return text_proj_->value; }
  std::vector<ag::Var> frozen_parameters() const override;

  // Read access for independent reference computations.
  const std::vector<Block>& image_blocks() const { return image_blocks_; }
  const std::vector<Block>& text_blocks() const { return text_blocks_; }
  const Tensor& patch_weight() const { return patch_w_->value; }
  const Tensor& patch_bias() const { return patch_b_->value; }
  const Tensor& class_token() const { return cls_->value; }
  const Tensor& image_positions() const { return img_pos_->value; }
  const Tensor& text_positions() const { return txt_pos_->value; }
  int64_t heads() const { return cfg_.heads; }

  /// Patch tokens [G*G, 3*p*p] of one image, row-major over the grid, (c, py, px) within a patch.
  static Tensor patchify(const Tensor& images, int64_t b, int64_t patch);

 private:
  ag::Var run_block(const Block& blk, const ag::Var& x, bool causal) const;
  /// Residual stream after the patch embedding: [1 + G*G, D_vit].
  ag::Var embed_image(const Tensor& images, int64_t b) const;
  void check_images(const Tensor& images) const;

  MockEncoderConfig cfg_;
  Tokenizer tokenizer_;
  ag::Var patch_w_, patch_b_, cls_, img_pos_, img_ln_g_, img_ln_b_, img_proj_;
  ag::Var tok_emb_, txt_pos_, txt_ln_g_, txt_ln_b_, text_proj_;
  std::vector<Block> image_blocks_, text_blocks_;
};

/// Builds an encoder from a name ("mock" only; real-weight adapters plug in here).
std::shared_ptr<const VisionLanguageEncoder> make_encoder(const std::string& name, const MockEncoderConfig& cfg,
                                                          const std::string& weights_path = "");

}  // namespace wsseg
