#include "wsseg/encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>
#include <sstream>

namespace wsseg {

namespace {

// Fixed word list of the mock vocabulary; order defines ids starting at kWordBase.
constexpr const char* kWords[] = {
    "a", "an", "the", "of", "and", "or", "with", "in", "on", "at", "by", "for", "from", "to", "is", "are",
    "showing", "shows", "containing", "composed", "made", "up", "into", "within", "between", "around",
    "histopathology", "histology", "pathology", "image", "photo", "patch", "slide", "section", "tissue",
    "tissues", "region", "regions", "area", "areas", "field", "view", "microscopy", "stained", "staining",
    "h&e", "hematoxylin", "eosin", "breast", "cancer", "carcinoma", "tumor", "tumour", "tumoral",
    "malignant", "neoplastic", "epithelial", "epithelium", "cells", "cell", "nuclei", "nucleus", "nuclear",
    "large", "small", "dense", "densely", "packed", "crowded", "irregular", "pleomorphic", "atypical",
    "hyperchromatic", "vesicular", "prominent", "nucleoli", "mitotic", "figures", "sheets", "nests",
    "clusters", "cords", "glands", "glandular", "invasive", "ductal", "solid", "stroma", "stromal",
    "fibrous", "fibrotic", "collagen", "collagenous", "connective", "desmoplastic", "spindle", "shaped",
    "fibroblasts", "wavy", "bundles", "fibers", "pink", "pale", "eosinophilic", "extracellular", "matrix",
    "sparse", "scattered", "elongated", "lymphocytes", "lymphocyte", "lymphocytic", "lymphoid",
    "inflammatory", "infiltrate", "infiltrates", "infiltration", "immune", "round", "dark", "blue",
    "purple", "basophilic", "aggregates", "aggregate", "plasma", "rich", "necrosis", "necrotic", "dead",
    "debris", "cellular", "karyorrhexis", "karyorrhectic", "fragments", "fragmented", "ghost",
    "amorphous", "granular", "loss", "architecture", "structure", "structures",
    "without", "no", "absent", "viable", "surrounded", "adjacent", "texture", "textured", "smooth",
    "heterogeneous", "homogeneous", "uniform", "many", "few", "numerous", "high", "low", "grade",
    "density", "cytoplasm", "cytoplasmic", "scant", "abundant", "background", "tumors", "space",
    "spaces", "vessels", "vascular", "blood", "red", "fat", "adipose", "white", "clear", "bright",
    "light", "intense", "mild", "moderate", "marked", "focal", "diffuse", "pattern", "patterns",
    "typical", "appearance", "like", "similar", "mixed", "zone", "zones", "center", "central", "edge",
    "border", "boundary", "layer", "layers", "this", "that", "these", "it", "has", "have", "be",
    "appears", "seen", "visible", "predominantly", "mostly", "mainly", "primarily", "some", "all",
    "x", "class", "type", "kind", "sample", "specimen", "microscopic", "magnification", "cytology",
    "morphology", "morphological", "features", "feature", "shape", "size", "color", "colour",
};

constexpr int64_t kWordCount = static_cast<int64_t>(sizeof(kWords) / sizeof(kWords[0]));
static_assert(Tokenizer::kWordBase + kWordCount <= Tokenizer::kVocabSize, "vocabulary overflow");

std::vector<std::string> split_words(const std::string& normalized) {
  std::vector<std::string> out;
  std::istringstream is(normalized);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

Tensor init_weight(Shape s, std::mt19937_64& rng, double scale) {
  const double fan_in = static_cast<double>(s[0]);
  Tensor t = Tensor::randn(std::move(s), rng, 1.0 / std::sqrt(fan_in));
  for (double& v : t.data) v *= scale;
  return t;
}

}  // namespace

void EncoderSpec::validate(int64_t num_layers) const {
  if (patch_grid_side <= 0 || patch_size <= 0 || vit_dim <= 0 || text_dim <= 0 || embed_dim <= 0)
    throw ConfigError("encoder dimensions must be positive");
  if (prompt_len != 77) throw ConfigError("prompt_len must be 77");
  if (tap_layers.size() != 4) throw ConfigError("exactly 4 tap layers are required");
  for (size_t i = 0; i < tap_layers.size(); ++i) {
    const int64_t l = tap_layers[i] - layer_index_base;
    if (l < 0 || l >= num_layers)
      throw ConfigError("tap layer " + std::to_string(tap_layers[i]) + " outside the " +
                        std::to_string(num_layers) + "-block encoder");
    if (i > 0 && tap_layers[i] <= tap_layers[i - 1]) throw ConfigError("tap layers must be strictly increasing");
  }
  if (layer_index_base != 0 && layer_index_base != 1) throw ConfigError("layer_index_base must be 0 or 1");
}

Tokenizer::Tokenizer() {
  for (int64_t i = 0; i < kWordCount; ++i) {
    std::string w = kWords[i];
    if (word_ids_.count(w)) continue;  // duplicates keep their first id
    word_ids_.emplace(w, kWordBase + i);
  }
  words_.assign(kWords, kWords + kWordCount);
}

std::string Tokenizer::normalize(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(u)));
  }
  return out;
}

std::vector<int64_t> Tokenizer::encode_content(std::string_view text) const {
  std::vector<int64_t> ids;
  const auto words = split_words(normalize(text));
  for (size_t i = 0; i < words.size(); ++i) {
    auto it = word_ids_.find(words[i]);
    if (it != word_ids_.end()) {
      ids.push_back(it->second);
      continue;
    }
    if (i > 0) ids.push_back(kByteBase + static_cast<unsigned char>(' '));
    for (char ch : words[i]) ids.push_back(kByteBase + static_cast<unsigned char>(ch));
  }
  return ids;
}

TokenizedText Tokenizer::encode(std::string_view text, int64_t prompt_len) const {
  if (prompt_len < 2) throw ConfigError("prompt length must be at least 2");
  auto content = encode_content(text);
  if (static_cast<int64_t>(content.size()) > prompt_len - 2) content.resize(prompt_len - 2);
  TokenizedText t;
  t.ids.assign(prompt_len, kPad);
  t.ids[0] = kBos;
  std::copy(content.begin(), content.end(), t.ids.begin() + 1);
  t.eot_index = 1 + static_cast<int64_t>(content.size());
  t.ids[t.eot_index] = kEos;
  return t;
}

std::string Tokenizer::decode(std::span<const int64_t> ids) const {
  std::string out;
  for (int64_t id : ids) {
    if (id == kPad || id == kBos || id == kEos || id == kFiller) continue;
    if (id >= kByteBase && id < kWordBase) {
      out.push_back(static_cast<char>(id - kByteBase));
    } else if (id >= kWordBase && id - kWordBase < static_cast<int64_t>(words_.size())) {
      if (!out.empty()) out.push_back(' ');
      out += words_[id - kWordBase];
    } else {
      throw ValidationError("token id " + std::to_string(id) + " outside the vocabulary");
    }
  }
  return out;
}

void HiddenStateSet::validate() const {
  if (grids.size() != 4) throw ValidationError("hidden state set must hold 4 grids");
  for (const Tensor& g : grids) {
    if (g.ndim() != 4 || g.shape != grids[0].shape)
      throw ValidationError("hidden state grids must share one 4-D shape");
    if (!g.all_finite()) throw ValidationError("hidden state grid contains non-finite values");
  }
}

MockEncoder::MockEncoder(MockEncoderConfig cfg) : cfg_(std::move(cfg)) {
  const EncoderSpec& s = cfg_.spec;
  s.validate(cfg_.image_blocks);
  if (s.vit_dim % cfg_.heads != 0 || s.text_dim % cfg_.heads != 0)
    throw ConfigError("encoder widths must be divisible by the head count");
  std::mt19937_64 rng(cfg_.seed);
  const double ws = cfg_.weight_scale;
  auto c = [](Tensor t) { return ag::constant(std::move(t)); };
  const int64_t pdim = 3 * s.patch_size * s.patch_size;
  patch_w_ = c(init_weight({pdim, s.vit_dim}, rng, ws));
  patch_b_ = c(Tensor::zeros({s.vit_dim}));
  Tensor cls = Tensor::randn({1, s.vit_dim}, rng, 0.02 * ws);
  cls_ = c(std::move(cls));
  Tensor ipos = Tensor::randn({1 + s.token_count(), s.vit_dim}, rng, 0.02 * ws);
  img_pos_ = c(std::move(ipos));

  auto make_block = [&](int64_t d) {
    const int64_t hid = d * cfg_.mlp_ratio;
    Block b;
    b.ln1_g = c(Tensor::full({d}, 1.0));
    b.ln1_b = c(Tensor::zeros({d}));
    b.wq = c(init_weight({d, d}, rng, ws));
    b.bq = c(Tensor::zeros({d}));
    b.wk = c(init_weight({d, d}, rng, ws));
    b.bk = c(Tensor::zeros({d}));
    b.wv = c(init_weight({d, d}, rng, ws));
    b.bv = c(Tensor::zeros({d}));
    b.wo = c(init_weight({d, d}, rng, 0.5 * ws));
    b.bo = c(Tensor::zeros({d}));
    b.ln2_g = c(Tensor::full({d}, 1.0));
    b.ln2_b = c(Tensor::zeros({d}));
    b.w1 = c(init_weight({d, hid}, rng, ws));
    b.b1 = c(Tensor::zeros({hid}));
    b.w2 = c(init_weight({hid, d}, rng, 0.5 * ws));
    b.b2 = c(Tensor::zeros({d}));
    return b;
  };
  for (int64_t i = 0; i < cfg_.image_blocks; ++i) image_blocks_.push_back(make_block(s.vit_dim));
  img_ln_g_ = c(Tensor::full({s.vit_dim}, 1.0));
  img_ln_b_ = c(Tensor::zeros({s.vit_dim}));
  img_proj_ = c(init_weight({s.vit_dim, s.embed_dim}, rng, ws));

  tok_emb_ = c(Tensor::randn({Tokenizer::kVocabSize, s.text_dim}, rng, ws));
  txt_pos_ = c(Tensor::randn({s.prompt_len, s.text_dim}, rng, 0.02 * ws));
  for (int64_t i = 0; i < cfg_.text_blocks; ++i) text_blocks_.push_back(make_block(s.text_dim));
  txt_ln_g_ = c(Tensor::full({s.text_dim}, 1.0));
  txt_ln_b_ = c(Tensor::zeros({s.text_dim}));
  text_proj_ = c(init_weight({s.text_dim, s.embed_dim}, rng, ws));
}

std::vector<ag::Var> MockEncoder::frozen_parameters() const {
  std::vector<ag::Var> out{patch_w_, patch_b_, cls_,     img_pos_,  img_ln_g_, img_ln_b_,
                           img_proj_, tok_emb_, txt_pos_, txt_ln_g_, txt_ln_b_, text_proj_};
  for (const auto* blocks : {&image_blocks_, &text_blocks_})
    for (const Block& b : *blocks)
      out.insert(out.end(), {b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g, b.ln2_b,
                             b.w1, b.b1, b.w2, b.b2});
  return out;
}

ag::Var MockEncoder::run_block(const Block& blk, const ag::Var& x, bool causal) const {
  using namespace ag;
  Var h = layer_norm(x, blk.ln1_g, blk.ln1_b);
  Var q = linear(h, blk.wq, blk.bq);
  Var k = linear(h, blk.wk, blk.bk);
  Var v = linear(h, blk.wv, blk.bv);
  Var a = attention(q, k, v, cfg_.heads, causal);
  Var x1 = add(x, linear(a, blk.wo, blk.bo));
  Var h2 = layer_norm(x1, blk.ln2_g, blk.ln2_b);
  Var m = linear(gelu(linear(h2, blk.w1, blk.b1)), blk.w2, blk.b2);
  return add(x1, m);
}

void MockEncoder::check_images(const Tensor& images) const {
  const EncoderSpec& s = cfg_.spec;
  if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != s.image_side() || images.dim(3) != s.image_side())
    throw ValidationError("encode_image: expected [B,3," + std::to_string(s.image_side()) + "," +
                          std::to_string(s.image_side()) + "], got " + shape_str(images.shape));
  if (!images.all_finite()) throw ValidationError("encode_image: non-finite pixel values");
}

Tensor MockEncoder::patchify(const Tensor& images, int64_t b, int64_t p) {
  const int64_t H = images.dim(2), W = images.dim(3);
  const int64_t gh = H / p, gw = W / p;
  Tensor out({gh * gw, 3 * p * p});
  for (int64_t gy = 0; gy < gh; ++gy)
    for (int64_t gx = 0; gx < gw; ++gx) {
      double* row = out.ptr() + (gy * gw + gx) * 3 * p * p;
      for (int64_t c = 0; c < 3; ++c)
        for (int64_t py = 0; py < p; ++py)
          for (int64_t px = 0; px < p; ++px)
            row[(c * p + py) * p + px] = images.ptr()[((b * 3 + c) * H + gy * p + py) * W + gx * p + px];
    }
  return out;
}

ag::Var MockEncoder::embed_image(const Tensor& images, int64_t b) const {
  using namespace ag;
  Var tokens = linear(constant(patchify(images, b, cfg_.spec.patch_size)), patch_w_, patch_b_);
  return add(concat_rows({cls_, tokens}), img_pos_);
}

HiddenStateSet MockEncoder::encode_image(const Tensor& images) const {
  check_images(images);
  ag::NoGradGuard guard;
  const EncoderSpec& s = cfg_.spec;
  const int64_t B = images.dim(0), G = s.patch_grid_side, D = s.vit_dim;
  std::vector<int64_t> taps;
  for (int64_t l : s.tap_layers) taps.push_back(l - s.layer_index_base);
  HiddenStateSet out;
  for (size_t i = 0; i < taps.size(); ++i) out.grids.emplace_back(Shape{B, D, G, G});
  for (int64_t b = 0; b < B; ++b) {
    ag::Var x = embed_image(images, b);
    size_t next = 0;
    for (int64_t l = 0; l <= taps.back(); ++l) {
      ag::Var pre = x;
      x = run_block(image_blocks_[l], x, false);
      while (next < taps.size() && taps[next] == l) {
        const Tensor& src = (s.tap_point == TapPoint::kPostBlock ? x : pre)->value;
        Tensor& g = out.grids[next];
        for (int64_t t = 0; t < G * G; ++t)
          for (int64_t d = 0; d < D; ++d) g.ptr()[(b * D + d) * G * G + t] = src[(1 + t) * D + d];
        ++next;
      }
    }
  }
  return out;
}

Tensor MockEncoder::encode_image_global(const Tensor& images) const {
  check_images(images);
  ag::NoGradGuard guard;
  const int64_t B = images.dim(0), E = cfg_.spec.embed_dim;
  Tensor out({B, E});
  for (int64_t b = 0; b < B; ++b) {
    ag::Var x = embed_image(images, b);
    for (const Block& blk : image_blocks_) x = run_block(blk, x, false);
    ag::Var cls = ag::layer_norm(ag::slice_rows(x, 0, 1), img_ln_g_, img_ln_b_);
    ag::Var e = ag::matmul(cls, img_proj_);
    std::copy(e->value.data.begin(), e->value.data.end(), out.data.begin() + b * E);
  }
  return out;
}

Tensor MockEncoder::token_embedding(std::span<const int64_t> ids) const {
  const int64_t D = cfg_.spec.text_dim;
  Tensor out({static_cast<int64_t>(ids.size()), D});
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= Tokenizer::kVocabSize) throw ValidationError("token id outside the vocabulary");
    std::copy_n(tok_emb_->value.ptr() + ids[i] * D, D, out.ptr() + i * D);
  }
  return out;
}

ag::Var MockEncoder::encode_text_from_embeddings(const ag::Var& embedded, int64_t eot_index) const {
  const EncoderSpec& s = cfg_.spec;
  if (embedded->value.ndim() != 2 || embedded->value.dim(1) != s.text_dim || embedded->value.dim(0) > s.prompt_len)
    throw ValidationError("encode_text: expected at most [" + std::to_string(s.prompt_len) + "," +
                          std::to_string(s.text_dim) + "], got " + shape_str(embedded->shape()));
  if (eot_index < 0 || eot_index >= embedded->value.dim(0) || eot_index >= s.prompt_len)
    throw ValidationError("encode_text: eot_index " + std::to_string(eot_index) + " out of range");
  // Causal attention: rows after the end-of-text position cannot influence it.
  const int64_t n = eot_index + 1;
  ag::Var x = ag::slice_rows(embedded, 0, n);
  x = ag::add(x, ag::constant(wsseg::slice_rows(txt_pos_->value, 0, n)));
  for (const Block& blk : text_blocks_) x = run_block(blk, x, true);
  return ag::slice_rows(x, eot_index, 1);
}

Tensor MockEncoder::encode_text_global(const TokenizedText& tokens) const {
  ag::NoGradGuard guard;
  ag::Var emb = ag::constant(token_embedding(tokens.ids));
  ag::Var h = encode_text_from_embeddings(emb, tokens.eot_index);
  return ag::matmul(ag::layer_norm(h, txt_ln_g_, txt_ln_b_), text_proj_)->value;
}

std::shared_ptr<const VisionLanguageEncoder> make_encoder(const std::string& name, const MockEncoderConfig& cfg,
                                                          const std::string& weights_path) {
  if (name == "mock") {
    if (!weights_path.empty()) throw ConfigError("the mock encoder does not load weights (encoder.weights_path)");
    return std::make_shared<MockEncoder>(cfg);
  }
  throw ConfigError("unknown encoder '" + name + "'; only 'mock' is built in");
}

}  // namespace wsseg
