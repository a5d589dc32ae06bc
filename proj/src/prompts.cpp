#include "wsseg/prompts.hpp"

#include <Eigen/Dense>

namespace wsseg {

namespace {

// Semi-orthogonal [rows, cols] matrix from the QR factorization of a Gaussian draw.
Tensor orthogonal_init(int64_t rows, int64_t cols, std::mt19937_64& rng) {
  const int64_t big = std::max(rows, cols), small = std::min(rows, cols);
  Eigen::MatrixXd g(big, small);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (int64_t i = 0; i < big; ++i)
    for (int64_t j = 0; j < small; ++j) g(i, j) = dist(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  Tensor out({rows, cols});
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) out[i * cols + j] = rows >= cols ? q(i, j) : q(j, i);
  return out;
}

}  // namespace

Tensor template_embedding(const VisionLanguageEncoder& enc, const std::string& template_text, int64_t n_ctx) {
  if (n_ctx <= 0) throw ConfigError("prompts.n_ctx must be positive, got " + std::to_string(n_ctx));
  std::vector<int64_t> ids = enc.tokenizer().encode_content(template_text);
  ids.resize(static_cast<size_t>(n_ctx), Tokenizer::kFiller);
  return enc.token_embedding(ids);
}

Tensor init_context(const VisionLanguageEncoder& enc, const std::string& template_text, int64_t num_sets,
                    int64_t n_ctx, double sigma, std::mt19937_64& rng) {
  if (num_sets <= 0) throw ConfigError("context needs at least one token set");
  if (sigma < 0.0) throw ConfigError("prompts.sigma must be non-negative");
  const Tensor base = template_embedding(enc, template_text, n_ctx);
  const int64_t D = base.dim(1);
  Tensor ctx({num_sets * n_ctx, D});
  std::normal_distribution<double> noise(0.0, sigma > 0.0 ? sigma : 1.0);
  for (int64_t s = 0; s < num_sets; ++s)
    for (int64_t i = 0; i < n_ctx * D; ++i)
      ctx[s * n_ctx * D + i] = base[i] + (sigma > 0.0 ? noise(rng) : 0.0);
  return ctx;
}

PromptLearner::PromptLearner(const VisionLanguageEncoder& enc, std::vector<std::vector<std::string>> descriptions,
                             const PromptOptions& opt, ParamSet& params, std::mt19937_64& rng)
    : enc_(&enc), opt_(opt), descriptions_(std::move(descriptions)) {
  if (descriptions_.empty()) throw ConfigError("prompt learner needs at least one class");
  if (opt_.n_desc <= 0) throw ConfigError("prompts.n_desc must be positive for the text branch");
  const EncoderSpec& spec = enc.spec();
  if (opt_.n_ctx + 3 > spec.prompt_len) throw ConfigError("prompts.n_ctx leaves no room in the prompt");
  for (size_t c = 0; c < descriptions_.size(); ++c) {
    auto& list = descriptions_[c];
    if (list.empty()) throw ConfigError("class " + std::to_string(c) + " has no descriptions");
    if (static_cast<int64_t>(list.size()) > opt_.n_desc) list.resize(static_cast<size_t>(opt_.n_desc));
  }

  const int64_t C = num_classes();
  const int64_t sets = opt_.class_specific ? C : 1;
  ctx = params.add("prompts.ctx", init_context(enc, opt_.template_text, sets, opt_.n_ctx, opt_.sigma, rng));
  ln_g = params.add("prompts.ln.g", Tensor::full({spec.text_dim}, 1.0));
  ln_b = params.add("prompts.ln.b", Tensor::zeros({spec.text_dim}));
  auto pretrained = enc.text_projection();
  if (pretrained && pretrained->shape == Shape{spec.text_dim, opt_.d_img})
    w_proj = params.add("prompts.w_proj", *pretrained);
  else
    w_proj = params.add("prompts.w_proj", orthogonal_init(spec.text_dim, opt_.d_img, rng));

  const int64_t max_desc = spec.prompt_len - 2 - opt_.n_ctx;
  const int64_t bos = Tokenizer::kBos;
  bos_ = enc.token_embedding(std::span<const int64_t>(&bos, 1));
  desc_tokens_.resize(C);
  for (int64_t c = 0; c < C; ++c)
    for (const std::string& d : descriptions_[c]) {
      auto ids = enc.tokenizer().encode_content(d);
      if (static_cast<int64_t>(ids.size()) > max_desc) ids.resize(static_cast<size_t>(max_desc));
      desc_tokens_[c].push_back(std::move(ids));
    }
}

ag::Var PromptLearner::context(int64_t c) const {
  if (c < 0 || c >= num_classes()) throw ValidationError("class index " + std::to_string(c) + " out of range");
  const int64_t set = opt_.class_specific ? c : 0;
  return ag::slice_rows(ctx, set * opt_.n_ctx, opt_.n_ctx);
}

AssembledPrompt PromptLearner::assemble(int64_t c, int64_t d) const {
  if (c < 0 || c >= num_classes() || d < 0 || d >= num_descriptions(c))
    throw ValidationError("prompt index (" + std::to_string(c) + "," + std::to_string(d) + ") out of range");
  const int64_t L = enc_->spec().prompt_len;
  std::vector<int64_t> tail = desc_tokens_[c][d];
  tail.push_back(Tokenizer::kEos);
  const int64_t eot = 1 + opt_.n_ctx + static_cast<int64_t>(tail.size()) - 1;
  tail.resize(static_cast<size_t>(L - 1 - opt_.n_ctx), Tokenizer::kPad);
  AssembledPrompt out;
  out.embedded = ag::concat_rows({ag::constant(bos_), context(c), ag::constant(enc_->token_embedding(tail))});
  out.eot_index = eot;
  return out;
}

TextPrototypeSet PromptLearner::compute(const VisionLanguageEncoder& enc) const {
  TextPrototypeSet out;
  std::vector<ag::Var> rows;
  for (int64_t c = 0; c < num_classes(); ++c)
    for (int64_t d = 0; d < num_descriptions(c); ++d) {
      AssembledPrompt p = assemble(c, d);
      ag::Var h = enc.encode_text_from_embeddings(p.embedded, p.eot_index);
      rows.push_back(ag::matmul(ag::layer_norm(h, ln_g, ln_b), w_proj));
      out.owner.emplace_back(c, d);
    }
  out.vectors = ag::normalize_rows(ag::concat_rows(rows));
  return out;
}

}  // namespace wsseg
