#include "wsseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace wsseg {

void TrainConfig::validate() const {
  if (lr < 0.0 || weight_decay < 0.0) throw ConfigError("train.lr and train.weight_decay must be >= 0");
  if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0))
    throw ConfigError("AdamW betas must lie in [0, 1) and eps must be positive");
  bool any = false;
  for (double l : loss.level_weights) {
    if (l < 0.0) throw ConfigError("loss.lambdas must be non-negative");
    any = any || l > 0.0;
  }
  if (!any) throw ConfigError("loss.lambdas must not all be zero");
  if (loss.align_weight < 0.0 || loss.diversity_weight < 0.0)
    throw ConfigError("regularizer weights must be non-negative");
}

void AdamW::step(const ParamSet& params) {
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (const NamedParam& p : params.items()) {
    ag::Node& n = *p.var;
    if (!n.has_grad()) continue;
    auto [mit, m_new] = state_.m.try_emplace(p.name, Tensor::zeros(n.value.shape));
    auto [vit, v_new] = state_.v.try_emplace(p.name, Tensor::zeros(n.value.shape));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
    for (int64_t i = 0; i < n.value.numel(); ++i) {
      const double g = n.grad[i];
      n.value[i] *= decay;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      n.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void AdamW::load_state(const AdamState& s, const ParamSet& params) {
  for (const auto* moments : {&s.m, &s.v})
    for (const auto& [name, t] : *moments) {
      if (!params.contains(name)) throw ValidationError("optimizer state for unknown parameter " + name);
      if (params.find(name)->value.shape != t.shape)
        throw ValidationError("shape mismatch for optimizer state of " + name + ": stored " + shape_str(t.shape) +
                              " vs model " + shape_str(params.find(name)->value.shape));
    }
  state_ = s;
}

void apply_checkpoint(const Model& model, const Checkpoint& ckpt, bool use_best) {
  model.params().restore(use_best ? ckpt.best_params : ckpt.params);
}

Tensor stack_images(const std::vector<Sample>& samples, const std::vector<size_t>& idx) {
  if (idx.empty()) throw ValidationError("cannot stack an empty batch");
  const Shape& s = samples.at(idx[0]).image.shape;
  if (s.size() != 3) throw ValidationError("sample images must be [3,H,W]");
  Tensor out({static_cast<int64_t>(idx.size()), s[0], s[1], s[2]});
  const int64_t per = shape_numel(s);
  for (size_t b = 0; b < idx.size(); ++b) {
    const Tensor& img = samples.at(idx[b]).image;
    if (img.shape != s) throw ValidationError("sample " + samples[idx[b]].id + " has a different image size");
    std::copy(img.data.begin(), img.data.end(), out.data.begin() + static_cast<int64_t>(b) * per);
  }
  return out;
}

Tensor stack_labels(const std::vector<Sample>& samples, const std::vector<size_t>& idx) {
  const auto C = static_cast<int64_t>(samples.at(idx.at(0)).label.size());
  Tensor out({static_cast<int64_t>(idx.size()), C});
  for (size_t b = 0; b < idx.size(); ++b) {
    const auto& l = samples.at(idx[b]).label;
    if (static_cast<int64_t>(l.size()) != C) throw ValidationError("label length differs within a batch");
    std::copy(l.begin(), l.end(), out.data.begin() + static_cast<int64_t>(b) * C);
  }
  return out;
}

namespace {

std::vector<std::vector<size_t>> batches_of(size_t n, int64_t batch) {
  std::vector<std::vector<size_t>> out;
  for (size_t s = 0; s < n; s += static_cast<size_t>(batch)) {
    std::vector<size_t> b;
    for (size_t i = s; i < std::min(n, s + static_cast<size_t>(batch)); ++i) b.push_back(i);
    out.push_back(std::move(b));
  }
  return out;
}

HiddenStateSet stack_hidden(const std::vector<HiddenStateSet>& cache, const std::vector<size_t>& idx) {
  HiddenStateSet out;
  for (size_t g = 0; g < 4; ++g) {
    const Shape& s = cache.at(idx[0]).grids[g].shape;
    Tensor t({static_cast<int64_t>(idx.size()), s[1], s[2], s[3]});
    const int64_t per = s[1] * s[2] * s[3];
    for (size_t b = 0; b < idx.size(); ++b) {
      const Tensor& src = cache.at(idx[b]).grids[g];
      std::copy(src.data.begin(), src.data.end(), t.data.begin() + static_cast<int64_t>(b) * per);
    }
    out.grids.push_back(std::move(t));
  }
  return out;
}

std::string breakdown_text(const LossBreakdown& l) {
  std::ostringstream os;
  os << "total=" << l.total->value[0];
  for (int i = 0; i < 4; ++i) os << " level" << (i + 1) << "=" << l.level[i];
  os << " align=" << l.align << " diversity=" << l.diversity;
  return os.str();
}

ConfusionCounts evaluate_cached(const Model& model, const std::vector<Sample>& samples,
                                const std::vector<HiddenStateSet>& cache, int64_t batch_size, int32_t ignore_index) {
  ag::NoGradGuard guard;
  ConfusionCounts counts(model.num_classes(), ignore_index);
  const int64_t H = samples[0].image.dim(1), W = samples[0].image.dim(2);
  for (const auto& idx : batches_of(samples.size(), batch_size)) {
    const ForwardOutput out = model.forward_hidden(stack_hidden(cache, idx), H, W);
    const std::vector<Mask> pred = pseudo_mask(out.class_scores->value);
    for (size_t j = 0; j < idx.size(); ++j) accumulate(pred[j], *samples[idx[j]].mask, counts);
  }
  return counts;
}

}  // namespace

ConfusionCounts evaluate_pseudo_masks(const Model& model, const std::vector<Sample>& samples, int64_t batch_size,
                                      int32_t ignore_index) {
  ConfusionCounts counts(model.num_classes(), ignore_index);
  std::vector<size_t> with_mask;
  for (size_t i = 0; i < samples.size(); ++i)
    if (samples[i].mask) with_mask.push_back(i);
  for (const auto& b : batches_of(with_mask.size(), batch_size)) {
    std::vector<size_t> idx;
    for (size_t i : b) idx.push_back(with_mask[i]);
    const std::vector<Mask> pred = pseudo_mask(model.class_score_maps(stack_images(samples, idx)));
    for (size_t j = 0; j < idx.size(); ++j) accumulate(pred[j], *samples[idx[j]].mask, counts);
  }
  return counts;
}

ImageLevelAccuracy image_level_accuracy(const Model& model, const std::vector<Sample>& samples, int64_t batch_size,
                                        const LossConfig& loss) {
  ag::NoGradGuard guard;
  const int64_t C = model.num_classes();
  int64_t right = 0, total = 0, exact = 0;
  for (const auto& idx : batches_of(samples.size(), batch_size)) {
    ForwardOptions fo;
    fo.full_resolution = false;
    const ForwardOutput out = model.forward(stack_images(samples, idx), nullptr, fo);
    Tensor mean({static_cast<int64_t>(idx.size()), C});
    for (const ag::Var& cam : out.level_cams) {
      const Tensor logits = level_logits(cam, out.bank, model.config().reduction, loss.pooling)->value;
      for (int64_t i = 0; i < mean.numel(); ++i) mean[i] += logits[i] / 4.0;
    }
    for (size_t j = 0; j < idx.size(); ++j) {
      bool all_right = true;
      for (int64_t c = 0; c < C; ++c) {
        const bool pred = 1.0 / (1.0 + std::exp(-mean[static_cast<int64_t>(j) * C + c])) > 0.5;
        const bool truth = samples[idx[j]].label.at(c) > 0.5;
        right += pred == truth;
        all_right = all_right && pred == truth;
        ++total;
      }
      exact += all_right;
    }
  }
  ImageLevelAccuracy acc;
  if (total > 0) {
    acc.elementwise = static_cast<double>(right) / static_cast<double>(total);
    acc.exact = static_cast<double>(exact) / static_cast<double>(samples.size());
  }
  return acc;
}

FitResult fit(const Model& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
              const TrainConfig& cfg, const FitOptions& opt) {
  cfg.validate();
  if (train.empty()) throw ConfigError("training split is empty");
  if (val.empty()) throw ConfigError("validation split is empty");
  for (const Sample& s : val)
    if (!s.mask) throw ConfigError("validation sample " + s.id + " has no mask");
  const ParamSet& params = model.params();

  FitResult result;
  Checkpoint& ck = result.checkpoint;
  ck.class_names = model.class_names();
  ck.config_json = opt.config_json;
  AdamW adam(cfg);
  std::mt19937_64 rng(cfg.seed);
  if (opt.resume) {
    const Checkpoint& r = *opt.resume;
    // Validate everything before touching model state.
    AdamW probe(cfg);
    probe.load_state(r.optimizer, params);
    std::istringstream is(r.rng_state);
    is >> rng;
    if (!is) throw CheckpointError("checkpoint RNG state is unreadable");
    params.restore(r.params);
    adam = probe;
    ck.epoch = r.epoch;
    ck.best_metric = r.best_metric;
    ck.best_epoch = r.best_epoch;
    ck.best_params = r.best_params;
  } else {
    ck.best_params = params.snapshot();
  }

  // The encoder is frozen, so each image's hidden states are computed once.
  std::vector<HiddenStateSet> cache;
  cache.reserve(train.size());
  for (size_t i = 0; i < train.size(); ++i)
    cache.push_back(model.encoder().encode_image(stack_images(train, {i})));
  std::vector<HiddenStateSet> val_cache;
  for (size_t i = 0; i < val.size(); ++i) val_cache.push_back(model.encoder().encode_image(stack_images(val, {i})));
  const int64_t H = train[0].image.dim(1), W = train[0].image.dim(2);

  ForwardOptions fo;
  fo.full_resolution = false;
  fo.loss = &cfg.loss;
  const int64_t last = opt.stop_after_epoch >= 0 ? std::min(cfg.epochs, opt.stop_after_epoch) : cfg.epochs;
  for (int64_t epoch = ck.epoch; epoch < last; ++epoch) {
    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    for (const auto& b : batches_of(order.size(), cfg.batch_size)) {
      std::vector<size_t> idx;
      for (size_t i : b) idx.push_back(order[i]);
      const Tensor labels = stack_labels(train, idx);
      params.zero_grad();
      const ForwardOutput out = model.forward_hidden(stack_hidden(cache, idx), H, W, &labels, fo);
      const LossBreakdown& l = *out.losses;
      const double total = l.total->value[0];
      if (!std::isfinite(total)) throw NonFiniteLossError("non-finite loss at epoch " + std::to_string(epoch + 1) +
                                                          ": " + breakdown_text(l));
      ag::backward(l.total);
      adam.step(params);
      result.step_losses.push_back(total);
      ++rec.steps;
      rec.total += total;
      for (int i = 0; i < 4; ++i) rec.level[i] += l.level[i];
      rec.align += l.align;
      rec.diversity += l.diversity;
    }
    const double ns = static_cast<double>(rec.steps);
    rec.total /= ns;
    for (double& v : rec.level) v /= ns;
    rec.align /= ns;
    rec.diversity /= ns;
    const SegmentationScores sc = iou_dice(evaluate_cached(model, val, val_cache, cfg.batch_size, cfg.ignore_index));
    rec.val_miou = sc.miou;
    rec.val_mdice = sc.mdice;
    if (rec.val_miou > ck.best_metric) {
      ck.best_metric = rec.val_miou;
      ck.best_epoch = rec.epoch;
      ck.best_params = params.snapshot();
    }
    ck.epoch = rec.epoch;
    result.history.push_back(rec);
    if (opt.log) {
      nlohmann::json j = {{"epoch", rec.epoch},
                          {"steps", rec.steps},
                          {"total", rec.total},
                          {"level", rec.level},
                          {"align", rec.align},
                          {"diversity", rec.diversity},
                          {"val_miou", rec.val_miou},
                          {"val_mdice", rec.val_mdice},
                          {"best_epoch", ck.best_epoch}};
      *opt.log << j.dump() << "\n" << std::flush;
    }
  }
  params.zero_grad();
  ck.params = params.snapshot();
  ck.optimizer = adam.state();
  std::ostringstream os;
  os << rng;
  ck.rng_state = os.str();
  return result;
}

}  // namespace wsseg
