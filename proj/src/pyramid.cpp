#include "wsseg/pyramid.hpp"

#include <numeric>

namespace wsseg {

void PyramidOptions::validate() const {
  if (in_dim <= 0) throw ConfigError("pyramid input width must be positive");
  if (d_ref <= 0 || d_ref % 16 != 0)
    throw ConfigError("pyramid.d_ref must be a positive multiple of 16 (four channel halvings), got " +
                      std::to_string(d_ref));
  if (res_blocks < 0) throw ConfigError("pyramid.res_blocks must be non-negative");
  if (groupnorm_groups <= 0) throw ConfigError("pyramid.groupnorm_groups must be positive");
}

int64_t effective_groups(int64_t configured, int64_t channels) { return std::gcd(configured, channels); }

Refiner::Refiner(const PyramidOptions& opt, const std::string& prefix, ParamSet& params, std::mt19937_64& rng)
    : in_dim_(opt.in_dim) {
  const int64_t half = opt.d_ref / 2;
  groups_ = effective_groups(opt.groupnorm_groups, half);
  proj_w = params.add(prefix + ".proj.w", conv_init({half, opt.in_dim, 1, 1}, rng));
  proj_b = params.add(prefix + ".proj.b", Tensor::zeros({half}));
  proj_gn_g = params.add(prefix + ".proj.gn.g", Tensor::full({half}, 1.0));
  proj_gn_b = params.add(prefix + ".proj.gn.b", Tensor::zeros({half}));
  for (int64_t i = 0; i < opt.res_blocks; ++i) {
    const std::string p = prefix + ".res" + std::to_string(i);
    ResBlock b;
    b.conv_a_w = params.add(p + ".conv_a.w", conv_init({half, half, 3, 3}, rng));
    b.conv_a_b = params.add(p + ".conv_a.b", Tensor::zeros({half}));
    b.gn_g = params.add(p + ".gn.g", Tensor::full({half}, 1.0));
    b.gn_b = params.add(p + ".gn.b", Tensor::zeros({half}));
    b.conv_b_w = params.add(p + ".conv_b.w", conv_init({half, half, 3, 3}, rng, 0.5));
    b.conv_b_b = params.add(p + ".conv_b.b", Tensor::zeros({half}));
    blocks.push_back(b);
  }
  expand_w = params.add(prefix + ".expand.w", conv_init({opt.d_ref, half, 1, 1}, rng));
  expand_b = params.add(prefix + ".expand.b", Tensor::zeros({opt.d_ref}));
}

ag::Var Refiner::forward(const ag::Var& x) const {
  using namespace ag;
  if (x->value.ndim() != 4 || x->value.dim(1) != in_dim_)
    throw ValidationError("refine: expected " + std::to_string(in_dim_) + " input channels, got " +
                          shape_str(x->shape()));
  Var h = silu(group_norm(conv2d(x, proj_w, proj_b), groups_, proj_gn_g, proj_gn_b));
  for (const ResBlock& b : blocks) {
    Var branch = conv2d(silu(group_norm(conv2d(h, b.conv_a_w, b.conv_a_b), groups_, b.gn_g, b.gn_b)), b.conv_b_w,
                        b.conv_b_b);
    h = add(h, branch);
  }
  return conv2d(h, expand_w, expand_b);
}

FeaturePyramid::FeaturePyramid(const PyramidOptions& opt, ParamSet& params, std::mt19937_64& rng) : opt_(opt) {
  opt_.validate();
  const int n_ref = opt_.share_refiner ? 1 : 4;
  for (int k = 0; k < n_ref; ++k) refiners_.emplace_back(opt_, "pyramid.refiner" + std::to_string(k), params, rng);
  for (int i = 1; i <= 4; ++i) {
    const int64_t ch = opt_.level_channels(i);
    const std::string p = "pyramid.level" + std::to_string(i);
    LevelBlock lb;
    lb.w = params.add(p + ".w", conv_init({ch, opt_.d_ref, 1, 1}, rng));
    lb.b = params.add(p + ".b", Tensor::zeros({ch}));
    if (opt_.level_norm_act) {
      lb.gn_g = params.add(p + ".gn.g", Tensor::full({ch}, 1.0));
      lb.gn_b = params.add(p + ".gn.b", Tensor::zeros({ch}));
    }
    levels_.push_back(lb);
  }
}

std::vector<ag::Var> FeaturePyramid::refine(const std::vector<ag::Var>& grids) const {
  if (grids.size() != 4) throw ValidationError("refine: expected 4 tapped grids");
  std::vector<ag::Var> out;
  for (size_t k = 0; k < 4; ++k) out.push_back(refiner(k).forward(grids[k]));
  return out;
}

std::vector<ag::Var> FeaturePyramid::build(const std::vector<ag::Var>& refined) const {
  using namespace ag;
  if (refined.size() != 4) throw ValidationError("build_pyramid: expected 4 refined maps");
  for (const Var& r : refined)
    if (r->value.ndim() != 4 || r->value.dim(1) != opt_.d_ref || r->shape() != refined[0]->shape())
      throw ValidationError("build_pyramid: refined maps must share shape [B," + std::to_string(opt_.d_ref) +
                            ",H',W'], got " + shape_str(r->shape()));
  const int64_t h = refined[0]->value.dim(2), w = refined[0]->value.dim(3);
  std::vector<Var> out;
  for (int i = 1; i <= 4; ++i) {
    const LevelBlock& lb = levels_[i - 1];
    Var y = conv2d(refined[i - 1], lb.w, lb.b);
    if (opt_.level_norm_act)
      y = silu(group_norm(y, effective_groups(opt_.groupnorm_groups, opt_.level_channels(i)), lb.gn_g, lb.gn_b));
    out.push_back(upsample_bilinear(y, h << i, w << i));
  }
  return out;
}

}  // namespace wsseg
