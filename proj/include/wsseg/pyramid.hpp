#pragma once

#include <random>
#include <vector>

#include "wsseg/autograd.hpp"
#include "wsseg/params.hpp"

namespace wsseg {

struct PyramidOptions {
  int64_t in_dim = 64;  // D_vit
  int64_t d_ref = 512;
  int64_t res_blocks = 2;
  int64_t groupnorm_groups = 8;
  bool share_refiner = false;
  /// GroupNorm + SiLU after each per-level 1x1 projection; off gives a purely linear pyramid.
  bool level_norm_act = true;

  /// Throws ConfigError unless d_ref is a positive multiple of 16.
  void validate() const;
  int64_t level_channels(int level) const { return d_ref >> level; }  // level in 1..4
};

/// The group count actually used for `channels`: gcd with the configured count.
int64_t effective_groups(int64_t configured, int64_t channels);

/// 1x1 conv + GroupNorm + SiLU to D_ref/2, residual 3x3 blocks, 1x1 conv to D_ref.
class Refiner {
 public:
  struct ResBlock {
    ag::Var conv_a_w, conv_a_b, gn_g, gn_b, conv_b_w, conv_b_b;
  };

  Refiner(const PyramidOptions& opt, const std::string& prefix, ParamSet& params, std::mt19937_64& rng);

  /// [B, D_vit, H', W'] -> [B, D_ref, H', W'].
  ag::Var forward(const ag::Var& x) const;

  ag::Var proj_w, proj_b, proj_gn_g, proj_gn_b, expand_w, expand_b;
  std::vector<ResBlock> blocks;

 private:
  int64_t in_dim_;
  int64_t groups_;
};

struct LevelBlock {
  ag::Var w, b, gn_g, gn_b;
};

/// Refinement of the four tapped grids and the resolution-doubling, channel-halving pyramid.
class FeaturePyramid {
 public:
  FeaturePyramid(const PyramidOptions& opt, ParamSet& params, std::mt19937_64& rng);

  const PyramidOptions& options() const { return opt_; }

  /// One refined map per tapped grid.
  std::vector<ag::Var> refine(const std::vector<ag::Var>& grids) const;
  /// Level i (1-based) has D_ref / 2^i channels and side 2^i * H'.
  std::vector<ag::Var> build(const std::vector<ag::Var>& refined) const;

  const Refiner& refiner(size_t tap) const { return refiners_[opt_.share_refiner ? 0 : tap]; }
  const LevelBlock& level(size_t i) const { return levels_[i]; }

 private:
  PyramidOptions opt_;
  std::vector<Refiner> refiners_;
  std::vector<LevelBlock> levels_;
};

}  // namespace wsseg
