#include "doctest.h"
#include "helpers.hpp"
#include "wsseg/pyramid.hpp"

using namespace wsseg;
using namespace wsseg::testing;

namespace {

// Same-padded stride-1 convolution by explicit loops.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3), Co = w.dim(0), k = w.dim(2), r = k / 2;
  Tensor y({N, Co, H, W});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t o = 0; o < Co; ++o)
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j) {
          double s = b[o];
          for (int64_t c = 0; c < Ci; ++c)
            for (int64_t dy = 0; dy < k; ++dy)
              for (int64_t dx = 0; dx < k; ++dx) {
                const int64_t yy = i + dy - r, xx = j + dx - r;
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                s += w[((o * Ci + c) * k + dy) * k + dx] * x[((n * Ci + c) * H + yy) * W + xx];
              }
          y[((n * Co + o) * H + i) * W + j] = s;
        }
  return y;
}

Tensor naive_group_norm(const Tensor& x, int64_t G, const Tensor& g, const Tensor& b) {
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3), cpg = C / G;
  Tensor y = x;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t grp = 0; grp < G; ++grp) {
      double mu = 0, var = 0;
      for (int64_t c = grp * cpg; c < (grp + 1) * cpg; ++c)
        for (int64_t i = 0; i < HW; ++i) mu += x[(n * C + c) * HW + i];
      mu /= cpg * HW;
      for (int64_t c = grp * cpg; c < (grp + 1) * cpg; ++c)
        for (int64_t i = 0; i < HW; ++i) var += std::pow(x[(n * C + c) * HW + i] - mu, 2);
      var /= cpg * HW;
      for (int64_t c = grp * cpg; c < (grp + 1) * cpg; ++c)
        for (int64_t i = 0; i < HW; ++i)
          y[(n * C + c) * HW + i] = (x[(n * C + c) * HW + i] - mu) / std::sqrt(var + 1e-5) * g[c] + b[c];
    }
  return y;
}

Tensor naive_silu(Tensor t) {
  for (double& v : t.data) v = v / (1.0 + std::exp(-v));
  return t;
}

Tensor add(Tensor a, const Tensor& b) {
  for (int64_t i = 0; i < a.numel(); ++i) a[i] += b[i];
  return a;
}

PyramidOptions small_opts(int64_t d_ref = 32) {
  PyramidOptions o;
  o.in_dim = 8;
  o.d_ref = d_ref;
  o.res_blocks = 2;
  o.groupnorm_groups = 4;
  return o;
}

}  // namespace

TEST_CASE("reference shape law at D_ref 512 on a 14x14 grid") {
  PyramidOptions o;
  o.in_dim = 64;
  o.d_ref = 512;
  ParamSet ps;
  std::mt19937_64 rng(0);
  FeaturePyramid pyr(o, ps, rng);
  std::vector<ag::Var> refined(4, ag::constant(Tensor({1, 512, 14, 14}, 0.1)));
  const auto levels = pyr.build(refined);
  const Shape want[4] = {{1, 256, 28, 28}, {1, 128, 56, 56}, {1, 64, 112, 112}, {1, 32, 224, 224}};
  for (int i = 0; i < 4; ++i) CHECK(levels[i]->shape() == want[i]);
}

TEST_CASE("shape law for other widths and grid sides") {
  for (int64_t d_ref : {16, 48, 64})
    for (int64_t side : {1, 2, 3}) {
      ParamSet ps;
      std::mt19937_64 rng(1);
      FeaturePyramid pyr(small_opts(d_ref), ps, rng);
      std::vector<ag::Var> refined(4, ag::constant(Tensor({2, d_ref, side, side}, 0.3)));
      const auto levels = pyr.build(refined);
      for (int i = 1; i <= 4; ++i) {
        CHECK(levels[i - 1]->value.dim(1) == (d_ref >> i));
        CHECK(levels[i - 1]->value.dim(2) == (side << i));
        CHECK(levels[i - 1]->value.dim(3) == (side << i));
      }
    }
  PyramidOptions bad = small_opts(24);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("refiner output shape") {
  PyramidOptions o;
  o.in_dim = 64;
  o.d_ref = 512;
  o.share_refiner = true;
  ParamSet ps;
  std::mt19937_64 rng(0);
  FeaturePyramid pyr(o, ps, rng);
  std::mt19937_64 r2(3);
  const auto out = pyr.refine(std::vector<ag::Var>(4, ag::constant(Tensor::randn({2, 64, 14, 14}, r2))));
  for (const auto& v : out) CHECK(v->shape() == Shape{2, 512, 14, 14});
}

TEST_CASE("refiner matches an unrolled loop reference") {
  ParamSet ps;
  std::mt19937_64 rng(2);
  const PyramidOptions o = small_opts();
  Refiner ref(o, "r", ps, rng);
  std::mt19937_64 r2(5);
  const Tensor x = Tensor::randn({2, 8, 3, 3}, r2);
  // Nonzero biases so every term participates.
  for (const auto& p : ps.items())
    if (p.name.find(".b") != std::string::npos)
      for (double& v : p.var->value.data) v = std::uniform_real_distribution<double>(-0.3, 0.3)(r2);
  const Tensor got = ref.forward(ag::constant(x))->value;

  const int64_t G = effective_groups(o.groupnorm_groups, o.d_ref / 2);
  Tensor h = naive_silu(naive_group_norm(naive_conv(x, ref.proj_w->value, ref.proj_b->value), G,
                                         ref.proj_gn_g->value, ref.proj_gn_b->value));
  for (const auto& b : ref.blocks) {
    const Tensor a = naive_silu(naive_group_norm(naive_conv(h, b.conv_a_w->value, b.conv_a_b->value), G,
                                                 b.gn_g->value, b.gn_b->value));
    h = add(h, naive_conv(a, b.conv_b_w->value, b.conv_b_b->value));
  }
  const Tensor want = naive_conv(h, ref.expand_w->value, ref.expand_b->value);
  CHECK(max_abs_diff(got, want) < 1e-10);
}

TEST_CASE("zero input with zeroed output conv and branches gives zero output") {
  ParamSet ps;
  std::mt19937_64 rng(2);
  Refiner ref(small_opts(), "r", ps, rng);
  for (auto* v : {&ref.expand_w, &ref.expand_b}) std::fill((*v)->value.data.begin(), (*v)->value.data.end(), 0.0);
  for (auto& b : ref.blocks)
    for (auto* v : {&b.conv_b_w, &b.conv_b_b}) std::fill((*v)->value.data.begin(), (*v)->value.data.end(), 0.0);
  CHECK(ref.forward(ag::constant(Tensor({1, 8, 2, 2}, 0.0)))->value.max_abs() == 0.0);
}

TEST_CASE("constant maps stay constant through a unit 1x1 projection") {
  PyramidOptions o = small_opts(16);
  o.level_norm_act = false;
  ParamSet ps;
  std::mt19937_64 rng(0);
  FeaturePyramid pyr(o, ps, rng);
  for (int i = 0; i < 4; ++i) {
    auto& w = pyr.level(i).w->value;
    std::fill(w.data.begin(), w.data.end(), 1.0 / 16.0);
  }
  const auto levels = pyr.build(std::vector<ag::Var>(4, ag::constant(Tensor({1, 16, 2, 2}, 0.7))));
  for (const auto& l : levels)
    for (double v : l->value.data) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("linear configuration gives a homogeneous pyramid") {
  PyramidOptions o = small_opts(16);
  o.level_norm_act = false;
  ParamSet ps;
  std::mt19937_64 rng(0);
  FeaturePyramid pyr(o, ps, rng);
  std::mt19937_64 r2(9);
  std::vector<ag::Var> x, ax;
  for (int i = 0; i < 4; ++i) {
    const Tensor t = Tensor::randn({1, 16, 2, 2}, r2);
    Tensor s = t;
    for (double& v : s.data) v *= -2.5;
    x.push_back(ag::constant(t));
    ax.push_back(ag::constant(s));
  }
  const auto a = pyr.build(x), b = pyr.build(ax);
  for (int i = 0; i < 4; ++i) {
    Tensor scaled = a[i]->value;
    for (double& v : scaled.data) v *= -2.5;
    CHECK(max_abs_diff(scaled, b[i]->value) < 1e-12);
  }
}

TEST_CASE("every pyramid and refiner weight receives gradient from the sum of levels") {
  for (bool share : {false, true}) {
    PyramidOptions o = small_opts();
    o.share_refiner = share;
    ParamSet ps;
    std::mt19937_64 rng(4);
    FeaturePyramid pyr(o, ps, rng);
    std::mt19937_64 r2(6);
    std::vector<ag::Var> grids;
    for (int i = 0; i < 4; ++i) grids.push_back(ag::constant(Tensor::randn({2, 8, 2, 2}, r2)));
    // Weighted sums avoid the GroupNorm null space of a plain sum.
    ag::Var loss = ag::constant(Tensor::scalar(0.0));
    for (const auto& l : pyr.build(pyr.refine(grids)))
      loss = ag::add(loss, ag::sum_all(ag::mul_const(l, Tensor::randn(l->value.shape, r2))));
    ag::backward(loss);
    for (const auto& p : ps.items()) {
      INFO(p.name);
      CHECK(p.var->has_grad());
      CHECK(p.var->grad.max_abs() > 0.0);
    }
  }
}

TEST_CASE("group count falls back to a divisor of the channel count") {
  CHECK(effective_groups(8, 32) == 8);
  CHECK(effective_groups(8, 4) == 4);
  CHECK(effective_groups(8, 12) == 4);
  CHECK(effective_groups(8, 1) == 1);
}
