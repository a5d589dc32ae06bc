#include "doctest.h"
#include "helpers.hpp"
#include "wsseg/cam.hpp"
#include "wsseg/losses.hpp"

using namespace wsseg;
using namespace wsseg::testing;

namespace {

Tensor unit_rows(int64_t k, int64_t d, std::mt19937_64& rng) {
  Tensor t = Tensor::randn({k, d}, rng);
  for (int64_t r = 0; r < k; ++r) {
    double n = 0;
    for (int64_t j = 0; j < d; ++j) n += t[r * d + j] * t[r * d + j];
    for (int64_t j = 0; j < d; ++j) t[r * d + j] /= std::sqrt(n);
  }
  return t;
}

Tensor naive_cam(const Tensor& f, const Tensor& bank, double s) {
  const int64_t B = f.dim(0), D = f.dim(1), H = f.dim(2), W = f.dim(3), K = bank.dim(0);
  Tensor out({B, K, H, W});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double n = 0;
        for (int64_t d = 0; d < D; ++d) n += std::pow(f.at({b, d, y, x}), 2);
        n = std::sqrt(n);
        for (int64_t k = 0; k < K; ++k) {
          double dot = 0;
          for (int64_t d = 0; d < D; ++d) dot += f.at({b, d, y, x}) * bank[k * D + d];
          out.at({b, k, y, x}) = n > 0 ? s * dot / n : 0.0;
        }
      }
  return out;
}

CombinedBank grouped_bank(int64_t C, int64_t per, int64_t D, std::mt19937_64& rng) {
  CombinedBank b;
  b.vectors = ag::constant(unit_rows(C * per, D, rng));
  for (int64_t c = 0; c < C; ++c)
    for (int64_t j = 0; j < per; ++j) {
      b.class_of.push_back(c);
      b.modality_of.push_back(j < per / 2 ? Modality::kText : Modality::kImage);
    }
  b.num_classes = C;
  return b;
}

}  // namespace

TEST_CASE("identical and orthogonal feature/prototype pairs") {
  Tensor f({1, 3, 1, 2}, {1, 0, 0, 0, 0, 1});  // pixel 0 = e0, pixel 1 = e2
  const Tensor bank({2, 3}, {1, 0, 0, 0, 1, 0});
  const ag::Var s = logit_scale(ag::constant(Tensor::scalar(kDefaultLogitScaleInit)));
  const Tensor cam = compute_cam(ag::constant(f), ag::constant(bank), s)->value;
  CHECK(cam.at({0, 0, 0, 0}) == doctest::Approx(1.0 / 0.07));
  CHECK(cam.at({0, 1, 0, 0}) == 0.0);
  CHECK(cam.at({0, 0, 0, 1}) == 0.0);
  CHECK(cam.at({0, 1, 0, 1}) == 0.0);
}

TEST_CASE("compute_cam matches the per-pixel loop and stays bounded") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor f = Tensor::randn({1, 8, 2, 2}, rng);
    const Tensor bank = unit_rows(3, 8, rng);
    const double ls = std::uniform_real_distribution<double>(0.0, 4.0)(rng);
    const ag::Var s = logit_scale(ag::constant(Tensor::scalar(ls)));
    const Tensor cam = compute_cam(ag::constant(f), ag::constant(bank), s)->value;
    CHECK(max_abs_diff(cam, naive_cam(f, bank, s->value[0])) < 1e-6);
    CHECK(cam.max_abs() <= s->value[0] + 1e-5);
  }
}

TEST_CASE("cosine invariance to per-pixel positive scaling and zero features") {
  std::mt19937_64 rng(2);
  Tensor f = Tensor::randn({1, 5, 3, 3}, rng);
  const Tensor bank = unit_rows(4, 5, rng);
  const ag::Var s = logit_scale(ag::constant(Tensor::scalar(1.0)));
  const Tensor a = compute_cam(ag::constant(f), ag::constant(bank), s)->value;
  Tensor g = f;
  for (int64_t d = 0; d < 5; ++d) g.at({0, d, 1, 2}) *= 37.5;
  for (int64_t d = 0; d < 5; ++d) g.at({0, d, 0, 0}) = 0.0;
  const Tensor b = compute_cam(ag::constant(g), ag::constant(bank), s)->value;
  for (int64_t k = 0; k < 4; ++k) {
    CHECK(b.at({0, k, 1, 2}) == doctest::Approx(a.at({0, k, 1, 2})).epsilon(1e-7));
    CHECK(b.at({0, k, 0, 0}) == 0.0);
  }
  Tensor bad = bank;
  bad[0] *= 1.01;
  CHECK_THROWS_AS(compute_cam(ag::constant(f), ag::constant(bad), s), ValidationError);
}

TEST_CASE("logit scale is exponentiated and clamped") {
  CHECK(logit_scale(ag::constant(Tensor::scalar(std::log(5.0))))->value[0] == doctest::Approx(5.0));
  CHECK(logit_scale(ag::constant(Tensor::scalar(-3.0)))->value[0] == 1.0);
  CHECK(logit_scale(ag::constant(Tensor::scalar(9.0)))->value[0] == 100.0);
}

TEST_CASE("upsample_cam: constants, identity and 2x2 to 4x4") {
  const Tensor c({1, 2, 14, 14}, 0.7);
  const ag::Var up = upsample_cam(ag::constant(c), 224, 224);
  for (double v : up->value.data) CHECK(v == doctest::Approx(0.7));
  std::mt19937_64 rng(3);
  const Tensor r = Tensor::randn({1, 2, 5, 5}, rng);
  CHECK(upsample_cam(ag::constant(r), 5, 5)->value.data == r.data);
  // Hand-computed weights for [[0, 1], [2, 3]]: row/col coordinates 0, 0.25, 0.75, 1.
  const Tensor x({1, 1, 2, 2}, {0, 1, 2, 3});
  const Tensor y = upsample_cam(ag::constant(x), 4, 4)->value;
  const double t[4] = {0.0, 0.25, 0.75, 1.0};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) CHECK(y[i * 4 + j] == doctest::Approx(2 * t[i] + t[j]));
}

TEST_CASE("fusion is the arithmetic mean") {
  std::vector<ag::Var> consts;
  for (double v : {1.0, 2.0, 3.0, 4.0}) consts.push_back(ag::constant(Tensor({1, 1, 2, 2}, v)));
  const ag::Var fused = fuse(consts);
  for (double v : fused->value.data) CHECK(v == 2.5);
  std::mt19937_64 rng(4);
  const Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
  CHECK(max_abs_diff(fuse(std::vector<ag::Var>(4, ag::constant(x)))->value, x) < 1e-15);
  std::vector<Tensor> r;
  std::vector<ag::Var> rv, scaled;
  for (int i = 0; i < 4; ++i) {
    r.push_back(Tensor::randn({2, 3, 4, 4}, rng));
    rv.push_back(ag::constant(r.back()));
    scaled.push_back(ag::scale(rv.back(), -1.5));
  }
  const Tensor f = fuse(rv)->value;
  for (int64_t i = 0; i < f.numel(); ++i) {
    double s = 0;
    for (int k = 0; k < 4; ++k) s += r[k][i];
    CHECK(std::abs(f[i] - s / 4.0) < 1e-12);
  }
  CHECK(max_abs_diff(fuse(scaled)->value, ag::scale(ag::constant(f), -1.5)->value) < 1e-12);
  CHECK_THROWS_AS(fuse({rv[0], ag::constant(Tensor({1, 1, 1, 1}))}), ValidationError);
}

TEST_CASE("class reduction: passthrough, max example, loop oracle, permutation invariance") {
  std::mt19937_64 rng(5);
  const Tensor x = Tensor::randn({1, 4, 3, 3}, rng);
  CHECK(reduce_to_classes(ag::constant(x), {0, 1, 2, 3}, 4)->value.data == x.data);
  const Tensor two({1, 2, 1, 1}, {0.2, 0.9});
  CHECK(reduce_to_classes(ag::constant(two), {0, 0}, 1)->value[0] == 0.9);

  const Tensor big = Tensor::randn({2, 80, 4, 4}, rng);
  std::vector<int64_t> cls;
  for (int k = 0; k < 80; ++k) cls.push_back(k / 20);
  const Tensor got = reduce_to_classes(ag::constant(big), cls, 4)->value;
  const Tensor mean = reduce_to_classes(ag::constant(big), cls, 4, ag::Reduction::kMean)->value;
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t c = 0; c < 4; ++c)
      for (int64_t i = 0; i < 16; ++i) {
        double m = -1e300, s = 0;
        for (int64_t k = c * 20; k < (c + 1) * 20; ++k) {
          m = std::max(m, big[(b * 80 + k) * 16 + i]);
          s += big[(b * 80 + k) * 16 + i];
        }
        CHECK(got[(b * 4 + c) * 16 + i] == m);
        CHECK(mean[(b * 4 + c) * 16 + i] == doctest::Approx(s / 20));
      }
  // Swap two channels inside class 1.
  Tensor perm = big;
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < 16; ++i) std::swap(perm[(b * 80 + 21) * 16 + i], perm[(b * 80 + 37) * 16 + i]);
  CHECK(reduce_to_classes(ag::constant(perm), cls, 4)->value.data == got.data);
}

TEST_CASE("pseudo_mask argmax and ties") {
  Tensor s({1, 3, 2, 2}, 0.0);
  for (int64_t i = 0; i < 4; ++i) s[2 * 4 + i] = 1.0;
  const auto pm = pseudo_mask(s);
  for (int32_t v : pm[0].labels) CHECK(v == 2);
  const Tensor tie({1, 2, 1, 1}, {0.5, 0.5});
  CHECK(pseudo_mask(tie)[0].labels[0] == 0);
  std::mt19937_64 rng(6);
  const Tensor r = Tensor::randn({2, 4, 3, 5}, rng);
  const auto m = pseudo_mask(r);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t y = 0; y < 3; ++y)
      for (int64_t x = 0; x < 5; ++x) {
        int best = 0;
        for (int c = 1; c < 4; ++c)
          if (r.at({b, c, y, x}) > r.at({b, best, y, x})) best = c;
        CHECK(m[b].at(y, x) == best);
      }
}

TEST_CASE("level BCE matches a scalar reference") {
  std::mt19937_64 rng(7);
  const Tensor cam = Tensor::randn({2, 8, 8, 8}, rng, 3.0);
  CombinedBank bank = grouped_bank(4, 2, 3, rng);
  const Tensor labels({2, 4}, {1, 0, 0, 1, 0, 1, 1, 1});
  LossConfig lc;
  lc.level_weights = {1, 0, 0, 0};
  const auto l = total_loss(std::vector<ag::Var>(4, ag::constant(cam)), labels, bank, lc);
  double ref = 0;
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t c = 0; c < 4; ++c) {
      double pooled = 0;
      for (int64_t i = 0; i < 64; ++i)
        pooled += std::max(cam[(b * 8 + 2 * c) * 64 + i], cam[(b * 8 + 2 * c + 1) * 64 + i]) / 64.0;
      const double y = labels[b * 4 + c];
      ref += std::max(pooled, 0.0) - pooled * y + std::log1p(std::exp(-std::abs(pooled)));
    }
  ref /= 8.0;
  CHECK(l.level[0] == doctest::Approx(ref).epsilon(1e-10));
  CHECK(l.total->value[0] == doctest::Approx(ref).epsilon(1e-10));
}

TEST_CASE("level weighting combines per-level losses") {
  std::mt19937_64 rng(8);
  CombinedBank bank = grouped_bank(3, 2, 3, rng);
  const Tensor labels({1, 3}, {1, 0, 1});
  std::vector<ag::Var> cams;
  for (int i = 0; i < 4; ++i) cams.push_back(ag::constant(Tensor::randn({1, 6, 2 << i, 2 << i}, rng)));
  LossConfig lc;
  lc.level_weights = {0.3, 1.7, 0.0, 2.2};
  const auto l = total_loss(cams, labels, bank, lc);
  double want = 0;
  for (int i = 0; i < 4; ++i) want += lc.level_weights[i] * l.level[i];
  CHECK(l.total->value[0] == doctest::Approx(want).epsilon(1e-12));

  LossConfig ones;
  const auto same = total_loss(std::vector<ag::Var>(4, cams[0]), labels, bank, ones);
  CHECK(same.total->value[0] == doctest::Approx(4.0 * same.level[0]).epsilon(1e-12));
  CHECK_THROWS_AS(total_loss(cams, Tensor({1, 3}, {1, 0.5, 0}), bank, ones), ValidationError);
}

TEST_CASE("alignment loss: equal, anti-aligned and loop oracle") {
  std::mt19937_64 rng(9);
  const Tensor t = unit_rows(2, 4, rng);
  CombinedBank eq;
  eq.num_classes = 1;
  Tensor v({4, 4});
  for (int i = 0; i < 8; ++i) v[i] = t[i];
  for (int i = 0; i < 8; ++i) v[8 + i] = t[i];
  eq.vectors = ag::constant(v);
  eq.class_of = {0, 0, 0, 0};
  eq.modality_of = {Modality::kText, Modality::kText, Modality::kImage, Modality::kImage};
  CHECK(std::abs(alignment_loss(eq)->value[0]) < 1e-6);
  for (int i = 0; i < 8; ++i) v[8 + i] = -t[i];
  eq.vectors = ag::constant(v);
  CHECK(alignment_loss(eq)->value[0] == doctest::Approx(2.0));

  CombinedBank r = grouped_bank(3, 4, 5, rng);
  double ref = 0;
  for (int64_t c = 0; c < 3; ++c) {
    std::vector<double> a(5, 0), b(5, 0);
    for (int64_t j = 0; j < 4; ++j)
      for (int64_t d = 0; d < 5; ++d) (j < 2 ? a : b)[d] += r.vectors->value[(c * 4 + j) * 5 + d];
    double ab = 0, aa = 0, bb = 0;
    for (int d = 0; d < 5; ++d) {
      ab += a[d] * b[d];
      aa += a[d] * a[d];
      bb += b[d] * b[d];
    }
    ref += 1.0 - ab / std::sqrt(aa * bb);
  }
  CHECK(alignment_loss(r)->value[0] == doctest::Approx(ref / 3.0).epsilon(1e-6));
  bool missing = false;
  CombinedBank text_only = grouped_bank(2, 1, 3, rng);  // per = 1 -> image only
  CHECK(alignment_loss(text_only, &missing)->value[0] == 0.0);
  CHECK(missing);
}

TEST_CASE("diversity loss: orthonormal, identical and double loop") {
  CombinedBank b;
  b.num_classes = 1;
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 4] = 1;
  b.vectors = ag::constant(eye);
  b.class_of = {0, 0, 0};
  b.modality_of = {Modality::kImage, Modality::kImage, Modality::kImage};
  CHECK(diversity_loss(b)->value[0] == 0.0);
  b.vectors = ag::constant(Tensor({3, 3}, {1, 0, 0, 1, 0, 0, 1, 0, 0}));
  CHECK(diversity_loss(b)->value[0] == doctest::Approx(1.0));

  std::mt19937_64 rng(10);
  CombinedBank r = grouped_bank(2, 6, 4, rng);  // 3 image rows per class
  double s = 0;
  int64_t pairs = 0;
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t i = 3; i < 6; ++i)
      for (int64_t j = 3; j < 6; ++j) {
        if (i == j) continue;
        double dot = 0;
        for (int d = 0; d < 4; ++d) dot += r.vectors->value[(c * 6 + i) * 4 + d] * r.vectors->value[(c * 6 + j) * 4 + d];
        s += dot * dot;
        ++pairs;
      }
  CHECK(diversity_loss(r)->value[0] == doctest::Approx(s / pairs).epsilon(1e-12));
}

TEST_CASE("losses are non-negative on random inputs") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    CombinedBank bank = grouped_bank(3, 4, 6, rng);
    Tensor labels({2, 3});
    for (double& v : labels.data) v = std::bernoulli_distribution(0.5)(rng);
    std::vector<ag::Var> cams;
    for (int i = 0; i < 4; ++i) cams.push_back(ag::constant(Tensor::randn({2, 12, 2, 2}, rng, 5.0)));
    LossConfig lc;
    lc.align_weight = 1;
    lc.diversity_weight = 1;
    const auto l = total_loss(cams, labels, bank, lc);
    for (double v : l.level) CHECK(v >= 0.0);
    CHECK(l.align >= -1e-12);
    CHECK(l.diversity >= 0.0);
  }
}
