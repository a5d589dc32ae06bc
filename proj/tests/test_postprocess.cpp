#include "doctest.h"
#include "helpers.hpp"
#include "wsseg/postprocess.hpp"

using namespace wsseg;
using namespace wsseg::testing;

namespace {

// Written directly from the Potts mean-field update: Q_i(l) ~ P_i(l) exp(-sum_j k(i,j) sum_{l' != l} Q_j(l')).
Tensor naive_mean_field(const RgbImage& img, const Tensor& p, const CrfParams& cp) {
  const int64_t C = p.dim(0), H = img.height, W = img.width, N = H * W;
  Tensor q = p;
  for (int64_t it = 0; it < cp.iterations; ++it) {
    Tensor next(p.shape);
    for (int64_t i = 0; i < N; ++i) {
      std::vector<double> e(C, 0.0);
      for (int64_t j = 0; j < N; ++j) {
        if (i == j) continue;
        const double dx = double(i % W) - double(j % W), dy = double(i / W) - double(j / W);
        double dc = 0;
        for (int c = 0; c < 3; ++c) {
          const double d = double(img.pixels[i * 3 + c]) - double(img.pixels[j * 3 + c]);
          dc += d * d;
        }
        const double r2 = dx * dx + dy * dy;
        const double k = cp.w_gauss * std::exp(-r2 / (2 * cp.theta_gamma * cp.theta_gamma)) +
                         cp.w_bilateral * std::exp(-r2 / (2 * cp.theta_alpha * cp.theta_alpha) -
                                                   dc / (2 * cp.theta_beta * cp.theta_beta));
        for (int64_t l = 0; l < C; ++l)
          for (int64_t m = 0; m < C; ++m)
            if (m != l) e[l] += k * q[m * N + j];
      }
      double s = 0;
      const double e0 = e[0];
      for (int64_t l = 0; l < C; ++l) {
        e[l] = std::max(p[l * N + i], 1e-8) * std::exp(-(e[l] - e0));
        s += e[l];
      }
      for (int64_t l = 0; l < C; ++l) next[l * N + i] = e[l] / s;
    }
    q = next;
  }
  return q;
}

// Left half dark / class 0, right half bright / class 1; `flip` of the pixels get inverted unaries.
struct Scene {
  RgbImage img;
  Tensor probs;
  Mask truth;
};

Scene half_plane(int64_t side, double flip, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Scene s{RgbImage(side, side), Tensor({2, side, side}), Mask(side, side)};
  const int64_t N = side * side;
  for (int64_t y = 0; y < side; ++y)
    for (int64_t x = 0; x < side; ++x) {
      const int32_t cls = x >= side / 2;
      s.truth.at(y, x) = cls;
      uint8_t* px = s.img.at(y, x);
      for (int c = 0; c < 3; ++c) px[c] = cls ? 200 : 40;
      const int32_t shown = u(rng) < flip ? 1 - cls : cls;
      s.probs[shown * N + y * side + x] = 0.7;
      s.probs[(1 - shown) * N + y * side + x] = 0.3;
    }
  return s;
}

double agreement(const Mask& a, const Mask& b) {
  int64_t same = 0;
  for (size_t i = 0; i < a.labels.size(); ++i) same += a.labels[i] == b.labels[i];
  return double(same) / double(a.labels.size());
}

// Three colour blobs with noisy, peaked unaries.
Scene blobs(int64_t side, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Scene s{RgbImage(side, side), Tensor({3, side, side}), Mask(side, side)};
  const int64_t N = side * side;
  const uint8_t col[3][3] = {{220, 60, 60}, {60, 200, 80}, {70, 70, 210}};
  for (int64_t y = 0; y < side; ++y)
    for (int64_t x = 0; x < side; ++x) {
      const double r = std::hypot(double(x) - side * 0.3, double(y) - side * 0.35);
      const int32_t cls = r < side * 0.22 ? 1 : (x + y > side * 1.2 ? 2 : 0);
      s.truth.at(y, x) = cls;
      for (int c = 0; c < 3; ++c)
        s.img.at(y, x)[c] = static_cast<uint8_t>(std::clamp(col[cls][c] + 15 * nd(rng), 0.0, 255.0));
      Tensor sc({3, 1, 1});
      for (int c = 0; c < 3; ++c) sc[c] = 1.2 * nd(rng) + (c == cls ? 1.0 : 0.0);
      const Tensor pr = softmax_channels(sc);
      for (int c = 0; c < 3; ++c) s.probs[c * N + y * side + x] = pr[c];
    }
  return s;
}

}  // namespace

TEST_CASE("softmax_channels and argmax_mask") {
  const Tensor s({2, 1, 2}, {0.0, 3.0, std::log(3.0), 3.0});
  const Tensor p = softmax_channels(s);
  CHECK(p[0] == doctest::Approx(0.25));
  CHECK(p[2] == doctest::Approx(0.75));
  CHECK(p[1] == doctest::Approx(0.5));
  const Mask m = argmax_mask(p);
  CHECK(m.labels == std::vector<int32_t>{1, 0});
}

TEST_CASE("identity when disabled") {
  const Scene s = half_plane(16, 0.05, 1);
  CrfParams p;
  p.iterations = 0;
  CHECK(crf_refine(s.img, s.probs, p) == argmax_mask(s.probs));
  CHECK(crf_mean_field(s.img, s.probs, p).data == s.probs.data);
  p.iterations = 10;
  p.w_gauss = p.w_bilateral = 0.0;
  for (auto method : {CrfMethod::kFast, CrfMethod::kBruteForce})
    CHECK(crf_refine(s.img, s.probs, p, method) == argmax_mask(s.probs));
}

TEST_CASE("brute-force mean field matches the update written out naively") {
  const Scene s = blobs(10, 2);
  CrfParams p;
  p.iterations = 3;
  const Tensor got = crf_mean_field(s.img, s.probs, p, CrfMethod::kBruteForce);
  const Tensor want = naive_mean_field(s.img, s.probs, p);
  double worst = 0;
  for (int64_t i = 0; i < got.numel(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
  CHECK(worst < 1e-9);
}

TEST_CASE("half-plane label noise is removed") {
  const Scene s = half_plane(16, 0.05, 3);
  const double before = agreement(argmax_mask(s.probs), s.truth);
  CHECK(before < 1.0);
  const CrfParams p;
  for (auto method : {CrfMethod::kFast, CrfMethod::kBruteForce}) {
    const Mask out = crf_refine(s.img, s.probs, p, method);
    CHECK(agreement(out, s.truth) == 1.0);
  }
}

TEST_CASE("marginals stay normalized at every iteration") {
  const Scene s = blobs(16, 4);
  const CrfParams p;
  for (auto method : {CrfMethod::kFast, CrfMethod::kBruteForce}) {
    std::vector<Tensor> hist;
    crf_mean_field(s.img, s.probs, p, method, &hist);
    REQUIRE(hist.size() == 10);
    const int64_t N = 256;
    for (const Tensor& q : hist)
      for (int64_t i = 0; i < N; ++i) {
        double sum = 0;
        for (int64_t c = 0; c < 3; ++c) {
          CHECK(q[c * N + i] >= 0.0);
          CHECK(q[c * N + i] <= 1.0);
          sum += q[c * N + i];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
      }
  }
}

TEST_CASE("relabelling classes permutes the output") {
  const Scene s = blobs(16, 5);
  const int perm[3] = {2, 0, 1};
  Tensor pp(s.probs.shape);
  const int64_t N = 256;
  for (int c = 0; c < 3; ++c)
    for (int64_t i = 0; i < N; ++i) pp[perm[c] * N + i] = s.probs[c * N + i];
  const CrfParams p;
  for (auto method : {CrfMethod::kFast, CrfMethod::kBruteForce}) {
    const Tensor a = crf_mean_field(s.img, s.probs, p, method);
    const Tensor b = crf_mean_field(s.img, pp, p, method);
    double worst = 0;
    for (int c = 0; c < 3; ++c)
      for (int64_t i = 0; i < N; ++i) worst = std::max(worst, std::abs(b[perm[c] * N + i] - a[c * N + i]));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("fast and brute-force labels agree") {
  const CrfParams p;
  for (uint64_t seed : {6u, 7u, 8u}) {
    const Scene s = blobs(32, seed);
    const double agree = agreement(crf_refine(s.img, s.probs, p, CrfMethod::kFast),
                                   crf_refine(s.img, s.probs, p, CrfMethod::kBruteForce));
    CHECK(agree >= 0.99);
  }
}

TEST_CASE("lattice approximates a Gaussian filter") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 4.0);
  const int64_t n = 400;
  for (int64_t d : {1, 2, 5}) {
    std::vector<double> f(n * d), v(n);
    for (double& x : f) x = u(rng);
    for (double& x : v) x = u(rng);
    const PermutohedralLattice lat(f, n, d);
    const std::vector<double> approx = lat.filter(v, 1);
    std::vector<double> exact(n, 0.0);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) {
        double r = 0;
        for (int64_t k = 0; k < d; ++k) r += (f[i * d + k] - f[j * d + k]) * (f[i * d + k] - f[j * d + k]);
        exact[i] += std::exp(-0.5 * r) * v[j];
      }
    // The lattice is accurate up to a global gain; compare after a least-squares fit.
    double num = 0, den = 0;
    for (int64_t i = 0; i < n; ++i) {
      num += approx[i] * exact[i];
      den += approx[i] * approx[i];
    }
    const double g = num / den;
    double err = 0, norm = 0;
    for (int64_t i = 0; i < n; ++i) {
      err += (g * approx[i] - exact[i]) * (g * approx[i] - exact[i]);
      norm += exact[i] * exact[i];
    }
    MESSAGE("d=" << d << " gain=" << g << " rel rms=" << std::sqrt(err / norm));
    CHECK(std::sqrt(err / norm) < 0.15);
    CHECK(lat.lattice_points() > 0);
  }
  CHECK_THROWS_AS(PermutohedralLattice(std::vector<double>(9 * 4, 0.0), 4, 9), ValidationError);
}

TEST_CASE("invalid inputs are rejected") {
  const Scene s = half_plane(8, 0.0, 10);
  CrfParams p;
  Tensor bad = s.probs;
  bad[0] += 0.01;
  CHECK_THROWS_AS(crf_refine(s.img, bad, p), ValidationError);
  CHECK_THROWS_AS(crf_refine(RgbImage(8, 9), s.probs, p), ValidationError);
  CHECK_THROWS_AS(crf_refine(s.img, Tensor({2, 64}), p), ValidationError);
  p.iterations = -1;
  CHECK_THROWS_AS(crf_refine(s.img, s.probs, p), ConfigError);
  p = CrfParams{};
  p.theta_beta = 0.0;
  CHECK_THROWS_AS(crf_refine(s.img, s.probs, p), ConfigError);
  p = CrfParams{};
  p.w_gauss = -1.0;
  CHECK_THROWS_AS(crf_refine(s.img, s.probs, p), ConfigError);
}
