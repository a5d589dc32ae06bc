#include "doctest.h"
#include "helpers.hpp"
#include "wsseg/autograd.hpp"

using namespace wsseg;
using wsseg::testing::rel_err;

namespace {

// Checks d/dx sum(w * f(x)) against central differences for every input entry.
void check_grad(const std::vector<Tensor>& inputs, const std::function<ag::Var(const std::vector<ag::Var>&)>& f,
                double tol = 1e-6, uint64_t seed = 3) {
  std::vector<ag::Var> vars;
  for (const Tensor& t : inputs) vars.push_back(ag::parameter(t));
  ag::Var y = f(vars);
  std::mt19937_64 rng(seed);
  const Tensor w = Tensor::randn(y->value.shape, rng);
  ag::backward(ag::sum_all(ag::mul_const(y, w)));

  auto eval = [&]() {
    std::vector<ag::Var> cs;
    for (const auto& v : vars) cs.push_back(ag::constant(v->value));
    const Tensor out = f(cs)->value;
    double s = 0.0;
    for (int64_t i = 0; i < out.numel(); ++i) s += out[i] * w[i];
    return s;
  };
  for (size_t k = 0; k < vars.size(); ++k) {
    for (int64_t i = 0; i < vars[k]->value.numel(); ++i) {
      const double fd = wsseg::testing::central_diff(vars[k]->value, i, eval);
      const double an = vars[k]->has_grad() ? vars[k]->grad[i] : 0.0;
      INFO("input " << k << " entry " << i << " analytic " << an << " numeric " << fd);
      CHECK(std::abs(an - fd) <= tol * std::max(1.0, std::abs(fd)));
    }
  }
}

Tensor rnd(Shape s, uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor::randn(std::move(s), rng, sd);
}

}  // namespace

TEST_CASE("elementwise and dense ops match finite differences") {
  check_grad({rnd({3, 4}, 1), rnd({3, 4}, 2)}, [](const auto& v) { return ag::mul(ag::add(v[0], v[1]), v[0]); });
  check_grad({rnd({3, 4}, 1), rnd({3, 4}, 2)}, [](const auto& v) { return ag::sub(v[0], ag::exp(v[1])); });
  check_grad({rnd({5}, 4)}, [](const auto& v) { return ag::silu(v[0]); });
  check_grad({rnd({5}, 5)}, [](const auto& v) { return ag::gelu(v[0]); });
  check_grad({rnd({3, 4}, 6), rnd({4, 2}, 7), rnd({2}, 8)},
             [](const auto& v) { return ag::linear(v[0], v[1], v[2]); });
  check_grad({rnd({3, 4}, 6)}, [](const auto& v) { return ag::transpose(v[0]); });
  check_grad({rnd({3, 4}, 9), rnd({1}, 10)}, [](const auto& v) { return ag::scale_by(v[0], v[1]); });
  check_grad({rnd({4, 3}, 11)}, [](const auto& v) { return ag::mean_rows(v[0]); });
}

TEST_CASE("normalization ops match finite differences") {
  check_grad({rnd({3, 6}, 1), rnd({6}, 2), rnd({6}, 3)},
             [](const auto& v) { return ag::layer_norm(v[0], v[1], v[2]); });
  check_grad({rnd({2, 4, 3, 3}, 4), rnd({4}, 5), rnd({4}, 6)},
             [](const auto& v) { return ag::group_norm(v[0], 2, v[1], v[2]); });
  check_grad({rnd({3, 5}, 7)}, [](const auto& v) { return ag::normalize_rows(v[0]); });
  check_grad({rnd({1, 4, 2, 3}, 8)}, [](const auto& v) { return ag::normalize_channels(v[0]); });
}

TEST_CASE("spatial ops match finite differences") {
  check_grad({rnd({1, 2, 4, 4}, 1), rnd({3, 2, 3, 3}, 2), rnd({3}, 3)},
             [](const auto& v) { return ag::conv2d(v[0], v[1], v[2]); });
  check_grad({rnd({1, 2, 3, 3}, 4)}, [](const auto& v) { return ag::upsample_bilinear(v[0], 7, 5); });
  check_grad({rnd({3, 4}, 5), rnd({2, 4, 2, 2}, 6)}, [](const auto& v) { return ag::channel_project(v[0], v[1]); });
  check_grad({rnd({2, 3, 2, 2}, 7)}, [](const auto& v) { return ag::spatial_pool(v[0], ag::Pooling::kAverage); });
  check_grad({rnd({2, 3, 2, 2}, 8)}, [](const auto& v) { return ag::spatial_pool(v[0], ag::Pooling::kMax); });
  check_grad({rnd({1, 4, 2, 2}, 9)},
             [](const auto& v) { return ag::group_reduce(v[0], {0, 0, 1, 1}, 2, ag::Reduction::kMax); });
  check_grad({rnd({1, 4, 2, 2}, 10)},
             [](const auto& v) { return ag::group_reduce(v[0], {0, 1, 1, 1}, 2, ag::Reduction::kMean); });
}

TEST_CASE("attention matches finite differences in both masking modes") {
  for (bool causal : {false, true})
    check_grad({rnd({4, 6}, 1), rnd({4, 6}, 2), rnd({4, 6}, 3)},
               [causal](const auto& v) { return ag::attention(v[0], v[1], v[2], 2, causal); });
}

TEST_CASE("bce_with_logits matches a scalar oracle and its gradient") {
  const Tensor logits = rnd({2, 4}, 1, 3.0);
  const Tensor targets({2, 4}, {1, 0, 1, 1, 0, 0, 1, 0});
  double ref = 0.0;
  for (int64_t i = 0; i < 8; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits[i]));
    ref -= targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p);
  }
  ref /= 8.0;
  CHECK(ag::bce_with_logits(ag::constant(logits), targets)->value[0] == doctest::Approx(ref).epsilon(1e-12));
  check_grad({logits}, [&](const auto& v) { return ag::bce_with_logits(v[0], targets); });
}

TEST_CASE("bce at zero logits is ln 2 and saturates toward zero") {
  const Tensor targets({1, 4}, {1, 0, 1, 0});
  CHECK(ag::bce_with_logits(ag::constant(Tensor({1, 4}, 0.0)), targets)->value[0] ==
        doctest::Approx(std::log(2.0)));
  const Tensor big({1, 4}, {60, -60, 60, -60});
  CHECK(ag::bce_with_logits(ag::constant(big), targets)->value[0] < 1e-20);
}

TEST_CASE("bilinear upsampling follows the half-pixel convention") {
  // 2x2 checkerboard to 4x4: source coordinate of output p is (p + 0.5) / 2 - 0.5, clamped at 0.
  const Tensor x({1, 1, 2, 2}, {1, 0, 0, 1});
  const Tensor y = ag::upsample_bilinear(ag::constant(x), 4, 4)->value;
  auto src = [](int p) { return std::clamp((p + 0.5) / 2.0 - 0.5, 0.0, 1.0); };
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const double a = src(i), b = src(j);
      const double want = (1 - a) * (1 - b) * 1 + a * b * 1;
      CHECK(y[i * 4 + j] == doctest::Approx(want).epsilon(1e-12));
    }
  const Tensor c({1, 1, 3, 3}, 0.7);
  const Tensor up = ag::upsample_bilinear(ag::constant(c), 11, 11)->value;
  for (double v : up.data) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("no-grad scope records no graph") {
  ag::Var p = ag::parameter(Tensor({2}, 1.0));
  ag::Var y;
  {
    ag::NoGradGuard g;
    y = ag::mul(p, p);
  }
  CHECK(y->parents.empty());
  CHECK_FALSE(y->requires_grad);
  CHECK(ag::grad_enabled());
}

TEST_CASE("shape mismatches raise validation errors") {
  CHECK_THROWS_AS(ag::add(ag::constant(Tensor({2})), ag::constant(Tensor({3}))), ValidationError);
  CHECK_THROWS_AS(ag::matmul(ag::constant(Tensor({2, 3})), ag::constant(Tensor({2, 3}))), ValidationError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ValidationError);
}
