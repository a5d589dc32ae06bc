#include "wsseg/postprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <unordered_map>

namespace wsseg {

void CrfParams::validate() const {
  if (iterations < 0) throw ConfigError("crf.iterations must be >= 0");
  if (w_gauss < 0.0 || w_bilateral < 0.0) throw ConfigError("crf weights must be >= 0");
  if (!(theta_gamma > 0.0) || !(theta_alpha > 0.0) || !(theta_beta > 0.0))
    throw ConfigError("crf kernel widths must be positive");
}

Tensor softmax_channels(const Tensor& scores) {
  if (scores.ndim() != 3) throw ValidationError("softmax_channels expects [C,H,W], got " + shape_str(scores.shape));
  const int64_t C = scores.dim(0), HW = scores.dim(1) * scores.dim(2);
  Tensor out(scores.shape);
  for (int64_t i = 0; i < HW; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < C; ++c) m = std::max(m, scores[c * HW + i]);
    double s = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      const double e = std::exp(scores[c * HW + i] - m);
      out[c * HW + i] = e;
      s += e;
    }
    for (int64_t c = 0; c < C; ++c) out[c * HW + i] /= s;
  }
  return out;
}

Mask argmax_mask(const Tensor& probs) {
  if (probs.ndim() != 3) throw ValidationError("argmax_mask expects [C,H,W], got " + shape_str(probs.shape));
  return pseudo_mask(probs.reshaped({1, probs.dim(0), probs.dim(1), probs.dim(2)}))[0];
}

// ---------------------------------------------------------------------------------------------
// Permutohedral lattice (splat / blur / slice), following Adams et al. and the dense CRF
// reference implementation.

namespace {

using Key = std::array<int32_t, PermutohedralLattice::kMaxDim>;

struct KeyHash {
  size_t operator()(const Key& k) const {
    uint64_t h = 1469598103934665603ULL;
    for (int32_t v : k) {
      h ^= static_cast<uint32_t>(v);
      h *= 1099511628211ULL;
    }
    return static_cast<size_t>(h);
  }
};

}  // namespace

PermutohedralLattice::PermutohedralLattice(const std::vector<double>& features, int64_t n, int64_t d)
    : n_(n), d_(d) {
  if (d < 1 || d > kMaxDim) throw ValidationError("lattice dimension must be in 1..8");
  if (static_cast<int64_t>(features.size()) != n * d) throw ValidationError("lattice feature size mismatch");
  const int64_t d1 = d + 1;
  offset_.assign(static_cast<size_t>(n * d1), 0);
  barycentric_.assign(static_cast<size_t>(n * d1), 0.0);

  std::vector<double> scale(d);
  const double inv_std = std::sqrt(2.0 / 3.0) * static_cast<double>(d1);
  for (int64_t i = 0; i < d; ++i) scale[i] = inv_std / std::sqrt(static_cast<double>((i + 1) * (i + 2)));

  std::vector<int32_t> canonical(static_cast<size_t>(d1 * d1));
  for (int64_t i = 0; i <= d; ++i) {
    for (int64_t j = 0; j <= d - i; ++j) canonical[i * d1 + j] = static_cast<int32_t>(i);
    for (int64_t j = d - i + 1; j <= d; ++j) canonical[i * d1 + j] = static_cast<int32_t>(i - d1);
  }

  std::unordered_map<Key, int32_t, KeyHash> table;
  std::vector<Key> keys;
  std::vector<double> elevated(d1), bary(d1 + 1);
  std::vector<int32_t> rem0(d1), rank(d1);
  const double down = 1.0 / static_cast<double>(d1);

  for (int64_t k = 0; k < n; ++k) {
    const double* f = features.data() + k * d;
    double sm = 0.0;
    for (int64_t j = d; j > 0; --j) {
      const double cf = f[j - 1] * scale[j - 1];
      elevated[j] = sm - static_cast<double>(j) * cf;
      sm += cf;
    }
    elevated[0] = sm;

    int32_t sum = 0;
    for (int64_t i = 0; i <= d; ++i) {
      const double v = down * elevated[i];
      const double up = std::ceil(v) * static_cast<double>(d1);
      const double dn = std::floor(v) * static_cast<double>(d1);
      rem0[i] = static_cast<int32_t>(up - elevated[i] < elevated[i] - dn ? up : dn);
      sum += rem0[i];
    }
    sum /= static_cast<int32_t>(d1);

    std::fill(rank.begin(), rank.end(), 0);
    for (int64_t i = 0; i < d; ++i) {
      const double di = elevated[i] - rem0[i];
      for (int64_t j = i + 1; j <= d; ++j) {
        if (di < elevated[j] - rem0[j])
          ++rank[i];
        else
          ++rank[j];
      }
    }
    for (int64_t i = 0; i <= d; ++i) {
      rank[i] += sum;
      if (rank[i] < 0) {
        rank[i] += static_cast<int32_t>(d1);
        rem0[i] += static_cast<int32_t>(d1);
      } else if (rank[i] > d) {
        rank[i] -= static_cast<int32_t>(d1);
        rem0[i] -= static_cast<int32_t>(d1);
      }
    }

    std::fill(bary.begin(), bary.end(), 0.0);
    for (int64_t i = 0; i <= d; ++i) {
      const double v = (elevated[i] - rem0[i]) * down;
      bary[d - rank[i]] += v;
      bary[d - rank[i] + 1] -= v;
    }
    bary[0] += 1.0 + bary[d1];

    for (int64_t r = 0; r <= d; ++r) {
      Key key{};
      for (int64_t i = 0; i < d; ++i) key[i] = rem0[i] + canonical[r * d1 + rank[i]];
      auto [it, inserted] = table.try_emplace(key, static_cast<int32_t>(keys.size()));
      if (inserted) keys.push_back(key);
      offset_[k * d1 + r] = it->second;
      barycentric_[k * d1 + r] = bary[r];
    }
  }

  points_ = static_cast<int64_t>(keys.size());
  plus_.assign(static_cast<size_t>(points_ * d1), -1);
  minus_.assign(static_cast<size_t>(points_ * d1), -1);
  for (int64_t m = 0; m < points_; ++m) {
    for (int64_t j = 0; j <= d; ++j) {
      Key n1{}, n2{};
      for (int64_t i = 0; i < d; ++i) {
        n1[i] = keys[m][i] - 1;
        n2[i] = keys[m][i] + 1;
      }
      if (j < d) {
        n1[j] = keys[m][j] + static_cast<int32_t>(d);
        n2[j] = keys[m][j] - static_cast<int32_t>(d);
      }
      if (auto it = table.find(n1); it != table.end()) minus_[m * d1 + j] = it->second;
      if (auto it = table.find(n2); it != table.end()) plus_[m * d1 + j] = it->second;
    }
  }
}

std::vector<double> PermutohedralLattice::filter(const std::vector<double>& values, int64_t channels) const {
  if (static_cast<int64_t>(values.size()) != channels * n_) throw ValidationError("lattice filter size mismatch");
  const int64_t d1 = d_ + 1;
  std::vector<double> grid(static_cast<size_t>(points_ * channels), 0.0), tmp(grid.size());
  for (int64_t k = 0; k < n_; ++k)
    for (int64_t r = 0; r < d1; ++r) {
      const int64_t o = offset_[k * d1 + r];
      const double w = barycentric_[k * d1 + r];
      for (int64_t c = 0; c < channels; ++c) grid[o * channels + c] += w * values[c * n_ + k];
    }
  for (int64_t j = 0; j < d1; ++j) {
    for (int64_t m = 0; m < points_; ++m) {
      const int32_t lo = minus_[m * d1 + j], hi = plus_[m * d1 + j];
      for (int64_t c = 0; c < channels; ++c) {
        const double a = lo >= 0 ? grid[lo * channels + c] : 0.0;
        const double b = hi >= 0 ? grid[hi * channels + c] : 0.0;
        tmp[m * channels + c] = grid[m * channels + c] + 0.5 * (a + b);
      }
    }
    grid.swap(tmp);
  }
  const double alpha = 1.0 / (1.0 + std::pow(2.0, -static_cast<double>(d_)));
  std::vector<double> out(values.size(), 0.0);
  for (int64_t k = 0; k < n_; ++k)
    for (int64_t r = 0; r < d1; ++r) {
      const int64_t o = offset_[k * d1 + r];
      const double w = barycentric_[k * d1 + r] * alpha;
      for (int64_t c = 0; c < channels; ++c) out[c * n_ + k] += w * grid[o * channels + c];
    }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Mean field.

namespace {

void check_inputs(const RgbImage& image, const Tensor& probs) {
  if (probs.ndim() != 3) throw ValidationError("crf probs must be [C,H,W], got " + shape_str(probs.shape));
  if (probs.dim(1) != image.height || probs.dim(2) != image.width)
    throw ValidationError("crf image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                          " does not match probs " + shape_str(probs.shape));
  if (static_cast<int64_t>(image.pixels.size()) != image.height * image.width * 3)
    throw ValidationError("crf image buffer has the wrong size");
  const int64_t C = probs.dim(0), HW = image.height * image.width;
  for (int64_t i = 0; i < HW; ++i) {
    double s = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      const double p = probs[c * HW + i];
      if (!(p >= 0.0)) throw ValidationError("crf probs must be non-negative and finite");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-4)
      throw ValidationError("crf probs do not sum to 1 at pixel " + std::to_string(i) + " (sum " +
                            std::to_string(s) + ")");
  }
}

std::vector<double> bilateral_features(const RgbImage& img, const CrfParams& p) {
  std::vector<double> f(static_cast<size_t>(img.height * img.width * 5));
  for (int64_t y = 0; y < img.height; ++y)
    for (int64_t x = 0; x < img.width; ++x) {
      double* o = f.data() + (y * img.width + x) * 5;
      const uint8_t* px = img.at(y, x);
      o[0] = static_cast<double>(x) / p.theta_alpha;
      o[1] = static_cast<double>(y) / p.theta_alpha;
      for (int c = 0; c < 3; ++c) o[2 + c] = static_cast<double>(px[c]) / p.theta_beta;
    }
  return f;
}

double sq_dist(const double* a, const double* b, int64_t d) {
  double s = 0.0;
  for (int64_t i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Sum over j != i of exp(-|dp|^2 / (2 theta^2)) Q_j, by separable truncated convolution.
class SmoothnessFilter {
 public:
  SmoothnessFilter(int64_t h, int64_t w, double theta) : h_(h), w_(w) {
    radius_ = std::min<int64_t>(static_cast<int64_t>(std::ceil(4.0 * theta)), std::max(h, w));
    for (int64_t r = -radius_; r <= radius_; ++r)
      taps_.push_back(std::exp(-static_cast<double>(r * r) / (2.0 * theta * theta)));
  }

  void apply(const double* in, double* out) const {
    std::vector<double> rows(static_cast<size_t>(h_ * w_), 0.0);
    for (int64_t y = 0; y < h_; ++y)
      for (int64_t x = 0; x < w_; ++x) {
        double s = 0.0;
        const int64_t lo = std::max<int64_t>(0, x - radius_), hi = std::min(w_ - 1, x + radius_);
        for (int64_t xx = lo; xx <= hi; ++xx) s += taps_[xx - x + radius_] * in[y * w_ + xx];
        rows[y * w_ + x] = s;
      }
    for (int64_t y = 0; y < h_; ++y)
      for (int64_t x = 0; x < w_; ++x) {
        double s = 0.0;
        const int64_t lo = std::max<int64_t>(0, y - radius_), hi = std::min(h_ - 1, y + radius_);
        for (int64_t yy = lo; yy <= hi; ++yy) s += taps_[yy - y + radius_] * rows[yy * w_ + x];
        out[y * w_ + x] = s - in[y * w_ + x];
      }
  }

 private:
  int64_t h_, w_, radius_;
  std::vector<double> taps_;
};

// Lattice bilateral filter with its overall gain fitted to exact Gaussian sums.
class BilateralFilter {
 public:
  BilateralFilter(const std::vector<double>& feats, int64_t n) : lattice_(feats, n, 5) {
    const std::vector<double> ones(static_cast<size_t>(n), 1.0);
    const std::vector<double> approx = lattice_.filter(ones, 1);
    const int64_t samples = n <= 1024 ? n : 256;
    const int64_t stride = std::max<int64_t>(1, n / samples);
    double num = 0.0, den = 0.0;
    for (int64_t i = 0; i < n; i += stride) {
      double exact = 0.0;
      for (int64_t j = 0; j < n; ++j) exact += std::exp(-0.5 * sq_dist(&feats[i * 5], &feats[j * 5], 5));
      num += approx[i] * exact;
      den += approx[i] * approx[i];
    }
    gain_ = den > 0.0 ? num / den : 1.0;
  }

  /// values channel-major [C, N]; returns sum_{j != i} k(i, j) v_j.
  std::vector<double> apply(const std::vector<double>& values, int64_t channels) const {
    std::vector<double> out = lattice_.filter(values, channels);
    for (size_t i = 0; i < out.size(); ++i) out[i] = gain_ * out[i] - values[i];
    return out;
  }

 private:
  PermutohedralLattice lattice_;
  double gain_ = 1.0;
};

void softmax_in_place(std::vector<double>& logits, int64_t C, int64_t N, Tensor& q) {
  for (int64_t i = 0; i < N; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < C; ++c) m = std::max(m, logits[c * N + i]);
    double s = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      const double e = std::exp(logits[c * N + i] - m);
      q[c * N + i] = e;
      s += e;
    }
    for (int64_t c = 0; c < C; ++c) q[c * N + i] /= s;
  }
}

}  // namespace

Tensor crf_mean_field(const RgbImage& image, const Tensor& probs, const CrfParams& params, CrfMethod method,
                      std::vector<Tensor>* history) {
  params.validate();
  check_inputs(image, probs);
  Tensor q = probs;
  if (params.iterations == 0 || (params.w_gauss == 0.0 && params.w_bilateral == 0.0)) return q;

  const int64_t C = probs.dim(0), H = image.height, W = image.width, N = H * W;
  std::vector<double> unary(static_cast<size_t>(C * N));
  for (int64_t i = 0; i < C * N; ++i) unary[i] = std::log(std::max(probs[i], 1e-8));

  const std::vector<double> feats = bilateral_features(image, params);
  std::unique_ptr<SmoothnessFilter> smooth;
  std::unique_ptr<BilateralFilter> bilateral;
  if (method == CrfMethod::kFast) {
    if (params.w_gauss > 0.0) smooth = std::make_unique<SmoothnessFilter>(H, W, params.theta_gamma);
    if (params.w_bilateral > 0.0) bilateral = std::make_unique<BilateralFilter>(feats, N);
  }

  std::vector<double> logits(static_cast<size_t>(C * N));
  for (int64_t it = 0; it < params.iterations; ++it) {
    logits = unary;
    if (method == CrfMethod::kFast) {
      if (smooth) {
        std::vector<double> msg(static_cast<size_t>(N));
        for (int64_t c = 0; c < C; ++c) {
          smooth->apply(q.ptr() + c * N, msg.data());
          for (int64_t i = 0; i < N; ++i) logits[c * N + i] += params.w_gauss * msg[i];
        }
      }
      if (bilateral) {
        const std::vector<double> msg = bilateral->apply(q.data, C);
        for (int64_t i = 0; i < C * N; ++i) logits[i] += params.w_bilateral * msg[i];
      }
    } else {
      const double inv_g = 1.0 / (2.0 * params.theta_gamma * params.theta_gamma);
      for (int64_t i = 0; i < N; ++i) {
        const double yi = static_cast<double>(i / W), xi = static_cast<double>(i % W);
        for (int64_t j = 0; j < N; ++j) {
          if (j == i) continue;
          const double dy = yi - static_cast<double>(j / W), dx = xi - static_cast<double>(j % W);
          const double k = params.w_gauss * std::exp(-(dx * dx + dy * dy) * inv_g) +
                           params.w_bilateral * std::exp(-0.5 * sq_dist(&feats[i * 5], &feats[j * 5], 5));
          for (int64_t c = 0; c < C; ++c) logits[c * N + i] += k * q[c * N + j];
        }
      }
    }
    softmax_in_place(logits, C, N, q);
    if (history) history->push_back(q);
  }
  return q;
}

Mask crf_refine(const RgbImage& image, const Tensor& probs, const CrfParams& params, CrfMethod method) {
  return argmax_mask(crf_mean_field(image, probs, params, method));
}

}  // namespace wsseg
