#pragma once

// Minimal tape-free reverse-mode automatic differentiation over dense double tensors.
//
// Every op returns a Var (shared node). A node records its parents and a backward
// closure only when at least one parent requires a gradient and gradient recording
// is enabled; otherwise the op is a plain forward computation.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "wsseg/tensor.hpp"

namespace wsseg::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  /// Gradient buffer, zero-allocated on first use.
  Tensor& grad_buffer();
  bool has_grad() const { return !grad.data.empty(); }
  const Shape& shape() const { return value.shape; }
};

Var constant(Tensor t);
Var parameter(Tensor t);

/// Seeds d(loss)/d(loss) = 1 and propagates to every reachable node that requires a gradient.
void backward(const Var& loss);
void zero_grad(std::span<const Var> params);

/// RAII scope that disables graph recording (inference passes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

enum class Reduction { kMax, kMean };
enum class Pooling { kAverage, kMax };

// Elementwise and linear algebra.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var mul_const(const Var& a, const Tensor& c);
Var scale(const Var& a, double s);
Var scale_by(const Var& a, const Var& s);  // s has one element
Var add_scalar(const Var& a, double s);
Var exp(const Var& a);
Var clamp(const Var& a, double lo, double hi);
Var silu(const Var& a);
Var gelu(const Var& a);
Var matmul(const Var& a, const Var& b);  // [m,k] x [k,n]
Var transpose(const Var& a);             // 2-D
Var add_row_bias(const Var& x, const Var& b);      // [n,d] + [d]
Var add_channel_bias(const Var& x, const Var& b);  // [N,C,H,W] + [C]
Var linear(const Var& x, const Var& w, const Var& b);  // x[n,in] w[in,out] b[out] (b may be null)

// Shape manipulation.
Var reshape(const Var& x, Shape s);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& x, int64_t start, int64_t count);
Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var mean_rows(const Var& x);  // [n,d] -> [1,d]

// Normalization.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var group_norm(const Var& x, int64_t groups, const Var& gamma, const Var& beta, double eps = 1e-5);
/// x / max(||x||, eps) per row.
Var normalize_rows(const Var& x, double eps = 1e-8);
Var normalize_channels(const Var& x, double eps = 1e-8);  // [N,C,H,W], unit norm over C per pixel

// Spatial.
Var conv2d(const Var& x, const Var& w, const Var& b);  // stride 1, same padding, odd kernel
Var upsample_bilinear(const Var& x, int64_t out_h, int64_t out_w);  // align_corners = false
/// scale * bank x per pixel: bank[K,D], x[N,D,H,W] -> [N,K,H,W]; scale (one element) may be null.
Var channel_project(const Var& bank, const Var& x, const Var& scale = nullptr);

// Attention over a single sequence x[n,d]; heads split d evenly.
Var attention(const Var& q, const Var& k, const Var& v, int64_t heads, bool causal);

// Prototype-channel to class-channel reduction over [N,K,H,W].
Var group_reduce(const Var& x, const std::vector<int64_t>& class_of, int64_t num_classes, Reduction mode);
Var spatial_pool(const Var& x, Pooling mode);  // [N,C,H,W] -> [N,C]
/// Mean multi-label binary cross-entropy with logits over all entries.
Var bce_with_logits(const Var& logits, const Tensor& targets);

}  // namespace wsseg::ag
