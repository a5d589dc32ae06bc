#include "wsseg/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace wsseg::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool req = false;
  if (g_grad_enabled)
    for (const Var& p : parents)
      if (p && p->requires_grad) req = true;
  if (req) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->shape() != b->shape())
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a->shape()) + " vs " +
                          shape_str(b->shape()));
}

void require_rank(const Var& a, int64_t r, const char* op) {
  if (a->value.ndim() != r)
    throw ValidationError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                          shape_str(a->shape()));
}

// Unary elementwise op helper: dfn(x, y) returns dy/dx.
template <typename F, typename D>
Var unary(const Var& a, F fn, D dfn) {
  Tensor out(a->shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = fn(a->value[i]);
  return make_node(std::move(out), {a}, [dfn](Node& self) {
    Node& p = *self.parents[0];
    Tensor& g = p.grad_buffer();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * dfn(p.value[i], self.value[i]);
  });
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.data.empty()) grad = Tensor::zeros(value.shape);
  return grad;
}

Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return n;
}

Var parameter(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  return n;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& loss) {
  if (!loss || loss->value.numel() != 1) throw ValidationError("backward: loss must be a scalar");
  if (!loss->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

void zero_grad(std::span<const Var> params) {
  for (const Var& p : params) p->grad = Tensor();
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    for (int j = 0; j < 2; ++j) {
      Node& p = *self.parents[j];
      if (!p.requires_grad) continue;
      Tensor& g = p.grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    for (int j = 0; j < 2; ++j) {
      Node& p = *self.parents[j];
      if (!p.requires_grad) continue;
      Tensor& g = p.grad_buffer();
      const double sign = j == 0 ? 1.0 : -1.0;
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var mul_const(const Var& a, const Tensor& c) {
  if (a->shape() != c.shape) throw ValidationError("mul_const: shape mismatch");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
  return make_node(std::move(out), {a}, [c](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * c[i];
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var scale_by(const Var& a, const Var& s) {
  if (s->value.numel() != 1) throw ValidationError("scale_by: scale must have one element");
  const double sv = s->value[0];
  Tensor out = a->value;
  for (double& v : out.data) v *= sv;
  return make_node(std::move(out), {a, s}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& ps = *self.parents[1];
    const double sv = ps.value[0];
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * sv;
    }
    if (ps.requires_grad) {
      double acc = 0.0;
      for (int64_t i = 0; i < self.grad.numel(); ++i) acc += self.grad[i] * pa.value[i];
      ps.grad_buffer()[0] += acc;
    }
  });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x))); },
      [](double x, double) {
        const double u = k * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int64_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
  if (b->value.dim(0) != k)
    throw ValidationError("matmul: inner dimension mismatch " + shape_str(a->shape()) + " x " +
                          shape_str(b->shape()));
  Tensor out({m, n});
  MatMap(out.ptr(), m, n).noalias() = CMatMap(a->value.ptr(), m, k) * CMatMap(b->value.ptr(), k, n);
  return make_node(std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    CMatMap g(self.grad.ptr(), m, n);
    if (pa.requires_grad)
      MatMap(pa.grad_buffer().ptr(), m, k).noalias() += g * CMatMap(pb.value.ptr(), k, n).transpose();
    if (pb.requires_grad)
      MatMap(pb.grad_buffer().ptr(), k, n).noalias() += CMatMap(pa.value.ptr(), m, k).transpose() * g;
  });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const int64_t m = a->value.dim(0), n = a->value.dim(1);
  Tensor out({n, m});
  MatMap(out.ptr(), n, m) = CMatMap(a->value.ptr(), m, n).transpose();
  return make_node(std::move(out), {a}, [m, n](Node& self) {
    MatMap(self.parents[0]->grad_buffer().ptr(), m, n) += CMatMap(self.grad.ptr(), n, m).transpose();
  });
}

Var add_row_bias(const Var& x, const Var& b) {
  require_rank(x, 2, "add_row_bias");
  const int64_t n = x->value.dim(0), d = x->value.dim(1);
  if (b->value.numel() != d) throw ValidationError("add_row_bias: bias length mismatch");
  Tensor out = x->value;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out[i * d + j] += b->value[j];
  return make_node(std::move(out), {x, b}, [n, d](Node& self) {
    Node& px = *self.parents[0];
    Node& pb = *self.parents[1];
    if (px.requires_grad) {
      Tensor& g = px.grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
    }
  });
}

Var add_channel_bias(const Var& x, const Var& b) {
  require_rank(x, 4, "add_channel_bias");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  if (b->value.numel() != C) throw ValidationError("add_channel_bias: bias length mismatch");
  Tensor out = x->value;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      double* p = out.ptr() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) p[i] += b->value[c];
    }
  return make_node(std::move(out), {x, b}, [N, C, HW](Node& self) {
    Node& px = *self.parents[0];
    Node& pb = *self.parents[1];
    if (px.requires_grad) {
      Tensor& g = px.grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          const double* p = self.grad.ptr() + (n * C + c) * HW;
          double acc = 0.0;
          for (int64_t i = 0; i < HW; ++i) acc += p[i];
          g[c] += acc;
        }
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  Var y = matmul(x, w);
  return b ? add_row_bias(y, b) : y;
}

Var reshape(const Var& x, Shape s) {
  Tensor out = x->value.reshaped(std::move(s));
  return make_node(std::move(out), {x}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_rows: no inputs");
  Shape tail(parts[0]->shape().begin() + 1, parts[0]->shape().end());
  int64_t rows = 0;
  for (const Var& p : parts) {
    Shape t(p->shape().begin() + 1, p->shape().end());
    if (t != tail) throw ValidationError("concat_rows: trailing shape mismatch " + shape_str(p->shape()));
    rows += p->value.dim(0);
  }
  Shape s = parts[0]->shape();
  s[0] = rows;
  Tensor out(s);
  int64_t off = 0;
  std::vector<int64_t> offsets;
  for (const Var& p : parts) {
    offsets.push_back(off);
    std::copy(p->value.data.begin(), p->value.data.end(), out.data.begin() + off);
    off += p->value.numel();
  }
  return make_node(std::move(out), parts, [offsets](Node& self) {
    for (size_t j = 0; j < self.parents.size(); ++j) {
      Node& p = *self.parents[j];
      if (!p.requires_grad) continue;
      Tensor& g = p.grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[offsets[j] + i];
    }
  });
}

Var slice_rows(const Var& x, int64_t start, int64_t count) {
  Tensor out = wsseg::slice_rows(x->value, start, count);
  const int64_t row = x->value.dim(0) == 0 ? 0 : x->value.numel() / x->value.dim(0);
  return make_node(std::move(out), {x}, [start, row](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < self.grad.numel(); ++i) g[start * row + i] += self.grad[i];
  });
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x->value.data) s += v;
  return make_node(Tensor::scalar(s), {x}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[0];
  });
}

Var mean_all(const Var& x) {
  if (x->value.numel() == 0) throw ValidationError("mean_all: empty input");
  return scale(sum_all(x), 1.0 / static_cast<double>(x->value.numel()));
}

Var mean_rows(const Var& x) {
  require_rank(x, 2, "mean_rows");
  const int64_t n = x->value.dim(0), d = x->value.dim(1);
  if (n == 0) throw ValidationError("mean_rows: no rows");
  Tensor out({1, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out[j] += x->value[i * d + j] / static_cast<double>(n);
  return make_node(std::move(out), {x}, [n, d](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j) g[i * d + j] += self.grad[j] / static_cast<double>(n);
  });
}

namespace {

// Normalized values and reciprocal standard deviations saved for the backward pass.
struct NormStats {
  std::vector<double> xhat;
  std::vector<double> rstd;
};

}  // namespace

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const int64_t n = x->value.dim(0), d = x->value.dim(1);
  if (gamma->value.numel() != d || beta->value.numel() != d)
    throw ValidationError("layer_norm: affine parameter length mismatch");
  auto st = std::make_shared<NormStats>();
  st->xhat.resize(n * d);
  st->rstd.resize(n);
  Tensor out({n, d});
  for (int64_t i = 0; i < n; ++i) {
    const double* row = x->value.ptr() + i * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= d;
    const double r = 1.0 / std::sqrt(var + eps);
    st->rstd[i] = r;
    for (int64_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mean) * r;
      st->xhat[i * d + j] = xh;
      out[i * d + j] = xh * gamma->value[j] + beta->value[j];
    }
  }
  return make_node(std::move(out), {x, gamma, beta}, [st, n, d](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    const Tensor& gy = self.grad;
    if (pg.requires_grad || pb.requires_grad) {
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) {
          if (pg.requires_grad) pg.grad_buffer()[j] += gy[i * d + j] * st->xhat[i * d + j];
          if (pb.requires_grad) pb.grad_buffer()[j] += gy[i * d + j];
        }
    }
    if (px.requires_grad) {
      Tensor& gx = px.grad_buffer();
      std::vector<double> dxh(d);
      for (int64_t i = 0; i < n; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          dxh[j] = gy[i * d + j] * pg.value[j];
          m1 += dxh[j];
          m2 += dxh[j] * st->xhat[i * d + j];
        }
        m1 /= d;
        m2 /= d;
        for (int64_t j = 0; j < d; ++j)
          gx[i * d + j] += st->rstd[i] * (dxh[j] - m1 - st->xhat[i * d + j] * m2);
      }
    }
  });
}

Var group_norm(const Var& x, int64_t groups, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 4, "group_norm");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  if (groups <= 0 || C % groups != 0)
    throw ConfigError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  if (gamma->value.numel() != C || beta->value.numel() != C)
    throw ValidationError("group_norm: affine parameter length mismatch");
  const int64_t cpg = C / groups, len = cpg * HW;
  auto st = std::make_shared<NormStats>();
  st->xhat.resize(x->value.numel());
  st->rstd.resize(N * groups);
  Tensor out(x->shape());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t g = 0; g < groups; ++g) {
      const int64_t base = (n * C + g * cpg) * HW;
      const double* p = x->value.ptr() + base;
      double mean = 0.0;
      for (int64_t i = 0; i < len; ++i) mean += p[i];
      mean /= len;
      double var = 0.0;
      for (int64_t i = 0; i < len; ++i) var += (p[i] - mean) * (p[i] - mean);
      var /= len;
      const double r = 1.0 / std::sqrt(var + eps);
      st->rstd[n * groups + g] = r;
      for (int64_t i = 0; i < len; ++i) {
        const int64_t c = g * cpg + i / HW;
        const double xh = (p[i] - mean) * r;
        st->xhat[base + i] = xh;
        out[base + i] = xh * gamma->value[c] + beta->value[c];
      }
    }
  return make_node(std::move(out), {x, gamma, beta}, [st, N, C, HW, groups, cpg, len](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    const Tensor& gy = self.grad;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t g = 0; g < groups; ++g) {
        const int64_t base = (n * C + g * cpg) * HW;
        double m1 = 0.0, m2 = 0.0;
        for (int64_t i = 0; i < len; ++i) {
          const int64_t c = g * cpg + i / HW;
          const double gi = gy[base + i];
          if (pg.requires_grad) pg.grad_buffer()[c] += gi * st->xhat[base + i];
          if (pb.requires_grad) pb.grad_buffer()[c] += gi;
          const double dxh = gi * pg.value[c];
          m1 += dxh;
          m2 += dxh * st->xhat[base + i];
        }
        if (!px.requires_grad) continue;
        m1 /= len;
        m2 /= len;
        Tensor& gx = px.grad_buffer();
        const double r = st->rstd[n * groups + g];
        for (int64_t i = 0; i < len; ++i) {
          const int64_t c = g * cpg + i / HW;
          const double dxh = gy[base + i] * pg.value[c];
          gx[base + i] += r * (dxh - m1 - st->xhat[base + i] * m2);
        }
      }
  });
}

Var normalize_rows(const Var& x, double eps) {
  require_rank(x, 2, "normalize_rows");
  const int64_t n = x->value.dim(0), d = x->value.dim(1);
  auto norms = std::make_shared<std::vector<double>>(n);
  Tensor out({n, d});
  for (int64_t i = 0; i < n; ++i) {
    const double* r = x->value.ptr() + i * d;
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) s += r[j] * r[j];
    (*norms)[i] = std::sqrt(s);
    const double inv = 1.0 / std::max((*norms)[i], eps);
    for (int64_t j = 0; j < d; ++j) out[i * d + j] = r[j] * inv;
  }
  return make_node(std::move(out), {x}, [norms, n, d, eps](Node& self) {
    Node& px = *self.parents[0];
    Tensor& gx = px.grad_buffer();
    for (int64_t i = 0; i < n; ++i) {
      const double nr = (*norms)[i];
      const double s = std::max(nr, eps);
      const double* xr = px.value.ptr() + i * d;
      const double* g = self.grad.ptr() + i * d;
      double xg = 0.0;
      for (int64_t j = 0; j < d; ++j) xg += xr[j] * g[j];
      const double c = nr > eps ? xg / (nr * nr * nr) : 0.0;
      for (int64_t j = 0; j < d; ++j) gx[i * d + j] += g[j] / s - xr[j] * c;
    }
  });
}

Var normalize_channels(const Var& x, double eps) {
  require_rank(x, 4, "normalize_channels");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  auto norms = std::make_shared<std::vector<double>>(N * HW, 0.0);
  Tensor out(x->shape());
  for (int64_t n = 0; n < N; ++n) {
    const double* p = x->value.ptr() + n * C * HW;
    double* nr = norms->data() + n * HW;
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < HW; ++i) nr[i] += p[c * HW + i] * p[c * HW + i];
    for (int64_t i = 0; i < HW; ++i) nr[i] = std::sqrt(nr[i]);
    double* o = out.ptr() + n * C * HW;
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < HW; ++i) o[c * HW + i] = p[c * HW + i] / std::max(nr[i], eps);
  }
  return make_node(std::move(out), {x}, [norms, N, C, HW, eps](Node& self) {
    Node& px = *self.parents[0];
    Tensor& gx = px.grad_buffer();
    std::vector<double> xg(HW);
    for (int64_t n = 0; n < N; ++n) {
      const double* p = px.value.ptr() + n * C * HW;
      const double* g = self.grad.ptr() + n * C * HW;
      const double* nr = norms->data() + n * HW;
      std::fill(xg.begin(), xg.end(), 0.0);
      for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < HW; ++i) xg[i] += p[c * HW + i] * g[c * HW + i];
      double* o = gx.ptr() + n * C * HW;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < HW; ++i) {
          const double s = std::max(nr[i], eps);
          const double k = nr[i] > eps ? xg[i] / (nr[i] * nr[i] * nr[i]) : 0.0;
          o[c * HW + i] += g[c * HW + i] / s - p[c * HW + i] * k;
        }
    }
  });
}

namespace {

void im2col(const double* x, int64_t C, int64_t H, int64_t W, int64_t k, double* cols) {
  const int64_t pad = k / 2;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ky = 0; ky < k; ++ky)
      for (int64_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * H * W;
        for (int64_t y = 0; y < H; ++y) {
          const int64_t sy = y + ky - pad;
          for (int64_t xx = 0; xx < W; ++xx) {
            const int64_t sx = xx + kx - pad;
            row[y * W + xx] = (sy >= 0 && sy < H && sx >= 0 && sx < W) ? x[(c * H + sy) * W + sx] : 0.0;
          }
        }
      }
}

void col2im(const double* cols, int64_t C, int64_t H, int64_t W, int64_t k, double* x) {
  const int64_t pad = k / 2;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ky = 0; ky < k; ++ky)
      for (int64_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * H * W;
        for (int64_t y = 0; y < H; ++y) {
          const int64_t sy = y + ky - pad;
          if (sy < 0 || sy >= H) continue;
          for (int64_t xx = 0; xx < W; ++xx) {
            const int64_t sx = xx + kx - pad;
            if (sx >= 0 && sx < W) x[(c * H + sy) * W + sx] += row[y * W + xx];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  const int64_t N = x->value.dim(0), Cin = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int64_t Cout = w->value.dim(0), k = w->value.dim(2);
  if (w->value.dim(1) != Cin || w->value.dim(3) != k || k % 2 == 0)
    throw ValidationError("conv2d: weight " + shape_str(w->shape()) + " incompatible with input " +
                          shape_str(x->shape()));
  const int64_t HW = H * W, KK = Cin * k * k;
  Tensor out({N, Cout, H, W});
  std::vector<double> cols(k == 1 ? 0 : KK * HW);
  CMatMap wm(w->value.ptr(), Cout, KK);
  for (int64_t n = 0; n < N; ++n) {
    const double* xn = x->value.ptr() + n * Cin * HW;
    const double* src = xn;
    if (k != 1) {
      im2col(xn, Cin, H, W, k, cols.data());
      src = cols.data();
    }
    MatMap(out.ptr() + n * Cout * HW, Cout, HW).noalias() = wm * CMatMap(src, KK, HW);
  }
  Var y = make_node(std::move(out), {x, w}, [N, Cin, H, W, Cout, k, HW, KK](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    CMatMap wm(pw.value.ptr(), Cout, KK);
    std::vector<double> cols(k == 1 ? 0 : KK * HW);
    std::vector<double> dcols(k == 1 ? 0 : KK * HW);
    for (int64_t n = 0; n < N; ++n) {
      CMatMap g(self.grad.ptr() + n * Cout * HW, Cout, HW);
      const double* xn = px.value.ptr() + n * Cin * HW;
      if (pw.requires_grad) {
        const double* src = xn;
        if (k != 1) {
          im2col(xn, Cin, H, W, k, cols.data());
          src = cols.data();
        }
        MatMap(pw.grad_buffer().ptr(), Cout, KK).noalias() += g * CMatMap(src, KK, HW).transpose();
      }
      if (px.requires_grad) {
        double* gx = px.grad_buffer().ptr() + n * Cin * HW;
        if (k == 1) {
          MatMap(gx, Cin, HW).noalias() += wm.transpose() * g;
        } else {
          MatMap(dcols.data(), KK, HW).noalias() = wm.transpose() * g;
          col2im(dcols.data(), Cin, H, W, k, gx);
        }
      }
    }
  });
  return b ? add_channel_bias(y, b) : y;
}

namespace {

struct LinearTaps {
  std::vector<int64_t> i0, i1;
  std::vector<double> w1;  // weight of i1; weight of i0 is 1 - w1
};

LinearTaps bilinear_taps(int64_t in, int64_t out) {
  LinearTaps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.w1.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    double src = scale * (static_cast<double>(o) + 0.5) - 0.5;
    if (src < 0.0) src = 0.0;
    int64_t i0 = static_cast<int64_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int64_t i1 = i0 < in - 1 ? i0 + 1 : i0;
    t.i0[o] = i0;
    t.i1[o] = i1;
    t.w1[o] = src - static_cast<double>(i0);
  }
  return t;
}

}  // namespace

Var upsample_bilinear(const Var& x, int64_t out_h, int64_t out_w) {
  require_rank(x, 4, "upsample_bilinear");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  if (out_h <= 0 || out_w <= 0 || H <= 0 || W <= 0) throw ValidationError("upsample_bilinear: empty size");
  if (H == out_h && W == out_w) {
    return reshape(x, x->shape());
  }
  auto ty = std::make_shared<LinearTaps>(bilinear_taps(H, out_h));
  auto tx = std::make_shared<LinearTaps>(bilinear_taps(W, out_w));
  Tensor out({N, C, out_h, out_w});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* src = x->value.ptr() + nc * H * W;
    double* dst = out.ptr() + nc * out_h * out_w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const double wy1 = ty->w1[oy], wy0 = 1.0 - wy1;
      const double* r0 = src + ty->i0[oy] * W;
      const double* r1 = src + ty->i1[oy] * W;
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const double wx1 = tx->w1[ox], wx0 = 1.0 - wx1;
        const int64_t a = tx->i0[ox], b = tx->i1[ox];
        dst[oy * out_w + ox] = wy0 * (wx0 * r0[a] + wx1 * r0[b]) + wy1 * (wx0 * r1[a] + wx1 * r1[b]);
      }
    }
  }
  return make_node(std::move(out), {x}, [ty, tx, N, C, H, W, out_h, out_w](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      double* dst = gx.ptr() + nc * H * W;
      const double* g = self.grad.ptr() + nc * out_h * out_w;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        const double wy1 = ty->w1[oy], wy0 = 1.0 - wy1;
        double* r0 = dst + ty->i0[oy] * W;
        double* r1 = dst + ty->i1[oy] * W;
        for (int64_t ox = 0; ox < out_w; ++ox) {
          const double wx1 = tx->w1[ox], wx0 = 1.0 - wx1;
          const int64_t a = tx->i0[ox], b = tx->i1[ox];
          const double gv = g[oy * out_w + ox];
          r0[a] += gv * wy0 * wx0;
          r0[b] += gv * wy0 * wx1;
          r1[a] += gv * wy1 * wx0;
          r1[b] += gv * wy1 * wx1;
        }
      }
    }
  });
}

Var channel_project(const Var& bank, const Var& x, const Var& scale) {
  require_rank(bank, 2, "channel_project");
  require_rank(x, 4, "channel_project");
  const int64_t K = bank->value.dim(0), D = bank->value.dim(1);
  const int64_t N = x->value.dim(0), HW = x->value.dim(2) * x->value.dim(3);
  if (x->value.dim(1) != D)
    throw ValidationError("channel_project: bank dim " + std::to_string(D) + " vs feature channels " +
                          std::to_string(x->value.dim(1)));
  if (scale && scale->value.numel() != 1) throw ValidationError("channel_project: scale must have one element");
  const double sv = scale ? scale->value[0] : 1.0;
  Tensor out({N, K, x->value.dim(2), x->value.dim(3)});
  CMatMap bm(bank->value.ptr(), K, D);
  for (int64_t n = 0; n < N; ++n) {
    MatMap o(out.ptr() + n * K * HW, K, HW);
    if (scale)
      o.noalias() = (sv * bm) * CMatMap(x->value.ptr() + n * D * HW, D, HW);
    else
      o.noalias() = bm * CMatMap(x->value.ptr() + n * D * HW, D, HW);
  }
  std::vector<Var> parents{bank, x};
  if (scale) parents.push_back(scale);
  return make_node(std::move(out), std::move(parents), [K, D, N, HW](Node& self) {
    Node& pb = *self.parents[0];
    Node& px = *self.parents[1];
    Node* ps = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    const double sv = ps ? ps->value[0] : 1.0;
    RowMat gb = RowMat::Zero(K, D);
    for (int64_t n = 0; n < N; ++n) {
      CMatMap g(self.grad.ptr() + n * K * HW, K, HW);
      CMatMap xv(px.value.ptr() + n * D * HW, D, HW);
      if (pb.requires_grad || (ps && ps->requires_grad)) gb.noalias() += g * xv.transpose();
      if (px.requires_grad)
        MatMap(px.grad_buffer().ptr() + n * D * HW, D, HW).noalias() += (sv * CMatMap(pb.value.ptr(), K, D)).transpose() * g;
    }
    // d/dbank = s * sum g x^T and d/ds = <sum g x^T, bank>.
    if (pb.requires_grad) MatMap(pb.grad_buffer().ptr(), K, D) += sv * gb;
    if (ps && ps->requires_grad) ps->grad_buffer()[0] += (gb.array() * CMatMap(pb.value.ptr(), K, D).array()).sum();
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int64_t heads, bool causal) {
  require_rank(q, 2, "attention");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const int64_t n = q->value.dim(0), d = q->value.dim(1);
  if (heads <= 0 || d % heads != 0) throw ConfigError("attention: width not divisible by head count");
  const int64_t dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[h] is n x n row-major.
  auto probs = std::make_shared<std::vector<double>>(heads * n * n);
  Tensor out({n, d});
  for (int64_t h = 0; h < heads; ++h) {
    Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> Qh(q->value.ptr() + h * dh, n, dh, Eigen::OuterStride<>(d));
    Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> Kh(k->value.ptr() + h * dh, n, dh, Eigen::OuterStride<>(d));
    Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> Vh(v->value.ptr() + h * dh, n, dh, Eigen::OuterStride<>(d));
    MatMap P(probs->data() + h * n * n, n, n);
    P.noalias() = (Qh * Kh.transpose()) * inv;
    for (int64_t i = 0; i < n; ++i) {
      const int64_t lim = causal ? i + 1 : n;
      double m = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < lim; ++j) m = std::max(m, P(i, j));
      double z = 0.0;
      for (int64_t j = 0; j < lim; ++j) {
        P(i, j) = std::exp(P(i, j) - m);
        z += P(i, j);
      }
      for (int64_t j = 0; j < lim; ++j) P(i, j) /= z;
      for (int64_t j = lim; j < n; ++j) P(i, j) = 0.0;
    }
    Eigen::Map<RowMat, 0, Eigen::OuterStride<>> Oh(out.ptr() + h * dh, n, dh, Eigen::OuterStride<>(d));
    Oh.noalias() = P * Vh;
  }
  return make_node(std::move(out), {q, k, v}, [probs, n, d, dh, heads, inv](Node& self) {
    Node& pq = *self.parents[0];
    Node& pk = *self.parents[1];
    Node& pv = *self.parents[2];
    RowMat dS(n, n);
    for (int64_t h = 0; h < heads; ++h) {
      using SMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
      using MSMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
      SMap G(self.grad.ptr() + h * dh, n, dh, Eigen::OuterStride<>(d));
      SMap Qh(pq.value.ptr() + h * dh, n, dh, Eigen::OuterStride<>(d));
      SMap Kh(pk.value.ptr() + h * dh, n, dh, Eigen::OuterStride<>(d));
      SMap Vh(pv.value.ptr() + h * dh, n, dh, Eigen::OuterStride<>(d));
      CMatMap P(probs->data() + h * n * n, n, n);
      if (pv.requires_grad) {
        MSMap gV(pv.grad_buffer().ptr() + h * dh, n, dh, Eigen::OuterStride<>(d));
        gV.noalias() += P.transpose() * G;
      }
      if (!pq.requires_grad && !pk.requires_grad) continue;
      RowMat dP = G * Vh.transpose();
      for (int64_t i = 0; i < n; ++i) {
        const double r = (dP.row(i).array() * P.row(i).array()).sum();
        dS.row(i) = (P.row(i).array() * (dP.row(i).array() - r)).matrix() * inv;
      }
      if (pq.requires_grad) {
        MSMap gQ(pq.grad_buffer().ptr() + h * dh, n, dh, Eigen::OuterStride<>(d));
        gQ.noalias() += dS * Kh;
      }
      if (pk.requires_grad) {
        MSMap gK(pk.grad_buffer().ptr() + h * dh, n, dh, Eigen::OuterStride<>(d));
        gK.noalias() += dS.transpose() * Qh;
      }
    }
  });
}

Var group_reduce(const Var& x, const std::vector<int64_t>& class_of, int64_t num_classes, Reduction mode) {
  require_rank(x, 4, "group_reduce");
  const int64_t N = x->value.dim(0), K = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  if (static_cast<int64_t>(class_of.size()) != K)
    throw ValidationError("group_reduce: class_of length " + std::to_string(class_of.size()) +
                          " vs channels " + std::to_string(K));
  std::vector<std::vector<int64_t>> members(num_classes);
  for (int64_t k = 0; k < K; ++k) {
    if (class_of[k] < 0 || class_of[k] >= num_classes) throw ValidationError("group_reduce: class index out of range");
    members[class_of[k]].push_back(k);
  }
  for (int64_t c = 0; c < num_classes; ++c)
    if (members[c].empty()) throw ConfigError("class " + std::to_string(c) + " has no prototypes");
  Tensor out({N, num_classes, x->value.dim(2), x->value.dim(3)});
  auto arg = std::make_shared<std::vector<int64_t>>();
  if (mode == Reduction::kMax) arg->resize(N * num_classes * HW);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < num_classes; ++c) {
      double* o = out.ptr() + (n * num_classes + c) * HW;
      const auto& mem = members[c];
      if (mode == Reduction::kMax) {
        int64_t* a = arg->data() + (n * num_classes + c) * HW;
        const double* first = x->value.ptr() + (n * K + mem[0]) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          o[i] = first[i];
          a[i] = mem[0];
        }
        for (size_t m = 1; m < mem.size(); ++m) {
          const double* src = x->value.ptr() + (n * K + mem[m]) * HW;
          for (int64_t i = 0; i < HW; ++i)
            if (src[i] > o[i]) {
              o[i] = src[i];
              a[i] = mem[m];
            }
        }
      } else {
        const double w = 1.0 / static_cast<double>(mem.size());
        for (int64_t k : mem) {
          const double* src = x->value.ptr() + (n * K + k) * HW;
          for (int64_t i = 0; i < HW; ++i) o[i] += src[i] * w;
        }
      }
    }
  auto mem_ptr = std::make_shared<std::vector<std::vector<int64_t>>>(std::move(members));
  return make_node(std::move(out), {x}, [arg, mem_ptr, N, K, HW, num_classes, mode](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < num_classes; ++c) {
        const double* g = self.grad.ptr() + (n * num_classes + c) * HW;
        if (mode == Reduction::kMax) {
          const int64_t* a = arg->data() + (n * num_classes + c) * HW;
          for (int64_t i = 0; i < HW; ++i) gx[(n * K + a[i]) * HW + i] += g[i];
        } else {
          const auto& mem = (*mem_ptr)[c];
          const double w = 1.0 / static_cast<double>(mem.size());
          for (int64_t k : mem) {
            double* dst = gx.ptr() + (n * K + k) * HW;
            for (int64_t i = 0; i < HW; ++i) dst[i] += g[i] * w;
          }
        }
      }
  });
}

Var spatial_pool(const Var& x, Pooling mode) {
  require_rank(x, 4, "spatial_pool");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  if (HW == 0) throw ValidationError("spatial_pool: empty spatial extent");
  Tensor out({N, C});
  auto arg = std::make_shared<std::vector<int64_t>>(N * C, 0);
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* p = x->value.ptr() + nc * HW;
    if (mode == Pooling::kAverage) {
      double s = 0.0;
      for (int64_t i = 0; i < HW; ++i) s += p[i];
      out[nc] = s / static_cast<double>(HW);
    } else {
      int64_t best = 0;
      for (int64_t i = 1; i < HW; ++i)
        if (p[i] > p[best]) best = i;
      (*arg)[nc] = best;
      out[nc] = p[best];
    }
  }
  return make_node(std::move(out), {x}, [arg, N, C, HW, mode](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      if (mode == Pooling::kAverage) {
        const double g = self.grad[nc] / static_cast<double>(HW);
        for (int64_t i = 0; i < HW; ++i) gx[nc * HW + i] += g;
      } else {
        gx[nc * HW + (*arg)[nc]] += self.grad[nc];
      }
    }
  });
}

Var bce_with_logits(const Var& logits, const Tensor& targets) {
  if (logits->shape() != targets.shape)
    throw ValidationError("bce_with_logits: logits " + shape_str(logits->shape()) + " vs targets " +
                          shape_str(targets.shape));
  const int64_t n = logits->value.numel();
  if (n == 0) throw ValidationError("bce_with_logits: empty input");
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double x = logits->value[i], y = targets[i];
    s += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  return make_node(Tensor::scalar(s / static_cast<double>(n)), {logits}, [targets, n](Node& self) {
    Node& p = *self.parents[0];
    Tensor& g = p.grad_buffer();
    const double up = self.grad[0] / static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) {
      const double x = p.value[i];
      const double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      g[i] += up * (sig - targets[i]);
    }
  });
}

}  // namespace wsseg::ag
