#include "wsseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace wsseg {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d < 0) throw ValidationError("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw ValidationError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                          shape_str(shape));
}

Tensor Tensor::randn(Shape s, std::mt19937_64& rng, double stddev) {
  Tensor t(std::move(s));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data) v = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape s, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(s));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.data) v = dist(rng);
  return t;
}

static int64_t flat_index(const Shape& shape, std::initializer_list<int64_t> idx) {
  if (idx.size() != shape.size()) throw ValidationError("index rank mismatch for shape " + shape_str(shape));
  int64_t flat = 0;
  size_t i = 0;
  for (int64_t v : idx) {
    if (v < 0 || v >= shape[i]) throw ValidationError("index out of range for shape " + shape_str(shape));
    flat = flat * shape[i] + v;
    ++i;
  }
  return flat;
}

double& Tensor::at(std::initializer_list<int64_t> idx) { return data[flat_index(shape, idx)]; }
double Tensor::at(std::initializer_list<int64_t> idx) const { return data[flat_index(shape, idx)]; }

Tensor Tensor::reshaped(Shape s) const {
  if (shape_numel(s) != numel())
    throw ValidationError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
  return Tensor(std::move(s), data);
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw ValidationError("shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor slice_rows(const Tensor& t, int64_t start, int64_t count) {
  if (t.ndim() < 1 || start < 0 || count < 0 || start + count > t.dim(0))
    throw ValidationError("row slice out of range for " + shape_str(t.shape));
  const int64_t row = t.dim(0) == 0 ? 0 : t.numel() / t.dim(0);
  Shape s = t.shape;
  s[0] = count;
  std::vector<double> v(t.data.begin() + start * row, t.data.begin() + (start + count) * row);
  return Tensor(std::move(s), std::move(v));
}

}  // namespace wsseg
