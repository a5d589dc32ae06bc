#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace wsseg {

using Shape = std::vector<int64_t>;

/// Thrown when a value violates an operation's precondition (shape, range, finiteness).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown for inconsistent or unsupported configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

/// Dense row-major array of doubles with an explicit shape.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<double> values);

  static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
  static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }
  /// i.i.d. N(0, stddev^2) entries.
  static Tensor randn(Shape s, std::mt19937_64& rng, double stddev = 1.0);
  static Tensor uniform(Shape s, std::mt19937_64& rng, double lo, double hi);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  int64_t ndim() const { return static_cast<int64_t>(shape.size()); }
  bool empty() const { return data.empty(); }
  /// Exact equality of shape and every element.
  bool operator==(const Tensor&) const = default;

  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }
  std::span<double> span() { return data; }
  std::span<const double> span() const { return data; }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  double& at(std::initializer_list<int64_t> idx);
  double at(std::initializer_list<int64_t> idx) const;

  Tensor reshaped(Shape s) const;
  bool all_finite() const;
  double max_abs() const;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

/// Rows [start, start+count) of a tensor viewed as [rows, rest...].
Tensor slice_rows(const Tensor& t, int64_t start, int64_t count);

}  // namespace wsseg
