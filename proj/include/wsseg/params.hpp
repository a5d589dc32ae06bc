#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "wsseg/autograd.hpp"

namespace wsseg {

struct NamedParam {
  std::string name;
  ag::Var var;
};

/// Ordered registry of trainable tensors, keyed by a dotted group name.
class ParamSet {
 public:
  ag::Var add(std::string name, Tensor init);
  void append(const ParamSet& other);

  const std::vector<NamedParam>& items() const { return items_; }
  std::vector<ag::Var> vars() const;
  const ag::Var& find(const std::string& name) const;
  bool contains(const std::string& name) const;
  void zero_grad() const;

  /// Copies of every value, keyed by name.
  std::map<std::string, Tensor> snapshot() const;
  /// Overwrites values; every name must exist with an identical shape.
  void restore(const std::map<std::string, Tensor>& values) const;

 private:
  std::vector<NamedParam> items_;
};

/// He-style N(0, gain^2 / fan_in) initialization; fan_in = numel / shape[0] for conv weights
/// [out, in, k, k] and shape[0] for dense weights [in, out].
Tensor conv_init(const Shape& s, std::mt19937_64& rng, double gain = 1.0);
Tensor dense_init(const Shape& s, std::mt19937_64& rng, double gain = 1.0);

}  // namespace wsseg
