#include "wsseg/params.hpp"

#include <cmath>

namespace wsseg {

ag::Var ParamSet::add(std::string name, Tensor init) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  items_.push_back({std::move(name), ag::parameter(std::move(init))});
  return items_.back().var;
}

void ParamSet::append(const ParamSet& other) {
  for (const NamedParam& p : other.items()) {
    if (contains(p.name)) throw ConfigError("duplicate parameter name " + p.name);
    items_.push_back(p);
  }
}

std::vector<ag::Var> ParamSet::vars() const {
  std::vector<ag::Var> out;
  out.reserve(items_.size());
  for (const NamedParam& p : items_) out.push_back(p.var);
  return out;
}

const ag::Var& ParamSet::find(const std::string& name) const {
  for (const NamedParam& p : items_)
    if (p.name == name) return p.var;
  throw ValidationError("no parameter named " + name);
}

bool ParamSet::contains(const std::string& name) const {
  for (const NamedParam& p : items_)
    if (p.name == name) return true;
  return false;
}

void ParamSet::zero_grad() const {
  for (const NamedParam& p : items_) p.var->grad = Tensor();
}

std::map<std::string, Tensor> ParamSet::snapshot() const {
  std::map<std::string, Tensor> out;
  for (const NamedParam& p : items_) out.emplace(p.name, p.var->value);
  return out;
}

void ParamSet::restore(const std::map<std::string, Tensor>& values) const {
  for (const NamedParam& p : items_) {
    auto it = values.find(p.name);
    if (it == values.end()) throw ValidationError("missing parameter " + p.name);
    if (it->second.shape != p.var->value.shape)
      throw ValidationError("shape mismatch for parameter " + p.name + ": stored " + shape_str(it->second.shape) +
                            " vs model " + shape_str(p.var->value.shape));
  }
  for (const NamedParam& p : items_) p.var->value = values.at(p.name);
}

Tensor conv_init(const Shape& s, std::mt19937_64& rng, double gain) {
  const double fan_in = static_cast<double>(shape_numel(s) / s.at(0));
  return Tensor::randn(s, rng, gain / std::sqrt(fan_in));
}

Tensor dense_init(const Shape& s, std::mt19937_64& rng, double gain) {
  return Tensor::randn(s, rng, gain / std::sqrt(static_cast<double>(s.at(0))));
}

}  // namespace wsseg
