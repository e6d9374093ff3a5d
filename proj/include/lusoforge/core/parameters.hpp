#pragma once

#include <deque>
#include <map>
#include <string>

#include "lusoforge/core/tensor.hpp"

namespace lusoforge {

/// Ordered collection of named parameters with stable addresses.
template <class T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> value, bool decay) {
    if (index_.contains(name)) throw contract_error("duplicate parameter name '" + name + "'");
    auto& p = params_.emplace_back(name, std::move(value), decay);
    index_.emplace(name, params_.size() - 1);
    return p;
  }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw contract_error("no parameter named '" + name + "'");
    return params_[it->second];
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw contract_error("no parameter named '" + name + "'");
    return params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.contains(name); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const noexcept { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Copies values (not gradients) from another set with identical names and shapes.
  template <class U>
  void copy_values_from(const ParameterSet<U>& other) {
    for (auto& p : params_) {
      const auto& src = other.at(p.name);
      if (src.value.shape() != p.value.shape()) {
        throw shape_error("parameter '" + p.name + "' shape " + to_string(p.value.shape()) +
                          " does not match source " + to_string(src.value.shape()));
      }
      auto dst = p.value.data();
      auto s = src.value.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(s[i]);
    }
  }

 private:
  std::deque<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace lusoforge
