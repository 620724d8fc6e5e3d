#pragma once

// Named registry of trainable tensors. Registration order is stable and
// iteration is deterministic. There is exactly one physical tensor per id:
// a second registration against an existing id returns the same handle, so
// every consumer observes the same values and gradients.

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cytr/tensor.hpp"

namespace cytr {

template <typename S>
class ParameterStore {
 public:
  using InitFn = std::function<void(std::vector<S>&)>;

  /// Returns the tensor registered under `id`, creating it (requires_grad on,
  /// filled by `init`) on first registration. Re-registration with a
  /// different shape is an error.
  TensorPtr<S> get_or_register(const std::string& id, const Shape& shape, const InitFn& init) {
    auto it = by_id_.find(id);
    if (it != by_id_.end()) {
      if (it->second->shape != shape)
        throw DimensionError("parameter '" + id + "' re-registered with shape " +
                             shape_to_string(shape) + ", existing " +
                             shape_to_string(it->second->shape));
      return it->second;
    }
    std::vector<S> values(shape_numel(shape), S(0));
    if (init) init(values);
    TensorPtr<S> t = make_tensor<S>(shape, std::move(values), /*requires_grad=*/true);
    by_id_.emplace(id, t);
    order_.push_back(id);
    return t;
  }

  TensorPtr<S> get(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw ContractError("unknown parameter id: " + id);
    return it->second;
  }

  bool contains(const std::string& id) const { return by_id_.count(id) != 0; }

  /// Parameter ids in registration order.
  const std::vector<std::string>& ids() const { return order_; }

  std::size_t size() const { return order_.size(); }

  void zero_grads() {
    for (const auto& id : order_) by_id_.at(id)->zero_grad();
  }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& id : order_) n += by_id_.at(id)->size();
    return n;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, TensorPtr<S>> by_id_;
};

}  // namespace cytr
