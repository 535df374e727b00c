#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "voxloc/tensor.hpp"

namespace voxloc {

// Handle into a Tape's node list.
struct Var {
  std::int32_t idx = -1;
  bool valid() const { return idx >= 0; }
};

// Reverse-mode tape. Ops append nodes in topological order; backward walks
// the list in reverse. Parameters are memoized by id so repeated use (the
// recurrent layers share weights) accumulates into one gradient buffer.
template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void(Tape&)> backward;
    int param_id = -1;
    bool needs_grad = false;
    bool grad_live = false;
  };

  explicit Tape(bool checked = false) : checked_(checked) {}

  bool checked() const { return checked_; }
  void set_checked(bool on) { checked_ = on; }

  Var constant(Tensor<T> v) { return push(std::move(v), false, nullptr, "constant"); }

  // differentiable input that is not a parameter (used by gradient checks)
  Var input(Tensor<T> v) { return push(std::move(v), true, nullptr, "input"); }

  Var param(int param_id, const Tensor<T>& value) {
    auto it = param_vars_.find(param_id);
    if (it != param_vars_.end()) return it->second;
    Var v = push(value, true, nullptr, "param");
    nodes_[v.idx].param_id = param_id;
    param_vars_.emplace(param_id, v);
    return v;
  }

  Var push(Tensor<T> value, bool needs_grad, std::function<void(Tape&)> backward,
           const char* op_name) {
    if (checked_ && !value.all_finite())
      throw numeric_error(std::string("non-finite values out of op '") + op_name + "'");
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  const Tensor<T>& value(Var v) const { return nodes_[v.idx].value; }
  Tensor<T>& value_mut(Var v) { return nodes_[v.idx].value; }

  void set_backward(Var v, std::function<void(Tape&)> f) {
    nodes_[v.idx].backward = std::move(f);
  }

  bool needs_grad(Var v) const { return nodes_[v.idx].needs_grad; }

  // gradient buffer, allocated on first touch
  Tensor<T>& grad(Var v) {
    Node& n = nodes_[v.idx];
    if (!n.grad_live) {
      n.grad = Tensor<T>::zeros(n.value.shape());
      n.grad_live = true;
    }
    return n.grad;
  }

  bool has_grad(Var v) const { return nodes_[v.idx].grad_live; }

  void backward(Var root) {
    if (value(root).numel() != 1) throw shape_error("backward root must be scalar");
    grad(root)[0] = T{1};
    for (std::int32_t i = root.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.needs_grad && n.grad_live && n.backward) n.backward(*this);
    }
  }

  // gradient of a parameter after backward; zeros if the parameter was unused
  Tensor<T> param_grad(int param_id) const {
    auto it = param_vars_.find(param_id);
    if (it == param_vars_.end()) return Tensor<T>();
    const Node& n = nodes_[it->second.idx];
    if (!n.grad_live) return Tensor<T>::zeros(n.value.shape());
    return n.grad;
  }

  const std::unordered_map<int, Var>& param_vars() const { return param_vars_; }

  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    param_vars_.clear();
  }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<int, Var> param_vars_;
  bool checked_ = false;
};

}  // namespace voxloc
