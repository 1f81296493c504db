#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace fm3d {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Grad recording is on by default; NoGradGuard switches it off for the
// current thread (used by eval-mode forwards so no graph is built).
struct GradMode {
  static bool& flag() {
    thread_local bool enabled = true;
    return enabled;
  }
  static bool enabled() { return flag(); }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::flag()) { GradMode::flag() = false; }
  ~NoGradGuard() { GradMode::flag() = prev; }
};

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  bool requires_grad = false;
  std::vector<T> grad;                               // allocated lazily, same size as value
  std::vector<std::shared_ptr<Node<T>>> parents;     // empty for leaves
  std::function<void(Node<T>&)> backprop;            // accumulates into parents' grads

  size_t numel() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

} // namespace detail

// Gradients of one backward pass, keyed by parameter identity. A parameter
// that the loss does not reach is reported as an all-zero gradient.
template <typename T>
class GradientRecord {
public:
  void put(const std::shared_ptr<detail::Node<T>>& node) { nodes_[node.get()] = node; }

  bool contains(const Tensor<T>& p) const { return nodes_.count(p.node_ptr()) != 0; }

  // Gradient for p; zeros if the loss did not reach it.
  std::vector<T> gradient(const Tensor<T>& p) const {
    auto it = nodes_.find(p.node_ptr());
    if (it == nodes_.end()) return std::vector<T>(p.numel(), T(0));
    return it->second->grad;
  }

  // Direct view for parameters that were reached; nullptr otherwise.
  const std::vector<T>* find(const Tensor<T>& p) const {
    auto it = nodes_.find(p.node_ptr());
    return it == nodes_.end() ? nullptr : &it->second->grad;
  }

  size_t size() const { return nodes_.size(); }

private:
  std::unordered_map<const void*, std::shared_ptr<detail::Node<T>>> nodes_;
};

// Dense row-major tensor handle. Copies share the underlying node; ops
// produce fresh nodes wired to their inputs so backward() can replay the
// graph in reverse. Values are immutable once produced by an op; only
// optimizer code mutates leaf parameters through mutable_data().
template <typename T>
class Tensor {
public:
  using Node = detail::Node<T>;

  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return filled(shape, T(0), requires_grad);
  }

  static Tensor ones(const Shape& shape, bool requires_grad = false) {
    return filled(shape, T(1), requires_grad);
  }

  static Tensor filled(const Shape& shape, T v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value.assign(shape_numel(shape), v);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(const Shape& shape, std::vector<T> data, bool requires_grad = false) {
    if (data.size() != shape_numel(shape))
      throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  size_t rank() const { return node_->shape.size(); }
  size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const std::vector<T>& data() const { return node_->value; }

  // Leaf mutation for optimizers and buffer updates. Calling this on an op
  // output would desynchronize the recorded graph, so it is restricted.
  std::vector<T>& mutable_data() {
    if (!node_->parents.empty())
      throw std::logic_error("mutable_data on non-leaf tensor");
    return node_->value;
  }

  const std::vector<T>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item() on tensor of " + shape_str(shape()));
    return node_->value[0];
  }

  T at(std::initializer_list<size_t> idx) const {
    return node_->value[flat_index(idx)];
  }

  void set_requires_grad(bool b) {
    if (!node_->parents.empty())
      throw std::logic_error("set_requires_grad on non-leaf tensor");
    node_->requires_grad = b;
  }

  const void* id() const { return node_.get(); }
  Node* node_ptr() const { return node_.get(); }
  const std::shared_ptr<Node>& node() const { return node_; }

  // Builds an op output node. Records parents/backprop only when grad mode
  // is on and some input needs gradients.
  static Tensor make_op(Shape shape, std::vector<T> value,
                        std::vector<Tensor> inputs,
                        std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool needs = false;
    for (const auto& in : inputs)
      if (in.defined() && in.requires_grad()) needs = true;
    if (needs && GradMode::enabled()) {
      n->requires_grad = true;
      for (auto& in : inputs)
        if (in.defined()) n->parents.push_back(in.node_);
      n->backprop = std::move(backprop);
    }
    return Tensor(std::move(n));
  }

  // Reverse-mode sweep from a scalar loss over the grad-requiring subgraph.
  // Gradients of visited nodes are reset first; with accumulate set, leaf
  // gradients are kept and added to instead.
  friend GradientRecord<T> backward(const Tensor& loss, bool accumulate = false) {
    if (loss.numel() != 1)
      throw std::invalid_argument("backward expects a scalar loss, got " +
                                  shape_str(loss.shape()));
    if (!loss.requires_grad())
      throw std::invalid_argument("backward on a detached graph: loss does not require grad");

    // Post-order DFS; order ends up leaves-first.
    std::vector<std::shared_ptr<Node>> order;
    std::unordered_set<Node*> seen;
    struct Frame {
      std::shared_ptr<Node> n;
      size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node_, 0});
    seen.insert(loss.node_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.n->parents.size()) {
        auto& p = f.n->parents[f.next++];
        if (p->requires_grad && !seen.count(p.get())) {
          seen.insert(p.get());
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }

    for (auto& n : order) {
      n->ensure_grad();
      bool leaf = n->parents.empty();
      if (!(accumulate && leaf)) n->zero_grad();
    }
    loss.node_->grad[0] += T(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backprop) (*it)->backprop(**it);

    GradientRecord<T> record;
    for (auto& n : order)
      if (n->parents.empty()) record.put(n);
    return record;
  }

private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  size_t flat_index(std::initializer_list<size_t> idx) const {
    if (idx.size() != node_->shape.size())
      throw std::invalid_argument("index rank mismatch");
    size_t flat = 0;
    size_t d = 0;
    for (size_t i : idx) {
      if (i >= node_->shape[d])
        throw std::out_of_range("index out of range in dim " + std::to_string(d));
      flat = flat * node_->shape[d] + i;
      ++d;
    }
    return flat;
  }

  std::shared_ptr<Node> node_;
};

} // namespace fm3d
