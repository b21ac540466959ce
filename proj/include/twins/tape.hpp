#ifndef TWINS_TAPE_HPP
#define TWINS_TAPE_HPP

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "twins/tensor.hpp"

namespace twins {

template <typename Scalar>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<Scalar>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in execution order, so the record is
/// acyclic by construction and a single reverse sweep replays every adjoint once.
///
/// Confined to one thread for a forward/backward pair.
template <typename Scalar>
class Tape {
 public:
  using Vector = typename Tensor<Scalar>::Vector;
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), false, {}, {}); }

  /// A differentiable leaf. Named leaves are reported by backprop().
  Var<Scalar> leaf(Tensor<Scalar> value, std::string name = {}) {
    return push(std::move(value), true, std::move(name), {});
  }

  /// Records an operation. The adjoint closure is kept only if some input needs a gradient.
  Var<Scalar> record(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs, Backward backward) {
    bool needs_grad = false;
    for (const auto& in : inputs) needs_grad = needs_grad || nodes_[in.id()].requires_grad;
    return push(std::move(value), needs_grad, {}, needs_grad ? std::move(backward) : Backward{});
  }

  const Tensor<Scalar>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(const Var<Scalar>& v) const { return requires_grad(v.id()); }
  std::size_t size() const { return nodes_.size(); }

  /// Adds `delta` into the adjoint of node `id` (no-op for constants).
  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& delta) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return;
    if (node.adjoint.empty()) {
      node.adjoint = Tensor<Scalar>(node.value.shape(), delta);
    } else {
      node.adjoint.data() += delta;
    }
  }

  /// Adjoint of a node after backprop(); zeros if the loss does not reach it.
  Tensor<Scalar> gradient(const Var<Scalar>& v) const {
    const Node& node = nodes_[v.id()];
    return node.adjoint.empty() ? Tensor<Scalar>::zeros(node.value.shape()) : node.adjoint;
  }

  const Vector& adjoint_data(std::size_t id) const { return nodes_[id].adjoint.data(); }

  /// Exact reverse-mode gradients of a scalar loss w.r.t. every named leaf.
  GradientSet<Scalar> backprop(const Var<Scalar>& loss) {
    if (loss.value().size() != 1) {
      throw InvalidArgument("backprop needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    for (Node& node : nodes_) node.adjoint = Tensor<Scalar>();
    if (nodes_[loss.id()].requires_grad) {
      nodes_[loss.id()].adjoint = Tensor<Scalar>::constant(loss.shape(), Scalar(1));
    }
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.backward && !node.adjoint.empty()) node.backward(*this, i);
    }
    GradientSet<Scalar> grads;
    for (const Node& node : nodes_) {
      if (node.name.empty()) continue;
      grads.insert_or_assign(node.name, node.adjoint.empty() ? Tensor<Scalar>::zeros(node.value.shape())
                                                             : node.adjoint);
    }
    return grads;
  }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> adjoint;
    bool requires_grad = false;
    std::string name;
    Backward backward;
  };

  Var<Scalar> push(Tensor<Scalar> value, bool requires_grad, std::string name, Backward backward) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(name), std::move(backward)});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

}  // namespace twins

#endif  // TWINS_TAPE_HPP
