#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "sbfm/errors.hpp"
#include "sbfm/tensor.hpp"

namespace sbfm {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode recorder. Nodes are appended in evaluation order, so every
// node's inputs precede it; backward() replays the list in reverse.
class Tape {
 public:
  // Called during backward with this node's id; reads grad(id) and
  // accumulates into accumulator(input) for each input that requires grad.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    return push(Node{std::move(value), nullptr, nullptr, {}, {}, {}, false});
  }

  // Leaf whose gradient stays on the tape (read back with grad()).
  Var variable(Tensor value) {
    return push(Node{std::move(value), nullptr, nullptr, {}, {}, {}, true});
  }

  // Leaf bound to an external tensor; backward accumulates into param.grad
  // when param.requires_grad is set. The tensor must outlive the tape.
  Var parameter(Tensor& param) {
    return push(Node{Tensor{}, &param, &param, {}, {}, {}, param.requires_grad});
  }

  // Read-only leaf over an external tensor, no gradient.
  Var reference(const Tensor& value) {
    return push(Node{Tensor{}, &value, nullptr, {}, {}, {}, false});
  }

  Var record(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) {
      if (&v.tape() != this) throw ContractError("tape: input recorded on a different tape");
      ids.push_back(v.id());
      needs = needs || requires_grad(v.id());
    }
    Node n{std::move(value), nullptr, nullptr, std::move(ids), {},
           needs ? std::move(fn) : BackwardFn{}, needs};
    return push(std::move(n));
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }

  // Upstream gradient of a node; empty span when nothing flowed into it.
  std::span<const double> grad(std::size_t id) const { return nodes_.at(id).grad; }
  std::span<const double> grad(Var v) const { return grad(v.id()); }

  // Gradient accumulator for a node, zero-initialised on first use.
  std::span<double> accumulator(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad.assign(value(id).size(), 0.0);
    return n.grad;
  }

  void backward(Var loss) {
    if (&loss.tape() != this) throw ContractError("backward: loss belongs to a different tape");
    if (value(loss.id()).size() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(value(loss.id()).shape));
    }
    for (Node& n : nodes_) n.grad.clear();
    nodes_[loss.id()].grad.assign(1, 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (n.backward) n.backward(*this, i);
      if (n.sink != nullptr) {
        Tensor& p = *n.sink;
        if (p.grad.size() != p.values.size()) p.zero_grad();
        for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += n.grad[k];
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* external;
    Tensor* sink;
    std::vector<std::size_t> inputs;
    std::vector<double> grad;
    BackwardFn backward;
    bool requires_grad;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

}  // namespace sbfm
