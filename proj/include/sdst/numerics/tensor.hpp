#pragma once

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sdst {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Error raised by every module of the library. The message is a short
/// machine-friendly tag (e.g. "empty-softmax") optionally followed by detail.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
struct Node {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  std::function<void()> backward;

  Matrix<Scalar>& grad_buffer() {
    if (grad.size() == 0) grad.setZero(value.rows(), value.cols());
    return grad;
  }
};

template <typename Scalar>
class Tape;

/// Handle to a node of the computation graph. Copies share the node.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  explicit Var(Matrix<Scalar> value, bool requires_grad = false)
      : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix<Scalar>& value() const { return node_->value; }
  Matrix<Scalar>& mutable_value() { return node_->value; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Scalar item() const { return node_->value(0, 0); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  /// Gradient accumulated by the last backward pass; zero-sized if none reached this node.
  const Matrix<Scalar>& grad() const { return node_->grad; }
  void zero_grad() const { node_->grad.resize(0, 0); }

  Node<Scalar>* node() const { return node_.get(); }
  const std::shared_ptr<Node<Scalar>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Records operations for reverse-mode differentiation. Only operations executed
/// while a tape is active (see TapeScope) and touching a grad-requiring input are
/// recorded; everything else evaluates eagerly without bookkeeping.
template <typename Scalar>
class Tape {
 public:
  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  void push(std::shared_ptr<Node<Scalar>> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf.
  void backward(const Var<Scalar>& loss) {
    if (loss.rows() != 1 || loss.cols() != 1) throw Error("backward-non-scalar");
    if (!loss.requires_grad()) return;
    loss.node()->grad_buffer().setConstant(Scalar(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<Scalar>& n = **it;
      if (n.grad.size() != 0 && n.backward) n.backward();
    }
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::shared_ptr<Node<Scalar>>> nodes_;
};

template <typename Scalar>
class TapeScope {
 public:
  explicit TapeScope(Tape<Scalar>& tape) : previous_(Tape<Scalar>::active()) {
    Tape<Scalar>::active() = &tape;
  }
  ~TapeScope() { Tape<Scalar>::active() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

namespace detail {

template <typename Scalar>
bool any_requires_grad(std::initializer_list<const Var<Scalar>*> inputs) {
  if (Tape<Scalar>::active() == nullptr) return false;
  for (const auto* v : inputs)
    if (v != nullptr && v->requires_grad()) return true;
  return false;
}

template <typename Scalar>
bool any_requires_grad(const std::vector<Var<Scalar>>& inputs) {
  if (Tape<Scalar>::active() == nullptr) return false;
  for (const auto& v : inputs)
    if (v.requires_grad()) return true;
  return false;
}

/// Wraps a forward value into a new node. When `track` is set, the node is pushed
/// on the active tape and `make_backward(node)` supplies its backward closure.
template <typename Scalar, typename MakeBackward>
Var<Scalar> result(Matrix<Scalar> value, bool track, MakeBackward&& make_backward) {
  Var<Scalar> out(std::move(value));
  if (track) {
    Node<Scalar>* n = out.node();
    n->requires_grad = true;
    n->backward = make_backward(n);
    Tape<Scalar>::active()->push(out.shared());
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar>& grad_of(const Var<Scalar>& v) {
  return v.node()->grad_buffer();
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> constant(Matrix<Scalar> value) {
  return Var<Scalar>(std::move(value), false);
}

template <typename Scalar>
Var<Scalar> parameter(Matrix<Scalar> value) {
  return Var<Scalar>(std::move(value), true);
}

}  // namespace sdst
