#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "htrvt/tensor.hpp"

namespace htr {

/// A named learnable tensor. Gradients accumulate across backward passes
/// until zero_grad() is called; has_grad records whether any backward pass
/// reached this parameter since the last clear.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;

  void zero_grad();
};

/// Non-learnable named state (batch-norm running statistics).
template <typename T>
struct Buffer {
  std::string name;
  Tensor<T> value;
};

/// Owns every parameter and buffer of a model. Addresses are stable for the
/// lifetime of the set, so layers keep raw references into it.
template <typename T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) = default;
  ParameterSet& operator=(ParameterSet&&) = default;

  Parameter<T>& add(std::string name, Tensor<T> value);
  Buffer<T>& add_buffer(std::string name, Tensor<T> value);

  std::vector<Parameter<T>*> params() const;
  std::vector<Buffer<T>*> buffers() const;
  Parameter<T>* find(const std::string& name) const;
  Buffer<T>* find_buffer(const std::string& name) const;

  void zero_grad();
  std::size_t count_scalars() const;
  std::size_t size() const { return params_.size(); }

 private:
  void claim(const std::string& name);

  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::vector<std::unique_ptr<Buffer<T>>> buffers_;
  std::unordered_map<std::string, std::size_t> names_;
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Ordered record of executed primitives. Node ids are assigned in execution
/// order, so replaying adjoints from the loss id downwards visits every node
/// after all of its consumers.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  /// Leaf bound to a parameter; repeated calls for the same parameter share
  /// one node. The parameter must outlive the tape and stay unmodified.
  Var<T> param(Parameter<T>& p);
  /// Records an op output. The backward closure runs only when at least one
  /// input requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward);
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward backward);

  const Tensor<T>& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Adjoint buffer of a node, zero-initialised on first access.
  Tensor<T>& grad(std::size_t id);

  /// Seeds d(loss)/d(loss) = 1 and replays adjoints in reverse order,
  /// accumulating into every reachable parameter.
  void backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    Backward backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> leaves_;
};

extern template struct Parameter<float>;
extern template struct Parameter<double>;
extern template class ParameterSet<float>;
extern template class ParameterSet<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace htr
