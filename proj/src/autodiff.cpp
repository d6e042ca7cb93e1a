#include "htrvt/autodiff.hpp"

#include <stdexcept>

namespace htr {

template <typename T>
void Parameter<T>::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor<T>(value.shape());
  } else {
    grad.fill(T(0));
  }
  has_grad = false;
}

template <typename T>
void ParameterSet<T>::claim(const std::string& name) {
  if (name.empty()) throw std::invalid_argument("parameter name must not be empty");
  if (!names_.emplace(name, names_.size()).second) {
    throw std::invalid_argument("duplicate parameter or buffer name: " + name);
  }
}

template <typename T>
Parameter<T>& ParameterSet<T>::add(std::string name, Tensor<T> value) {
  claim(name);
  auto p = std::make_unique<Parameter<T>>();
  p->name = std::move(name);
  p->grad = Tensor<T>(value.shape());
  p->value = std::move(value);
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename T>
Buffer<T>& ParameterSet<T>::add_buffer(std::string name, Tensor<T> value) {
  claim(name);
  auto b = std::make_unique<Buffer<T>>();
  b->name = std::move(name);
  b->value = std::move(value);
  buffers_.push_back(std::move(b));
  return *buffers_.back();
}

template <typename T>
std::vector<Parameter<T>*> ParameterSet<T>::params() const {
  std::vector<Parameter<T>*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename T>
std::vector<Buffer<T>*> ParameterSet<T>::buffers() const {
  std::vector<Buffer<T>*> out;
  out.reserve(buffers_.size());
  for (const auto& b : buffers_) out.push_back(b.get());
  return out;
}

template <typename T>
Parameter<T>* ParameterSet<T>::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

template <typename T>
Buffer<T>* ParameterSet<T>::find_buffer(const std::string& name) const {
  for (const auto& b : buffers_) {
    if (b->name == name) return b.get();
  }
  return nullptr;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <typename T>
std::size_t ParameterSet<T>::count_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.numel();
  return n;
}

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  if (auto it = leaves_.find(&p); it != leaves_.end()) return Var<T>{this, it->second};
  Node n;
  n.ref = &p.value;
  n.param = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  leaves_.emplace(&p, nodes_.size() - 1);
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
  return record(std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const auto& v : inputs) {
    if (v.tape != this) throw std::logic_error("op input recorded on a different tape");
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
const Tensor<T>& Tape<T>::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.ref ? *n.ref : n.value;
}

template <typename T>
Tensor<T>& Tape<T>::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor<T>(value(id).shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw std::logic_error("loss belongs to a different tape");
  const auto& lv = value(loss.id);
  if (lv.numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " + shape_str(lv.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor<T>();
  grad(loss.id).fill(T(1));

  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.param) {
      auto& pg = n.param->grad;
      if (pg.shape() != n.param->value.shape()) pg = Tensor<T>(n.param->value.shape());
      for (std::size_t k = 0; k < pg.numel(); ++k) pg[k] += n.grad[k];
      n.param->has_grad = true;
    } else if (n.backward) {
      n.backward(*this, n.grad);
    }
    // Adjoints of interior nodes are not needed once propagated.
    if (!n.param) n.grad = Tensor<T>();
  }
}

template struct Parameter<float>;
template struct Parameter<double>;
template class ParameterSet<float>;
template class ParameterSet<double>;
template struct Var<float>;
template struct Var<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace htr
