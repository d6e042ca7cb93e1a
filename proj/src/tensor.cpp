#include "htrvt/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace htr {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape_));
  }
  data_.assign(shape_numel(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape_));
  }
  if (shape_numel(shape_) != data_.size()) {
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
  }
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != shape_.size()) throw std::out_of_range("index rank mismatch for " + shape_str(shape_));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : idx) {
    if (i >= shape_[axis]) throw std::out_of_range("index out of range for " + shape_str(shape_));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace htr
