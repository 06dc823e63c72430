// SPDX-License-Identifier: Apache-2.0

#include "deskpt/tensor/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

#include "deskpt/error.hpp"

namespace deskpt {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto extent : shape) {
    if (extent < 0) {
      throw ShapeError("negative extent in shape " + shape_str(shape));
    }
    n *= extent;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

namespace {
#ifdef NDEBUG
std::atomic<bool> g_finite_checks{false};
#else
std::atomic<bool> g_finite_checks{true};
#endif
}  // namespace

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(std::memory_order_relaxed); }

template <Real T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}
template bool all_finite<float>(std::span<const float>);
template bool all_finite<double>(std::span<const double>);

template <Real T>
Tensor<T>::Tensor(Shape shape) : impl_(std::make_shared<Impl>()) {
  impl_->data.assign(static_cast<std::size_t>(shape_numel(shape)), T(0));
  impl_->shape = std::move(shape);
}

template <Real T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("buffer of " + std::to_string(data.size()) + " values does not fit shape " +
                     shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

template <Real T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <Real T>
Tensor<T> Tensor<T>::filled(Shape shape, T value) {
  auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <Real T>
const Shape& Tensor<T>::shape() const {
  if (!impl_) throw ShapeError("use of undefined tensor");
  return impl_->shape;
}

template <Real T>
std::int64_t Tensor<T>::dim(int i) const {
  const auto& s = shape();
  int r = static_cast<int>(s.size());
  int k = i < 0 ? i + r : i;
  if (k < 0 || k >= r) {
    throw ShapeError("axis " + std::to_string(i) + " out of range for shape " + shape_str(s));
  }
  return s[static_cast<std::size_t>(k)];
}

template <Real T>
std::int64_t Tensor<T>::numel() const {
  return static_cast<std::int64_t>(impl_ ? impl_->data.size() : 0);
}

template <Real T>
std::span<const T> Tensor<T>::data() const {
  if (!impl_) throw ShapeError("use of undefined tensor");
  return impl_->data;
}

template <Real T>
std::span<T> Tensor<T>::mutable_data() const {
  if (!impl_) throw ShapeError("use of undefined tensor");
  return impl_->data;
}

template <Real T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

template <Real T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <Real T>
const Tensor<T>& Tensor<T>::set_requires_grad(bool flag) const {
  if (!impl_) throw ShapeError("use of undefined tensor");
  impl_->requires_grad = flag;
  return *this;
}

template <Real T>
bool Tensor<T>::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

template <Real T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw GraphError("tensor has no gradient");
  return impl_->grad;
}

template <Real T>
std::span<T> Tensor<T>::mutable_grad() const {
  if (!impl_) throw ShapeError("use of undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <Real T>
void Tensor<T>::zero_grad() const {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <Real T>
void Tensor<T>::clear_grad() const {
  if (impl_) {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }
}

template <Real T>
Tensor<T> Tensor<T>::grad_tensor() const {
  if (!has_grad()) return Tensor(shape());
  return Tensor(shape(), impl_->grad);
}

template <Real T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(shape(), impl_->data);
  out.impl_->requires_grad = impl_->requires_grad;
  return out;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace deskpt
