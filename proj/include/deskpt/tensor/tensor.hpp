// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <concepts>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace deskpt {

template <typename T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor handle. Copies share storage; use clone() for a deep
// copy. Data is fixed after creation except for leaves updated by optimizers.
template <Real T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T value);
  static Tensor filled(Shape shape, T value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  // Negative indices count from the back.
  std::int64_t dim(int i) const;
  std::int64_t numel() const;

  std::span<const T> data() const;
  std::span<T> mutable_data() const;
  T item() const;

  bool requires_grad() const;
  const Tensor& set_requires_grad(bool flag) const;

  bool has_grad() const;
  std::span<const T> grad() const;
  // Allocates a zero gradient buffer on first use.
  std::span<T> mutable_grad() const;
  void zero_grad() const;
  void clear_grad() const;
  Tensor grad_tensor() const;

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

template <Real To, Real From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> out(x.data().begin(), x.data().end());
  return Tensor<To>(x.shape(), std::move(out));
}

// Validation of op outputs for NaN/Inf. Off unless enabled (debug builds
// enable it by default).
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

template <Real T>
bool all_finite(std::span<const T> values);

}  // namespace deskpt
