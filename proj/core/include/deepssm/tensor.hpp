#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace deepssm::nn {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of doubles with an optional gradient buffer.
/// Tensor is a handle: copies alias the same storage, so a parameter held by
/// a layer and by an optimizer see the same values and gradient. clone()
/// makes an independent deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t size() const;

  double* data();
  const double* data() const;
  std::span<double> values();
  std::span<const double> values() const;
  double& operator[](std::size_t flat_index);
  double operator[](std::size_t flat_index) const;
  double item() const;  // requires size() == 1

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<double> grad();  // allocates zeros on first use
  std::span<const double> grad() const;
  void zero_grad();  // drops the gradient buffer
  void accumulate_grad(std::span<const double> delta);

  Tensor clone() const;  // deep copy of values and flags (gradient dropped)
  void copy_values_from(const Tensor& other);
  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const void* storage_id() const { return s_.get(); }

  /// Throws std::runtime_error naming `what` if any value is NaN/Inf.
  void check_finite(const char* what) const;

 private:
  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until requested
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
  Storage& st();
  const Storage& st() const;
};

}  // namespace deepssm::nn
