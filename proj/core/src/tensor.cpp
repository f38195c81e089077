#include "deepssm/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace deepssm::nn {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, bool requires_grad) {
  s_ = std::make_shared<Storage>();
  s_->data.assign(shape_size(shape), 0.0);
  s_->shape = std::move(shape);
  s_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                " values do not fill shape " + shape_str(shape));
  }
  s_ = std::make_shared<Storage>();
  s_->shape = std::move(shape);
  s_->data = std::move(values);
  s_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(std::move(shape), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  for (double& x : t.values()) x = value;
  return t;
}

Tensor Tensor::scalar(double value) {
  return Tensor(Shape{1}, std::vector<double>{value});
}

Tensor::Storage& Tensor::st() {
  if (!s_) throw std::logic_error("tensor: use of undefined tensor");
  return *s_;
}

const Tensor::Storage& Tensor::st() const {
  if (!s_) throw std::logic_error("tensor: use of undefined tensor");
  return *s_;
}

const Shape& Tensor::shape() const { return st().shape; }

std::size_t Tensor::dim(std::size_t i) const {
  const Shape& s = shape();
  if (i >= s.size()) throw std::out_of_range("tensor: dim index out of range");
  return s[i];
}

std::size_t Tensor::size() const { return st().data.size(); }

double* Tensor::data() { return st().data.data(); }
const double* Tensor::data() const { return st().data.data(); }

std::span<double> Tensor::values() { return {st().data.data(), st().data.size()}; }
std::span<const double> Tensor::values() const {
  return {st().data.data(), st().data.size()};
}

double& Tensor::operator[](std::size_t flat_index) { return st().data[flat_index]; }
double Tensor::operator[](std::size_t flat_index) const { return st().data[flat_index]; }

double Tensor::item() const {
  if (size() != 1) {
    throw std::logic_error("tensor: item() on tensor of shape " + shape_str(shape()));
  }
  return st().data[0];
}

bool Tensor::requires_grad() const { return st().requires_grad; }
void Tensor::set_requires_grad(bool value) { st().requires_grad = value; }

bool Tensor::has_grad() const { return !st().grad.empty(); }

std::span<double> Tensor::grad() {
  Storage& s = st();
  if (s.grad.empty()) s.grad.assign(s.data.size(), 0.0);
  return {s.grad.data(), s.grad.size()};
}

std::span<const double> Tensor::grad() const {
  const Storage& s = st();
  if (s.grad.empty()) {
    throw std::logic_error("tensor: reading gradient that was never written");
  }
  return {s.grad.data(), s.grad.size()};
}

void Tensor::zero_grad() { st().grad.clear(); }

void Tensor::accumulate_grad(std::span<const double> delta) {
  auto g = grad();
  if (delta.size() != g.size()) {
    throw std::logic_error("tensor: gradient size mismatch");
  }
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

Tensor Tensor::clone() const {
  const Storage& s = st();
  Tensor out(s.shape, s.data, s.requires_grad);
  return out;
}

void Tensor::copy_values_from(const Tensor& other) {
  Storage& s = st();
  if (other.size() != s.data.size()) {
    throw std::logic_error("tensor: copy_values_from size mismatch " +
                           shape_str(other.shape()) + " -> " + shape_str(s.shape));
  }
  s.data.assign(other.data(), other.data() + other.size());
}

void Tensor::check_finite(const char* what) const {
  for (double x : st().data) {
    if (!std::isfinite(x)) {
      throw std::runtime_error(std::string(what) + ": non-finite value encountered");
    }
  }
}

}  // namespace deepssm::nn
