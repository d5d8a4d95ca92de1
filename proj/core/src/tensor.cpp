// SPDX-License-Identifier: Apache-2.0
#include "vqa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace vqa {

std::string to_string(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i)
      os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t element_count(const Shape &shape) {
  std::size_t n = 1;
  for (auto e : shape)
    n *= e;
  return n;
}

namespace {

void check_rank(const Shape &shape) {
  if (shape.empty() || shape.size() > 3)
    throw ShapeError("tensor rank must be 1..3, got shape " + to_string(shape));
  if (shape.size() > 1 && std::find(shape.begin(), shape.end(), 0u) != shape.end())
    throw ShapeError("zero extent only allowed for rank-1 tensors, got " +
                     to_string(shape));
}

} // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_rank(shape_);
  data_.assign(element_count(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_rank(shape_);
  if (element_count(shape_) != data_.size())
    throw ShapeError("shape " + to_string(shape_) + " holds " +
                     std::to_string(element_count(shape_)) + " values, got " +
                     std::to_string(data_.size()));
}

Tensor::Tensor(Shape shape, double fill) : Tensor(std::move(shape)) {
  std::fill(data_.begin(), data_.end(), fill);
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

std::size_t Tensor::rows() const {
  if (rank() != 2)
    throw ShapeError("rows() needs a matrix, got " + to_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2)
    throw ShapeError("cols() needs a matrix, got " + to_string(shape_));
  return shape_[1];
}

std::span<const double> Tensor::row(std::size_t r) const {
  const auto c = cols();
  return std::span<const double>(data_).subspan(r * c, c);
}

std::span<double> Tensor::row(std::size_t r) {
  const auto c = cols();
  return std::span<double>(data_).subspan(r * c, c);
}

double Tensor::item() const {
  if (data_.size() != 1)
    throw ShapeError("item() needs a single element, got " + to_string(shape_));
  return data_[0];
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::reshaped(Shape shape) const {
  if (element_count(shape) != data_.size())
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " +
                     to_string(shape));
  return Tensor(std::move(shape), data_);
}

void require_same_shape(const Tensor &a, const Tensor &b, const char *what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " +
                     to_string(a.shape()) + " vs " + to_string(b.shape()));
}

} // namespace vqa
