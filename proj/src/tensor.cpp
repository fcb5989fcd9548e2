#include "ranp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "ranp/errors.hpp"

namespace ranp {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {
  if (std::find(shape_.begin(), shape_.end(), std::size_t{0}) != shape_.end())
    throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != data_.size())
    throw ShapeError("shape " + to_string(shape_) + " holds " + std::to_string(numel(shape_)) +
                     " elements, data has " + std::to_string(data_.size()));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size())
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  return Tensor(std::move(shape), data_);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace ranp
