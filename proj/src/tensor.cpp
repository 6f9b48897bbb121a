#include "evc/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace evc {

std::string Shape::str() const {
  return "[" + std::to_string(dims[0]) + "," + std::to_string(dims[1]) + "," +
         std::to_string(dims[2]) + "," + std::to_string(dims[3]) + "]";
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) {
    throw DimensionError(std::string(what) + ": shape " + a.str() + " vs " + b.str());
  }
}

template <typename T>
double max_relative_error(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_relative_error");
  double diff = 0.0;
  double mag = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    mag = std::max(mag, std::abs(static_cast<double>(b[i])));
  }
  return diff / std::max(mag, 1e-30);
}

template double max_relative_error(const TensorT<float>&, const TensorT<float>&);
template double max_relative_error(const TensorT<double>&, const TensorT<double>&);
template double max_relative_error(const TensorT<long double>&, const TensorT<long double>&);

}  // namespace evc
