#pragma once

#include <Eigen/Core>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gad {

using Index = Eigen::Index;
using Arr = Eigen::ArrayXd;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;
using IndexMat = Eigen::Matrix<int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Thrown for shape/dimension disagreements between tensors.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Thrown for invalid configuration values (rates, counts, unknown keys).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Thrown for malformed or out-of-range data (files, labels).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown for I/O failures and corrupted binary streams.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void str_impl(std::ostringstream&) {}
template <typename T, typename... Rest>
void str_impl(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  str_impl(os, rest...);
}
}  // namespace detail

template <typename... Args>
std::string str(const Args&... args) {
  std::ostringstream os;
  detail::str_impl(os, args...);
  return os.str();
}

using Shape = std::vector<Index>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline Index shape_size(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

}  // namespace gad
