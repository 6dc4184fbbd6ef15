#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace contrec {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SplitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require_finite(const Mat& m, const std::string& what) {
  if (!m.allFinite()) throw NumericError("non-finite values in " + what);
}

}  // namespace contrec
