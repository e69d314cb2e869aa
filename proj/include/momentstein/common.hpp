#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace momentstein {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr const char* kVersion = "0.1.0";

// Log-depth below the density maximum at which all-space supports are
// truncated for quadrature (tail mass < 1e-10 in one dimension).
inline constexpr double kTruncationNats = 46.0;

inline constexpr double kPi = 3.14159265358979323846;

/// Error type carried by every operation in the library. The message
/// starts with a stable short code (e.g. "hyperplane support") that
/// callers and tests match on.
class error : public std::runtime_error {
 public:
  explicit error(const std::string& what) : std::runtime_error(what) {}
};

inline double sqr(double x) { return x * x; }

}  // namespace momentstein
