#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace bparse {

// Dense aliases. All training math runs in double; volumes are stored as
// float32 on disk and widened on load into the compute path.
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Arr = Eigen::ArrayXd;
using Vec3i = Eigen::Vector3i;
using Vec3d = Eigen::Vector3d;

template <class Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Error taxonomy. The CLI maps these to process exit codes:
//   ConfigError -> 2, DataError -> 3, DivergenceError -> 4, anything else -> 1.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};

// Shape/contract violations between in-memory objects.
struct DimensionError : DataError {
  explicit DimensionError(const std::string& m) : DataError(m) {}
};

// Value outside its mathematical domain (probabilities, labels, ...).
struct DomainError : DataError {
  explicit DomainError(const std::string& m) : DataError(m) {}
};

struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& m) : std::runtime_error(m) {}
};

// Volume file problems carry a code so callers can tell them apart.
enum class IoErrorCode { MalformedHeader, ByteCountMismatch, UnsupportedDtype, FileMissing };

struct IoError : DataError {
  IoErrorCode code;
  IoError(IoErrorCode c, const std::string& m) : DataError(m), code(c) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

}  // namespace bparse
