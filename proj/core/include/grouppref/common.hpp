#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace grouppref {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Rng = std::mt19937_64;

// Error taxonomy shared by every module. The CLI maps ConfigError to exit
// status 3 and MissingArtifactError to exit status 2.

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingArtifactError : public std::runtime_error {
 public:
  explicit MissingArtifactError(std::string artifact)
      : std::runtime_error("missing prerequisite artifact: " + artifact),
        artifact_(std::move(artifact)) {}
  const std::string& artifact() const noexcept { return artifact_; }

 private:
  std::string artifact_;
};

/// Derives an independent sub-seed from a parent seed and a label, so that
/// stages and repetitions draw from unrelated streams.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0);

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

/// In-place numerically stable softmax of a row or column.
template <class Derived>
void softmax_inplace(Eigen::MatrixBase<Derived>& v) {
  const double mx = v.maxCoeff();
  v = (v.array() - mx).exp().matrix();
  v /= v.sum();
}

/// log-softmax of a vector.
Vec log_softmax(const Vec& logits);

/// 64-bit FNV-1a of a byte string; stable across platforms.
std::uint64_t fnv1a64(std::string_view bytes);

std::string hex64(std::uint64_t v);

Mat random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

}  // namespace grouppref
