#pragma once

#include <Eigen/Dense>

namespace mvflow {

/// Largest ambient dimension supported by the built-in manifolds.
inline constexpr int kMaxAmbient = 8;

/// Ambient vector with inline storage (no heap traffic in inner loops).
using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, kMaxAmbient, 1>;
/// Ambient linear map / block of tangent columns.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, kMaxAmbient,
                          kMaxAmbient>;

/// A point of the manifold, in ambient coordinates.
using Point = Vec;
/// A tangent vector, in ambient coordinates, at a point supplied alongside it.
using Tangent = Vec;

}  // namespace mvflow
