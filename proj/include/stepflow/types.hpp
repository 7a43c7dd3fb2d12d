#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

namespace stepflow {

using Token = std::int32_t;
using Sequence = std::vector<Token>;

// Row-major dense matrix; rows index sequence positions, columns index tokens.
template <typename Scalar>
using RowMatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrix = RowMatrixX<double>;

// Finite stand-in for log(0). Softmax maps it to exactly zero mass and, unlike
// -inf, it survives affine combinations and products with zero weights.
inline constexpr double kImpossibleLogit = -1e30;

}  // namespace stepflow
