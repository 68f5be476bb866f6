#pragma once

#include <Eigen/Dense>

namespace flowtalk {

// Sequence data is row-major time×feature unless a format says otherwise.
template <typename S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = MatT<float>;
using MatD = MatT<double>;
using VecF = Eigen::VectorXf;
using VecD = Eigen::VectorXd;

}  // namespace flowtalk
