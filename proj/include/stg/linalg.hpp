#pragma once

#include <Eigen/Core>
#include <cmath>

#include "stg/common.hpp"

namespace stg {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXd = MatrixX<double>;
using VectorXd = VectorX<double>;

// Numerically stable log-softmax of a vector expression.
template <typename Derived>
VectorX<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& logits) {
    using Scalar = typename Derived::Scalar;
    VectorX<Scalar> v = logits;
    if (!v.allFinite()) throw NumericError("log_softmax: non-finite logits");
    Scalar m = v.maxCoeff();
    VectorX<Scalar> shifted = v.array() - m;
    Scalar lse = std::log(shifted.array().exp().sum());
    return shifted.array() - lse;
}

template <typename Derived>
VectorX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
    VectorX<typename Derived::Scalar> ls = log_softmax(logits);
    return ls.array().exp();
}

// Column-wise log-softmax for batched logits (one sample per column).
template <typename Derived>
MatrixX<typename Derived::Scalar> log_softmax_cols(const Eigen::MatrixBase<Derived>& logits) {
    using Scalar = typename Derived::Scalar;
    MatrixX<Scalar> v = logits;
    if (!v.allFinite()) throw NumericError("log_softmax_cols: non-finite logits");
    Eigen::Array<Scalar, 1, Eigen::Dynamic> m = v.array().colwise().maxCoeff();
    MatrixX<Scalar> shifted = v.array().rowwise() - m;
    Eigen::Array<Scalar, 1, Eigen::Dynamic> lse = shifted.array().exp().colwise().sum().log();
    return shifted.array().rowwise() - lse;
}

template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_cols(const Eigen::MatrixBase<Derived>& logits) {
    MatrixX<typename Derived::Scalar> ls = log_softmax_cols(logits);
    return ls.array().exp();
}

}  // namespace stg
