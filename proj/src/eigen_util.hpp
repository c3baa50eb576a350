#pragma once

#include <span>

#include <Eigen/Core>

namespace ptse::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_matrix(std::span<const double> d, std::size_t r, std::size_t c) {
    return ConstMap(d.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline MutMap as_matrix(std::span<double> d, std::size_t r, std::size_t c) {
    return MutMap(d.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

}  // namespace ptse::detail
