#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace intrafair {

/// Row-major so that a row is one example and `row(i).data()` is contiguous.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Binary values stored as int (0 or 1): labels, predictions, protected groups.
using BinaryVector = std::vector<int>;

using Seed = std::uint64_t;

}  // namespace intrafair
