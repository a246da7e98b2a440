#pragma once

// Small dense kernels with a fixed reduction order, so results are bitwise
// reproducible.

#include <cassert>

#include "protoscope/tensor.hpp"

namespace protoscope::detail {

/// A * B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    assert(a.cols() == b.rows());
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    }
    return out;
}

/// A^T * B
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    assert(a.rows() == b.rows());
    Matrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aki * b(k, j);
        }
    }
    return out;
}

/// A * B^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    assert(a.cols() == b.cols());
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(j, k);
            out(i, j) = acc;
        }
    }
    return out;
}

inline void add_inplace(Matrix& a, const Matrix& b) {
    assert(a.rows() == b.rows() && a.cols() == b.cols());
    auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += bd[i];
}

}  // namespace protoscope::detail
