#ifndef MIXMATCH_MATRIX_HPP
#define MIXMATCH_MATRIX_HPP

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <vector>

namespace mixmatch {

// Dense row-major matrix. Biases and layer-norm parameters are stored as
// 1 x n matrices so every parameter tensor has a uniform type.
template <typename T>
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<T> a;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), T(0)) {}

    T* row(int i) { return a.data() + static_cast<std::size_t>(i) * cols; }
    const T* row(int i) const { return a.data() + static_cast<std::size_t>(i) * cols; }
    T& at(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
    T at(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }
    std::size_t size() const { return a.size(); }
    void zero() { std::fill(a.begin(), a.end(), T(0)); }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// C = A * B, with C sized m x n, A m x k, B k x n. ikj order keeps the inner
// loop contiguous in both B and C.
template <typename T>
void matmul(Matrix<T>& c, const Matrix<T>& a, const Matrix<T>& b, bool accumulate = false) {
    assert(a.cols == b.rows && c.rows == a.rows && c.cols == b.cols);
    if (!accumulate) c.zero();
    for (int i = 0; i < a.rows; ++i) {
        const T* arow = a.row(i);
        T* crow = c.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const T s = arow[k];
            if (s == T(0)) continue;
            const T* brow = b.row(k);
            for (int j = 0; j < b.cols; ++j) crow[j] += s * brow[j];
        }
    }
}

// C = A * B^T, with A m x n, B k x n, C m x k.
template <typename T>
void matmul_nt(Matrix<T>& c, const Matrix<T>& a, const Matrix<T>& b, bool accumulate = false) {
    assert(a.cols == b.cols && c.rows == a.rows && c.cols == b.rows);
    if (!accumulate) c.zero();
    for (int i = 0; i < a.rows; ++i) {
        const T* arow = a.row(i);
        T* crow = c.row(i);
        for (int k = 0; k < b.rows; ++k) {
            const T* brow = b.row(k);
            T acc = T(0);
            for (int j = 0; j < a.cols; ++j) acc += arow[j] * brow[j];
            crow[k] += acc;
        }
    }
}

// C = A^T * B, with A m x k, B m x n, C k x n. Used for weight gradients.
template <typename T>
void matmul_tn(Matrix<T>& c, const Matrix<T>& a, const Matrix<T>& b, bool accumulate = true) {
    assert(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols);
    if (!accumulate) c.zero();
    for (int m = 0; m < a.rows; ++m) {
        const T* arow = a.row(m);
        const T* brow = b.row(m);
        for (int k = 0; k < a.cols; ++k) {
            const T s = arow[k];
            if (s == T(0)) continue;
            T* crow = c.row(k);
            for (int j = 0; j < b.cols; ++j) crow[j] += s * brow[j];
        }
    }
}

template <typename T>
void add_rowwise(Matrix<T>& m, const Matrix<T>& bias) {
    assert(bias.rows == 1 && bias.cols == m.cols);
    for (int i = 0; i < m.rows; ++i) {
        T* r = m.row(i);
        for (int j = 0; j < m.cols; ++j) r[j] += bias.a[static_cast<std::size_t>(j)];
    }
}

template <typename T>
void accumulate(Matrix<T>& dst, const Matrix<T>& src) {
    assert(dst.same_shape(src));
    for (std::size_t i = 0; i < dst.a.size(); ++i) dst.a[i] += src.a[i];
}

}  // namespace mixmatch

#endif  // MIXMATCH_MATRIX_HPP
