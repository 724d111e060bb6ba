#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <vector>

#include "itsp/rng.hpp"

namespace itsp {

// Dense row-major matrix. Row vectors are 1 x n matrices.
template <class T>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<T> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, T(0)) {}

    T* operator[](int i) { return a.data() + static_cast<std::size_t>(i) * cols; }
    const T* operator[](int i) const { return a.data() + static_cast<std::size_t>(i) * cols; }

    T& at(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
    T at(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }

    std::size_t size() const { return a.size(); }
    bool empty() const { return a.empty(); }

    void fill(T v) { std::fill(a.begin(), a.end(), v); }

    static Mat randn(int r, int c, T std, Rng& rng) {
        Mat m(r, c);
        for (auto& x : m.a) x = static_cast<T>(rng.normal() * static_cast<double>(std));
        return m;
    }

    static Mat identity(int r, int c) {
        Mat m(r, c);
        const int k = r < c ? r : c;
        for (int i = 0; i < k; ++i) m.at(i, i) = T(1);
        return m;
    }

    static Mat constant(int r, int c, T v) {
        Mat m(r, c);
        m.fill(v);
        return m;
    }
};

// C += A * B
template <class T>
void matmul_acc(const Mat<T>& A, const Mat<T>& B, Mat<T>& C) {
    assert(A.cols == B.rows && C.rows == A.rows && C.cols == B.cols);
    const int r = A.rows, k = A.cols, n = B.cols;
    for (int i = 0; i < r; ++i) {
        T* ci = C[i];
        const T* ai = A[i];
        for (int p = 0; p < k; ++p) {
            const T a = ai[p];
            const T* bp = B[p];
            for (int j = 0; j < n; ++j) ci[j] += a * bp[j];
        }
    }
}

// C += A * B^T
template <class T>
void matmul_nt_acc(const Mat<T>& A, const Mat<T>& B, Mat<T>& C) {
    assert(A.cols == B.cols && C.rows == A.rows && C.cols == B.rows);
    const int r = A.rows, k = A.cols, n = B.rows;
    for (int i = 0; i < r; ++i) {
        const T* ai = A[i];
        T* ci = C[i];
        for (int j = 0; j < n; ++j) {
            const T* bj = B[j];
            T s = T(0);
            for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

// C += A^T * B
template <class T>
void matmul_tn_acc(const Mat<T>& A, const Mat<T>& B, Mat<T>& C) {
    assert(A.rows == B.rows && C.rows == A.cols && C.cols == B.cols);
    const int r = A.cols, k = A.rows, n = B.cols;
    for (int p = 0; p < k; ++p) {
        const T* ap = A[p];
        const T* bp = B[p];
        for (int i = 0; i < r; ++i) {
            const T a = ap[i];
            T* ci = C[i];
            for (int j = 0; j < n; ++j) ci[j] += a * bp[j];
        }
    }
}

template <class T>
Mat<T> matmul(const Mat<T>& A, const Mat<T>& B) {
    Mat<T> C(A.rows, B.cols);
    matmul_acc(A, B, C);
    return C;
}

} // namespace itsp
