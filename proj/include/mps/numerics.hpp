#pragma once

// Dense real linear algebra shared by every other module: Kronecker products,
// singular value spectra, smallest-singular-value / Gram-eigenvalue queries and
// the central-difference Jacobian used as the derivative oracle.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mps {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace numerics {

inline bool all_finite(const Matrix& a) { return a.allFinite(); }

/// Row-major vectorisation: rows are stacked first, matching the index
/// convention used throughout the Jacobian formulas.
inline Vector vec_rows(const Matrix& m) {
    Vector v(m.size());
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) v(k++) = m(i, j);
    return v;
}

inline Matrix unvec_rows(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
    if (v.size() != rows * cols)
        throw std::invalid_argument("unvec_rows: size mismatch");
    Matrix m(rows, cols);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = v(k++);
    return m;
}

/// Kronecker product with row-major block layout: entry ((i1,i2),(j1,j2)) is
/// A(i1,j1)*B(i2,j2).
inline Matrix kron(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j)
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
}

inline Matrix identity(Eigen::Index n) { return Matrix::Identity(n, n); }

struct HistogramBin {
    double lower = 0.0;
    double upper = 0.0;
    std::size_t count = 0;
};

struct SpectrumReport {
    std::vector<double> singular_values;  // descending
    double mean = 0.0;
    double min = 0.0;
    std::vector<HistogramBin> histogram;
    std::size_t bin_count = 0;
};

inline std::vector<double> singular_values(const Matrix& a) {
    if (!all_finite(a)) throw NumericalError("singular_values: non-finite input");
    Eigen::BDCSVD<Matrix> svd(a);
    if (svd.info() != Eigen::Success)
        throw NumericalError("singular_values: SVD did not converge");
    const auto& sv = svd.singularValues();
    return std::vector<double>(sv.data(), sv.data() + sv.size());
}

/// Uniform-bin histogram over [0, max], with the top edge inclusive.
inline std::vector<HistogramBin> histogram_bins(const std::vector<double>& values,
                                                std::size_t bin_count, double hi) {
    if (bin_count == 0) throw std::invalid_argument("histogram_bins: bin_count == 0");
    if (hi <= 0.0) hi = 1.0;  // degenerate all-zero spectrum
    std::vector<HistogramBin> bins(bin_count);
    const double w = hi / static_cast<double>(bin_count);
    for (std::size_t b = 0; b < bin_count; ++b) {
        bins[b].lower = w * static_cast<double>(b);
        bins[b].upper = w * static_cast<double>(b + 1);
    }
    for (double v : values) {
        auto b = static_cast<std::size_t>(v / w);
        if (b >= bin_count) b = bin_count - 1;
        ++bins[b].count;
    }
    return bins;
}

inline SpectrumReport svd_spectrum(const Matrix& a, std::size_t bin_count) {
    SpectrumReport r;
    r.singular_values = singular_values(a);
    r.bin_count = bin_count;
    const auto n = static_cast<double>(r.singular_values.size());
    r.mean = std::accumulate(r.singular_values.begin(), r.singular_values.end(), 0.0) / n;
    r.min = r.singular_values.back();
    r.histogram = histogram_bins(r.singular_values, bin_count, r.singular_values.front());
    return r;
}

inline double largest_sv(const Matrix& a) { return singular_values(a).front(); }
inline double smallest_sv(const Matrix& a) { return singular_values(a).back(); }

/// Smallest eigenvalue of A A^T (the regularity constant lambda), clamped at
/// zero since the Gram matrix is positive semidefinite by construction.
inline double lambda_min_gram(const Matrix& a) {
    if (!all_finite(a)) throw NumericalError("lambda_min_gram: non-finite input");
    Matrix gram = a * a.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
    if (eig.info() != Eigen::Success)
        throw NumericalError("lambda_min_gram: eigensolver did not converge");
    return std::max(0.0, eig.eigenvalues().minCoeff());
}

using VectorMap = std::function<Vector(const Vector&)>;

constexpr double kDefaultFdStep = 1e-5;

/// Central-difference Jacobian, columnwise: column j is
/// (f(x + h e_j) - f(x - h e_j)) / (2h).
inline Matrix finite_diff_jacobian(const VectorMap& f, const Vector& x,
                                   double h = kDefaultFdStep) {
    if (h <= 0.0) throw std::invalid_argument("finite_diff_jacobian: h <= 0");
    Vector probe = x;
    const Vector f0 = f(probe);
    Matrix jac(f0.size(), x.size());
    for (Eigen::Index j = 0; j < x.size(); ++j) {
        probe(j) = x(j) + h;
        const Vector fp = f(probe);
        probe(j) = x(j) - h;
        const Vector fm = f(probe);
        probe(j) = x(j);
        if (!fp.allFinite() || !fm.allFinite())
            throw NumericalError("finite_diff_jacobian: non-finite evaluation at column " +
                                 std::to_string(j));
        jac.col(j) = (fp - fm) / (2.0 * h);
    }
    return jac;
}

}  // namespace numerics
}  // namespace mps
