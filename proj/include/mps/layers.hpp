#pragma once

// Layer zoo: affine and normalised affine layers, elementwise nonlinearities,
// batch normalisation and residual blocks, each with its closed-form forward
// map, parameter derivative D and input-output Jacobian J. Matrices of
// activations hold one data column per example; all Jacobians act on the
// row-major vectorisation.

#include "mps/numerics.hpp"

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mps::layers {

using numerics::kron;
using numerics::vec_rows;

enum class LayerKind { Affine, NormAffine, Nonlinearity, BatchNorm, Residual };
enum class NormKind { Entry, Weight };
enum class PhiKind { Tanh, Identity };
enum class SkipKind { None, Identity, PartialIsometry, AvgPool };

// Contractivity margin used for default branch rescaling.
constexpr double kDefaultDelta = 0.1;
constexpr double kDefaultEpsilon = 0.1;

struct LayerSpec {
    LayerKind kind = LayerKind::Affine;
    Eigen::Index d_in = 0;
    Eigen::Index d_out = 0;

    // NormAffine
    NormKind norm_kind = NormKind::Entry;
    double epsilon = kDefaultEpsilon;
    double scale = 1.0;
    bool bias = false;

    // Nonlinearity
    PhiKind phi_kind = PhiKind::Tanh;

    // BatchNorm reuses epsilon.

    // Residual: the branch is itself a chain of layers. The fixed skip must
    // have all singular values equal to 1; the optional dense skip is a plain
    // trainable linear map (the experiments' analogue of a 1x1 convolution).
    std::vector<LayerSpec> branch;
    SkipKind skip_kind = SkipKind::Identity;
    bool dense_skip = false;
};

// Spec factories ------------------------------------------------------------

inline LayerSpec affine(Eigen::Index d_in, Eigen::Index d_out, bool bias = true) {
    LayerSpec s;
    s.kind = LayerKind::Affine;
    s.d_in = d_in;
    s.d_out = d_out;
    s.bias = bias;
    return s;
}

/// Spectral-norm certificate for a normalised parameterisation: entry
/// normalisation bounds entries below 1 (Frobenius bound sqrt(d_out*d_in)),
/// weight normalisation bounds row norms below 1 (Frobenius bound sqrt(d_out)).
inline double norm_affine_spectral_cap(NormKind kind, Eigen::Index d_in,
                                       Eigen::Index d_out) {
    return kind == NormKind::Entry
               ? std::sqrt(static_cast<double>(d_out * d_in))
               : std::sqrt(static_cast<double>(d_out));
}

inline LayerSpec norm_affine(Eigen::Index d_in, Eigen::Index d_out, NormKind kind,
                             double epsilon = kDefaultEpsilon, double scale = 1.0,
                             bool bias = false) {
    LayerSpec s;
    s.kind = LayerKind::NormAffine;
    s.d_in = d_in;
    s.d_out = d_out;
    s.norm_kind = kind;
    s.epsilon = epsilon;
    s.scale = scale;
    s.bias = bias;
    return s;
}

/// Branch-grade normalised affine layer: scale chosen so that the certified
/// spectral norm of P(w) is at most 1 - delta for every parameter value.
inline LayerSpec contractive_norm_affine(Eigen::Index d_in, Eigen::Index d_out,
                                         NormKind kind,
                                         double epsilon = kDefaultEpsilon,
                                         double delta = kDefaultDelta,
                                         bool bias = false) {
    return norm_affine(d_in, d_out, kind, epsilon,
                       (1.0 - delta) / norm_affine_spectral_cap(kind, d_in, d_out),
                       bias);
}

inline LayerSpec nonlinearity(Eigen::Index d, PhiKind phi = PhiKind::Tanh) {
    LayerSpec s;
    s.kind = LayerKind::Nonlinearity;
    s.d_in = d;
    s.d_out = d;
    s.phi_kind = phi;
    return s;
}

inline LayerSpec batchnorm(Eigen::Index d, double epsilon = kDefaultEpsilon) {
    LayerSpec s;
    s.kind = LayerKind::BatchNorm;
    s.d_in = d;
    s.d_out = d;
    s.epsilon = epsilon;
    return s;
}

inline LayerSpec residual(std::vector<LayerSpec> branch,
                          SkipKind skip = SkipKind::Identity,
                          bool dense_skip = false) {
    LayerSpec s;
    s.kind = LayerKind::Residual;
    if (branch.empty()) throw std::invalid_argument("residual: empty branch");
    s.d_in = branch.front().d_in;
    s.d_out = branch.back().d_out;
    for (std::size_t i = 1; i < branch.size(); ++i)
        if (branch[i].d_in != branch[i - 1].d_out)
            throw std::invalid_argument("residual: branch dims do not chain");
    if (skip == SkipKind::Identity && s.d_in != s.d_out)
        throw std::invalid_argument("residual: identity skip needs d_in == d_out");
    if ((skip == SkipKind::PartialIsometry || skip == SkipKind::AvgPool) &&
        s.d_in < s.d_out)
        throw std::invalid_argument("residual: isometry skip needs d_in >= d_out");
    s.branch = std::move(branch);
    s.skip_kind = skip;
    s.dense_skip = dense_skip;
    return s;
}

inline Eigen::Index param_count(const LayerSpec& s) {
    switch (s.kind) {
        case LayerKind::Affine:
        case LayerKind::NormAffine:
            return s.d_out * s.d_in + (s.bias ? s.d_out : 0);
        case LayerKind::Nonlinearity:
        case LayerKind::BatchNorm:
            return 0;
        case LayerKind::Residual: {
            Eigen::Index p = s.dense_skip ? s.d_out * s.d_in : 0;
            for (const auto& b : s.branch) p += param_count(b);
            return p;
        }
    }
    return 0;
}

// Parameter normalisations --------------------------------------------------

/// Entry normalisation: x -> x / sqrt(eps + x^2), applied entrywise.
inline Matrix param_en(const Matrix& w, double epsilon) {
    if (epsilon <= 0.0) throw std::invalid_argument("param_en: epsilon <= 0");
    return w.unaryExpr([epsilon](double x) { return x / std::sqrt(epsilon + x * x); });
}

/// Weight normalisation: row i scaled by 1 / sqrt(eps + ||w^i||^2).
inline Matrix param_wn(const Matrix& w, double epsilon) {
    if (epsilon <= 0.0) throw std::invalid_argument("param_wn: epsilon <= 0");
    Matrix out = w;
    for (Eigen::Index i = 0; i < w.rows(); ++i)
        out.row(i) /= std::sqrt(epsilon + w.row(i).squaredNorm());
    return out;
}

/// D en(w): diagonal with entries eps * (eps + w_ij^2)^{-3/2}, row-major order.
inline Matrix param_D_en(const Matrix& w, double epsilon) {
    const Eigen::Index n = w.size();
    Matrix d = Matrix::Zero(n, n);
    const Vector wv = vec_rows(w);
    for (Eigen::Index k = 0; k < n; ++k)
        d(k, k) = epsilon * std::pow(epsilon + wv(k) * wv(k), -1.5);
    return d;
}

/// D wn(w): block diagonal, one d_in x d_in block per row,
/// u (Id - u^2 w^i (w^i)^T) with u = (eps + ||w^i||^2)^{-1/2}.
inline Matrix param_D_wn(const Matrix& w, double epsilon) {
    const Eigen::Index d0 = w.cols();
    Matrix d = Matrix::Zero(w.size(), w.size());
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        const Vector wi = w.row(i).transpose();
        const double u2 = 1.0 / (epsilon + wi.squaredNorm());
        const double u = std::sqrt(u2);
        d.block(i * d0, i * d0, d0, d0) =
            u * (Matrix::Identity(d0, d0) - u2 * wi * wi.transpose());
    }
    return d;
}

inline Matrix param_D(NormKind kind, const Matrix& w, double epsilon) {
    if (epsilon <= 0.0) throw std::invalid_argument("param_D: epsilon <= 0");
    return kind == NormKind::Entry ? param_D_en(w, epsilon) : param_D_wn(w, epsilon);
}

/// Rank-3 array stored as one matrix slice per differentiation direction
/// (row-major over the parameter matrix).
struct Tensor3 {
    std::vector<Matrix> slices;

    Matrix apply(const Vector& direction) const {
        if (static_cast<std::size_t>(direction.size()) != slices.size())
            throw std::invalid_argument("Tensor3::apply: direction size mismatch");
        Matrix out = Matrix::Zero(slices.front().rows(), slices.front().cols());
        for (std::size_t k = 0; k < slices.size(); ++k) out += direction(k) * slices[k];
        return out;
    }
};

/// Second derivative of the normalised parameterisation. Slice k is the
/// derivative of DP(w) in the k-th coordinate direction. For entry
/// normalisation each diagonal entry differentiates to -3 eps w (eps+w^2)^{-5/2}
/// (finite differences of D en confirm the -5/2 exponent).
inline Tensor3 param_D2(NormKind kind, const Matrix& w, double epsilon) {
    if (epsilon <= 0.0) throw std::invalid_argument("param_D2: epsilon <= 0");
    const Eigen::Index n = w.size();
    Tensor3 t;
    t.slices.assign(n, Matrix::Zero(n, n));
    if (kind == NormKind::Entry) {
        const Vector wv = vec_rows(w);
        for (Eigen::Index k = 0; k < n; ++k)
            t.slices[k](k, k) =
                -3.0 * epsilon * wv(k) * std::pow(epsilon + wv(k) * wv(k), -2.5);
        return t;
    }
    const Eigen::Index d0 = w.cols();
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        const Vector wi = w.row(i).transpose();
        const double u2 = 1.0 / (epsilon + wi.squaredNorm());
        const double u3 = u2 * std::sqrt(u2);
        const double u5 = u3 * u2;
        const Matrix wwT = wi * wi.transpose();
        for (Eigen::Index l = 0; l < d0; ++l) {
            Vector el = Vector::Zero(d0);
            el(l) = 1.0;
            Matrix db = -wi(l) * u3 * Matrix::Identity(d0, d0) +
                        3.0 * wi(l) * u5 * wwT -
                        u3 * (el * wi.transpose() + wi * el.transpose());
            t.slices[i * d0 + l].block(i * d0, i * d0, d0, d0) = db;
        }
    }
    return t;
}

// Affine --------------------------------------------------------------------

inline Matrix affine_forward(const Matrix& a, const Vector& b, const Matrix& x) {
    if (a.cols() != x.rows() || b.size() != a.rows())
        throw std::invalid_argument("affine_forward: shape mismatch");
    return a * x + b * Eigen::RowVectorXd::Ones(x.cols());
}

/// J aff = A (x) Id_N.
inline Matrix affine_J(const Matrix& a, Eigen::Index n) {
    return kron(a, Matrix::Identity(n, n));
}

/// D aff = (Id_{d1} (x) X^T, Id_{d1} (x) 1_N), the bias block present iff bias.
inline Matrix affine_D(Eigen::Index d1, const Matrix& x, bool bias) {
    const Matrix id = Matrix::Identity(d1, d1);
    const Matrix wblock = kron(id, x.transpose());
    if (!bias) return wblock;
    Matrix d(wblock.rows(), wblock.cols() + d1 * 1);
    d << wblock, kron(id, Matrix::Ones(x.cols(), 1));
    return d;
}

// NormAffine ----------------------------------------------------------------

inline Matrix norm_affine_P(const LayerSpec& s, const Matrix& w) {
    return s.scale * (s.norm_kind == NormKind::Entry ? param_en(w, s.epsilon)
                                                     : param_wn(w, s.epsilon));
}

inline Matrix norm_affine_forward(const LayerSpec& s, const Matrix& w,
                                  const Vector& b, const Matrix& x) {
    if (w.rows() != s.d_out || w.cols() != s.d_in || x.rows() != s.d_in)
        throw std::invalid_argument("norm_affine_forward: shape mismatch");
    Matrix out = norm_affine_P(s, w) * x;
    if (s.bias) {
        // Biases are entry-normalised with the layer's epsilon.
        const Vector nb = param_en(b, s.epsilon);
        out += nb * Eigen::RowVectorXd::Ones(x.cols());
    }
    return out;
}

inline Matrix norm_affine_J(const LayerSpec& s, const Matrix& w, Eigen::Index n) {
    return kron(norm_affine_P(s, w), Matrix::Identity(n, n));
}

/// D aff_P = (Id (x) X^T) DP(w), with the entry-normalised bias block appended.
inline Matrix norm_affine_D(const LayerSpec& s, const Matrix& w, const Vector& b,
                            const Matrix& x) {
    const Matrix wblock = kron(Matrix::Identity(s.d_out, s.d_out), x.transpose()) *
                          (s.scale * param_D(s.norm_kind, w, s.epsilon));
    if (!s.bias) return wblock;
    const Matrix bb = kron(Matrix::Identity(s.d_out, s.d_out),
                           Matrix::Ones(x.cols(), 1)) *
                      param_D_en(Matrix(b), s.epsilon);
    Matrix d(wblock.rows(), wblock.cols() + bb.cols());
    d << wblock, bb;
    return d;
}

// Nonlinearity --------------------------------------------------------------

inline double phi_eval(PhiKind k, double x) {
    return k == PhiKind::Tanh ? std::tanh(x) : x;
}

inline double phi_prime(PhiKind k, double x) {
    if (k == PhiKind::Identity) return 1.0;
    const double t = std::tanh(x);
    return 1.0 - t * t;
}

inline Matrix nonlin_forward(PhiKind k, const Matrix& x) {
    return x.unaryExpr([k](double v) { return phi_eval(k, v); });
}

inline Matrix nonlin_J(PhiKind k, const Matrix& x) {
    const Vector xv = vec_rows(x);
    Matrix j = Matrix::Zero(x.size(), x.size());
    for (Eigen::Index i = 0; i < xv.size(); ++i) j(i, i) = phi_prime(k, xv(i));
    return j;
}

// BatchNorm -----------------------------------------------------------------

/// m(X) = X - (1/N) X 1_{NxN}  (row-wise mean removal).
inline Matrix bn_mean_center(const Matrix& x) {
    const auto n = static_cast<double>(x.cols());
    return x - (x.rowwise().sum() / n) * Eigen::RowVectorXd::Ones(x.cols());
}

/// v(Y): row i scaled by sqrt(N) / sqrt(N eps + ||y^i||^2).
inline Matrix bn_v(const Matrix& y, double epsilon) {
    const auto n = static_cast<double>(y.cols());
    Matrix out = y;
    for (Eigen::Index i = 0; i < y.rows(); ++i)
        out.row(i) *= std::sqrt(n) / std::sqrt(n * epsilon + y.row(i).squaredNorm());
    return out;
}

inline std::pair<Matrix, Matrix> bn_decompose(const Matrix& x, double epsilon) {
    const Matrix m = bn_mean_center(x);
    return {m, bn_v(m, epsilon)};
}

inline Matrix bn_forward(const Matrix& x, double epsilon) {
    if (x.cols() < 2) throw std::invalid_argument("bn_forward: N >= 2 required");
    if (epsilon <= 0.0) throw std::invalid_argument("bn_forward: epsilon <= 0");
    return bn_v(bn_mean_center(x), epsilon);
}

/// Dv(Y): block diagonal over rows, sqrt(N) u_i (Id_N - u_i^2 y^i (y^i)^T).
inline Matrix bn_Dv(const Matrix& y, double epsilon) {
    const Eigen::Index n = y.cols();
    const double sn = std::sqrt(static_cast<double>(n));
    Matrix d = Matrix::Zero(y.size(), y.size());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const Vector yi = y.row(i).transpose();
        const double u2 = 1.0 / (static_cast<double>(n) * epsilon + yi.squaredNorm());
        d.block(i * n, i * n, n, n) =
            sn * std::sqrt(u2) * (Matrix::Identity(n, n) - u2 * yi * yi.transpose());
    }
    return d;
}

/// Dm = Id_d (x) (Id_N - (1/N) 1 1^T).
inline Matrix bn_Dm(Eigen::Index d, Eigen::Index n) {
    const Matrix center = Matrix::Identity(n, n) -
                          Matrix::Ones(n, n) / static_cast<double>(n);
    return kron(Matrix::Identity(d, d), center);
}

inline Matrix bn_J(const Matrix& x, double epsilon) {
    return bn_Dv(bn_mean_center(x), epsilon) * bn_Dm(x.rows(), x.cols());
}

/// Second derivative of v, one slice per direction (row-major over Y).
inline Tensor3 bn_D2v(const Matrix& y, double epsilon) {
    const Eigen::Index n = y.cols();
    const double sn = std::sqrt(static_cast<double>(n));
    Tensor3 t;
    t.slices.assign(y.size(), Matrix::Zero(y.size(), y.size()));
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const Vector yi = y.row(i).transpose();
        const double u2 = 1.0 / (static_cast<double>(n) * epsilon + yi.squaredNorm());
        const double u3 = u2 * std::sqrt(u2);
        const double u5 = u3 * u2;
        const Matrix yyT = yi * yi.transpose();
        for (Eigen::Index l = 0; l < n; ++l) {
            Vector el = Vector::Zero(n);
            el(l) = 1.0;
            Matrix db = sn * (-yi(l) * u3 * Matrix::Identity(n, n) +
                              3.0 * yi(l) * u5 * yyT -
                              u3 * (el * yi.transpose() + yi * el.transpose()));
            t.slices[i * n + l].block(i * n, i * n, n, n) = db;
        }
    }
    return t;
}

// Skips ---------------------------------------------------------------------

/// The d_out x d_in skip map itself (before tensoring with Id_N).
inline Matrix skip_matrix(SkipKind kind, Eigen::Index d_in, Eigen::Index d_out) {
    switch (kind) {
        case SkipKind::None:
            return Matrix::Zero(d_out, d_in);
        case SkipKind::Identity:
            if (d_in != d_out)
                throw std::invalid_argument("skip_matrix: identity needs d_in == d_out");
            return Matrix::Identity(d_out, d_in);
        case SkipKind::PartialIsometry: {
            if (d_in < d_out)
                throw std::invalid_argument("skip_matrix: need d_in >= d_out");
            Matrix s = Matrix::Zero(d_out, d_in);
            s.leftCols(d_out) = Matrix::Identity(d_out, d_out);
            return s;
        }
        case SkipKind::AvgPool: {
            // Block average pool, rows rescaled to unit norm and zero-padded so
            // every nonzero singular value is exactly 1.
            if (d_in < d_out)
                throw std::invalid_argument("skip_matrix: need d_in >= d_out");
            const Eigen::Index g = d_in / d_out;
            Matrix s = Matrix::Zero(d_out, d_in);
            const double v = 1.0 / std::sqrt(static_cast<double>(g));
            for (Eigen::Index i = 0; i < d_out; ++i)
                for (Eigen::Index j = 0; j < g; ++j) s(i, i * g + j) = v;
            return s;
        }
    }
    throw std::invalid_argument("skip_matrix: unknown kind");
}

inline Matrix skip_build(SkipKind kind, Eigen::Index d_in, Eigen::Index d_out,
                         Eigen::Index n) {
    return kron(skip_matrix(kind, d_in, d_out), Matrix::Identity(n, n));
}

// Generic layer evaluation --------------------------------------------------

// Parameter layout: Affine/NormAffine store the weight matrix row-major then
// the bias; Residual stores its branch blocks in order, then the dense skip.

inline Matrix layer_weight(const LayerSpec& s, const Vector& params) {
    return numerics::unvec_rows(params.head(s.d_out * s.d_in), s.d_out, s.d_in);
}

inline Vector layer_bias(const LayerSpec& s, const Vector& params) {
    return s.bias ? Vector(params.tail(s.d_out)) : Vector(Vector::Zero(s.d_out));
}

Matrix layer_forward(const LayerSpec& s, const Vector& params, const Matrix& x);
Matrix layer_J(const LayerSpec& s, const Vector& params, const Matrix& x);
Matrix layer_D(const LayerSpec& s, const Vector& params, const Matrix& x);

/// Forward pass through a chain of layers; returns all activations, with
/// activations.front() == x and activations.back() the chain output.
inline std::vector<Matrix> chain_forward_trace(const std::vector<LayerSpec>& chain,
                                               const Vector& params, const Matrix& x) {
    std::vector<Matrix> acts;
    acts.reserve(chain.size() + 1);
    acts.push_back(x);
    Eigen::Index off = 0;
    for (std::size_t l = 0; l < chain.size(); ++l) {
        const Eigen::Index p = param_count(chain[l]);
        acts.push_back(layer_forward(chain[l], params.segment(off, p), acts.back()));
        if (!acts.back().allFinite())
            throw NumericalError("chain_forward: non-finite activation at layer " +
                                 std::to_string(l));
        off += p;
    }
    return acts;
}

/// Input-output Jacobian of a chain, descending layer index left to right.
inline Matrix chain_J(const std::vector<LayerSpec>& chain, const Vector& params,
                      const std::vector<Matrix>& acts) {
    const Eigen::Index n = acts.front().cols();
    Matrix j = Matrix::Identity(acts.front().size(), acts.front().size());
    (void)n;
    Eigen::Index off = 0;
    for (std::size_t l = 0; l < chain.size(); ++l) {
        const Eigen::Index p = param_count(chain[l]);
        j = layer_J(chain[l], params.segment(off, p), acts[l]) * j;
        off += p;
    }
    return j;
}

/// Parameter derivative of a chain: block l is
/// (prod_{j>l} Jf_j) Df_l, blocks concatenated left to right by layer index.
inline Matrix chain_D(const std::vector<LayerSpec>& chain, const Vector& params,
                      const std::vector<Matrix>& acts) {
    const Eigen::Index out_size = acts.back().size();
    std::vector<Matrix> blocks(chain.size());
    // Accumulate the trailing Jacobian product right-to-left.
    Matrix tail = Matrix::Identity(out_size, out_size);
    std::vector<Eigen::Index> offsets(chain.size());
    Eigen::Index total = 0;
    for (std::size_t l = 0; l < chain.size(); ++l) {
        offsets[l] = total;
        total += param_count(chain[l]);
    }
    for (std::size_t li = chain.size(); li-- > 0;) {
        const Eigen::Index p = param_count(chain[li]);
        const Vector pl = params.segment(offsets[li], p);
        if (p > 0) blocks[li] = tail * layer_D(chain[li], pl, acts[li]);
        else blocks[li] = Matrix::Zero(out_size, 0);
        if (li > 0) tail = tail * layer_J(chain[li], pl, acts[li]);
    }
    Matrix d(out_size, total);
    for (std::size_t l = 0; l < chain.size(); ++l)
        d.block(0, offsets[l], out_size, blocks[l].cols()) = blocks[l];
    return d;
}

inline Matrix layer_forward(const LayerSpec& s, const Vector& params, const Matrix& x) {
    if (x.rows() != s.d_in)
        throw std::invalid_argument("layer_forward: input dim mismatch");
    if (params.size() != param_count(s))
        throw std::invalid_argument("layer_forward: parameter count mismatch");
    switch (s.kind) {
        case LayerKind::Affine:
            return affine_forward(layer_weight(s, params), layer_bias(s, params), x);
        case LayerKind::NormAffine:
            return norm_affine_forward(s, layer_weight(s, params),
                                       layer_bias(s, params), x);
        case LayerKind::Nonlinearity:
            return nonlin_forward(s.phi_kind, x);
        case LayerKind::BatchNorm:
            return bn_forward(x, s.epsilon);
        case LayerKind::Residual: {
            Eigen::Index bp = 0;
            for (const auto& b : s.branch) bp += param_count(b);
            Matrix out = chain_forward_trace(s.branch, params.head(bp), x).back();
            if (s.skip_kind != SkipKind::None)
                out += skip_matrix(s.skip_kind, s.d_in, s.d_out) * x;
            if (s.dense_skip) {
                const Matrix a = numerics::unvec_rows(params.tail(s.d_out * s.d_in),
                                                      s.d_out, s.d_in);
                out += a * x;
            }
            return out;
        }
    }
    throw std::invalid_argument("layer_forward: unknown kind");
}

inline Matrix layer_J(const LayerSpec& s, const Vector& params, const Matrix& x) {
    const Eigen::Index n = x.cols();
    switch (s.kind) {
        case LayerKind::Affine:
            return affine_J(layer_weight(s, params), n);
        case LayerKind::NormAffine:
            return norm_affine_J(s, layer_weight(s, params), n);
        case LayerKind::Nonlinearity:
            return nonlin_J(s.phi_kind, x);
        case LayerKind::BatchNorm:
            return bn_J(x, s.epsilon);
        case LayerKind::Residual: {
            Eigen::Index bp = 0;
            for (const auto& b : s.branch) bp += param_count(b);
            const auto acts = chain_forward_trace(s.branch, params.head(bp), x);
            Matrix j = chain_J(s.branch, params.head(bp), acts);
            if (s.skip_kind != SkipKind::None)
                j += skip_build(s.skip_kind, s.d_in, s.d_out, n);
            if (s.dense_skip) {
                const Matrix a = numerics::unvec_rows(params.tail(s.d_out * s.d_in),
                                                      s.d_out, s.d_in);
                j += affine_J(a, n);
            }
            return j;
        }
    }
    throw std::invalid_argument("layer_J: unknown kind");
}

inline Matrix layer_D(const LayerSpec& s, const Vector& params, const Matrix& x) {
    switch (s.kind) {
        case LayerKind::Affine:
            return affine_D(s.d_out, x, s.bias);
        case LayerKind::NormAffine:
            return norm_affine_D(s, layer_weight(s, params), layer_bias(s, params), x);
        case LayerKind::Nonlinearity:
        case LayerKind::BatchNorm:
            return Matrix::Zero(s.d_out * x.cols(), 0);
        case LayerKind::Residual: {
            Eigen::Index bp = 0;
            for (const auto& b : s.branch) bp += param_count(b);
            const auto acts = chain_forward_trace(s.branch, params.head(bp), x);
            const Matrix branch_d = chain_D(s.branch, params.head(bp), acts);
            if (!s.dense_skip) return branch_d;
            Matrix d(branch_d.rows(), param_count(s));
            d << branch_d, affine_D(s.d_out, x, false);
            return d;
        }
    }
    throw std::invalid_argument("layer_D: unknown kind");
}

}  // namespace mps::layers
