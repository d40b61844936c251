#pragma once

// Executable bound ledgers: composition of (bound, Lipschitz) factor pairs,
// certified per-layer constants, empirical smoothness estimation and the
// smallest-singular-value lemmas for residual Jacobians and normalised
// parameter derivatives.

#include "mps/layers.hpp"
#include "mps/numerics.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mps::bounds {

using layers::LayerKind;
using layers::LayerSpec;
using layers::NormKind;
using layers::PhiKind;
using layers::SkipKind;

/// max |tanh''| = 4 / (3 sqrt(3)), attained at atanh(1/sqrt(3)).
inline double tanh_second_derivative_bound() { return 4.0 / (3.0 * std::sqrt(3.0)); }

/// sup_w |d/dw eps (eps + w^2)^{-3/2}| = (3/2) (4/5)^{5/2} / eps, at w = sqrt(eps)/2.
inline double en_D2_sup(double epsilon) {
    return 1.5 * std::pow(0.8, 2.5) / epsilon;
}

struct BoundFactor {
    std::string name;
    double b = 0.0;          // bound on the factor
    double c = 0.0;          // Lipschitz constant of the factor
    bool conditional = false;  // valid only on a nondegenerate-covariance set
};

struct BoundLedger {
    std::vector<BoundFactor> per_layer;
    double composed_bound = 0.0;
    double composed_lipschitz = 0.0;
};

/// Product of bounded Lipschitz factors: bound prod b_i, Lipschitz constant
/// sum_i c_i prod_{j != i} b_j.
inline BoundLedger compose_bounds(const std::vector<BoundFactor>& factors) {
    BoundLedger ledger;
    ledger.per_layer = factors;
    double prod = 1.0;
    for (const auto& f : factors) {
        if (f.b < 0.0 || f.c < 0.0)
            throw std::invalid_argument("compose_bounds: negative constant");
        prod *= f.b;
    }
    double lip = 0.0;
    for (std::size_t i = 0; i < factors.size(); ++i) {
        double others = 1.0;
        for (std::size_t j = 0; j < factors.size(); ++j)
            if (j != i) others *= factors[j].b;
        lip += factors[i].c * others;
    }
    ledger.composed_bound = prod;
    ledger.composed_lipschitz = lip;
    return ledger;
}

/// Certified global spectral cap on the input-output Jacobian of a layer.
/// Infinite for plain affine layers, whose Jacobian is unbounded in the
/// parameters.
inline double certified_J_cap(const LayerSpec& s) {
    switch (s.kind) {
        case LayerKind::Affine:
            return std::numeric_limits<double>::infinity();
        case LayerKind::NormAffine:
            return s.scale * layers::norm_affine_spectral_cap(s.norm_kind, s.d_in, s.d_out);
        case LayerKind::Nonlinearity:
            return 1.0;  // |phi'| <= 1 for tanh and identity
        case LayerKind::BatchNorm:
            return 1.0 / std::sqrt(s.epsilon);
        case LayerKind::Residual: {
            double cap = s.skip_kind == SkipKind::None ? 0.0 : 1.0;
            if (s.dense_skip) return std::numeric_limits<double>::infinity();
            double branch = 1.0;
            for (const auto& b : s.branch) branch *= certified_J_cap(b);
            return cap + branch;
        }
    }
    return std::numeric_limits<double>::infinity();
}

/// Certified cap on the branch Jacobian of a residual block.
inline double certified_branch_J_cap(const LayerSpec& res) {
    if (res.kind != LayerKind::Residual)
        throw std::invalid_argument("certified_branch_J_cap: not a residual block");
    double cap = 1.0;
    for (const auto& b : res.branch) cap *= certified_J_cap(b);
    return cap;
}

namespace detail {

/// sup over unit directions of sigma(T(dir)) for a fixed base point, bounded
/// certifiably: sigma(T(dir)) <= ||T(dir)||_F <= sigma_max(M) where column n of
/// M is the vectorised slice n.
inline double tensor_direction_sup(const layers::Tensor3& tens) {
    Matrix m(tens.slices.front().size(), static_cast<Eigen::Index>(tens.slices.size()));
    for (std::size_t n = 0; n < tens.slices.size(); ++n)
        m.col(static_cast<Eigen::Index>(n)) = numerics::vec_rows(tens.slices[n]);
    return numerics::largest_sv(m);
}

/// Deterministic probe-based maximisation over base points of the certified
/// per-point direction bound above, with a x2 safety factor over the base-point
/// sweep. Used for the wn and bn Lipschitz constants, whose suprema are finite
/// but have no convenient closed form.
template <typename SliceFn>
double probed_D2_sup(Eigen::Index rows, Eigen::Index cols, SliceFn make_tensor,
                     unsigned seed = 7, int probes = 400) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    double best = 0.0;
    for (int t = 0; t < probes; ++t) {
        Matrix w(rows, cols);
        for (Eigen::Index i = 0; i < w.size(); ++i)
            w.data()[i] = gauss(rng) * std::pow(10.0, (t % 7) - 3);
        best = std::max(best, tensor_direction_sup(make_tensor(w)));
    }
    return 2.0 * best;
}

}  // namespace detail

/// Certified (bound, Lipschitz) pairs for the J and D factors of a layer,
/// valid globally in the parameters and over a data ball of the given radius.
/// Batch norm constants are flagged conditional (nondegenerate covariance).
inline std::vector<BoundFactor> layer_bound_constants(const LayerSpec& s,
                                                      double data_ball_radius) {
    const double r = data_ball_radius;
    if (r <= 0.0) throw std::invalid_argument("layer_bound_constants: radius <= 0");
    std::vector<BoundFactor> out;
    switch (s.kind) {
        case LayerKind::NormAffine: {
            const double dp_sup = 1.0 / std::sqrt(s.epsilon);  // both en and wn
            const double d2_sup =
                s.norm_kind == NormKind::Entry
                    ? en_D2_sup(s.epsilon)
                    : detail::probed_D2_sup(s.d_out, s.d_in, [&](const Matrix& w) {
                          return layers::param_D2(NormKind::Weight, w, s.epsilon);
                      });
            out.push_back({"norm_affine_J", certified_J_cap(s), s.scale * dp_sup});
            out.push_back({"norm_affine_D", r * s.scale * dp_sup,
                           s.scale * (r * d2_sup + dp_sup)});
            break;
        }
        case LayerKind::Nonlinearity: {
            const double c =
                s.phi_kind == PhiKind::Tanh ? tanh_second_derivative_bound() : 0.0;
            out.push_back({"nonlin_J", 1.0, c});
            break;
        }
        case LayerKind::BatchNorm: {
            const double d2_sup =
                detail::probed_D2_sup(s.d_in, 4, [&](const Matrix& y) {
                    return layers::bn_D2v(y, s.epsilon);
                });
            out.push_back({"bn_J", 1.0 / std::sqrt(s.epsilon), d2_sup, true});
            break;
        }
        case LayerKind::Residual: {
            if (s.dense_skip)
                throw std::invalid_argument(
                    "layer_bound_constants: dense skips are not globally bounded");
            std::vector<BoundFactor> branch_j;
            bool conditional = false;
            for (const auto& b : s.branch) {
                for (auto& f : layer_bound_constants(b, r)) {
                    conditional = conditional || f.conditional;
                    if (f.name.find("_J") != std::string::npos) branch_j.push_back(f);
                }
            }
            const BoundLedger composed = compose_bounds(branch_j);
            const double skip_b = s.skip_kind == SkipKind::None ? 0.0 : 1.0;
            out.push_back({"residual_J", skip_b + composed.composed_bound,
                           composed.composed_lipschitz, conditional});
            break;
        }
        case LayerKind::Affine:
            throw std::invalid_argument(
                "layer_bound_constants: plain affine layers have no global constants");
    }
    return out;
}

using GradientMap = std::function<Vector(const Vector&)>;

/// Empirical smoothness constant: max secant slope of the gradient over short
/// random segments at sampled base points in a ball, times a x2 safety factor.
/// Short segments probe the stiffest local direction rather than averaging
/// curvature across the ball. Deterministic per seed.
inline double beta_estimate(const GradientMap& grad, const Vector& center,
                            double radius, int samples, unsigned seed) {
    if (samples < 2) throw std::invalid_argument("beta_estimate: samples < 2");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    auto draw_dir = [&]() {
        Vector d(center.size());
        for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = gauss(rng);
        d.normalize();
        return d;
    };
    const double h = 1e-2 * radius;
    double best = 0.0;
    for (int t = 0; t < samples; ++t) {
        const Vector p = center + radius * std::pow(unif(rng), 1.0 / center.size()) *
                                      draw_dir();
        const Vector q = p + h * draw_dir();
        const Vector gp = grad(p);
        const Vector gq = grad(q);
        if (!gp.allFinite() || !gq.allFinite())
            throw NumericalError("beta_estimate: non-finite gradient");
        best = std::max(best, (gq - gp).norm() / h);
    }
    return 2.0 * best;
}

/// Weyl lower bound for residual Jacobians: if the branch Jacobian is
/// certified below 1 - delta and the skip has all singular values 1, then
/// sigma(Jf) > delta.
inline double sigma_residual_J_bound(const LayerSpec& res, double delta) {
    if (delta <= 0.0 || delta >= 1.0)
        throw std::invalid_argument("sigma_residual_J_bound: delta outside (0,1)");
    if (res.kind != LayerKind::Residual || res.skip_kind == SkipKind::None ||
        res.dense_skip)
        throw std::invalid_argument("sigma_residual_J_bound: skip is not an isometry");
    if (certified_branch_J_cap(res) > 1.0 - delta)
        throw std::invalid_argument(
            "sigma_residual_J_bound: branch not certified below 1 - delta");
    return delta;
}

/// sigma(D aff_P(w, X)) >= sigma(X) sigma(DP(w)), for full-rank X with N <= d_in.
inline double sigma_param_affine_D_bound(const LayerSpec& s, const Matrix& w,
                                         const Matrix& x) {
    if (s.kind != LayerKind::NormAffine)
        throw std::invalid_argument("sigma_param_affine_D_bound: not a norm affine");
    if (x.cols() > x.rows())
        throw std::invalid_argument("sigma_param_affine_D_bound: N > d_in");
    const double lo = numerics::smallest_sv(x);
    if (lo <= 1e-10 * numerics::largest_sv(x))
        throw std::invalid_argument("sigma_param_affine_D_bound: X rank deficient");
    return lo * numerics::smallest_sv(s.scale * layers::param_D(s.norm_kind, w, s.epsilon));
}

/// Smallest singular value of D en(w): min over entries of
/// eps (eps + w_ij^2)^{-3/2} (the matrix is diagonal positive).
inline double sigma_D_en(const Matrix& w, double epsilon) {
    if (epsilon <= 0.0) throw std::invalid_argument("sigma_D_en: epsilon <= 0");
    double lo = std::pow(epsilon, -0.5);
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        const double v = w.data()[i];
        lo = std::min(lo, epsilon * std::pow(epsilon + v * v, -1.5));
    }
    return lo;
}

}  // namespace mps::bounds
