#pragma once

// Cost functions, full-batch gradient descent with PL and smoothness
// diagnostics, per-step convergence certificates, and the worst-case Euler
// iteration against the analytic flow r(t) = (4 C eps t + 1)^{1/4}.

#include "mps/bounds.hpp"
#include "mps/network.hpp"
#include "mps/numerics.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mps::training {

using layers::LayerSpec;
using network::NetworkSpec;
using network::ParamState;

enum class CostKind { Square, SoftmaxCrossEntropy };

struct CostSpec {
    CostKind kind = CostKind::Square;
    Matrix labels;  // d_L x N, one-hot columns for cross-entropy

    static CostSpec square(Matrix y) { return {CostKind::Square, std::move(y)}; }
    static CostSpec cross_entropy(Matrix y) {
        CostSpec c{CostKind::SoftmaxCrossEntropy, std::move(y)};
        for (Eigen::Index j = 0; j < c.labels.cols(); ++j) {
            Eigen::Index ones = 0;
            bool valid = true;
            for (Eigen::Index i = 0; i < c.labels.rows(); ++i) {
                const double v = c.labels(i, j);
                if (v == 1.0) ++ones;
                else if (v != 0.0) valid = false;
            }
            if (!valid || ones != 1)
                throw std::invalid_argument(
                    "CostSpec: cross-entropy labels must be exact one-hot columns");
        }
        return c;
    }
};

struct CostEval {
    double value = 0.0;
    Vector grad;  // d gamma / d vec(Z), row-major vectorisation
    std::optional<double> mu_gamma;  // PL constant of gamma, when one exists
};

inline CostEval cost_eval_grad(const CostSpec& cost, const Matrix& z) {
    if (z.rows() != cost.labels.rows() || z.cols() != cost.labels.cols())
        throw std::invalid_argument("cost_eval_grad: shape mismatch");
    const auto n = static_cast<double>(z.cols());
    CostEval out;
    if (cost.kind == CostKind::Square) {
        const Matrix diff = z - cost.labels;
        out.value = diff.squaredNorm() / n;
        out.grad = (2.0 / n) * numerics::vec_rows(diff);
        out.mu_gamma = 4.0 / n;
        return out;
    }
    // Softmax cross-entropy, mean over columns; gradient (softmax - y) / N.
    Matrix grad(z.rows(), z.cols());
    double total = 0.0;
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
        const Vector col = z.col(j);
        const double m = col.maxCoeff();
        const Vector e = (col.array() - m).exp();
        const double s = e.sum();
        const Vector p = e / s;
        for (Eigen::Index i = 0; i < z.rows(); ++i)
            if (cost.labels(i, j) == 1.0) total += -(col(i) - m - std::log(s));
        grad.col(j) = p - cost.labels.col(j);
    }
    out.value = total / n;
    out.grad = numerics::vec_rows(grad) / n;
    out.mu_gamma = std::nullopt;  // infimum 0 at infinity, not PL over unbounded sets
    return out;
}

/// Loss and exact gradient of gamma o F via the materialised DF.
inline std::pair<double, Vector> loss_and_grad(const NetworkSpec& net,
                                               const ParamState& params,
                                               const Matrix& x, const CostSpec& cost) {
    const auto [output, trace] = network::pf_map(net, params, x);
    (void)trace;
    const CostEval ce = cost_eval_grad(cost, output);
    const network::PfDerivative df = network::pf_derivative(net, params, x);
    return {ce.value, Vector(df.DF.transpose() * ce.grad)};
}

struct TrainStep {
    std::size_t step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double lambda_df = 0.0;     // lambda(DF), only when diagnostics are on
    double mu_t = 0.0;          // mu_gamma * lambda(DF)
    double pl_residual = 0.0;   // ||grad||^2 - mu_t (loss - loss*)
    double first_layer_norm = 0.0;
    double eta = 0.0;
};

struct TrainTrace {
    std::vector<TrainStep> steps;
    double eta = 0.0;
    double beta = 0.0;       // estimate used for auto step size, 0 if eta fixed
    double loss_star = 0.0;  // both supported costs have infimum 0
};

struct GdOptions {
    double eta = 0.0;  // <= 0 selects auto: 1 / beta_estimate
    std::size_t steps = 100;
    bool diagnostics = true;
    std::size_t diag_every = 1;
    int beta_samples = 64;
    unsigned beta_seed = 17;
    double beta_radius = 1.0;
};

inline double auto_step_size(const NetworkSpec& net, const ParamState& params0,
                             const Matrix& x, const CostSpec& cost,
                             const GdOptions& opt, double* beta_out = nullptr) {
    auto grad = [&](const Vector& theta) {
        return loss_and_grad(net, ParamState::from_flat(net, theta), x, cost).second;
    };
    const double beta = bounds::beta_estimate(grad, params0.flat(), opt.beta_radius,
                                              opt.beta_samples, opt.beta_seed);
    if (beta_out) *beta_out = beta;
    // Strictly inside the eta < 2/beta requirement.
    return 1.0 / beta;
}

inline TrainTrace gd_train(const NetworkSpec& net, const ParamState& params0,
                           const Matrix& x, const CostSpec& cost,
                           const GdOptions& opt) {
    TrainTrace trace;
    double beta = 0.0;
    trace.eta = opt.eta > 0.0 ? opt.eta
                              : auto_step_size(net, params0, x, cost, opt, &beta);
    trace.beta = beta;
    const std::optional<double> mu_gamma =
        cost.kind == CostKind::Square
            ? std::optional<double>(4.0 / static_cast<double>(net.N))
            : std::nullopt;

    const LayerSpec& first = net.layers.front();
    const Eigen::Index p1 = layers::param_count(first);
    Vector theta = params0.flat();
    for (std::size_t t = 0; t < opt.steps; ++t) {
        const ParamState st = ParamState::from_flat(net, theta);
        const auto [output, fwd] = network::pf_map(net, st, x);
        (void)fwd;
        const CostEval ce = cost_eval_grad(cost, output);
        const network::PfDerivative df = network::pf_derivative(net, st, x);
        const Vector grad = df.DF.transpose() * ce.grad;

        TrainStep rec;
        rec.step = t;
        rec.loss = ce.value;
        rec.grad_norm = grad.norm();
        rec.first_layer_norm = theta.head(p1).norm();
        rec.eta = trace.eta;
        if (opt.diagnostics && t % opt.diag_every == 0) {
            rec.lambda_df = numerics::lambda_min_gram(df.DF);
            if (mu_gamma) {
                rec.mu_t = *mu_gamma * rec.lambda_df;
                rec.pl_residual =
                    rec.grad_norm * rec.grad_norm - rec.mu_t * (rec.loss - trace.loss_star);
            }
        }
        trace.steps.push_back(rec);

        theta -= trace.eta * grad;
        if (!theta.allFinite())
            throw NumericalError("gd_train: non-finite update at step " +
                                 std::to_string(t));
    }
    return trace;
}

// Certificates --------------------------------------------------------------

struct CertificateStep {
    std::size_t step = 0;
    double product_bound = 0.0;  // prod_{i<t} (1 - mu_i alpha), times initial gap
    double realised_gap = 0.0;   // loss_t - loss*
    bool bound_holds = false;
    bool vacuous = false;  // mu_t alpha >= 1 at this step
    double log_partial_sum = 0.0;  // sum_{i<=t} log(1 - mu_i alpha)
};

struct CertificateReport {
    double alpha = 0.0;
    std::vector<CertificateStep> steps;
    bool all_hold = true;
};

/// Per-step product bound loss_t - loss* <= prod_{i<t}(1 - mu_i alpha)
/// (loss_0 - loss*), with alpha = eta (1 - beta eta / 2).
inline CertificateReport convergence_certificate(const TrainTrace& trace, double eta,
                                                 double beta) {
    if (trace.steps.empty())
        throw std::invalid_argument("convergence_certificate: empty trace");
    CertificateReport rep;
    rep.alpha = eta * (1.0 - 0.5 * beta * eta);
    const double gap0 = trace.steps.front().loss - trace.loss_star;
    double product = 1.0;
    double log_sum = 0.0;
    for (const auto& s : trace.steps) {
        CertificateStep cs;
        cs.step = s.step;
        cs.realised_gap = s.loss - trace.loss_star;
        cs.product_bound = product * gap0;
        cs.vacuous = s.mu_t * rep.alpha >= 1.0;
        // Gaps below ~eps^2 * gap0 are unresolvable in double precision (the
        // loss is a squared norm), so the comparison gets a floor well above
        // that scale yet far below any meaningful loss.
        cs.bound_holds = cs.realised_gap <=
                         cs.product_bound * (1.0 + 1e-9) + 1e-24 * std::max(1.0, gap0);
        cs.log_partial_sum = log_sum;
        rep.steps.push_back(cs);
        rep.all_hold = rep.all_hold && cs.bound_holds;
        const double factor = 1.0 - s.mu_t * rep.alpha;
        if (factor > 0.0) {
            product *= factor;
            log_sum += std::log(factor);
        } else {
            product = 0.0;
            log_sum = -std::numeric_limits<double>::infinity();
        }
    }
    return rep;
}

// Worst-case Euler analysis -------------------------------------------------

struct WorstCaseResult {
    std::vector<double> r;            // Euler iterates, r[0] = 1
    std::vector<double> mu_curve;     // eps / (eps + r_t^2)^{3/2}
    double max_flow_deviation = 0.0;  // max_t |r_t - r(eta t)|
    double fitted_slope = 0.0;        // log-log slope of mu_curve, ~ -3/4
};

/// Euler iterates of the vector field V(r) = C eps r^{-3} against the flow
/// solution r(t) = (4 C eps t + 1)^{1/4}, plus the induced decay curve of the
/// smallest-singular-value lower bound.
inline WorstCaseResult worst_case_euler(double c, double epsilon, double eta,
                                        std::size_t t_max) {
    if (c <= 0.0 || epsilon <= 0.0 || eta <= 0.0)
        throw std::invalid_argument("worst_case_euler: constants must be positive");
    WorstCaseResult out;
    out.r.reserve(t_max + 1);
    out.mu_curve.reserve(t_max + 1);
    double r = 1.0;
    for (std::size_t t = 0; t <= t_max; ++t) {
        out.r.push_back(r);
        out.mu_curve.push_back(epsilon * std::pow(epsilon + r * r, -1.5));
        const double flow = std::pow(4.0 * c * epsilon * eta * static_cast<double>(t) + 1.0, 0.25);
        out.max_flow_deviation = std::max(out.max_flow_deviation, std::abs(r - flow));
        r += eta * c * epsilon / (r * r * r);
    }
    // Least-squares log-log fit over the tail (t in [t_max/100, t_max]), where
    // the transient from r_0 has decayed.
    const std::size_t lo = std::max<std::size_t>(1, t_max / 100);
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0, m = 0.0;
    for (std::size_t t = lo; t <= t_max; ++t) {
        const double lx = std::log(static_cast<double>(t));
        const double ly = std::log(out.mu_curve[t]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
        m += 1.0;
    }
    out.fitted_slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    return out;
}

}  // namespace mps::training
