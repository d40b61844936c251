// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Each criterion is self-contained and seeded.

#include "mps/experiments.hpp"
#include "support/layer_fd.hpp"
#include "support/test_util.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

using namespace mps;
using testsupport::make_rng;
using testsupport::random_matrix;
using testsupport::random_vector;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
    std::printf("criterion %d: %s — %s\n", criterion, pass ? "PASS" : "FAIL",
                detail.c_str());
    if (!pass) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

// 1. Identity-shift spectrum means -----------------------------------------

void criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = experiments::identity_shift_experiment(500, 10, 1, 40);
    const double el = seconds_since(t0);
    const bool pass = std::abs(res.mean_plain - 0.49) <= 0.03 &&
                      std::abs(res.mean_shifted - 1.08) <= 0.03 && el <= 60.0;
    report(1, pass,
           "mean sv(A) = " + fmt(res.mean_plain) + " (target 0.49 +/- 0.03), mean "
           "sv(Id+A) = " + fmt(res.mean_shifted) + " (target 1.08 +/- 0.03), " +
           fmt(el) + " s");
}

// 2. Derivative oracles -----------------------------------------------------

void criterion2() {
    auto rng = make_rng(2);
    double worst = 0.0;
    auto track = [&](double err) { worst = std::max(worst, err); };

    const std::vector<layers::LayerSpec> kinds = {
        layers::affine(4, 3, true),
        layers::norm_affine(4, 3, layers::NormKind::Entry, 0.1, 0.8, true),
        layers::norm_affine(4, 3, layers::NormKind::Weight, 0.1, 0.8),
        layers::nonlinearity(4, layers::PhiKind::Tanh),
        layers::batchnorm(4, 0.1),
        layers::residual({layers::nonlinearity(4),
                          layers::contractive_norm_affine(
                              4, 4, layers::NormKind::Weight)}),
    };
    for (const auto& spec : kinds) {
        for (int t = 0; t < 50; ++t) {
            const Vector p = random_vector(rng, layers::param_count(spec));
            const Matrix x = random_matrix(rng, spec.d_in, 3);
            track((layers::layer_J(spec, p, x) - testsupport::fd_layer_J(spec, p, x))
                      .cwiseAbs()
                      .maxCoeff());
            if (p.size() > 0)
                track((layers::layer_D(spec, p, x) - testsupport::fd_layer_D(spec, p, x))
                          .cwiseAbs()
                          .maxCoeff());
        }
    }

    // Second derivatives of en / wn: the arbiter for the closed forms.
    for (auto kind : {layers::NormKind::Entry, layers::NormKind::Weight}) {
        for (int t = 0; t < 50; ++t) {
            const Matrix w = random_matrix(rng, 3, 4);
            const auto d2 = layers::param_D2(kind, w, 0.1);
            const Matrix fd = numerics::finite_diff_jacobian(
                [&](const Vector& v) {
                    return numerics::vec_rows(layers::param_D(
                        kind, numerics::unvec_rows(v, 3, 4), 0.1));
                },
                numerics::vec_rows(w));
            Matrix analytic(fd.rows(), fd.cols());
            for (Eigen::Index n = 0; n < fd.cols(); ++n)
                analytic.col(n) = numerics::vec_rows(d2.slices[n]);
            track((analytic - fd).cwiseAbs().maxCoeff());
        }
    }

    // Full networks: DF and loss gradients.
    for (int t = 0; t < 50; ++t) {
        network::NetworkSpec net;
        net.N = 1 + t % 4;
        const int d = 2 + t % 3;
        net.layers = {layers::norm_affine(4, d, layers::NormKind::Entry, 0.1, 1.0),
                      layers::nonlinearity(d),
                      layers::residual({layers::contractive_norm_affine(
                          d, d, layers::NormKind::Weight)})};
        if (net.N >= 2) net.layers.push_back(layers::batchnorm(d, 0.1));
        const auto params = network::init_params(net, 400 + t);
        const Matrix x = random_matrix(rng, 4, net.N);
        const auto df = network::pf_derivative(net, params, x);
        const Matrix fd = numerics::finite_diff_jacobian(
            [&](const Vector& theta) {
                return numerics::vec_rows(
                    network::pf_map(net, network::ParamState::from_flat(net, theta), x)
                        .first);
            },
            params.flat());
        track((df.DF - fd).cwiseAbs().maxCoeff());

        const auto cost = training::CostSpec::square(random_matrix(rng, d, net.N));
        const auto [loss, grad] = training::loss_and_grad(net, params, x, cost);
        (void)loss;
        const Matrix gfd = numerics::finite_diff_jacobian(
            [&](const Vector& theta) {
                Vector out(1);
                out << training::loss_and_grad(
                             net, network::ParamState::from_flat(net, theta), x, cost)
                           .first;
                return out;
            },
            params.flat());
        track((grad.transpose() - gfd).cwiseAbs().maxCoeff());
    }

    report(2, worst < 1e-6,
           "worst finite-difference deviation " + fmt(worst) + " (cap 1e-6)");
}

// 3. Regularity lower bound -------------------------------------------------

void criterion3() {
    auto rng = make_rng(3);
    const auto net = network::make_normalised_resnet({6, 5, 5, 4}, 4);
    const Matrix x =
        Eigen::HouseholderQR<Matrix>(random_matrix(rng, 6, 4)).householderQ() *
        Matrix::Identity(6, 4);
    if (!network::validate_normalised_resnet(net, x).all_pass()) {
        report(3, false, "validation of the test network failed");
        return;
    }
    std::uniform_real_distribution<double> log_scale(0.0, 4.0);
    double min_bound = std::numeric_limits<double>::infinity();
    double worst_gap = -std::numeric_limits<double>::infinity();
    bool pass = true;
    for (int t = 0; t < 1000; ++t) {
        auto p = network::init_params(net, 500 + t);
        const double s = std::pow(10.0, log_scale(rng));
        for (auto& b : p.blocks) b *= s;
        const double bound = network::lambda_lower_bound(net, p, x);
        const double lam = numerics::lambda_min_gram(network::pf_derivative(net, p, x).DF);
        min_bound = std::min(min_bound, bound);
        worst_gap = std::max(worst_gap, bound - lam);
        pass = pass && bound > 0.0 && bound <= lam + 1e-8;
    }
    report(3, pass,
           "1000 draws (norms to 1e4): min bound " + fmt(min_bound) +
               ", max (bound - lambda) " + fmt(worst_gap) + " (cap 1e-8)");
}

// 4. Lemma inequalities -----------------------------------------------------

void criterion4() {
    auto rng = make_rng(4);
    bool pass = true;
    std::string why = "sigma(residual_J) > delta, sigma(norm_affine_D) bound, "
                      "compose_bounds closed form all hold";

    const auto res = layers::residual(
        {layers::nonlinearity(4),
         layers::contractive_norm_affine(4, 4, layers::NormKind::Weight, 0.1, 0.1)});
    const double delta = bounds::sigma_residual_J_bound(res, 0.1);
    for (int t = 0; t < 200 && pass; ++t) {
        const double s = std::pow(10.0, t % 7 - 3);
        const Vector p = s * random_vector(rng, layers::param_count(res));
        const Matrix x = s * random_matrix(rng, 4, 3);
        if (numerics::smallest_sv(layers::layer_J(res, p, x)) <= delta - 1e-9) {
            pass = false;
            why = "residual Jacobian fell below the certified delta";
        }
    }

    for (int t = 0; t < 200 && pass; ++t) {
        const auto kind =
            t % 2 ? layers::NormKind::Entry : layers::NormKind::Weight;
        const auto spec = layers::norm_affine(4, 3, kind, 0.1, 0.8);
        const Matrix w = random_matrix(rng, 3, 4);
        const Matrix x = random_matrix(rng, 4, 3);
        const double bound = bounds::sigma_param_affine_D_bound(spec, w, x);
        const double actual =
            numerics::smallest_sv(layers::layer_D(spec, numerics::vec_rows(w), x));
        if (bound > actual + 1e-9) {
            pass = false;
            why = "norm-affine D bound exceeded the true smallest singular value";
        }
    }

    const auto two = bounds::compose_bounds({{"f1", 2.5, 3.0}, {"f2", 7.0, 0.5}});
    if (two.composed_bound != 2.5 * 7.0 || two.composed_lipschitz != 2.5 * 0.5 + 7.0 * 3.0) {
        pass = false;
        why = "compose_bounds n = 2 closed form mismatch";
    }
    report(4, pass, why);
}

// 5. Convergence certificate, square cost ------------------------------------

void criterion5() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto net = network::make_normalised_resnet({8, 8, 8, 4}, 4, 0.5, 0.1, 2.0);
    const auto data =
        experiments::gen_data(8, 4, experiments::DataKind::GaussianOrthogonalised, 5);
    std::mt19937_64 label_rng(55);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix y(4, 4);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = 0.3 * gauss(label_rng);
    const auto cost = training::CostSpec::square(y);

    training::GdOptions opt;
    opt.eta = 0.0;
    opt.steps = 2000;
    const auto params0 = network::init_params(net, 5, 0.2);
    const auto trace = training::gd_train(net, params0, data.X, cost, opt);

    bool monotone = true, pl = true;
    for (std::size_t t = 1; t < trace.steps.size(); ++t)
        monotone = monotone && trace.steps[t].loss <= trace.steps[t - 1].loss + 1e-15;
    for (const auto& s : trace.steps)
        pl = pl && s.pl_residual >= -1e-9 * std::max(1.0, s.loss);
    const auto cert = training::convergence_certificate(trace, trace.eta, trace.beta);
    const double initial = trace.steps.front().loss;
    const double final_loss = trace.steps.back().loss;
    const double el = seconds_since(t0);
    const bool pass = monotone && pl && cert.all_hold &&
                      final_loss < 1e-6 * initial && el <= 300.0;
    std::ostringstream ss;
    ss << "monotone " << (monotone ? "yes" : "NO") << ", PL holds "
       << (pl ? "yes" : "NO") << ", certificate " << (cert.all_hold ? "holds" : "FAILS")
       << ", loss " << fmt(initial) << " -> " << fmt(final_loss) << " (cap "
       << fmt(1e-6 * initial) << "), " << fmt(el) << " s";
    report(5, pass, ss.str());
}

// 6. Minima at infinity, cross-entropy ---------------------------------------

void criterion6() {
    const auto net = network::make_normalised_resnet({8, 8, 8, 4}, 4, 0.1, 0.1, 2.0);
    const auto data =
        experiments::gen_data(8, 4, experiments::DataKind::GaussianOrthogonalised, 6);
    const auto cost = training::CostSpec::cross_entropy(experiments::cyclic_one_hot(4, 4));

    training::GdOptions opt;
    opt.eta = 0.0;
    opt.steps = 5000;
    opt.diagnostics = false;
    const auto params0 = network::init_params(net, 6, 0.05);
    const auto trace = training::gd_train(net, params0, data.X, cost, opt);

    bool decreasing = true;
    for (std::size_t t = 1; t < trace.steps.size(); ++t)
        decreasing = decreasing && trace.steps[t].loss < trace.steps[t - 1].loss;
    const double final_loss = trace.steps.back().loss;
    const double norm0 = trace.steps.front().first_layer_norm;
    const double norm_t = trace.steps.back().first_layer_norm;
    const bool pass = decreasing && final_loss < 1e-2 && norm_t > 3.0 * norm0;
    std::ostringstream ss;
    ss << "strictly decreasing " << (decreasing ? "yes" : "NO") << ", final loss "
       << fmt(final_loss) << " (cap 1e-2), first-layer norm " << fmt(norm0) << " -> "
       << fmt(norm_t) << " (needs > " << fmt(3.0 * norm0) << ")";
    report(6, pass, ss.str());
}

// 7. Worst-case decay --------------------------------------------------------

void criterion7() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = training::worst_case_euler(1.0, 1.0, 1.0, 100000);
    const double el = seconds_since(t0);
    // Bounded deviation: the running max over the second half must not exceed
    // the first-half max (no growth trend).
    double first_half = 0.0, second_half = 0.0;
    for (std::size_t t = 0; t < res.r.size(); ++t) {
        const double flow = std::pow(4.0 * static_cast<double>(t) + 1.0, 0.25);
        const double dev = std::abs(res.r[t] - flow);
        (t < res.r.size() / 2 ? first_half : second_half) =
            std::max(t < res.r.size() / 2 ? first_half : second_half, dev);
    }
    const bool pass = res.fitted_slope >= -0.80 && res.fitted_slope <= -0.70 &&
                      second_half <= first_half && el <= 10.0;
    std::ostringstream ss;
    ss << "fitted slope " << fmt(res.fitted_slope)
       << " (target [-0.80, -0.70]), deviation max " << fmt(res.max_flow_deviation)
       << " with no growth trend (" << fmt(first_half) << " -> " << fmt(second_half)
       << "), " << fmt(el) << " s";
    report(7, pass, ss.str());
}

// 8. Hypothesis 13 ordering --------------------------------------------------

void criterion8() {
    experiments::LayerSpectraConfig cfg;
    int sv_ok = 0;
    double loss_sum[3] = {0.0, 0.0, 0.0};
    for (unsigned seed = 0; seed < 10; ++seed) {
        const auto results = experiments::layer_spectra_experiment(cfg, seed);
        const double m_chain = results[0].spectrum.mean;
        const double m_res = results[1].spectrum.mean;
        const double m_avg = results[2].spectrum.mean;
        if (m_chain < m_res && m_res < m_avg) ++sv_ok;
        for (int v = 0; v < 3; ++v) loss_sum[v] += results[v].loss_curve.back();
    }
    // Per-trial singular-value ordering, trial-mean loss-at-iteration-10
    // ordering.
    const bool loss_ok = loss_sum[2] <= loss_sum[1] && loss_sum[1] <= loss_sum[0];
    const bool pass = sv_ok >= 9 && loss_ok;
    std::ostringstream ss;
    ss << "mean-sv ordering chain < res < resavg in " << sv_ok
       << "/10 trials (needs >= 9), trial-mean loss resavg " << fmt(loss_sum[2] / 10)
       << " <= res " << fmt(loss_sum[1] / 10) << " <= chain " << fmt(loss_sum[0] / 10)
       << (loss_ok ? " holds" : " FAILS");
    report(8, pass, ss.str());
}

}  // namespace

int main() {
    criterion1();
    criterion2();
    criterion3();
    criterion4();
    criterion5();
    criterion6();
    criterion7();
    criterion8();
    if (g_failures) std::printf("%d criterion(s) failed\n", g_failures);
    else std::printf("all criteria passed\n");
    return g_failures == 0 ? 0 : 1;
}
