#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mps/training.hpp"
#include "support/test_util.hpp"

using namespace mps;
using namespace mps::training;
using network::NetworkSpec;
using network::ParamState;
using testsupport::make_rng;
using testsupport::random_matrix;

TEST_CASE("square cost: value, gradient and PL constant") {
    auto rng = make_rng(60);
    const Matrix y = random_matrix(rng, 3, 4);
    const auto cost = CostSpec::square(y);

    const auto at_y = cost_eval_grad(cost, y);
    CHECK(at_y.value == 0.0);
    CHECK(at_y.grad.norm() == 0.0);
    REQUIRE(at_y.mu_gamma.has_value());
    CHECK(*at_y.mu_gamma == doctest::Approx(1.0));  // 4 / N with N = 4

    const Matrix z = random_matrix(rng, 3, 4);
    const auto ce = cost_eval_grad(cost, z);
    CHECK(ce.value == doctest::Approx((z - y).squaredNorm() / 4.0));
    const Matrix fd = numerics::finite_diff_jacobian(
        [&](const Vector& v) {
            Vector out(1);
            out << cost_eval_grad(cost, numerics::unvec_rows(v, 3, 4)).value;
            return out;
        },
        numerics::vec_rows(z));
    CHECK((ce.grad.transpose() - fd).cwiseAbs().maxCoeff() < 1e-6);

    // PL identity with equality: ||grad||^2 = (4/N) gamma exactly.
    CHECK(ce.grad.squaredNorm() == doctest::Approx(*ce.mu_gamma * ce.value));
}

TEST_CASE("cross-entropy cost: uniform logits, gradient and label checks") {
    Matrix y = Matrix::Zero(3, 2);
    y(0, 0) = 1.0;
    y(2, 1) = 1.0;
    const auto cost = CostSpec::cross_entropy(y);

    const auto uni = cost_eval_grad(cost, Matrix::Zero(3, 2));
    CHECK(uni.value == doctest::Approx(std::log(3.0)));
    CHECK(!uni.mu_gamma.has_value());

    auto rng = make_rng(61);
    const Matrix z = random_matrix(rng, 3, 2);
    const auto ce = cost_eval_grad(cost, z);
    const Matrix fd = numerics::finite_diff_jacobian(
        [&](const Vector& v) {
            Vector out(1);
            out << cost_eval_grad(cost, numerics::unvec_rows(v, 3, 2)).value;
            return out;
        },
        numerics::vec_rows(z));
    CHECK((ce.grad.transpose() - fd).cwiseAbs().maxCoeff() < 1e-6);
    // Gradient columns sum to zero (softmax and one-hot both normalise).
    const Matrix g = numerics::unvec_rows(ce.grad, 3, 2);
    CHECK(std::abs(g.colwise().sum().cwiseAbs().maxCoeff()) < 1e-12);

    Matrix bad = y;
    bad(1, 0) = 0.5;
    CHECK_THROWS_AS(CostSpec::cross_entropy(bad), std::invalid_argument);
    CHECK_THROWS_AS(CostSpec::cross_entropy(Matrix::Zero(3, 2)),
                    std::invalid_argument);
}

TEST_CASE("loss_and_grad: least-squares closed form and finite differences") {
    auto rng = make_rng(62);
    // Single linear layer: gradient of (1/N)||A X - Y||_F^2 is (2/N)(A X - Y) X^T.
    NetworkSpec net;
    net.N = 4;
    net.layers = {layers::affine(3, 2, false)};
    const auto params = network::init_params(net, 8);
    const Matrix x = random_matrix(rng, 3, 4);
    const Matrix y = random_matrix(rng, 2, 4);
    const auto [loss, grad] = loss_and_grad(net, params, x, CostSpec::square(y));
    const Matrix a = layers::layer_weight(net.layers[0], params.blocks[0]);
    const Matrix expect = (2.0 / 4.0) * (a * x - y) * x.transpose();
    CHECK(loss == doctest::Approx((a * x - y).squaredNorm() / 4.0));
    CHECK((grad - numerics::vec_rows(expect)).cwiseAbs().maxCoeff() < 1e-12);

    // Deep nonlinear network against finite differences, both costs.
    const auto resnet = network::make_normalised_resnet({4, 3, 3}, 3);
    const auto p = network::init_params(resnet, 9);
    const Matrix xr = random_matrix(rng, 4, 3);
    Matrix yce = Matrix::Zero(3, 3);
    for (int j = 0; j < 3; ++j) yce(j % 3, j) = 1.0;
    for (const auto& cost :
         {CostSpec::square(random_matrix(rng, 3, 3)), CostSpec::cross_entropy(yce)}) {
        const auto [l0, g] = loss_and_grad(resnet, p, xr, cost);
        (void)l0;
        const Matrix fd = numerics::finite_diff_jacobian(
            [&](const Vector& theta) {
                Vector out(1);
                out << loss_and_grad(resnet, ParamState::from_flat(resnet, theta), xr,
                                     cost)
                           .first;
                return out;
            },
            p.flat());
        CHECK((g.transpose() - fd).cwiseAbs().maxCoeff() < 1e-5);
    }
}

TEST_CASE("gd_train: one exact step and scalar quadratic convergence") {
    // Scalar linear model, N = 1: loss (a x - y)^2, beta = 2 x^2. With
    // eta = 1 / (2 x^2) gradient descent converges in one step.
    NetworkSpec net;
    net.N = 1;
    net.layers = {layers::affine(1, 1, false)};
    Matrix x(1, 1), y(1, 1);
    x << 2.0;
    y << 6.0;
    ParamState p0;
    p0.blocks = {Vector::Ones(1)};
    GdOptions opt;
    opt.eta = 1.0 / 8.0;
    opt.steps = 3;
    const auto trace = gd_train(net, p0, x, CostSpec::square(y), opt);
    REQUIRE(trace.steps.size() == 3);
    CHECK(trace.steps[0].loss == doctest::Approx(16.0));
    CHECK(trace.steps[1].loss == doctest::Approx(0.0));
    CHECK(trace.steps[2].loss == doctest::Approx(0.0));
    // PL diagnostics: for least squares with full-rank X, residual >= 0.
    CHECK(trace.steps[0].pl_residual >= -1e-10);
    CHECK(trace.steps[0].mu_t == doctest::Approx(4.0 * 4.0));  // (4/N) lambda, lambda = x^2

    // Auto step size picks eta <= 1 / beta and still converges.
    GdOptions auto_opt;
    auto_opt.eta = 0.0;
    auto_opt.steps = 60;
    const auto auto_trace = gd_train(net, p0, x, CostSpec::square(y), auto_opt);
    CHECK(auto_trace.beta > 0.0);
    CHECK(auto_trace.eta == doctest::Approx(1.0 / auto_trace.beta));
    CHECK(auto_trace.steps.back().loss < 1e-12);
}

TEST_CASE("gd_train decreases the loss on a normalised resnet") {
    auto rng = make_rng(63);
    const auto net = network::make_normalised_resnet({4, 3, 3}, 3);
    const auto p0 = network::init_params(net, 11);
    const Matrix x =
        Eigen::HouseholderQR<Matrix>(random_matrix(rng, 4, 3)).householderQ() *
        Matrix::Identity(4, 3);
    const Matrix y = 0.5 * random_matrix(rng, 3, 3);
    GdOptions opt;
    opt.steps = 50;
    const auto trace = gd_train(net, p0, x, CostSpec::square(y), opt);
    CHECK(trace.steps.back().loss < 0.5 * trace.steps.front().loss);
    for (const auto& s : trace.steps) {
        CHECK(s.lambda_df > 0.0);
        CHECK(s.pl_residual >= -1e-9);
    }
}

TEST_CASE("convergence_certificate: constant-mu geometric decay") {
    // Synthetic trace: loss_t = (1 - mu alpha)^t with mu alpha = 0.25.
    TrainTrace trace;
    trace.loss_star = 0.0;
    const double eta = 0.5, beta = 1.0;
    const double alpha = eta * (1.0 - 0.5 * beta * eta);  // 0.375
    const double mu = 0.25 / alpha;
    for (std::size_t t = 0; t < 20; ++t) {
        TrainStep s;
        s.step = t;
        s.loss = std::pow(0.75, static_cast<double>(t));
        s.mu_t = mu;
        trace.steps.push_back(s);
    }
    const auto rep = convergence_certificate(trace, eta, beta);
    CHECK(rep.alpha == doctest::Approx(alpha));
    CHECK(rep.all_hold);
    for (const auto& s : rep.steps) {
        CHECK(s.product_bound ==
              doctest::Approx(std::pow(0.75, static_cast<double>(s.step))));
        CHECK(!s.vacuous);
        CHECK(s.log_partial_sum <= 1e-15);
    }

    // Slower realised decay than certified: the bound must fail somewhere.
    TrainTrace slow = trace;
    for (auto& s : slow.steps)
        s.loss = std::pow(0.9, static_cast<double>(s.step));
    CHECK(!convergence_certificate(slow, eta, beta).all_hold);
}

TEST_CASE("convergence_certificate: decaying mu and stalled mu") {
    // mu_t = t^{-3/4}: sum mu_t alpha diverges, so the log partial sums head to
    // -infinity even though each factor tends to 1.
    TrainTrace trace;
    const double eta = 0.1, beta = 1.0;
    const double alpha = eta * (1.0 - 0.5 * beta * eta);
    for (std::size_t t = 0; t < 5000; ++t) {
        TrainStep s;
        s.step = t;
        s.mu_t = t == 0 ? 1.0 : std::pow(static_cast<double>(t), -0.75);
        s.loss = 0.0;  // only the product path is under test
        trace.steps.push_back(s);
    }
    const auto rep = convergence_certificate(trace, eta, beta);
    double expect = 0.0;
    for (std::size_t t = 0; t + 1 < 5000; ++t)
        expect += std::log(1.0 - trace.steps[t].mu_t * alpha);
    CHECK(rep.steps.back().log_partial_sum == doctest::Approx(expect).epsilon(1e-10));
    CHECK(rep.steps.back().log_partial_sum < rep.steps[100].log_partial_sum);

    // mu_t = 0: the product bound stalls at the initial gap.
    TrainTrace stall;
    for (std::size_t t = 0; t < 10; ++t) {
        TrainStep s;
        s.step = t;
        s.loss = 2.0;
        stall.steps.push_back(s);
    }
    const auto srep = convergence_certificate(stall, eta, beta);
    for (const auto& s : srep.steps) CHECK(s.product_bound == doctest::Approx(2.0));
    CHECK(srep.all_hold);

    // Vacuous flag when mu alpha >= 1.
    TrainTrace big;
    TrainStep s;
    s.mu_t = 2.0 / alpha;
    s.loss = 1.0;
    big.steps.push_back(s);
    CHECK(convergence_certificate(big, eta, beta).steps[0].vacuous);

    CHECK_THROWS_AS(convergence_certificate(TrainTrace{}, eta, beta),
                    std::invalid_argument);
}

TEST_CASE("worst_case_euler tracks the analytic flow") {
    const auto res = worst_case_euler(1.0, 0.1, 0.01, 200000);
    REQUIRE(res.r.size() == 200001);
    CHECK(res.r.front() == 1.0);
    // Monotone increasing and unbounded in practice.
    for (std::size_t t = 1; t < res.r.size(); t += 997)
        CHECK(res.r[t] > res.r[t - 1]);
    CHECK(res.r.back() > std::pow(4.0 * 0.1 * 0.01 * 200000.0 + 1.0, 0.25) * 0.9);
    // Euler with a small step hugs r(t) = (4 C eps t + 1)^{1/4}.
    CHECK(res.max_flow_deviation < 0.05);
    // mu curve decays like t^{-3/4} on the tail.
    CHECK(res.fitted_slope > -0.80);
    CHECK(res.fitted_slope < -0.70);
    // mu curve matches its definition pointwise.
    for (std::size_t t = 0; t < res.r.size(); t += 997) {
        const double r = res.r[t];
        CHECK(res.mu_curve[t] == doctest::Approx(0.1 * std::pow(0.1 + r * r, -1.5)));
    }

    CHECK_THROWS_AS(worst_case_euler(0.0, 0.1, 0.01, 10), std::invalid_argument);
    CHECK_THROWS_AS(worst_case_euler(1.0, -1.0, 0.01, 10), std::invalid_argument);
}
