// Command-line front end: spectrum experiments, training runs, derivative
// checks, the worst-case Euler analysis and bound reports, all driven by a
// JSON config with flag overrides and emitting CSV/SVG artifacts.

#include <CLI11.hpp>
#include <json.hpp>

#include "mps/experiments.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mps;

namespace {

struct CommonOpts {
    std::string config_path;
    std::optional<unsigned> seed;
    std::string out = "out";
    std::optional<std::size_t> trials;
    std::optional<std::size_t> bins;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "JSON config file");
    cmd->add_option("--seed", o.seed, "Run seed (overrides config)");
    cmd->add_option("--out", o.out, "Output directory");
    cmd->add_option("--trials", o.trials, "Trial count (overrides config)");
    cmd->add_option("--bins", o.bins, "Histogram bin count (overrides config)");
}

json load_config(const CommonOpts& o) {
    if (o.config_path.empty()) return json::object();
    std::ifstream f(o.config_path);
    if (!f) throw std::runtime_error("cannot open config " + o.config_path);
    json j;
    f >> j;
    return j;
}

template <typename T>
T cfg_get(const json& j, const std::string& key, T fallback) {
    if (j.contains(key)) return j.at(key).get<T>();
    return fallback;
}

unsigned effective_seed(const CommonOpts& o, const json& cfg) {
    if (o.seed) return *o.seed;
    return cfg_get<unsigned>(cfg, "seed", 0u);
}

std::string out_file(const CommonOpts& o, const std::string& stem, unsigned seed,
                     const std::string& ext) {
    fs::create_directories(o.out);
    return (fs::path(o.out) / (stem + "_seed" + std::to_string(seed) + "." + ext))
        .string();
}

/// Failed-assertion exit for verification subcommands.
int fail(const std::string& assertion) {
    std::cerr << "FAILED ASSERTION: " << assertion << "\n";
    return 1;
}

network::NetworkSpec network_from_config(const json& cfg, Eigen::Index n) {
    if (cfg.contains("network")) return network::from_json(cfg.at("network"));
    std::vector<Eigen::Index> dims{8, 8, 8, 4};
    if (cfg.contains("dims")) {
        dims.clear();
        for (const auto& d : cfg.at("dims")) dims.push_back(d.get<Eigen::Index>());
    }
    return network::make_normalised_resnet(
        dims, n, cfg_get<double>(cfg, "epsilon", layers::kDefaultEpsilon),
        cfg_get<double>(cfg, "delta", layers::kDefaultDelta),
        cfg_get<double>(cfg, "first_scale", 1.0));
}

experiments::DataKind data_kind_from_config(const json& cfg) {
    const auto name = cfg_get<std::string>(cfg, "data_kind", "gaussian_orthogonalised");
    if (name == "gaussian_orthogonalised")
        return experiments::DataKind::GaussianOrthogonalised;
    if (name == "synthetic_images") return experiments::DataKind::SyntheticImages;
    throw std::runtime_error("unknown data_kind " + name);
}

// Subcommands ---------------------------------------------------------------

int run_identity_shift(const CommonOpts& o) {
    const json cfg = load_config(o);
    const unsigned seed = effective_seed(o, cfg);
    const auto n = cfg_get<Eigen::Index>(cfg, "n", 500);
    const std::size_t trials = o.trials.value_or(cfg_get<std::size_t>(cfg, "trials", 10));
    const std::size_t bins = o.bins.value_or(cfg_get<std::size_t>(cfg, "bins", 40));

    const auto res = experiments::identity_shift_experiment(n, trials, seed, bins);
    experiments::emit_spectrum_csv(res.spectrum_plain,
                                   out_file(o, "identity_shift_plain", seed, "csv"));
    experiments::emit_spectrum_csv(res.spectrum_shifted,
                                   out_file(o, "identity_shift_shifted", seed, "csv"));
    experiments::emit_svg_histogram(res.spectrum_plain,
                                    out_file(o, "identity_shift_plain", seed, "svg"),
                                    "Singular values of A");
    experiments::emit_svg_histogram(res.spectrum_shifted,
                                    out_file(o, "identity_shift_shifted", seed, "svg"),
                                    "Singular values of Id + A");
    std::vector<experiments::CsvRow> rows;
    for (std::size_t t = 0; t < trials; ++t)
        rows.push_back({std::to_string(t),
                        experiments::fmt_double(res.trial_means_plain[t]),
                        experiments::fmt_double(res.trial_means_shifted[t]),
                        std::to_string(seed)});
    rows.push_back({"mean", experiments::fmt_double(res.mean_plain),
                    experiments::fmt_double(res.mean_shifted), std::to_string(seed)});
    experiments::emit_csv({"trial", "mean_sv_plain", "mean_sv_shifted", "seed"}, rows,
                          out_file(o, "identity_shift_summary", seed, "csv"));
    std::cout << "identity-shift: mean sv(A) = " << res.mean_plain
              << ", mean sv(Id + A) = " << res.mean_shifted << "\n";
    return 0;
}

int run_layer_spectra(const CommonOpts& o) {
    const json cfg = load_config(o);
    const unsigned seed = effective_seed(o, cfg);
    experiments::LayerSpectraConfig lcfg;
    if (cfg.contains("dims")) {
        lcfg.dims.clear();
        for (const auto& d : cfg.at("dims")) lcfg.dims.push_back(d.get<Eigen::Index>());
    }
    lcfg.N = cfg_get<Eigen::Index>(cfg, "N", lcfg.N);
    lcfg.epsilon = cfg_get<double>(cfg, "epsilon", lcfg.epsilon);
    lcfg.eta = cfg_get<double>(cfg, "eta", lcfg.eta);
    lcfg.iterations = cfg_get<std::size_t>(cfg, "iterations", lcfg.iterations);
    lcfg.init_stddev = cfg_get<double>(cfg, "init_stddev", lcfg.init_stddev);
    lcfg.skip_init_scale = cfg_get<double>(cfg, "skip_init_scale", lcfg.skip_init_scale);
    lcfg.bins = o.bins.value_or(cfg_get<std::size_t>(cfg, "bins", lcfg.bins));

    const auto results = experiments::layer_spectra_experiment(lcfg, seed);
    std::vector<experiments::LineSeries> loss_series;
    std::vector<experiments::CsvRow> summary;
    for (const auto& r : results) {
        const std::string name = experiments::variant_name(r.variant);
        experiments::emit_spectrum_csv(
            r.spectrum, out_file(o, "layer_spectra_" + name, seed, "csv"));
        experiments::emit_svg_histogram(
            r.spectrum, out_file(o, "layer_spectra_" + name, seed, "svg"),
            "Block Jacobian spectrum: " + name);
        loss_series.push_back({name, r.loss_curve});
        summary.push_back({name, experiments::fmt_double(r.spectrum.mean),
                           experiments::fmt_double(r.loss_curve.back()),
                           std::to_string(seed)});
        std::cout << "layer-spectra: " << name << " mean sv = " << r.spectrum.mean
                  << ", final loss = " << r.loss_curve.back() << "\n";
    }
    experiments::emit_csv({"variant", "mean_sv", "final_loss", "seed"}, summary,
                          out_file(o, "layer_spectra_summary", seed, "csv"));
    std::vector<experiments::CsvRow> loss_rows;
    for (std::size_t t = 0; t < results[0].loss_curve.size(); ++t)
        loss_rows.push_back({std::to_string(t),
                             experiments::fmt_double(results[0].loss_curve[t]),
                             experiments::fmt_double(results[1].loss_curve[t]),
                             experiments::fmt_double(results[2].loss_curve[t])});
    experiments::emit_csv({"iteration", "chain", "res", "resavg"}, loss_rows,
                          out_file(o, "layer_spectra_loss", seed, "csv"));
    experiments::emit_svg_lines(loss_series, out_file(o, "layer_spectra_loss", seed, "svg"),
                                "Training loss by architecture", "iteration", "loss");
    return 0;
}

int run_train(const CommonOpts& o) {
    const json cfg = load_config(o);
    const unsigned seed = effective_seed(o, cfg);
    const auto n = cfg_get<Eigen::Index>(cfg, "N", 4);
    const auto net = network_from_config(cfg, n);
    const auto data = experiments::gen_data(net.d_in(), n, data_kind_from_config(cfg),
                                            seed);

    const auto cost_name = cfg_get<std::string>(cfg, "cost", "square");
    training::CostSpec cost = [&] {
        if (cost_name == "square") {
            std::mt19937_64 rng(seed + 1);
            std::normal_distribution<double> gauss(0.0, 1.0);
            Matrix y(net.d_out(), n);
            for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = gauss(rng);
            y *= cfg_get<double>(cfg, "label_scale", 1.0);
            return training::CostSpec::square(y);
        }
        if (cost_name == "cross_entropy")
            return training::CostSpec::cross_entropy(
                experiments::cyclic_one_hot(net.d_out(), n));
        throw std::runtime_error("unknown cost " + cost_name);
    }();

    training::GdOptions opt;
    opt.eta = cfg_get<double>(cfg, "eta", 0.0);
    opt.steps = cfg_get<std::size_t>(cfg, "steps", 200);
    opt.diag_every = cfg_get<std::size_t>(cfg, "diag_every", 1);
    const auto params0 =
        network::init_params(net, seed, cfg_get<double>(cfg, "init_stddev", 1.0));
    const auto trace = training::gd_train(net, params0, data.X, cost, opt);
    experiments::emit_trace_csv(trace, out_file(o, "train_trace", seed, "csv"));

    std::vector<double> losses;
    for (const auto& s : trace.steps) losses.push_back(s.loss);
    experiments::emit_svg_lines({{"loss", losses}},
                                out_file(o, "train_loss", seed, "svg"),
                                "Training loss", "step", "loss");

    if (cost_name == "square" && trace.beta > 0.0) {
        const auto cert = training::convergence_certificate(trace, trace.eta, trace.beta);
        std::vector<experiments::CsvRow> rows;
        for (const auto& s : cert.steps)
            rows.push_back({std::to_string(s.step),
                            experiments::fmt_double(s.product_bound),
                            experiments::fmt_double(s.realised_gap),
                            s.bound_holds ? "1" : "0", s.vacuous ? "1" : "0",
                            experiments::fmt_double(s.log_partial_sum)});
        experiments::emit_csv({"step", "product_bound", "realised_gap", "bound_holds",
                               "vacuous", "log_partial_sum"},
                              rows, out_file(o, "train_certificate", seed, "csv"));
        if (!cert.all_hold) return fail("train: certificate product bound violated");
    }
    std::cout << "train: eta = " << trace.eta << ", final loss = "
              << trace.steps.back().loss << "\n";
    return 0;
}

int run_gradcheck(const CommonOpts& o) {
    const json cfg = load_config(o);
    const unsigned seed = effective_seed(o, cfg);
    const std::size_t trials = o.trials.value_or(cfg_get<std::size_t>(cfg, "trials", 10));
    const double tol = cfg_get<double>(cfg, "tolerance", 1e-6);

    std::vector<network::NetworkSpec> zoo;
    {
        network::NetworkSpec plain;
        plain.N = 3;
        plain.layers = {layers::affine(4, 3), layers::nonlinearity(3),
                        layers::affine(3, 2, false)};
        zoo.push_back(plain);
        zoo.push_back(network::make_normalised_resnet({5, 4, 4, 3}, 3));
        network::NetworkSpec bn;
        bn.N = 3;
        bn.layers = {layers::norm_affine(4, 4, layers::NormKind::Entry, 0.1, 1.0),
                     layers::batchnorm(4, 0.1), layers::nonlinearity(4),
                     layers::norm_affine(4, 2, layers::NormKind::Weight, 0.1, 0.9, true)};
        zoo.push_back(bn);
    }

    std::vector<experiments::CsvRow> rows;
    double worst = 0.0;
    for (std::size_t net_i = 0; net_i < zoo.size(); ++net_i) {
        const auto& net = zoo[net_i];
        for (std::size_t t = 0; t < trials; ++t) {
            const unsigned s = seed + 1000 * static_cast<unsigned>(net_i) +
                               static_cast<unsigned>(t);
            const auto params = network::init_params(net, s);
            const auto data = experiments::gen_data(
                net.d_in(), net.N, experiments::DataKind::GaussianOrthogonalised, s);
            const auto df = network::pf_derivative(net, params, data.X);
            const Matrix fd = numerics::finite_diff_jacobian(
                [&](const Vector& theta) {
                    return numerics::vec_rows(
                        network::pf_map(net, network::ParamState::from_flat(net, theta),
                                        data.X)
                            .first);
                },
                params.flat());
            const double err = (df.DF - fd).cwiseAbs().maxCoeff();
            worst = std::max(worst, err);
            rows.push_back({std::to_string(net_i), std::to_string(t),
                            experiments::fmt_double(err), std::to_string(s)});
        }
    }
    experiments::emit_csv({"network", "trial", "max_abs_error", "seed"}, rows,
                          out_file(o, "gradcheck", seed, "csv"));
    std::cout << "gradcheck: worst max-abs error = " << worst << "\n";
    if (worst >= tol)
        return fail("gradcheck: analytic DF deviates from finite differences by " +
                    experiments::fmt_double(worst));
    return 0;
}

int run_worst_case(const CommonOpts& o) {
    const json cfg = load_config(o);
    const unsigned seed = effective_seed(o, cfg);
    const double c = cfg_get<double>(cfg, "C", 1.0);
    const double eps = cfg_get<double>(cfg, "epsilon", 1.0);
    const double eta = cfg_get<double>(cfg, "eta", 1.0);
    const auto t_max = cfg_get<std::size_t>(cfg, "T", 100000);
    const double dev_cap = cfg_get<double>(cfg, "deviation_cap", 1.0);

    const auto res = training::worst_case_euler(c, eps, eta, t_max);
    std::vector<experiments::CsvRow> rows;
    const std::size_t stride = std::max<std::size_t>(1, t_max / 10000);
    for (std::size_t t = 0; t < res.r.size(); t += stride)
        rows.push_back({std::to_string(t), experiments::fmt_double(res.r[t]),
                        experiments::fmt_double(res.mu_curve[t])});
    experiments::emit_csv({"t", "r", "mu_lower_bound"}, rows,
                          out_file(o, "worst_case", seed, "csv"));
    std::vector<double> log_mu;
    for (std::size_t t = 1; t < res.mu_curve.size(); t += stride)
        log_mu.push_back(std::log(res.mu_curve[t]));
    experiments::emit_svg_lines({{"log mu_t", log_mu}},
                                out_file(o, "worst_case", seed, "svg"),
                                "Worst-case decay of the PL lower bound", "t (strided)",
                                "log mu_t");
    std::cout << "worst-case: fitted slope = " << res.fitted_slope
              << ", max flow deviation = " << res.max_flow_deviation << "\n";
    if (res.max_flow_deviation > dev_cap)
        return fail("worst-case: Euler iterates deviate from the analytic flow by " +
                    experiments::fmt_double(res.max_flow_deviation));
    if (res.fitted_slope < -0.80 || res.fitted_slope > -0.70)
        return fail("worst-case: fitted decay slope " +
                    experiments::fmt_double(res.fitted_slope) +
                    " outside [-0.80, -0.70]");
    return 0;
}

int run_bounds_report(const CommonOpts& o) {
    const json cfg = load_config(o);
    const unsigned seed = effective_seed(o, cfg);
    const auto n = cfg_get<Eigen::Index>(cfg, "N", 4);
    const auto net = network_from_config(cfg, n);
    const double radius = cfg_get<double>(cfg, "data_ball_radius", 1.0);
    const std::size_t trials = o.trials.value_or(cfg_get<std::size_t>(cfg, "trials", 50));

    std::vector<bounds::BoundFactor> all;
    std::vector<experiments::CsvRow> rows;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        for (const auto& f : bounds::layer_bound_constants(net.layers[l], radius)) {
            all.push_back(f);
            rows.push_back({std::to_string(l), f.name, experiments::fmt_double(f.b),
                            experiments::fmt_double(f.c), f.conditional ? "1" : "0"});
        }
    }
    const auto ledger = bounds::compose_bounds(all);
    rows.push_back({"composed", "network", experiments::fmt_double(ledger.composed_bound),
                    experiments::fmt_double(ledger.composed_lipschitz), "0"});
    experiments::emit_csv({"layer", "factor", "bound", "lipschitz", "conditional"}, rows,
                          out_file(o, "bounds_report", seed, "csv"));
    std::cout << "bounds-report: composed bound = " << ledger.composed_bound
              << ", composed Lipschitz = " << ledger.composed_lipschitz << "\n";

    // Verification: sampled layer Jacobians never exceed their certified caps.
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> scale_draw(-3.0, 3.0);
    for (std::size_t t = 0; t < trials; ++t) {
        for (const auto& l : net.layers) {
            const double cap = bounds::certified_J_cap(l);
            if (!std::isfinite(cap)) continue;
            const double s = std::pow(10.0, scale_draw(rng));
            Vector p(layers::param_count(l));
            for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = s * gauss(rng);
            Matrix x(l.d_in, n);
            for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = s * gauss(rng);
            const double got = numerics::largest_sv(layers::layer_J(l, p, x));
            if (got > cap + 1e-9)
                return fail("bounds-report: sampled Jacobian norm " +
                            experiments::fmt_double(got) + " exceeds certified cap " +
                            experiments::fmt_double(cap));
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multilayer parameterised systems: derivatives, bounds, training "
                 "certificates and spectrum experiments"};
    app.require_subcommand(1);

    CommonOpts opts;
    auto* identity_shift =
        app.add_subcommand("identity-shift", "Spectra of A versus Id + A");
    auto* layer_spectra =
        app.add_subcommand("layer-spectra", "Block Jacobian spectra by architecture");
    auto* train = app.add_subcommand("train", "Gradient descent with PL diagnostics");
    auto* gradcheck =
        app.add_subcommand("gradcheck", "Verify analytic DF against finite differences");
    auto* worst_case =
        app.add_subcommand("worst-case", "Euler iterates of the worst-case flow");
    auto* bounds_report =
        app.add_subcommand("bounds-report", "Certified bound ledger for a network");
    for (auto* cmd : {identity_shift, layer_spectra, train, gradcheck, worst_case,
                      bounds_report})
        add_common(cmd, opts);

    CLI11_PARSE(app, argc, argv);

    try {
        if (identity_shift->parsed()) return run_identity_shift(opts);
        if (layer_spectra->parsed()) return run_layer_spectra(opts);
        if (train->parsed()) return run_train(opts);
        if (gradcheck->parsed()) return run_gradcheck(opts);
        if (worst_case->parsed()) return run_worst_case(opts);
        if (bounds_report->parsed()) return run_bounds_report(opts);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
