#pragma once

// Experiment harness: seeded synthetic data, the identity-shift spectrum
// experiment, the chain/res/resavg layer-spectra comparison, and deterministic
// CSV / SVG emission.

#include "mps/network.hpp"
#include "mps/numerics.hpp"
#include "mps/training.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mps::experiments {

using layers::LayerSpec;
using layers::SkipKind;
using numerics::SpectrumReport;

enum class DataKind { GaussianOrthogonalised, SyntheticImages };

struct SyntheticDataset {
    Matrix X;  // d0 x N, linearly independent columns
    unsigned seed = 0;
};

namespace detail {

inline bool passes_rank_test(const Matrix& x) {
    return numerics::smallest_sv(x) > 1e-8 * numerics::largest_sv(x);
}

inline Matrix gaussian_orthogonalised(Eigen::Index d0, Eigen::Index n,
                                      std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix g(d0, n);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = gauss(rng);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(d0, n);
    return q;
}

/// Smooth low-frequency patterns on a square grid, flattened columnwise.
inline Matrix synthetic_images(Eigen::Index d0, Eigen::Index n,
                               std::mt19937_64& rng) {
    const auto side = static_cast<Eigen::Index>(
        std::ceil(std::sqrt(static_cast<double>(d0))));
    std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
    std::uniform_int_distribution<int> freq(1, 3);
    std::normal_distribution<double> amp(0.0, 1.0);
    Matrix x(d0, n);
    for (Eigen::Index col = 0; col < n; ++col) {
        x.col(col).setZero();
        // A mixture of separable sinusoids per image; on small grids single
        // terms alias into a low-rank family, so superpose a few and add a
        // tiny jitter to keep sampled columns numerically independent.
        for (int term = 0; term < 4; ++term) {
            const int fu = freq(rng), fv = freq(rng);
            const double pu = phase(rng), pv = phase(rng), a = amp(rng);
            for (Eigen::Index k = 0; k < d0; ++k) {
                const double u =
                    static_cast<double>(k % side) / static_cast<double>(side);
                const double v =
                    static_cast<double>(k / side) / static_cast<double>(side);
                x(k, col) += a * std::sin(2.0 * M_PI * fu * u + pu) *
                             std::cos(2.0 * M_PI * fv * v + pv);
            }
        }
        for (Eigen::Index k = 0; k < d0; ++k) x(k, col) += 1e-3 * amp(rng);
        x.col(col) /= std::max(x.col(col).norm(), 1e-12);
    }
    return x;
}

}  // namespace detail

inline SyntheticDataset gen_data(Eigen::Index d0, Eigen::Index n, DataKind kind,
                                 unsigned seed) {
    if (n > d0) throw std::invalid_argument("gen_data: N > d0");
    std::mt19937_64 rng(seed);
    constexpr int kRetryCap = 16;
    for (int attempt = 0; attempt < kRetryCap; ++attempt) {
        Matrix x = kind == DataKind::GaussianOrthogonalised
                       ? detail::gaussian_orthogonalised(d0, n, rng)
                       : detail::synthetic_images(d0, n, rng);
        if (detail::passes_rank_test(x)) return {std::move(x), seed};
    }
    throw NumericalError("gen_data: rank test failed after retry cap");
}

/// Cyclic one-hot labels: column i belongs to class i mod d_L. With
/// orthogonalised data the classes are linearly separable by construction.
inline Matrix cyclic_one_hot(Eigen::Index d_l, Eigen::Index n) {
    Matrix y = Matrix::Zero(d_l, n);
    for (Eigen::Index j = 0; j < n; ++j) y(j % d_l, j) = 1.0;
    return y;
}

// Identity shift ------------------------------------------------------------

struct IdentityShiftResult {
    SpectrumReport spectrum_plain;    // pooled over trials
    SpectrumReport spectrum_shifted;  // Id + A, pooled over trials
    std::vector<double> trial_means_plain;
    std::vector<double> trial_means_shifted;
    double mean_plain = 0.0;
    double mean_shifted = 0.0;
};

inline SpectrumReport pooled_report(std::vector<double> values, std::size_t bins) {
    std::sort(values.begin(), values.end(), std::greater<double>());
    SpectrumReport r;
    r.singular_values = std::move(values);
    r.bin_count = bins;
    r.mean = std::accumulate(r.singular_values.begin(), r.singular_values.end(), 0.0) /
             static_cast<double>(r.singular_values.size());
    r.min = r.singular_values.back();
    r.histogram =
        numerics::histogram_bins(r.singular_values, bins, r.singular_values.front());
    return r;
}

/// Singular value spectra of A versus Id + A for A with iid entries uniform on
/// (-1/sqrt(n), 1/sqrt(n)).
inline IdentityShiftResult identity_shift_experiment(Eigen::Index n,
                                                     std::size_t trials,
                                                     unsigned seed,
                                                     std::size_t bins) {
    if (n < 2) throw std::invalid_argument("identity_shift_experiment: n < 2");
    std::mt19937_64 rng(seed);
    const double lim = 1.0 / std::sqrt(static_cast<double>(n));
    std::uniform_real_distribution<double> unif(-lim, lim);
    IdentityShiftResult res;
    std::vector<double> pool_a, pool_s;
    for (std::size_t t = 0; t < trials; ++t) {
        Matrix a(n, n);
        for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = unif(rng);
        const auto sv_a = numerics::singular_values(a);
        const auto sv_s = numerics::singular_values(Matrix::Identity(n, n) + a);
        auto mean = [](const std::vector<double>& v) {
            return std::accumulate(v.begin(), v.end(), 0.0) /
                   static_cast<double>(v.size());
        };
        res.trial_means_plain.push_back(mean(sv_a));
        res.trial_means_shifted.push_back(mean(sv_s));
        pool_a.insert(pool_a.end(), sv_a.begin(), sv_a.end());
        pool_s.insert(pool_s.end(), sv_s.begin(), sv_s.end());
    }
    res.spectrum_plain = pooled_report(std::move(pool_a), bins);
    res.spectrum_shifted = pooled_report(std::move(pool_s), bins);
    auto mean = [](const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    res.mean_plain = mean(res.trial_means_plain);
    res.mean_shifted = mean(res.trial_means_shifted);
    return res;
}

// Layer spectra -------------------------------------------------------------

enum class ArchVariant { Chain, Res, ResAvg };

inline const char* variant_name(ArchVariant v) {
    switch (v) {
        case ArchVariant::Chain: return "chain";
        case ArchVariant::Res: return "res";
        case ArchVariant::ResAvg: return "resavg";
    }
    return "?";
}

struct LayerSpectraConfig {
    std::vector<Eigen::Index> dims{32, 16, 16, 8};
    Eigen::Index N = 16;
    double epsilon = layers::kDefaultEpsilon;
    double eta = 0.1;
    std::size_t iterations = 10;
    std::size_t bins = 30;
    double init_stddev = 1.0;
    double skip_init_scale = 0.3;  // multiplies the 1/sqrt(fan-in) skip stddev
};

struct VariantResult {
    ArchVariant variant;
    SpectrumReport spectrum;  // block Jacobian spectra pooled over iterations
    std::vector<double> loss_curve;
};

/// One residual-block-scope layer: norm-affine + tanh + batchnorm branch.
/// Chain has no skip; Res adds an identity skip (equal dims) or a trainable
/// dense skip (dim-changing, the 1x1-convolution analogue); ResAvg adds a
/// scaled average-pool partial isometry on the dim-changing skips.
inline network::NetworkSpec build_variant(const LayerSpectraConfig& cfg,
                                          ArchVariant v) {
    network::NetworkSpec net;
    net.N = cfg.N;
    for (std::size_t l = 1; l < cfg.dims.size(); ++l) {
        const Eigen::Index di = cfg.dims[l - 1];
        const Eigen::Index dl = cfg.dims[l];
        std::vector<LayerSpec> branch{
            layers::norm_affine(di, dl, layers::NormKind::Entry, cfg.epsilon, 1.0),
            layers::nonlinearity(dl, layers::PhiKind::Tanh),
            layers::batchnorm(dl, cfg.epsilon)};
        SkipKind skip = SkipKind::None;
        bool dense = false;
        if (v != ArchVariant::Chain) {
            if (di == dl) {
                skip = SkipKind::Identity;
            } else {
                dense = true;
                skip = v == ArchVariant::ResAvg ? SkipKind::AvgPool : SkipKind::None;
            }
        }
        net.layers.push_back(layers::residual(std::move(branch), skip, dense));
    }
    net.validate_shapes();
    return net;
}

/// Shared initialisation across variants: branch blocks are drawn from the
/// base seed, dense skip weights from a separate stream so Res and ResAvg get
/// identical skips and every variant gets identical branches.
inline network::ParamState init_variant_params(const network::NetworkSpec& net,
                                               unsigned seed, double stddev,
                                               double skip_init_scale = 1.0) {
    std::mt19937_64 branch_rng(seed);
    std::mt19937_64 skip_rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::normal_distribution<double> gauss(0.0, stddev);
    network::ParamState st;
    for (const auto& l : net.layers) {
        Eigen::Index bp = 0;
        for (const auto& b : l.branch) bp += layers::param_count(b);
        Vector block(layers::param_count(l));
        for (Eigen::Index i = 0; i < bp; ++i) block(i) = gauss(branch_rng);
        // Dense skips are plain affine maps; scale by 1/sqrt(fan-in) so the
        // skip path starts near-isometric instead of amplifying by sqrt(d_in).
        const double skip_scale =
            skip_init_scale / std::sqrt(static_cast<double>(l.d_in));
        for (Eigen::Index i = bp; i < block.size(); ++i)
            block(i) = skip_scale * gauss(skip_rng);
        st.blocks.push_back(std::move(block));
    }
    return st;
}

inline std::vector<VariantResult> layer_spectra_experiment(
    const LayerSpectraConfig& cfg, unsigned seed) {
    const auto data = gen_data(cfg.dims.front(), cfg.N,
                               DataKind::SyntheticImages, seed);
    std::mt19937_64 label_rng(seed + 1);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix y(cfg.dims.back(), cfg.N);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = gauss(label_rng);
    const auto cost = training::CostSpec::square(y);

    std::vector<VariantResult> results;
    for (ArchVariant v : {ArchVariant::Chain, ArchVariant::Res, ArchVariant::ResAvg}) {
        const auto net = build_variant(cfg, v);
        Vector theta =
            init_variant_params(net, seed, cfg.init_stddev, cfg.skip_init_scale).flat();
        std::vector<double> pooled_sv;
        std::vector<double> losses;
        for (std::size_t it = 0; it < cfg.iterations; ++it) {
            const auto st = network::ParamState::from_flat(net, theta);
            const auto acts = layers::chain_forward_trace(net.layers, theta, data.X);
            Eigen::Index off = 0;
            for (std::size_t l = 0; l < net.layers.size(); ++l) {
                const Eigen::Index p = layers::param_count(net.layers[l]);
                const auto sv = numerics::singular_values(
                    layers::layer_J(net.layers[l], theta.segment(off, p), acts[l]));
                pooled_sv.insert(pooled_sv.end(), sv.begin(), sv.end());
                off += p;
            }
            const auto [loss, grad] = training::loss_and_grad(net, st, data.X, cost);
            losses.push_back(loss);
            theta -= cfg.eta * grad;
        }
        VariantResult r;
        r.variant = v;
        r.spectrum = pooled_report(std::move(pooled_sv), cfg.bins);
        r.loss_curve = std::move(losses);
        results.push_back(std::move(r));
    }
    return results;
}

// CSV / SVG emission --------------------------------------------------------

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

/// RFC 4180: quote fields containing commas, quotes or newlines.
inline std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

using CsvRow = std::vector<std::string>;

inline void emit_csv(const std::vector<std::string>& header,
                     const std::vector<CsvRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("emit_csv: cannot open " + path);
    auto write_row = [&f](const CsvRow& row) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) f << ',';
            f << csv_escape(row[i]);
        }
        f << "\r\n";
    };
    write_row(header);
    for (const auto& r : rows) write_row(r);
}

inline void emit_trace_csv(const training::TrainTrace& trace, const std::string& path) {
    std::vector<CsvRow> rows;
    for (const auto& s : trace.steps)
        rows.push_back({std::to_string(s.step), fmt_double(s.loss),
                        fmt_double(s.grad_norm), fmt_double(s.lambda_df),
                        fmt_double(s.mu_t), fmt_double(s.pl_residual),
                        fmt_double(s.first_layer_norm)});
    emit_csv({"step", "loss", "grad_norm", "lambda_df", "mu_t", "pl_residual",
              "first_layer_norm"},
             rows, path);
}

inline void emit_spectrum_csv(const SpectrumReport& rep, const std::string& path) {
    std::vector<CsvRow> rows;
    for (const auto& b : rep.histogram)
        rows.push_back({fmt_double(b.lower), fmt_double(b.upper),
                        std::to_string(b.count)});
    emit_csv({"bin_lower", "bin_upper", "count"}, rows, path);
}

// Minimal standalone SVG 1.1 output, deterministic bytes for fixed input.

constexpr int kSvgW = 640;
constexpr int kSvgH = 420;
constexpr int kSvgMargin = 50;

inline void svg_open(std::ofstream& f, const std::string& title) {
    f << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\""
      << kSvgW << "\" height=\"" << kSvgH << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kSvgW / 2 << "\" y=\"24\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"16\">"
      << title << "</text>\n";
}

inline void svg_axes(std::ofstream& f, const std::string& xlabel,
                     const std::string& ylabel) {
    f << "<line x1=\"" << kSvgMargin << "\" y1=\"" << kSvgH - kSvgMargin
      << "\" x2=\"" << kSvgW - kSvgMargin << "\" y2=\"" << kSvgH - kSvgMargin
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << kSvgMargin << "\" y1=\"" << kSvgMargin << "\" x2=\""
      << kSvgMargin << "\" y2=\"" << kSvgH - kSvgMargin << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << kSvgW / 2 << "\" y=\"" << kSvgH - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
      << xlabel << "</text>\n"
      << "<text x=\"16\" y=\"" << kSvgH / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
         "transform=\"rotate(-90 16 "
      << kSvgH / 2 << ")\">" << ylabel << "</text>\n";
}

inline void emit_svg_histogram(const SpectrumReport& rep, const std::string& path,
                               const std::string& title) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("emit_svg_histogram: cannot open " + path);
    svg_open(f, title);
    svg_axes(f, "singular value", "count");
    std::size_t max_count = 1;
    for (const auto& b : rep.histogram) max_count = std::max(max_count, b.count);
    const double plot_w = kSvgW - 2.0 * kSvgMargin;
    const double plot_h = kSvgH - 2.0 * kSvgMargin;
    const double span = rep.histogram.back().upper - rep.histogram.front().lower;
    for (const auto& b : rep.histogram) {
        const double x = kSvgMargin + (b.lower - rep.histogram.front().lower) /
                                          span * plot_w;
        const double w = (b.upper - b.lower) / span * plot_w;
        const double h = plot_h * static_cast<double>(b.count) /
                         static_cast<double>(max_count);
        f << "<rect x=\"" << fmt_double(x) << "\" y=\""
          << fmt_double(kSvgH - kSvgMargin - h) << "\" width=\"" << fmt_double(w)
          << "\" height=\"" << fmt_double(h)
          << "\" fill=\"steelblue\" stroke=\"black\" stroke-width=\"0.5\"/>\n";
    }
    f << "</svg>\n";
}

struct LineSeries {
    std::string label;
    std::vector<double> values;
};

inline void emit_svg_lines(const std::vector<LineSeries>& series,
                           const std::string& path, const std::string& title,
                           const std::string& xlabel, const std::string& ylabel) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("emit_svg_lines: cannot open " + path);
    svg_open(f, title);
    svg_axes(f, xlabel, ylabel);
    double lo = 0.0, hi = 1.0;
    std::size_t n = 2;
    bool first = true;
    for (const auto& s : series)
        for (double v : s.values) {
            if (first) lo = hi = v, first = false;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            n = std::max(n, s.values.size());
        }
    if (hi <= lo) hi = lo + 1.0;
    const double plot_w = kSvgW - 2.0 * kSvgMargin;
    const double plot_h = kSvgH - 2.0 * kSvgMargin;
    const char* colors[] = {"steelblue", "crimson", "seagreen", "darkorange"};
    for (std::size_t si = 0; si < series.size(); ++si) {
        f << "<polyline fill=\"none\" stroke=\"" << colors[si % 4]
          << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < series[si].values.size(); ++i) {
            const double x = kSvgMargin + plot_w * static_cast<double>(i) /
                                              static_cast<double>(n - 1);
            const double y = kSvgH - kSvgMargin -
                             plot_h * (series[si].values[i] - lo) / (hi - lo);
            f << fmt_double(x) << ',' << fmt_double(y) << ' ';
        }
        f << "\"/>\n<text x=\"" << kSvgW - kSvgMargin + 4 << "\" y=\""
          << kSvgMargin + 16 * (si + 1) << "\" font-family=\"sans-serif\" "
          << "font-size=\"11\" fill=\"" << colors[si % 4] << "\">" << series[si].label
          << "</text>\n";
    }
    f << "</svg>\n";
}

}  // namespace mps::experiments
