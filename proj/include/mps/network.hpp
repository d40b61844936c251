#pragma once

// Multilayer composition: the parameter-function map F over a fixed data
// matrix, its derivative DF assembled blockwise by the chain rule, the
// regularity lower bound on lambda(DF), and hypothesis validators for
// normalised residual networks.

#include "mps/bounds.hpp"
#include "mps/layers.hpp"
#include "mps/numerics.hpp"

#include <json.hpp>

#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mps::network {

using layers::LayerKind;
using layers::LayerSpec;
using layers::NormKind;
using layers::PhiKind;
using layers::SkipKind;

struct NetworkSpec {
    std::vector<LayerSpec> layers;
    Eigen::Index N = 0;

    Eigen::Index d_in() const { return layers.front().d_in; }
    Eigen::Index d_out() const { return layers.back().d_out; }

    std::vector<Eigen::Index> dims() const {
        std::vector<Eigen::Index> d{d_in()};
        for (const auto& l : layers) d.push_back(l.d_out);
        return d;
    }

    Eigen::Index param_count() const {
        Eigen::Index p = 0;
        for (const auto& l : layers) p += layers::param_count(l);
        return p;
    }

    void validate_shapes() const {
        if (layers.empty()) throw std::invalid_argument("NetworkSpec: no layers");
        if (N < 1) throw std::invalid_argument("NetworkSpec: N < 1");
        for (std::size_t l = 1; l < layers.size(); ++l)
            if (layers[l].d_in != layers[l - 1].d_out)
                throw std::invalid_argument("NetworkSpec: dims do not chain at layer " +
                                            std::to_string(l));
    }
};

/// Per-layer parameter blocks theta_1 ... theta_L.
struct ParamState {
    std::vector<Vector> blocks;

    Vector flat() const {
        Eigen::Index total = 0;
        for (const auto& b : blocks) total += b.size();
        Vector v(total);
        Eigen::Index off = 0;
        for (const auto& b : blocks) {
            v.segment(off, b.size()) = b;
            off += b.size();
        }
        return v;
    }

    static ParamState from_flat(const NetworkSpec& net, const Vector& v) {
        if (v.size() != net.param_count())
            throw std::invalid_argument("ParamState: size mismatch");
        ParamState st;
        Eigen::Index off = 0;
        for (const auto& l : net.layers) {
            const Eigen::Index p = layers::param_count(l);
            st.blocks.push_back(v.segment(off, p));
            off += p;
        }
        return st;
    }
};

/// Gaussian init of all parameter blocks, deterministic per seed.
inline ParamState init_params(const NetworkSpec& net, unsigned seed,
                              double stddev = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, stddev);
    ParamState st;
    for (const auto& l : net.layers) {
        Vector b(layers::param_count(l));
        for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = gauss(rng);
        st.blocks.push_back(std::move(b));
    }
    return st;
}

struct ForwardTrace {
    std::vector<Matrix> activations;  // activations[0] = X, activations[L] = F
};

inline std::pair<Matrix, ForwardTrace> pf_map(const NetworkSpec& net,
                                              const ParamState& params,
                                              const Matrix& x) {
    net.validate_shapes();
    if (x.rows() != net.d_in() || x.cols() != net.N)
        throw std::invalid_argument("pf_map: data shape mismatch");
    ForwardTrace trace;
    trace.activations = layers::chain_forward_trace(net.layers, params.flat(), x);
    return {trace.activations.back(), trace};
}

struct PfDerivative {
    std::vector<Matrix> blocks;  // D_{theta_l} F, one per layer
    Matrix DF;                   // horizontal concatenation, d_L N x p
};

/// DF assembled per the chain rule: block l is
/// (prod_{j=l+1}^{L} Jf_j) Df_l, indices descending left to right.
inline PfDerivative pf_derivative(const NetworkSpec& net, const ParamState& params,
                                  const Matrix& x) {
    net.validate_shapes();
    const Vector flat = params.flat();
    const auto acts = layers::chain_forward_trace(net.layers, flat, x);
    PfDerivative out;
    out.DF = layers::chain_D(net.layers, flat, acts);
    Eigen::Index off = 0;
    for (const auto& l : net.layers) {
        const Eigen::Index p = layers::param_count(l);
        out.blocks.push_back(out.DF.middleCols(off, p));
        off += p;
    }
    return out;
}

/// Regularity lower bound: sum_l lambda(Df_l) prod_{j>l} lambda(Jf_j),
/// guaranteed at or below lambda(DF) up to solver tolerance.
inline double lambda_lower_bound(const NetworkSpec& net, const ParamState& params,
                                 const Matrix& x) {
    net.validate_shapes();
    const Vector flat = params.flat();
    const auto acts = layers::chain_forward_trace(net.layers, flat, x);
    const std::size_t count = net.layers.size();
    std::vector<double> lam_j(count);
    std::vector<Eigen::Index> offsets(count);
    Eigen::Index off = 0;
    for (std::size_t l = 0; l < count; ++l) {
        offsets[l] = off;
        off += layers::param_count(net.layers[l]);
    }
    for (std::size_t l = 0; l < count; ++l) {
        const Vector pl = flat.segment(offsets[l], layers::param_count(net.layers[l]));
        lam_j[l] = numerics::lambda_min_gram(layers::layer_J(net.layers[l], pl, acts[l]));
    }
    double bound = 0.0;
    for (std::size_t l = 0; l < count; ++l) {
        const Eigen::Index p = layers::param_count(net.layers[l]);
        if (p == 0) continue;
        const Vector pl = flat.segment(offsets[l], p);
        double term = numerics::lambda_min_gram(
            layers::layer_D(net.layers[l], pl, acts[l]));
        for (std::size_t j = l + 1; j < count; ++j) term *= lam_j[j];
        bound += term;
    }
    return bound;
}

// Validation ---------------------------------------------------------------

struct ValidationCheck {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct ValidationReport {
    std::vector<ValidationCheck> checks;

    bool all_pass() const {
        for (const auto& c : checks)
            if (!c.pass) return false;
        return true;
    }
};

/// Checks the hypotheses under which lambda(DF) is positive everywhere:
/// entry-normalised bias-free first layer, isometric skips, certified
/// contractive branches, non-increasing dims, full-rank data, and first-layer
/// overparameterisation.
inline ValidationReport validate_normalised_resnet(const NetworkSpec& net,
                                                   const Matrix& x) {
    ValidationReport rep;
    auto add = [&rep](std::string name, bool pass, std::string detail) {
        rep.checks.push_back({std::move(name), pass, std::move(detail)});
    };

    const LayerSpec& first = net.layers.front();
    add("first_layer_entry_normalised",
        first.kind == LayerKind::NormAffine && first.norm_kind == NormKind::Entry &&
            !first.bias,
        "layer 1 must be a bias-free entry-normalised affine layer");

    bool skips_ok = net.layers.size() > 1;
    std::ostringstream skip_detail;
    for (std::size_t l = 1; l < net.layers.size(); ++l) {
        const LayerSpec& s = net.layers[l];
        if (s.kind != LayerKind::Residual || s.skip_kind == SkipKind::None ||
            s.dense_skip) {
            skips_ok = false;
            skip_detail << "layer " << l << " is not an isometric-skip residual; ";
            continue;
        }
        const auto sv = numerics::singular_values(
            layers::skip_matrix(s.skip_kind, s.d_in, s.d_out));
        for (double v : sv)
            if (std::abs(v - 1.0) > 1e-12) {
                skips_ok = false;
                skip_detail << "layer " << l << " skip singular value " << v << "; ";
            }
    }
    add("skips_are_isometries", skips_ok, skip_detail.str());

    bool branches_ok = true;
    std::ostringstream branch_detail;
    for (std::size_t l = 1; l < net.layers.size(); ++l) {
        const LayerSpec& s = net.layers[l];
        if (s.kind != LayerKind::Residual) continue;
        const double cap = bounds::certified_branch_J_cap(s);
        if (!(cap < 1.0)) {
            branches_ok = false;
            branch_detail << "layer " << l << " certified branch cap " << cap << "; ";
        }
    }
    add("branches_contractive", branches_ok, branch_detail.str());

    bool dims_ok = true;
    const auto dd = net.dims();
    for (std::size_t l = 2; l < dd.size(); ++l)
        if (dd[l - 1] < dd[l]) dims_ok = false;
    add("dims_non_increasing", dims_ok, "requires d_{l-1} >= d_l for l >= 2");

    bool data_ok = x.cols() <= x.rows();
    if (data_ok)
        data_ok = numerics::smallest_sv(x) > 1e-8 * numerics::largest_sv(x);
    add("data_full_rank", data_ok, "requires N <= d_0 and X numerically full rank");

    add("first_layer_overparameterised",
        layers::param_count(first) >= first.d_out * first.d_in,
        "requires p_1 >= d_1 d_0");

    return rep;
}

/// Normalised residual network builder: entry-normalised bias-free first
/// layer, then residual blocks with tanh + contractive norm-affine branches
/// and identity or partial-isometry skips.
inline NetworkSpec make_normalised_resnet(const std::vector<Eigen::Index>& dims,
                                          Eigen::Index n,
                                          double epsilon = layers::kDefaultEpsilon,
                                          double delta = layers::kDefaultDelta,
                                          double first_scale = 1.0,
                                          NormKind branch_norm = NormKind::Weight) {
    if (dims.size() < 2)
        throw std::invalid_argument("make_normalised_resnet: need at least 2 dims");
    NetworkSpec net;
    net.N = n;
    net.layers.push_back(
        layers::norm_affine(dims[0], dims[1], NormKind::Entry, epsilon, first_scale));
    for (std::size_t l = 2; l < dims.size(); ++l) {
        const Eigen::Index di = dims[l - 1];
        const Eigen::Index dl = dims[l];
        std::vector<LayerSpec> branch{
            layers::nonlinearity(di, PhiKind::Tanh),
            layers::contractive_norm_affine(di, dl, branch_norm, epsilon, delta)};
        net.layers.push_back(layers::residual(
            std::move(branch),
            di == dl ? SkipKind::Identity : SkipKind::PartialIsometry));
    }
    net.validate_shapes();
    return net;
}

// JSON serialisation --------------------------------------------------------

inline nlohmann::json layer_to_json(const LayerSpec& s) {
    nlohmann::json j;
    switch (s.kind) {
        case LayerKind::Affine: j["kind"] = "affine"; break;
        case LayerKind::NormAffine: j["kind"] = "norm_affine"; break;
        case LayerKind::Nonlinearity: j["kind"] = "nonlinearity"; break;
        case LayerKind::BatchNorm: j["kind"] = "batchnorm"; break;
        case LayerKind::Residual: j["kind"] = "residual"; break;
    }
    j["d_in"] = s.d_in;
    j["d_out"] = s.d_out;
    if (s.kind == LayerKind::Affine) j["bias"] = s.bias;
    if (s.kind == LayerKind::NormAffine) {
        j["norm_kind"] = s.norm_kind == NormKind::Entry ? "entry" : "weight";
        j["epsilon"] = s.epsilon;
        j["scale"] = s.scale;
        j["bias"] = s.bias;
    }
    if (s.kind == LayerKind::Nonlinearity)
        j["phi"] = s.phi_kind == PhiKind::Tanh ? "tanh" : "identity";
    if (s.kind == LayerKind::BatchNorm) j["epsilon"] = s.epsilon;
    if (s.kind == LayerKind::Residual) {
        switch (s.skip_kind) {
            case SkipKind::None: j["skip"] = "none"; break;
            case SkipKind::Identity: j["skip"] = "identity"; break;
            case SkipKind::PartialIsometry: j["skip"] = "partial_isometry"; break;
            case SkipKind::AvgPool: j["skip"] = "avg_pool"; break;
        }
        j["dense_skip"] = s.dense_skip;
        nlohmann::json branch = nlohmann::json::array();
        for (const auto& b : s.branch) branch.push_back(layer_to_json(b));
        j["branch"] = branch;
    }
    return j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind");
    const auto d_in = j.at("d_in").get<Eigen::Index>();
    const auto d_out = j.at("d_out").get<Eigen::Index>();
    if (kind == "affine") return layers::affine(d_in, d_out, j.value("bias", true));
    if (kind == "norm_affine") {
        const std::string nk = j.at("norm_kind");
        return layers::norm_affine(d_in, d_out,
                                   nk == "entry" ? NormKind::Entry : NormKind::Weight,
                                   j.value("epsilon", layers::kDefaultEpsilon),
                                   j.value("scale", 1.0), j.value("bias", false));
    }
    if (kind == "nonlinearity")
        return layers::nonlinearity(d_in, j.value("phi", std::string("tanh")) == "tanh"
                                               ? PhiKind::Tanh
                                               : PhiKind::Identity);
    if (kind == "batchnorm")
        return layers::batchnorm(d_in, j.value("epsilon", layers::kDefaultEpsilon));
    if (kind == "residual") {
        std::vector<LayerSpec> branch;
        for (const auto& b : j.at("branch")) branch.push_back(layer_from_json(b));
        const std::string sk = j.value("skip", std::string("identity"));
        SkipKind skip = SkipKind::Identity;
        if (sk == "none") skip = SkipKind::None;
        else if (sk == "partial_isometry") skip = SkipKind::PartialIsometry;
        else if (sk == "avg_pool") skip = SkipKind::AvgPool;
        return layers::residual(std::move(branch), skip, j.value("dense_skip", false));
    }
    throw std::invalid_argument("layer_from_json: unknown kind " + kind);
}

inline nlohmann::json to_json(const NetworkSpec& net) {
    nlohmann::json j;
    j["N"] = net.N;
    nlohmann::json ls = nlohmann::json::array();
    for (const auto& l : net.layers) ls.push_back(layer_to_json(l));
    j["layers"] = ls;
    return j;
}

inline NetworkSpec from_json(const nlohmann::json& j) {
    NetworkSpec net;
    net.N = j.at("N").get<Eigen::Index>();
    for (const auto& l : j.at("layers")) net.layers.push_back(layer_from_json(l));
    net.validate_shapes();
    return net;
}

}  // namespace mps::network
