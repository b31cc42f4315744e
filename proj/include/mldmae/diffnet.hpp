#pragma once

// Small fully-connected networks with hand-written reverse mode and Adam.
//
// Parameters of a network live in a flat span. Layer l stores its weight
// matrix (out_dim x in_dim, row-major) followed by its bias (out_dim).

#include "mldmae/core.hpp"

#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace mldmae {

enum class Activation { relu, tanh, identity, leaky_relu };

constexpr double kLeakySlope = 0.1;

inline std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
        case Activation::leaky_relu: return "leaky_relu";
    }
    return "identity";
}

inline Activation activation_from_string(std::string_view s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    if (s == "leaky_relu") return Activation::leaky_relu;
    throw ConfigError("unknown activation '" + std::string(s) + "'");
}

struct LayerSpec {
    std::size_t in_dim = 1;
    std::size_t out_dim = 1;
    Activation activation = Activation::identity;

    std::size_t param_count() const { return in_dim * out_dim + out_dim; }

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Checks positivity and the dimension chain; throws ConfigError.
inline void validate_specs(std::span<const LayerSpec> specs) {
    if (specs.empty()) throw ConfigError("network needs at least one layer");
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].in_dim < 1 || specs[i].out_dim < 1) {
            throw ConfigError("layer " + std::to_string(i) + " has a zero dimension");
        }
        if (i + 1 < specs.size() && specs[i].out_dim != specs[i + 1].in_dim) {
            throw ConfigError("layer " + std::to_string(i) + " outputs " + std::to_string(specs[i].out_dim) +
                              " but layer " + std::to_string(i + 1) + " expects " +
                              std::to_string(specs[i + 1].in_dim));
        }
    }
}

inline std::size_t network_param_count(std::span<const LayerSpec> specs) {
    std::size_t n = 0;
    for (const auto& s : specs) n += s.param_count();
    return n;
}

/// Flat parameter vector split into uniquely named, contiguous segments.
class ParamStore {
public:
    struct Segment {
        std::string name;
        std::size_t offset = 0;
        std::size_t length = 0;

        friend bool operator==(const Segment&, const Segment&) = default;
    };

    /// Appends a zero-filled segment and returns its index.
    std::size_t add_segment(const std::string& name, std::size_t length) {
        if (index_.contains(name)) throw ConfigError("duplicate parameter segment '" + name + "'");
        index_.emplace(name, segments_.size());
        segments_.push_back({name, values_.size(), length});
        values_.resize(values_.size() + length, 0.0);
        return segments_.size() - 1;
    }

    std::size_t total_len() const { return values_.size(); }
    const std::vector<Segment>& segments() const { return segments_; }

    std::optional<std::size_t> find(std::string_view name) const {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    const Segment& segment_info(std::string_view name) const {
        auto idx = find(name);
        if (!idx) throw ConfigError("no parameter segment '" + std::string(name) + "'");
        return segments_[*idx];
    }

    std::span<double> segment(std::string_view name) {
        const auto& s = segment_info(name);
        return {values_.data() + s.offset, s.length};
    }
    std::span<const double> segment(std::string_view name) const {
        const auto& s = segment_info(name);
        return {values_.data() + s.offset, s.length};
    }

    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }

    friend bool operator==(const ParamStore& a, const ParamStore& b) {
        if (a.values_ != b.values_ || a.segments_.size() != b.segments_.size()) return false;
        for (std::size_t i = 0; i < a.segments_.size(); ++i) {
            if (a.segments_[i].name != b.segments_[i].name || a.segments_[i].length != b.segments_[i].length) {
                return false;
            }
        }
        return true;
    }

private:
    std::vector<Segment> segments_;
    std::map<std::string, std::size_t> index_;
    std::vector<double> values_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike.
inline void init_layers(std::span<double> params, std::span<const LayerSpec> specs, Rng& rng) {
    validate_specs(specs);
    if (params.size() != network_param_count(specs)) throw ShapeError("parameter span does not match layer specs");
    std::size_t offset = 0;
    for (const auto& s : specs) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(s.in_dim));
        for (std::size_t i = 0; i < s.param_count(); ++i) {
            params[offset + i] = (2.0 * rng.uniform() - 1.0) * bound;
        }
        offset += s.param_count();
    }
}

/// One segment per layer, named "layer<i>".
inline ParamStore init_mlp(std::span<const LayerSpec> specs, std::uint64_t seed) {
    validate_specs(specs);
    ParamStore store;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        store.add_segment("layer" + std::to_string(i), specs[i].param_count());
    }
    Rng rng(seed);
    init_layers(store.values(), specs, rng);
    return store;
}

namespace detail {

inline double activate(Activation a, double v) {
    switch (a) {
        case Activation::relu: return v > 0.0 ? v : 0.0;
        case Activation::tanh: return std::tanh(v);
        case Activation::identity: return v;
        case Activation::leaky_relu: return v > 0.0 ? v : kLeakySlope * v;
    }
    return v;
}

// Derivative expressed through the pre-activation value; relu'(0) = 0.
inline double activate_grad(Activation a, double pre, double post) {
    switch (a) {
        case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
        case Activation::tanh: return 1.0 - post * post;
        case Activation::identity: return 1.0;
        case Activation::leaky_relu: return pre > 0.0 ? 1.0 : kLeakySlope;
    }
    return 1.0;
}

inline void check_params(std::span<const double> params, std::span<const LayerSpec> specs) {
    validate_specs(specs);
    if (params.size() != network_param_count(specs)) {
        throw ShapeError("network expects " + std::to_string(network_param_count(specs)) + " parameters, got " +
                         std::to_string(params.size()));
    }
}

}  // namespace detail

/// Intermediate values kept by a forward pass for the backward pass.
/// inputs[l] is the input to layer l; pre[l] its affine output; inputs.back() the network output.
struct ForwardTape {
    std::vector<Matrix> inputs;
    std::vector<Matrix> pre;

    const Matrix& output() const { return inputs.back(); }
};

inline ForwardTape forward_tape(std::span<const double> params, std::span<const LayerSpec> specs, const Matrix& x) {
    detail::check_params(params, specs);
    if (x.cols() != specs.front().in_dim) {
        throw ShapeError("input has " + std::to_string(x.cols()) + " columns, network expects " +
                         std::to_string(specs.front().in_dim));
    }
    ForwardTape tape;
    tape.inputs.reserve(specs.size() + 1);
    tape.pre.reserve(specs.size());
    tape.inputs.push_back(x);
    std::size_t offset = 0;
    for (const auto& s : specs) {
        const Matrix& in = tape.inputs.back();
        const double* w = params.data() + offset;
        const double* b = w + s.in_dim * s.out_dim;
        Matrix z(in.rows(), s.out_dim);
        Matrix a(in.rows(), s.out_dim);
        for (std::size_t r = 0; r < in.rows(); ++r) {
            const auto xr = in.row(r);
            for (std::size_t o = 0; o < s.out_dim; ++o) {
                const double* wo = w + o * s.in_dim;
                double acc = b[o];
                for (std::size_t i = 0; i < s.in_dim; ++i) acc += wo[i] * xr[i];
                z(r, o) = acc;
                a(r, o) = detail::activate(s.activation, acc);
            }
        }
        offset += s.param_count();
        tape.pre.push_back(std::move(z));
        tape.inputs.push_back(std::move(a));
    }
    return tape;
}

inline Matrix forward(std::span<const double> params, std::span<const LayerSpec> specs, const Matrix& x) {
    return std::move(forward_tape(params, specs, x).inputs.back());
}

inline Matrix forward(const ParamStore& params, std::span<const LayerSpec> specs, const Matrix& x) {
    return forward(std::span<const double>(params.values()), specs, x);
}

struct Gradients {
    std::vector<double> params;
    Matrix input;
};

/// Gradient of sum_{rows} <output, upstream> with respect to the parameters
/// and the network input, using a tape recorded by forward_tape.
inline Gradients backward(std::span<const double> params, std::span<const LayerSpec> specs, const ForwardTape& tape,
                          const Matrix& upstream) {
    detail::check_params(params, specs);
    const Matrix& out = tape.output();
    if (upstream.rows() != out.rows() || upstream.cols() != out.cols()) {
        throw ShapeError("upstream gradient shape does not match network output");
    }
    Gradients g;
    g.params.assign(params.size(), 0.0);
    Matrix delta = upstream;
    std::size_t offset = params.size();
    for (std::size_t l = specs.size(); l-- > 0;) {
        const auto& s = specs[l];
        offset -= s.param_count();
        const Matrix& in = tape.inputs[l];
        const Matrix& z = tape.pre[l];
        const Matrix& a = tape.inputs[l + 1];
        const double* w = params.data() + offset;
        double* gw = g.params.data() + offset;
        double* gb = gw + s.in_dim * s.out_dim;
        Matrix dz(in.rows(), s.out_dim);
        for (std::size_t r = 0; r < in.rows(); ++r) {
            for (std::size_t o = 0; o < s.out_dim; ++o) {
                dz(r, o) = delta(r, o) * detail::activate_grad(s.activation, z(r, o), a(r, o));
            }
        }
        Matrix din(in.rows(), s.in_dim);
        for (std::size_t r = 0; r < in.rows(); ++r) {
            const auto xr = in.row(r);
            auto dr = din.row(r);
            for (std::size_t o = 0; o < s.out_dim; ++o) {
                const double d = dz(r, o);
                if (d == 0.0) continue;
                const double* wo = w + o * s.in_dim;
                double* gwo = gw + o * s.in_dim;
                for (std::size_t i = 0; i < s.in_dim; ++i) {
                    gwo[i] += d * xr[i];
                    dr[i] += d * wo[i];
                }
                gb[o] += d;
            }
        }
        delta = std::move(din);
    }
    g.input = std::move(delta);
    return g;
}

inline Gradients backward(std::span<const double> params, std::span<const LayerSpec> specs, const Matrix& x,
                          const Matrix& upstream) {
    return backward(params, specs, forward_tape(params, specs, x), upstream);
}

inline Gradients backward(const ParamStore& params, std::span<const LayerSpec> specs, const Matrix& x,
                          const Matrix& upstream) {
    return backward(std::span<const double>(params.values()), specs, x, upstream);
}

struct AdamState {
    std::uint64_t step_count = 0;
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState for_size(std::size_t n, double lr = 0.001, double beta1 = 0.9, double beta2 = 0.999,
                              double eps = 1e-8) {
        if (!(lr > 0.0) || !(eps > 0.0) || beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
            throw ConfigError("invalid Adam hyperparameters");
        }
        AdamState s;
        s.first_moment.assign(n, 0.0);
        s.second_moment.assign(n, 0.0);
        s.lr = lr;
        s.beta1 = beta1;
        s.beta2 = beta2;
        s.eps = eps;
        return s;
    }
};

/// Bias-corrected Adam update, in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
    if (grads.size() != params.size() || state.first_moment.size() != params.size() ||
        state.second_moment.size() != params.size()) {
        throw ShapeError("Adam: parameter, gradient and moment lengths differ");
    }
    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g * g;
        const double m_hat = m / c1;
        const double v_hat = v / c2;
        params[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
}

inline void adam_step(ParamStore& params, std::span<const double> grads, AdamState& state) {
    adam_step(std::span<double>(params.values()), grads, state);
}

/// Shape of a K-pair encoder/decoder mixture with the output layer of each
/// encoder and the input layer of each decoder free, every other layer shared.
struct MixtureArchitecture {
    std::size_t ambient_dim = 2;
    std::size_t latent_dim = 1;
    std::vector<std::size_t> hidden = {128};
    std::size_t clusters = 1;
    Activation hidden_activation = Activation::relu;
    Activation output_activation = Activation::identity;

    void validate() const {
        if (ambient_dim < 1 || latent_dim < 1) throw ConfigError("dimensions must be positive");
        if (hidden.empty()) throw ConfigError("at least one hidden layer is required");
        for (auto h : hidden) {
            if (h < 1) throw ConfigError("hidden sizes must be positive");
        }
        if (clusters < 1) throw ConfigError("K must be at least 1");
    }

    /// Shared encoder layers: D -> h1 -> ... -> hL.
    std::vector<LayerSpec> encoder_trunk() const {
        std::vector<LayerSpec> specs;
        std::size_t in = ambient_dim;
        for (auto h : hidden) {
            specs.push_back({in, h, hidden_activation});
            in = h;
        }
        return specs;
    }
    /// Per-cluster encoder output layer: hL -> d.
    std::vector<LayerSpec> encoder_head() const { return {{hidden.back(), latent_dim, Activation::identity}}; }
    /// Per-cluster decoder input layer: d -> hL.
    std::vector<LayerSpec> decoder_head() const { return {{latent_dim, hidden.back(), hidden_activation}}; }
    /// Shared decoder layers: hL -> ... -> h1 -> D, mirroring the encoder.
    std::vector<LayerSpec> decoder_trunk() const {
        std::vector<LayerSpec> specs;
        for (std::size_t i = hidden.size(); i-- > 1;) {
            specs.push_back({hidden[i], hidden[i - 1], hidden_activation});
        }
        specs.push_back({hidden.front(), ambient_dim, output_activation});
        return specs;
    }
};

/// Number of free scalars: shared layers once, free layers K times.
inline std::size_t param_count(const MixtureArchitecture& arch) {
    const std::size_t shared = network_param_count(arch.encoder_trunk()) + network_param_count(arch.decoder_trunk());
    const std::size_t free = network_param_count(arch.encoder_head()) + network_param_count(arch.decoder_head());
    return shared + arch.clusters * free;
}

}  // namespace mldmae
