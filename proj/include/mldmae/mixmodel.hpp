#pragma once

// K encoder/decoder pairs with shared trunks and free heads, per-cluster
// latent priors, and sampling from the fitted mixture.

#include "mldmae/diffnet.hpp"
#include "mldmae/partition.hpp"
#include "mldmae/synthdata.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>

namespace mldmae {

enum class PriorBase { std_gaussian, truncated_normal, uniform_ball };

inline std::string_view to_string(PriorBase b) {
    switch (b) {
        case PriorBase::std_gaussian: return "std_gaussian";
        case PriorBase::truncated_normal: return "truncated_normal";
        case PriorBase::uniform_ball: return "uniform_ball";
    }
    return "std_gaussian";
}

inline PriorBase prior_base_from_string(std::string_view s) {
    if (s == "std_gaussian") return PriorBase::std_gaussian;
    if (s == "truncated_normal") return PriorBase::truncated_normal;
    if (s == "uniform_ball") return PriorBase::uniform_ball;
    throw ConfigError("unknown prior '" + std::string(s) + "'");
}

/// Latent prior. With `reweighted`, draws from the base are kept with
/// probability rho_k(G_k(z)) using the owning model's partition and its
/// prior reference decoder (the live decoder when there is none).
struct Prior {
    PriorBase base = PriorBase::truncated_normal;
    double radius = 1.0;
    bool reweighted = false;

    void validate() const {
        if (base != PriorBase::std_gaussian && !(radius > 0.0)) throw ConfigError("prior radius must be positive");
    }

    friend bool operator==(const Prior&, const Prior&) = default;
};

struct MixtureModel {
    MixtureArchitecture arch;
    ParamStore params;
    std::vector<Prior> priors;
    MixtureWeights weights;
    PartitionOfUnity pou;
    double h = 0.0;
    // Frozen parameters whose decoders define reweighted priors. Set when a
    // refresh round starts so the priors stay fixed while training.
    std::optional<ParamStore> prior_reference;

    std::size_t clusters() const { return arch.clusters; }

    const ParamStore& prior_params() const { return prior_reference ? *prior_reference : params; }

    static std::string encoder_head_name(std::size_t k) { return "encoder.head." + std::to_string(k); }
    static std::string decoder_head_name(std::size_t k) { return "decoder.head." + std::to_string(k); }

    void check_cluster(std::size_t k) const {
        if (k >= arch.clusters) {
            throw ConfigError("cluster index " + std::to_string(k) + " out of range (K = " +
                              std::to_string(arch.clusters) + ")");
        }
    }

    void validate() const {
        arch.validate();
        if (priors.size() != arch.clusters) throw ConfigError("one prior per cluster is required");
        for (const auto& p : priors) p.validate();
        if (weights.values.size() != arch.clusters) throw ConfigError("one mixture weight per cluster is required");
        double s = 0.0;
        for (double w : weights.values) {
            if (!(w >= 0.0)) throw ConfigError("mixture weights must be nonnegative");
            s += w;
        }
        if (std::abs(s - 1.0) > 1e-9) throw ConfigError("mixture weights must sum to 1");
        if (pou.size() != arch.clusters) throw ConfigError("partition size differs from K");
        if (pou.dim() != arch.ambient_dim) throw ConfigError("partition dimension differs from D");
        if (!(h >= 0.0)) throw ConfigError("smoothing bandwidth h must be nonnegative");
        if (params.total_len() != param_count(arch)) throw ConfigError("parameter store does not match architecture");
        if (prior_reference && !(prior_reference->segments() == params.segments())) {
            throw ConfigError("prior reference parameters do not match the model layout");
        }
    }
};

/// Allocates segments in a fixed order (encoder trunk, encoder heads,
/// decoder heads, decoder trunk) and initializes them from `seed`.
inline MixtureModel init_model(const MixtureArchitecture& arch, PartitionOfUnity pou, MixtureWeights weights,
                               double h, const Prior& prior, std::uint64_t seed) {
    arch.validate();
    MixtureModel m;
    m.arch = arch;
    m.pou = std::move(pou);
    m.weights = std::move(weights);
    m.h = h;
    m.priors.assign(arch.clusters, prior);
    const auto et = arch.encoder_trunk();
    const auto eh = arch.encoder_head();
    const auto dh = arch.decoder_head();
    const auto dt = arch.decoder_trunk();
    m.params.add_segment("encoder.trunk", network_param_count(et));
    for (std::size_t k = 0; k < arch.clusters; ++k) {
        m.params.add_segment(MixtureModel::encoder_head_name(k), network_param_count(eh));
    }
    for (std::size_t k = 0; k < arch.clusters; ++k) {
        m.params.add_segment(MixtureModel::decoder_head_name(k), network_param_count(dh));
    }
    m.params.add_segment("decoder.trunk", network_param_count(dt));
    Rng rng(seed);
    init_layers(m.params.segment("encoder.trunk"), et, rng);
    for (std::size_t k = 0; k < arch.clusters; ++k) init_layers(m.params.segment(MixtureModel::encoder_head_name(k)), eh, rng);
    for (std::size_t k = 0; k < arch.clusters; ++k) init_layers(m.params.segment(MixtureModel::decoder_head_name(k)), dh, rng);
    init_layers(m.params.segment("decoder.trunk"), dt, rng);
    m.validate();
    return m;
}

/// Forward record of one encoder or decoder pass, kept for backpropagation.
struct PairPass {
    ForwardTape first;
    ForwardTape second;

    const Matrix& output() const { return second.output(); }
};

/// Shared trunk then the k-th free output layer.
inline PairPass encode_pass(const MixtureModel& model, std::size_t k, const Matrix& x) {
    model.check_cluster(k);
    PairPass p;
    p.first = forward_tape(model.params.segment("encoder.trunk"), model.arch.encoder_trunk(), x);
    p.second = forward_tape(model.params.segment(MixtureModel::encoder_head_name(k)), model.arch.encoder_head(),
                            p.first.output());
    return p;
}

/// k-th free input layer then the shared trunk, with the given parameters.
inline PairPass decode_pass(const MixtureModel& model, const ParamStore& params, std::size_t k, const Matrix& z) {
    model.check_cluster(k);
    PairPass p;
    p.first = forward_tape(params.segment(MixtureModel::decoder_head_name(k)), model.arch.decoder_head(), z);
    p.second = forward_tape(params.segment("decoder.trunk"), model.arch.decoder_trunk(), p.first.output());
    return p;
}

inline PairPass decode_pass(const MixtureModel& model, std::size_t k, const Matrix& z) {
    return decode_pass(model, model.params, k, z);
}

inline Matrix encode(const MixtureModel& model, std::size_t k, const Matrix& x) {
    return std::move(encode_pass(model, k, x).second.inputs.back());
}

inline Matrix decode(const MixtureModel& model, std::size_t k, const Matrix& z) {
    return std::move(decode_pass(model, k, z).second.inputs.back());
}

/// Adds the gradients of one encoder pass into `grad` (ParamStore-shaped);
/// returns the gradient with respect to the encoder input.
inline Matrix accumulate_encoder_grad(const MixtureModel& model, std::size_t k, const PairPass& pass,
                                      const Matrix& upstream, std::span<double> grad) {
    const auto& head_seg = model.params.segment_info(MixtureModel::encoder_head_name(k));
    const auto& trunk_seg = model.params.segment_info("encoder.trunk");
    auto gh = backward(model.params.segment(MixtureModel::encoder_head_name(k)), model.arch.encoder_head(),
                       pass.second, upstream);
    auto gt = backward(model.params.segment("encoder.trunk"), model.arch.encoder_trunk(), pass.first, gh.input);
    for (std::size_t i = 0; i < gh.params.size(); ++i) grad[head_seg.offset + i] += gh.params[i];
    for (std::size_t i = 0; i < gt.params.size(); ++i) grad[trunk_seg.offset + i] += gt.params[i];
    return std::move(gt.input);
}

/// Decoder counterpart of accumulate_encoder_grad; returns d/dz.
inline Matrix accumulate_decoder_grad(const MixtureModel& model, std::size_t k, const PairPass& pass,
                                      const Matrix& upstream, std::span<double> grad) {
    const auto& head_seg = model.params.segment_info(MixtureModel::decoder_head_name(k));
    const auto& trunk_seg = model.params.segment_info("decoder.trunk");
    auto gt = backward(model.params.segment("decoder.trunk"), model.arch.decoder_trunk(), pass.second, upstream);
    auto gh = backward(model.params.segment(MixtureModel::decoder_head_name(k)), model.arch.decoder_head(), pass.first,
                       gt.input);
    for (std::size_t i = 0; i < gh.params.size(); ++i) grad[head_seg.offset + i] += gh.params[i];
    for (std::size_t i = 0; i < gt.params.size(); ++i) grad[trunk_seg.offset + i] += gt.params[i];
    return std::move(gh.input);
}

/// Adds sqrt(h) * N(0, I) noise drawn from `rng` to clean encodings.
inline Matrix perturb(const Matrix& clean, double h, Rng& rng) {
    if (!(h >= 0.0)) throw ConfigError("smoothing bandwidth h must be nonnegative");
    Matrix out = clean;
    if (h == 0.0) return out;
    const double s = std::sqrt(h);
    for (double& v : out.data()) v += s * rng.normal();
    return out;
}

/// Gaussian-perturbed encoder Q_k(x) + sqrt(h) N(0, I_d).
inline Matrix noisy_encode(const MixtureModel& model, std::size_t k, const Matrix& x, std::uint64_t seed) {
    Rng rng(seed);
    return perturb(encode(model, k, x), model.h, rng);
}

namespace detail {
inline void sample_base(const Prior& prior, std::span<double> z, Rng& rng) {
    switch (prior.base) {
        case PriorBase::std_gaussian:
            for (double& v : z) v = rng.normal();
            return;
        case PriorBase::truncated_normal: {
            const double r2 = prior.radius * prior.radius;
            while (true) {
                double sq = 0.0;
                for (double& v : z) {
                    v = rng.normal();
                    sq += v * v;
                }
                if (sq <= r2) return;
            }
        }
        case PriorBase::uniform_ball: {
            double norm = 0.0;
            do {
                norm = 0.0;
                for (double& v : z) {
                    v = rng.normal();
                    norm += v * v;
                }
                norm = std::sqrt(norm);
            } while (norm < 1e-12);
            const double radius = prior.radius * std::pow(rng.uniform(), 1.0 / static_cast<double>(z.size()));
            for (double& v : z) v *= radius / norm;
            return;
        }
    }
}
}  // namespace detail

struct PriorSampleOptions {
    std::size_t collapse_window = 10000;
    double min_acceptance = 1e-3;
};

/// m draws from cluster k's prior. Reweighted priors use rejection against
/// rho_k(G_k(z)) and raise PriorCollapseError if acceptance drops below
/// `min_acceptance` once `collapse_window` proposals have been made.
inline Matrix sample_prior(const Prior& prior, const MixtureModel& model, std::size_t k, std::size_t m,
                           std::uint64_t seed, const PriorSampleOptions& opts = {}) {
    prior.validate();
    model.check_cluster(k);
    const std::size_t d = model.arch.latent_dim;
    Rng rng(seed);
    Matrix out(m, d);
    if (!prior.reweighted) {
        for (std::size_t i = 0; i < m; ++i) detail::sample_base(prior, out.row(i), rng);
        return out;
    }
    std::size_t accepted = 0;
    std::size_t proposed = 0;
    const std::size_t chunk = std::max<std::size_t>(m, 256);
    Matrix proposals(chunk, d);
    while (accepted < m) {
        for (std::size_t i = 0; i < chunk; ++i) detail::sample_base(prior, proposals.row(i), rng);
        const Matrix decoded = std::move(decode_pass(model, model.prior_params(), k, proposals).second.inputs.back());
        for (std::size_t i = 0; i < chunk && accepted < m; ++i) {
            ++proposed;
            const double rho = model.pou.weight(k, decoded.row(i));
            if (rng.uniform() < rho) {
                std::copy(proposals.row(i).begin(), proposals.row(i).end(), out.row(accepted).begin());
                ++accepted;
            }
        }
        if (proposed >= opts.collapse_window &&
            static_cast<double>(accepted) < opts.min_acceptance * static_cast<double>(proposed)) {
            throw PriorCollapseError("prior collapse in cluster " + std::to_string(k) + ": accepted " +
                                         std::to_string(accepted) + " of " + std::to_string(proposed) + " proposals",
                                     k);
        }
    }
    return out;
}

/// Fraction of base-prior proposals accepted by a reweighted prior.
inline double prior_acceptance_rate(const Prior& prior, const MixtureModel& model, std::size_t k,
                                    std::size_t proposals, std::uint64_t seed) {
    Prior base = prior;
    base.reweighted = false;
    const Matrix z = sample_prior(base, model, k, proposals, seed);
    const Matrix x = std::move(decode_pass(model, model.prior_params(), k, z).second.inputs.back());
    double s = 0.0;
    for (std::size_t i = 0; i < proposals; ++i) s += model.pou.weight(k, x.row(i));
    return s / static_cast<double>(proposals);
}

/// Draw k ~ Categorical(p), z ~ nu_k, x = G_k(z), in draw order.
inline PointCloud sample_model(const MixtureModel& model, std::size_t m, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t k_count = model.clusters();
    std::vector<std::size_t> label(m);
    std::vector<double> cdf(k_count);
    double acc = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) {
        acc += model.weights.values[k];
        cdf[k] = acc;
    }
    std::vector<std::size_t> counts(k_count, 0);
    for (std::size_t i = 0; i < m; ++i) {
        const double u = rng.uniform() * acc;
        std::size_t k = 0;
        while (k + 1 < k_count && !(u < cdf[k])) ++k;
        // Skip zero-weight clusters that a boundary draw could land on.
        while (model.weights.values[k] == 0.0 && k + 1 < k_count) ++k;
        label[i] = k;
        ++counts[k];
    }
    Matrix out(m, model.arch.ambient_dim);
    for (std::size_t k = 0; k < k_count; ++k) {
        if (counts[k] == 0) continue;
        const Matrix z = sample_prior(model.priors[k], model, k, counts[k], mix_seed(seed, 1000 + k));
        const Matrix x = decode(model, k, z);
        std::size_t next = 0;
        for (std::size_t i = 0; i < m; ++i) {
            if (label[i] != k) continue;
            std::copy(x.row(next).begin(), x.row(next).end(), out.row(i).begin());
            ++next;
        }
    }
    return PointCloud(std::move(out));
}

// ---------------------------------------------------------------------------
// Checkpoints: a single JSON document.
//
// Field order: schema, version, architecture{ambient_dim, latent_dim, hidden,
// clusters, hidden_activation, output_activation}, h, weights, priors[],
// partition{...}, segments[{name, values}] in allocation order.

inline constexpr const char* kCheckpointSchema = "mldmae-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::ordered_json checkpoint_json(const MixtureModel& model) {
    nlohmann::ordered_json j;
    j["schema"] = kCheckpointSchema;
    j["version"] = kCheckpointVersion;
    nlohmann::ordered_json a;
    a["ambient_dim"] = model.arch.ambient_dim;
    a["latent_dim"] = model.arch.latent_dim;
    a["hidden"] = model.arch.hidden;
    a["clusters"] = model.arch.clusters;
    a["hidden_activation"] = std::string(to_string(model.arch.hidden_activation));
    a["output_activation"] = std::string(to_string(model.arch.output_activation));
    j["architecture"] = a;
    j["h"] = model.h;
    j["weights"] = model.weights.values;
    nlohmann::ordered_json ps = nlohmann::ordered_json::array();
    for (const auto& p : model.priors) {
        ps.push_back({{"base", std::string(to_string(p.base))}, {"radius", p.radius}, {"reweighted", p.reweighted}});
    }
    j["priors"] = ps;
    j["partition"] = nlohmann::ordered_json::parse(model.pou.to_json().dump());
    auto segments_json = [](const ParamStore& store) {
        nlohmann::ordered_json segs = nlohmann::ordered_json::array();
        for (const auto& s : store.segments()) {
            std::vector<double> v(store.values().begin() + static_cast<std::ptrdiff_t>(s.offset),
                                  store.values().begin() + static_cast<std::ptrdiff_t>(s.offset + s.length));
            segs.push_back({{"name", s.name}, {"values", v}});
        }
        return segs;
    };
    j["segments"] = segments_json(model.params);
    j["prior_reference"] = model.prior_reference ? segments_json(*model.prior_reference) : nlohmann::ordered_json();
    return j;
}

namespace detail {
template <class T, class J>
T checkpoint_field(const J& j, const std::string& key, const std::string& path) {
    try {
        return j.at(key).template get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ParseError("checkpoint: missing or invalid field '" + path + "'");
    }
}
}  // namespace detail

inline MixtureModel model_from_checkpoint_json(const nlohmann::json& j) {
    using detail::checkpoint_field;
    if (!j.is_object()) throw ParseError("checkpoint: document is not an object");
    if (checkpoint_field<std::string>(j, "schema", "schema") != kCheckpointSchema) {
        throw ParseError("checkpoint: field 'schema' is not '" + std::string(kCheckpointSchema) + "'");
    }
    if (checkpoint_field<int>(j, "version", "version") != kCheckpointVersion) {
        throw ParseError("checkpoint: unsupported value in field 'version'");
    }
    if (!j.contains("architecture")) throw ParseError("checkpoint: missing or invalid field 'architecture'");
    const auto& a = j.at("architecture");
    MixtureArchitecture arch;
    arch.ambient_dim = checkpoint_field<std::size_t>(a, "ambient_dim", "architecture.ambient_dim");
    arch.latent_dim = checkpoint_field<std::size_t>(a, "latent_dim", "architecture.latent_dim");
    arch.hidden = checkpoint_field<std::vector<std::size_t>>(a, "hidden", "architecture.hidden");
    arch.clusters = checkpoint_field<std::size_t>(a, "clusters", "architecture.clusters");
    arch.hidden_activation =
        activation_from_string(checkpoint_field<std::string>(a, "hidden_activation", "architecture.hidden_activation"));
    arch.output_activation =
        activation_from_string(checkpoint_field<std::string>(a, "output_activation", "architecture.output_activation"));
    try {
        arch.validate();
    } catch (const ConfigError& e) {
        throw ParseError(std::string("checkpoint: invalid field 'architecture': ") + e.what());
    }
    MixtureModel m;
    m.arch = arch;
    m.h = checkpoint_field<double>(j, "h", "h");
    m.weights.values = checkpoint_field<std::vector<double>>(j, "weights", "weights");
    if (!j.contains("priors") || !j.at("priors").is_array()) throw ParseError("checkpoint: missing or invalid field 'priors'");
    for (std::size_t i = 0; i < j.at("priors").size(); ++i) {
        const auto& p = j.at("priors")[i];
        const std::string path = "priors[" + std::to_string(i) + "]";
        Prior prior;
        prior.base = prior_base_from_string(checkpoint_field<std::string>(p, "base", path + ".base"));
        prior.radius = checkpoint_field<double>(p, "radius", path + ".radius");
        prior.reweighted = checkpoint_field<bool>(p, "reweighted", path + ".reweighted");
        m.priors.push_back(prior);
    }
    if (!j.contains("partition")) throw ParseError("checkpoint: missing or invalid field 'partition'");
    try {
        m.pou = PartitionOfUnity::from_json(j.at("partition"));
    } catch (const Error& e) {
        throw ParseError(std::string("checkpoint: invalid field 'partition': ") + e.what());
    }
    auto read_segments = [&](const std::string& field) {
        if (!j.contains(field) || !j.at(field).is_array()) {
            throw ParseError("checkpoint: missing or invalid field '" + field + "'");
        }
        ParamStore store;
        for (std::size_t i = 0; i < j.at(field).size(); ++i) {
            const auto& s = j.at(field)[i];
            const std::string path = field + "[" + std::to_string(i) + "]";
            const auto name = checkpoint_field<std::string>(s, "name", path + ".name");
            const auto values = checkpoint_field<std::vector<double>>(s, "values", path + ".values");
            try {
                store.add_segment(name, values.size());
            } catch (const ConfigError&) {
                throw ParseError("checkpoint: duplicate segment in field '" + path + "'");
            }
            std::copy(values.begin(), values.end(), store.segment(name).begin());
        }
        return store;
    };
    m.params = read_segments("segments");
    if (j.contains("prior_reference") && !j.at("prior_reference").is_null()) {
        m.prior_reference = read_segments("prior_reference");
    }
    // Every expected segment must exist with the expected length.
    auto expect = [&](const std::string& name, std::size_t len) {
        auto idx = m.params.find(name);
        if (!idx || m.params.segments()[*idx].length != len) {
            throw ParseError("checkpoint: missing or invalid field 'segments." + name + "'");
        }
    };
    expect("encoder.trunk", network_param_count(arch.encoder_trunk()));
    expect("decoder.trunk", network_param_count(arch.decoder_trunk()));
    for (std::size_t k = 0; k < arch.clusters; ++k) {
        expect(MixtureModel::encoder_head_name(k), network_param_count(arch.encoder_head()));
        expect(MixtureModel::decoder_head_name(k), network_param_count(arch.decoder_head()));
    }
    try {
        m.validate();
    } catch (const ConfigError& e) {
        throw ParseError(std::string("checkpoint: ") + e.what());
    }
    return m;
}

inline void save_checkpoint(const MixtureModel& model, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open '" + path.string() + "' for writing");
    os << checkpoint_json(model).dump(1) << '\n';
    if (!os) throw Error("failed writing '" + path.string() + "'");
}

inline MixtureModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open checkpoint '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("checkpoint '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return model_from_checkpoint_json(j);
}

}  // namespace mldmae
