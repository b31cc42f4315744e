#pragma once

// Experiment configuration (JSON, fail-closed) and the end-to-end pipeline
// shared by the command-line tool and the acceptance checks: data, fit,
// sample, evaluate.

#include "mldmae/evalsuite.hpp"
#include "mldmae/trainer.hpp"

#include "json.hpp"

#include <chrono>
#include <set>
#include <variant>

namespace mldmae {

enum class DatasetKind { spiral, torus, sphere, file };
// truth samples the generating distribution itself (noise-floor runs).
enum class Method { mldmae, ldmae, kde, truth };

inline std::string_view to_string(DatasetKind d) {
    switch (d) {
        case DatasetKind::spiral: return "spiral";
        case DatasetKind::torus: return "torus";
        case DatasetKind::sphere: return "sphere";
        case DatasetKind::file: return "file";
    }
    return "spiral";
}

inline std::string_view to_string(Method m) {
    switch (m) {
        case Method::mldmae: return "mldmae";
        case Method::ldmae: return "ldmae";
        case Method::kde: return "kde";
        case Method::truth: return "truth";
    }
    return "mldmae";
}

struct DatasetConfig {
    DatasetKind kind = DatasetKind::spiral;
    std::filesystem::path path;     // file datasets only
    std::size_t n_train = 1000;
    double test_fraction = 0.2;     // file datasets only
};

struct PartitionConfig {
    PartitionKind kind = PartitionKind::smooth;
    std::size_t clusters = 10;
    double exponent = 10.0;
    std::optional<double> margin;  // default: 5% of the median radius
    std::size_t max_iters = 300;
};

struct KdeConfig {
    double grid_lo = 0.01;
    double grid_hi = 1.0;
    std::size_t grid_count = 20;
    double validation_fraction = 0.2;
};

struct EvalConfig {
    std::size_t n_eval = 1000;
    GroundMetric metric = GroundMetric::l2;
    std::size_t max_support = 5000;
};

struct ExperimentConfig {
    std::string name;
    DatasetConfig dataset;
    Method method = Method::mldmae;
    PartitionConfig partition;
    MixtureArchitecture arch;
    Prior prior;
    TrainConfig train;
    double refresh_validation_fraction = 0.1;
    KdeConfig kde;
    EvalConfig eval;
    std::filesystem::path out = "runs/default";
    std::uint64_t seed = 0;

    std::size_t dim() const {
        switch (dataset.kind) {
            case DatasetKind::spiral: return 2;
            case DatasetKind::torus:
            case DatasetKind::sphere: return 3;
            case DatasetKind::file: return arch.ambient_dim;
        }
        return arch.ambient_dim;
    }

    /// Cross-field checks. Throws ConfigError.
    void validate() const {
        if (dataset.n_train < 1) throw ConfigError("dataset.n_train must be at least 1");
        if (dataset.kind == DatasetKind::file) {
            if (dataset.path.empty()) throw ConfigError("dataset.path is required for file datasets");
            if (!std::filesystem::exists(dataset.path)) {
                throw ConfigError("dataset.path '" + dataset.path.string() + "' does not exist");
            }
            if (!(dataset.test_fraction > 0.0 && dataset.test_fraction < 1.0)) {
                throw ConfigError("dataset.test_fraction must lie in (0, 1)");
            }
        }
        if (method == Method::ldmae &&
            (partition.clusters != 1 || partition.kind != PartitionKind::indicator)) {
            throw ConfigError("method ldmae requires partition.clusters = 1 and partition.kind = indicator");
        }
        if (method == Method::mldmae && partition.clusters < 1) throw ConfigError("partition.clusters must be >= 1");
        if (partition.kind == PartitionKind::smooth && !(partition.exponent > 1.0)) {
            throw ConfigError("partition.exponent must exceed 1 for smooth partitions");
        }
        if (partition.margin && !(*partition.margin >= 0.0)) throw ConfigError("partition.margin must be >= 0");
        if (method == Method::truth) {
            if (dataset.kind == DatasetKind::file) throw ConfigError("method truth needs a synthetic dataset");
        } else if (method != Method::kde) {
            arch.validate();
            prior.validate();
            train.validate(method == Method::ldmae ? 1 : partition.clusters);
            if (train.prior_refresh_rounds > 0 &&
                !(refresh_validation_fraction > 0.0 && refresh_validation_fraction < 1.0)) {
                throw ConfigError("train.refresh_validation_fraction must lie in (0, 1)");
            }
        } else {
            if (!(kde.grid_lo > 0.0 && kde.grid_hi >= kde.grid_lo) || kde.grid_count < 1) {
                throw ConfigError("kde grid needs 0 < lo <= hi and count >= 1");
            }
            if (!(kde.validation_fraction > 0.0 && kde.validation_fraction < 1.0)) {
                throw ConfigError("kde.validation_fraction must lie in (0, 1)");
            }
        }
        if (eval.n_eval < 1) throw ConfigError("eval.n_eval must be at least 1");
        if (eval.n_eval > eval.max_support) {
            throw ConfigError("eval.n_eval exceeds eval.max_support (" + std::to_string(eval.max_support) + ")");
        }
    }
};

namespace detail {

using Json = nlohmann::json;

inline void check_keys(const Json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (auto a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError("config: unknown field '" + (where.empty() ? key : where + "." + key) + "'");
    }
}

template <class T>
void read_field(const Json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config: field '" + (where.empty() ? std::string(key) : where + "." + key) +
                          "' has the wrong type");
    }
}

// Reads an enum through its from_string parser, reporting the field name.
template <class E, class F>
void read_enum(const Json& j, const char* key, E& out, F&& parse, const std::string& where) {
    std::string s;
    read_field(j, key, s, where);
    if (s.empty()) return;
    try {
        out = parse(s);
    } catch (const ConfigError& e) {
        throw ConfigError("config: field '" + (where.empty() ? std::string(key) : where + "." + key) + "': " +
                          e.what());
    }
}

inline DatasetKind dataset_kind_from_string(std::string_view s) {
    if (s == "spiral") return DatasetKind::spiral;
    if (s == "torus") return DatasetKind::torus;
    if (s == "sphere") return DatasetKind::sphere;
    if (s == "file") return DatasetKind::file;
    throw ConfigError("unknown dataset '" + std::string(s) + "'");
}

inline Method method_from_string(std::string_view s) {
    if (s == "mldmae") return Method::mldmae;
    if (s == "ldmae") return Method::ldmae;
    if (s == "kde") return Method::kde;
    if (s == "truth") return Method::truth;
    throw ConfigError("unknown method '" + std::string(s) + "'");
}

inline ValidationMetric validation_metric_from_string(std::string_view s) {
    if (s == "sliced_w1") return ValidationMetric::sliced_w1;
    if (s == "none") return ValidationMetric::none;
    throw ConfigError("unknown validation metric '" + std::string(s) + "'");
}

}  // namespace detail

/// Parses a config document. Unknown fields anywhere are errors; relative
/// dataset paths resolve against `base_dir`.
inline ExperimentConfig parse_experiment(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    using namespace detail;
    ExperimentConfig c;
    check_keys(j, {"name", "dataset", "method", "partition", "architecture", "prior", "train", "kde", "eval", "out",
                   "seed"},
               "");
    read_field(j, "name", c.name, "");
    read_enum(j, "method", c.method, method_from_string, "");
    std::string out;
    read_field(j, "out", out, "");
    if (!out.empty()) c.out = out;
    read_field(j, "seed", c.seed, "");

    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        check_keys(d, {"name", "path", "n_train", "test_fraction"}, "dataset");
        read_enum(d, "name", c.dataset.kind, dataset_kind_from_string, "dataset");
        std::string path;
        read_field(d, "path", path, "dataset");
        if (!path.empty()) {
            c.dataset.path = path;
            if (c.dataset.path.is_relative() && !base_dir.empty()) c.dataset.path = base_dir / c.dataset.path;
        }
        read_field(d, "n_train", c.dataset.n_train, "dataset");
        read_field(d, "test_fraction", c.dataset.test_fraction, "dataset");
    }
    if (j.contains("partition")) {
        const auto& p = j.at("partition");
        check_keys(p, {"kind", "clusters", "exponent", "margin", "max_iters"}, "partition");
        read_enum(p, "kind", c.partition.kind, partition_kind_from_string, "partition");
        read_field(p, "clusters", c.partition.clusters, "partition");
        read_field(p, "exponent", c.partition.exponent, "partition");
        if (p.contains("margin") && !p.at("margin").is_null()) {
            double m = 0.0;
            read_field(p, "margin", m, "partition");
            c.partition.margin = m;
        }
        read_field(p, "max_iters", c.partition.max_iters, "partition");
    } else if (c.method == Method::ldmae) {
        c.partition.clusters = 1;
        c.partition.kind = PartitionKind::indicator;
    }
    if (j.contains("architecture")) {
        const auto& a = j.at("architecture");
        check_keys(a, {"latent_dim", "hidden", "hidden_activation", "output_activation", "ambient_dim"},
                   "architecture");
        read_field(a, "latent_dim", c.arch.latent_dim, "architecture");
        read_field(a, "hidden", c.arch.hidden, "architecture");
        read_field(a, "ambient_dim", c.arch.ambient_dim, "architecture");
        read_enum(a, "hidden_activation", c.arch.hidden_activation, activation_from_string, "architecture");
        read_enum(a, "output_activation", c.arch.output_activation, activation_from_string, "architecture");
    }
    if (j.contains("prior")) {
        const auto& p = j.at("prior");
        check_keys(p, {"base", "radius"}, "prior");
        read_enum(p, "base", c.prior.base, prior_base_from_string, "prior");
        read_field(p, "radius", c.prior.radius, "prior");
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        check_keys(t, {"lambda", "penalty", "batch_size", "epochs", "h", "learning_rate", "beta1", "beta2", "adam_eps",
                       "prior_refresh_rounds", "refresh_metric", "refresh_validation_samples",
                       "refresh_validation_fraction"},
                   "train");
        if (t.contains("lambda") && t.at("lambda").is_number()) {
            c.train.lambda = {t.at("lambda").get<double>()};
        } else {
            read_field(t, "lambda", c.train.lambda, "train");
        }
        read_field(t, "batch_size", c.train.batch_size, "train");
        read_field(t, "epochs", c.train.epochs, "train");
        read_field(t, "h", c.train.h, "train");
        read_field(t, "learning_rate", c.train.learning_rate, "train");
        read_field(t, "beta1", c.train.beta1, "train");
        read_field(t, "beta2", c.train.beta2, "train");
        read_field(t, "adam_eps", c.train.adam_eps, "train");
        read_field(t, "prior_refresh_rounds", c.train.prior_refresh_rounds, "train");
        read_enum(t, "refresh_metric", c.train.refresh_metric, validation_metric_from_string, "train");
        read_field(t, "refresh_validation_samples", c.train.refresh_validation_samples, "train");
        read_field(t, "refresh_validation_fraction", c.refresh_validation_fraction, "train");
        if (t.contains("penalty")) {
            const auto& p = t.at("penalty");
            check_keys(p, {"kind", "kernel", "kernel_scale", "metric", "num_projections"}, "train.penalty");
            read_enum(p, "kind", c.train.penalty.kind, penalty_kind_from_string, "train.penalty");
            read_enum(p, "kernel", c.train.penalty.kernel.family, kernel_family_from_string, "train.penalty");
            if (p.contains("kernel_scale") && !p.at("kernel_scale").is_null()) {
                read_field(p, "kernel_scale", c.train.penalty.kernel.scale, "train.penalty");
                c.train.penalty.imq_two_d = false;
                c.train.penalty.kernel.validate();
            }
            read_enum(p, "metric", c.train.penalty.metric, ground_metric_from_string, "train.penalty");
            read_field(p, "num_projections", c.train.penalty.num_projections, "train.penalty");
        }
    }
    if (j.contains("kde")) {
        const auto& k = j.at("kde");
        check_keys(k, {"grid_lo", "grid_hi", "grid_count", "validation_fraction"}, "kde");
        read_field(k, "grid_lo", c.kde.grid_lo, "kde");
        read_field(k, "grid_hi", c.kde.grid_hi, "kde");
        read_field(k, "grid_count", c.kde.grid_count, "kde");
        read_field(k, "validation_fraction", c.kde.validation_fraction, "kde");
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        check_keys(e, {"n_eval", "metric", "max_support"}, "eval");
        read_field(e, "n_eval", c.eval.n_eval, "eval");
        read_enum(e, "metric", c.eval.metric, ground_metric_from_string, "eval");
        read_field(e, "max_support", c.eval.max_support, "eval");
    }
    if (c.dataset.kind != DatasetKind::file) c.arch.ambient_dim = c.dim();
    c.arch.clusters = c.method == Method::ldmae ? 1 : c.partition.clusters;
    c.train.seed = c.seed;
    c.validate();
    return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return parse_experiment(j, path.parent_path());
}

/// Replaces the seed everywhere it is used.
inline void set_seed(ExperimentConfig& c, std::uint64_t seed) {
    c.seed = seed;
    c.train.seed = seed;
}

// ---------------------------------------------------------------------------
// Seed streams. Training data uses the seed itself so that gen_*(n, seed)
// is the training cloud.
inline std::uint64_t test_seed(std::uint64_t seed) { return mix_seed(seed, 1); }
inline std::uint64_t sample_seed(std::uint64_t seed) { return mix_seed(seed, 2); }
inline std::uint64_t split_seed(std::uint64_t seed) { return mix_seed(seed, 3); }

inline bool is_synthetic(const ExperimentConfig& c) { return c.dataset.kind != DatasetKind::file; }

inline PointCloud generate(DatasetKind kind, std::size_t n, std::uint64_t seed) {
    switch (kind) {
        case DatasetKind::spiral: return gen_spiral(n, seed);
        case DatasetKind::torus: return gen_torus(n, seed);
        case DatasetKind::sphere: return gen_sphere(n, seed);
        case DatasetKind::file: break;
    }
    throw ConfigError("file datasets have no generating distribution");
}

/// n points from the configured synthetic distribution.
inline PointCloud truth_sample(const ExperimentConfig& c, std::size_t n, std::uint64_t seed) {
    return generate(c.dataset.kind, n, seed);
}

struct Dataset {
    PointCloud train;
    PointCloud test;
};

/// Synthetic: n_train training points and n_eval fresh test points.
/// File: the file's rows split by test_fraction.
inline Dataset make_dataset(const ExperimentConfig& c) {
    if (is_synthetic(c)) {
        return {truth_sample(c, c.dataset.n_train, c.seed), truth_sample(c, c.eval.n_eval, test_seed(c.seed))};
    }
    const auto all = load_cloud(c.dataset.path);
    if (all.dim() != c.arch.ambient_dim) {
        throw ShapeError("dataset '" + c.dataset.path.string() + "' has " + std::to_string(all.dim()) +
                         " columns but architecture.ambient_dim is " + std::to_string(c.arch.ambient_dim));
    }
    auto [train, test] = split(all, 1.0 - c.dataset.test_fraction, split_seed(c.seed));
    return {std::move(train), std::move(test)};
}

struct KdeModel {
    PointCloud train;
    double bandwidth = 0.0;
    std::vector<double> grid;
};

/// A fitted estimator: a mixture checkpoint, a KDE, or the true distribution.
struct Fitted {
    Method method = Method::mldmae;
    std::optional<MixtureModel> model;
    std::optional<KdeModel> kde;
    std::optional<DatasetKind> truth;
    TrainHistory history;
    std::vector<RefreshRecord> refresh_rounds;
    double runtime_seconds = 0.0;

    std::size_t param_count() const { return model ? mldmae::param_count(model->arch) : 0; }

    PointCloud sample(std::size_t m, std::uint64_t seed) const {
        if (model) return sample_model(*model, m, seed);
        if (truth) return generate(*truth, m, seed);
        return kde_sample(kde->train, kde->bandwidth, m, seed);
    }
};

inline PartitionOfUnity build_partition(const ExperimentConfig& c, const PointCloud& train) {
    if (c.method == Method::ldmae) return PartitionOfUnity::global(train.dim());
    return fit_partition(train, c.partition.clusters, c.seed, c.partition.margin, c.partition.exponent,
                         c.partition.kind, c.partition.max_iters);
}

/// Trains the configured estimator on `train`.
inline Fitted fit(const ExperimentConfig& c, const PointCloud& train) {
    const auto t0 = std::chrono::steady_clock::now();
    Fitted f;
    f.method = c.method;
    if (c.method == Method::truth) {
        f.truth = c.dataset.kind;
    } else if (c.method == Method::kde) {
        auto [fit_part, val_part] = split(train, 1.0 - c.kde.validation_fraction, split_seed(c.seed));
        KdeModel k;
        k.grid = log_grid(c.kde.grid_lo, c.kde.grid_hi, c.kde.grid_count);
        TransportOptions topts{c.eval.metric, c.eval.max_support};
        k.bandwidth = select_kde_bandwidth(fit_part, val_part, k.grid, c.seed, topts);
        k.train = train;
        f.kde = std::move(k);
    } else {
        PointCloud fit_data = train;
        std::optional<PointCloud> validation;
        if (c.train.prior_refresh_rounds > 0 && c.train.refresh_metric == ValidationMetric::sliced_w1) {
            auto parts = split(train, 1.0 - c.refresh_validation_fraction, split_seed(c.seed));
            fit_data = std::move(parts.first);
            validation = std::move(parts.second);
        }
        const auto pou = build_partition(c, fit_data);
        auto result = mldmae::train(fit_data, pou, c.arch, c.prior, c.train);
        f.history = std::move(result.history);
        if (c.train.prior_refresh_rounds > 0) {
            auto r = refresh_priors(result.model, fit_data, c.train, c.train.prior_refresh_rounds,
                                    validation ? &*validation : nullptr);
            f.model = std::move(r.model);
            f.refresh_rounds = std::move(r.rounds);
        } else {
            f.model = std::move(result.model);
        }
    }
    f.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return f;
}

/// Loss history of the initial fit followed by any refresh rounds, with
/// epochs numbered consecutively.
inline TrainHistory combined_history(const Fitted& f) {
    TrainHistory h = f.history;
    std::size_t next = h.epochs.size();
    for (const auto& r : f.refresh_rounds) {
        for (auto e : r.history.epochs) {
            e.epoch = next++;
            h.epochs.push_back(e);
        }
    }
    return h;
}

struct Evaluation {
    EvalReport report;
    PointCloud samples;
    PointCloud truth;
};

inline std::string cloud_text(const PointCloud& cloud) {
    std::ostringstream os;
    write_cloud(os, cloud.points);
    return os.str();
}

/// W1 between n_eval model samples and the test cloud (fresh truth for
/// synthetic data). `extra_seconds` is added to the reported runtime.
inline Evaluation evaluate_fitted(const ExperimentConfig& c, const Fitted& f, const PointCloud& test,
                                  double extra_seconds = 0.0) {
    const auto t0 = std::chrono::steady_clock::now();
    Evaluation ev;
    const std::size_t n = std::min(c.eval.n_eval, test.size());
    if (n == 0) throw ConfigError("evaluation needs a non-empty test set");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    ev.truth = subset(test, idx);
    ev.samples = f.sample(n, sample_seed(c.seed));
    TransportOptions topts{c.eval.metric, c.eval.max_support};
    ev.report.method = c.name.empty() ? std::string(to_string(c.method)) : c.name;
    ev.report.w1_to_truth = w1_discrete_exact(ev.truth.points, ev.samples.points, topts);
    ev.report.param_count = f.param_count();
    ev.report.fingerprint = fingerprint(cloud_text(ev.samples));
    ev.report.runtime_seconds =
        extra_seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return ev;
}

/// Full pipeline in memory: data, fit, evaluate.
inline Evaluation run_experiment(const ExperimentConfig& c, Fitted* fitted_out = nullptr) {
    const auto data = make_dataset(c);
    Fitted f = fit(c, data.train);
    auto ev = evaluate_fitted(c, f, data.test, f.runtime_seconds);
    if (fitted_out) *fitted_out = std::move(f);
    return ev;
}

// ---------------------------------------------------------------------------
// KDE persistence: bandwidth and grid; the training cloud lives beside it.

inline nlohmann::ordered_json kde_json(const KdeModel& k) {
    nlohmann::ordered_json j;
    j["schema"] = "mldmae-kde";
    j["version"] = 1;
    j["bandwidth"] = k.bandwidth;
    j["grid"] = k.grid;
    return j;
}

inline KdeModel kde_from_json(const nlohmann::json& j, PointCloud train) {
    KdeModel k;
    try {
        if (j.at("schema").get<std::string>() != "mldmae-kde") throw ParseError("kde file: field 'schema' is wrong");
        k.bandwidth = j.at("bandwidth").get<double>();
        k.grid = j.at("grid").get<std::vector<double>>();
    } catch (const nlohmann::json::exception&) {
        throw ParseError("kde file: missing or invalid field");
    }
    if (!(k.bandwidth > 0.0)) throw ParseError("kde file: field 'bandwidth' must be positive");
    k.train = std::move(train);
    return k;
}

}  // namespace mldmae
