#pragma once

// Minibatch training of the mixture: rejection partitioning of each batch,
// reconstruction plus latent-penalty objective, Adam updates, and rounds of
// data-driven prior refresh.

#include "mldmae/discrepancy.hpp"
#include "mldmae/mixmodel.hpp"

#include <functional>
#include <ostream>

namespace mldmae {

enum class ValidationMetric { sliced_w1, none };

struct TrainConfig {
    // One value per cluster, or a single value used for every cluster.
    std::vector<double> lambda = {10.0};
    DiscrepancySpec penalty;
    std::size_t batch_size = 256;
    std::size_t epochs = 50;
    double h = 0.01;
    std::size_t prior_refresh_rounds = 0;
    std::uint64_t seed = 0;
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    ValidationMetric refresh_metric = ValidationMetric::sliced_w1;
    std::size_t refresh_validation_samples = 2000;

    double lambda_for(std::size_t k) const { return lambda.size() == 1 ? lambda.front() : lambda.at(k); }

    void validate(std::size_t clusters) const {
        if (lambda.size() != 1 && lambda.size() != clusters) {
            throw ConfigError("lambda must have 1 or K = " + std::to_string(clusters) + " entries");
        }
        for (double l : lambda) {
            if (!(l > 0.0)) throw ConfigError("lambda values must be positive");
        }
        if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
        if (!(h >= 0.0)) throw ConfigError("h must be nonnegative");
        AdamState::for_size(0, learning_rate, beta1, beta2, adam_eps);
    }
};

/// Per-cluster subsets of a minibatch (indices into the batch).
struct MinibatchSplit {
    std::vector<std::vector<std::size_t>> members;
    std::size_t uncovered = 0;
};

/// Point X joins cluster k's subset iff u <= rho_k(X) for an independent
/// u ~ Unif(0, 1). Weights of exactly 0 or 1 are decided without a draw.
/// Uncovered points are skipped and counted.
inline MinibatchSplit partition_minibatch(const Matrix& batch, const PartitionOfUnity& pou, Rng& rng) {
    const std::size_t k_count = pou.size();
    MinibatchSplit split;
    split.members.resize(k_count);
    std::vector<std::vector<double>> rho;
    std::vector<std::size_t> covered;
    rho.reserve(batch.rows());
    for (std::size_t i = 0; i < batch.rows(); ++i) {
        try {
            rho.push_back(pou.evaluate(batch.row(i)));
            covered.push_back(i);
        } catch (const UncoveredPointError&) {
            ++split.uncovered;
        }
    }
    for (std::size_t k = 0; k < k_count; ++k) {
        for (std::size_t c = 0; c < covered.size(); ++c) {
            const double r = rho[c][k];
            if (r <= 0.0) continue;
            if (r >= 1.0 || rng.uniform() <= r) split.members[k].push_back(covered[c]);
        }
    }
    return split;
}

inline MinibatchSplit partition_minibatch(const Matrix& batch, const PartitionOfUnity& pou, std::uint64_t seed) {
    Rng rng(seed);
    return partition_minibatch(batch, pou, rng);
}

/// Everything random in one objective evaluation, fixed up front.
struct ClusterInputs {
    Matrix data;                      // D~_k
    Matrix prior_samples;             // L_k
    std::vector<std::size_t> picks;   // rows of data used for E_k
    Matrix noise;                     // standard normals, picks.size() x d
};

struct ObjectiveValue {
    double total = 0.0;
    double reconstruction = 0.0;
    double penalty = 0.0;           // sum_k D_k
    double weighted_penalty = 0.0;  // sum_k lambda_k D_k
    std::size_t skipped_penalties = 0;
    std::vector<double> grad;       // ParamStore-shaped
};

/// sum_k [ p_k/|D_k| sum_X |X - G_k(Q_k(X))|^2 + lambda_k D(L_k, E_k) ]
/// with E_k = Q_k(D_k[picks]) + sqrt(h) noise. Clusters with empty D_k
/// contribute nothing; clusters with |D_k| < 2 skip the penalty.
inline ObjectiveValue objective(const MixtureModel& model, const TrainConfig& config,
                                std::span<const ClusterInputs> inputs, std::uint64_t penalty_seed = 0) {
    const std::size_t k_count = model.clusters();
    if (inputs.size() != k_count) throw ShapeError("objective needs one input block per cluster");
    ObjectiveValue out;
    out.grad.assign(model.params.total_len(), 0.0);
    const double sqrt_h = std::sqrt(model.h);
    for (std::size_t k = 0; k < k_count; ++k) {
        const auto& in = inputs[k];
        const std::size_t n = in.data.rows();
        if (n == 0) continue;
        if (in.data.cols() != model.arch.ambient_dim) throw ShapeError("cluster data has the wrong dimension");
        const auto enc = encode_pass(model, k, in.data);
        const Matrix& z = enc.output();
        const auto dec = decode_pass(model, k, z);
        const Matrix& xr = dec.output();
        const double scale = model.weights.values[k] / static_cast<double>(n);
        double rec = 0.0;
        Matrix up_dec(n, model.arch.ambient_dim);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < model.arch.ambient_dim; ++c) {
                const double diff = xr(i, c) - in.data(i, c);
                rec += diff * diff;
                up_dec(i, c) = 2.0 * scale * diff;
            }
        }
        out.reconstruction += scale * rec;
        Matrix up_enc = accumulate_decoder_grad(model, k, dec, up_dec, out.grad);

        if (n >= 2) {
            const std::size_t m = in.picks.size();
            if (in.noise.rows() != m || in.noise.cols() != model.arch.latent_dim) {
                throw ShapeError("noise block shape differs from picks x latent_dim");
            }
            Matrix encoded(m, model.arch.latent_dim);
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < model.arch.latent_dim; ++c) {
                    encoded(r, c) = z(in.picks[r], c) + sqrt_h * in.noise(r, c);
                }
            }
            const auto pen = penalty_with_grad(config.penalty, in.prior_samples, encoded, mix_seed(penalty_seed, k));
            const double lam = config.lambda_for(k);
            out.penalty += pen.value;
            out.weighted_penalty += lam * pen.value;
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < model.arch.latent_dim; ++c) {
                    up_enc(in.picks[r], c) += lam * pen.grad(r, c);
                }
            }
        } else {
            ++out.skipped_penalties;
        }
        accumulate_encoder_grad(model, k, enc, up_enc, out.grad);
    }
    out.total = out.reconstruction + out.weighted_penalty;
    return out;
}

struct StepRecord {
    double total = 0.0;
    double reconstruction = 0.0;
    double penalty = 0.0;
    double weighted_penalty = 0.0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double reconstruction = 0.0;
    double penalty = 0.0;
    double total = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::vector<StepRecord> steps;
    std::size_t uncovered_skipped = 0;
    std::size_t penalties_skipped = 0;
};

/// Loss history CSV: header then epoch,reconstruction,penalty,total.
inline void write_loss_csv(std::ostream& os, const TrainHistory& h) {
    os << "epoch,reconstruction,penalty,total\n";
    for (const auto& e : h.epochs) {
        os << e.epoch << ',' << format_double(e.reconstruction) << ',' << format_double(e.penalty) << ','
           << format_double(e.total) << '\n';
    }
}

namespace detail {

// Fills picks and noise for one cluster, then draws its prior sample.
inline ClusterInputs draw_cluster_inputs(const MixtureModel& model, std::size_t k, Matrix data, Rng& rng,
                                         std::uint64_t prior_seed) {
    ClusterInputs in;
    const std::size_t n = data.rows();
    in.data = std::move(data);
    in.picks.resize(n);
    for (auto& p : in.picks) p = rng.index(n);
    in.noise = Matrix(n, model.arch.latent_dim);
    for (double& v : in.noise.data()) v = rng.normal();
    in.prior_samples = sample_prior(model.priors[k], model, k, n, prior_seed);
    return in;
}

inline void check_finite(const ObjectiveValue& v, std::size_t step) {
    if (!std::isfinite(v.reconstruction)) {
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (reconstruction)");
    }
    if (!std::isfinite(v.weighted_penalty)) {
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (penalty)");
    }
    for (double g : v.grad) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient at step " + std::to_string(step));
    }
}

inline void close_epoch(TrainHistory& hist, std::size_t epoch, std::size_t first_step) {
    EpochRecord e;
    e.epoch = epoch;
    const std::size_t count = hist.steps.size() - first_step;
    for (std::size_t s = first_step; s < hist.steps.size(); ++s) {
        e.reconstruction += hist.steps[s].reconstruction;
        e.penalty += hist.steps[s].penalty;
        e.total += hist.steps[s].total;
    }
    if (count > 0) {
        e.reconstruction /= static_cast<double>(count);
        e.penalty /= static_cast<double>(count);
        e.total /= static_cast<double>(count);
    }
    hist.epochs.push_back(e);
}

}  // namespace detail

/// Model with p_k estimated on the full training set and freshly initialized networks.
inline MixtureModel make_model(const PointCloud& data, const PartitionOfUnity& pou, const MixtureArchitecture& arch,
                               const Prior& prior, const TrainConfig& config) {
    MixtureArchitecture a = arch;
    a.clusters = pou.size();
    a.ambient_dim = data.dim();
    return init_model(a, pou, mixture_weights(pou, data), config.h, prior, mix_seed(config.seed, 7));
}

/// epochs x ceil(n / batch_size) Adam steps on the objective, in place.
inline TrainHistory train_model(MixtureModel& model, const PointCloud& data, const TrainConfig& config) {
    config.validate(model.clusters());
    if (data.dim() != model.arch.ambient_dim) throw ShapeError("training data dimension differs from the model's");
    model.h = config.h;
    const std::size_t n = data.size();
    const std::size_t k_count = model.clusters();
    auto adam = AdamState::for_size(model.params.total_len(), config.learning_rate, config.beta1, config.beta2,
                                    config.adam_eps);
    Rng rng(config.seed);
    TrainHistory hist;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto perm = rng.permutation(n);
        const std::size_t first_step = hist.steps.size();
        for (std::size_t start = 0; start < n; start += config.batch_size) {
            const std::size_t stop = std::min(n, start + config.batch_size);
            const Matrix batch = data.points.gather(std::span(perm).subspan(start, stop - start));
            const auto split = partition_minibatch(batch, model.pou, rng);
            hist.uncovered_skipped += split.uncovered;
            std::vector<ClusterInputs> inputs(k_count);
            for (std::size_t k = 0; k < k_count; ++k) {
                if (split.members[k].empty()) continue;
                inputs[k] = detail::draw_cluster_inputs(model, k, batch.gather(split.members[k]), rng,
                                                        mix_seed(config.seed, step * k_count + k + 1));
            }
            const auto value = objective(model, config, inputs, mix_seed(config.seed ^ 0x5151, step));
            detail::check_finite(value, step);
            hist.penalties_skipped += value.skipped_penalties;
            hist.steps.push_back({value.total, value.reconstruction, value.penalty, value.weighted_penalty});
            adam_step(model.params, value.grad, adam);
            ++step;
        }
        detail::close_epoch(hist, epoch, first_step);
    }
    return hist;
}

struct TrainResult {
    MixtureModel model;
    TrainHistory history;
};

inline TrainResult train(const PointCloud& data, const PartitionOfUnity& pou, const MixtureArchitecture& arch,
                         const Prior& prior, const TrainConfig& config) {
    TrainResult r{make_model(data, pou, arch, prior, config), {}};
    r.history = train_model(r.model, data, config);
    return r;
}

/// Plain single-pair LDMAE training loop: mean reconstruction over the whole
/// batch plus lambda times the latent penalty, without any partition. Draws
/// randomness in the same order as train_model so the K = 1 global-indicator
/// mixture reproduces it exactly.
inline TrainHistory train_ldmae(MixtureModel& model, const PointCloud& data, const TrainConfig& config) {
    if (model.clusters() != 1) throw ConfigError("LDMAE training needs K = 1");
    config.validate(1);
    model.h = config.h;
    const std::size_t n = data.size();
    auto adam = AdamState::for_size(model.params.total_len(), config.learning_rate, config.beta1, config.beta2,
                                    config.adam_eps);
    Rng rng(config.seed);
    TrainHistory hist;
    std::size_t step = 0;
    const double lam = config.lambda_for(0);
    const double sqrt_h = std::sqrt(model.h);
    const std::size_t d = model.arch.latent_dim;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto perm = rng.permutation(n);
        const std::size_t first_step = hist.steps.size();
        for (std::size_t start = 0; start < n; start += config.batch_size) {
            const std::size_t stop = std::min(n, start + config.batch_size);
            const Matrix batch = data.points.gather(std::span(perm).subspan(start, stop - start));
            const std::size_t b = batch.rows();
            std::vector<std::size_t> picks(b);
            for (auto& p : picks) p = rng.index(b);
            Matrix noise(b, d);
            for (double& v : noise.data()) v = rng.normal();
            const Matrix prior = sample_prior(model.priors[0], model, 0, b, mix_seed(config.seed, step + 1));

            std::vector<double> grad(model.params.total_len(), 0.0);
            const auto enc = encode_pass(model, 0, batch);
            const auto dec = decode_pass(model, 0, enc.output());
            const double scale = model.weights.values[0] / static_cast<double>(b);
            double rec = 0.0;
            Matrix up_dec(b, model.arch.ambient_dim);
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t c = 0; c < model.arch.ambient_dim; ++c) {
                    const double diff = dec.output()(i, c) - batch(i, c);
                    rec += diff * diff;
                    up_dec(i, c) = 2.0 * scale * diff;
                }
            }
            StepRecord rec_step;
            rec_step.reconstruction = scale * rec;
            Matrix up_enc = accumulate_decoder_grad(model, 0, dec, up_dec, grad);
            if (b >= 2) {
                Matrix encoded(b, d);
                for (std::size_t r = 0; r < b; ++r) {
                    for (std::size_t c = 0; c < d; ++c) encoded(r, c) = enc.output()(picks[r], c) + sqrt_h * noise(r, c);
                }
                const auto pen = penalty_with_grad(config.penalty, prior, encoded,
                                                   mix_seed(mix_seed(config.seed ^ 0x5151, step), 0));
                rec_step.penalty = pen.value;
                rec_step.weighted_penalty = lam * pen.value;
                for (std::size_t r = 0; r < b; ++r) {
                    for (std::size_t c = 0; c < d; ++c) up_enc(picks[r], c) += lam * pen.grad(r, c);
                }
            } else {
                ++hist.penalties_skipped;
            }
            accumulate_encoder_grad(model, 0, enc, up_enc, grad);
            rec_step.total = rec_step.reconstruction + rec_step.weighted_penalty;
            ObjectiveValue check;
            check.reconstruction = rec_step.reconstruction;
            check.weighted_penalty = rec_step.weighted_penalty;
            check.grad = grad;
            detail::check_finite(check, step);
            hist.steps.push_back(rec_step);
            adam_step(model.params, grad, adam);
            ++step;
        }
        detail::close_epoch(hist, epoch, first_step);
    }
    return hist;
}

struct RefreshRecord {
    std::size_t round = 0;
    double validation = 0.0;
    TrainHistory history;
};

struct RefreshResult {
    MixtureModel model;
    double baseline_validation = 0.0;
    std::vector<RefreshRecord> rounds;
    bool stopped_early = false;
};

/// Held-out sliced W1 between model samples and a validation cloud.
inline double validation_score(const MixtureModel& model, const PointCloud& validation, const TrainConfig& config,
                               std::uint64_t seed) {
    const std::size_t m = std::min(config.refresh_validation_samples, validation.size());
    const auto gen = sample_model(model, m, seed);
    std::vector<std::size_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = i;
    return sliced_w1(gen.points, validation.points.gather(idx), 100, mix_seed(seed, 3));
}

/// Rounds of: priors := base prior reweighted by rho_k(G_k(.)) with G_k frozen
/// at the round's starting parameters, retrain from those parameters. With a validation metric, stops after the first
/// round that fails to improve and returns the best model seen.
inline RefreshResult refresh_priors(const MixtureModel& trained, const PointCloud& data, const TrainConfig& config,
                                    std::size_t rounds, const PointCloud* validation = nullptr) {
    if (rounds < 1) throw ConfigError("prior refresh needs at least one round");
    RefreshResult res;
    res.model = trained;
    const bool early_stop = validation != nullptr && config.refresh_metric == ValidationMetric::sliced_w1;
    double best = 0.0;
    if (early_stop) {
        best = validation_score(res.model, *validation, config, mix_seed(config.seed, 99));
        res.baseline_validation = best;
    }
    MixtureModel current = trained;
    for (std::size_t l = 0; l < rounds; ++l) {
        for (auto& p : current.priors) p.reweighted = true;
        current.prior_reference = current.params;
        // Surface a collapsed prior before spending a training pass on it.
        for (std::size_t k = 0; k < current.clusters(); ++k) {
            if (current.weights.values[k] > 0.0) sample_prior(current.priors[k], current, k, 1, mix_seed(config.seed, 77 + k));
        }
        TrainConfig round_config = config;
        round_config.seed = mix_seed(config.seed, 500 + l);
        RefreshRecord rec;
        rec.round = l + 1;
        rec.history = train_model(current, data, round_config);
        if (early_stop) {
            rec.validation = validation_score(current, *validation, config, mix_seed(config.seed, 99));
            res.rounds.push_back(std::move(rec));
            if (!(res.rounds.back().validation < best)) {
                res.stopped_early = true;
                break;
            }
            best = res.rounds.back().validation;
        } else {
            res.rounds.push_back(std::move(rec));
        }
        res.model = current;
    }
    return res;
}

}  // namespace mldmae
