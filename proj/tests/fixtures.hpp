#pragma once

// Small hand-built models shared by the unit tests.

#include "mldmae/experiment.hpp"

namespace fixture {

using namespace mldmae;

/// D = d = 1, one hidden unit, identity activations, every weight 1 and
/// every bias 0, so encode and decode are both the identity map.
inline MixtureModel identity_model(std::size_t clusters = 1, PriorBase base = PriorBase::std_gaussian) {
    MixtureArchitecture a;
    a.ambient_dim = 1;
    a.latent_dim = 1;
    a.hidden = {1};
    a.clusters = clusters;
    a.hidden_activation = Activation::identity;
    a.output_activation = Activation::identity;
    Matrix centers(clusters, 1);
    for (std::size_t k = 0; k < clusters; ++k) centers(k, 0) = static_cast<double>(k);
    auto pou = clusters == 1 ? PartitionOfUnity::global(1)
                             : PartitionOfUnity(PartitionKind::indicator, centers,
                                                std::vector<double>(clusters, 100.0), 0.0, 2.0);
    std::vector<double> w(clusters, 1.0 / static_cast<double>(clusters));
    Prior prior;
    prior.base = base;
    auto m = init_model(a, pou, {w}, 0.0, prior, 0);
    // Each layer is 1 -> 1: [weight, bias].
    for (auto& v : m.params.values()) v = 0.0;
    for (const auto& s : m.params.segments()) m.params.values()[s.offset] = 1.0;
    return m;
}

/// Small sphere experiment used by the trainer and pipeline tests.
inline ExperimentConfig small_sphere(std::size_t epochs = 3) {
    ExperimentConfig c;
    c.name = "small_sphere";
    c.dataset.kind = DatasetKind::sphere;
    c.dataset.n_train = 300;
    c.method = Method::mldmae;
    c.partition.clusters = 4;
    c.arch.ambient_dim = 3;
    c.arch.latent_dim = 2;
    c.arch.hidden = {16};
    c.arch.clusters = 4;
    c.train.epochs = epochs;
    c.train.batch_size = 64;
    c.train.learning_rate = 0.005;
    c.train.refresh_metric = ValidationMetric::none;
    c.eval.n_eval = 200;
    c.validate();
    return c;
}

}  // namespace fixture
