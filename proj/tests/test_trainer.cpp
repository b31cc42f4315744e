#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace mldmae;

namespace {

PartitionOfUnity two_in_1d(PartitionKind kind) {
    Matrix c(2, 1);
    c(1, 0) = 2.0;
    return PartitionOfUnity(kind, c, {1.5, 1.5}, 0.0, 10.0);
}

TrainConfig quick_config(std::size_t epochs = 2) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 50;
    t.learning_rate = 0.005;
    t.refresh_metric = ValidationMetric::none;
    return t;
}

MixtureArchitecture small_arch() {
    MixtureArchitecture a;
    a.latent_dim = 1;
    a.hidden = {8};
    return a;
}

}  // namespace

TEST(MinibatchSplit, IndicatorIsExact) {
    const auto pou = two_in_1d(PartitionKind::indicator);
    Matrix batch(4, 1);
    batch(0, 0) = -0.5;
    batch(1, 0) = 0.9;
    batch(2, 0) = 1.1;
    batch(3, 0) = 9.0;
    const auto s = partition_minibatch(batch, pou, 3);
    EXPECT_EQ(s.members[0], (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(s.members[1], (std::vector<std::size_t>{2}));
    EXPECT_EQ(s.uncovered, 1u);
}

TEST(MinibatchSplit, HalfWeightIsACoinFlip) {
    // At the midpoint both weights are 1/2 and memberships are independent.
    const auto pou = two_in_1d(PartitionKind::smooth);
    const std::size_t n = 10000;
    const Matrix batch(n, 1, 1.0);
    const auto s = partition_minibatch(batch, pou, 4);
    EXPECT_NEAR(static_cast<double>(s.members[0].size()) / n, 0.5, 0.02);
    EXPECT_NEAR(static_cast<double>(s.members[1].size()) / n, 0.5, 0.02);
    std::vector<int> seen(n, 0);
    for (const auto& m : s.members) {
        for (auto i : m) ++seen[i];
    }
    EXPECT_NEAR(static_cast<double>(std::count(seen.begin(), seen.end(), 2)) / n, 0.25, 0.02);
    EXPECT_NEAR(static_cast<double>(std::count(seen.begin(), seen.end(), 0)) / n, 0.25, 0.02);
}

TEST(MinibatchSplit, DeterministicForSeed) {
    const auto pou = two_in_1d(PartitionKind::smooth);
    Rng rng(5);
    const Matrix batch = oracle::random_matrix(200, 1, rng, 1.5);
    const auto a = partition_minibatch(batch, pou, 7), b = partition_minibatch(batch, pou, 7);
    EXPECT_EQ(a.members, b.members);
}

TEST(Objective, PerfectAutoencoderHasNoReconstructionLoss) {
    const auto m = fixture::identity_model();
    TrainConfig t;
    t.lambda = {1e-30};
    Rng rng(1);
    ClusterInputs in;
    in.data = oracle::random_matrix(8, 1, rng);
    in.prior_samples = oracle::random_matrix(8, 1, rng);
    in.picks = {0, 1, 2, 3, 4, 5, 6, 7};
    in.noise = Matrix(8, 1);
    const std::vector<ClusterInputs> inputs = {in};
    const auto v = objective(m, t, inputs);
    EXPECT_EQ(v.reconstruction, 0.0);
    EXPECT_LT(v.total, 1e-28);
}

TEST(Objective, ReconstructionByHand) {
    // Decoder adds 1, so every squared error is 1 and the mean is 1.
    auto m = fixture::identity_model();
    m.params.values()[m.params.segment_info("decoder.trunk").offset + 1] = 1.0;
    TrainConfig t;
    Rng rng(2);
    ClusterInputs in;
    in.data = oracle::random_matrix(5, 1, rng);
    in.prior_samples = oracle::random_matrix(5, 1, rng);
    in.picks = {0, 1, 2, 3, 4};
    in.noise = Matrix(5, 1);
    const std::vector<ClusterInputs> inputs = {in};
    const auto v = objective(m, t, std::span<const ClusterInputs>(inputs));
    EXPECT_DOUBLE_EQ(v.reconstruction, 1.0);
}

TEST(Objective, SingletonClusterSkipsPenalty) {
    const auto m = fixture::identity_model();
    ClusterInputs in;
    in.data = Matrix(1, 1, 0.5);
    const std::vector<ClusterInputs> inputs = {in};
    const auto v = objective(m, TrainConfig{}, std::span<const ClusterInputs>(inputs));
    EXPECT_EQ(v.skipped_penalties, 1u);
    EXPECT_EQ(v.penalty, 0.0);
}

TEST(Objective, GradientMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto r = oracle::check_objective(oracle::make_objective_toy(seed, 3));
        EXPECT_EQ(r.failed, 0u) << "toy " << seed << ", worst relative error " << r.worst_rel;
    }
}

TEST(Objective, RejectsWrongBlockCount) {
    const auto m = fixture::identity_model(2);
    const std::vector<ClusterInputs> inputs(1);
    EXPECT_THROW(objective(m, TrainConfig{}, std::span<const ClusterInputs>(inputs)), ShapeError);
}

TEST(Train, ZeroEpochsLeavesModelUnchanged) {
    const auto data = gen_spiral(200, 1);
    const auto pou = fit_partition(data, 3, 0, std::nullopt, 10.0, PartitionKind::smooth);
    auto cfg = quick_config(0);
    const auto r = train(data, pou, small_arch(), Prior{}, cfg);
    const auto fresh = make_model(data, pou, small_arch(), Prior{}, cfg);
    EXPECT_EQ(r.model.params, fresh.params);
    EXPECT_TRUE(r.history.epochs.empty());
    std::ostringstream os;
    write_loss_csv(os, r.history);
    EXPECT_EQ(os.str(), "epoch,reconstruction,penalty,total\n");
}

TEST(Train, StepLossDecomposes) {
    const auto data = gen_spiral(300, 2);
    const auto pou = fit_partition(data, 3, 0, std::nullopt, 10.0, PartitionKind::smooth);
    auto cfg = quick_config(3);
    cfg.lambda = {7.0};
    const auto r = train(data, pou, small_arch(), Prior{}, cfg);
    ASSERT_EQ(r.history.steps.size(), 3u * 6);
    ASSERT_EQ(r.history.epochs.size(), 3u);
    for (const auto& s : r.history.steps) {
        EXPECT_NEAR(s.total, s.reconstruction + s.weighted_penalty, 1e-9);
        EXPECT_NEAR(s.weighted_penalty, 7.0 * s.penalty, 1e-9 * std::max(1.0, s.weighted_penalty));
    }
    double mean = 0.0;
    for (std::size_t i = 0; i < 6; ++i) mean += r.history.steps[i].total / 6.0;
    EXPECT_NEAR(r.history.epochs[0].total, mean, 1e-12);
}

TEST(Train, Deterministic) {
    const auto data = gen_torus(300, 3);
    const auto pou = fit_partition(data, 4, 0, std::nullopt, 10.0, PartitionKind::smooth);
    auto cfg = quick_config(2);
    auto arch = small_arch();
    arch.latent_dim = 2;
    const auto a = train(data, pou, arch, Prior{}, cfg);
    const auto b = train(data, pou, arch, Prior{}, cfg);
    EXPECT_EQ(a.model.params, b.model.params);
    cfg.seed = 1;
    EXPECT_NE(train(data, pou, arch, Prior{}, cfg).model.params, a.model.params);
}

TEST(Train, ReducesTheLoss) {
    const auto data = gen_spiral(500, 4);
    const auto pou = fit_partition(data, 4, 0, std::nullopt, 10.0, PartitionKind::smooth);
    const auto r = train(data, pou, small_arch(), Prior{}, quick_config(30));
    EXPECT_LT(r.history.epochs.back().reconstruction, r.history.epochs.front().reconstruction);
}

TEST(Train, LdmaeEqualsSingleGlobalCluster) {
    const auto data = gen_spiral(230, 5);
    const auto pou = PartitionOfUnity::global(2);
    for (const auto kind : {PenaltyKind::w1, PenaltyKind::mmd, PenaltyKind::sliced_w1}) {
        auto cfg = quick_config(2);
        cfg.penalty.kind = kind;
        auto mixture = make_model(data, pou, small_arch(), Prior{}, cfg);
        auto plain = mixture;
        const auto hm = train_model(mixture, data, cfg);
        const auto hp = train_ldmae(plain, data, cfg);
        EXPECT_EQ(mixture.params, plain.params) << to_string(kind);
        ASSERT_EQ(hm.steps.size(), hp.steps.size());
        for (std::size_t i = 0; i < hm.steps.size(); ++i) EXPECT_EQ(hm.steps[i].total, hp.steps[i].total);
    }
}

TEST(Train, LdmaeNeedsOneCluster) {
    auto m = fixture::identity_model(2);
    EXPECT_THROW(train_ldmae(m, gen_spiral(10, 0), quick_config()), ConfigError);
}

TEST(Train, NonFiniteLossIsNumericError) {
    Matrix x(40, 2, 1e200);
    for (std::size_t i = 0; i < 40; ++i) x(i, 1) = -1e200 * static_cast<double>(i % 3);
    const PointCloud data(std::move(x));
    auto cfg = quick_config(1);
    auto m = make_model(data, PartitionOfUnity::global(2), small_arch(), Prior{}, cfg);
    EXPECT_THROW(train_model(m, data, cfg), NumericError);
}

TEST(Train, UncoveredPointsAreCounted) {
    const auto data = gen_spiral(100, 6);
    Matrix c(1, 2);
    PartitionOfUnity pou(PartitionKind::indicator, c, {1.0}, 0.0, 2.0);
    auto m = init_model([] {
        auto a = small_arch();
        a.ambient_dim = 2;
        a.clusters = 1;
        return a;
    }(), pou, {{1.0}}, 0.01, Prior{}, 0);
    std::size_t outside = 0;
    for (std::size_t i = 0; i < data.size(); ++i) outside += !pou.in_element(0, data.points.row(i));
    ASSERT_GT(outside, 0u);
    const auto h = train_model(m, data, quick_config(2));
    EXPECT_EQ(h.uncovered_skipped, 2 * outside);
}

TEST(Refresh, RecordsEveryRoundWithoutValidation) {
    const auto c = fixture::small_sphere(3);
    const auto data = gen_sphere(300, 0);
    const auto pou = build_partition(c, data);
    const auto trained = train(data, pou, c.arch, c.prior, c.train);
    const auto r = refresh_priors(trained.model, data, c.train, 2);
    ASSERT_EQ(r.rounds.size(), 2u);
    EXPECT_EQ(r.rounds[0].round, 1u);
    EXPECT_EQ(r.rounds[1].history.epochs.size(), 3u);
    EXPECT_FALSE(r.stopped_early);
    for (const auto& p : r.model.priors) EXPECT_TRUE(p.reweighted);
    ASSERT_TRUE(r.model.prior_reference.has_value());
    EXPECT_NE(*r.model.prior_reference, r.model.params);
}

TEST(Refresh, GlobalPartitionAcceptsEverything) {
    const auto data = gen_spiral(200, 7);
    auto cfg = quick_config(2);
    const auto trained = train(data, PartitionOfUnity::global(2), small_arch(), Prior{}, cfg);
    const auto r = refresh_priors(trained.model, data, cfg, 1);
    EXPECT_DOUBLE_EQ(prior_acceptance_rate(r.model.priors[0], r.model, 0, 500, 1), 1.0);
    EXPECT_TRUE(std::isfinite(r.rounds[0].history.epochs.back().total));
}

TEST(Refresh, EarlyStoppingKeepsBestModel) {
    auto c = fixture::small_sphere(2);
    c.train.refresh_metric = ValidationMetric::sliced_w1;
    c.train.refresh_validation_samples = 100;
    const auto all = gen_sphere(400, 1);
    const auto [data, validation] = split(all, 0.75, 2);
    const auto trained = train(data, build_partition(c, data), c.arch, c.prior, c.train);
    const auto r = refresh_priors(trained.model, data, c.train, 3, &validation);
    ASSERT_FALSE(r.rounds.empty());
    EXPECT_LE(r.rounds.size(), 3u);
    if (r.stopped_early) {
        const double last = r.rounds.back().validation;
        double best = r.baseline_validation;
        for (std::size_t i = 0; i + 1 < r.rounds.size(); ++i) best = std::min(best, r.rounds[i].validation);
        EXPECT_GE(last, best);
    }
    EXPECT_EQ(r.baseline_validation, validation_score(trained.model, validation, c.train, mix_seed(c.train.seed, 99)));
}

TEST(Refresh, NeedsARound) {
    const auto m = fixture::identity_model();
    EXPECT_THROW(refresh_priors(m, gen_spiral(10, 0), quick_config(), 0), ConfigError);
}
