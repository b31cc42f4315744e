#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace mldmae;

namespace {

MixtureModel random_model(std::size_t clusters, std::uint64_t seed) {
    MixtureArchitecture a;
    a.ambient_dim = 3;
    a.latent_dim = 2;
    a.hidden = {8, 6};
    a.clusters = clusters;
    a.hidden_activation = Activation::tanh;
    Matrix centers(clusters, 3);
    std::vector<double> w(clusters, 1.0 / static_cast<double>(clusters));
    PartitionOfUnity pou(PartitionKind::smooth, centers, std::vector<double>(clusters, 5.0), 0.0, 10.0);
    return init_model(a, pou, {w}, 0.01, Prior{}, seed);
}

void copy_segment(MixtureModel& m, const std::string& from, const std::string& to) {
    const auto src = m.params.segment(from);
    std::vector<double> v(src.begin(), src.end());
    std::copy(v.begin(), v.end(), m.params.segment(to).begin());
}

double ks_statistic(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double d = 0.0;
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] <= b[j]) ++i; else ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
    }
    return d;
}

}  // namespace

TEST(Encode, IdenticalHeadsGiveIdenticalCodes) {
    auto m = random_model(3, 1);
    copy_segment(m, MixtureModel::encoder_head_name(0), MixtureModel::encoder_head_name(2));
    Rng rng(1);
    const Matrix x = oracle::random_matrix(10, 3, rng);
    EXPECT_EQ(encode(m, 0, x), encode(m, 2, x));
    EXPECT_NE(encode(m, 0, x), encode(m, 1, x));
}

TEST(Encode, ZeroHeadGivesZeroCode) {
    auto m = random_model(2, 2);
    for (double& v : m.params.segment(MixtureModel::encoder_head_name(1))) v = 0.0;
    Rng rng(2);
    const auto z = encode(m, 1, oracle::random_matrix(5, 3, rng));
    for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Encode, RowPermutationEquivariance) {
    const auto m = random_model(2, 3);
    Rng rng(3);
    const Matrix x = oracle::random_matrix(9, 3, rng);
    const auto p = rng.permutation(9);
    EXPECT_EQ(encode(m, 1, x.gather(p)), encode(m, 1, x).gather(p));
    EXPECT_EQ(decode(m, 1, encode(m, 1, x).gather(p)), decode(m, 1, encode(m, 1, x)).gather(p));
}

TEST(Encode, ClusterIndexChecked) {
    const auto m = random_model(2, 4);
    EXPECT_THROW(encode(m, 2, Matrix(1, 3)), ConfigError);
    EXPECT_THROW(decode(m, 5, Matrix(1, 2)), ConfigError);
}

TEST(Decode, IdenticalHeadsGiveIdenticalOutputs) {
    auto m = random_model(2, 5);
    copy_segment(m, MixtureModel::decoder_head_name(0), MixtureModel::decoder_head_name(1));
    Rng rng(5);
    const Matrix z = oracle::random_matrix(6, 2, rng);
    EXPECT_EQ(decode(m, 0, z), decode(m, 1, z));
}

TEST(Decode, ZeroHeadGivesTrunkOfZero) {
    auto m = random_model(2, 6);
    for (double& v : m.params.segment(MixtureModel::decoder_head_name(0))) v = 0.0;
    const auto trunk = forward(m.params.segment("decoder.trunk"), m.arch.decoder_trunk(), Matrix(1, 6));
    Rng rng(6);
    const auto out = decode(m, 0, oracle::random_matrix(4, 2, rng));
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(out(i, c), trunk(0, c));
    }
}

TEST(Sharing, HeadsAreFreeTrunksAreShared) {
    auto m = random_model(3, 7);
    Rng rng(7);
    const Matrix x = oracle::random_matrix(5, 3, rng);
    const Matrix z = oracle::random_matrix(5, 2, rng);
    const auto e0 = encode(m, 0, x), e2 = encode(m, 2, x);
    const auto d0 = decode(m, 0, z), d2 = decode(m, 2, z);
    for (double& v : m.params.segment(MixtureModel::encoder_head_name(1))) v += 0.5;
    for (double& v : m.params.segment(MixtureModel::decoder_head_name(1))) v += 0.5;
    EXPECT_EQ(encode(m, 0, x), e0);
    EXPECT_EQ(decode(m, 2, z), d2);
    for (double& v : m.params.segment("encoder.trunk")) v += 0.1;
    for (double& v : m.params.segment("decoder.trunk")) v += 0.1;
    EXPECT_NE(encode(m, 0, x), e0);
    EXPECT_NE(encode(m, 2, x), e2);
    EXPECT_NE(decode(m, 0, z), d0);
    EXPECT_NE(decode(m, 2, z), d2);
}

TEST(NoisyEncode, ZeroBandwidthIsExact) {
    auto m = random_model(2, 8);
    m.h = 0.0;
    Rng rng(8);
    const Matrix x = oracle::random_matrix(7, 3, rng);
    EXPECT_EQ(noisy_encode(m, 1, x, 3), encode(m, 1, x));
}

TEST(NoisyEncode, NoiseVariance) {
    auto m = random_model(1, 9);
    m.h = 0.01;
    Rng rng(9);
    const Matrix x = oracle::random_matrix(10000, 3, rng);
    const auto clean = encode(m, 0, x);
    const auto noisy = noisy_encode(m, 0, x, 4);
    EXPECT_EQ(noisy, noisy_encode(m, 0, x, 4));
    for (std::size_t c = 0; c < 2; ++c) {
        double s = 0, s2 = 0;
        for (std::size_t i = 0; i < x.rows(); ++i) {
            const double d = noisy(i, c) - clean(i, c);
            s += d;
            s2 += d * d;
        }
        const double mean = s / 10000.0, var = s2 / 10000.0 - mean * mean;
        EXPECT_NEAR(var, 0.01, 0.002);
    }
}

TEST(Prior, GaussianMoments) {
    const auto m = fixture::identity_model();
    Prior p;
    p.base = PriorBase::std_gaussian;
    const auto z = sample_prior(p, m, 0, 10000, 1);
    double s = 0, s2 = 0;
    for (double v : z.data()) {
        s += v;
        s2 += v * v;
    }
    EXPECT_NEAR(s / 10000.0, 0.0, 0.05);
    EXPECT_NEAR(s2 / 10000.0 - (s / 10000.0) * (s / 10000.0), 1.0, 0.1);
}

TEST(Prior, TruncatedNormalStaysInBall) {
    const auto m = random_model(1, 10);
    Prior p;
    p.base = PriorBase::truncated_normal;
    p.radius = 0.7;
    const auto z = sample_prior(p, m, 0, 2000, 2);
    for (std::size_t i = 0; i < z.rows(); ++i) {
        EXPECT_LE(std::sqrt(squared_distance(z.row(i), std::vector<double>(2, 0.0))), 0.7);
    }
    p.base = PriorBase::uniform_ball;
    const auto u = sample_prior(p, m, 0, 2000, 2);
    for (std::size_t i = 0; i < u.rows(); ++i) {
        EXPECT_LE(std::sqrt(squared_distance(u.row(i), std::vector<double>(2, 0.0))), 0.7 + 1e-12);
    }
}

TEST(Prior, ReweightingByOneIsTheBase) {
    // Global partition: rho = 1 everywhere, so every proposal is accepted.
    auto m = fixture::identity_model(1, PriorBase::std_gaussian);
    Prior base = m.priors[0];
    Prior rw = base;
    rw.reweighted = true;
    const auto a = sample_prior(base, m, 0, 5000, 11);
    const auto b = sample_prior(rw, m, 0, 5000, 12);
    EXPECT_LT(ks_statistic(a.data(), b.data()), 0.05);
    EXPECT_DOUBLE_EQ(prior_acceptance_rate(rw, m, 0, 1000, 3), 1.0);
}

TEST(Prior, ReweightedSamplesDecodeIntoTheirElement) {
    auto m = fixture::identity_model(2, PriorBase::std_gaussian);
    Matrix c(2, 1);
    c(0, 0) = -1.0;
    c(1, 0) = 1.0;
    m.pou = PartitionOfUnity(PartitionKind::smooth, c, {1.2, 1.2}, 0.0, 2.0);
    for (auto& p : m.priors) p.reweighted = true;
    for (std::size_t k = 0; k < 2; ++k) {
        const auto z = sample_prior(m.priors[k], m, k, 2000, 20 + k);
        const auto x = decode(m, k, z);
        for (std::size_t i = 0; i < x.rows(); ++i) EXPECT_TRUE(m.pou.in_element(k, x.row(i)));
    }
}

TEST(Prior, CollapseNamesTheCluster) {
    auto m = fixture::identity_model(2, PriorBase::truncated_normal);
    Matrix c(2, 1);
    c(1, 0) = 50.0;  // no decoded latent in the unit ball reaches this element
    m.pou = PartitionOfUnity(PartitionKind::smooth, c, {2.0, 1.0}, 0.0, 2.0);
    for (auto& p : m.priors) p.reweighted = true;
    try {
        sample_prior(m.priors[1], m, 1, 10, 1);
        FAIL() << "expected a collapse";
    } catch (const PriorCollapseError& e) {
        EXPECT_EQ(e.cluster(), 1u);
        EXPECT_NE(std::string(e.what()).find("cluster 1"), std::string::npos);
    }
}

TEST(Prior, FrozenReferenceDefinesTheReweighting) {
    auto m = fixture::identity_model(1, PriorBase::truncated_normal);
    Matrix c(1, 1);
    m.pou = PartitionOfUnity(PartitionKind::smooth, c, {0.5}, 0.0, 2.0);
    m.priors[0].reweighted = true;
    m.prior_reference = m.params;
    // Shift the live decoder far away; acceptance follows the reference.
    m.params.values()[m.params.segment_info("decoder.trunk").offset + 1] = 100.0;
    const auto z = sample_prior(m.priors[0], m, 0, 500, 4);
    for (double v : z.data()) EXPECT_LT(std::abs(v), 0.5);
}

TEST(SampleModel, IdentityDecoderReproducesPrior) {
    const auto m = fixture::identity_model(1, PriorBase::std_gaussian);
    const auto x = sample_model(m, 10000, 5);
    double s = 0, s2 = 0;
    for (double v : x.points.data()) {
        s += v;
        s2 += v * v;
    }
    EXPECT_NEAR(s / 10000.0, 0.0, 0.05);
    EXPECT_NEAR(s2 / 10000.0, 1.0, 0.1);
}

TEST(SampleModel, OnlyWeightedClustersAreUsed) {
    auto m = fixture::identity_model(3, PriorBase::truncated_normal);
    m.weights.values = {1.0, 0.0, 0.0};
    // Cluster 0 decodes into [-1, 1], the others far away.
    m.params.values()[m.params.segment_info(MixtureModel::decoder_head_name(1)).offset + 1] = 100.0;
    m.params.values()[m.params.segment_info(MixtureModel::decoder_head_name(2)).offset + 1] = -100.0;
    const auto x = sample_model(m, 2000, 6);
    for (double v : x.points.data()) EXPECT_LE(std::abs(v), 1.0);
}

TEST(SampleModel, ClusterFrequenciesFollowWeights) {
    // Each cluster's decoder adds a distinct offset so samples reveal their cluster.
    auto m = fixture::identity_model(3, PriorBase::truncated_normal);
    m.weights.values = {0.5, 0.3, 0.2};
    for (std::size_t k = 0; k < 3; ++k) {
        m.params.values()[m.params.segment_info(MixtureModel::decoder_head_name(k)).offset + 1] = 10.0 * k;
    }
    const std::size_t n = 10000;
    const auto x = sample_model(m, n, 7);
    std::vector<double> counts(3, 0.0);
    for (double v : x.points.data()) counts[static_cast<std::size_t>(std::lround(v / 10.0))] += 1.0;
    double chi2 = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
        const double expected = m.weights.values[k] * n;
        chi2 += (counts[k] - expected) * (counts[k] - expected) / expected;
    }
    EXPECT_LT(chi2, 13.82);  // chi-square, 2 degrees of freedom, p = 0.001
}

TEST(SampleModel, DeterministicForSeed) {
    const auto m = random_model(3, 12);
    EXPECT_EQ(sample_model(m, 300, 8), sample_model(m, 300, 8));
    EXPECT_NE(sample_model(m, 300, 8), sample_model(m, 300, 9));
    EXPECT_EQ(sample_model(m, 0, 8).size(), 0u);
}

TEST(Checkpoint, RoundTrip) {
    auto m = random_model(3, 13);
    m.priors[1].reweighted = true;
    m.prior_reference = m.params;
    m.prior_reference->values()[0] = 42.0;
    const auto back = model_from_checkpoint_json(nlohmann::json::parse(checkpoint_json(m).dump()));
    EXPECT_EQ(back.params, m.params);
    EXPECT_EQ(back.priors, m.priors);
    EXPECT_EQ(back.weights.values, m.weights.values);
    ASSERT_TRUE(back.prior_reference.has_value());
    EXPECT_EQ(*back.prior_reference, *m.prior_reference);
    EXPECT_EQ(sample_model(back, 100, 1), sample_model(m, 100, 1));
}

TEST(Checkpoint, CorruptionNamesTheField) {
    const auto m = random_model(2, 14);
    auto expect_field = [&](const std::function<void(nlohmann::json&)>& corrupt, const std::string& field) {
        auto j = nlohmann::json::parse(checkpoint_json(m).dump());
        corrupt(j);
        try {
            model_from_checkpoint_json(j);
            ADD_FAILURE() << "no error for " << field;
        } catch (const ParseError& e) {
            EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
        }
    };
    expect_field([](auto& j) { j.erase("h"); }, "'h'");
    expect_field([](auto& j) { j["architecture"]["latent_dim"] = "two"; }, "architecture.latent_dim");
    expect_field([](auto& j) { j["priors"][1].erase("radius"); }, "priors[1].radius");
    expect_field([](auto& j) { j["segments"][0]["values"].erase(0); }, "segments.encoder.trunk");
    expect_field([](auto& j) { j["schema"] = "other"; }, "schema");
    expect_field([](auto& j) { j["weights"] = {0.9, 0.9}; }, "weights");
}
