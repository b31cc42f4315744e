#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace mldmae;

namespace {

nlohmann::json minimal() {
    return nlohmann::json::parse(R"({
        "name": "t", "method": "mldmae",
        "dataset": {"name": "spiral", "n_train": 100},
        "partition": {"kind": "smooth", "clusters": 3},
        "architecture": {"latent_dim": 1, "hidden": [8]},
        "train": {"epochs": 1, "batch_size": 50},
        "eval": {"n_eval": 50}
    })");
}

std::string config_error(const nlohmann::json& j) {
    try {
        parse_experiment(j);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

std::filesystem::path temp_dir() {
    auto d = std::filesystem::temp_directory_path() / "mldmae_experiment_test";
    std::filesystem::create_directories(d);
    return d;
}

}  // namespace

TEST(Config, MinimalParses) {
    const auto c = parse_experiment(minimal());
    EXPECT_EQ(c.arch.ambient_dim, 2u);
    EXPECT_EQ(c.arch.clusters, 3u);
    EXPECT_EQ(c.train.lambda, std::vector<double>{10.0});
}

TEST(Config, UnknownFieldsAreRejected) {
    auto j = minimal();
    j["colour"] = "red";
    EXPECT_NE(config_error(j).find("'colour'"), std::string::npos);
    j = minimal();
    j["train"]["learning_rat"] = 0.1;
    EXPECT_NE(config_error(j).find("'train.learning_rat'"), std::string::npos);
}

TEST(Config, WrongTypesAreRejected) {
    auto j = minimal();
    j["train"]["epochs"] = "many";
    EXPECT_NE(config_error(j).find("train.epochs"), std::string::npos);
    j = minimal();
    j["architecture"]["hidden"] = 8;
    EXPECT_NE(config_error(j).find("architecture.hidden"), std::string::npos);
}

TEST(Config, UnknownEnumsAreRejected) {
    auto j = minimal();
    j["dataset"]["name"] = "klein_bottle";
    EXPECT_NE(config_error(j).find("klein_bottle"), std::string::npos);
    j = minimal();
    j["method"] = "vae";
    EXPECT_NE(config_error(j).find("vae"), std::string::npos);
    j = minimal();
    j["train"]["penalty"] = {{"kind", "kl"}};
    EXPECT_FALSE(config_error(j).empty());
}

TEST(Config, LdmaeNeedsOneIndicatorCluster) {
    auto j = minimal();
    j["method"] = "ldmae";
    EXPECT_FALSE(config_error(j).empty());
    j["partition"] = {{"kind", "indicator"}, {"clusters", 1}};
    EXPECT_TRUE(config_error(j).empty());
    j.erase("partition");
    EXPECT_EQ(parse_experiment(j).arch.clusters, 1u);
}

TEST(Config, LambdaListLengthIsChecked) {
    auto j = minimal();
    j["train"]["lambda"] = {1.0, 2.0};
    EXPECT_FALSE(config_error(j).empty());
    j["train"]["lambda"] = {1.0, 2.0, 3.0};
    EXPECT_EQ(parse_experiment(j).train.lambda.size(), 3u);
}

TEST(Config, EvalSizeIsCapped) {
    auto j = minimal();
    j["eval"] = {{"n_eval", 6000}, {"max_support", 5000}};
    EXPECT_NE(config_error(j).find("max_support"), std::string::npos);
}

TEST(Config, FileDatasetNeedsExistingPath) {
    auto j = minimal();
    j["dataset"] = {{"name", "file"}, {"path", "/nonexistent/points.csv"}};
    j["architecture"]["ambient_dim"] = 2;
    EXPECT_NE(config_error(j).find("/nonexistent/points.csv"), std::string::npos);
}

TEST(Config, TruthNeedsSyntheticData) {
    const auto dir = temp_dir();
    save_cloud(gen_spiral(10, 0), dir / "pts.csv");
    auto j = minimal();
    j["method"] = "truth";
    j["dataset"] = {{"name", "file"}, {"path", (dir / "pts.csv").string()}};
    EXPECT_FALSE(config_error(j).empty());
}

TEST(Config, ShippedExperimentsParse) {
    std::size_t count = 0;
    for (const auto& e : std::filesystem::directory_iterator(MLDMAE_EXPERIMENTS_DIR)) {
        if (e.path().extension() != ".json") continue;
        EXPECT_NO_THROW(load_experiment(e.path())) << e.path();
        ++count;
    }
    EXPECT_GE(count, 10u);
}

TEST(Config, MissingFileNamesThePath) {
    try {
        load_experiment("/nonexistent/config.json");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/config.json"), std::string::npos);
    }
}

TEST(Config, SetSeedReachesTraining) {
    auto c = parse_experiment(minimal());
    set_seed(c, 42);
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.train.seed, 42u);
}

TEST(Pipeline, SeedStreamsAreDistinct) {
    EXPECT_NE(test_seed(0), sample_seed(0));
    EXPECT_NE(test_seed(0), split_seed(0));
    EXPECT_NE(test_seed(0), 0u);
}

TEST(Pipeline, SyntheticDataset) {
    const auto c = fixture::small_sphere();
    const auto d = make_dataset(c);
    EXPECT_EQ(d.train, gen_sphere(300, c.seed));
    EXPECT_EQ(d.test, gen_sphere(200, test_seed(c.seed)));
}

TEST(Pipeline, FileDatasetIsSplit) {
    const auto dir = temp_dir();
    save_cloud(gen_spiral(100, 0), dir / "spiral.csv");
    auto j = minimal();
    j["dataset"] = {{"name", "file"}, {"path", "spiral.csv"}, {"test_fraction", 0.25}};
    j["architecture"]["ambient_dim"] = 2;
    const auto c = parse_experiment(j, dir);
    const auto d = make_dataset(c);
    EXPECT_EQ(d.train.size(), 75u);
    EXPECT_EQ(d.test.size(), 25u);
    j["architecture"]["ambient_dim"] = 3;
    EXPECT_THROW(make_dataset(parse_experiment(j, dir)), ShapeError);
}

TEST(Pipeline, TruthMethodSamplesTheDistribution) {
    auto c = fixture::small_sphere();
    c.method = Method::truth;
    Fitted f;
    const auto ev = run_experiment(c, &f);
    EXPECT_EQ(f.param_count(), 0u);
    EXPECT_EQ(ev.samples, gen_sphere(200, sample_seed(c.seed)));
    EXPECT_GT(ev.report.w1_to_truth, 0.0);
}

TEST(Pipeline, KdeJsonRoundTrip) {
    auto c = fixture::small_sphere();
    c.method = Method::kde;
    c.kde.grid_count = 4;
    const auto data = make_dataset(c);
    const auto f = fit(c, data.train);
    ASSERT_TRUE(f.kde.has_value());
    EXPECT_NE(std::find(f.kde->grid.begin(), f.kde->grid.end(), f.kde->bandwidth), f.kde->grid.end());
    const auto back = kde_from_json(nlohmann::json::parse(kde_json(*f.kde).dump()), data.train);
    EXPECT_EQ(back.bandwidth, f.kde->bandwidth);
    EXPECT_EQ(back.grid, f.kde->grid);
    EXPECT_THROW(kde_from_json(nlohmann::json::object(), data.train), ParseError);
}

TEST(Pipeline, MixtureCheckpointReproducesSamples) {
    const auto c = fixture::small_sphere(2);
    Fitted f;
    const auto ev = run_experiment(c, &f);
    ASSERT_TRUE(f.model.has_value());
    const auto path = temp_dir() / "checkpoint.json";
    save_checkpoint(*f.model, path);
    const auto back = load_checkpoint(path);
    EXPECT_EQ(sample_model(back, 200, sample_seed(c.seed)), ev.samples);
    EXPECT_EQ(ev.report.param_count, param_count(c.arch));
    EXPECT_EQ(ev.report.fingerprint, fingerprint(cloud_text(ev.samples)));
}

TEST(Pipeline, RefreshHistoryIsConcatenated) {
    auto c = fixture::small_sphere(2);
    c.train.prior_refresh_rounds = 1;
    const auto data = make_dataset(c);
    const auto f = fit(c, data.train);
    ASSERT_EQ(f.refresh_rounds.size(), 1u);
    const auto h = combined_history(f);
    ASSERT_EQ(h.epochs.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(h.epochs[i].epoch, i);
}

TEST(Pipeline, Deterministic) {
    const auto c = fixture::small_sphere(2);
    EXPECT_EQ(run_experiment(c).samples, run_experiment(c).samples);
}
