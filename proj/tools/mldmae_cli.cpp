// mldmae: generate data, train, sample, evaluate and tabulate experiments.
//
//   mldmae generate --config experiments/spiral_mldmae.json
//   mldmae train    --config experiments/spiral_mldmae.json
//   mldmae sample   --config experiments/spiral_mldmae.json -m 2000
//   mldmae evaluate --config experiments/spiral_mldmae.json
//   mldmae report   --out runs/table runs/spiral_mldmae runs/spiral_kde
//
// Exit codes: 0 ok, 2 usage or config, 3 data, 4 numeric failure.

#include "mldmae/experiment.hpp"

#include "CLI11.hpp"

#include <ctime>
#include <iostream>

namespace fs = std::filesystem;
using namespace mldmae;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string checkpoint;
    std::optional<std::size_t> count;
    std::vector<std::string> inputs;
};

ExperimentConfig resolve(const Options& o) {
    if (o.config.empty()) throw CLI::ValidationError("--config", "this command needs --config PATH");
    auto c = load_experiment(o.config);
    if (o.seed) set_seed(c, *o.seed);
    if (!o.out.empty()) c.out = o.out;
    return c;
}

// Timestamps only ever go to run.log so every other output is reproducible.
void log_line(const fs::path& dir, const std::string& text) {
    std::ofstream log(dir / "run.log", std::ios::app);
    const auto now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%S", std::gmtime(&now));
    log << stamp << ' ' << text << '\n';
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open '" + path.string() + "' for writing");
    os << j.dump(1) << '\n';
    if (!os) throw Error("failed writing '" + path.string() + "'");
}

nlohmann::json read_json(const fs::path& path, const char* what) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError(std::string("missing ") + what + " '" + path.string() + "'");
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string(what) + " '" + path.string() + "' is not valid JSON: " + e.what());
    }
}

Dataset load_dataset(const ExperimentConfig& c) {
    const fs::path train = c.out / "train.csv";
    const fs::path test = c.out / "test.csv";
    if (!fs::exists(train)) throw ParseError("missing '" + train.string() + "'; run 'generate' first");
    if (!fs::exists(test)) throw ParseError("missing '" + test.string() + "'; run 'generate' first");
    return {load_cloud(train), load_cloud(test)};
}

Fitted load_fitted(const ExperimentConfig& c, const std::string& checkpoint) {
    Fitted f;
    f.method = c.method;
    if (c.method == Method::truth) {
        f.truth = c.dataset.kind;
    } else if (c.method == Method::kde) {
        const fs::path kde_path = checkpoint.empty() ? c.out / "kde.json" : fs::path(checkpoint);
        const auto j = read_json(kde_path, "KDE file");
        f.kde = kde_from_json(j, load_dataset(c).train);
    } else {
        const fs::path path = checkpoint.empty() ? c.out / "checkpoint.json" : fs::path(checkpoint);
        if (!fs::exists(path)) throw ParseError("missing checkpoint '" + path.string() + "'");
        f.model = load_checkpoint(path);
    }
    const fs::path timing = c.out / "timing.json";
    if (fs::exists(timing)) f.runtime_seconds = read_json(timing, "timing file").value("train_seconds", 0.0);
    return f;
}

int cmd_generate(const Options& o) {
    const auto c = resolve(o);
    fs::create_directories(c.out);
    const auto data = make_dataset(c);
    const std::string tag = "dataset=" + std::string(to_string(c.dataset.kind)) + " seed=" + std::to_string(c.seed);
    save_cloud(data.train, c.out / "train.csv", tag + " split=train");
    save_cloud(data.test, c.out / "test.csv", tag + " split=test");
    std::cout << "train " << data.train.size() << " x " << data.train.dim() << ", test " << data.test.size()
              << " x " << data.test.dim() << " -> " << c.out.string() << '\n';
    log_line(c.out, "generate " + tag);
    return 0;
}

int cmd_train(const Options& o) {
    const auto c = resolve(o);
    fs::create_directories(c.out);
    const auto data = load_dataset(c);
    const Fitted f = fit(c, data.train);
    if (f.model) {
        save_checkpoint(*f.model, c.out / "checkpoint.json");
        write_json(c.out / "partition.json", nlohmann::ordered_json::parse(f.model->pou.to_json().dump()));
        std::ofstream loss(c.out / "loss.csv", std::ios::binary);
        write_loss_csv(loss, combined_history(f));
        if (!loss) throw Error("failed writing loss history");
        std::cout << "trained " << to_string(c.method) << " K=" << f.model->clusters()
                  << " params=" << f.param_count() << " epochs=" << combined_history(f).epochs.size();
        if (!f.history.epochs.empty()) {
            std::cout << " final_reconstruction=" << format_double(f.history.epochs.back().reconstruction);
        }
        std::cout << '\n';
        if (f.history.uncovered_skipped > 0) {
            std::cerr << "note: " << f.history.uncovered_skipped << " uncovered batch points were skipped\n";
        }
    } else if (f.kde) {
        write_json(c.out / "kde.json", kde_json(*f.kde));
        std::cout << "kde bandwidth=" << format_double(f.kde->bandwidth) << '\n';
    } else {
        std::cout << "truth sampler: nothing to train\n";
    }
    nlohmann::ordered_json timing;
    timing["train_seconds"] = f.runtime_seconds;
    write_json(c.out / "timing.json", timing);
    log_line(c.out, "train " + std::string(to_string(c.method)) + " seconds=" + format_double(f.runtime_seconds));
    return 0;
}

int cmd_sample(const Options& o) {
    const auto c = resolve(o);
    fs::create_directories(c.out);
    const Fitted f = load_fitted(c, o.checkpoint);
    const std::size_t m = o.count.value_or(c.eval.n_eval);
    const auto cloud = f.sample(m, sample_seed(c.seed));
    save_cloud(cloud, c.out / "samples.csv");
    std::cout << "wrote " << m << " samples -> " << (c.out / "samples.csv").string() << '\n';
    log_line(c.out, "sample m=" + std::to_string(m));
    return 0;
}

int cmd_evaluate(const Options& o) {
    const auto c = resolve(o);
    fs::create_directories(c.out);
    const Fitted f = load_fitted(c, o.checkpoint);
    const auto data = load_dataset(c);
    const auto ev = evaluate_fitted(c, f, data.test, f.runtime_seconds);
    report_table({ev.report}, c.out / "report");
    // Scatter data for plotting (tools/plot_scatter.py).
    save_cloud(ev.samples, c.out / "scatter_model.csv");
    save_cloud(ev.truth, c.out / "scatter_truth.csv");
    write_report_text(std::cout, {ev.report});
    log_line(c.out, "evaluate w1=" + format_double(ev.report.w1_to_truth));
    return 0;
}

int cmd_report(const Options& o) {
    if (o.out.empty()) throw CLI::ValidationError("--out", "report needs --out DIR");
    if (o.inputs.empty()) throw CLI::ValidationError("inputs", "report needs at least one run directory");
    std::vector<EvalReport> all;
    for (const auto& in : o.inputs) {
        fs::path p = in;
        if (fs::is_directory(p)) p /= "report.csv";
        std::ifstream is(p, std::ios::binary);
        if (!is) throw ParseError("missing report '" + p.string() + "'");
        auto rows = parse_report_csv(is);
        all.insert(all.end(), rows.begin(), rows.end());
    }
    fs::create_directories(o.out);
    report_table(all, fs::path(o.out) / "table");
    write_report_text(std::cout, all);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixture of latent-distribution-matched autoencoders"};
    app.require_subcommand(1);
    Options o;
    auto add_common = [&](CLI::App* sub, bool need_config) {
        auto* cfg = sub->add_option("--config", o.config, "experiment config (JSON)");
        if (need_config) cfg->required();
        sub->add_option("--seed", o.seed, "overrides the config seed");
        sub->add_option("--out", o.out, "output directory (overrides the config)");
    };
    auto* gen = app.add_subcommand("generate", "write train.csv and test.csv");
    add_common(gen, true);
    auto* train = app.add_subcommand("train", "fit the configured estimator");
    add_common(train, true);
    auto* sample = app.add_subcommand("sample", "draw samples from a trained estimator");
    add_common(sample, true);
    sample->add_option("--checkpoint", o.checkpoint, "checkpoint path (default <out>/checkpoint.json)");
    sample->add_option("-m,--count", o.count, "number of samples (default eval.n_eval)");
    auto* evaluate = app.add_subcommand("evaluate", "held-out W1 against test data");
    add_common(evaluate, true);
    evaluate->add_option("--checkpoint", o.checkpoint, "checkpoint path (default <out>/checkpoint.json)");
    auto* report = app.add_subcommand("report", "combine run reports into one table");
    add_common(report, false);
    report->add_option("inputs", o.inputs, "run directories or report CSV files");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    try {
        if (*gen) return cmd_generate(o);
        if (*train) return cmd_train(o);
        if (*sample) return cmd_sample(o);
        if (*evaluate) return cmd_evaluate(o);
        if (*report) return cmd_report(o);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const Error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    }
    return kExitUsage;
}
