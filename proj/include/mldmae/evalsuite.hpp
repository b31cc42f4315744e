#pragma once

// Baselines and metrics: Gaussian KDE sampler, Parzen-window log-likelihood,
// held-out W1 evaluation and report tables.

#include "mldmae/discrepancy.hpp"
#include "mldmae/synthdata.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

namespace mldmae {

/// Uniformly chosen training point plus N(0, bandwidth^2 I_D).
inline PointCloud kde_sample(const PointCloud& train, double bandwidth, std::size_t m, std::uint64_t seed) {
    if (train.size() == 0) throw ConfigError("KDE needs a non-empty training set");
    if (!(bandwidth > 0.0)) throw ConfigError("KDE bandwidth must be positive");
    Rng rng(seed);
    Matrix out(m, train.dim());
    for (std::size_t i = 0; i < m; ++i) {
        const auto src = train.points.row(rng.index(train.size()));
        for (std::size_t c = 0; c < train.dim(); ++c) out(i, c) = src[c] + bandwidth * rng.normal();
    }
    return PointCloud(std::move(out));
}

/// Mean over test points of log((1/m) sum_j N(x; g_j, sigma^2 I)), via log-sum-exp.
inline double parzen_ll(const PointCloud& generated, const PointCloud& test, double sigma) {
    if (!(sigma > 0.0)) throw ConfigError("Parzen sigma must be positive");
    if (generated.size() == 0 || test.size() == 0) throw ConfigError("Parzen log-likelihood needs non-empty sets");
    if (generated.dim() != test.dim()) throw ShapeError("generated and test sets differ in dimension");
    const double dim = static_cast<double>(test.dim());
    const double log_norm = -0.5 * dim * std::log(2.0 * std::numbers::pi * sigma * sigma) -
                            std::log(static_cast<double>(generated.size()));
    const double inv = 1.0 / (2.0 * sigma * sigma);
    std::vector<double> e(generated.size());
    double total = 0.0;
    for (std::size_t t = 0; t < test.size(); ++t) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < generated.size(); ++j) {
            e[j] = -squared_distance(test.points.row(t), generated.points.row(j)) * inv;
            mx = std::max(mx, e[j]);
        }
        double s = 0.0;
        for (double v : e) s += std::exp(v - mx);
        total += mx + std::log(s) + log_norm;
    }
    return total / static_cast<double>(test.size());
}

/// Grid value with the highest validation log-likelihood; ties go to the smaller sigma.
inline double select_parzen_sigma(const PointCloud& generated, const PointCloud& validation,
                                  std::span<const double> grid) {
    if (grid.empty()) throw ConfigError("Parzen sigma grid is empty");
    double best_sigma = 0.0;
    double best_ll = -std::numeric_limits<double>::infinity();
    for (double s : grid) {
        const double ll = parzen_ll(generated, validation, s);
        if (ll > best_ll || (ll == best_ll && s < best_sigma)) {
            best_ll = ll;
            best_sigma = s;
        }
    }
    return best_sigma;
}

struct EvalReport {
    std::string method;
    double w1_to_truth = 0.0;
    std::size_t param_count = 0;  // 0 means not applicable
    double runtime_seconds = 0.0;
    std::string fingerprint;
};

/// (m, seed) -> m samples.
using Sampler = std::function<PointCloud(std::size_t, std::uint64_t)>;

struct EvalOptions {
    std::size_t n_eval = 1000;
    TransportOptions transport;
    /// Truth samples use seed + truth_seed_offset so they never reuse a training seed.
    std::uint64_t truth_seed_offset = 1000;
};

/// W1 between n_eval fresh truth samples and n_eval model samples.
inline double heldout_w1(const Sampler& model, const Sampler& truth, const EvalOptions& opts, std::uint64_t seed) {
    const auto t = truth(opts.n_eval, seed + opts.truth_seed_offset);
    const auto g = model(opts.n_eval, seed);
    return w1_discrete_exact(t.points, g.points, opts.transport);
}

inline EvalReport evaluate(const std::string& method, const Sampler& model, const Sampler& truth,
                           const EvalOptions& opts, std::uint64_t seed) {
    EvalReport r;
    r.method = method;
    r.w1_to_truth = heldout_w1(model, truth, opts, seed);
    return r;
}

/// KDE bandwidth minimizing W1 between KDE samples and a validation cloud.
inline double select_kde_bandwidth(const PointCloud& train, const PointCloud& validation,
                                   std::span<const double> grid, std::uint64_t seed,
                                   const TransportOptions& transport = {}) {
    if (grid.empty()) throw ConfigError("KDE bandwidth grid is empty");
    double best = grid.front();
    double best_w1 = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const auto gen = kde_sample(train, grid[i], validation.size(), mix_seed(seed, i));
        const double w = w1_discrete_exact(validation.points, gen.points, transport);
        if (w < best_w1) {
            best_w1 = w;
            best = grid[i];
        }
    }
    return best;
}

/// Log-spaced grid from lo to hi inclusive.
inline std::vector<double> log_grid(double lo, double hi, std::size_t count) {
    std::vector<double> g(count);
    for (std::size_t i = 0; i < count; ++i) {
        const double t = count == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(count - 1);
        g[i] = std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo)));
    }
    return g;
}

/// FNV-1a over the given text, as 16 hex digits.
inline std::string fingerprint(std::string_view text) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::vector<EvalReport> sorted_reports(std::vector<EvalReport> reports) {
    std::stable_sort(reports.begin(), reports.end(),
                     [](const EvalReport& a, const EvalReport& b) { return a.method < b.method; });
    return reports;
}

inline void write_report_csv(std::ostream& os, const std::vector<EvalReport>& reports) {
    os << "method,w1,param_count,runtime_seconds,fingerprint\n";
    for (const auto& r : sorted_reports(reports)) {
        os << r.method << ',' << format_double(r.w1_to_truth) << ',' << r.param_count << ','
           << format_double(r.runtime_seconds) << ',' << r.fingerprint << '\n';
    }
}

inline void write_report_text(std::ostream& os, const std::vector<EvalReport>& reports) {
    const auto rows = sorted_reports(reports);
    std::size_t width = 6;
    for (const auto& r : rows) width = std::max(width, r.method.size());
    os << std::left << std::setw(static_cast<int>(width)) << "method" << "  " << std::right << std::setw(10) << "W1"
       << "  " << std::setw(12) << "params" << "  " << std::setw(12) << "runtime_s" << '\n';
    for (const auto& r : rows) {
        std::ostringstream w1, rt;
        w1 << std::fixed << std::setprecision(4) << r.w1_to_truth;
        rt << std::fixed << std::setprecision(2) << r.runtime_seconds;
        os << std::left << std::setw(static_cast<int>(width)) << r.method << "  " << std::right << std::setw(10)
           << w1.str() << "  " << std::setw(12) << (r.param_count ? std::to_string(r.param_count) : "/") << "  "
           << std::setw(12) << rt.str() << '\n';
    }
}

/// Writes `<base>.csv` and `<base>.txt`.
inline void report_table(const std::vector<EvalReport>& reports, const std::filesystem::path& base) {
    if (reports.empty()) throw ConfigError("report table needs at least one report");
    auto csv_path = base;
    csv_path += ".csv";
    auto txt_path = base;
    txt_path += ".txt";
    std::ofstream csv(csv_path, std::ios::binary);
    std::ofstream txt(txt_path, std::ios::binary);
    if (!csv || !txt) throw Error("cannot write report files at '" + base.string() + "'");
    write_report_csv(csv, reports);
    write_report_text(txt, reports);
    if (!csv || !txt) throw Error("failed writing report files at '" + base.string() + "'");
}

inline std::vector<EvalReport> parse_report_csv(std::istream& is) {
    std::vector<EvalReport> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line_no == 1 || line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != 5) throw ParseError("report line " + std::to_string(line_no) + ": expected 5 fields");
        EvalReport r;
        r.method = f[0];
        r.w1_to_truth = parse_double_field(f[1], line_no);
        r.param_count = static_cast<std::size_t>(parse_double_field(f[2], line_no));
        r.runtime_seconds = parse_double_field(f[3], line_no);
        r.fingerprint = f[4];
        out.push_back(r);
    }
    return out;
}

}  // namespace mldmae
