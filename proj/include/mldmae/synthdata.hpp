#pragma once

// Synthetic manifold samplers, train/test splitting and CSV persistence.

#include "mldmae/core.hpp"

#include <array>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

namespace mldmae {

/// n x D sample with optional nonnegative per-point weights.
struct PointCloud {
    Matrix points;
    std::optional<std::vector<double>> weights;

    PointCloud() = default;
    explicit PointCloud(Matrix p) : points(std::move(p)) {}

    std::size_t size() const { return points.rows(); }
    std::size_t dim() const { return points.cols(); }

    void validate() const {
        if (points.rows() < 1 || points.cols() < 1) throw ConfigError("point cloud must have n >= 1 and D >= 1");
        if (weights) {
            if (weights->size() != points.rows()) throw ShapeError("weight vector length differs from point count");
            bool positive = false;
            for (double w : *weights) {
                if (!(w >= 0.0)) throw ConfigError("point weights must be nonnegative");
                positive = positive || w > 0.0;
            }
            if (!positive) throw ConfigError("at least one point weight must be positive");
        }
    }

    friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

/// Spiral point for a given standard-normal draw phi0.
inline std::array<double, 2> spiral_point(double phi0) {
    const double phi = 3.0 * std::numbers::pi * phi0;
    return {std::cos(phi + 2.0) * phi / std::numbers::pi, 2.0 * std::sin(phi + 2.0) * phi / std::numbers::pi};
}

/// Torus point (major radius 3, minor radius 1) for standard-normal draws phi0, phi1.
inline std::array<double, 3> torus_point(double phi0, double phi1) {
    const double phi = 2.0 * std::numbers::pi * phi0;
    const double theta = 2.0 * std::numbers::pi * phi1;
    const double ring = 3.0 + std::cos(theta);
    return {ring * std::cos(phi), ring * std::sin(phi), std::sin(theta)};
}

namespace detail {
inline void require_count(std::size_t n) {
    if (n < 1) throw ConfigError("sample size must be at least 1");
}
}  // namespace detail

inline PointCloud gen_spiral(std::size_t n, std::uint64_t seed) {
    detail::require_count(n);
    Rng rng(seed);
    Matrix m(n, 2);
    for (std::size_t i = 0; i < n; ++i) {
        const auto p = spiral_point(rng.normal());
        m(i, 0) = p[0];
        m(i, 1) = p[1];
    }
    return PointCloud(std::move(m));
}

inline PointCloud gen_torus(std::size_t n, std::uint64_t seed) {
    detail::require_count(n);
    Rng rng(seed);
    Matrix m(n, 3);
    for (std::size_t i = 0; i < n; ++i) {
        const double phi0 = rng.normal();
        const double phi1 = rng.normal();
        const auto p = torus_point(phi0, phi1);
        for (std::size_t c = 0; c < 3; ++c) m(i, c) = p[c];
    }
    return PointCloud(std::move(m));
}

/// Uniform on the unit 2-sphere via normalized standard Gaussian triples.
inline PointCloud gen_sphere(std::size_t n, std::uint64_t seed) {
    detail::require_count(n);
    Rng rng(seed);
    Matrix m(n, 3);
    for (std::size_t i = 0; i < n; ++i) {
        double g[3];
        double norm = 0.0;
        do {
            for (double& v : g) v = rng.normal();
            norm = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
        } while (norm < 1e-12);
        for (std::size_t c = 0; c < 3; ++c) m(i, c) = g[c] / norm;
    }
    return PointCloud(std::move(m));
}

inline PointCloud subset(const PointCloud& cloud, std::span<const std::size_t> idx) {
    PointCloud out(cloud.points.gather(idx));
    if (cloud.weights) {
        std::vector<double> w;
        w.reserve(idx.size());
        for (auto i : idx) w.push_back((*cloud.weights)[i]);
        out.weights = std::move(w);
    }
    return out;
}

/// Random disjoint split with floor(n * train_fraction) points on the first side.
inline std::pair<PointCloud, PointCloud> split(const PointCloud& cloud, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
    const std::size_t n = cloud.size();
    const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * train_fraction));
    if (n_train == 0 || n_train == n) {
        throw ConfigError("split of " + std::to_string(n) + " points leaves one side empty");
    }
    Rng rng(seed);
    const auto perm = rng.permutation(n);
    std::span<const std::size_t> all(perm);
    return {subset(cloud, all.first(n_train)), subset(cloud, all.subspan(n_train))};
}

/// Shortest decimal form that parses back to the identical double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline void write_cloud(std::ostream& os, const Matrix& points) {
    for (std::size_t r = 0; r < points.rows(); ++r) {
        for (std::size_t c = 0; c < points.cols(); ++c) {
            if (c) os << ',';
            os << format_double(points(r, c));
        }
        os << '\n';
    }
}

/// Writes one point per line. Weights are not persisted.
inline void save_cloud(const PointCloud& cloud, const std::filesystem::path& path, const std::string& header = {}) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open '" + path.string() + "' for writing");
    if (!header.empty()) os << "# " << header << '\n';
    write_cloud(os, cloud.points);
    if (!os) throw Error("failed writing '" + path.string() + "'");
}

inline double parse_double_field(std::string_view field, std::size_t line_no) {
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) {
        field.remove_suffix(1);
    }
    double v = 0.0;
    auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (field.empty() || res.ec != std::errc() || res.ptr != field.data() + field.size()) {
        throw ParseError("line " + std::to_string(line_no) + ": cannot parse '" + std::string(field) + "' as a number");
    }
    return v;
}

/// Parses cloud CSV text. `allow_empty` accepts a file with no data rows
/// (used for zero-sample outputs); the column count is then unknown.
inline PointCloud parse_cloud(std::istream& is, bool allow_empty = false) {
    Matrix m;
    std::string line;
    std::size_t line_no = 0;
    std::vector<double> row;
    std::size_t expected = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        row.clear();
        std::string_view rest(line);
        while (true) {
            auto comma = rest.find(',');
            row.push_back(parse_double_field(rest.substr(0, comma), line_no));
            if (comma == std::string_view::npos) break;
            rest.remove_prefix(comma + 1);
        }
        if (expected == 0) {
            expected = row.size();
        } else if (row.size() != expected) {
            throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(expected) +
                             " columns, found " + std::to_string(row.size()));
        }
        m.append_row(row);
    }
    if (m.rows() == 0 && !allow_empty) throw ParseError("point cloud file contains no data rows");
    return PointCloud(std::move(m));
}

inline PointCloud load_cloud(const std::filesystem::path& path, bool allow_empty = false) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open '" + path.string() + "'");
    try {
        return parse_cloud(is, allow_empty);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

}  // namespace mldmae
