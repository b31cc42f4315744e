#pragma once

// Data-driven open cover from K-means and the partition of unity built on it.

#include "mldmae/core.hpp"
#include "mldmae/synthdata.hpp"

#include "json.hpp"

#include <optional>
#include <string_view>

namespace mldmae {

struct KMeansResult {
    Matrix centers;
    std::vector<std::size_t> assignments;
    /// Sum of squared distances after each assignment step.
    std::vector<double> objective;
};

namespace detail {
inline std::pair<std::size_t, double> nearest_center(const Matrix& centers, std::span<const double> x) {
    std::size_t best = 0;
    double best_sq = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < centers.rows(); ++k) {
        const double sq = squared_distance(centers.row(k), x);
        if (sq < best_sq) {
            best_sq = sq;
            best = k;
        }
    }
    return {best, best_sq};
}
}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding. A cluster that loses all its
/// points keeps its previous center; build_cover rejects such clusterings.
inline KMeansResult kmeans_fit(const PointCloud& cloud, std::size_t k, std::uint64_t seed, std::size_t max_iters = 300) {
    const Matrix& x = cloud.points;
    const std::size_t n = x.rows();
    if (k < 1) throw ConfigError("K must be at least 1");
    if (k > n) {
        throw ConfigError("K = " + std::to_string(k) + " exceeds the number of points (" + std::to_string(n) + ")");
    }
    Rng rng(seed);
    KMeansResult res;
    res.centers = Matrix(k, x.cols());

    // k-means++ seeding
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::vector<char> chosen(n, 0);
    std::size_t first = rng.index(n);
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t pick = first;
        if (c > 0) {
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) total += d2[i];
            if (total > 0.0) {
                double target = rng.uniform() * total;
                pick = n;
                for (std::size_t i = 0; i < n; ++i) {
                    if (d2[i] <= 0.0) continue;
                    target -= d2[i];
                    if (target < 0.0) {
                        pick = i;
                        break;
                    }
                }
                if (pick == n) {
                    for (std::size_t i = n; i-- > 0;) {
                        if (d2[i] > 0.0) {
                            pick = i;
                            break;
                        }
                    }
                }
            } else {
                // All remaining points coincide with chosen centers.
                pick = 0;
                while (pick < n && chosen[pick]) ++pick;
                if (pick == n) pick = rng.index(n);
            }
        }
        chosen[pick] = 1;
        std::copy(x.row(pick).begin(), x.row(pick).end(), res.centers.row(c).begin());
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(x.row(i), res.centers.row(c)));
    }

    res.assignments.assign(n, 0);
    for (std::size_t iter = 0; iter <= max_iters; ++iter) {
        bool changed = iter == 0;
        double obj = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto [best, sq] = detail::nearest_center(res.centers, x.row(i));
            if (best != res.assignments[i]) changed = true;
            res.assignments[i] = best;
            obj += sq;
        }
        res.objective.push_back(obj);
        if (!changed || iter == max_iters) break;
        Matrix sums(k, x.cols());
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto a = res.assignments[i];
            ++counts[a];
            for (std::size_t c = 0; c < x.cols(); ++c) sums(a, c) += x(i, c);
        }
        for (std::size_t a = 0; a < k; ++a) {
            if (counts[a] == 0) continue;
            for (std::size_t c = 0; c < x.cols(); ++c) res.centers(a, c) = sums(a, c) / static_cast<double>(counts[a]);
        }
    }
    return res;
}

enum class PartitionKind { indicator, smooth };

inline std::string_view to_string(PartitionKind k) { return k == PartitionKind::indicator ? "indicator" : "smooth"; }

inline PartitionKind partition_kind_from_string(std::string_view s) {
    if (s == "indicator") return PartitionKind::indicator;
    if (s == "smooth") return PartitionKind::smooth;
    throw ConfigError("unknown partition kind '" + std::string(s) + "'");
}

struct MixtureWeights {
    std::vector<double> values;
};

/// Cover S_k = open ball of radius r_k + margin around a_k with either hard
/// nearest-center membership or the normalized bumps
/// ((r_k + margin)^2 - |x - a_k|^2)^gamma.
class PartitionOfUnity {
public:
    PartitionOfUnity() = default;
    PartitionOfUnity(PartitionKind kind, Matrix centers, std::vector<double> radii, double margin, double exponent)
        : kind_(kind), centers_(std::move(centers)), radii_(std::move(radii)), margin_(margin), exponent_(exponent) {
        validate();
    }

    /// Single indicator element covering all of R^D (rho == 1).
    static PartitionOfUnity global(std::size_t dim) {
        return PartitionOfUnity(PartitionKind::indicator, Matrix(1, dim),
                                {std::numeric_limits<double>::infinity()}, 0.0, 2.0);
    }

    void validate() const {
        if (centers_.rows() < 1) throw ConfigError("partition needs at least one element");
        if (radii_.size() != centers_.rows()) throw ShapeError("partition radii and centers disagree in count");
        for (double r : radii_) {
            if (!(r > 0.0)) throw ConfigError("cover radii must be positive");
        }
        if (!(margin_ >= 0.0)) throw ConfigError("cover margin must be nonnegative");
        if (kind_ == PartitionKind::smooth && !(exponent_ > 1.0)) {
            throw ConfigError("smooth partition needs exponent gamma > 1");
        }
    }

    PartitionKind kind() const { return kind_; }
    std::size_t size() const { return centers_.rows(); }
    std::size_t dim() const { return centers_.cols(); }
    const Matrix& centers() const { return centers_; }
    const std::vector<double>& radii() const { return radii_; }
    double margin() const { return margin_; }
    double exponent() const { return exponent_; }

    /// Radius of the open ball S_k.
    double cover_radius(std::size_t k) const { return radii_[k] + margin_; }

    bool in_element(std::size_t k, std::span<const double> x) const {
        const double r = cover_radius(k);
        return std::isinf(r) || squared_distance(x, centers_.row(k)) < r * r;
    }

    /// Unnormalized bump rho~_k(x); zero outside S_k.
    double bump(std::size_t k, std::span<const double> x) const {
        const double r = cover_radius(k);
        if (std::isinf(r)) return 1.0;
        const double gap = r * r - squared_distance(x, centers_.row(k));
        return gap > 0.0 ? std::pow(gap, exponent_) : 0.0;
    }

    /// (rho_1(x), ..., rho_K(x)); throws UncoveredPointError if no element covers x.
    std::vector<double> evaluate(std::span<const double> x) const {
        if (x.size() != dim()) throw ShapeError("point dimension differs from the partition's");
        const std::size_t k_count = size();
        std::vector<double> w(k_count, 0.0);
        if (kind_ == PartitionKind::indicator) {
            std::size_t best = k_count;
            double best_sq = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < k_count; ++k) {
                const double sq = squared_distance(x, centers_.row(k));
                if (in_element(k, x) && (best == k_count || sq < best_sq)) {
                    best_sq = sq;
                    best = k;
                }
            }
            if (best == k_count) throw_uncovered(x);
            w[best] = 1.0;
            return w;
        }
        // Unbounded elements cover everything and share the weight equally.
        std::size_t unbounded = 0;
        for (std::size_t k = 0; k < k_count; ++k) unbounded += std::isinf(cover_radius(k));
        if (unbounded > 0) {
            for (std::size_t k = 0; k < k_count; ++k) {
                w[k] = std::isinf(cover_radius(k)) ? 1.0 / static_cast<double>(unbounded) : 0.0;
            }
            return w;
        }
        // Normalize in the log domain; gap^gamma overflows or underflows easily.
        double max_log = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < k_count; ++k) {
            const double r = cover_radius(k);
            const double gap = r * r - squared_distance(x, centers_.row(k));
            w[k] = gap > 0.0 ? exponent_ * std::log(gap) : -std::numeric_limits<double>::infinity();
            max_log = std::max(max_log, w[k]);
        }
        if (!std::isfinite(max_log)) throw_uncovered(x);
        double total = 0.0;
        for (double& v : w) {
            v = std::isinf(v) ? 0.0 : std::exp(v - max_log);
            total += v;
        }
        for (double& v : w) v /= total;
        return w;
    }

    /// rho_k(x) for one element, 0 when x is uncovered.
    double weight(std::size_t k, std::span<const double> x) const {
        if (!in_element(k, x)) return 0.0;
        return evaluate(x)[k];
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["kind"] = std::string(to_string(kind_));
        j["margin"] = margin_;
        j["exponent"] = exponent_;
        j["dim"] = dim();
        nlohmann::json cs = nlohmann::json::array();
        for (std::size_t k = 0; k < size(); ++k) {
            auto row = centers_.row(k);
            cs.push_back(std::vector<double>(row.begin(), row.end()));
        }
        j["centers"] = cs;
        nlohmann::json rs = nlohmann::json::array();
        for (double r : radii_) {
            if (std::isinf(r)) {
                rs.push_back("inf");
            } else {
                rs.push_back(r);
            }
        }
        j["radii"] = rs;
        return j;
    }

    static PartitionOfUnity from_json(const nlohmann::json& j) {
        try {
            const auto kind = partition_kind_from_string(j.at("kind").get<std::string>());
            const auto dim = j.at("dim").get<std::size_t>();
            Matrix centers(0, dim);
            for (const auto& row : j.at("centers")) {
                const auto v = row.get<std::vector<double>>();
                centers.append_row(v);
            }
            std::vector<double> radii;
            for (const auto& r : j.at("radii")) {
                if (r.is_string()) {
                    if (r.get<std::string>() != "inf") throw ParseError("partition.radii: bad radius string");
                    radii.push_back(std::numeric_limits<double>::infinity());
                } else {
                    radii.push_back(r.get<double>());
                }
            }
            return PartitionOfUnity(kind, std::move(centers), std::move(radii), j.at("margin").get<double>(),
                                    j.at("exponent").get<double>());
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("partition: ") + e.what());
        }
    }

private:
    [[noreturn]] void throw_uncovered(std::span<const double> x) const {
        const auto [best, sq] = detail::nearest_center(centers_, x);
        const double dist = std::sqrt(sq);
        throw UncoveredPointError("uncovered point: nearest center " + std::to_string(best) + " at distance " +
                                      std::to_string(dist) + " (cover radius " +
                                      std::to_string(cover_radius(best)) + ")",
                                  dist, best);
    }

    PartitionKind kind_ = PartitionKind::indicator;
    Matrix centers_;
    std::vector<double> radii_;
    double margin_ = 0.0;
    double exponent_ = 2.0;
};

inline std::vector<double> eval_partition(const PartitionOfUnity& pou, std::span<const double> x) {
    return pou.evaluate(x);
}

/// Margin used when none is configured: 5% of the median cluster radius.
inline double default_margin(std::span<const double> radii) {
    std::vector<double> r(radii.begin(), radii.end());
    std::sort(r.begin(), r.end());
    const std::size_t m = r.size();
    const double median = m % 2 ? r[m / 2] : 0.5 * (r[m / 2 - 1] + r[m / 2]);
    return 0.05 * median;
}

/// r_k = distance from a_k to its farthest assigned point. A nonpositive
/// radius (single-point or coincident clusters) is floored at 1e-9 times the
/// cloud diameter scale so the ball stays open around its point.
inline PartitionOfUnity build_cover(const PointCloud& cloud, std::span<const std::size_t> assignments,
                                    const Matrix& centers, std::optional<double> margin, double exponent,
                                    PartitionKind kind) {
    const std::size_t k_count = centers.rows();
    if (assignments.size() != cloud.size()) throw ShapeError("assignment count differs from point count");
    if (centers.cols() != cloud.dim()) throw ShapeError("center dimension differs from point dimension");
    std::vector<double> radii(k_count, 0.0);
    std::vector<std::size_t> counts(k_count, 0);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto a = assignments[i];
        if (a >= k_count) throw ShapeError("assignment index out of range");
        ++counts[a];
        radii[a] = std::max(radii[a], distance(cloud.points.row(i), centers.row(a)));
    }
    for (std::size_t k = 0; k < k_count; ++k) {
        if (counts[k] == 0) {
            throw ConfigError("cluster " + std::to_string(k) +
                              " is empty; rerun K-means with a different seed or a smaller K");
        }
    }
    double scale = 0.0;
    for (double v : cloud.points.data()) scale = std::max(scale, std::abs(v));
    const double floor_radius = std::max(scale, 1.0) * 1e-9;
    for (double& r : radii) r = std::max(r, floor_radius);
    const double eps = margin.value_or(default_margin(radii));
    return PartitionOfUnity(kind, centers, std::move(radii), eps, exponent);
}

/// p_k = (1/n) sum_i rho_k(X_i).
inline MixtureWeights mixture_weights(const PartitionOfUnity& pou, const PointCloud& cloud) {
    if (cloud.size() == 0) throw ConfigError("mixture weights need a non-empty cloud");
    std::vector<double> p(pou.size(), 0.0);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        std::vector<double> w;
        try {
            w = pou.evaluate(cloud.points.row(i));
        } catch (const UncoveredPointError& e) {
            throw UncoveredPointError("training point " + std::to_string(i) + " is not covered: " + e.what(),
                                      e.nearest_distance(), e.nearest_center());
        }
        for (std::size_t k = 0; k < p.size(); ++k) p[k] += w[k];
    }
    double total = 0.0;
    for (double& v : p) {
        v /= static_cast<double>(cloud.size());
        total += v;
    }
    // Renormalize away accumulated rounding so the sum is 1 to machine precision.
    for (double& v : p) v /= total;
    return {std::move(p)};
}

/// K-means followed by build_cover with the final nearest-center assignments.
inline PartitionOfUnity fit_partition(const PointCloud& cloud, std::size_t k, std::uint64_t seed,
                                      std::optional<double> margin, double exponent, PartitionKind kind,
                                      std::size_t max_iters = 300) {
    const auto km = kmeans_fit(cloud, k, seed, max_iters);
    return build_cover(cloud, km.assignments, km.centers, margin, exponent, kind);
}

}  // namespace mldmae
