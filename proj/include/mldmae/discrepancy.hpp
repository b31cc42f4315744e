#pragma once

// Kernels, MMD, exact discrete optimal transport (min-cost flow with an
// assignment fast path), closed-form 1D W1 and sliced W1, plus the
// latent-space penalty gradients used by the trainer.

#include "mldmae/core.hpp"

#include <functional>
#include <string_view>

namespace mldmae {

enum class KernelFamily { gaussian_rbf, imq, smoothing_gaussian };

struct KernelSpec {
    KernelFamily family = KernelFamily::gaussian_rbf;
    double scale = 1.0;

    void validate() const {
        if (!(scale > 0.0)) throw ConfigError("kernel scale must be positive");
    }

    /// IMQ with C = 2d, the constant used for latent-space MMD penalties.
    static KernelSpec imq_preset(std::size_t latent_dim) {
        return {KernelFamily::imq, 2.0 * static_cast<double>(latent_dim)};
    }
};

inline std::string_view to_string(KernelFamily f) {
    switch (f) {
        case KernelFamily::gaussian_rbf: return "gaussian_rbf";
        case KernelFamily::imq: return "imq";
        case KernelFamily::smoothing_gaussian: return "smoothing_gaussian";
    }
    return "gaussian_rbf";
}

inline KernelFamily kernel_family_from_string(std::string_view s) {
    if (s == "gaussian_rbf" || s == "rbf") return KernelFamily::gaussian_rbf;
    if (s == "imq") return KernelFamily::imq;
    if (s == "smoothing_gaussian") return KernelFamily::smoothing_gaussian;
    throw ConfigError("unknown kernel family '" + std::string(s) + "'");
}

enum class GroundMetric { l1, l2 };

inline std::string_view to_string(GroundMetric m) { return m == GroundMetric::l1 ? "l1" : "l2"; }

inline GroundMetric ground_metric_from_string(std::string_view s) {
    if (s == "l1") return GroundMetric::l1;
    if (s == "l2") return GroundMetric::l2;
    throw ConfigError("unknown ground metric '" + std::string(s) + "'");
}

inline double ground_cost(GroundMetric m, std::span<const double> a, std::span<const double> b) {
    if (m == GroundMetric::l2) return distance(a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s;
}

namespace detail {
inline double kernel_from_sq(const KernelSpec& spec, double sq, std::size_t dim) {
    switch (spec.family) {
        case KernelFamily::gaussian_rbf: return std::exp(-sq / spec.scale);
        case KernelFamily::imq: return spec.scale / (spec.scale + sq);
        case KernelFamily::smoothing_gaussian:
            return std::pow(2.0 * std::numbers::pi * spec.scale, -0.5 * static_cast<double>(dim)) *
                   std::exp(-sq / (2.0 * spec.scale));
    }
    return 0.0;
}

// d k / d(sq) for the squared distance sq = |x - y|^2.
inline double kernel_dsq(const KernelSpec& spec, double sq, std::size_t dim) {
    switch (spec.family) {
        case KernelFamily::gaussian_rbf: return -std::exp(-sq / spec.scale) / spec.scale;
        case KernelFamily::imq: {
            const double den = spec.scale + sq;
            return -spec.scale / (den * den);
        }
        case KernelFamily::smoothing_gaussian:
            return -kernel_from_sq(spec, sq, dim) / (2.0 * spec.scale);
    }
    return 0.0;
}

inline void require_same_dim(const Matrix& x, const Matrix& y) {
    if (x.cols() != y.cols()) {
        throw ShapeError("sample sets have different dimensions (" + std::to_string(x.cols()) + " vs " +
                         std::to_string(y.cols()) + ")");
    }
}

inline void require_nonempty(const Matrix& x, const char* what) {
    if (x.rows() == 0) throw ConfigError(std::string(what) + " sample set is empty");
}
}  // namespace detail

inline double kernel_eval(const KernelSpec& spec, std::span<const double> x, std::span<const double> y) {
    spec.validate();
    if (x.size() != y.size()) throw ShapeError("kernel arguments have different dimensions");
    return detail::kernel_from_sq(spec, squared_distance(x, y), x.size());
}

/// Biased (V-statistic) squared MMD, diagonal terms included.
inline double mmd2_biased(const KernelSpec& spec, const Matrix& x, const Matrix& y) {
    spec.validate();
    detail::require_nonempty(x, "first");
    detail::require_nonempty(y, "second");
    detail::require_same_dim(x, y);
    const std::size_t d = x.cols();
    auto mean_gram = [&](const Matrix& a, const Matrix& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.rows(); ++i) {
            for (std::size_t j = 0; j < b.rows(); ++j) {
                s += detail::kernel_from_sq(spec, squared_distance(a.row(i), b.row(j)), d);
            }
        }
        return s / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
    };
    return mean_gram(x, x) + mean_gram(y, y) - 2.0 * mean_gram(x, y);
}

// ---------------------------------------------------------------------------
// Exact optimal transport.

namespace detail {

// Jonker-Volgenant on a dense row-major cost matrix: column reduction,
// two passes of augmenting row reduction, then shortest augmenting paths
// for the rows still free. x[i] is the column of row i, y[j] the row of column j.
class DenseLap {
public:
    DenseLap(std::size_t n, std::vector<double> cost)
        : n_(n), c_(std::move(cost)), x_(n, none), y_(n, none), v_(n, 0.0) {}

    std::vector<std::size_t> solve() {
        if (n_ == 0) return {};
        std::vector<std::size_t> free_rows(n_);
        std::size_t n_free = column_reduction(free_rows);
        for (int pass = 0; pass < 2 && n_free > 0; ++pass) n_free = row_reduction(free_rows, n_free);
        if (n_free > 0) augment(free_rows, n_free);
        return x_;
    }

private:
    static constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
    static constexpr double large = std::numeric_limits<double>::max();

    double cost(std::size_t i, std::size_t j) const { return c_[i * n_ + j]; }

    std::size_t column_reduction(std::vector<std::size_t>& free_rows) {
        std::fill(v_.begin(), v_.end(), large);
        for (std::size_t i = 0; i < n_; ++i) {
            for (std::size_t j = 0; j < n_; ++j) {
                if (cost(i, j) < v_[j]) {
                    v_[j] = cost(i, j);
                    y_[j] = i;
                }
            }
        }
        std::vector<char> unique(n_, 1);
        for (std::size_t j = n_; j-- > 0;) {
            const std::size_t i = y_[j];
            if (x_[i] == none) {
                x_[i] = j;
            } else {
                unique[i] = 0;
                y_[j] = none;
            }
        }
        std::size_t n_free = 0;
        for (std::size_t i = 0; i < n_; ++i) {
            if (x_[i] == none) {
                free_rows[n_free++] = i;
            } else if (unique[i] && n_ > 1) {
                const std::size_t j = x_[i];
                double mn = large;
                for (std::size_t j2 = 0; j2 < n_; ++j2) {
                    if (j2 != j) mn = std::min(mn, cost(i, j2) - v_[j2]);
                }
                v_[j] -= mn;
            }
        }
        return n_free;
    }

    std::size_t row_reduction(std::vector<std::size_t>& free_rows, std::size_t n_free) {
        std::size_t current = 0;
        std::size_t new_free = 0;
        std::size_t rr_count = 0;
        while (current < n_free) {
            ++rr_count;
            const std::size_t free_i = free_rows[current++];
            std::size_t j1 = 0;
            std::size_t j2 = none;
            double v1 = cost(free_i, 0) - v_[0];
            double v2 = large;
            for (std::size_t j = 1; j < n_; ++j) {
                const double c = cost(free_i, j) - v_[j];
                if (c < v2) {
                    if (c >= v1) {
                        v2 = c;
                        j2 = j;
                    } else {
                        v2 = v1;
                        v1 = c;
                        j2 = j1;
                        j1 = j;
                    }
                }
            }
            std::size_t i0 = y_[j1];
            const double v1_new = v_[j1] - (v2 - v1);
            const bool lowers = v1_new < v_[j1];
            if (rr_count < current * n_) {
                if (lowers) {
                    v_[j1] = v1_new;
                } else if (i0 != none && j2 != none) {
                    j1 = j2;
                    i0 = y_[j2];
                }
                if (i0 != none) {
                    if (lowers) {
                        free_rows[--current] = i0;
                    } else {
                        free_rows[new_free++] = i0;
                    }
                }
            } else if (i0 != none) {
                free_rows[new_free++] = i0;
            }
            x_[free_i] = j1;
            y_[j1] = free_i;
        }
        return new_free;
    }

    // Shortest alternating path from a free row to a free column (Dijkstra
    // over reduced costs); updates the column duals of the settled set.
    std::size_t find_path(std::size_t start, std::vector<std::size_t>& pred, std::vector<std::size_t>& cols,
                          std::vector<double>& d) {
        std::size_t lo = 0;
        std::size_t hi = 0;
        std::size_t n_ready = 0;
        std::size_t final_j = none;
        for (std::size_t j = 0; j < n_; ++j) {
            cols[j] = j;
            pred[j] = start;
            d[j] = cost(start, j) - v_[j];
        }
        while (final_j == none) {
            if (lo == hi) {
                n_ready = lo;
                // Move every column at the current minimum distance into [lo, hi).
                hi = lo + 1;
                double mind = d[cols[lo]];
                for (std::size_t k = hi; k < n_; ++k) {
                    const std::size_t j = cols[k];
                    if (d[j] <= mind) {
                        if (d[j] < mind) {
                            hi = lo;
                            mind = d[j];
                        }
                        cols[k] = cols[hi];
                        cols[hi++] = j;
                    }
                }
                for (std::size_t k = lo; k < hi; ++k) {
                    if (y_[cols[k]] == none) {
                        final_j = cols[k];
                        break;
                    }
                }
            }
            if (final_j == none) final_j = scan(lo, hi, d, cols, pred);
        }
        // final_j sits at the current minimum distance; scan() may have moved lo past it.
        const double mind = d[final_j];
        for (std::size_t k = 0; k < n_ready; ++k) {
            const std::size_t j = cols[k];
            v_[j] += d[j] - mind;
        }
        return final_j;
    }

    std::size_t scan(std::size_t& lo, std::size_t& hi, std::vector<double>& d, std::vector<std::size_t>& cols,
                     std::vector<std::size_t>& pred) {
        while (lo != hi) {
            std::size_t j = cols[lo++];
            const std::size_t i = y_[j];
            const double mind = d[j];
            const double h = cost(i, j) - v_[j] - mind;
            for (std::size_t k = hi; k < n_; ++k) {
                j = cols[k];
                const double red = cost(i, j) - v_[j] - h;
                if (red < d[j]) {
                    d[j] = red;
                    pred[j] = i;
                    if (red == mind) {
                        if (y_[j] == none) return j;
                        cols[k] = cols[hi];
                        cols[hi++] = j;
                    }
                }
            }
        }
        return none;
    }

    void augment(const std::vector<std::size_t>& free_rows, std::size_t n_free) {
        std::vector<std::size_t> pred(n_), cols(n_);
        std::vector<double> d(n_);
        for (std::size_t f = 0; f < n_free; ++f) {
            const std::size_t free_i = free_rows[f];
            std::size_t j = find_path(free_i, pred, cols, d);
            std::size_t i = none;
            std::size_t guard = 0;
            while (i != free_i) {
                i = pred[j];
                y_[j] = i;
                std::swap(j, x_[i]);
                if (++guard > n_) throw NumericError("assignment augmentation did not terminate");
            }
        }
    }

    std::size_t n_;
    std::vector<double> c_;
    std::vector<std::size_t> x_, y_;
    std::vector<double> v_;
};

}  // namespace detail

/// Minimum-cost perfect matching on an n x n cost matrix given as a callable
/// (Jonker-Volgenant; the matrix is materialized once). Returns the column
/// matched to each row.
template <class CostFn>
std::vector<std::size_t> solve_assignment(std::size_t n, CostFn&& cost) {
    std::vector<double> c(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] = cost(i, j);
    }
    return detail::DenseLap(n, std::move(c)).solve();
}

/// Optimal coupling between two equal-size uniform samples; entry i is the
/// index in y matched with x's row i.
inline std::vector<std::size_t> optimal_matching(const Matrix& x, const Matrix& y, GroundMetric metric) {
    detail::require_same_dim(x, y);
    if (x.rows() != y.rows()) throw ShapeError("matching needs equal sample counts");
    return solve_assignment(x.rows(), [&](std::size_t i, std::size_t j) { return ground_cost(metric, x.row(i), y.row(j)); });
}

/// Sparse transport plan entry.
struct TransportEntry {
    std::size_t source;
    std::size_t target;
    double mass;
};

struct TransportResult {
    double cost = 0.0;
    std::vector<TransportEntry> plan;
};

/// Exact transport between discrete measures (sum a = sum b) with costs
/// c(i, j), by successive shortest paths on the bipartite residual network
/// with Dijkstra and node potentials. Dense, intended for moderate sizes.
template <class CostFn>
TransportResult solve_transport(std::span<const double> a, std::span<const double> b, CostFn&& cost) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    constexpr double mass_eps = 1e-15;
    const std::size_t n = a.size();
    const std::size_t m = b.size();
    const std::size_t nodes = n + m;
    std::vector<double> supply(a.begin(), a.end());
    std::vector<double> demand(b.begin(), b.end());
    // flows[j] lists (source, mass) pairs with positive flow into target j.
    // Reduced costs are clamped at zero to absorb rounding in the potentials.
    std::vector<std::vector<std::pair<std::size_t, double>>> flows(m);
    std::vector<double> potential(nodes, 0.0), dist(nodes);
    std::vector<std::size_t> parent(nodes);
    std::vector<char> done(nodes);
    constexpr std::size_t none = std::numeric_limits<std::size_t>::max();

    auto remaining = [&] {
        double s = 0.0, t = 0.0;
        for (double v : supply) s += v;
        for (double v : demand) t += v;
        return std::min(s, t);
    };

    std::size_t guard = 0;
    const std::size_t guard_limit = 16 * (nodes + 1) * (nodes + 1);
    while (remaining() > 1e-13) {
        if (++guard > guard_limit) throw NumericError("transport solver failed to converge");
        std::fill(dist.begin(), dist.end(), inf);
        std::fill(parent.begin(), parent.end(), none);
        std::fill(done.begin(), done.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            if (supply[i] > mass_eps) dist[i] = 0.0;
        }
        std::size_t sink = none;
        while (true) {
            std::size_t best = none;
            double best_d = inf;
            for (std::size_t v = 0; v < nodes; ++v) {
                if (!done[v] && dist[v] < best_d) {
                    best_d = dist[v];
                    best = v;
                }
            }
            if (best == none) break;
            done[best] = 1;
            if (best >= n && demand[best - n] > mass_eps) {
                sink = best;
                break;
            }
            if (best < n) {
                for (std::size_t j = 0; j < m; ++j) {
                    const std::size_t t = n + j;
                    if (done[t]) continue;
                    const double rc = std::max(0.0, cost(best, j) + potential[best] - potential[t]);
                    if (best_d + rc < dist[t]) {
                        dist[t] = best_d + rc;
                        parent[t] = best;
                    }
                }
            } else {
                const std::size_t j = best - n;
                for (const auto& [i, mass] : flows[j]) {
                    if (mass <= mass_eps || done[i]) continue;
                    const double rc = std::max(0.0, -cost(i, j) + potential[best] - potential[i]);
                    if (best_d + rc < dist[i]) {
                        dist[i] = best_d + rc;
                        parent[i] = best;
                    }
                }
            }
        }
        if (sink == none) throw NumericError("transport solver found no augmenting path");
        const double d_sink = dist[sink];
        for (std::size_t v = 0; v < nodes; ++v) potential[v] += std::min(dist[v], d_sink);

        // Bottleneck along the path.
        double push = demand[sink - n];
        std::size_t v = sink;
        while (parent[v] != none) {
            const std::size_t p = parent[v];
            if (p >= n) {
                // backward edge target p -> source v carries flow[v -> p]
                for (const auto& [i, mass] : flows[p - n]) {
                    if (i == v) push = std::min(push, mass);
                }
            }
            v = p;
        }
        push = std::min(push, supply[v]);
        supply[v] -= push;
        demand[sink - n] -= push;
        v = sink;
        while (parent[v] != none) {
            const std::size_t p = parent[v];
            if (p < n) {
                auto& list = flows[v - n];
                auto it = std::find_if(list.begin(), list.end(), [&](const auto& e) { return e.first == p; });
                if (it == list.end()) {
                    list.emplace_back(p, push);
                } else {
                    it->second += push;
                }
            } else {
                auto& list = flows[p - n];
                auto it = std::find_if(list.begin(), list.end(), [&](const auto& e) { return e.first == v; });
                it->second -= push;
                if (it->second <= mass_eps) list.erase(it);
            }
            v = p;
        }
    }

    TransportResult result;
    for (std::size_t j = 0; j < m; ++j) {
        for (const auto& [i, mass] : flows[j]) {
            result.plan.push_back({i, j, mass});
            result.cost += mass * cost(i, j);
        }
    }
    return result;
}

struct TransportOptions {
    GroundMetric metric = GroundMetric::l2;
    std::size_t max_support = 5000;
};

namespace detail {
inline std::vector<double> uniform_weights(std::size_t n) {
    return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

inline void check_weights(std::span<const double> w, std::size_t n, const char* side) {
    if (w.size() != n) throw ShapeError(std::string(side) + " weight vector length differs from its sample count");
    double s = 0.0;
    for (double v : w) {
        if (!(v >= 0.0)) throw ConfigError(std::string(side) + " weights must be nonnegative");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) {
        throw ConfigError(std::string(side) + " weights sum to " + std::to_string(s) + ", expected 1");
    }
}

inline bool is_uniform(std::span<const double> w) {
    if (w.empty()) return true;
    for (double v : w) {
        if (v != w.front()) return false;
    }
    return true;
}
}  // namespace detail

/// Exact W1 between weighted discrete measures. Equal-size uniform inputs use
/// the assignment fast path; everything else goes through the transport solver.
inline double w1_discrete_exact(const Matrix& x, std::span<const double> wx, const Matrix& y,
                                std::span<const double> wy, const TransportOptions& opts = {}) {
    detail::require_nonempty(x, "first");
    detail::require_nonempty(y, "second");
    detail::require_same_dim(x, y);
    if (x.rows() > opts.max_support || y.rows() > opts.max_support) {
        throw ConfigError("W1 support of " + std::to_string(std::max(x.rows(), y.rows())) +
                          " points exceeds the cap of " + std::to_string(opts.max_support) + "; subsample the inputs");
    }
    detail::check_weights(wx, x.rows(), "first");
    detail::check_weights(wy, y.rows(), "second");
    auto cost = [&](std::size_t i, std::size_t j) { return ground_cost(opts.metric, x.row(i), y.row(j)); };
    if (x.rows() == y.rows() && detail::is_uniform(wx) && detail::is_uniform(wy)) {
        const auto match = solve_assignment(x.rows(), cost);
        double s = 0.0;
        for (std::size_t i = 0; i < match.size(); ++i) s += cost(i, match[i]);
        return s / static_cast<double>(x.rows());
    }
    return solve_transport(wx, wy, cost).cost;
}

/// Uniform-weight overload.
inline double w1_discrete_exact(const Matrix& x, const Matrix& y, const TransportOptions& opts = {}) {
    const auto wx = detail::uniform_weights(x.rows());
    const auto wy = detail::uniform_weights(y.rows());
    return w1_discrete_exact(x, wx, y, wy, opts);
}

/// W1 between two weighted 1D measures by integrating the quantile difference.
inline double w1_1d_weighted(std::span<const double> x, std::span<const double> wx, std::span<const double> y,
                             std::span<const double> wy) {
    if (x.empty() || y.empty()) throw ConfigError("1D W1 needs non-empty inputs");
    auto sorted_index = [](std::span<const double> v) {
        std::vector<std::size_t> idx(v.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        return idx;
    };
    const auto ix = sorted_index(x);
    const auto iy = sorted_index(y);
    double tx = 0.0, ty = 0.0;
    for (double w : wx) tx += w;
    for (double w : wy) ty += w;
    std::size_t a = 0, b = 0;
    double ra = wx[ix[0]] / tx, rb = wy[iy[0]] / ty;
    double total = 0.0;
    while (a < ix.size() && b < iy.size()) {
        const double step = std::min(ra, rb);
        total += step * std::abs(x[ix[a]] - y[iy[b]]);
        ra -= step;
        rb -= step;
        if (ra <= 1e-15) {
            if (++a < ix.size()) ra = wx[ix[a]] / tx;
        }
        if (rb <= 1e-15) {
            if (++b < iy.size()) rb = wy[iy[b]] / ty;
        }
    }
    return total;
}

/// W1 between two uniformly weighted 1D samples. Equal sizes reduce to the
/// mean absolute difference of the sorted samples.
inline double w1_1d(std::span<const double> x, std::span<const double> y) {
    if (x.empty() || y.empty()) throw ConfigError("1D W1 needs non-empty inputs");
    if (x.size() == y.size()) {
        std::vector<double> sx(x.begin(), x.end()), sy(y.begin(), y.end());
        std::sort(sx.begin(), sx.end());
        std::sort(sy.begin(), sy.end());
        double s = 0.0;
        for (std::size_t i = 0; i < sx.size(); ++i) s += std::abs(sx[i] - sy[i]);
        return s / static_cast<double>(sx.size());
    }
    const auto wx = detail::uniform_weights(x.size());
    const auto wy = detail::uniform_weights(y.size());
    return w1_1d_weighted(x, wx, y, wy);
}

/// Uniform random direction on the unit sphere for projection `index`.
inline std::vector<double> random_direction(std::size_t dim, std::uint64_t seed, std::uint64_t index) {
    Rng rng(seed, index);
    std::vector<double> theta(dim);
    double norm = 0.0;
    do {
        norm = 0.0;
        for (double& t : theta) {
            t = rng.normal();
            norm += t * t;
        }
        norm = std::sqrt(norm);
    } while (norm < 1e-12);
    for (double& t : theta) t /= norm;
    return theta;
}

inline std::vector<double> project(const Matrix& x, std::span<const double> theta) {
    std::vector<double> p(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) s += x(i, c) * theta[c];
        p[i] = s;
    }
    return p;
}

/// Monte Carlo sliced W1; projection p uses the stream derived from (seed, p).
inline double sliced_w1(const Matrix& x, const Matrix& y, std::size_t num_projections, std::uint64_t seed) {
    if (num_projections < 1) throw ConfigError("sliced W1 needs at least one projection");
    detail::require_nonempty(x, "first");
    detail::require_nonempty(y, "second");
    detail::require_same_dim(x, y);
    double s = 0.0;
    for (std::size_t p = 0; p < num_projections; ++p) {
        const auto theta = random_direction(x.cols(), seed, p);
        s += w1_1d(project(x, theta), project(y, theta));
    }
    return s / static_cast<double>(num_projections);
}

// ---------------------------------------------------------------------------
// Latent-space penalties with gradients for the trainer.

enum class PenaltyKind { mmd, w1, sliced_w1 };

inline std::string_view to_string(PenaltyKind k) {
    switch (k) {
        case PenaltyKind::mmd: return "mmd";
        case PenaltyKind::w1: return "w1";
        case PenaltyKind::sliced_w1: return "sliced_w1";
    }
    return "w1";
}

inline PenaltyKind penalty_kind_from_string(std::string_view s) {
    if (s == "mmd") return PenaltyKind::mmd;
    if (s == "w1") return PenaltyKind::w1;
    if (s == "sliced_w1") return PenaltyKind::sliced_w1;
    throw ConfigError("unknown penalty '" + std::string(s) + "'");
}

/// Choice of latent discrepancy and its hyperparameters.
struct DiscrepancySpec {
    PenaltyKind kind = PenaltyKind::w1;
    KernelSpec kernel{KernelFamily::imq, 2.0};
    // Use C = 2d for IMQ kernels instead of kernel.scale.
    bool imq_two_d = true;
    GroundMetric metric = GroundMetric::l2;
    std::size_t num_projections = 50;

    KernelSpec kernel_for(std::size_t latent_dim) const {
        if (kernel.family == KernelFamily::imq && imq_two_d) return KernelSpec::imq_preset(latent_dim);
        return kernel;
    }
};

struct PenaltyEval {
    double value = 0.0;
    Matrix grad;  // d value / d encoded, same shape as encoded
};

/// D(prior sample, encoded sample) and its gradient with respect to the
/// encoded sample. W1 uses the optimal coupling held fixed; MMD is exact.
inline PenaltyEval penalty_with_grad(const DiscrepancySpec& spec, const Matrix& prior, const Matrix& encoded,
                                     std::uint64_t seed) {
    detail::require_nonempty(prior, "prior");
    detail::require_nonempty(encoded, "encoded");
    detail::require_same_dim(prior, encoded);
    const std::size_t d = encoded.cols();
    const std::size_t n = encoded.rows();
    PenaltyEval out;
    out.grad = Matrix(n, d);
    switch (spec.kind) {
        case PenaltyKind::mmd: {
            const KernelSpec k = spec.kernel_for(d);
            k.validate();
            const double m = static_cast<double>(prior.rows());
            const double nn = static_cast<double>(n);
            double sxx = 0.0, syy = 0.0, sxy = 0.0;
            for (std::size_t i = 0; i < prior.rows(); ++i) {
                for (std::size_t j = 0; j < prior.rows(); ++j) {
                    sxx += detail::kernel_from_sq(k, squared_distance(prior.row(i), prior.row(j)), d);
                }
            }
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const double sq = squared_distance(encoded.row(i), encoded.row(j));
                    syy += detail::kernel_from_sq(k, sq, d);
                    // Each ordered pair contributes to both rows; symmetric sum gives factor 2.
                    const double coef = 2.0 * detail::kernel_dsq(k, sq, d) / (nn * nn);
                    for (std::size_t c = 0; c < d; ++c) {
                        out.grad(i, c) += coef * 2.0 * (encoded(i, c) - encoded(j, c));
                    }
                }
                for (std::size_t j = 0; j < prior.rows(); ++j) {
                    const double sq = squared_distance(encoded.row(i), prior.row(j));
                    sxy += detail::kernel_from_sq(k, sq, d);
                    const double coef = -2.0 * detail::kernel_dsq(k, sq, d) / (nn * m);
                    for (std::size_t c = 0; c < d; ++c) {
                        out.grad(i, c) += coef * 2.0 * (encoded(i, c) - prior(j, c));
                    }
                }
            }
            out.value = sxx / (m * m) + syy / (nn * nn) - 2.0 * sxy / (m * nn);
            break;
        }
        case PenaltyKind::w1: {
            if (prior.rows() != n) throw ShapeError("W1 penalty needs equal prior and encoded sample counts");
            const auto match = optimal_matching(encoded, prior, spec.metric);
            for (std::size_t i = 0; i < n; ++i) {
                const auto e = encoded.row(i);
                const auto z = prior.row(match[i]);
                out.value += ground_cost(spec.metric, e, z);
                if (spec.metric == GroundMetric::l2) {
                    const double dist_ez = distance(e, z);
                    if (dist_ez > 0.0) {
                        for (std::size_t c = 0; c < d; ++c) out.grad(i, c) = (e[c] - z[c]) / (dist_ez * n);
                    }
                } else {
                    for (std::size_t c = 0; c < d; ++c) {
                        const double diff = e[c] - z[c];
                        out.grad(i, c) = (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) / n;
                    }
                }
            }
            out.value /= static_cast<double>(n);
            break;
        }
        case PenaltyKind::sliced_w1: {
            if (prior.rows() != n) throw ShapeError("sliced W1 penalty needs equal prior and encoded sample counts");
            if (spec.num_projections < 1) throw ConfigError("sliced W1 needs at least one projection");
            const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(spec.num_projections));
            std::vector<std::size_t> order_e(n), order_z(n);
            for (std::size_t p = 0; p < spec.num_projections; ++p) {
                const auto theta = random_direction(d, seed, p);
                const auto pe = project(encoded, theta);
                const auto pz = project(prior, theta);
                for (std::size_t i = 0; i < n; ++i) order_e[i] = order_z[i] = i;
                std::stable_sort(order_e.begin(), order_e.end(), [&](auto a, auto b) { return pe[a] < pe[b]; });
                std::stable_sort(order_z.begin(), order_z.end(), [&](auto a, auto b) { return pz[a] < pz[b]; });
                for (std::size_t r = 0; r < n; ++r) {
                    const double diff = pe[order_e[r]] - pz[order_z[r]];
                    out.value += std::abs(diff) * scale;
                    const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                    for (std::size_t c = 0; c < d; ++c) out.grad(order_e[r], c) += sgn * theta[c] * scale;
                }
            }
            break;
        }
    }
    return out;
}

}  // namespace mldmae
