#pragma once

// Poisson event tree: filtration, state-price density, budget functional,
// conditional expectations, and measure-change diagnostics.
//
// The tree is non-recombining and binary: node (i, j) with j < 2^i sits at
// time t_i = i*delta; its children are (i+1, 2j) [no jump] and (i+1, 2j+1)
// [jump].  The bits of j encode the jump pattern, so the jump count N is
// popcount(j).  Per-level arrays ("slices") hold path probability and state
// price; everything else derives from those.

#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsru {

// Per-node scalar field stored as one contiguous array per time slice.
using Field = std::vector<std::vector<double>>;

struct MarketParams {
    double r      = 0.0;  // interest rate (1/year)
    double lambda = 0.0;  // Poisson intensity (events/year)
    double theta  = 0.0;  // jump log-weight of the density change, > 0
    double T      = 0.0;  // horizon (years)

    void validate() const {
        if (!(lambda >= 0.0)) throw std::invalid_argument("market: lambda must be >= 0");
        if (!(theta > 0.0)) throw std::invalid_argument("market: theta must be > 0");
        if (!(T > 0.0)) throw std::invalid_argument("market: T must be > 0");
        if (!(r >= 0.0)) throw std::invalid_argument("market: r must be >= 0");
    }

    // risk-neutral decay rate of the state price between jumps
    double price_decay() const { return r + lambda * (std::exp(theta) - 1.0); }
};

struct TimeGrid {
    int n_steps = 0;
    double delta = 0.0;

    TimeGrid() = default;
    TimeGrid(int n, double T) : n_steps(n), delta(T / n) {
        if (n <= 0) throw std::invalid_argument("grid: n_steps must be positive");
    }
    double time(int i) const { return i * delta; }
};

inline constexpr int kMaxTreeSteps = 22;

inline int jump_count(std::uint64_t j) { return std::popcount(j); }

// Jump pattern of node (i, j) as a bit string, first step leftmost.
// The root (i = 0) has the empty pattern.
inline std::string jump_pattern(int i, std::uint64_t j) {
    std::string s(static_cast<size_t>(i), '0');
    for (int b = 0; b < i; ++b)
        if (j >> (i - 1 - b) & 1u) s[static_cast<size_t>(b)] = '1';
    return s;
}

struct EventTree {
    MarketParams market;
    TimeGrid grid;
    int n = 0;           // number of steps; levels 0..n
    double p_jump = 0.0; // one-step jump probability lambda*delta
    Field prob;          // path probability under the reference measure
    Field psi;           // state price psi = exp(theta*N - (r+lambda(e^theta-1))*t)

    double t(int i) const { return grid.time(i); }
    double delta() const { return grid.delta; }
    std::size_t slice_size(int i) const { return std::size_t(1) << i; }

    // martingale density dP*/dP0 restricted to F_{t_i}
    double mart_density(int i, std::uint64_t j) const {
        return psi[static_cast<size_t>(i)][j] * std::exp(market.r * t(i));
    }

    // one-step conditional expectation, slice i+1 -> slice i
    void cond_exp(const std::vector<double>& next, std::vector<double>& out) const {
        const double p = p_jump;
        out.resize(next.size() / 2);
        for (std::size_t j = 0; j < out.size(); ++j)
            out[j] = (1.0 - p) * next[2 * j] + p * next[2 * j + 1];
    }
    std::vector<double> cond_exp(const std::vector<double>& next) const {
        std::vector<double> out;
        cond_exp(next, out);
        return out;
    }

    // field with every level sized to the tree, filled with a constant
    Field make_field(double fill = 0.0, int levels = -1) const {
        int m = levels < 0 ? n + 1 : levels;
        Field f(static_cast<size_t>(m));
        for (int i = 0; i < m; ++i) f[static_cast<size_t>(i)].assign(slice_size(i), fill);
        return f;
    }
};

inline EventTree build_tree(const MarketParams& market, const TimeGrid& grid) {
    market.validate();
    if (grid.n_steps > kMaxTreeSteps)
        throw std::invalid_argument("build_tree: n_steps " + std::to_string(grid.n_steps) +
                                    " exceeds cap " + std::to_string(kMaxTreeSteps));
    const double p = market.lambda * grid.delta;
    if (!(p < 1.0))
        throw std::invalid_argument("build_tree: lambda*delta must be < 1");

    EventTree tree;
    tree.market = market;
    tree.grid = grid;
    tree.n = grid.n_steps;
    tree.p_jump = p;
    tree.prob.resize(static_cast<size_t>(tree.n) + 1);
    tree.psi.resize(static_cast<size_t>(tree.n) + 1);
    const double a = market.price_decay();
    for (int i = 0; i <= tree.n; ++i) {
        const std::size_t m = tree.slice_size(i);
        auto& pr = tree.prob[static_cast<size_t>(i)];
        auto& ps = tree.psi[static_cast<size_t>(i)];
        pr.resize(m);
        ps.resize(m);
        const double decay = std::exp(-a * tree.t(i));
        for (std::size_t j = 0; j < m; ++j) {
            const int nj = jump_count(j);
            pr[j] = std::pow(p, nj) * std::pow(1.0 - p, i - nj);
            ps[j] = std::exp(market.theta * nj) * decay;
        }
    }
    return tree;
}

// forward declaration; definition in plans.hpp
struct ConsumptionPlan;

// E[ integral of psi dC ] with the left-endpoint rule: lumps priced at their
// node, each step's rate priced at the step's opening state price.
double budget(const EventTree& tree, const ConsumptionPlan& plan);

struct MomentCheck {
    double closed_form = 0.0;
    double mc_estimate = 0.0;
    double mc_stderr = 0.0;
};

// Moment E*[(dP0/dP*)^p] of the inverse density change: closed form
// exp(lambdaT(e^{theta(1-p)}-1) - lambda(e^theta-1)(1-p)T) against a Monte
// Carlo estimate drawing N_T ~ Poisson(lambda e^theta T) under P*.
inline MomentCheck density_moment(const MarketParams& market, double p,
                                  std::size_t n_samples, std::uint64_t seed) {
    market.validate();
    if (!(p >= 1.0)) throw std::invalid_argument("density_moment: p must be >= 1");
    if (n_samples == 0) throw std::invalid_argument("density_moment: n_samples must be positive");
    const double lam = market.lambda, th = market.theta, T = market.T;

    MomentCheck out;
    out.closed_form =
        std::exp(lam * T * (std::exp(th * (1.0 - p)) - 1.0) - lam * (std::exp(th) - 1.0) * (1.0 - p) * T);

    // under P*, N_T is Poisson with intensity lambda e^theta; the inverse
    // density is exp(-theta N_T + lambda(e^theta-1) T)
    std::mt19937_64 rng(seed);
    std::poisson_distribution<long> poi(lam * std::exp(th) * T);
    const double drift = lam * (std::exp(th) - 1.0) * T;
    double sum = 0.0, sumsq = 0.0;
    for (std::size_t k = 0; k < n_samples; ++k) {
        const double x = std::exp(p * (drift - th * static_cast<double>(poi(rng))));
        sum += x;
        sumsq += x * x;
    }
    const double mean = sum / static_cast<double>(n_samples);
    const double var = (sumsq / static_cast<double>(n_samples) - mean * mean) /
                       static_cast<double>(n_samples - 1);
    out.mc_estimate = mean;
    out.mc_stderr = std::sqrt(std::max(0.0, var));
    return out;
}

}  // namespace lsru
