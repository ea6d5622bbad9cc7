#pragma once

// Consumption plans on the event tree and the satisfaction process they
// induce.  A plan is a lump at every node plus a rate on every step; the
// satisfaction state Y follows dY = beta (dC - Y dt) and is stored at the
// post-lump right limit, so one step is exact:
//
//   Y_pre   = Y_parent * e^{-beta*delta} + rate_parent * (1 - e^{-beta*delta})
//   Y_store = Y_pre + beta * lump
//
// with Y at the root equal to eta + beta * lump_0.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsru/io.hpp"
#include "lsru/market_tree.hpp"

namespace lsru {

struct SatisfactionKernel {
    double eta = 0.0;   // initial satisfaction level, > 0
    double beta = 0.0;  // mean-reversion speed, > 0

    // Optional general weighting kernel theta(t, s) for the satisfaction
    // integral.  When absent the exponential kernel beta*e^{-beta(t-s)} is
    // used with exact one-step updates.  Only satisfaction evaluation and the
    // gradient support a general kernel.
    std::function<double(double, double)> theta{};

    void validate() const {
        if (!(eta >= 0.0)) throw std::invalid_argument("kernel: eta must be >= 0");
        if (!(beta > 0.0)) throw std::invalid_argument("kernel: beta must be > 0");
    }
};

struct ConsumptionPlan {
    Field lumps;  // levels 0..n
    Field rates;  // levels 0..n-1, rate held on [t_i, t_{i+1})

    int n_steps() const { return static_cast<int>(rates.size()); }

    void validate(const EventTree& tree) const {
        if (static_cast<int>(lumps.size()) != tree.n + 1 ||
            static_cast<int>(rates.size()) != tree.n)
            throw std::invalid_argument("plan: level count does not match tree");
        for (int i = 0; i <= tree.n; ++i) {
            if (lumps[static_cast<size_t>(i)].size() != tree.slice_size(i))
                throw std::invalid_argument("plan: lump slice " + std::to_string(i) + " has wrong size");
            for (double v : lumps[static_cast<size_t>(i)])
                if (!(v >= 0.0) || !std::isfinite(v))
                    throw std::invalid_argument("plan: lumps must be finite and nonnegative");
        }
        for (int i = 0; i < tree.n; ++i) {
            if (rates[static_cast<size_t>(i)].size() != tree.slice_size(i))
                throw std::invalid_argument("plan: rate slice " + std::to_string(i) + " has wrong size");
            for (double v : rates[static_cast<size_t>(i)])
                if (!(v >= 0.0) || !std::isfinite(v))
                    throw std::invalid_argument("plan: rates must be finite and nonnegative");
        }
    }
};

inline ConsumptionPlan zero_plan(const EventTree& tree) {
    ConsumptionPlan plan;
    plan.lumps = tree.make_field(0.0);
    plan.rates = tree.make_field(0.0, tree.n);
    return plan;
}

// ---------------------------------------------------------------------------
// satisfaction

inline Field satisfaction(const EventTree& tree, const ConsumptionPlan& plan,
                          const SatisfactionKernel& kernel) {
    kernel.validate();
    plan.validate(tree);

    if (kernel.theta) {
        // general kernel: direct quadrature along each node's own history,
        // left-endpoint rule for the rate part
        const double norm = kernel.theta(0.0, 0.0);
        if (!(norm > 0.0)) throw std::invalid_argument("kernel: theta(0,0) must be > 0");
        Field Y = tree.make_field();
        const double dt = tree.delta();
        for (int i = 0; i <= tree.n; ++i) {
            const double ti = tree.t(i);
            for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
                double y = kernel.eta * kernel.theta(ti, 0.0) / norm;
                // ancestor at level k is j >> (i - k)
                for (int k = 0; k <= i; ++k) {
                    const std::uint64_t a = j >> (i - k);
                    const double tk = tree.t(k);
                    y += kernel.theta(ti, tk) * plan.lumps[static_cast<size_t>(k)][a];
                    if (k < i) y += kernel.theta(ti, tk) * plan.rates[static_cast<size_t>(k)][a] * dt;
                }
                Y[static_cast<size_t>(i)][j] = y;
            }
        }
        return Y;
    }

    const double decay = std::exp(-kernel.beta * tree.delta());
    Field Y = tree.make_field();
    Y[0][0] = kernel.eta + kernel.beta * plan.lumps[0][0];
    for (int i = 0; i < tree.n; ++i) {
        const auto& yi = Y[static_cast<size_t>(i)];
        const auto& ri = plan.rates[static_cast<size_t>(i)];
        const auto& ln = plan.lumps[static_cast<size_t>(i) + 1];
        auto& yn = Y[static_cast<size_t>(i) + 1];
        for (std::size_t j = 0; j < yi.size(); ++j) {
            const double pre = yi[j] * decay + ri[j] * (1.0 - decay);
            yn[2 * j] = pre + kernel.beta * ln[2 * j];
            yn[2 * j + 1] = pre + kernel.beta * ln[2 * j + 1];
        }
    }
    return Y;
}

// ---------------------------------------------------------------------------
// budget (declared in market_tree.hpp)

inline double budget(const EventTree& tree, const ConsumptionPlan& plan) {
    plan.validate(tree);
    const double dt = tree.delta();
    double total = 0.0;
    for (int i = 0; i <= tree.n; ++i) {
        const auto& pr = tree.prob[static_cast<size_t>(i)];
        const auto& ps = tree.psi[static_cast<size_t>(i)];
        const auto& lu = plan.lumps[static_cast<size_t>(i)];
        const bool has_rate = i < tree.n;
        for (std::size_t j = 0; j < pr.size(); ++j) {
            double dc = lu[j];
            if (has_rate) dc += plan.rates[static_cast<size_t>(i)][j] * dt;
            total += pr[j] * ps[j] * dc;
        }
    }
    return total;
}

// ---------------------------------------------------------------------------
// plan algebra

inline ConsumptionPlan convex_combine(const ConsumptionPlan& a, const ConsumptionPlan& b,
                                      double w) {
    if (!(w >= 0.0 && w <= 1.0)) throw std::invalid_argument("convex_combine: weight must lie in [0,1]");
    if (a.lumps.size() != b.lumps.size() || a.rates.size() != b.rates.size())
        throw std::invalid_argument("convex_combine: plans live on different trees");
    ConsumptionPlan out = a;
    for (std::size_t i = 0; i < out.lumps.size(); ++i)
        for (std::size_t j = 0; j < out.lumps[i].size(); ++j)
            out.lumps[i][j] = w * a.lumps[i][j] + (1.0 - w) * b.lumps[i][j];
    for (std::size_t i = 0; i < out.rates.size(); ++i)
        for (std::size_t j = 0; j < out.rates[i].size(); ++j)
            out.rates[i][j] = w * a.rates[i][j] + (1.0 - w) * b.rates[i][j];
    return out;
}

// Per-leaf Stieltjes integral of a node field g against dC along each path,
// left-endpoint rule for rates.  Returns one value per leaf.
inline std::vector<double> pathwise_stieltjes(const EventTree& tree, const ConsumptionPlan& plan,
                                              const Field& g) {
    plan.validate(tree);
    const double dt = tree.delta();
    // accumulate forward: value at node = value at parent + g*dC at node
    Field acc = tree.make_field();
    acc[0][0] = g[0][0] * plan.lumps[0][0];
    for (int i = 0; i < tree.n; ++i) {
        const auto& ai = acc[static_cast<size_t>(i)];
        auto& an = acc[static_cast<size_t>(i) + 1];
        for (std::size_t j = 0; j < ai.size(); ++j) {
            const double base = ai[j] + g[static_cast<size_t>(i)][j] *
                                            plan.rates[static_cast<size_t>(i)][j] * dt;
            an[2 * j] = base + g[static_cast<size_t>(i) + 1][2 * j] *
                                   plan.lumps[static_cast<size_t>(i) + 1][2 * j];
            an[2 * j + 1] = base + g[static_cast<size_t>(i) + 1][2 * j + 1] *
                                       plan.lumps[static_cast<size_t>(i) + 1][2 * j + 1];
        }
    }
    return acc[static_cast<size_t>(tree.n)];
}

// ---------------------------------------------------------------------------
// minimal-level construction

// Smallest satisfaction process that stays at or above the level field L:
// Y^L_t = e^{-beta t} max(eta, sup_{v<=t} L_v e^{beta v}), computed by the
// forward recursion Y = max(Y_parent e^{-beta delta}, L).
inline Field minimal_level_satisfaction(const EventTree& tree, const Field& L,
                                        const SatisfactionKernel& kernel) {
    kernel.validate();
    const double decay = std::exp(-kernel.beta * tree.delta());
    Field Y = tree.make_field();
    Y[0][0] = std::max(kernel.eta, L[0][0]);
    for (int i = 0; i < tree.n; ++i) {
        const auto& yi = Y[static_cast<size_t>(i)];
        const auto& ln = L[static_cast<size_t>(i) + 1];
        auto& yn = Y[static_cast<size_t>(i) + 1];
        for (std::size_t j = 0; j < yi.size(); ++j) {
            const double pre = yi[j] * decay;
            yn[2 * j] = std::max(pre, ln[2 * j]);
            yn[2 * j + 1] = std::max(pre, ln[2 * j + 1]);
        }
    }
    return Y;
}

// Recover the plan financing a minimal-level satisfaction field: increments
// over the decayed parent value become lumps where the level jumps (the root
// and jump children) and rates elsewhere.  Increments below -1e-10 mean the
// field is not a satisfaction process and raise an error.
inline ConsumptionPlan plan_from_level(const EventTree& tree, const Field& YL,
                                       const SatisfactionKernel& kernel) {
    kernel.validate();
    const double dt = tree.delta();
    const double decay = std::exp(-kernel.beta * dt);
    ConsumptionPlan plan = zero_plan(tree);

    const double root_rise = YL[0][0] - kernel.eta;
    if (root_rise < -1e-10)
        throw std::invalid_argument("plan_from_level: level at root below eta");
    plan.lumps[0][0] = std::max(0.0, root_rise) / kernel.beta;

    for (int i = 0; i < tree.n; ++i) {
        const auto& yi = YL[static_cast<size_t>(i)];
        const auto& yn = YL[static_cast<size_t>(i) + 1];
        for (std::size_t j = 0; j < yi.size(); ++j) {
            const double pre = yi[j] * decay;
            const double rise0 = yn[2 * j] - pre;
            const double rise1 = yn[2 * j + 1] - pre;
            if (std::min(rise0, rise1) < -1e-10)
                throw std::invalid_argument(
                    "plan_from_level: negative increment at step " + std::to_string(i + 1) +
                    " pattern " + jump_pattern(i + 1, 2 * j + (rise1 < rise0 ? 1 : 0)));
            // A constant rate q moves the no-jump child to pre + q (1 - decay),
            // so this choice reproduces the continuation branch exactly; for
            // small steps it is Y + beta^{-1} dY/dt up to O(dt).  The same rate
            // also feeds the jump child, so only the remaining excess there is
            // a lump.
            const double rate = std::max(0.0, rise0) / (1.0 - decay);
            plan.rates[static_cast<size_t>(i)][j] = rate;
            const double excess = rise1 - rate * (1.0 - decay);
            if (excess > 0.0)
                plan.lumps[static_cast<size_t>(i) + 1][2 * j + 1] = excess / kernel.beta;
        }
    }
    return plan;
}

// ---------------------------------------------------------------------------
// CSV round trip: one row per node (step, jump_pattern, lump, rate), rates
// written as 0 on the final slice.  Doubles use shortest round-trip format,
// so writing a freshly read plan reproduces the file byte for byte.

inline void write_plan_csv(std::ostream& os, const EventTree& tree, const ConsumptionPlan& plan) {
    os << "step,jump_pattern,lump,rate\n";
    for (int i = 0; i <= tree.n; ++i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
            const double rate = i < tree.n ? plan.rates[static_cast<size_t>(i)][j] : 0.0;
            os << i << ',' << jump_pattern(i, j) << ',' << format_double(plan.lumps[static_cast<size_t>(i)][j])
               << ',' << format_double(rate) << '\n';
        }
}

inline void write_plan_csv(const std::string& path, const EventTree& tree,
                           const ConsumptionPlan& plan) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_plan_csv: cannot open " + path);
    write_plan_csv(os, tree, plan);
}

struct PlanCsv {
    int n_steps = 0;
    ConsumptionPlan plan;
};

inline PlanCsv read_plan_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "step,jump_pattern,lump,rate")
        throw std::runtime_error("read_plan_csv: missing or malformed header");

    Field lumps, rates;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto cols = split_csv_line(line);
        if (cols.size() != 4) throw std::runtime_error("read_plan_csv: expected 4 columns, got line '" + line + "'");
        const long step = parse_long(cols[0]);
        const std::string_view pattern = cols[1];
        if (step < 0 || static_cast<long>(pattern.size()) != step)
            throw std::runtime_error("read_plan_csv: jump_pattern length does not match step");
        std::uint64_t j = 0;
        for (char ch : pattern) {
            if (ch != '0' && ch != '1') throw std::runtime_error("read_plan_csv: bad jump_pattern");
            j = (j << 1) | static_cast<std::uint64_t>(ch == '1');
        }
        if (static_cast<std::size_t>(step) >= lumps.size()) {
            lumps.resize(static_cast<size_t>(step) + 1);
            rates.resize(static_cast<size_t>(step) + 1);
            lumps[static_cast<size_t>(step)].assign(std::size_t(1) << step, 0.0);
            rates[static_cast<size_t>(step)].assign(std::size_t(1) << step, 0.0);
        }
        lumps[static_cast<size_t>(step)][j] = parse_double(cols[2]);
        rates[static_cast<size_t>(step)][j] = parse_double(cols[3]);
    }
    if (lumps.empty()) throw std::runtime_error("read_plan_csv: no rows");

    PlanCsv out;
    out.n_steps = static_cast<int>(lumps.size()) - 1;
    out.plan.lumps = std::move(lumps);
    rates.pop_back();  // final slice carries no rate
    out.plan.rates = std::move(rates);
    for (int i = 0; i <= out.n_steps; ++i)
        if (out.plan.lumps[static_cast<size_t>(i)].size() != std::size_t(1) << i)
            throw std::runtime_error("read_plan_csv: incomplete slice at step " + std::to_string(i));
    return out;
}

inline PlanCsv read_plan_csv(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_plan_csv: cannot open " + path);
    return read_plan_csv(is);
}

}  // namespace lsru
