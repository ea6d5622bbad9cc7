#pragma once

// Candidate optimal consumption plans and their calibration: the
// lump-at-zero plan for the contracting regime, the barrier policy (initial
// lump, waiting regions, formula rates on free intervals) for the expanding
// regime, consumption-rate formulas, and the minimal-level residual field.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsru/aggregators.hpp"
#include "lsru/bsde.hpp"
#include "lsru/foc.hpp"
#include "lsru/market_tree.hpp"
#include "lsru/plans.hpp"

namespace lsru {

// lump w at the root, nothing afterwards; Y_t = (beta w + eta) e^{-beta t}
inline ConsumptionPlan all_at_zero(const EventTree& tree, double w) {
    if (!(w > 0.0)) throw std::invalid_argument("all_at_zero: w must be > 0");
    ConsumptionPlan plan = zero_plan(tree);
    plan.lumps[0][0] = w;
    return plan;
}

// ---------------------------------------------------------------------------
// consumption-rate formulas

// Rate on a free interval from the aggregator's partials at (t, y, u):
//   c = (1/beta)[(r - rho_f) eps_f + beta] y
//     + lambda (e^theta - 1) eps_f y / beta
//     + lambda psi_bar f_uy / (beta f_yy).
// The equivalent direct form
//   c = y - [f_u f_y + f_ty - (f + lambda psi_bar) f_uy + a f_y]/(beta f_yy)
// is exposed for cross-checking.
inline double generic_rate(const AggregatorSpec& spec, const MarketParams& market, double beta,
                           double t, double y, double u, double psi_bar) {
    const double fyy = spec.fyy(t, y, u);
    if (fyy == 0.0) throw std::invalid_argument("generic_rate: f_yy vanishes");
    const auto [eps_f, rho_f] = elasticity_and_discount(spec, t, y, u);
    const double lam = market.lambda, th = market.theta;
    return (1.0 / beta) * ((market.r - rho_f) * eps_f + beta) * y +
           lam * (std::exp(th) - 1.0) * eps_f * y / beta +
           lam * psi_bar * spec.fuy(t, y, u) / (beta * fyy);
}

inline double generic_rate_direct(const AggregatorSpec& spec, const MarketParams& market,
                                  double beta, double t, double y, double u, double psi_bar) {
    const double fyy = spec.fyy(t, y, u);
    if (fyy == 0.0) throw std::invalid_argument("generic_rate: f_yy vanishes");
    const double a = market.price_decay();
    const double lam = market.lambda;
    return y - (spec.fu(t, y, u) * spec.fy(t, y, u) + spec.fty(t, y, u) -
                (spec.f(t, y, u) + lam * psi_bar) * spec.fuy(t, y, u) + a * spec.fy(t, y, u)) /
                   (beta * fyy);
}

// Epstein-Zin rate in the ordinally transformed variables (V, Psi):
//   c = (1/beta)[(r - delta) alpha + beta] Y
//     + (lambda/beta)[alpha(e^theta - 1)
//                     - (1 - alpha rho)/(1 - rho)((1 + Psi/V)^{1-rho} - 1)] Y.
// The second printed form replaces the bracketed jump factor with
// (J(V, Psi) + Psi)/V; the two agree identically.
inline double ez_rate(const EZParams& ez, const MarketParams& market, double beta, double y,
                      double v, double psi) {
    ez.validate();
    if (!(v > 0.0)) throw std::invalid_argument("ez_rate: V must be > 0");
    if (!(v + psi > 0.0)) throw std::invalid_argument("ez_rate: V + Psi must be > 0");
    const double lam = market.lambda, th = market.theta;
    const double jumpfac = (std::pow(1.0 + psi / v, 1.0 - ez.rho) - 1.0) / (1.0 - ez.rho);
    return (1.0 / beta) * ((market.r - ez.delta) * ez.alpha + beta) * y +
           (lam / beta) * (ez.alpha * (std::exp(th) - 1.0) -
                           (1.0 - ez.alpha * ez.rho) * jumpfac) * y;
}

inline double ez_rate_via_J(const EZParams& ez, const MarketParams& market, double beta, double y,
                            double v, double psi) {
    ez.validate();
    if (!(v > 0.0)) throw std::invalid_argument("ez_rate: V must be > 0");
    if (!(v + psi > 0.0)) throw std::invalid_argument("ez_rate: V + Psi must be > 0");
    const double lam = market.lambda, th = market.theta;
    const double rho = ez.rho;
    const double J = (std::pow(v + psi, 1.0 - rho) * std::pow(v, rho) - v) / (1.0 - rho) - psi;
    return (1.0 / beta) * ((market.r - ez.delta) * ez.alpha + beta) * y +
           (lam / beta) * (ez.alpha * (std::exp(th) - 1.0) -
                           (1.0 - ez.alpha * ez.rho) * (J + psi) / v) * y;
}

// ---------------------------------------------------------------------------
// barrier policy

struct BarrierConfig {
    double tol_bind = -1.0;    // Y <= Y*(1 + tol_bind) counts as on-barrier; < 0 -> 0.05 (a+beta) delta
    double tol_stop = -1.0;    // gradient slack for tail truncation; < 0 -> 0.5 (a+beta) delta
    double eps_pin = 1e-4;     // root lump pins F_0 = bar_0 (1 + eps_pin)
    double plan_tol = 1e-8;    // sup-norm plan change declaring convergence
    int max_iter = 200;        // outer iteration cap
    double damping = 0.5;      // applied to rate updates once oscillation is detected
    SolverConfig solver;
    double terminal = 0.0;
};

struct BarrierResult {
    ConsumptionPlan plan;
    int iterations = 0;
    double last_change = 0.0;
};

namespace detail {

// solve f_y(t, y, u) = target for y; uses the spec's closed-form inverse when
// present, otherwise a guarded Newton iteration (f_y is decreasing in y)
inline double invert_fy(const AggregatorSpec& spec, double t, double u, double target,
                        double guess) {
    if (spec.fy_inverse) return spec.fy_inverse(t, u, target);
    double y = guess > 0.0 ? guess : 1.0;
    for (int it = 0; it < 100; ++it) {
        const double g = spec.fy(t, y, u) - target;
        if (std::abs(g) <= 1e-13 * std::abs(target)) return y;
        double step = g / spec.fyy(t, y, u);
        while (y - step <= 0.0) step *= 0.5;
        y -= step;
    }
    throw std::runtime_error("barrier_policy: could not invert f_y at t = " + std::to_string(t));
}

}  // namespace detail

// Constructs the barrier plan for multiplier M: an initial lump placing the
// shadow price F just above the barrier M(r+beta)/beta at the root, zero
// consumption while F sits below the barrier, and the formula rate wherever
// the satisfaction state touches the barrier level Y*.  Nodes whose whole
// remaining subtree stays strictly below the barrier are released from the
// support (their gradient stays under M psi by the stopped-martingale
// argument); the released set is grown from the leaves until stable.
inline BarrierResult barrier_policy(const EventTree& tree, const AggregatorSpec& spec,
                                    const SatisfactionKernel& kernel, double M,
                                    const BarrierConfig& cfg = {}) {
    kernel.validate();
    if (!(M > 0.0)) throw std::invalid_argument("barrier_policy: M must be > 0");
    if (kernel.theta)
        throw std::invalid_argument("barrier_policy: general kernels are not supported");

    const double beta = kernel.beta;
    const double dt = tree.delta();
    const double decay = std::exp(-beta * dt);
    const double a = tree.market.price_decay();
    const double tol_stop = cfg.tol_stop >= 0.0 ? cfg.tol_stop : 0.5 * (a + beta) * dt;
    // the fixed-point iteration tracks the barrier only up to the scheme's own
    // O(delta) drift, so the binding test needs slack on the same scale or the
    // support develops spurious one-step gaps wherever the drift is adverse
    const double tol_bind = cfg.tol_bind >= 0.0 ? cfg.tol_bind : 0.05 * (a + beta) * dt;

    // barrier on the shadow price F = D f_y
    Field bar = tree.make_field();
    for (int i = 0; i <= tree.n; ++i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j)
            bar[static_cast<size_t>(i)][j] =
                M * (tree.market.r + beta) / beta * tree.psi[static_cast<size_t>(i)][j];

    // previous iterate's fields feeding Y*, the rate formula, and truncation;
    // seeded from the zero plan so they start inside the aggregator's domain
    ConsumptionPlan plan = zero_plan(tree);
    Field U_prev, psi_bar_prev, D_prev;
    {
        const Field Y0 = satisfaction(tree, plan, kernel);
        const UtilitySolution s0 = solve_utility(tree, Y0, spec, cfg.solver, cfg.terminal);
        D_prev = discount_weight(tree, Y0, s0.U, spec);
        U_prev = s0.U;
        psi_bar_prev = s0.psi_bar;
    }
    std::vector<std::vector<char>> allowed(static_cast<size_t>(tree.n) + 1);
    for (int i = 0; i <= tree.n; ++i)
        allowed[static_cast<size_t>(i)].assign(tree.slice_size(i), 1);

    Field Y = tree.make_field();
    std::vector<std::vector<char>> supported(static_cast<size_t>(tree.n) + 1);
    double last_change = std::numeric_limits<double>::infinity();
    double prev_change = std::numeric_limits<double>::infinity();
    bool damp = false;

    for (int iter = 1; iter <= cfg.max_iter; ++iter) {
        // --- rebuild the plan from the previous iterate's fields
        ConsumptionPlan next = zero_plan(tree);
        for (auto& s : supported) { s.assign(s.size(), 0); }
        for (int i = 0; i <= tree.n; ++i) supported[static_cast<size_t>(i)].assign(tree.slice_size(i), 0);

        // root lump: put Y exactly at the pinned barrier level
        const double y0_target = detail::invert_fy(spec, 0.0, U_prev[0][0],
                                                   bar[0][0] * (1.0 + cfg.eps_pin), kernel.eta);
        next.lumps[0][0] = std::max(0.0, (y0_target - kernel.eta) / beta);
        Y[0][0] = kernel.eta + beta * next.lumps[0][0];

        for (int i = 0; i <= tree.n; ++i) {
            const double t = tree.t(i);
            for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
                const double y = Y[static_cast<size_t>(i)][j];
                double rate = 0.0;
                // zero-probability branches never consume: the plan is only
                // defined up to null events, and optimality says nothing there
                if (i < tree.n && allowed[static_cast<size_t>(i)][j] &&
                    tree.prob[static_cast<size_t>(i)][j] > 0.0) {
                    const double ystar = detail::invert_fy(
                        spec, t, U_prev[static_cast<size_t>(i)][j],
                        bar[static_cast<size_t>(i)][j] / D_prev[static_cast<size_t>(i)][j], y);
                    if (y <= ystar * (1.0 + tol_bind)) {
                        rate = generic_rate(spec, tree.market, beta, t, y,
                                            U_prev[static_cast<size_t>(i)][j],
                                            psi_bar_prev[static_cast<size_t>(i)][j]);
                        if (!(rate > 0.0)) rate = 0.0;
                        supported[static_cast<size_t>(i)][j] = rate > 0.0;
                    }
                }
                if (i < tree.n) {
                    if (damp)
                        rate = cfg.damping * rate +
                               (1.0 - cfg.damping) * plan.rates[static_cast<size_t>(i)][j];
                    next.rates[static_cast<size_t>(i)][j] = rate;
                    const double pre = y * decay + rate * (1.0 - decay);
                    Y[static_cast<size_t>(i) + 1][2 * j] = pre;
                    Y[static_cast<size_t>(i) + 1][2 * j + 1] = pre;
                }
            }
        }
        supported[0][0] |= next.lumps[0][0] > 0.0;

        // --- solve utility and gradient on the rebuilt plan
        const UtilitySolution sol = solve_utility(tree, Y, spec, cfg.solver, cfg.terminal);
        const Field D = discount_weight(tree, Y, sol.U, spec);
        const Field nv = gradient(tree, Y, sol.U, spec, kernel);

        // --- release supported tails whose gradient fell under the barrier:
        // only nodes with no supported strict descendant may be dropped, so
        // the support erodes from the leaves inward
        int dropped = 0;
        std::vector<std::vector<char>> has_desc(static_cast<size_t>(tree.n) + 1);
        for (int i = 0; i <= tree.n; ++i) has_desc[static_cast<size_t>(i)].assign(tree.slice_size(i), 0);
        for (int i = tree.n - 1; i >= 0; --i)
            for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
                const auto& sn = supported[static_cast<size_t>(i) + 1];
                const auto& hn = has_desc[static_cast<size_t>(i) + 1];
                has_desc[static_cast<size_t>(i)][j] =
                    sn[2 * j] || sn[2 * j + 1] || hn[2 * j] || hn[2 * j + 1];
            }
        for (int i = 0; i < tree.n; ++i)
            for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
                if (!supported[static_cast<size_t>(i)][j] || has_desc[static_cast<size_t>(i)][j])
                    continue;
                if (i == 0 && next.lumps[0][0] > 0.0) continue;
                if (nv[static_cast<size_t>(i)][j] <
                    M * tree.psi[static_cast<size_t>(i)][j] * (1.0 - tol_stop)) {
                    allowed[static_cast<size_t>(i)][j] = 0;
                    ++dropped;
                }
            }

        // --- convergence bookkeeping
        double change = std::abs(next.lumps[0][0] - plan.lumps[0][0]);
        for (int i = 0; i < tree.n; ++i)
            for (std::uint64_t j = 0; j < tree.slice_size(i); ++j)
                change = std::max(change, std::abs(next.rates[static_cast<size_t>(i)][j] -
                                                   plan.rates[static_cast<size_t>(i)][j]));
        plan = std::move(next);
        U_prev = sol.U;
        psi_bar_prev = sol.psi_bar;
        D_prev = D;

        if (dropped == 0 && change <= cfg.plan_tol)
            return {std::move(plan), iter, change};

        // oscillation: plan change refuses to shrink with a stable support
        if (dropped == 0 && change > 0.9 * std::min(prev_change, last_change)) {
            if (damp && change >= last_change && iter > 20)
                throw std::runtime_error(
                    "barrier_policy: oscillation detected, plan change " +
                    std::to_string(change) + " not contracting after " + std::to_string(iter) +
                    " iterations");
            damp = true;
        }
        prev_change = last_change;
        last_change = change;
    }
    throw std::runtime_error("barrier_policy: no fixed point within " +
                             std::to_string(cfg.max_iter) + " iterations (last change " +
                             std::to_string(last_change) + ")");
}

// ---------------------------------------------------------------------------
// calibration

struct CalibrationResult {
    double param = 0.0;   // calibrated M (or scale)
    double budget = 0.0;  // achieved budget
    int iterations = 0;
    double bracket_lo = 0.0;
    double bracket_hi = 0.0;
    ConsumptionPlan plan;
};

// Bisection on a one-parameter plan family whose budget is monotone in the
// parameter (decreasing for barrier M, increasing for scale families).
inline CalibrationResult calibrate(const EventTree& tree,
                                   const std::function<ConsumptionPlan(double)>& family,
                                   double param0, bool budget_decreasing, double w, double tol) {
    if (!(param0 > 0.0)) throw std::invalid_argument("calibrate: initial parameter must be > 0");
    if (!(tol > 0.0)) throw std::invalid_argument("calibrate: tol must be > 0");
    if (!(w >= 0.0)) throw std::invalid_argument("calibrate: target w must be >= 0");

    auto eval = [&](double m) { return budget(tree, family(m)); };
    // orient the search so that value(lo) <= w <= value(hi) in budget terms
    auto over = [&](double b) { return b >= w; };

    CalibrationResult out;
    double lo = param0, hi = param0;
    double b0 = eval(param0);
    int iters = 1;
    if (w == 0.0) {
        // push the parameter until the budget is negligible
        double m = param0, b = b0;
        for (int k = 0; k < 60 && b > 1e-300; ++k) {
            m = budget_decreasing ? m * 2.0 : m / 2.0;
            b = eval(m);
            ++iters;
        }
        out.param = m;
        out.budget = b;
        out.iterations = iters;
        out.bracket_lo = out.bracket_hi = m;
        out.plan = family(m);
        return out;
    }

    // bracket: over-budget side and under-budget side
    double b_lo = b0, b_hi = b0;
    for (int k = 0; k < 60 && !over(b_lo); ++k) {
        lo = budget_decreasing ? lo / 2.0 : lo * 2.0;
        b_lo = eval(lo);
        ++iters;
    }
    for (int k = 0; k < 60 && over(b_hi); ++k) {
        hi = budget_decreasing ? hi * 2.0 : hi / 2.0;
        b_hi = eval(hi);
        ++iters;
    }
    if (!over(b_lo) || over(b_hi))
        throw std::runtime_error("calibrate: no bracket after 60 doublings (budget range [" +
                                 std::to_string(b_hi) + ", " + std::to_string(b_lo) + "])");

    double mid = 0.5 * (lo + hi), b_mid = 0.0;
    for (int k = 0; k < 200; ++k) {
        mid = 0.5 * (lo + hi);
        b_mid = eval(mid);
        ++iters;
        if (std::abs(b_mid - w) <= tol * w) break;
        if (over(b_mid)) lo = mid; else hi = mid;
    }
    if (std::abs(b_mid - w) > tol * w)
        throw std::runtime_error("calibrate: bisection stalled at budget " + std::to_string(b_mid));

    out.param = mid;
    out.budget = b_mid;
    out.iterations = iters;
    out.bracket_lo = std::min(lo, hi);
    out.bracket_hi = std::max(lo, hi);
    out.plan = family(mid);
    return out;
}

// ---------------------------------------------------------------------------
// minimal-level residual

// Level process extracted from a plan: L = Y on consumption nodes, decayed
// elsewhere (on consumption nodes the satisfaction rides the level exactly).
inline Field level_from_plan(const EventTree& tree, const ConsumptionPlan& plan,
                             const SatisfactionKernel& kernel) {
    const Field Y = satisfaction(tree, plan, kernel);
    const double decay = std::exp(-kernel.beta * tree.delta());
    Field L = tree.make_field();
    auto consumes = [&](int i, std::uint64_t j) {
        return plan.lumps[static_cast<size_t>(i)][j] > 0.0 ||
               (i < tree.n && plan.rates[static_cast<size_t>(i)][j] > 0.0);
    };
    L[0][0] = consumes(0, 0) ? Y[0][0] : kernel.eta;
    for (int i = 1; i <= tree.n; ++i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j)
            L[static_cast<size_t>(i)][j] = consumes(i, j)
                                               ? Y[static_cast<size_t>(i)][j]
                                               : L[static_cast<size_t>(i) - 1][j >> 1] * decay;
    return L;
}

// Residual of the minimal-level characterization at every node tau:
//   E_tau[ sum_t D_t f_y(t, S_t, U^L_t) beta e^{-beta(t - tau)} delta ] - M psi_tau
// where S restarts the running sup at tau: S_tau = max(eta e^{-beta tau}, L_tau),
// S_child = max(S decay, L_child).  U^L and D come from the plan financing the
// minimal-level satisfaction of L.
inline Field minimal_level_residual(const EventTree& tree, const Field& L,
                                    const SatisfactionKernel& kernel, const AggregatorSpec& spec,
                                    double M, const SolverConfig& cfg = {}, double terminal = 0.0) {
    kernel.validate();
    if (!(M > 0.0)) throw std::invalid_argument("minimal_level_residual: M must be > 0");
    const double beta = kernel.beta;
    const double dt = tree.delta();
    const double decay = std::exp(-beta * dt);
    const double p = tree.p_jump;

    const Field YL = minimal_level_satisfaction(tree, L, kernel);
    const Field U = solve_utility(tree, YL, spec, cfg, terminal).U;
    const Field D = discount_weight(tree, YL, U, spec);

    Field resid = tree.make_field();
    std::vector<std::vector<double>> S, R;
    for (int i0 = 0; i0 <= tree.n; ++i0) {
        const int depth = tree.n - i0;
        S.assign(static_cast<size_t>(depth) + 1, {});
        R.assign(static_cast<size_t>(depth) + 1, {});
        for (int k = 0; k <= depth; ++k) {
            S[static_cast<size_t>(k)].resize(std::size_t(1) << k);
            R[static_cast<size_t>(k)].resize(std::size_t(1) << k);
        }
        for (std::uint64_t j0 = 0; j0 < tree.slice_size(i0); ++j0) {
            // forward: re-rooted running sup over the subtree
            S[0][0] = std::max(kernel.eta * std::exp(-beta * tree.t(i0)),
                               L[static_cast<size_t>(i0)][j0]);
            for (int k = 0; k < depth; ++k)
                for (std::uint64_t j = 0; j < (std::uint64_t(1) << k); ++j) {
                    const double pre = S[static_cast<size_t>(k)][j] * decay;
                    const std::uint64_t gj = (j0 << (k + 1));
                    S[static_cast<size_t>(k) + 1][2 * j] =
                        std::max(pre, L[static_cast<size_t>(i0 + k) + 1][gj | (2 * j)]);
                    S[static_cast<size_t>(k) + 1][2 * j + 1] =
                        std::max(pre, L[static_cast<size_t>(i0 + k) + 1][gj | (2 * j + 1)]);
                }
            // backward: conditional expectation of the weighted integrand
            for (auto& v : R[static_cast<size_t>(depth)]) v = 0.0;
            for (int k = depth - 1; k >= 0; --k) {
                const int gi = i0 + k;
                const double t = tree.t(gi);
                const double weight = beta * std::exp(-beta * (t - tree.t(i0))) * dt;
                for (std::uint64_t j = 0; j < (std::uint64_t(1) << k); ++j) {
                    const std::uint64_t gj = (j0 << k) | j;
                    const double own = D[static_cast<size_t>(gi)][gj] *
                                       spec.fy(t, S[static_cast<size_t>(k)][j],
                                               U[static_cast<size_t>(gi)][gj]) *
                                       weight;
                    R[static_cast<size_t>(k)][j] =
                        own + (1.0 - p) * R[static_cast<size_t>(k) + 1][2 * j] +
                        p * R[static_cast<size_t>(k) + 1][2 * j + 1];
                }
            }
            resid[static_cast<size_t>(i0)][j0] =
                R[0][0] - M * tree.psi[static_cast<size_t>(i0)][j0];
        }
    }
    return resid;
}

// ---------------------------------------------------------------------------
// policy selection

enum class PolicyVariant { all_at_zero, barrier, from_level };

struct PolicySpec {
    PolicyVariant variant = PolicyVariant::all_at_zero;
    double w = 0.0;  // all_at_zero
    double M = 0.0;  // barrier
    Field level;     // from_level

    void validate() const {
        switch (variant) {
            case PolicyVariant::all_at_zero:
                if (!(w > 0.0)) throw std::invalid_argument("policy: all_at_zero needs w > 0");
                break;
            case PolicyVariant::barrier:
                if (!(M > 0.0)) throw std::invalid_argument("policy: barrier needs M > 0");
                break;
            case PolicyVariant::from_level:
                if (level.empty()) throw std::invalid_argument("policy: from_level needs a level field");
                break;
        }
    }
};

inline ConsumptionPlan build_policy_plan(const EventTree& tree, const AggregatorSpec& spec,
                                         const SatisfactionKernel& kernel, const PolicySpec& pol,
                                         const BarrierConfig& cfg = {}) {
    pol.validate();
    switch (pol.variant) {
        case PolicyVariant::all_at_zero:
            return all_at_zero(tree, pol.w);
        case PolicyVariant::barrier:
            return barrier_policy(tree, spec, kernel, pol.M, cfg).plan;
        case PolicyVariant::from_level:
            return plan_from_level(tree, minimal_level_satisfaction(tree, pol.level, kernel),
                                   kernel);
    }
    throw std::logic_error("build_policy_plan: unknown variant");
}

}  // namespace lsru
