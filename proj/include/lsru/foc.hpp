#pragma once

// Utility gradient, shadow processes, and the first-order-condition audits:
// budget, gradient-vs-multiplier violation, flat-off residual, free-interval
// and lump structure, conditional (post-stopping) versions, and a randomized
// dynamic-programming falsification test.
//
// The gradient of U_0 with respect to a lump at node (i, j) is
//   nablaV(t_i) = e^{beta t_i} G_i,
//   G_i = E_i[G_{i+1}] + D_i f_y(t_i, Y_i, U_i) beta e^{-beta t_i} delta,
// with D the discount weight exp(integral of f_u along the path) and G = 0 at
// the leaves.  f_y is evaluated at the post-lump (cadlag) Y, matching the
// budget's pricing convention.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "lsru/aggregators.hpp"
#include "lsru/bsde.hpp"
#include "lsru/market_tree.hpp"
#include "lsru/plans.hpp"

namespace lsru {

// exp(integral of f_u), path-wise product of per-step factors; D_0 = 1
inline Field discount_weight(const EventTree& tree, const Field& Y, const Field& U,
                             const AggregatorSpec& spec) {
    Field D = tree.make_field();
    D[0][0] = 1.0;
    for (int i = 0; i < tree.n; ++i) {
        const double t = tree.t(i);
        const auto& di = D[static_cast<size_t>(i)];
        auto& dn = D[static_cast<size_t>(i) + 1];
        for (std::uint64_t j = 0; j < di.size(); ++j) {
            const double fac =
                di[j] * std::exp(spec.fu(t, Y[static_cast<size_t>(i)][j],
                                         U[static_cast<size_t>(i)][j]) * tree.delta());
            dn[2 * j] = fac;
            dn[2 * j + 1] = fac;
        }
    }
    return D;
}

// Gradient for a separable weighting kernel theta(s, t) = A(s) B(t); the
// exponential kernel is A(s) = beta e^{-beta s}, B(t) = e^{beta t}.
inline Field gradient_separable_theta(const EventTree& tree, const Field& Y, const Field& U,
                                      const Field& D, const AggregatorSpec& spec,
                                      const std::function<double(double)>& A,
                                      const std::function<double(double)>& B) {
    Field G = tree.make_field();
    // leaves: zero
    for (int i = tree.n - 1; i >= 0; --i) {
        const double t = tree.t(i);
        const double a_t = A(t);
        std::vector<double> expn;
        tree.cond_exp(G[static_cast<size_t>(i) + 1], expn);
        auto& gi = G[static_cast<size_t>(i)];
        for (std::uint64_t j = 0; j < expn.size(); ++j)
            gi[j] = expn[j] + D[static_cast<size_t>(i)][j] *
                                  spec.fy(t, Y[static_cast<size_t>(i)][j],
                                          U[static_cast<size_t>(i)][j]) *
                                  a_t * tree.delta();
    }
    for (int i = 0; i <= tree.n; ++i) {
        const double b_t = B(tree.t(i));
        for (auto& g : G[static_cast<size_t>(i)]) g *= b_t;
    }
    return G;
}

inline Field gradient(const EventTree& tree, const Field& Y, const Field& U,
                      const AggregatorSpec& spec, const SatisfactionKernel& kernel) {
    kernel.validate();
    if (kernel.theta)
        throw std::invalid_argument(
            "gradient: general kernels are not supported; use gradient_separable_theta");
    const Field D = discount_weight(tree, Y, U, spec);
    const double beta = kernel.beta;
    return gradient_separable_theta(
        tree, Y, U, D, spec, [beta](double s) { return beta * std::exp(-beta * s); },
        [beta](double t) { return std::exp(beta * t); });
}

// ---------------------------------------------------------------------------
// shadow processes

struct ShadowFields {
    Field F;        // D * f_y(t, Y, U)
    Field F_tilde;  // nablaV * e^{(r + lambda(e^theta - 1)) t}
    Field X;        // e^{(r + lambda(e^theta - 1)) t}
};

inline ShadowFields shadow_fields(const EventTree& tree, const Field& Y, const Field& U,
                                  const Field& D, const Field& nablaV,
                                  const AggregatorSpec& spec) {
    const double a = tree.market.price_decay();
    ShadowFields s;
    s.F = tree.make_field();
    s.F_tilde = tree.make_field();
    s.X = tree.make_field();
    for (int i = 0; i <= tree.n; ++i) {
        const double t = tree.t(i);
        const double x = std::exp(a * t);
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
            s.F[static_cast<size_t>(i)][j] =
                D[static_cast<size_t>(i)][j] *
                spec.fy(t, Y[static_cast<size_t>(i)][j], U[static_cast<size_t>(i)][j]);
            s.F_tilde[static_cast<size_t>(i)][j] = nablaV[static_cast<size_t>(i)][j] * x;
            s.X[static_cast<size_t>(i)][j] = x;
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// finite-difference gradient check

struct FDGradientRow {
    double eps = 0.0;
    double slope = 0.0;
};

struct FDGradientTable {
    std::vector<FDGradientRow> rows;
    double extrapolated = 0.0;  // Richardson from the two smallest eps
    double reference = 0.0;     // probability-weighted nablaV at the node
};

// Slope of U_0 along C + eps * (lump at one node); for an adapted perturbation
// the slope converges to prob(node) * nablaV(node).
inline FDGradientTable gradient_fd(const EventTree& tree, const ConsumptionPlan& plan,
                                   const SatisfactionKernel& kernel, const AggregatorSpec& spec,
                                   int step, std::uint64_t index,
                                   const std::vector<double>& eps_list,
                                   const SolverConfig& cfg = {}, double terminal = 0.0) {
    if (eps_list.size() < 2) throw std::invalid_argument("gradient_fd: need at least two epsilons");
    const Field Y0 = satisfaction(tree, plan, kernel);
    const double u_base = solve_utility(tree, Y0, spec, cfg, terminal).U[0][0];

    FDGradientTable tab;
    for (double eps : eps_list) {
        if (!(eps > 0.0)) throw std::invalid_argument("gradient_fd: eps must be positive");
        ConsumptionPlan bumped = plan;
        bumped.lumps[static_cast<size_t>(step)][index] += eps;
        const Field Y = satisfaction(tree, bumped, kernel);
        const double u = solve_utility(tree, Y, spec, cfg, terminal).U[0][0];
        if (!std::isfinite(u))
            throw std::runtime_error("gradient_fd: perturbed solve left the domain at eps = " +
                                     std::to_string(eps));
        tab.rows.push_back({eps, (u - u_base) / eps});
    }

    // Richardson extrapolation assuming halved steps at the tail of the list
    const auto& r = tab.rows;
    const double e1 = r[r.size() - 2].eps, e2 = r[r.size() - 1].eps;
    const double s1 = r[r.size() - 2].slope, s2 = r[r.size() - 1].slope;
    tab.extrapolated = (e1 * s2 - e2 * s1) / (e1 - e2);

    const Field Us = solve_utility(tree, Y0, spec, cfg, terminal).U;
    const Field g = gradient(tree, Y0, Us, spec, kernel);
    tab.reference = tree.prob[static_cast<size_t>(step)][index] *
                    g[static_cast<size_t>(step)][index];
    return tab;
}

// ---------------------------------------------------------------------------
// first-order-condition report

struct FOCTolerances {
    double tol_b = 1e-6;  // |budget - w| <= tol_b * w
    double tol_v = 1e-3;  // max (nablaV - M psi)/(M psi) <= tol_v
    double tol_f = 1e-4;  // E[ integral (M psi - nablaV) dC ] / (M w) <= tol_f
};

struct NodeRef {
    int step = 0;
    std::uint64_t index = 0;
    double t = 0.0;
    int N = 0;
    double value = 0.0;

    nlohmann::json to_json() const {
        return {{"node", std::to_string(step) + ":" + jump_pattern(step, index)},
                {"t", t},
                {"N", N},
                {"value", value}};
    }
};

struct FOCReport {
    double M = 0.0;
    double w = 0.0;
    double budget = 0.0;
    double budget_gap = 0.0;     // budget - w
    double max_violation = 0.0;  // max over nodes of (nablaV - M psi)/(M psi)
    double flatoff = 0.0;        // E[ integral (M psi - nablaV) dC ] / (M w)
    double free_interval_max = 0.0;
    std::vector<NodeRef> worst_violations;       // top offenders by nablaV/(M psi)
    std::vector<NodeRef> interior_nojump_lumps;  // lumps at t>0 with no jump arrival
    bool budget_ok = false;
    bool violation_ok = false;
    bool flatoff_ok = false;

    bool pass() const { return budget_ok && violation_ok && flatoff_ok; }

    nlohmann::json to_json() const {
        nlohmann::json viol = nlohmann::json::array();
        for (const auto& v : worst_violations) viol.push_back(v.to_json());
        nlohmann::json lumps = nlohmann::json::array();
        for (const auto& v : interior_nojump_lumps) lumps.push_back(v.to_json());
        return {{"M", M},
                {"w", w},
                {"budget", budget},
                {"budget_gap", budget_gap},
                {"max_violation", max_violation},
                {"flatoff", flatoff},
                {"free_interval_max", free_interval_max},
                {"worst_violations", viol},
                {"interior_nojump_lumps", lumps},
                {"checks",
                 {{"budget_ok", budget_ok}, {"violation_ok", violation_ok}, {"flatoff_ok", flatoff_ok}}},
                {"pass", pass()}};
    }
};

// Residual of F = M (r+beta)/beta psi on nodes carrying a rate and no lump.
struct FreeIntervalResiduals {
    Field residual;     // F / (M (r+beta) beta^{-1} psi) - 1 where defined, else 0
    double max_abs = 0.0;
    std::size_t n_nodes = 0;
};

inline FreeIntervalResiduals free_interval_residual(const EventTree& tree,
                                                    const ConsumptionPlan& plan, double M,
                                                    const Field& F, double beta) {
    if (!(M > 0.0)) throw std::invalid_argument("free_interval_residual: M must be > 0");
    const double r = tree.market.r;
    FreeIntervalResiduals out;
    out.residual = tree.make_field(0.0, tree.n);
    for (int i = 0; i < tree.n; ++i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
            if (!(plan.rates[static_cast<size_t>(i)][j] > 0.0) ||
                plan.lumps[static_cast<size_t>(i)][j] > 0.0)
                continue;
            const double bar = M * (r + beta) / beta * tree.psi[static_cast<size_t>(i)][j];
            const double res = F[static_cast<size_t>(i)][j] / bar - 1.0;
            out.residual[static_cast<size_t>(i)][j] = res;
            out.max_abs = std::max(out.max_abs, std::abs(res));
            ++out.n_nodes;
        }
    return out;
}

// Lump-structure audit: every lump node needs F >= M (r+beta)/beta psi up to
// 1e-6 relative, and interior lumps may only sit where a jump just arrived
// (odd child index); the root is exempt from the second rule.
struct StructuralAudit {
    std::vector<NodeRef> lump_shortfalls;        // value = relative shortfall of F below the bar
    std::vector<NodeRef> interior_nojump_lumps;  // value = lump size
    bool pass() const { return lump_shortfalls.empty() && interior_nojump_lumps.empty(); }
};

inline StructuralAudit structural_audit(const EventTree& tree, const ConsumptionPlan& plan,
                                        double M, const Field& F, double beta) {
    if (!(M > 0.0)) throw std::invalid_argument("structural_audit: M must be > 0");
    const double r = tree.market.r;
    StructuralAudit audit;
    for (int i = 0; i <= tree.n; ++i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
            const double lump = plan.lumps[static_cast<size_t>(i)][j];
            if (!(lump > 0.0)) continue;
            const double bar = M * (r + beta) / beta * tree.psi[static_cast<size_t>(i)][j];
            const double rel = (F[static_cast<size_t>(i)][j] - bar) / bar;
            if (rel < -1e-6)
                audit.lump_shortfalls.push_back(
                    {i, j, tree.t(i), jump_count(j), rel});
            if (i > 0 && (j & 1u) == 0u)
                audit.interior_nojump_lumps.push_back({i, j, tree.t(i), jump_count(j), lump});
        }
    return audit;
}

inline FOCReport check_foc(const EventTree& tree, const ConsumptionPlan& plan,
                           const SatisfactionKernel& kernel, const AggregatorSpec& spec, double M,
                           double w, const FOCTolerances& tol = {}, const SolverConfig& cfg = {},
                           double terminal = 0.0) {
    if (!(M > 0.0)) throw std::invalid_argument("check_foc: M must be > 0");
    if (!(w >= 0.0)) throw std::invalid_argument("check_foc: w must be >= 0");

    const Field Y = satisfaction(tree, plan, kernel);
    const UtilitySolution sol = solve_utility(tree, Y, spec, cfg, terminal);
    const Field D = discount_weight(tree, Y, sol.U, spec);
    const Field nv = gradient(tree, Y, sol.U, spec, kernel);

    FOCReport rep;
    rep.M = M;
    rep.w = w;
    rep.budget = budget(tree, plan);
    rep.budget_gap = rep.budget - w;

    // condition (ii): nablaV <= M psi almost surely; keep the worst offenders.
    // Zero-probability nodes (possible when lambda = 0) are outside the a.s.
    // statement and are skipped.
    rep.max_violation = -std::numeric_limits<double>::infinity();
    std::vector<NodeRef> offenders;
    for (int i = 0; i <= tree.n; ++i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
            if (!(tree.prob[static_cast<size_t>(i)][j] > 0.0)) continue;
            const double ratio = nv[static_cast<size_t>(i)][j] /
                                 (M * tree.psi[static_cast<size_t>(i)][j]);
            const double viol = ratio - 1.0;
            if (viol > rep.max_violation) rep.max_violation = viol;
            if (viol > tol.tol_v)
                offenders.push_back({i, j, tree.t(i), jump_count(j), ratio});
        }
    std::sort(offenders.begin(), offenders.end(),
              [](const NodeRef& a, const NodeRef& b) { return a.value > b.value; });
    if (offenders.size() > 5) offenders.resize(5);
    rep.worst_violations = std::move(offenders);

    // condition (iii): flat-off residual E[ integral (M psi - nablaV) dC ] / (M w)
    const double dt = tree.delta();
    double flat = 0.0;
    for (int i = 0; i <= tree.n; ++i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
            double dc = plan.lumps[static_cast<size_t>(i)][j];
            if (i < tree.n) dc += plan.rates[static_cast<size_t>(i)][j] * dt;
            if (dc == 0.0) continue;
            flat += tree.prob[static_cast<size_t>(i)][j] *
                    (M * tree.psi[static_cast<size_t>(i)][j] - nv[static_cast<size_t>(i)][j]) * dc;
        }
    rep.flatoff = w > 0.0 ? flat / (M * w) : 0.0;

    const ShadowFields sh = shadow_fields(tree, Y, sol.U, D, nv, spec);
    rep.free_interval_max = free_interval_residual(tree, plan, M, sh.F, kernel.beta).max_abs;
    const StructuralAudit audit = structural_audit(tree, plan, M, sh.F, kernel.beta);
    rep.interior_nojump_lumps = audit.interior_nojump_lumps;

    rep.budget_ok = std::abs(rep.budget_gap) <= tol.tol_b * std::max(w, 1e-12);
    rep.violation_ok = rep.max_violation <= tol.tol_v;
    rep.flatoff_ok = std::abs(rep.flatoff) <= tol.tol_f;
    return rep;
}

// M = max of nablaV / psi over the plan's support (the unique multiplier
// compatible with the gradient bound plus complementary slackness).
struct MultiplierResult {
    double M = 0.0;
    double support_spread = 0.0;  // max relative deviation of nablaV/psi on the support
    std::size_t support_size = 0;
};

inline MultiplierResult solve_multiplier(const EventTree& tree, const ConsumptionPlan& plan,
                                         const SatisfactionKernel& kernel,
                                         const AggregatorSpec& spec, const SolverConfig& cfg = {},
                                         double terminal = 0.0) {
    const Field Y = satisfaction(tree, plan, kernel);
    const Field U = solve_utility(tree, Y, spec, cfg, terminal).U;
    const Field nv = gradient(tree, Y, U, spec, kernel);

    MultiplierResult out;
    double lo = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= tree.n; ++i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
            const bool support = plan.lumps[static_cast<size_t>(i)][j] > 0.0 ||
                                 (i < tree.n && plan.rates[static_cast<size_t>(i)][j] > 0.0);
            if (!support) continue;
            const double ratio = nv[static_cast<size_t>(i)][j] /
                                 tree.psi[static_cast<size_t>(i)][j];
            out.M = std::max(out.M, ratio);
            lo = std::min(lo, ratio);
            ++out.support_size;
        }
    if (out.support_size == 0)
        throw std::invalid_argument("solve_multiplier: plan has empty support");
    out.support_spread = (out.M - lo) / out.M;
    return out;
}

// ---------------------------------------------------------------------------
// conditional diagnostics

using NodePredicate = std::function<bool(int step, std::uint64_t index)>;

struct ConditionalResidual {
    std::vector<NodeRef> residuals;  // value = E_tau[ integral (nablaV - M psi) dC ]
    double max_abs = 0.0;
};

// E_tau[ integral over [tau, T] of (nablaV - M psi) dC ] at each stopping
// node, via one backward sweep of the per-node contributions.
inline ConditionalResidual conditional_flatoff(const EventTree& tree, const ConsumptionPlan& plan,
                                               const SatisfactionKernel& kernel,
                                               const AggregatorSpec& spec, double M,
                                               const NodePredicate& stop,
                                               const SolverConfig& cfg = {},
                                               double terminal = 0.0) {
    if (!(M > 0.0)) throw std::invalid_argument("conditional_flatoff: M must be > 0");
    const Field Y = satisfaction(tree, plan, kernel);
    const Field U = solve_utility(tree, Y, spec, cfg, terminal).U;
    const Field nv = gradient(tree, Y, U, spec, kernel);

    const double dt = tree.delta();
    const double p = tree.p_jump;
    // S_i = own contribution + E_i[S_{i+1}]; contribution uses the tail
    // integrand (nablaV - M psi) dC at the node itself
    Field S = tree.make_field();
    for (int i = tree.n; i >= 0; --i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
            double dc = plan.lumps[static_cast<size_t>(i)][j];
            if (i < tree.n) dc += plan.rates[static_cast<size_t>(i)][j] * dt;
            double s = (nv[static_cast<size_t>(i)][j] -
                        M * tree.psi[static_cast<size_t>(i)][j]) * dc;
            if (i < tree.n)
                s += (1.0 - p) * S[static_cast<size_t>(i) + 1][2 * j] +
                     p * S[static_cast<size_t>(i) + 1][2 * j + 1];
            S[static_cast<size_t>(i)][j] = s;
        }

    ConditionalResidual out;
    for (int i = 0; i <= tree.n; ++i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
            if (!stop(i, j)) continue;
            const double res = S[static_cast<size_t>(i)][j];
            out.residuals.push_back({i, j, tree.t(i), jump_count(j), res});
            out.max_abs = std::max(out.max_abs, std::abs(res));
        }
    return out;
}

// Randomized dynamic-programming check: at each stopping node, sample tail
// plans matching the conditional budget of the given plan and verify none
// improves the conditional utility.  Returns the worst (most negative) value
// of U_tau(plan) - U_tau(continuation).
struct DPPResult {
    double worst_gap = std::numeric_limits<double>::infinity();
    std::size_t n_checked = 0;       // stopping nodes with a positive conditional budget
    std::size_t n_degenerate = 0;    // stopping nodes whose only feasible tail is zero
};

inline DPPResult dpp_check(const EventTree& tree, const ConsumptionPlan& plan,
                           const SatisfactionKernel& kernel, const AggregatorSpec& spec,
                           const NodePredicate& stop, int k_samples, std::uint64_t seed,
                           const SolverConfig& cfg = {}, double terminal = 0.0) {
    if (k_samples <= 0) throw std::invalid_argument("dpp_check: k_samples must be positive");
    const Field Y = satisfaction(tree, plan, kernel);
    const Field Ustar = solve_utility(tree, Y, spec, cfg, terminal).U;
    const double dt = tree.delta();
    const double decay = std::exp(-kernel.beta * dt);
    const double p = tree.p_jump;

    DPPResult out;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    for (int i0 = 0; i0 <= tree.n; ++i0)
        for (std::uint64_t j0 = 0; j0 < tree.slice_size(i0); ++j0) {
            if (!stop(i0, j0)) continue;
            const int depth = tree.n - i0;

            // conditional budget of the plan's own tail (consumption at and
            // after the stopping node), in time-0 prices per unit probability
            double b_star = 0.0;
            for (int k = 0; k <= depth; ++k)
                for (std::uint64_t j = 0; j < (std::uint64_t(1) << k); ++j) {
                    const int gi = i0 + k;
                    const std::uint64_t gj = (j0 << k) | j;
                    double dc = plan.lumps[static_cast<size_t>(gi)][gj];
                    if (gi < tree.n) dc += plan.rates[static_cast<size_t>(gi)][gj] * dt;
                    b_star += tree.prob[static_cast<size_t>(gi)][gj] /
                              tree.prob[static_cast<size_t>(i0)][j0] *
                              tree.psi[static_cast<size_t>(gi)][gj] * dc;
                }
            if (b_star <= 0.0) {
                ++out.n_degenerate;  // only the zero tail is feasible
                continue;
            }
            ++out.n_checked;

            // pre-lump satisfaction entering the stopping node
            double y_pre;
            if (i0 == 0) {
                y_pre = kernel.eta;
            } else {
                const std::uint64_t jp = j0 >> 1;
                y_pre = Y[static_cast<size_t>(i0) - 1][jp] * decay +
                        plan.rates[static_cast<size_t>(i0) - 1][jp] * (1.0 - decay);
            }

            // per-subtree-node scratch: lumps/rates, Y, U for the continuation
            std::vector<std::vector<double>> lump(static_cast<size_t>(depth) + 1),
                rate(static_cast<size_t>(depth) + 1), Ysub(static_cast<size_t>(depth) + 1),
                Usub(static_cast<size_t>(depth) + 1);
            for (int k = 0; k <= depth; ++k) {
                const std::size_t m = std::size_t(1) << k;
                lump[static_cast<size_t>(k)].resize(m);
                rate[static_cast<size_t>(k)].resize(m);
                Ysub[static_cast<size_t>(k)].resize(m);
                Usub[static_cast<size_t>(k)].resize(m);
            }

            for (int s = 0; s < k_samples; ++s) {
                // random tail, then rescale to match the conditional budget
                double b = 0.0;
                for (int k = 0; k <= depth; ++k)
                    for (std::uint64_t j = 0; j < (std::uint64_t(1) << k); ++j) {
                        lump[static_cast<size_t>(k)][j] = unif(rng);
                        rate[static_cast<size_t>(k)][j] = k < depth ? unif(rng) : 0.0;
                        const int gi = i0 + k;
                        const std::uint64_t gj = (j0 << k) | j;
                        const double price = tree.prob[static_cast<size_t>(gi)][gj] /
                                             tree.prob[static_cast<size_t>(i0)][j0] *
                                             tree.psi[static_cast<size_t>(gi)][gj];
                        b += price * (lump[static_cast<size_t>(k)][j] +
                                      rate[static_cast<size_t>(k)][j] * dt);
                    }
                const double scale = b_star / b;
                for (int k = 0; k <= depth; ++k)
                    for (auto& v : lump[static_cast<size_t>(k)]) v *= scale;
                for (int k = 0; k < depth; ++k)
                    for (auto& v : rate[static_cast<size_t>(k)]) v *= scale;

                // forward satisfaction on the subtree from the pre-lump state
                Ysub[0][0] = y_pre + kernel.beta * lump[0][0];
                for (int k = 0; k < depth; ++k)
                    for (std::uint64_t j = 0; j < (std::uint64_t(1) << k); ++j) {
                        const double pre = Ysub[static_cast<size_t>(k)][j] * decay +
                                           rate[static_cast<size_t>(k)][j] * (1.0 - decay);
                        Ysub[static_cast<size_t>(k) + 1][2 * j] =
                            pre + kernel.beta * lump[static_cast<size_t>(k) + 1][2 * j];
                        Ysub[static_cast<size_t>(k) + 1][2 * j + 1] =
                            pre + kernel.beta * lump[static_cast<size_t>(k) + 1][2 * j + 1];
                    }

                // backward utility on the subtree
                for (auto& u : Usub[static_cast<size_t>(depth)]) u = terminal;
                for (int k = depth - 1; k >= 0; --k) {
                    const double t = tree.t(i0 + k);
                    for (std::uint64_t j = 0; j < (std::uint64_t(1) << k); ++j) {
                        const double e = (1.0 - p) * Usub[static_cast<size_t>(k) + 1][2 * j] +
                                         p * Usub[static_cast<size_t>(k) + 1][2 * j + 1];
                        Usub[static_cast<size_t>(k)][j] = detail::newton_step_value(
                            spec, t, Ysub[static_cast<size_t>(k)][j], e, dt, cfg, i0 + k,
                            (j0 << k) | j);
                    }
                }

                out.worst_gap = std::min(out.worst_gap,
                                         Ustar[static_cast<size_t>(i0)][j0] - Usub[0][0]);
            }
        }
    if (out.n_checked == 0 && out.n_degenerate == 0)
        throw std::invalid_argument("dpp_check: stopping predicate selects no nodes");
    if (out.n_checked == 0) out.worst_gap = 0.0;
    return out;
}

}  // namespace lsru
