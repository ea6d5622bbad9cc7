#pragma once

// Backward solvers for the recursive-utility BSDE on the event tree:
//
//   U_i = E_i[U_{i+1}] + f(t_i, Y_i, U_i) * delta
//
// (implicit: Newton per node; explicit: f evaluated at E_i[U_{i+1}]), plus a
// high-order deterministic ODE oracle and the Kreps-Porteus (g, J) backend
// for Epstein-Zin utility.  The jump integrand is recovered exactly as
// psi_bar = U(jump child) - U(no-jump child); there is no Brownian part on a
// pure-jump tree, so no Z field exists anywhere in the interface.

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsru/aggregators.hpp"
#include "lsru/market_tree.hpp"

namespace lsru {

enum class Scheme { implicit, explicit_euler };

struct SolverConfig {
    Scheme scheme = Scheme::implicit;
    double tol = 1e-12;   // absolute fixed-point tolerance
    int max_iter = 100;   // per-node Newton cap
};

struct UtilitySolution {
    Field U;        // levels 0..n
    Field psi_bar;  // levels 0..n-1, psi_bar = U(jump) - U(no jump)
};

namespace detail {

[[noreturn]] inline void node_error(const std::string& what, int i, std::uint64_t j,
                                    const std::string& msg) {
    throw std::runtime_error(what + " at step " + std::to_string(i) + " pattern '" +
                             jump_pattern(i, j) + "': " + msg);
}

inline double newton_step_value(const AggregatorSpec& spec, double t, double y, double target,
                                double dt, const SolverConfig& cfg, int i, std::uint64_t j) {
    // solve u = target + f(t, y, u) dt
    double u = target;
    for (int it = 0; it < cfg.max_iter; ++it) {
        const double resid = u - target - spec.f(t, y, u) * dt;
        if (std::abs(resid) <= cfg.tol) return u;
        const double denom = 1.0 - spec.fu(t, y, u) * dt;
        if (!(denom > 1e-12))
            node_error("solve_utility: implicit step lost contraction (K*delta too large)", i, j,
                       "denominator " + std::to_string(denom));
        u -= resid / denom;
    }
    node_error("solve_utility: fixed point did not converge", i, j,
               "after " + std::to_string(cfg.max_iter) + " iterations");
}

}  // namespace detail

// Backward induction for U given the satisfaction field.  `terminal` sets the
// leaf value (0 by default); Epstein-Zin runs need a positive terminal level
// to stay inside the aggregator's domain.
inline UtilitySolution solve_utility(const EventTree& tree, const Field& Y,
                                     const AggregatorSpec& spec, const SolverConfig& cfg = {},
                                     double terminal = 0.0) {
    const double dt = tree.delta();
    UtilitySolution sol;
    sol.U = tree.make_field();
    sol.psi_bar = tree.make_field(0.0, tree.n);
    sol.U[static_cast<size_t>(tree.n)].assign(tree.slice_size(tree.n), terminal);

    std::vector<double> expn;
    for (int i = tree.n - 1; i >= 0; --i) {
        tree.cond_exp(sol.U[static_cast<size_t>(i) + 1], expn);
        const double t = tree.t(i);
        auto& ui = sol.U[static_cast<size_t>(i)];
        auto& pb = sol.psi_bar[static_cast<size_t>(i)];
        const auto& un = sol.U[static_cast<size_t>(i) + 1];
        for (std::uint64_t j = 0; j < expn.size(); ++j) {
            const double y = Y[static_cast<size_t>(i)][j];
            try {
                if (cfg.scheme == Scheme::implicit)
                    ui[j] = detail::newton_step_value(spec, t, y, expn[j], dt, cfg, i, j);
                else
                    ui[j] = expn[j] + spec.f(t, y, expn[j]) * dt;
            } catch (const std::domain_error& err) {
                detail::node_error("solve_utility: aggregator domain error", i, j, err.what());
            }
            pb[j] = un[2 * j + 1] - un[2 * j];
        }
    }
    return sol;
}

// ---------------------------------------------------------------------------
// deterministic oracle

// Classic RK4 for dU/dt = -f(t, y(t), U), integrated backward from
// U(times.back()) = terminal; returns U at each requested time.
inline std::vector<double> solve_deterministic(const AggregatorSpec& spec,
                                               const std::vector<double>& times,
                                               const std::function<double(double)>& y_of_t,
                                               double terminal = 0.0) {
    if (times.size() < 2) throw std::invalid_argument("solve_deterministic: need at least two times");
    const std::size_t m = times.size();
    std::vector<double> U(m);
    U[m - 1] = terminal;
    for (std::size_t k = m - 1; k > 0; --k) {
        const double t1 = times[k], t0 = times[k - 1];
        const double h = t1 - t0;
        if (!(h > 0.0)) throw std::invalid_argument("solve_deterministic: times must increase");
        // backward step: u(t0) = u(t1) + integral of f over [t0, t1]
        const double u1 = U[k];
        const double k1 = spec.f(t1, y_of_t(t1), u1);
        const double k2 = spec.f(t1 - 0.5 * h, y_of_t(t1 - 0.5 * h), u1 + 0.5 * h * k1);
        const double k3 = spec.f(t1 - 0.5 * h, y_of_t(t1 - 0.5 * h), u1 + 0.5 * h * k2);
        const double k4 = spec.f(t0, y_of_t(t0), u1 + h * k3);
        U[k - 1] = u1 + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (!std::isfinite(U[k - 1]))
            throw std::runtime_error("solve_deterministic: step rejected, solution left the domain at t = " +
                                     std::to_string(t0));
    }
    return U;
}

// ---------------------------------------------------------------------------
// Kreps-Porteus backend for Epstein-Zin

struct KPSolution {
    Field V;        // ordinally transformed utility, V > 0
    Field Psi;      // jump integrand of V, levels 0..n-1
    Field U;        // Phi(V) = V^{1-rho}/(1-rho)
    Field psi_bar;  // transformed jump integrand of U
};

// Backward recursion V_i = E_i[V_{i+1}] + (g(Y_i, V_i) + lambda J(V_i, Psi_i)) delta
// with g(y,v) = delta/(1-1/alpha)(y^{1-1/alpha} v^{1/alpha} - v) and
// J(v,psi) = ((v+psi)^{1-rho} v^rho - v)/(1-rho) - psi.
inline KPSolution kp_solve_ez(const EventTree& tree, const Field& Y, const EZParams& ez,
                              const SolverConfig& cfg = {}, double terminal_v = 0.0) {
    ez.validate();
    if (!(ez.rho < 1.0 && ez.alpha < 1.0))
        throw std::invalid_argument("kp_solve_ez: backend requires rho < 1 and alpha < 1");
    if (terminal_v < 0.0) throw std::invalid_argument("kp_solve_ez: terminal V must be >= 0");

    const double d = ez.delta, al = ez.alpha, rho = ez.rho;
    const double kg = d / (1.0 - 1.0 / al);
    const double lam = tree.market.lambda;
    const double dt = tree.delta();

    auto g = [=](double y, double v) {
        return kg * (std::pow(y, 1.0 - 1.0 / al) * std::pow(v, 1.0 / al) - v);
    };
    auto gv = [=](double y, double v) {
        return kg * ((1.0 / al) * std::pow(y, 1.0 - 1.0 / al) * std::pow(v, 1.0 / al - 1.0) - 1.0);
    };
    auto J = [=](double v, double psi) {
        return (std::pow(v + psi, 1.0 - rho) * std::pow(v, rho) - v) / (1.0 - rho) - psi;
    };
    auto Jv = [=](double v, double psi) {
        const double w = v + psi;
        return ((1.0 - rho) * std::pow(w, -rho) * std::pow(v, rho) +
                rho * std::pow(w, 1.0 - rho) * std::pow(v, rho - 1.0) - 1.0) /
               (1.0 - rho);
    };
    auto phi = [=](double v) { return std::pow(v, 1.0 - rho) / (1.0 - rho); };

    KPSolution sol;
    sol.V = tree.make_field();
    sol.Psi = tree.make_field(0.0, tree.n);
    sol.U = tree.make_field();
    sol.psi_bar = tree.make_field(0.0, tree.n);
    sol.V[static_cast<size_t>(tree.n)].assign(tree.slice_size(tree.n), terminal_v);
    for (auto& u : sol.U[static_cast<size_t>(tree.n)]) u = phi(terminal_v);

    std::vector<double> expn;
    for (int i = tree.n - 1; i >= 0; --i) {
        tree.cond_exp(sol.V[static_cast<size_t>(i) + 1], expn);
        auto& vi = sol.V[static_cast<size_t>(i)];
        auto& psi_i = sol.Psi[static_cast<size_t>(i)];
        auto& pb = sol.psi_bar[static_cast<size_t>(i)];
        const auto& vn = sol.V[static_cast<size_t>(i) + 1];
        for (std::uint64_t j = 0; j < expn.size(); ++j) {
            const double y = Y[static_cast<size_t>(i)][j];
            const double psi = vn[2 * j + 1] - vn[2 * j];
            psi_i[j] = psi;

            double v = std::max(expn[j], 1e-300);
            bool done = false;
            for (int it = 0; it < cfg.max_iter; ++it) {
                if (v + psi <= 0.0 || v <= 0.0)
                    detail::node_error("kp_solve_ez: V + Psi left the positive domain", i, j,
                                       "V = " + std::to_string(v));
                const double resid = v - expn[j] - (g(y, v) + lam * J(v, psi)) * dt;
                if (std::abs(resid) <= cfg.tol) { done = true; break; }
                const double denom = 1.0 - (gv(y, v) + lam * Jv(v, psi)) * dt;
                double step = resid / denom;
                // keep the iterate strictly inside the domain
                while (v - step <= 0.0 || v - step + psi <= 0.0) step *= 0.5;
                v -= step;
            }
            if (!done)
                detail::node_error("kp_solve_ez: fixed point did not converge", i, j,
                                   "after " + std::to_string(cfg.max_iter) + " iterations");
            vi[j] = v;
            sol.U[static_cast<size_t>(i)][j] = phi(v);
            pb[j] = (std::pow(v + psi, 1.0 - rho) - std::pow(v, 1.0 - rho)) / (1.0 - rho);
        }
    }
    return sol;
}

// ---------------------------------------------------------------------------
// refinement study

struct RefineTable {
    std::vector<int> ns;
    std::vector<double> u0;      // U_0 per grid
    std::vector<double> diffs;   // successive |U_0(n_{k+1}) - U_0(n_k)|, or |U_0 - ref|
    std::vector<double> orders;  // empirical order between consecutive rows
    double min_order = 0.0;
};

// Runs u0_of_n over the grid list and estimates the empirical convergence
// order; throws when it falls below `require_order` (pass 0 to only tabulate).
// With a reference value the error column is |U_0(n) - ref|, otherwise
// successive differences are used.
inline RefineTable refine_study(const std::function<double(int)>& u0_of_n,
                                const std::vector<int>& ns, double require_order = 0.9,
                                const double* reference = nullptr) {
    if (ns.size() < 2) throw std::invalid_argument("refine_study: need at least two grid sizes");
    for (std::size_t k = 1; k < ns.size(); ++k)
        if (ns[k] <= ns[k - 1]) throw std::invalid_argument("refine_study: n_list must increase");

    RefineTable tab;
    tab.ns = ns;
    for (int n : ns) tab.u0.push_back(u0_of_n(n));

    if (reference) {
        for (double v : tab.u0) tab.diffs.push_back(std::abs(v - *reference));
    } else {
        for (std::size_t k = 0; k + 1 < tab.u0.size(); ++k)
            tab.diffs.push_back(std::abs(tab.u0[k + 1] - tab.u0[k]));
    }
    for (std::size_t k = 0; k + 1 < tab.diffs.size(); ++k) {
        if (tab.diffs[k + 1] == 0.0) {
            tab.orders.push_back(std::numeric_limits<double>::infinity());
            continue;
        }
        const double nr = reference ? double(ns[k + 1]) / ns[k]
                                    : double(ns[k + 2]) / ns[k + 1];
        tab.orders.push_back(std::log(tab.diffs[k] / tab.diffs[k + 1]) / std::log(nr));
    }
    tab.min_order = std::numeric_limits<double>::infinity();
    for (double o : tab.orders) tab.min_order = std::min(tab.min_order, o);
    if (tab.orders.empty()) tab.min_order = 0.0;

    if (require_order > 0.0 && tab.min_order < require_order)
        throw std::runtime_error("refine_study: empirical order " + std::to_string(tab.min_order) +
                                 " below required " + std::to_string(require_order));
    return tab;
}

}  // namespace lsru
