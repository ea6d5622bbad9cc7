#pragma once

// Aggregator (felicity) functions f(t, y, u) and their partial derivatives,
// plus the regime operator Lf, elasticity/endogenous-discount diagnostics,
// and a numerical audit of the standing concavity/growth assumptions.
//
// An AggregatorSpec bundles the six evaluators every solver needs: f itself,
// f_y, f_u, f_yy, f_ty, f_uy.  All evaluators are pure; specs are immutable
// after construction and safe to share.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace lsru {

using AggregatorFn = std::function<double(double, double, double)>;  // (t, y, u)

struct AggregatorSpec {
    std::string name;
    AggregatorFn f, fy, fu, fyy, fty, fuy;
    // optional closed-form solve of f_y(t, y, u) = target for y (barrier code
    // falls back to Newton when absent)
    std::function<double(double, double, double)> fy_inverse;  // (t, u, target)
    std::vector<std::string> warnings;  // non-fatal issues found at construction
};

struct TimeAdditiveParams {
    double delta = 0.0;
    double rho = 0.0;

    void validate() const {
        if (!(delta > 0.0)) throw std::invalid_argument("time_additive: delta must be > 0");
        if (!(rho > 0.0 && rho < 1.0)) throw std::invalid_argument("time_additive: rho must lie in (0,1)");
    }
    // growth-rate threshold mu = lambda(e^theta - 1) + r + beta*rho - delta
    double mu(double r, double lambda, double theta, double beta) const {
        return lambda * (std::exp(theta) - 1.0) + r + beta * rho - delta;
    }
};

struct EZParams {
    double delta = 0.0;
    double alpha = 0.0;  // intertemporal elasticity of substitution
    double rho = 0.0;    // relative risk aversion

    void validate() const {
        if (!(delta > 0.0)) throw std::invalid_argument("epstein_zin: delta must be > 0");
        if (!(alpha > 0.0) || alpha == 1.0)
            throw std::invalid_argument("epstein_zin: alpha must be positive and != 1");
        if (!(rho > 0.0) || rho == 1.0)
            throw std::invalid_argument("epstein_zin: rho must be positive and != 1");
    }
    double sigma() const { return (1.0 - rho) / (1.0 - 1.0 / alpha); }
};

// f(y, u) = delta/(1-rho) y^{1-rho} - delta u
inline AggregatorSpec make_time_additive(const TimeAdditiveParams& p) {
    p.validate();
    const double d = p.delta, rho = p.rho;
    auto need_y = [](double y) {
        if (!(y > 0.0)) throw std::domain_error("aggregator 'time_additive': y must be positive");
    };
    AggregatorSpec spec;
    spec.name = "time_additive";
    spec.f = [=](double, double y, double u) { need_y(y); return d / (1.0 - rho) * std::pow(y, 1.0 - rho) - d * u; };
    spec.fy = [=](double, double y, double) { need_y(y); return d * std::pow(y, -rho); };
    spec.fu = [=](double, double, double) { return -d; };
    spec.fyy = [=](double, double y, double) { need_y(y); return -rho * d * std::pow(y, -rho - 1.0); };
    spec.fty = [](double, double, double) { return 0.0; };
    spec.fuy = [](double, double, double) { return 0.0; };
    spec.fy_inverse = [=](double, double, double target) {
        if (!(target > 0.0)) throw std::domain_error("time_additive: f_y target must be positive");
        return std::pow(d / target, 1.0 / rho);
    };
    return spec;
}

// f(y, u) = delta/(1-1/alpha) y^{1-1/alpha} [(1-rho)u]^{1-1/sigma} - delta sigma u
// with sigma = (1-rho)/(1-1/alpha).
inline AggregatorSpec make_epstein_zin(const EZParams& p) {
    p.validate();
    const double d = p.delta, al = p.alpha, rho = p.rho;
    const double sg = p.sigma();
    const double k = d / (1.0 - 1.0 / al);
    const double e = 1.0 - 1.0 / sg;

    auto need_y = [](double y) {
        if (!(y > 0.0)) throw std::domain_error("aggregator 'epstein_zin': y must be positive");
    };
    // w = (1-rho)u must stay positive; w = 0 is allowed only where the power
    // involved is still finite (the utility solvers keep u interior anyway)
    auto wpow = [=](double u, double expo) {
        const double w = (1.0 - rho) * u;
        if (w < 0.0 || (w == 0.0 && expo < 0.0))
            throw std::domain_error("aggregator 'epstein_zin': (1-rho)u must be positive");
        return std::pow(w, expo);
    };

    AggregatorSpec spec;
    spec.name = "epstein_zin";
    spec.f = [=](double, double y, double u) {
        need_y(y);
        return k * std::pow(y, 1.0 - 1.0 / al) * wpow(u, e) - d * sg * u;
    };
    spec.fy = [=](double, double y, double u) { need_y(y); return d * std::pow(y, -1.0 / al) * wpow(u, e); };
    spec.fu = [=](double, double y, double u) {
        need_y(y);
        return k * std::pow(y, 1.0 - 1.0 / al) * e * (1.0 - rho) * wpow(u, e - 1.0) - d * sg;
    };
    spec.fyy = [=](double, double y, double u) {
        need_y(y);
        return -(d / al) * std::pow(y, -1.0 / al - 1.0) * wpow(u, e);
    };
    spec.fty = [](double, double, double) { return 0.0; };
    spec.fuy = [=](double, double y, double u) {
        need_y(y);
        return d * std::pow(y, -1.0 / al) * e * (1.0 - rho) * wpow(u, e - 1.0);
    };
    spec.fy_inverse = [=](double, double u, double target) {
        if (!(target > 0.0)) throw std::domain_error("epstein_zin: f_y target must be positive");
        return std::pow(d * wpow(u, e) / target, al);
    };
    return spec;
}

// f(t, y, u) = g(t, y) - delta u.  Partials of g are supplied alongside g;
// concavity/monotonicity of g is spot-checked and failures set a warning.
inline AggregatorSpec make_separable(std::function<double(double, double)> g,
                                     std::function<double(double, double)> gy,
                                     std::function<double(double, double)> gyy,
                                     std::function<double(double, double)> gty,
                                     double delta, const std::string& name = "separable") {
    if (!(delta > 0.0)) throw std::invalid_argument("separable: delta must be > 0");
    AggregatorSpec spec;
    spec.name = name;
    spec.f = [=](double t, double y, double u) { return g(t, y) - delta * u; };
    spec.fy = [=](double t, double y, double) { return gy(t, y); };
    spec.fu = [=](double, double, double) { return -delta; };
    spec.fyy = [=](double t, double y, double) { return gyy(t, y); };
    spec.fty = [=](double t, double y, double) { return gty(t, y); };
    spec.fuy = [](double, double, double) { return 0.0; };

    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> uy(0.05, 2.0), ut(0.0, 1.0);
    for (int k = 0; k < 64; ++k) {
        const double t = ut(rng), y = uy(rng);
        if (gy(t, y) < 0.0) {
            spec.warnings.push_back("g is decreasing in y at sampled point");
            break;
        }
        if (gyy(t, y) > 1e-12) {
            spec.warnings.push_back("g is not concave in y at sampled point");
            break;
        }
    }
    return spec;
}

// convenience: g(y) = coeff * y^power, time-independent
inline AggregatorSpec make_power_separable(double delta, double coeff, double power,
                                           const std::string& name = "separable") {
    auto g = [=](double, double y) { return power == 0.0 ? coeff : coeff * std::pow(y, power); };
    auto gy = [=](double, double y) { return power == 0.0 ? 0.0 : coeff * power * std::pow(y, power - 1.0); };
    auto gyy = [=](double, double y) {
        return power == 0.0 ? 0.0 : coeff * power * (power - 1.0) * std::pow(y, power - 2.0);
    };
    auto gty = [](double, double) { return 0.0; };
    return make_separable(g, gy, gyy, gty, delta, name);
}

// ---------------------------------------------------------------------------
// diagnostics

// Lf = (r + lambda(e^theta - 1)) f_y - beta y f_yy + f_ty + f_u f_y - f f_uy.
// Its sign splits the lump-at-zero regime from the free-interval regime.
inline double operator_L(const AggregatorSpec& spec, double r, double lambda, double theta,
                         double beta, double t, double y, double u) {
    const double a = r + lambda * (std::exp(theta) - 1.0);
    return a * spec.fy(t, y, u) - beta * y * spec.fyy(t, y, u) + spec.fty(t, y, u) +
           spec.fu(t, y, u) * spec.fy(t, y, u) - spec.f(t, y, u) * spec.fuy(t, y, u);
}

struct ElasticityDiscount {
    double epsilon_f = 0.0;  // intertemporal elasticity of substitution
    double rho_f = 0.0;      // endogenous discount rate
};

// epsilon_f = -f_y / (y f_yy), rho_f = f f_uy / f_y - f_u
inline ElasticityDiscount elasticity_and_discount(const AggregatorSpec& spec, double t, double y,
                                                  double u) {
    const double fy = spec.fy(t, y, u), fyy = spec.fyy(t, y, u);
    if (fyy == 0.0) throw std::invalid_argument("elasticity_and_discount: f_yy vanishes");
    if (fy == 0.0) throw std::invalid_argument("elasticity_and_discount: f_y vanishes");
    return {-fy / (y * fyy), spec.f(t, y, u) * spec.fuy(t, y, u) / fy - spec.fu(t, y, u)};
}

// ---------------------------------------------------------------------------
// assumption audit

struct AssumptionProfile {
    double K = 0.0;            // Lipschitz constant in u
    double growth_alpha = 0.0; // growth exponent, in (0, 1/2)
    double p = 0.0;            // moment exponent, > 1

    void validate() const {
        if (!(K > 0.0) || !std::isfinite(K)) throw std::invalid_argument("profile: K must be finite and > 0");
        if (!(growth_alpha > 0.0 && growth_alpha < 0.5))
            throw std::invalid_argument("profile: growth_alpha must lie in (0, 1/2)");
        if (!(p > 1.0)) throw std::invalid_argument("profile: p must be > 1");
        if (!(2.0 * growth_alpha * p < 1.0))
            throw std::invalid_argument("profile: 2 * growth_alpha * p must be < 1");
    }
    double q() const { return 1.0 / (1.0 - 2.0 * growth_alpha * p); }
};

struct SampleGrid {
    double t_min = 0.0, t_max = 1.0;
    double y_min = 0.05, y_max = 1.0;
    double u_min = 0.0, u_max = 1.0;
    int n_samples = 200;
};

struct A1Report {
    double min_hessian_eigenvalue = 0.0;  // smallest eigenvalue of the (y,u)-Hessian seen
    double max_hessian_eigenvalue = 0.0;  // largest; must be <= 0 for concavity
    double min_fy = 0.0;                  // must be > 0
    double max_u_lipschitz = 0.0;         // must be <= K
    double max_growth_ratio = 0.0;        // sup |f(t,y,0)| / (1 + y^growth_alpha), must be <= K
    int n_samples = 0;
    bool concave = false;
    bool strictly_concave = false;
    bool increasing_in_y = false;
    bool lipschitz_ok = false;
    bool growth_ok = false;

    bool all_pass() const { return concave && strictly_concave && increasing_in_y && lipschitz_ok && growth_ok; }

    nlohmann::json to_json() const {
        return {{"min_hessian_eigenvalue", min_hessian_eigenvalue},
                {"max_hessian_eigenvalue", max_hessian_eigenvalue},
                {"min_fy", min_fy},
                {"max_u_lipschitz", max_u_lipschitz},
                {"max_growth_ratio", max_growth_ratio},
                {"n_samples", n_samples},
                {"checks",
                 {{"concave", concave},
                  {"strictly_concave", strictly_concave},
                  {"increasing_in_y", increasing_in_y},
                  {"lipschitz_ok", lipschitz_ok},
                  {"growth_ok", growth_ok}}},
                {"all_pass", all_pass()}};
    }
};

// Numerical audit of the standing assumptions on the sampled domain: joint
// concavity in (y, u) via the 2x2 Hessian (f_uu from a central difference),
// monotonicity in y, an empirical Lipschitz bound in u, and the growth bound
// |f(t, y, 0)| <= K (1 + y^growth_alpha).
inline A1Report validate_a1(const AggregatorSpec& spec, const AssumptionProfile& profile,
                            const SampleGrid& grid, std::uint64_t seed) {
    profile.validate();
    if (grid.n_samples <= 0) throw std::invalid_argument("validate_a1: n_samples must be positive");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> st(grid.t_min, grid.t_max), sy(grid.y_min, grid.y_max),
        su(grid.u_min, grid.u_max);

    A1Report rep;
    rep.n_samples = grid.n_samples;
    rep.min_hessian_eigenvalue = std::numeric_limits<double>::infinity();
    rep.max_hessian_eigenvalue = -std::numeric_limits<double>::infinity();
    rep.min_fy = std::numeric_limits<double>::infinity();
    rep.max_u_lipschitz = 0.0;
    rep.max_growth_ratio = 0.0;

    for (int k = 0; k < grid.n_samples; ++k) {
        const double t = st(rng), y = sy(rng);
        double u = su(rng);
        // keep u usable where the aggregator's u-domain is one-sided
        if (u <= 0.0) u = 0.5 * (grid.u_min + grid.u_max);

        const double fyy = spec.fyy(t, y, u);
        const double fuy = spec.fuy(t, y, u);
        const double hu = 1e-5 * std::max(1.0, std::abs(u));
        const double fuu =
            (spec.fu(t, y, u + hu) - spec.fu(t, y, u - hu)) / (2.0 * hu);

        // eigenvalues of [[fyy, fuy], [fuy, fuu]]
        const double tr = fyy + fuu;
        const double disc = std::sqrt(std::max(0.0, 0.25 * (fyy - fuu) * (fyy - fuu) + fuy * fuy));
        rep.min_hessian_eigenvalue = std::min(rep.min_hessian_eigenvalue, 0.5 * tr - disc);
        rep.max_hessian_eigenvalue = std::max(rep.max_hessian_eigenvalue, 0.5 * tr + disc);

        rep.min_fy = std::min(rep.min_fy, spec.fy(t, y, u));

        double u2 = su(rng);
        if (u2 <= 0.0) u2 = 0.75 * (grid.u_min + grid.u_max);
        if (u2 != u)
            rep.max_u_lipschitz = std::max(
                rep.max_u_lipschitz, std::abs(spec.f(t, y, u) - spec.f(t, y, u2)) / std::abs(u - u2));

        rep.max_growth_ratio = std::max(
            rep.max_growth_ratio,
            std::abs(spec.f(t, y, 0.0)) / (1.0 + std::pow(y, profile.growth_alpha)));
    }

    const double tol = 1e-10;
    rep.concave = rep.max_hessian_eigenvalue <= tol;
    rep.strictly_concave = rep.min_hessian_eigenvalue < -tol;
    rep.increasing_in_y = rep.min_fy > 0.0;
    rep.lipschitz_ok = rep.max_u_lipschitz <= profile.K * (1.0 + 1e-9);
    rep.growth_ok = rep.max_growth_ratio <= profile.K * (1.0 + 1e-9);
    return rep;
}

// Central-difference agreement of the five supplied partials with f at
// randomly sampled domain points; returns the worst relative error.
inline double fd_check(const AggregatorSpec& spec, const SampleGrid& grid, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> st(grid.t_min, grid.t_max), sy(grid.y_min, grid.y_max),
        su(grid.u_min, grid.u_max);
    auto rel = [](double got, double want) {
        return std::abs(got - want) / std::max(1.0, std::abs(want));
    };

    double worst = 0.0;
    for (int k = 0; k < grid.n_samples; ++k) {
        const double t = st(rng), y = sy(rng);
        double u = su(rng);
        if (u <= 0.0) u = 0.5 * (grid.u_min + grid.u_max);
        const double hy = 1e-5 * std::max(1.0, std::abs(y));
        const double hu = 1e-5 * std::max(1.0, std::abs(u));
        const double ht = 1e-5;
        // second difference: step ~ eps^{1/4} balances truncation against
        // cancellation, and scaling it with y keeps the truncation term
        // (h/y)^2 flat for the power-law curvatures near the domain edge
        const double hy2 = 1e-4 * std::max(std::abs(y), 1e-12);

        const double fy_fd = (spec.f(t, y + hy, u) - spec.f(t, y - hy, u)) / (2.0 * hy);
        const double fu_fd = (spec.f(t, y, u + hu) - spec.f(t, y, u - hu)) / (2.0 * hu);
        const double fyy_fd =
            (spec.f(t, y + hy2, u) - 2.0 * spec.f(t, y, u) + spec.f(t, y - hy2, u)) /
            (hy2 * hy2);
        const double fty_fd =
            (spec.fy(t + ht, y, u) - spec.fy(t - ht, y, u)) / (2.0 * ht);
        const double fuy_fd = (spec.fy(t, y, u + hu) - spec.fy(t, y, u - hu)) / (2.0 * hu);

        worst = std::max({worst, rel(spec.fy(t, y, u), fy_fd), rel(spec.fu(t, y, u), fu_fd),
                          rel(spec.fyy(t, y, u), fyy_fd), rel(spec.fty(t, y, u), fty_fd),
                          rel(spec.fuy(t, y, u), fuy_fd)});
    }
    return worst;
}

}  // namespace lsru
