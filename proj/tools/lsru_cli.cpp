// Scenario runner: turns JSON configs into trees, plans, audits, and
// convergence studies, and writes machine-readable reports.
//
// Subcommands: simulate, check-foc, calibrate, validate-aggregator, converge,
// moment-check.  Exit code 0 when every configured assertion passes, 1 on an
// assertion failure, 2 on a validation error; failures also leave a JSON
// error report in the output directory.  All outputs are deterministic for a
// fixed (config, seed): node reductions are index-ordered and doubles are
// printed in shortest round-trip form.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "lsru/aggregators.hpp"
#include "lsru/bsde.hpp"
#include "lsru/foc.hpp"
#include "lsru/io.hpp"
#include "lsru/market_tree.hpp"
#include "lsru/plans.hpp"
#include "lsru/policies.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lsru;

namespace {

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct AssertionFailure : std::runtime_error {
    json details;
    AssertionFailure(const std::string& msg, json d) : std::runtime_error(msg), details(std::move(d)) {}
};

const json& need(const json& j, const std::string& key, const std::string& ctx) {
    auto it = j.find(key);
    if (it == j.end()) throw ConfigError("config: missing field '" + ctx + key + "'");
    return *it;
}

double need_num(const json& j, const std::string& key, const std::string& ctx) {
    const json& v = need(j, key, ctx);
    if (!v.is_number()) throw ConfigError("config: field '" + ctx + key + "' must be a number");
    return v.get<double>();
}

int need_int(const json& j, const std::string& key, const std::string& ctx) {
    const json& v = need(j, key, ctx);
    if (!v.is_number_integer()) throw ConfigError("config: field '" + ctx + key + "' must be an integer");
    return v.get<int>();
}

std::string need_str(const json& j, const std::string& key, const std::string& ctx) {
    const json& v = need(j, key, ctx);
    if (!v.is_string()) throw ConfigError("config: field '" + ctx + key + "' must be a string");
    return v.get<std::string>();
}

double opt_num(const json& j, const std::string& key, double fallback) {
    auto it = j.find(key);
    return it == j.end() ? fallback : it->get<double>();
}

bool opt_bool(const json& j, const std::string& key, bool fallback) {
    auto it = j.find(key);
    return it == j.end() ? fallback : it->get<bool>();
}

// ---------------------------------------------------------------------------
// config -> domain objects

MarketParams parse_market(const json& cfg) {
    const json& m = need(cfg, "market", "");
    MarketParams p;
    p.r = need_num(m, "r", "market.");
    p.lambda = need_num(m, "lambda", "market.");
    p.theta = need_num(m, "theta", "market.");
    p.T = need_num(m, "T", "market.");
    p.validate();
    return p;
}

SatisfactionKernel parse_kernel(const json& cfg) {
    const json& k = need(cfg, "kernel", "");
    SatisfactionKernel kern;
    kern.eta = need_num(k, "eta", "kernel.");
    kern.beta = need_num(k, "beta", "kernel.");
    kern.validate();
    return kern;
}

struct AggChoice {
    AggregatorSpec spec;
    std::string name;
    double terminal = 0.0;  // terminal utility level for the BSDE
    bool is_ez = false;
    EZParams ez;
};

AggChoice parse_aggregator(const json& cfg) {
    const json& a = need(cfg, "aggregator", "");
    AggChoice out;
    out.name = need_str(a, "name", "aggregator.");
    if (out.name == "time_additive") {
        TimeAdditiveParams p{need_num(a, "delta", "aggregator."), need_num(a, "rho", "aggregator.")};
        out.spec = make_time_additive(p);
    } else if (out.name == "epstein_zin") {
        out.ez = EZParams{need_num(a, "delta", "aggregator."), need_num(a, "alpha", "aggregator."),
                          need_num(a, "rho", "aggregator.")};
        out.spec = make_epstein_zin(out.ez);
        out.is_ez = true;
        const double vT = opt_num(a, "terminal_v", 0.0);
        if (vT < 0.0) throw ConfigError("config: aggregator.terminal_v must be >= 0");
        out.terminal = vT == 0.0 ? 0.0 : std::pow(vT, 1.0 - out.ez.rho) / (1.0 - out.ez.rho);
    } else if (out.name == "separable") {
        out.spec = make_power_separable(need_num(a, "delta", "aggregator."),
                                        need_num(a, "coeff", "aggregator."),
                                        need_num(a, "power", "aggregator."));
    } else {
        throw ConfigError("config: unknown aggregator '" + out.name + "'");
    }
    return out;
}

SolverConfig parse_solver(const json& cfg) {
    SolverConfig sc;
    auto it = cfg.find("solver");
    if (it == cfg.end()) return sc;
    const std::string scheme = it->value("scheme", "implicit");
    if (scheme == "implicit") sc.scheme = Scheme::implicit;
    else if (scheme == "explicit") sc.scheme = Scheme::explicit_euler;
    else throw ConfigError("config: solver.scheme must be 'implicit' or 'explicit'");
    sc.tol = it->value("tol", 1e-12);
    sc.max_iter = it->value("max_iter", 100);
    return sc;
}

FOCTolerances parse_tolerances(const json& cfg) {
    FOCTolerances t;
    auto it = cfg.find("tolerances");
    if (it == cfg.end()) return t;
    t.tol_b = it->value("tol_b", t.tol_b);
    t.tol_v = it->value("tol_v", t.tol_v);
    t.tol_f = it->value("tol_f", t.tol_f);
    return t;
}

PolicySpec parse_policy(const json& cfg) {
    const json& p = need(cfg, "policy", "");
    const std::string variant = need_str(p, "variant", "policy.");
    PolicySpec pol;
    if (variant == "all_at_zero") {
        pol.variant = PolicyVariant::all_at_zero;
        pol.w = need_num(p, "w", "policy.");
    } else if (variant == "barrier") {
        pol.variant = PolicyVariant::barrier;
        pol.M = need_num(p, "M", "policy.");
    } else {
        throw ConfigError("config: unknown policy variant '" + variant + "'");
    }
    pol.validate();
    return pol;
}

// ---------------------------------------------------------------------------
// output helpers

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void write_nodes_csv(const fs::path& path, const EventTree& tree, const Field& Y, const Field& U,
                     const Field& psi_bar, const Field& nablaV) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << "step,jump_pattern,N,prob,psi,Y,U,psi_bar,nablaV\n";
    for (int i = 0; i <= tree.n; ++i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
            const double pb = i < tree.n ? psi_bar[static_cast<size_t>(i)][j] : 0.0;
            os << i << ',' << jump_pattern(i, j) << ',' << jump_count(j) << ','
               << format_double(tree.prob[static_cast<size_t>(i)][j]) << ','
               << format_double(tree.psi[static_cast<size_t>(i)][j]) << ','
               << format_double(Y[static_cast<size_t>(i)][j]) << ','
               << format_double(U[static_cast<size_t>(i)][j]) << ',' << format_double(pb) << ','
               << format_double(nablaV[static_cast<size_t>(i)][j]) << '\n';
        }
}

// sampled root-to-leaf trajectories for the run result
json sample_paths(const EventTree& tree, const ConsumptionPlan& plan, const Field& Y,
                  const Field& U, std::uint64_t seed, int k_paths) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution jump(tree.p_jump);
    json out = json::array();
    for (int k = 0; k < k_paths; ++k) {
        std::uint64_t j = 0;
        json t_arr = json::array(), y_arr = json::array(), u_arr = json::array(),
             c_arr = json::array();
        double cum = 0.0;
        for (int i = 0; i <= tree.n; ++i) {
            if (i > 0) j = (j << 1) | static_cast<std::uint64_t>(jump(rng));
            cum += plan.lumps[static_cast<size_t>(i)][j];
            t_arr.push_back(tree.t(i));
            y_arr.push_back(Y[static_cast<size_t>(i)][j]);
            u_arr.push_back(U[static_cast<size_t>(i)][j]);
            c_arr.push_back(cum);
            if (i < tree.n) cum += plan.rates[static_cast<size_t>(i)][j] * tree.delta();
        }
        out.push_back({{"pattern", jump_pattern(tree.n, j)},
                       {"t", t_arr},
                       {"Y", y_arr},
                       {"U", u_arr},
                       {"cum_consumption", c_arr}});
    }
    return out;
}

// ---------------------------------------------------------------------------
// shared run context

struct RunContext {
    json cfg;          // resolved config (overrides and defaults applied)
    fs::path out_dir;
    std::uint64_t seed = 0;
};

RunContext load_context(const std::string& config_path, const std::string& out_dir,
                        long seed_override, int n_steps_override) {
    std::ifstream is(config_path);
    if (!is) throw ConfigError("config: cannot open '" + config_path + "'");
    json cfg;
    try {
        cfg = json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: parse error: ") + e.what());
    }
    if (seed_override >= 0) cfg["seed"] = seed_override;
    if (n_steps_override > 0) cfg["grid"]["n_steps"] = n_steps_override;
    if (!cfg.contains("seed")) cfg["seed"] = 0;

    RunContext ctx;
    ctx.cfg = std::move(cfg);
    ctx.out_dir = out_dir;
    ctx.seed = ctx.cfg["seed"].get<std::uint64_t>();
    fs::create_directories(ctx.out_dir);
    return ctx;
}

EventTree build_tree_from(const json& cfg) {
    const MarketParams market = parse_market(cfg);
    const int n = need_int(need(cfg, "grid", ""), "n_steps", "grid.");
    return build_tree(market, TimeGrid(n, market.T));
}

void finish(const RunContext& ctx) { write_json(ctx.out_dir / "resolved_config.json", ctx.cfg); }

// ---------------------------------------------------------------------------
// subcommands

int cmd_simulate(RunContext& ctx) {
    const auto t_start = std::chrono::steady_clock::now();
    const EventTree tree = build_tree_from(ctx.cfg);
    const SatisfactionKernel kernel = parse_kernel(ctx.cfg);
    const AggChoice agg = parse_aggregator(ctx.cfg);
    const SolverConfig solver = parse_solver(ctx.cfg);
    const FOCTolerances tols = parse_tolerances(ctx.cfg);
    const PolicySpec pol = parse_policy(ctx.cfg);

    BarrierConfig bc;
    bc.solver = solver;
    bc.terminal = agg.terminal;
    const ConsumptionPlan plan = build_policy_plan(tree, agg.spec, kernel, pol, bc);

    const Field Y = satisfaction(tree, plan, kernel);
    const UtilitySolution sol = solve_utility(tree, Y, agg.spec, solver, agg.terminal);
    const Field nv = gradient(tree, Y, sol.U, agg.spec, kernel);

    double M;
    double w = budget(tree, plan);
    const json foc_cfg = ctx.cfg.value("foc", json::object());
    if (foc_cfg.contains("M")) M = foc_cfg["M"].get<double>();
    else if (pol.variant == PolicyVariant::barrier) M = pol.M;
    else M = solve_multiplier(tree, plan, kernel, agg.spec, solver, agg.terminal).M;
    if (foc_cfg.contains("w")) w = foc_cfg["w"].get<double>();

    const FOCReport rep =
        check_foc(tree, plan, kernel, agg.spec, M, w, tols, solver, agg.terminal);

    write_nodes_csv(ctx.out_dir / "nodes.csv", tree, Y, sol.U, sol.psi_bar, nv);
    write_plan_csv((ctx.out_dir / "plan.csv").string(), tree, plan);
    write_json(ctx.out_dir / "foc_report.json", rep.to_json());

    json result = {{"U_0", sol.U[0][0]},
                   {"budget", budget(tree, plan)},
                   {"M", M},
                   {"foc_pass", rep.pass()},
                   {"paths", sample_paths(tree, plan, Y, sol.U, ctx.seed, 3)}};
    write_json(ctx.out_dir / "run_result.json", result);
    finish(ctx);

    const double ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t_start).count();
    std::cerr << "simulate: U_0 = " << sol.U[0][0] << ", budget = " << budget(tree, plan)
              << ", foc_pass = " << (rep.pass() ? "true" : "false") << " (" << ms << " ms)\n";

    if (opt_bool(ctx.cfg.value("assertions", json::object()), "foc_pass", true) && !rep.pass())
        throw AssertionFailure("simulate: FOC audit failed", rep.to_json());
    return 0;
}

int cmd_check_foc(RunContext& ctx) {
    const EventTree tree = build_tree_from(ctx.cfg);
    const SatisfactionKernel kernel = parse_kernel(ctx.cfg);
    const AggChoice agg = parse_aggregator(ctx.cfg);
    const SolverConfig solver = parse_solver(ctx.cfg);
    const FOCTolerances tols = parse_tolerances(ctx.cfg);

    const std::string plan_path = need_str(ctx.cfg, "plan_csv", "");
    const PlanCsv pc = read_plan_csv(plan_path);
    if (pc.n_steps != tree.n)
        throw ConfigError("check-foc: plan has " + std::to_string(pc.n_steps) +
                          " steps but grid.n_steps = " + std::to_string(tree.n));

    const json foc_cfg = need(ctx.cfg, "foc", "");
    const double w = need_num(foc_cfg, "w", "foc.");
    double M;
    if (foc_cfg.contains("M")) M = foc_cfg["M"].get<double>();
    else M = solve_multiplier(tree, pc.plan, kernel, agg.spec, solver, agg.terminal).M;

    const FOCReport rep =
        check_foc(tree, pc.plan, kernel, agg.spec, M, w, tols, solver, agg.terminal);
    write_json(ctx.out_dir / "foc_report.json", rep.to_json());
    finish(ctx);

    std::cerr << "check-foc: budget_gap = " << rep.budget_gap
              << ", max_violation = " << rep.max_violation << ", flatoff = " << rep.flatoff
              << ", pass = " << (rep.pass() ? "true" : "false") << "\n";
    if (opt_bool(ctx.cfg.value("assertions", json::object()), "foc_pass", true) && !rep.pass())
        throw AssertionFailure("check-foc: FOC audit failed", rep.to_json());
    return 0;
}

int cmd_calibrate(RunContext& ctx) {
    const EventTree tree = build_tree_from(ctx.cfg);
    const SatisfactionKernel kernel = parse_kernel(ctx.cfg);
    const AggChoice agg = parse_aggregator(ctx.cfg);
    const SolverConfig solver = parse_solver(ctx.cfg);

    const json& cal = need(ctx.cfg, "calibration", "");
    const double w = need_num(cal, "w", "calibration.");
    const double tol = opt_num(cal, "tol", 1e-6);
    const std::string variant = need_str(need(ctx.cfg, "policy", ""), "variant", "policy.");

    CalibrationResult res;
    if (variant == "barrier") {
        BarrierConfig bc;
        bc.solver = solver;
        bc.terminal = agg.terminal;
        const double m0 = opt_num(cal, "initial", 0.05);
        res = calibrate(
            tree,
            [&](double m) { return barrier_policy(tree, agg.spec, kernel, m, bc).plan; }, m0,
            /*budget_decreasing=*/true, w, tol);
    } else if (variant == "all_at_zero") {
        res = calibrate(tree, [&](double s) { return all_at_zero(tree, s); }, std::max(w, 1.0),
                        /*budget_decreasing=*/false, w, tol);
    } else {
        throw ConfigError("calibrate: unsupported policy variant '" + variant + "'");
    }

    write_plan_csv((ctx.out_dir / "plan.csv").string(), tree, res.plan);
    write_json(ctx.out_dir / "calibration.json",
               {{"param", res.param},
                {"budget", res.budget},
                {"target_w", w},
                {"iterations", res.iterations},
                {"bracket", {res.bracket_lo, res.bracket_hi}}});
    finish(ctx);
    std::cerr << "calibrate: param = " << res.param << ", budget = " << res.budget << " (target "
              << w << ")\n";
    return 0;
}

int cmd_validate_aggregator(RunContext& ctx) {
    const AggChoice agg = parse_aggregator(ctx.cfg);

    SampleGrid grid;
    if (ctx.cfg.contains("sample_grid")) {
        const json& g = ctx.cfg["sample_grid"];
        grid.t_min = opt_num(g, "t_min", grid.t_min);
        grid.t_max = opt_num(g, "t_max", grid.t_max);
        grid.y_min = opt_num(g, "y_min", grid.y_min);
        grid.y_max = opt_num(g, "y_max", grid.y_max);
        grid.u_min = opt_num(g, "u_min", grid.u_min);
        grid.u_max = opt_num(g, "u_max", grid.u_max);
        grid.n_samples = static_cast<int>(opt_num(g, "n_samples", grid.n_samples));
    }

    const json& prof_cfg = need(ctx.cfg, "profile", "");
    AssumptionProfile profile;
    profile.K = need_num(prof_cfg, "K", "profile.");
    profile.growth_alpha = need_num(prof_cfg, "growth_alpha", "profile.");
    profile.p = need_num(prof_cfg, "p", "profile.");
    profile.validate();

    const double fd_err = fd_check(agg.spec, grid, ctx.seed);
    const A1Report rep = validate_a1(agg.spec, profile, grid, ctx.seed);

    json out = {{"aggregator", agg.name},
                {"fd_max_rel_err", fd_err},
                {"fd_ok", fd_err <= 1e-6},
                {"a1", rep.to_json()},
                {"profile", {{"K", profile.K},
                             {"growth_alpha", profile.growth_alpha},
                             {"p", profile.p},
                             {"q", profile.q()}}}};
    write_json(ctx.out_dir / "aggregator_report.json", out);
    finish(ctx);
    std::cerr << "validate-aggregator: fd_max_rel_err = " << fd_err
              << ", a1 all_pass = " << (rep.all_pass() ? "true" : "false") << "\n";

    const json asrt = ctx.cfg.value("assertions", json::object());
    if (opt_bool(asrt, "fd_pass", true) && fd_err > 1e-6)
        throw AssertionFailure("validate-aggregator: finite-difference check failed", out);
    if (opt_bool(asrt, "a1_pass", true) && !rep.all_pass())
        throw AssertionFailure("validate-aggregator: assumption audit failed", out);
    return 0;
}

int cmd_converge(RunContext& ctx) {
    const MarketParams market = parse_market(ctx.cfg);
    const SatisfactionKernel kernel = parse_kernel(ctx.cfg);
    const AggChoice agg = parse_aggregator(ctx.cfg);
    const SolverConfig solver = parse_solver(ctx.cfg);
    const PolicySpec pol = parse_policy(ctx.cfg);
    if (pol.variant != PolicyVariant::all_at_zero)
        throw ConfigError("converge: only the all_at_zero policy has a deterministic oracle");

    const json& cv = need(ctx.cfg, "converge", "");
    const json& nl = need(cv, "n_list", "converge.");
    std::vector<int> ns;
    for (const auto& v : nl) ns.push_back(v.get<int>());
    const int oracle_steps = static_cast<int>(opt_num(cv, "oracle_steps", 4096));
    const double require_order = opt_num(ctx.cfg.value("assertions", json::object()),
                                         "min_order", 0.9);

    // oracle: deterministic satisfaction path of the lump-at-zero plan
    const double y0 = kernel.beta * pol.w + kernel.eta;
    std::vector<double> times(static_cast<size_t>(oracle_steps) + 1);
    for (int k = 0; k <= oracle_steps; ++k)
        times[static_cast<size_t>(k)] = market.T * k / oracle_steps;
    const double u_ref =
        solve_deterministic(agg.spec, times,
                            [&](double t) { return y0 * std::exp(-kernel.beta * t); },
                            agg.terminal)[0];

    auto u0_of_n = [&](int n) {
        const EventTree tree = build_tree(market, TimeGrid(n, market.T));
        const ConsumptionPlan plan = all_at_zero(tree, pol.w);
        const Field Y = satisfaction(tree, plan, kernel);
        return solve_utility(tree, Y, agg.spec, solver, agg.terminal).U[0][0];
    };

    RefineTable tab;
    std::string failure;
    try {
        tab = refine_study(u0_of_n, ns, require_order, &u_ref);
    } catch (const std::runtime_error& e) {
        tab = refine_study(u0_of_n, ns, 0.0, &u_ref);  // tabulate anyway for the report
        failure = e.what();
    }

    std::ofstream os(ctx.out_dir / "convergence.csv", std::ios::binary);
    os << "n,delta,u0,error,order\n";
    for (std::size_t k = 0; k < tab.ns.size(); ++k) {
        os << tab.ns[k] << ',' << format_double(market.T / tab.ns[k]) << ','
           << format_double(tab.u0[k]) << ',' << format_double(tab.diffs[k]) << ',';
        if (k > 0) os << format_double(tab.orders[k - 1]);
        os << '\n';
    }
    os.close();
    finish(ctx);
    std::cerr << "converge: u_ref = " << u_ref << ", min_order = " << tab.min_order << "\n";
    if (!failure.empty())
        throw AssertionFailure(failure, {{"min_order", tab.min_order}, {"u_ref", u_ref}});
    return 0;
}

int cmd_moment_check(RunContext& ctx) {
    const MarketParams market = parse_market(ctx.cfg);
    const json& mc = need(ctx.cfg, "moment", "");
    const double p = need_num(mc, "p", "moment.");
    const std::size_t n_samples = static_cast<std::size_t>(need_num(mc, "n_samples", "moment."));
    const double sigmas = opt_num(ctx.cfg.value("assertions", json::object()), "mc_sigmas", 3.0);

    const MomentCheck res = density_moment(market, p, n_samples, ctx.seed);
    const double z = (res.mc_estimate - res.closed_form) / res.mc_stderr;
    json out = {{"closed_form", res.closed_form},
                {"mc_estimate", res.mc_estimate},
                {"mc_stderr", res.mc_stderr},
                {"z_score", z},
                {"n_samples", n_samples},
                {"p", p}};
    write_json(ctx.out_dir / "moment_check.json", out);
    finish(ctx);
    std::cerr << "moment-check: closed_form = " << res.closed_form
              << ", mc = " << res.mc_estimate << " +- " << res.mc_stderr << " (z = " << z << ")\n";
    if (std::abs(z) > sigmas)
        throw AssertionFailure("moment-check: MC estimate outside " + std::to_string(sigmas) +
                                   " standard errors",
                               out);
    return 0;
}

// ---------------------------------------------------------------------------

int run_guarded(const std::function<int()>& body, const fs::path& out_dir) {
    try {
        return body();
    } catch (const AssertionFailure& e) {
        json err = {{"error", "assertion"}, {"message", e.what()}, {"details", e.details}};
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (!ec) write_json(out_dir / "error.json", err);
        std::cerr << err.dump(2) << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        json err = {{"error", "validation"}, {"message", e.what()}};
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (!ec) write_json(out_dir / "error.json", err);
        std::cerr << err.dump(2) << "\n";
        return 2;
    } catch (const std::exception& e) {
        json err = {{"error", "assertion"}, {"message", e.what()}};
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (!ec) write_json(out_dir / "error.json", err);
        std::cerr << err.dump(2) << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"recursive-utility consumption planner on Poisson event trees"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    long seed_override = -1;
    int n_steps_override = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "scenario config (JSON)")->required();
        sub->add_option("--out", out_dir, "output directory")->required();
        sub->add_option("--seed", seed_override, "override config seed");
        sub->add_option("--n-steps", n_steps_override, "override grid.n_steps");
    };

    CLI::App* simulate = app.add_subcommand("simulate", "build a plan, solve it, audit the FOCs");
    CLI::App* checkfoc = app.add_subcommand("check-foc", "audit a plan file against a config");
    CLI::App* calib = app.add_subcommand("calibrate", "calibrate the policy to the budget");
    CLI::App* va = app.add_subcommand("validate-aggregator", "derivative and assumption checks");
    CLI::App* conv = app.add_subcommand("converge", "refinement study against the ODE oracle");
    CLI::App* mom = app.add_subcommand("moment-check", "density moment: closed form vs Monte Carlo");
    for (CLI::App* sub : {simulate, checkfoc, calib, va, conv, mom}) add_common(sub);

    CLI11_PARSE(app, argc, argv);

    auto dispatch = [&]() -> int {
        RunContext ctx = load_context(config_path, out_dir, seed_override, n_steps_override);
        if (simulate->parsed()) return cmd_simulate(ctx);
        if (checkfoc->parsed()) return cmd_check_foc(ctx);
        if (calib->parsed()) return cmd_calibrate(ctx);
        if (va->parsed()) return cmd_validate_aggregator(ctx);
        if (conv->parsed()) return cmd_converge(ctx);
        if (mom->parsed()) return cmd_moment_check(ctx);
        return 2;
    };
    return run_guarded(dispatch, out_dir);
}
