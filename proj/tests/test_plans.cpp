#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <sstream>

#include "lsru/market_tree.hpp"
#include "lsru/plans.hpp"

using namespace lsru;

namespace {

EventTree small_tree(int n = 8, double T = 1.0) {
    return build_tree({0.02, 0.1, 0.5, T}, TimeGrid(n, T));
}

ConsumptionPlan random_plan(const EventTree& tree, std::uint64_t seed, double scale = 0.5) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, scale);
    std::bernoulli_distribution spike(0.3);
    ConsumptionPlan plan = zero_plan(tree);
    for (auto& level : plan.lumps)
        for (auto& v : level) v = spike(rng) ? u(rng) : 0.0;
    for (auto& level : plan.rates)
        for (auto& v : level) v = u(rng);
    return plan;
}

double max_abs_diff(const Field& a, const Field& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j)
            worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
    return worst;
}

}  // namespace

TEST_CASE("kernel and plan validation") {
    CHECK_THROWS_AS((SatisfactionKernel{-0.1, 1.0}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((SatisfactionKernel{0.2, 0.0}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((SatisfactionKernel{0.2, -1.0}.validate()), std::invalid_argument);
    CHECK_NOTHROW((SatisfactionKernel{0.0, 1.0}.validate()));  // eta = 0 is allowed

    const EventTree tree = small_tree(4);
    const SatisfactionKernel kernel{0.2, 1.0};
    ConsumptionPlan plan = zero_plan(tree);
    plan.lumps[2][1] = -0.5;
    CHECK_THROWS_AS(satisfaction(tree, plan, kernel), std::invalid_argument);
    plan = zero_plan(tree);
    plan.rates[1][0] = -1e-3;
    CHECK_THROWS_AS(satisfaction(tree, plan, kernel), std::invalid_argument);
    plan = zero_plan(tree);
    plan.rates.pop_back();
    CHECK_THROWS_AS(satisfaction(tree, plan, kernel), std::invalid_argument);
}

TEST_CASE("zero plan decays the initial satisfaction exponentially") {
    const EventTree tree = small_tree(10);
    const SatisfactionKernel kernel{0.2, 1.3};
    const Field Y = satisfaction(tree, zero_plan(tree), kernel);
    for (int i = 0; i <= tree.n; ++i) {
        const double want = kernel.eta * std::exp(-kernel.beta * tree.t(i));
        for (double y : Y[static_cast<size_t>(i)])
            CHECK(y == Catch::Approx(want).margin(1e-14));
    }
}

TEST_CASE("single lump at time zero shifts the decay curve") {
    const EventTree tree = small_tree(10);
    const SatisfactionKernel kernel{0.2, 1.0};
    ConsumptionPlan plan = zero_plan(tree);
    plan.lumps[0][0] = 1.75;
    const Field Y = satisfaction(tree, plan, kernel);
    for (int i = 0; i <= tree.n; ++i) {
        const double want = (kernel.beta * 1.75 + kernel.eta) * std::exp(-kernel.beta * tree.t(i));
        for (double y : Y[static_cast<size_t>(i)])
            CHECK(y == Catch::Approx(want).margin(1e-14));
    }
}

TEST_CASE("constant rate from zero satisfaction approaches the rate level") {
    // beta = 1, eta = 0, rate c: Y_t = c (1 - e^{-t}), so Y_1 = 0.632121... c.
    const EventTree tree = small_tree(16);
    const SatisfactionKernel kernel{0.0, 1.0};
    const double c = 0.8;
    ConsumptionPlan plan = zero_plan(tree);
    for (auto& level : plan.rates)
        for (auto& v : level) v = c;
    const Field Y = satisfaction(tree, plan, kernel);
    for (int i = 0; i <= tree.n; ++i) {
        const double want = c * (1.0 - std::exp(-tree.t(i)));
        for (double y : Y[static_cast<size_t>(i)])
            CHECK(y == Catch::Approx(want).margin(1e-13));
    }
    CHECK(Y[static_cast<size_t>(tree.n)][0] == Catch::Approx(0.6321205588 * c).margin(1e-9));
}

TEST_CASE("general kernel matches the exponential recursion") {
    const SatisfactionKernel exact{0.2, 1.1};
    SatisfactionKernel general = exact;
    general.theta = [](double t, double s) { return 1.1 * std::exp(-1.1 * (t - s)); };

    // lump contributions are evaluated pointwise, so they agree to rounding
    {
        const EventTree tree = small_tree(8);
        ConsumptionPlan plan = random_plan(tree, 7);
        for (auto& level : plan.rates)
            for (auto& v : level) v = 0.0;
        const Field a = satisfaction(tree, plan, exact);
        const Field b = satisfaction(tree, plan, general);
        CHECK(max_abs_diff(a, b) < 1e-12);
    }

    // rates go through left-endpoint quadrature in the general path but the
    // exact per-step integral in the exponential recursion: the gap is first
    // order in the step and halves with it
    double coarse = 0.0;
    for (const int n : {8, 16}) {
        const EventTree tree = small_tree(n);
        ConsumptionPlan plan = zero_plan(tree);
        for (auto& level : plan.rates)
            for (auto& v : level) v = 0.8;
        const double diff = max_abs_diff(satisfaction(tree, plan, exact),
                                         satisfaction(tree, plan, general));
        if (n == 8) {
            coarse = diff;
            CHECK(diff < 0.1);
        } else {
            CHECK(diff < 0.65 * coarse);
        }
    }
}

TEST_CASE("satisfaction is affine in the plan") {
    const EventTree tree = small_tree(9);
    const SatisfactionKernel kernel{0.2, 1.0};
    const ConsumptionPlan a = random_plan(tree, 11);
    const ConsumptionPlan b = random_plan(tree, 12);
    const double w = 0.37;
    const Field Ya = satisfaction(tree, a, kernel);
    const Field Yb = satisfaction(tree, b, kernel);
    const Field Yc = satisfaction(tree, convex_combine(a, b, w), kernel);
    double worst = 0.0;
    for (std::size_t i = 0; i < Yc.size(); ++i)
        for (std::size_t j = 0; j < Yc[i].size(); ++j)
            worst = std::max(worst, std::abs(Yc[i][j] - (w * Ya[i][j] + (1.0 - w) * Yb[i][j])));
    CHECK(worst < 1e-14);
    CHECK_THROWS_AS(convex_combine(a, b, 1.5), std::invalid_argument);
}

TEST_CASE("satisfaction never falls below the decayed initial level") {
    const EventTree tree = small_tree(10);
    const SatisfactionKernel kernel{0.35, 0.8};
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        const Field Y = satisfaction(tree, random_plan(tree, seed), kernel);
        for (int i = 0; i <= tree.n; ++i) {
            const double floor = kernel.eta * std::exp(-kernel.beta * tree.t(i));
            for (double y : Y[static_cast<size_t>(i)]) CHECK(y >= floor - 1e-12);
        }
    }
}

TEST_CASE("satisfaction is bounded by cumulative consumption") {
    // Y_t <= max(eta, beta, 1) (1 + C_t) along every path.
    const EventTree tree = small_tree(10);
    const SatisfactionKernel kernel{0.35, 1.6};
    const double bound_scale = std::max({kernel.eta, kernel.beta, 1.0});
    const ConsumptionPlan plan = random_plan(tree, 21, 1.4);
    const Field Y = satisfaction(tree, plan, kernel);

    const Field ones = tree.make_field(1.0);
    // cumulative consumption via a forward pass mirroring pathwise accumulation
    Field cum = tree.make_field();
    cum[0][0] = plan.lumps[0][0];
    for (int i = 0; i < tree.n; ++i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
            const double base = cum[static_cast<size_t>(i)][j] +
                                plan.rates[static_cast<size_t>(i)][j] * tree.delta();
            for (int b = 0; b < 2; ++b) {
                const std::uint64_t c = 2 * j + static_cast<std::uint64_t>(b);
                cum[static_cast<size_t>(i) + 1][c] = base + plan.lumps[static_cast<size_t>(i) + 1][c];
            }
        }
    for (int i = 0; i <= tree.n; ++i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j)
            CHECK(Y[static_cast<size_t>(i)][j] <=
                  bound_scale * (1.0 + cum[static_cast<size_t>(i)][j]) + 1e-12);
    // the same forward pass is what pathwise_stieltjes computes for g = 1
    const auto totals = pathwise_stieltjes(tree, plan, ones);
    for (std::uint64_t j = 0; j < tree.slice_size(tree.n); ++j)
        CHECK(totals[j] == Catch::Approx(cum[static_cast<size_t>(tree.n)][j]).margin(1e-12));
}

TEST_CASE("pathwise integral against the state price reprices the budget") {
    const EventTree tree = small_tree(9);
    const ConsumptionPlan plan = random_plan(tree, 31);
    const auto leaf_values = pathwise_stieltjes(tree, plan, tree.psi);
    double expectation = 0.0;
    const auto& pr = tree.prob[static_cast<size_t>(tree.n)];
    for (std::uint64_t j = 0; j < tree.slice_size(tree.n); ++j)
        expectation += pr[j] * leaf_values[j];
    CHECK(expectation == Catch::Approx(budget(tree, plan)).margin(1e-12));
}

TEST_CASE("minimal level satisfaction dominates the level and the decay floor") {
    const EventTree tree = small_tree(9);
    const SatisfactionKernel kernel{0.25, 1.2};

    SECTION("very negative level gives pure decay") {
        const Field L = tree.make_field(-1e9);
        const Field Y = minimal_level_satisfaction(tree, L, kernel);
        for (int i = 0; i <= tree.n; ++i) {
            const double want = kernel.eta * std::exp(-kernel.beta * tree.t(i));
            for (double y : Y[static_cast<size_t>(i)])
                CHECK(y == Catch::Approx(want).margin(1e-13));
        }
    }

    SECTION("constant level at eta is held flat") {
        const SatisfactionKernel unit{0.25, 1.0};
        const Field L = tree.make_field(unit.eta);
        const Field Y = minimal_level_satisfaction(tree, L, unit);
        for (const auto& level : Y)
            for (double y : level) CHECK(y == Catch::Approx(unit.eta).margin(1e-14));
    }

    SECTION("random level: dominance and minimality") {
        std::mt19937_64 rng(5);
        std::uniform_real_distribution<double> u(0.0, 0.6);
        Field L = tree.make_field();
        for (auto& level : L)
            for (auto& v : level) v = u(rng);
        const Field Y = minimal_level_satisfaction(tree, L, kernel);
        const double decay = std::exp(-kernel.beta * tree.delta());
        for (int i = 0; i <= tree.n; ++i)
            for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
                CHECK(Y[static_cast<size_t>(i)][j] >= L[static_cast<size_t>(i)][j]);
                if (i > 0)  // never decays faster than the kernel allows
                    CHECK(Y[static_cast<size_t>(i)][j] >=
                          Y[static_cast<size_t>(i) - 1][j >> 1] * decay - 1e-14);
            }
        // any satisfaction process that supports its own path as a level is
        // reproduced exactly: Y^{Y^C} = Y^C
        const ConsumptionPlan plan = random_plan(tree, 41);
        const Field YC = satisfaction(tree, plan, kernel);
        CHECK(max_abs_diff(minimal_level_satisfaction(tree, YC, kernel), YC) < 1e-12);
    }
}

TEST_CASE("plan recovery from a level field") {
    const EventTree tree = small_tree(10);

    SECTION("level below the decay floor needs no consumption") {
        const SatisfactionKernel kernel{0.25, 1.2};
        const Field L = tree.make_field(0.0);
        const Field Y = minimal_level_satisfaction(tree, L, kernel);
        const ConsumptionPlan plan = plan_from_level(tree, Y, kernel);
        for (const auto& level : plan.lumps)
            for (double v : level) CHECK(v == 0.0);
        for (const auto& level : plan.rates)
            for (double v : level) CHECK(v == 0.0);
    }

    SECTION("flat level is financed by a constant rate") {
        const SatisfactionKernel kernel{0.3, 1.0};
        const Field Y = tree.make_field(kernel.eta);
        const ConsumptionPlan plan = plan_from_level(tree, Y, kernel);
        CHECK(plan.lumps[0][0] == 0.0);
        for (const auto& level : plan.lumps)
            for (double v : level) CHECK(v == Catch::Approx(0.0).margin(1e-15));
        for (const auto& level : plan.rates)
            for (double v : level) CHECK(v == Catch::Approx(kernel.eta).margin(1e-13));
        // cumulative consumption grows linearly: C_t = eta * t
        const auto totals = pathwise_stieltjes(tree, plan, tree.make_field(1.0));
        for (double v : totals) CHECK(v == Catch::Approx(kernel.eta * tree.market.T).margin(1e-12));
    }

    SECTION("upward jump at a jump node becomes a lump of size h / beta") {
        const SatisfactionKernel kernel{0.2, 1.4};
        const double h = 0.45;
        const double decay = std::exp(-kernel.beta * tree.delta());
        // pure decay everywhere, except one first-step jump child lifted by h
        Field Y = tree.make_field();
        Y[0][0] = kernel.eta;
        for (int i = 0; i < tree.n; ++i)
            for (std::uint64_t j = 0; j < tree.slice_size(i); ++j) {
                const double pre = Y[static_cast<size_t>(i)][j] * decay;
                Y[static_cast<size_t>(i) + 1][2 * j] = pre;
                Y[static_cast<size_t>(i) + 1][2 * j + 1] = pre + (i == 0 ? h : 0.0);
            }
        const ConsumptionPlan plan = plan_from_level(tree, Y, kernel);
        CHECK(plan.lumps[1][1] == Catch::Approx(h / kernel.beta).margin(1e-14));
        double other = 0.0;
        for (std::size_t i = 0; i < plan.lumps.size(); ++i)
            for (std::size_t j = 0; j < plan.lumps[i].size(); ++j)
                if (!(i == 1 && j == 1)) other += plan.lumps[i][j];
        for (const auto& level : plan.rates)
            for (double v : level) other += v;
        CHECK(other == 0.0);
    }

    SECTION("round trip through satisfaction stays within the step tolerance") {
        const SatisfactionKernel kernel{0.25, 1.2};
        std::mt19937_64 rng(17);
        std::uniform_real_distribution<double> u(0.1, 0.7);
        Field L = tree.make_field();
        for (std::size_t i = 0; i < L.size(); ++i) {
            const double t = tree.t(static_cast<int>(i));
            for (std::size_t j = 0; j < L[i].size(); ++j)
                L[i][j] = 0.3 + 0.2 * std::sin(3.0 * t) + 0.1 * u(rng) * tree.delta() +
                          0.05 * jump_count(j) * std::exp(-t);
        }
        const Field YL = minimal_level_satisfaction(tree, L, kernel);
        const ConsumptionPlan plan = plan_from_level(tree, YL, kernel);
        const Field YR = satisfaction(tree, plan, kernel);
        double scale = 0.0;
        for (const auto& level : YL)
            for (double v : level) scale = std::max(scale, std::abs(v));
        CHECK(max_abs_diff(YR, YL) <= 5.0 * tree.delta() * scale);
        // reconstruction never undershoots the level it finances
        for (std::size_t i = 0; i < YL.size(); ++i)
            for (std::size_t j = 0; j < YL[i].size(); ++j)
                CHECK(YR[i][j] >= YL[i][j] - 1e-10);
    }

    SECTION("fields that decay too fast are rejected") {
        const SatisfactionKernel kernel{0.25, 1.2};
        Field Y = satisfaction(tree, zero_plan(tree), kernel);
        for (auto& v : Y[5]) v *= 0.5;
        CHECK_THROWS_WITH(plan_from_level(tree, Y, kernel),
                          Catch::Matchers::ContainsSubstring("negative increment"));
        Field low = satisfaction(tree, zero_plan(tree), kernel);
        low[0][0] = kernel.eta - 1.0;
        CHECK_THROWS_AS(plan_from_level(tree, low, kernel), std::invalid_argument);
    }
}

TEST_CASE("plan CSV round trip is byte exact") {
    const EventTree tree = small_tree(6);
    ConsumptionPlan plan = random_plan(tree, 99);
    // awkward values that expose sloppy formatting
    plan.lumps[0][0] = 0.1;
    plan.lumps[1][1] = 1.0 / 3.0;
    plan.rates[2][3] = 6.02214076e23;
    plan.rates[1][0] = 5e-324;  // smallest subnormal double

    std::ostringstream first;
    write_plan_csv(first, tree, plan);
    std::istringstream in(first.str());
    const PlanCsv parsed = read_plan_csv(in);
    CHECK(parsed.n_steps == tree.n);

    std::ostringstream second;
    write_plan_csv(second, tree, parsed.plan);
    CHECK(first.str() == second.str());

    // parsed values equal the originals bit for bit
    for (int i = 0; i <= tree.n; ++i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j)
            CHECK(parsed.plan.lumps[static_cast<size_t>(i)][j] == plan.lumps[static_cast<size_t>(i)][j]);
    for (int i = 0; i < tree.n; ++i)
        for (std::uint64_t j = 0; j < tree.slice_size(i); ++j)
            CHECK(parsed.plan.rates[static_cast<size_t>(i)][j] == plan.rates[static_cast<size_t>(i)][j]);
}

TEST_CASE("plan CSV rejects malformed input") {
    auto read_str = [](const std::string& s) {
        std::istringstream is(s);
        return read_plan_csv(is);
    };
    CHECK_THROWS_WITH(read_str("step,pattern,lump,rate\n0,,0,0\n"),
                      Catch::Matchers::ContainsSubstring("header"));
    CHECK_THROWS_WITH(read_str("step,jump_pattern,lump,rate\n"),
                      Catch::Matchers::ContainsSubstring("no rows"));
    CHECK_THROWS_WITH(read_str("step,jump_pattern,lump,rate\n1,01,0,0\n"),
                      Catch::Matchers::ContainsSubstring("length"));
    CHECK_THROWS_WITH(read_str("step,jump_pattern,lump,rate\n1,x,0,0\n"),
                      Catch::Matchers::ContainsSubstring("jump_pattern"));
    CHECK_THROWS_AS(read_str("step,jump_pattern,lump,rate\n0,,abc,0\n"), std::exception);
    CHECK_THROWS_AS(read_str("step,jump_pattern,lump,rate\n0,,0\n"), std::runtime_error);
    // a missing node leaves an incomplete slice
    CHECK_THROWS_WITH(read_str("step,jump_pattern,lump,rate\n0,,0.5,0\n2,00,0,0\n"),
                      Catch::Matchers::ContainsSubstring("incomplete"));
}
