#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "coda/metrics.hpp"
#include "coda/rng.hpp"

using namespace coda;

namespace {

template <typename T>
Grid<T> random_grid(Shape s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    Rng rng(seed);
    Grid<T> g(s);
    for (auto& v : g.data) v = T(rng.uniform(lo, hi));
    return g;
}

// Reference partition sums computed the slow, obvious way: each pixel is
// assigned to its cell by searching the boundary sequence floor(k·dim/cells).
double gmae_oracle(const Grid<double>& pred, const Grid<double>& gt, int L) {
    const int cells = 1 << L;
    const int H = pred.shape.h, W = pred.shape.w;
    auto cell_of = [cells](int v, int dim) {
        for (int k = 0; k < cells; ++k) {
            const int lo = int((std::int64_t(k) * dim) / cells);
            const int hi = int((std::int64_t(k + 1) * dim) / cells);
            if (v >= lo && v < hi) return k;
        }
        FAIL("pixel not covered by any cell");
        return -1;
    };
    std::vector<double> sp(std::size_t(cells) * cells, 0.0), sg(sp);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const std::size_t cell =
                std::size_t(cell_of(y, H)) * cells + std::size_t(cell_of(x, W));
            sp[cell] += pred.at(0, 0, y, x);
            sg[cell] += gt.at(0, 0, y, x);
        }
    double total = 0;
    for (std::size_t i = 0; i < sp.size(); ++i) total += std::abs(sp[i] - sg[i]);
    return total;
}

}  // namespace

TEST_CASE("mae and mse match the closed forms", "[metrics]") {
    CHECK(mae({{3, 5}}) == 2.0);
    CHECK(mse({{3, 5}}) == 2.0);

    std::vector<CountPair> pairs = {{0, 3}, {0, 4}};
    CHECK(mae(pairs) == 3.5);
    CHECK(mse(pairs) == Catch::Approx(std::sqrt(12.5)).margin(1e-12));
    CHECK(mse(pairs) == Catch::Approx(3.5355339059327378).margin(1e-12));

    CHECK(mae({{7, 7}, {2, 2}}) == 0.0);
    CHECK_THROWS_AS(mae({}), std::invalid_argument);
    CHECK_THROWS_AS(mse({}), std::invalid_argument);

    SECTION("mse dominates mae (Jensen)") {
        Rng rng(55);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<CountPair> ps;
            for (int i = 0; i < 8; ++i) ps.push_back({rng.uniform(0, 50), rng.uniform(0, 50)});
            CHECK(mse(ps) >= mae(ps) - 1e-12);
        }
    }
}

TEST_CASE("level-zero grid error is the plain count difference", "[metrics]") {
    Rng rng(56);
    for (int trial = 0; trial < 100; ++trial) {
        const int h = 3 + int(rng.uniform_int(14));
        const int w = 3 + int(rng.uniform_int(14));
        Grid<double> p = random_grid<double>(Shape{1, 1, h, w}, mix_seed(56, trial, 0));
        Grid<double> g = random_grid<double>(Shape{1, 1, h, w}, mix_seed(56, trial, 1));
        CHECK(gmae(p, g, 0) ==
              Catch::Approx(std::abs(grid_sum(p) - grid_sum(g))).margin(1e-12));
    }
}

TEST_CASE("grid error localizes misplaced mass", "[metrics]") {
    // equal totals, mass in opposite corners: L=0 sees nothing, L=1 sees both
    Grid<double> p(Shape{1, 1, 4, 4}, 0.0);
    Grid<double> g(Shape{1, 1, 4, 4}, 0.0);
    p.at(0, 0, 0, 0) = 1.0;  // top-left quadrant
    g.at(0, 0, 3, 3) = 1.0;  // bottom-right quadrant
    CHECK(gmae(p, g, 0) == 0.0);
    CHECK(gmae(p, g, 1) == 2.0);

    CHECK(gmae(p, p, 0) == 0.0);
    CHECK(gmae(p, p, 1) == 0.0);
    CHECK(gmae(p, p, 2) == 0.0);
}

TEST_CASE("grid error is non-decreasing in the level", "[metrics]") {
    Rng rng(57);
    for (int trial = 0; trial < 20; ++trial) {
        const int h = 8 + int(rng.uniform_int(25));  // deliberately non-divisible sizes
        const int w = 8 + int(rng.uniform_int(25));
        Grid<double> p = random_grid<double>(Shape{1, 1, h, w}, mix_seed(57, trial, 0));
        Grid<double> g = random_grid<double>(Shape{1, 1, h, w}, mix_seed(57, trial, 1));
        double prev = -1;
        for (int L = 0; L <= 3; ++L) {
            const double v = gmae(p, g, L);
            CHECK(v >= prev - 1e-12);
            CHECK(v == Catch::Approx(gmae_oracle(p, g, L)).margin(1e-9));
            prev = v;
        }
    }
}

TEST_CASE("grid error validates its inputs", "[metrics]") {
    Grid<double> a(Shape{1, 1, 4, 4}), b(Shape{1, 1, 4, 5});
    CHECK_THROWS_AS(gmae(a, b, 0), std::invalid_argument);
    CHECK_THROWS_AS(gmae(a, a, -1), std::invalid_argument);
    // 4×4 cannot host 8×8 cells
    CHECK_THROWS_WITH(gmae(a, a, 3), Catch::Matchers::ContainsSubstring("smaller"));
    Grid<double> roi(Shape{1, 1, 4, 5});
    CHECK_THROWS_AS(gmae(a, a, 0, &roi), std::invalid_argument);
}

TEST_CASE("roi masks the grid error", "[metrics]") {
    Grid<double> p(Shape{1, 1, 4, 4}, 0.0);
    Grid<double> g(Shape{1, 1, 4, 4}, 0.0);
    p.at(0, 0, 0, 0) = 3.0;
    g.at(0, 0, 0, 1) = 1.0;
    Grid<double> full(Shape{1, 1, 4, 4}, 1.0);
    Grid<double> none(Shape{1, 1, 4, 4}, 0.0);
    CHECK(gmae(p, g, 0, &full) == 2.0);
    CHECK(gmae(p, g, 0, &none) == 0.0);

    // mask out just the column holding the prediction's mass
    Grid<double> partial(Shape{1, 1, 4, 4}, 1.0);
    for (int y = 0; y < 4; ++y) partial.at(0, 0, y, 0) = 0.0;
    CHECK(gmae(p, g, 0, &partial) == 1.0);
}

TEST_CASE("evaluation aggregates per-image metrics", "[metrics]") {
    std::vector<EvalItem> items;
    {
        EvalItem it;
        it.pred = Grid<double>(Shape{1, 1, 4, 4}, 0.0);
        it.gt = Grid<double>(Shape{1, 1, 4, 4}, 0.0);
        it.pred.at(0, 0, 0, 0) = 3.0;  // pred count 3, gt 0
        items.push_back(std::move(it));
    }
    {
        EvalItem it;
        it.pred = Grid<double>(Shape{1, 1, 4, 4}, 0.0);
        it.gt = Grid<double>(Shape{1, 1, 4, 4}, 0.25);  // gt count 4, pred 0
        items.push_back(std::move(it));
    }
    EvalReport rep = evaluate_maps("toy", items, {0, 1});
    CHECK(rep.n_images == 2);
    CHECK(rep.mae_value == 3.5);
    CHECK(rep.mse_value == Catch::Approx(std::sqrt(12.5)).margin(1e-12));
    CHECK(rep.gmae_values.at(0) == Catch::Approx(3.5).margin(1e-12));
    CHECK(rep.gmae_values.at(1) >= rep.gmae_values.at(0) - 1e-12);

    SECTION("report serializes with the expected keys") {
        nlohmann::json j = report_json(rep);
        CHECK(j.at("dataset") == "toy");
        CHECK(j.at("n_images") == 2);
        CHECK(j.at("mae").get<double>() == 3.5);
        CHECK(j.at("mse").get<double>() == Catch::Approx(std::sqrt(12.5)).margin(1e-12));
        CHECK(j.at("gmae").at("0").get<double>() == Catch::Approx(3.5).margin(1e-12));
        CHECK(j.at("gmae").contains("1"));
    }
    SECTION("identical maps give a zero report") {
        std::vector<EvalItem> same;
        EvalItem it;
        it.pred = random_grid<double>(Shape{1, 1, 8, 8}, 58);
        it.gt = it.pred;
        same.push_back(std::move(it));
        EvalReport r2 = evaluate_maps("same", same, {0, 1, 2});
        CHECK(r2.mae_value == 0.0);
        CHECK(r2.mse_value == 0.0);
        for (const auto& [L, v] : r2.gmae_values) CHECK(v == 0.0);
    }
    SECTION("empty evaluation is rejected") {
        CHECK_THROWS_AS(evaluate_maps("x", {}, {0}), std::invalid_argument);
    }
}
