#include <catch2/catch_amalgamated.hpp>

#include "coda/grid.hpp"
#include "coda/rng.hpp"

using namespace coda;

TEST_CASE("shape arithmetic and validation", "[grid]") {
    Shape s{2, 3, 4, 5};
    CHECK(s.numel() == 120);
    CHECK(s == (Shape{2, 3, 4, 5}));
    CHECK_FALSE(s == (Shape{2, 3, 4, 6}));

    CHECK_THROWS_AS(Grid<double>(Shape{0, 1, 1, 1}), std::invalid_argument);
    CHECK_THROWS_AS(Grid<double>(Shape{1, 1, -2, 1}), std::invalid_argument);

    Grid<double> g(Shape{1, 2, 3, 4}, 1.5);
    CHECK(g.numel() == 24);
    CHECK(g.data.size() == 24);
    for (double v : g.data) CHECK(v == 1.5);
}

TEST_CASE("element addressing is row-major within planes", "[grid]") {
    Grid<double> g(Shape{2, 2, 2, 3});
    double v = 0;
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 2; ++c)
            for (int y = 0; y < 2; ++y)
                for (int x = 0; x < 3; ++x) g.at(n, c, y, x) = v++;
    // flat layout matches the loop nest above
    for (std::size_t i = 0; i < g.data.size(); ++i) CHECK(g.data[i] == double(i));
    CHECK(g.plane(1, 1)[0] == g.at(1, 1, 0, 0));
}

TEST_CASE("grid_sum basics", "[grid]") {
    CHECK(grid_sum(Grid<double>(Shape{1, 1, 4, 4}, 0.0)) == 0.0);
    Grid<double> g(Shape{1, 1, 2, 2});
    g.data = {1, 2, 3, 4};
    CHECK(grid_sum(g) == 10.0);
}

TEST_CASE("grid_sum is compensated", "[grid]") {
    // naive float-order summation would lose the small terms entirely
    Grid<double> g(Shape{1, 1, 1, 1001});
    g.data.assign(1001, 1e-16);
    g.data[0] = 1.0;
    CHECK(grid_sum(g) == Catch::Approx(1.0 + 1000e-16).epsilon(1e-15));
}

TEST_CASE("block_sum_downsample identity and 2x2", "[grid]") {
    Grid<double> g(Shape{1, 1, 2, 2}, 1.0);
    Grid<double> same = block_sum_downsample(g, 1);
    CHECK(same.shape == g.shape);
    CHECK(same.data == g.data);

    Grid<double> d = block_sum_downsample(g, 2);
    CHECK(d.shape == (Shape{1, 1, 1, 1}));
    CHECK(d.data[0] == 4.0);

    CHECK_THROWS_AS(block_sum_downsample(Grid<double>(Shape{1, 1, 3, 4}), 2),
                    std::invalid_argument);
}

TEST_CASE("block_sum_downsample conserves mass on random grids", "[grid]") {
    Rng rng(123);
    for (int trial = 0; trial < 10; ++trial) {
        Grid<double> g(Shape{2, 1, 8, 12});
        for (auto& v : g.data) v = rng.uniform(-3.0, 3.0);
        for (int f : {1, 2, 4}) {
            Grid<double> d = block_sum_downsample(g, f);
            CHECK(grid_sum(d) == Catch::Approx(grid_sum(g)).epsilon(1e-12));
        }
    }
}

TEST_CASE("block_mean_downsample averages blocks", "[grid]") {
    Grid<double> g(Shape{1, 1, 2, 2});
    g.data = {1, 2, 3, 4};
    Grid<double> m = block_mean_downsample(g, 2);
    CHECK(m.data[0] == 2.5);
}

TEST_CASE("hadamard requires matching shapes", "[grid]") {
    Grid<double> a(Shape{1, 1, 2, 2}, 2.0);
    Grid<double> b(Shape{1, 1, 2, 2}, 3.0);
    Grid<double> c = hadamard(a, b);
    for (double v : c.data) CHECK(v == 6.0);
    CHECK_THROWS_AS(hadamard(a, Grid<double>(Shape{1, 1, 2, 3})), std::invalid_argument);
}

TEST_CASE("cast converts element type", "[grid]") {
    Grid<double> g(Shape{1, 1, 1, 3});
    g.data = {1.25, -2.5, 3.75};
    Grid<float> f = cast<float>(g);
    CHECK(f.shape == g.shape);
    CHECK(f.data[0] == 1.25f);
    CHECK(f.data[2] == 3.75f);
}

TEST_CASE("all_finite detects NaN and Inf", "[grid]") {
    Grid<double> g(Shape{1, 1, 1, 3}, 1.0);
    CHECK(all_finite(g));
    g.data[1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_FALSE(all_finite(g));
    g.data[1] = std::numeric_limits<double>::infinity();
    CHECK_FALSE(all_finite(g));
}

TEST_CASE("rng streams are deterministic and distinct", "[grid][rng]") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        double x = a.uniform();
        CHECK(x == b.uniform());
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
    }
    CHECK(a.next_u64() != c.next_u64());

    CHECK(mix_seed(1, 2, 3) == mix_seed(1, 2, 3));
    CHECK(mix_seed(1, 2, 3) != mix_seed(1, 2, 4));
    CHECK(mix_seed(1, 2, 3) != mix_seed(1, 3, 2));
}

TEST_CASE("rng normal moments and poisson mean", "[grid][rng]") {
    Rng rng(7);
    const int n = 200000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
        double x = rng.normal();
        sum += x;
        sumsq += x * x;
    }
    CHECK(sum / n == Catch::Approx(0.0).margin(0.02));
    CHECK(sumsq / n == Catch::Approx(1.0).margin(0.03));

    double psum = 0;
    for (int i = 0; i < 20000; ++i) psum += double(rng.poisson(4.5));
    CHECK(psum / 20000 == Catch::Approx(4.5).margin(0.15));
}

TEST_CASE("rng uniform_int is unbiased at small ranges", "[grid][rng]") {
    Rng rng(99);
    int counts[5] = {0, 0, 0, 0, 0};
    const int n = 100000;
    for (int i = 0; i < n; ++i) counts[rng.uniform_int(5)]++;
    for (int k = 0; k < 5; ++k)
        CHECK(double(counts[k]) / n == Catch::Approx(0.2).margin(0.01));
}
