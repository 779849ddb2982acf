#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "coda/losses.hpp"
#include "coda/nets.hpp"
#include "coda/optim.hpp"
#include "coda/rng.hpp"

using namespace coda;

namespace {

template <typename T>
Grid<T> random_grid(Shape s, std::uint64_t seed, double lo, double hi) {
    Rng rng(seed);
    Grid<T> g(s);
    for (auto& v : g.data) v = T(rng.uniform(lo, hi));
    return g;
}

}  // namespace

TEST_CASE("density loss matches the closed forms", "[losses]") {
    SECTION("identical maps give zero") {
        Grid<double> a = random_grid<double>(Shape{2, 1, 4, 4}, 1, 0, 1);
        CHECK(density_loss(a, a) == 0.0);
    }
    SECTION("single pixel off by two") {
        Grid<double> pred(Shape{1, 1, 2, 2}, 0.0);
        Grid<double> gt(Shape{1, 1, 2, 2}, 0.0);
        pred.at(0, 0, 0, 1) = 2.0;
        CHECK(density_loss(pred, gt) == 2.0);  // (1/2)·4
    }
    SECTION("batch of two with squared norms 4 and 16") {
        Grid<double> pred(Shape{2, 1, 1, 4}, 0.0);
        Grid<double> gt(Shape{2, 1, 1, 4}, 0.0);
        pred.at(0, 0, 0, 0) = 2.0;                            // ||·||² = 4
        for (int x = 0; x < 4; ++x) pred.at(1, 0, 0, x) = 2;  // ||·||² = 16
        CHECK(density_loss(pred, gt) == 5.0);                 // 20 / (2·2)

        // the list form agrees
        Grid<double> p0(Shape{1, 1, 1, 4}, 0.0), p1(Shape{1, 1, 1, 4}, 2.0);
        p0.at(0, 0, 0, 0) = 2.0;
        Grid<double> z(Shape{1, 1, 1, 4}, 0.0);
        CHECK(density_loss<double>({p0, p1}, {z, z}) == 5.0);
    }
    SECTION("shape mismatch is rejected") {
        Grid<double> a(Shape{1, 1, 2, 2}), b(Shape{1, 1, 2, 3});
        CHECK_THROWS_AS(density_loss(a, b), std::invalid_argument);
    }
    SECTION("non-negative, zero only at equality") {
        Grid<double> a = random_grid<double>(Shape{1, 1, 3, 3}, 2, 0, 1);
        Grid<double> b = random_grid<double>(Shape{1, 1, 3, 3}, 3, 0, 1);
        CHECK(density_loss(a, b) > 0.0);
    }
}

TEST_CASE("discriminator loss at indifference is log 2", "[losses]") {
    std::vector<Grid<double>> src = {Grid<double>(Shape{1, 1, 2, 2}, 0.0)};
    std::vector<Grid<double>> tgt = {Grid<double>(Shape{1, 1, 2, 2}, 0.0)};
    CHECK(discriminator_loss(src, tgt) == Catch::Approx(std::log(2.0)).margin(1e-12));

    SECTION("perfect classification drives it toward zero") {
        std::vector<Grid<double>> s2 = {Grid<double>(Shape{1, 1, 2, 2}, 50.0)};
        std::vector<Grid<double>> t2 = {Grid<double>(Shape{1, 1, 2, 2}, -50.0)};
        CHECK(discriminator_loss(s2, t2) < 1e-20);
    }
    SECTION("swapped labels on separable logits increase the loss") {
        std::vector<Grid<double>> s2 = {Grid<double>(Shape{1, 1, 2, 2}, 3.0)};
        std::vector<Grid<double>> t2 = {Grid<double>(Shape{1, 1, 2, 2}, -3.0)};
        CHECK(discriminator_loss(t2, s2) > discriminator_loss(s2, t2));
    }
    SECTION("finite at extreme logits") {
        std::vector<Grid<double>> s2 = {Grid<double>(Shape{1, 1, 2, 2}, 1e4)};
        std::vector<Grid<double>> t2 = {Grid<double>(Shape{1, 1, 2, 2}, -1e4)};
        CHECK(std::isfinite(discriminator_loss(s2, t2)));
        CHECK(std::isfinite(discriminator_loss(t2, s2)));
        CHECK(discriminator_loss(t2, s2) == Catch::Approx(1e4).epsilon(1e-9));
    }
    SECTION("empty and mismatched lists are rejected") {
        std::vector<Grid<double>> e;
        CHECK_THROWS_AS(discriminator_loss(e, e), std::invalid_argument);
        CHECK_THROWS_AS(discriminator_loss(src, e), std::invalid_argument);
    }
}

TEST_CASE("adversarial loss at indifference is half log 2", "[losses]") {
    std::vector<Grid<double>> tgt = {Grid<double>(Shape{1, 1, 3, 3}, 0.0)};
    CHECK(adversarial_loss(tgt) == Catch::Approx(0.5 * std::log(2.0)).margin(1e-12));

    SECTION("a fooled discriminator gives near-zero loss") {
        std::vector<Grid<double>> t2 = {Grid<double>(Shape{1, 1, 3, 3}, 60.0)};
        CHECK(adversarial_loss(t2) < 1e-20);
    }
    SECTION("finite at large negative logits, growing linearly") {
        std::vector<Grid<double>> t2 = {Grid<double>(Shape{1, 1, 1, 1}, -1e4)};
        CHECK(adversarial_loss(t2) == Catch::Approx(0.5 * 1e4).epsilon(1e-9));
    }
    SECTION("empty list is rejected") {
        std::vector<Grid<double>> e;
        CHECK_THROWS_AS(adversarial_loss(e), std::invalid_argument);
    }
    SECTION("averages over maps, not pixels across maps") {
        // two maps of different sizes, both constant: per-map means average
        std::vector<Grid<double>> t2 = {Grid<double>(Shape{1, 1, 1, 1}, 0.0),
                                        Grid<double>(Shape{1, 1, 4, 4}, 0.0)};
        CHECK(adversarial_loss(t2) == Catch::Approx(0.5 * std::log(2.0)).margin(1e-12));
    }
}

TEST_CASE("ranking loss penalizes order violations", "[losses]") {
    CHECK(ranking_loss({1, 2, 3, 4}) == 0.0);
    CHECK(ranking_loss({5, 3}) == 2.0);
    CHECK(ranking_loss({3, 1, 2}) == 3.0);
    CHECK(ranking_loss({7}) == 0.0);
    CHECK(ranking_loss({}) == 0.0);

    SECTION("margin shifts the hinge") {
        CHECK(ranking_loss({1, 2}, 0.5) == 0.0);
        CHECK(ranking_loss({1, 1.2}, 0.5) == Catch::Approx(0.3).margin(1e-12));
    }
    SECTION("non-negative, zero iff non-decreasing") {
        Rng rng(404);
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<double> counts;
            const int n = 2 + int(rng.uniform_int(4));
            for (int i = 0; i < n; ++i) counts.push_back(rng.uniform(0, 10));
            const double loss = ranking_loss(counts);
            CHECK(loss >= 0.0);
            const bool sorted = std::is_sorted(counts.begin(), counts.end());
            CHECK((loss == 0.0) == sorted);
        }
    }
    SECTION("invariant to a constant shift") {
        std::vector<double> base = {4.0, 1.5, 9.0, 2.5};
        std::vector<double> shifted;
        for (double c : base) shifted.push_back(c + 123.25);
        CHECK(ranking_loss(shifted) == Catch::Approx(ranking_loss(base)).margin(1e-9));
    }
}

TEST_CASE("predicted count integrates the map", "[losses]") {
    Grid<double> zero(Shape{1, 1, 4, 4}, 0.0);
    CHECK(predicted_count(zero) == 0.0);

    Grid<double> d(Shape{1, 1, 2, 2}, 0.0);
    d.data = {1.0, 2.25, 3.0, 1.0};
    CHECK(predicted_count(d) == 7.25);

    Grid<double> ones(Shape{1, 1, 4, 4}, 1.0);
    Grid<double> roi(Shape{1, 1, 4, 4}, 0.0);
    for (int i = 0; i < 5; ++i) roi.data[std::size_t(i) * 3] = 1.0;  // five cells
    CHECK(predicted_count(ones, &roi) == 5.0);

    Grid<double> bad(Shape{1, 1, 2, 2}, 1.0);
    CHECK_THROWS_AS(predicted_count(ones, &bad), std::invalid_argument);
}

TEST_CASE("combined objective is the weighted sum", "[losses]") {
    LossWeights w;  // λ2 = λ3 = 0.001
    CHECK(combined_generator_loss(5.0, 0.3466, 3.0, w) ==
          Catch::Approx(5.0033466).margin(1e-12));

    LossWeights off;
    off.lambda2 = 0.0;
    off.lambda3 = 0.0;
    CHECK(combined_generator_loss(1.75, 99.0, 99.0, off) == 1.75);
}

TEST_CASE("tape losses agree with the plain evaluations", "[losses]") {
    Tape<double> tape;

    SECTION("density") {
        Grid<double> p0 = random_grid<double>(Shape{1, 1, 3, 3}, 31, 0, 1);
        Grid<double> p1 = random_grid<double>(Shape{1, 1, 3, 3}, 32, 0, 1);
        Grid<double> g0 = random_grid<double>(Shape{1, 1, 3, 3}, 33, 0, 1);
        Grid<double> g1 = random_grid<double>(Shape{1, 1, 3, 3}, 34, 0, 1);
        Var loss =
            density_loss_tape(tape, {tape.leaf(p0), tape.leaf(p1)}, {g0, g1});
        CHECK(tape.value(loss).data[0] ==
              Catch::Approx(density_loss<double>({p0, p1}, {g0, g1})).margin(1e-12));
    }
    SECTION("discriminator and adversarial") {
        Grid<double> s = random_grid<double>(Shape{1, 1, 2, 2}, 35, -3, 3);
        Grid<double> t = random_grid<double>(Shape{1, 1, 2, 2}, 36, -3, 3);
        Var ld = discriminator_loss_tape(tape, {tape.leaf(s)}, {tape.leaf(t)});
        CHECK(tape.value(ld).data[0] ==
              Catch::Approx(discriminator_loss<double>({s}, {t})).margin(1e-12));
        Var la = adversarial_loss_tape(tape, {tape.leaf(t)});
        CHECK(tape.value(la).data[0] ==
              Catch::Approx(adversarial_loss<double>({t})).margin(1e-12));
    }
    SECTION("ranking") {
        std::vector<double> counts = {3.0, 1.0, 2.0};
        std::vector<Var> vars;
        for (double c : counts) vars.push_back(tape.leaf(Grid<double>::scalar(c)));
        Var lr = ranking_loss_tape(tape, vars, 0.0);
        CHECK(tape.value(lr).data[0] == Catch::Approx(3.0).margin(1e-12));
        // gradient: d/dc of Σ hinges — c0 appears in two active hinges
        tape.backward(lr);
        CHECK(tape.grad(vars[0]).data[0] == 2.0);
        CHECK(tape.grad(vars[1]).data[0] == -1.0);
        CHECK(tape.grad(vars[2]).data[0] == -1.0);
    }
    SECTION("combined") {
        LossWeights w;
        Var c = combined_generator_loss_tape(
            tape, tape.leaf(Grid<double>::scalar(5.0)), tape.leaf(Grid<double>::scalar(0.3466)),
            tape.leaf(Grid<double>::scalar(3.0)), w);
        CHECK(tape.value(c).data[0] == Catch::Approx(5.0033466).margin(1e-12));
    }
}

TEST_CASE("loss gradients match finite differences", "[losses][gradcheck]") {
    SECTION("density") {
        Grid<double> gt = random_grid<double>(Shape{1, 1, 3, 3}, 41, 0, 1);
        std::vector<Grid<double>> leaves = {random_grid<double>(Shape{1, 1, 3, 3}, 42, 0, 1)};
        auto build = [&](Tape<double>& tape, const std::vector<Var>& vars) {
            return density_loss_tape(tape, {vars[0]}, {gt});
        };
        CHECK(grad_check(build, leaves) < 1e-6);
    }
    SECTION("discriminator + adversarial from logits") {
        std::vector<Grid<double>> leaves = {random_grid<double>(Shape{1, 1, 2, 3}, 43, -2, 2),
                                            random_grid<double>(Shape{1, 1, 2, 3}, 44, -2, 2)};
        auto build = [&](Tape<double>& tape, const std::vector<Var>& vars) {
            Var ld = discriminator_loss_tape(tape, {vars[0]}, {vars[1]});
            Var la = adversarial_loss_tape(tape, {vars[1]});
            return tape.add(ld, la);
        };
        CHECK(grad_check(build, leaves) < 1e-6);
    }
    SECTION("ranking through counts off the hinge") {
        std::vector<Grid<double>> leaves = {Grid<double>::scalar(3.0), Grid<double>::scalar(1.0),
                                            Grid<double>::scalar(2.0)};
        auto build = [&](Tape<double>& tape, const std::vector<Var>& vars) {
            return ranking_loss_tape(tape, vars, 0.0);
        };
        CHECK(grad_check(build, leaves) < 1e-6);
    }
}

TEST_CASE("a small generator step does not increase the combined loss", "[losses]") {
    // Ten seeded trials of one tiny gradient step on a miniature pyramid batch;
    // hinge kinks may spoil at most one.
    const CountingNetConfig cfg = [] {
        CountingNetConfig c;
        c.front_blocks = {{3}, {4}};
        c.backend_channels = 4;
        c.backend_dilation = 2;
        return c;
    }();
    const DiscriminatorConfig dcfg = [] {
        DiscriminatorConfig c;
        c.channels = {2, 2, 2, 2, 1};
        return c;
    }();
    const LossWeights w;  // defaults: 0.001 each

    int failures = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto cn = init_params<double>(counting_layers(cfg), mix_seed(seed, 1));
        auto disc = init_params<double>(discriminator_layers(dcfg), mix_seed(seed, 2));
        // two source crops with targets, two target crops
        std::vector<Grid<double>> src_in, src_gt, tgt_in;
        for (int i = 0; i < 2; ++i) {
            src_in.push_back(random_grid<double>(Shape{1, 1, 16, 16}, mix_seed(seed, 10 + i), 0, 1));
            src_gt.push_back(
                random_grid<double>(Shape{1, 1, 4, 4}, mix_seed(seed, 20 + i), 0, 0.3));
            tgt_in.push_back(random_grid<double>(Shape{1, 1, 16, 16}, mix_seed(seed, 30 + i), 0, 1));
        }

        auto eval_loss = [&](const ModelParams<double>& p, bool with_grad,
                             std::vector<Grid<double>>* grads) {
            Tape<double> tape;
            auto vars = leaf_params(tape, p);
            std::vector<Var> dvars;
            for (const auto& g : disc.grids) dvars.push_back(tape.leaf(g));
            std::vector<Var> src_out, adv_logits;
            std::vector<Var> src_counts, tgt_counts;
            for (const auto& x : src_in) {
                Var d = counting_forward(tape, cfg, vars, tape.leaf(x));
                src_out.push_back(d);
                src_counts.push_back(tape.grid_sum(d));
            }
            for (const auto& x : tgt_in) {
                Var d = counting_forward(tape, cfg, vars, tape.leaf(x));
                Var up = tape.resize_bilinear(d, 32, 32);
                adv_logits.push_back(discriminator_forward(tape, dcfg, dvars, up));
                tgt_counts.push_back(tape.grid_sum(d));
            }
            Var l_dens = density_loss_tape(tape, src_out, src_gt);
            Var l_adv = adversarial_loss_tape(tape, adv_logits);
            Var l_rank =
                tape.add(ranking_loss_tape(tape, src_counts), ranking_loss_tape(tape, tgt_counts));
            Var total = combined_generator_loss_tape(tape, l_dens, l_adv, l_rank, w);
            const double v = tape.value(total).data[0];
            if (with_grad) {
                tape.backward(total);
                grads->clear();
                for (Var pv : vars) grads->push_back(tape.grad(pv));
            }
            return v;
        };

        std::vector<Grid<double>> grads;
        const double before = eval_loss(cn, true, &grads);
        sgd_step(cn, grads, 1e-6);
        const double after = eval_loss(cn, false, nullptr);
        if (!(after <= before + 1e-15)) ++failures;
    }
    CHECK(failures <= 1);
}
