#pragma once

// Finite-difference verification suite covering every differentiable
// operation and both full network graphs. Shared by the `gradcheck` command
// and the release gate.

#include <string>
#include <utility>
#include <vector>

#include "coda/losses.hpp"
#include "coda/nets.hpp"
#include "coda/tape.hpp"

namespace coda {

struct GradSuiteResult {
    std::string name;
    GradCheckReport report;
};

namespace detail {

inline Grid<double> rnd_grid(const Shape& s, std::uint64_t seed, double lo = -1.0,
                             double hi = 1.0) {
    Grid<double> g(s);
    Rng rng(seed);
    for (auto& v : g.data) v = rng.uniform(lo, hi);
    return g;
}

// Fresh He-init weights can leave every pre-activation of the final ReLU
// negative, which zeroes all gradients and makes the check vacuous. A small
// positive bias pushes part of each layer's activations across zero so real
// gradient signal reaches every parameter.
inline void bias_up(ModelParams<double>& p, double value) {
    for (std::size_t i = 0; i < p.count(); ++i)
        if (p.names[i].ends_with(".b"))
            for (auto& v : p.grids[i].data) v = value;
}

}  // namespace detail

// Runs the whole suite, or just the entry named by `only`. An unknown name
// yields an empty result vector.
inline std::vector<GradSuiteResult> gradient_suite(const std::string& only = "") {
    using detail::rnd_grid;
    std::vector<GradSuiteResult> results;

    auto run = [&](const std::string& name, auto&& build, std::vector<Grid<double>> params,
                   GradCheckOptions opt = {}) {
        if (!only.empty() && only != name) return;
        results.push_back({name, grad_check_report(build, std::move(params), opt)});
    };

    // ---- elementary operations ----
    {
        Grid<double> target = rnd_grid(Shape{1, 3, 7, 7}, 100);
        run(
            "conv2d",
            [target](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(t.conv2d(v[0], v[1], v[2], 1, 1, 1), target);
            },
            {rnd_grid(Shape{1, 2, 7, 7}, 1), rnd_grid(Shape{3, 2, 3, 3}, 2),
             rnd_grid(Shape{1, 1, 1, 3}, 3)});
    }
    {
        Grid<double> target = rnd_grid(Shape{1, 2, 6, 6}, 101);
        run(
            "conv2d_strided",
            [target](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(t.conv2d(v[0], v[1], v[2], 2, 1, 1), target);
            },
            {rnd_grid(Shape{1, 2, 12, 12}, 4), rnd_grid(Shape{2, 2, 4, 4}, 5),
             rnd_grid(Shape{1, 1, 1, 2}, 6)});
    }
    {
        Grid<double> target = rnd_grid(Shape{1, 2, 9, 9}, 102);
        run(
            "conv2d_dilated",
            [target](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(t.conv2d(v[0], v[1], v[2], 1, 2, 2), target);
            },
            {rnd_grid(Shape{1, 2, 9, 9}, 7), rnd_grid(Shape{2, 2, 3, 3}, 8),
             rnd_grid(Shape{1, 1, 1, 2}, 9)});
    }
    {
        Grid<double> target = rnd_grid(Shape{1, 2, 6, 6}, 103);
        run(
            "relu",
            [target](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(t.relu(v[0]), target);
            },
            {rnd_grid(Shape{1, 2, 6, 6}, 10)});
        run(
            "leaky_relu",
            [target](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(t.leaky_relu(v[0], 0.2), target);
            },
            {rnd_grid(Shape{1, 2, 6, 6}, 11)});
    }
    {
        Grid<double> target = rnd_grid(Shape{1, 2, 4, 4}, 104);
        run(
            "maxpool2",
            [target](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(t.maxpool2(v[0]), target);
            },
            {rnd_grid(Shape{1, 2, 8, 8}, 12)});
    }
    {
        Grid<double> target = rnd_grid(Shape{1, 2, 11, 9}, 105);
        run(
            "resize_bilinear",
            [target](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(t.resize_bilinear(v[0], 11, 9), target);
            },
            {rnd_grid(Shape{1, 2, 6, 5}, 13)});
    }
    {
        Grid<double> target = rnd_grid(Shape{1, 1, 4, 4}, 106);
        run(
            "block_sum_downsample",
            [target](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(t.block_sum_downsample(v[0], 2), target);
            },
            {rnd_grid(Shape{1, 1, 8, 8}, 14)});
    }
    {
        Grid<double> target = rnd_grid(Shape{1, 1, 1, 1}, 107);
        run(
            "grid_sum",
            [target](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(t.grid_sum(v[0]), target);
            },
            {rnd_grid(Shape{1, 1, 5, 5}, 15)});
    }
    {
        Grid<double> target = rnd_grid(Shape{1, 1, 4, 4}, 108);
        run(
            "add",
            [target](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(t.add(v[0], v[1]), target);
            },
            {rnd_grid(Shape{1, 1, 4, 4}, 16), rnd_grid(Shape{1, 1, 4, 4}, 17)});
        run(
            "sub",
            [target](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(t.sub(v[0], v[1]), target);
            },
            {rnd_grid(Shape{1, 1, 4, 4}, 18), rnd_grid(Shape{1, 1, 4, 4}, 19)});
        run(
            "scale",
            [target](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(t.scale(v[0], 1.7), target);
            },
            {rnd_grid(Shape{1, 1, 4, 4}, 20)});
        run(
            "add_const",
            [target](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(t.add_const(v[0], 0.3), target);
            },
            {rnd_grid(Shape{1, 1, 4, 4}, 21)});
        Grid<double> mask = rnd_grid(Shape{1, 1, 4, 4}, 22);
        run(
            "mul_const",
            [target, mask](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(t.mul_const(v[0], mask), target);
            },
            {rnd_grid(Shape{1, 1, 4, 4}, 23)});
        run(
            "sum_sq_diff",
            [target](Tape<double>& t, const std::vector<Var>& v) {
                return t.sum_sq_diff(v[0], target);
            },
            {rnd_grid(Shape{1, 1, 4, 4}, 24)});
    }
    run(
        "bce_logits_mean",
        [](Tape<double>& t, const std::vector<Var>& v) {
            return t.add(t.bce_logits_mean(v[0], 1.0), t.bce_logits_mean(v[1], 0.0));
        },
        {rnd_grid(Shape{1, 1, 4, 4}, 25, -2, 2), rnd_grid(Shape{1, 1, 4, 4}, 26, -2, 2)});

    // ---- loss heads over leaf maps ----
    {
        std::vector<Grid<double>> gts = {rnd_grid(Shape{1, 1, 4, 4}, 110, 0, 1),
                                         rnd_grid(Shape{1, 1, 4, 4}, 111, 0, 1)};
        run(
            "density_loss",
            [gts](Tape<double>& t, const std::vector<Var>& v) {
                return density_loss_tape(t, {v[0], v[1]}, gts);
            },
            {rnd_grid(Shape{1, 1, 4, 4}, 27, 0, 1), rnd_grid(Shape{1, 1, 4, 4}, 28, 0, 1)});
    }
    run(
        "discriminator_loss",
        [](Tape<double>& t, const std::vector<Var>& v) {
            return discriminator_loss_tape(t, {v[0], v[1]}, {v[2], v[3]});
        },
        {rnd_grid(Shape{1, 1, 3, 3}, 29, -2, 2), rnd_grid(Shape{1, 1, 3, 3}, 30, -2, 2),
         rnd_grid(Shape{1, 1, 3, 3}, 31, -2, 2), rnd_grid(Shape{1, 1, 3, 3}, 32, -2, 2)});
    run(
        "adversarial_loss",
        [](Tape<double>& t, const std::vector<Var>& v) {
            return adversarial_loss_tape(t, {v[0], v[1]});
        },
        {rnd_grid(Shape{1, 1, 3, 3}, 33, -2, 2), rnd_grid(Shape{1, 1, 3, 3}, 34, -2, 2)});
    run(
        "ranking_loss",
        [](Tape<double>& t, const std::vector<Var>& v) {
            std::vector<Var> counts;
            for (Var m : v) counts.push_back(t.grid_sum(m));
            return ranking_loss_tape(t, counts, 0.0);
        },
        {rnd_grid(Shape{1, 1, 3, 3}, 35, 0, 1), rnd_grid(Shape{1, 1, 3, 3}, 36, 0, 1),
         rnd_grid(Shape{1, 1, 3, 3}, 37, 0, 1)});

    // ---- full network graphs ----
    // A narrow counting network checked exhaustively; the default-width one
    // checked on a seeded sample of entries per parameter.
    {
        CountingNetConfig cn;
        cn.front_blocks = {{3}, {4}};
        cn.backend_channels = 4;
        cn.backend_dilation = 2;
        auto p = init_params<double>(counting_layers(cn), 900);
        detail::bias_up(p, 0.1);
        std::vector<Grid<double>> params = {rnd_grid(Shape{1, 1, 16, 16}, 38, 0, 1)};
        for (auto& g : p.grids) params.push_back(g);
        Grid<double> gt = rnd_grid(Shape{1, 1, 4, 4}, 112, 0, 1);
        run(
            "counting_net",
            [cn, gt](Tape<double>& t, const std::vector<Var>& v) {
                std::vector<Var> net(v.begin() + 1, v.end());
                Var pred = counting_forward(t, cn, net, v[0]);
                return density_loss_tape(t, {pred}, {gt});
            },
            std::move(params));
    }
    {
        CountingNetConfig cn;  // default width
        auto p = init_params<double>(counting_layers(cn), 901);
        detail::bias_up(p, 0.1);
        std::vector<Grid<double>> params = {rnd_grid(Shape{1, 1, 16, 16}, 39, 0, 1)};
        for (auto& g : p.grids) params.push_back(g);
        Grid<double> gt = rnd_grid(Shape{1, 1, 4, 4}, 113, 0, 1);
        GradCheckOptions opt;
        opt.max_entries_per_param = 40;
        run(
            "counting_net_wide",
            [cn, gt](Tape<double>& t, const std::vector<Var>& v) {
                std::vector<Var> net(v.begin() + 1, v.end());
                Var pred = counting_forward(t, cn, net, v[0]);
                return density_loss_tape(t, {pred}, {gt});
            },
            std::move(params), opt);
    }
    // The discriminator's five stride-2 stages define a 32-pixel minimum
    // input; it is checked at that minimum.
    {
        DiscriminatorConfig dc;
        dc.channels = {2, 2, 3, 3, 1};
        auto p = init_params<double>(discriminator_layers(dc), 902);
        std::vector<Grid<double>> params = {rnd_grid(Shape{1, 1, 32, 32}, 40, 0, 1)};
        for (auto& g : p.grids) params.push_back(g);
        run(
            "discriminator_net",
            [dc](Tape<double>& t, const std::vector<Var>& v) {
                std::vector<Var> net(v.begin() + 1, v.end());
                Var logits = discriminator_forward(t, dc, net, v[0]);
                return t.bce_logits_mean(logits, 1.0);
            },
            std::move(params));
    }
    {
        DiscriminatorConfig dc;  // default width
        auto p = init_params<double>(discriminator_layers(dc), 903);
        std::vector<Grid<double>> params = {rnd_grid(Shape{1, 1, 32, 32}, 41, 0, 1)};
        for (auto& g : p.grids) params.push_back(g);
        GradCheckOptions opt;
        opt.max_entries_per_param = 40;
        run(
            "discriminator_net_wide",
            [dc](Tape<double>& t, const std::vector<Var>& v) {
                std::vector<Var> net(v.begin() + 1, v.end());
                Var logits = discriminator_forward(t, dc, net, v[0]);
                return t.bce_logits_mean(logits, 1.0);
            },
            std::move(params), opt);
    }
    // The generator's adversarial route: density map, upsampled on tape, then
    // through the discriminator used as a constant.
    {
        DiscriminatorConfig dc;
        dc.channels = {2, 2, 3, 3, 1};
        auto p = init_params<double>(discriminator_layers(dc), 904);
        std::vector<Grid<double>> dgrids = p.grids;
        run(
            "adversarial_path",
            [dc, dgrids](Tape<double>& t, const std::vector<Var>& v) {
                std::vector<Var> net;
                for (const auto& g : dgrids) net.push_back(t.leaf(g));
                Var up = t.resize_bilinear(v[0], 32, 32);
                Var logits = discriminator_forward(t, dc, net, up);
                return adversarial_loss_tape(t, {logits});
            },
            {rnd_grid(Shape{1, 1, 8, 8}, 42, 0, 1)});
    }
    return results;
}

}  // namespace coda
