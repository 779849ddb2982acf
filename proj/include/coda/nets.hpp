#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "coda/grid.hpp"
#include "coda/io.hpp"
#include "coda/rng.hpp"
#include "coda/tape.hpp"

namespace coda {

// Counting network: VGG-style front end (3×3 convs + ReLU, 2×2 maxpool after
// each block) followed by two dilated 3×3 convs and a 1×1 head producing a
// single non-negative density channel at 1/2^blocks resolution.
struct CountingNetConfig {
    int in_channels = 1;
    std::vector<std::vector<int>> front_blocks = {{16, 16}, {32, 32}};
    int backend_channels = 32;
    int backend_dilation = 4;

    int out_scale() const { return 1 << int(front_blocks.size()); }
};

// Five k=4 stride-2 convolutions with leaky-ReLU between them; emits a logit
// map (the sigmoid lives inside the loss).
struct DiscriminatorConfig {
    int in_channels = 1;
    std::vector<int> channels = {8, 16, 32, 64, 1};  // full scale {64,128,256,512,1}
    int kernel = 4;
    int stride = 2;
    int pad = 1;
    double leaky_slope = 0.2;
};

struct ConvSpec {
    std::string name;
    int in_ch, out_ch, k, stride, pad, dil;
    double init_scale = 1.0;  // multiplier on the He std-dev for this layer's weights
    double init_bias = 0.0;   // constant the biases start from
};

inline std::vector<ConvSpec> counting_layers(const CountingNetConfig& cfg) {
    if (cfg.front_blocks.empty())
        throw std::invalid_argument("counting net needs at least one front block");
    if (cfg.backend_dilation < 1)
        throw std::invalid_argument("backend dilation must be >= 1");
    std::vector<ConvSpec> specs;
    int ch = cfg.in_channels;
    for (std::size_t b = 0; b < cfg.front_blocks.size(); ++b) {
        if (cfg.front_blocks[b].empty())
            throw std::invalid_argument("front block " + std::to_string(b) + " is empty");
        for (std::size_t i = 0; i < cfg.front_blocks[b].size(); ++i) {
            int out = cfg.front_blocks[b][i];
            specs.push_back({"f" + std::to_string(b) + "c" + std::to_string(i), ch, out, 3, 1, 1,
                             1});
            ch = out;
        }
    }
    const int d = cfg.backend_dilation;
    specs.push_back({"d0", ch, cfg.backend_channels, 3, 1, d, d});
    specs.push_back({"d1", cfg.backend_channels, cfg.backend_channels, 3, 1, d, d});
    // The head starts with small weights and a slightly positive bias so early
    // predictions are tiny but every output cell is alive.  Density targets are
    // near-zero almost everywhere, so a full-strength He head can be driven
    // entirely below zero within a few optimizer steps and the final ReLU then
    // blocks all gradients for good.
    specs.push_back({"head", cfg.backend_channels, 1, 1, 1, 0, 1, 0.1, 0.01});
    return specs;
}

inline std::vector<ConvSpec> discriminator_layers(const DiscriminatorConfig& cfg) {
    if (cfg.channels.size() != 5)
        throw std::invalid_argument("discriminator must have exactly five conv layers");
    if (cfg.channels.back() != 1)
        throw std::invalid_argument("discriminator's final layer must have 1 channel");
    std::vector<ConvSpec> specs;
    int ch = cfg.in_channels;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
        specs.push_back({"c" + std::to_string(i), ch, cfg.channels[i], cfg.kernel, cfg.stride,
                         cfg.pad, 1});
        ch = cfg.channels[i];
    }
    return specs;
}

// Named parameter set; order is fixed by the layer list (weight then bias per
// conv) so optimizer state can pair by index.
template <typename T>
struct ModelParams {
    std::vector<std::string> names;
    std::vector<Grid<T>> grids;

    int find(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return int(i);
        return -1;
    }
    std::size_t count() const { return grids.size(); }
};

// He fan-in Gaussian weights and constant biases, honouring each layer's
// init_scale / init_bias overrides; one fixed-order stream per seed.
template <typename T>
ModelParams<T> init_params(const std::vector<ConvSpec>& specs, std::uint64_t seed) {
    ModelParams<T> p;
    Rng rng(mix_seed(seed, 0x1d1));
    for (const auto& s : specs) {
        Grid<T> w(Shape{s.out_ch, s.in_ch, s.k, s.k});
        const double std_dev = s.init_scale * std::sqrt(2.0 / (double(s.in_ch) * s.k * s.k));
        for (auto& v : w.data) v = T(rng.normal() * std_dev);
        p.names.push_back(s.name + ".w");
        p.grids.push_back(std::move(w));
        p.names.push_back(s.name + ".b");
        p.grids.push_back(Grid<T>(Shape{1, 1, 1, s.out_ch}, T(s.init_bias)));
    }
    return p;
}

// Checks that a parameter set has exactly the names and shapes the layer list
// demands (e.g. after loading a checkpoint).
template <typename T>
void validate_params(const std::vector<ConvSpec>& specs, const ModelParams<T>& p) {
    if (p.count() != specs.size() * 2)
        throw std::invalid_argument("params: expected " + std::to_string(specs.size() * 2) +
                                    " arrays, got " + std::to_string(p.count()));
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& s = specs[i];
        const Shape want_w{s.out_ch, s.in_ch, s.k, s.k};
        const Shape want_b{1, 1, 1, s.out_ch};
        if (p.names[2 * i] != s.name + ".w" || !(p.grids[2 * i].shape == want_w))
            throw std::invalid_argument("params: array " + std::to_string(2 * i) + " ('" +
                                        p.names[2 * i] + "') does not match layer " + s.name +
                                        " weight " + want_w.str());
        if (p.names[2 * i + 1] != s.name + ".b" || !(p.grids[2 * i + 1].shape == want_b))
            throw std::invalid_argument("params: array " + std::to_string(2 * i + 1) + " ('" +
                                        p.names[2 * i + 1] + "') does not match layer " + s.name +
                                        " bias");
    }
}

template <typename T>
std::vector<Var> leaf_params(Tape<T>& tape, const ModelParams<T>& p) {
    std::vector<Var> vars;
    vars.reserve(p.grids.size());
    for (const auto& g : p.grids) vars.push_back(tape.leaf(g));
    return vars;
}

// Forward through the counting network; param_vars must follow the
// counting_layers order (weight, bias per conv).
template <typename T>
Var counting_forward(Tape<T>& tape, const CountingNetConfig& cfg,
                     const std::vector<Var>& param_vars, Var input) {
    const auto specs = counting_layers(cfg);
    if (param_vars.size() != specs.size() * 2)
        throw std::invalid_argument("counting_forward: wrong parameter count");
    const Shape in_shape = tape.value(input).shape;
    if (in_shape.c != cfg.in_channels)
        throw std::invalid_argument("counting_forward: input has " + std::to_string(in_shape.c) +
                                    " channels, config wants " + std::to_string(cfg.in_channels));
    const int div = cfg.out_scale();
    if (in_shape.h % div != 0 || in_shape.w % div != 0)
        throw std::invalid_argument("counting_forward: input " + in_shape.str() +
                                    " not divisible by " + std::to_string(div));

    Var x = input;
    std::size_t li = 0;
    for (std::size_t b = 0; b < cfg.front_blocks.size(); ++b) {
        for (std::size_t i = 0; i < cfg.front_blocks[b].size(); ++i) {
            const auto& s = specs[li];
            x = tape.relu(tape.conv2d(x, param_vars[2 * li], param_vars[2 * li + 1], s.stride,
                                      s.pad, s.dil));
            ++li;
        }
        x = tape.maxpool2(x);
    }
    for (int k = 0; k < 2; ++k) {  // dilated back end
        const auto& s = specs[li];
        x = tape.relu(
            tape.conv2d(x, param_vars[2 * li], param_vars[2 * li + 1], s.stride, s.pad, s.dil));
        ++li;
    }
    const auto& s = specs[li];  // 1×1 head, then the non-negativity ReLU
    x = tape.conv2d(x, param_vars[2 * li], param_vars[2 * li + 1], s.stride, s.pad, s.dil);
    return tape.relu(x);
}

// Forward through the discriminator: logit map at 1/32 input resolution.
template <typename T>
Var discriminator_forward(Tape<T>& tape, const DiscriminatorConfig& cfg,
                          const std::vector<Var>& param_vars, Var density) {
    const auto specs = discriminator_layers(cfg);
    if (param_vars.size() != specs.size() * 2)
        throw std::invalid_argument("discriminator_forward: wrong parameter count");
    const Shape in_shape = tape.value(density).shape;
    if (in_shape.c != cfg.in_channels)
        throw std::invalid_argument("discriminator_forward: input has " +
                                    std::to_string(in_shape.c) + " channels, config wants " +
                                    std::to_string(cfg.in_channels));
    if (in_shape.h < 32 || in_shape.w < 32)
        throw std::invalid_argument("discriminator_forward: input " + in_shape.str() +
                                    " too small for five stride-2 layers (needs >= 32)");
    Var x = density;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& s = specs[i];
        x = tape.conv2d(x, param_vars[2 * i], param_vars[2 * i + 1], s.stride, s.pad, s.dil);
        if (i + 1 < specs.size()) x = tape.leaky_relu(x, T(cfg.leaky_slope));
    }
    return x;
}

// Plain (no-gradient) forwards for evaluation paths.
template <typename T>
Grid<T> counting_apply(const CountingNetConfig& cfg, const ModelParams<T>& params,
                       const Grid<T>& input) {
    Tape<T> tape;
    auto vars = leaf_params(tape, params);
    Var out = counting_forward(tape, cfg, vars, tape.leaf(input));
    return tape.value(out);
}

template <typename T>
Grid<T> discriminator_apply(const DiscriminatorConfig& cfg, const ModelParams<T>& params,
                            const Grid<T>& density) {
    Tape<T> tape;
    auto vars = leaf_params(tape, params);
    Var out = discriminator_forward(tape, cfg, vars, tape.leaf(density));
    return tape.value(out);
}

// ---- checkpoint bridging ----

template <typename T>
void append_param_arrays(const ModelParams<T>& p, const std::string& prefix,
                         std::vector<NamedArray>& out) {
    for (std::size_t i = 0; i < p.count(); ++i) {
        NamedArray a;
        a.name = prefix + p.names[i];
        const Shape s = p.grids[i].shape;
        if (s.n == 1 && s.c == 1 && s.h == 1)
            a.dims = {std::uint32_t(s.w)};  // biases as rank-1
        else
            a.dims = {std::uint32_t(s.n), std::uint32_t(s.c), std::uint32_t(s.h),
                      std::uint32_t(s.w)};
        a.values.reserve(p.grids[i].data.size());
        for (auto v : p.grids[i].data) a.values.push_back(float(v));
        out.push_back(std::move(a));
    }
}

template <typename T>
ModelParams<T> extract_param_arrays(const std::vector<NamedArray>& arrays,
                                    const std::string& prefix) {
    ModelParams<T> p;
    for (const auto& a : arrays) {
        if (a.name.rfind(prefix, 0) != 0) continue;
        Shape s;
        if (a.dims.size() == 1) {
            s = Shape{1, 1, 1, int(a.dims[0])};
        } else if (a.dims.size() == 4) {
            s = Shape{int(a.dims[0]), int(a.dims[1]), int(a.dims[2]), int(a.dims[3])};
        } else {
            throw std::runtime_error("checkpoint array '" + a.name + "': unsupported rank " +
                                     std::to_string(a.dims.size()));
        }
        Grid<T> g(s);
        if (a.values.size() != g.data.size())
            throw std::runtime_error("checkpoint array '" + a.name + "': value count mismatch");
        for (std::size_t i = 0; i < a.values.size(); ++i) g.data[i] = T(a.values[i]);
        p.names.push_back(a.name.substr(prefix.size()));
        p.grids.push_back(std::move(g));
    }
    return p;
}

}  // namespace coda
