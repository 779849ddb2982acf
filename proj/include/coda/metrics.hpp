#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coda/grid.hpp"

namespace coda {

struct CountPair {
    double gt = 0;
    double pred = 0;
};

inline double mae(const std::vector<CountPair>& pairs) {
    if (pairs.empty()) throw std::invalid_argument("mae: empty input");
    double acc = 0;
    for (const auto& p : pairs) acc += std::abs(p.pred - p.gt);
    return acc / double(pairs.size());
}

// Root of the mean squared error (the counting literature's "MSE").
inline double mse(const std::vector<CountPair>& pairs) {
    if (pairs.empty()) throw std::invalid_argument("mse: empty input");
    double acc = 0;
    for (const auto& p : pairs) acc += (p.pred - p.gt) * (p.pred - p.gt);
    return std::sqrt(acc / double(pairs.size()));
}

// Grid error for one image: partition both maps into 2^L × 2^L cells with
// floor-based boundaries and sum the per-cell absolute count differences.
// Nesting of the partitions makes this non-decreasing in L.
template <typename T>
double gmae(const Grid<T>& pred, const Grid<T>& gt, int L, const Grid<T>* roi = nullptr) {
    if (!(pred.shape == gt.shape))
        throw std::invalid_argument("gmae: map shapes differ: " + pred.shape.str() + " vs " +
                                    gt.shape.str());
    if (roi && !(roi->shape == pred.shape))
        throw std::invalid_argument("gmae: roi shape mismatch");
    if (L < 0) throw std::invalid_argument("gmae: L must be >= 0");
    const int cells = 1 << L;
    const int H = pred.shape.h, W = pred.shape.w;
    if (H < cells || W < cells)
        throw std::invalid_argument("gmae: map " + pred.shape.str() + " smaller than 2^L=" +
                                    std::to_string(cells) + " cells per side");
    auto bound = [](int k, int dim, int cells_) { return (std::int64_t(k) * dim) / cells_; };
    double total = 0;
    for (int n = 0; n < pred.shape.n; ++n)
        for (int c = 0; c < pred.shape.c; ++c) {
            const T* pp = pred.plane(n, c);
            const T* gp = gt.plane(n, c);
            const T* rp = roi ? roi->plane(n, c) : nullptr;
            for (int cy = 0; cy < cells; ++cy)
                for (int cx = 0; cx < cells; ++cx) {
                    const int y0 = int(bound(cy, H, cells)), y1 = int(bound(cy + 1, H, cells));
                    const int x0 = int(bound(cx, W, cells)), x1 = int(bound(cx + 1, W, cells));
                    // same compensated summation as grid_sum, so the L=0 cell
                    // reproduces the whole-map count bit-for-bit
                    NeumaierSum sp, sg;
                    for (int y = y0; y < y1; ++y)
                        for (int x = x0; x < x1; ++x) {
                            const std::size_t idx = std::size_t(y) * W + x;
                            const double r = rp ? double(rp[idx]) : 1.0;
                            sp.add(double(pp[idx]) * r);
                            sg.add(double(gp[idx]) * r);
                        }
                    total += std::abs(sp.value() - sg.value());
                }
        }
    return total;
}

struct EvalItem {
    Grid<double> pred;
    Grid<double> gt;
    std::optional<Grid<double>> roi;  // density-resolution mask
};

struct EvalReport {
    std::string dataset;
    int n_images = 0;
    double mae_value = 0;
    double mse_value = 0;
    std::map<int, double> gmae_values;  // level → mean over images
};

inline EvalReport evaluate_maps(const std::string& dataset_name,
                                const std::vector<EvalItem>& items,
                                const std::vector<int>& levels) {
    if (items.empty()) throw std::invalid_argument("evaluate_maps: no images");
    EvalReport rep;
    rep.dataset = dataset_name;
    rep.n_images = int(items.size());
    std::vector<CountPair> pairs;
    for (const auto& it : items) {
        const Grid<double>* roi = it.roi ? &*it.roi : nullptr;
        const Grid<double> p = roi ? hadamard(it.pred, *roi) : it.pred;
        const Grid<double> g = roi ? hadamard(it.gt, *roi) : it.gt;
        pairs.push_back({grid_sum(g), grid_sum(p)});
    }
    rep.mae_value = mae(pairs);
    rep.mse_value = mse(pairs);
    for (int L : levels) {
        double acc = 0;
        for (const auto& it : items)
            acc += gmae(it.pred, it.gt, L, it.roi ? &*it.roi : nullptr);
        rep.gmae_values[L] = acc / double(items.size());
    }
    return rep;
}

inline nlohmann::json report_json(const EvalReport& rep) {
    nlohmann::json j;
    j["dataset"] = rep.dataset;
    j["n_images"] = rep.n_images;
    j["mae"] = rep.mae_value;
    j["mse"] = rep.mse_value;
    nlohmann::json g = nlohmann::json::object();
    for (const auto& [L, v] : rep.gmae_values) g[std::to_string(L)] = v;
    j["gmae"] = std::move(g);
    return j;
}

}  // namespace coda
