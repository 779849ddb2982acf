#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "coda/grid.hpp"
#include "coda/kernels.hpp"
#include "coda/tape.hpp"

namespace coda {

struct LossWeights {
    double lambda1 = 0.001;  // discriminator loss weight (its own update)
    double lambda2 = 0.001;  // adversarial term in the generator objective
    double lambda3 = 0.001;  // ranking terms in the generator objective
    double epsilon = 0.0;    // ranking hinge margin
};

// ---- plain evaluations (used directly and as test oracles) ----

// (1/2N) Σ over items of the squared L2 distance; N is the batch dimension.
template <typename T>
double density_loss(const Grid<T>& pred, const Grid<T>& gt) {
    if (!(pred.shape == gt.shape))
        throw std::invalid_argument("density_loss: shape mismatch " + pred.shape.str() + " vs " +
                                    gt.shape.str());
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double d = double(pred.data[i]) - double(gt.data[i]);
        acc += d * d;
    }
    return acc / (2.0 * pred.shape.n);
}

// List form: each entry is one item (N = list length).
template <typename T>
double density_loss(const std::vector<Grid<T>>& preds, const std::vector<Grid<T>>& gts) {
    if (preds.empty() || preds.size() != gts.size())
        throw std::invalid_argument("density_loss: need equal-length non-empty lists");
    double acc = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (!(preds[i].shape == gts[i].shape))
            throw std::invalid_argument("density_loss: shape mismatch at item " +
                                        std::to_string(i));
        for (std::size_t e = 0; e < preds[i].data.size(); ++e) {
            const double d = double(preds[i].data[e]) - double(gts[i].data[e]);
            acc += d * d;
        }
    }
    return acc / (2.0 * double(preds.size()));
}

namespace detail {

// Pixel-mean binary cross entropy against constant label z, from logits.
template <typename T>
double bce_mean(const Grid<T>& logits, double z) {
    double acc = 0.0;
    for (T e : logits.data) {
        const double x = double(e);
        acc += z * softplus(-x) + (1.0 - z) * softplus(x);
    }
    return acc / double(logits.numel());
}

}  // namespace detail

// Per-map pixel-mean cross entropy, source labeled 1, target labeled 0,
// scaled by 1/(2NS) over the 2NS maps.
template <typename T>
double discriminator_loss(const std::vector<Grid<T>>& logits_src,
                          const std::vector<Grid<T>>& logits_tgt) {
    if (logits_src.empty() || logits_src.size() != logits_tgt.size())
        throw std::invalid_argument("discriminator_loss: need equal-length non-empty lists");
    const double inv = 1.0 / (2.0 * double(logits_src.size()));
    double acc = 0.0;
    for (const auto& m : logits_src) acc += inv * detail::bce_mean(m, 1.0);
    for (const auto& m : logits_tgt) acc += inv * detail::bce_mean(m, 0.0);
    return acc;
}

// −(1/2NS) Σ per-map pixel-mean of log σ(logit): how far target maps are from
// being classified as source.
template <typename T>
double adversarial_loss(const std::vector<Grid<T>>& logits_tgt) {
    if (logits_tgt.empty()) throw std::invalid_argument("adversarial_loss: empty list");
    const double inv = 1.0 / (2.0 * double(logits_tgt.size()));
    double acc = 0.0;
    for (const auto& m : logits_tgt) acc += inv * detail::bce_mean(m, 1.0);
    return acc;
}

// Pairwise hinge over counts ordered smallest patch first: any smaller patch
// predicting more than a containing patch is penalized.
inline double ranking_loss(const std::vector<double>& counts, double eps = 0.0) {
    double acc = 0.0;
    for (std::size_t i = 1; i < counts.size(); ++i)
        for (std::size_t j = 0; j < i; ++j) acc += std::max(0.0, counts[j] - counts[i] + eps);
    return acc;
}

template <typename T>
double predicted_count(const Grid<T>& density, const Grid<T>* roi = nullptr) {
    if (!roi) return grid_sum(density);
    if (!(roi->shape == density.shape))
        throw std::invalid_argument("predicted_count: roi shape " + roi->shape.str() +
                                    " does not match density " + density.shape.str());
    return grid_sum(hadamard(density, *roi));
}

inline double combined_generator_loss(double l_dens, double l_adv, double l_rank_total,
                                      const LossWeights& w) {
    return l_dens + w.lambda2 * l_adv + w.lambda3 * l_rank_total;
}

// ---- tape versions (differentiable) ----

template <typename T>
Var density_loss_tape(Tape<T>& tape, const std::vector<Var>& preds,
                      const std::vector<Grid<T>>& gts) {
    if (preds.empty() || preds.size() != gts.size())
        throw std::invalid_argument("density_loss_tape: need equal-length non-empty lists");
    Var acc;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        Var term = tape.sum_sq_diff(preds[i], gts[i]);
        acc = i == 0 ? term : tape.add(acc, term);
    }
    return tape.scale(acc, 1.0 / (2.0 * double(preds.size())));
}

template <typename T>
Var discriminator_loss_tape(Tape<T>& tape, const std::vector<Var>& logits_src,
                            const std::vector<Var>& logits_tgt) {
    if (logits_src.empty() || logits_src.size() != logits_tgt.size())
        throw std::invalid_argument("discriminator_loss_tape: need equal-length non-empty lists");
    Var acc;
    bool first = true;
    for (Var m : logits_src) {
        Var term = tape.bce_logits_mean(m, 1.0);
        acc = first ? term : tape.add(acc, term);
        first = false;
    }
    for (Var m : logits_tgt) acc = tape.add(acc, tape.bce_logits_mean(m, 0.0));
    return tape.scale(acc, 1.0 / (2.0 * double(logits_src.size())));
}

template <typename T>
Var adversarial_loss_tape(Tape<T>& tape, const std::vector<Var>& logits_tgt) {
    if (logits_tgt.empty()) throw std::invalid_argument("adversarial_loss_tape: empty list");
    Var acc;
    for (std::size_t i = 0; i < logits_tgt.size(); ++i) {
        Var term = tape.bce_logits_mean(logits_tgt[i], 1.0);
        acc = i == 0 ? term : tape.add(acc, term);
    }
    return tape.scale(acc, 1.0 / (2.0 * double(logits_tgt.size())));
}

// counts: scalar variables ordered smallest patch first.
template <typename T>
Var ranking_loss_tape(Tape<T>& tape, const std::vector<Var>& counts, double eps = 0.0) {
    Var acc = tape.leaf(Grid<T>::scalar(T(0)));
    for (std::size_t i = 1; i < counts.size(); ++i)
        for (std::size_t j = 0; j < i; ++j) {
            Var hinge = tape.relu(tape.add_const(tape.sub(counts[j], counts[i]), eps));
            acc = tape.add(acc, hinge);
        }
    return acc;
}

template <typename T>
Var predicted_count_tape(Tape<T>& tape, Var density, const Grid<T>* roi = nullptr) {
    if (!roi) return tape.grid_sum(density);
    return tape.grid_sum(tape.mul_const(density, *roi));
}

template <typename T>
Var combined_generator_loss_tape(Tape<T>& tape, Var l_dens, Var l_adv, Var l_rank_total,
                                 const LossWeights& w) {
    Var out = tape.add(l_dens, tape.scale(l_adv, w.lambda2));
    return tape.add(out, tape.scale(l_rank_total, w.lambda3));
}

}  // namespace coda
