#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "coda/grid.hpp"
#include "coda/kernels.hpp"
#include "coda/rng.hpp"

namespace coda {

// Handle into one tape; only meaningful for the tape that produced it.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Records a forward computation and replays it in reverse for gradients.
// Nodes are appended in creation order, which is a topological order by
// construction, so the backward pass walks ids from the output down to 0 and
// visits each recorded operation exactly once. Grids on the tape are never
// mutated after creation; a tape is confined to one thread.
template <typename T>
class Tape {
  public:
    Var leaf(Grid<T> v) { return push(std::move(v)); }

    const Grid<T>& value(Var v) const { return nodes_[check(v)].value; }
    const Grid<T>& grad(Var v) const {
        if (!grads_ready_) throw std::logic_error("Tape: grad() before backward()");
        return nodes_[check(v)].grad;
    }
    std::size_t size() const { return nodes_.size(); }

    // ---- differentiable operations ----

    Var conv2d(Var x, Var w, Var b, int stride = 1, int pad = 0, int dil = 1) {
        Grid<T> out = conv2d_forward(value(x), value(w), value(b), stride, pad, dil);
        Var v = push(std::move(out));
        nodes_[v.id].back = [x, w, b, stride, pad, dil, v](Tape& t) {
            conv2d_backward(t.value(x), t.value(w), t.node_grad(v), stride, pad, dil,
                            &t.node_grad(x), &t.node_grad(w), &t.node_grad(b));
        };
        return v;
    }

    Var relu(Var x) {
        Var v = push(relu_forward(value(x)));
        nodes_[v.id].back = [x, v](Tape& t) {
            relu_backward(t.value(x), t.node_grad(v), t.node_grad(x));
        };
        return v;
    }

    Var leaky_relu(Var x, T slope) {
        Var v = push(leaky_relu_forward(value(x), slope));
        nodes_[v.id].back = [x, v, slope](Tape& t) {
            leaky_relu_backward(t.value(x), slope, t.node_grad(v), t.node_grad(x));
        };
        return v;
    }

    Var maxpool2(Var x) {
        Var v = push(maxpool2_forward(value(x)));
        nodes_[v.id].back = [x, v](Tape& t) {
            maxpool2_backward(t.value(x), t.node_grad(v), t.node_grad(x));
        };
        return v;
    }

    Var grid_sum(Var x) {
        Var v = push(Grid<T>::scalar(T(coda::grid_sum(value(x)))));
        nodes_[v.id].back = [x, v](Tape& t) {
            const T g = t.node_grad(v).data[0];
            Grid<T>& gi = t.node_grad(x);
            for (T& e : gi.data) e += g;
        };
        return v;
    }

    Var resize_bilinear(Var x, int out_h, int out_w) {
        Var v = push(coda::resize_bilinear(value(x), out_h, out_w));
        Shape in_shape = value(x).shape;
        nodes_[v.id].back = [x, v, in_shape](Tape& t) {
            resize_bilinear_backward(in_shape, t.node_grad(v), t.node_grad(x));
        };
        return v;
    }

    Var block_sum_downsample(Var x, int factor) {
        Var v = push(coda::block_sum_downsample(value(x), factor));
        nodes_[v.id].back = [x, v, factor](Tape& t) {
            block_sum_downsample_backward(t.node_grad(v), factor, t.node_grad(x));
        };
        return v;
    }

    Var add(Var a, Var b) {
        const Grid<T>&ga = value(a), &gb = value(b);
        if (!(ga.shape == gb.shape))
            throw std::invalid_argument("add: shape mismatch " + ga.shape.str() + " vs " +
                                        gb.shape.str());
        Grid<T> out = ga;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += gb.data[i];
        Var v = push(std::move(out));
        nodes_[v.id].back = [a, b, v](Tape& t) {
            const Grid<T>& g = t.node_grad(v);
            Grid<T>& ia = t.node_grad(a);
            Grid<T>& ib = t.node_grad(b);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                ia.data[i] += g.data[i];
                ib.data[i] += g.data[i];
            }
        };
        return v;
    }

    Var sub(Var a, Var b) {
        const Grid<T>&ga = value(a), &gb = value(b);
        if (!(ga.shape == gb.shape))
            throw std::invalid_argument("sub: shape mismatch " + ga.shape.str() + " vs " +
                                        gb.shape.str());
        Grid<T> out = ga;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= gb.data[i];
        Var v = push(std::move(out));
        nodes_[v.id].back = [a, b, v](Tape& t) {
            const Grid<T>& g = t.node_grad(v);
            Grid<T>& ia = t.node_grad(a);
            Grid<T>& ib = t.node_grad(b);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                ia.data[i] += g.data[i];
                ib.data[i] -= g.data[i];
            }
        };
        return v;
    }

    Var scale(Var x, double c) {
        Grid<T> out = value(x);
        for (T& e : out.data) e = T(double(e) * c);
        Var v = push(std::move(out));
        nodes_[v.id].back = [x, v, c](Tape& t) {
            const Grid<T>& g = t.node_grad(v);
            Grid<T>& gi = t.node_grad(x);
            for (std::size_t i = 0; i < g.data.size(); ++i) gi.data[i] += T(double(g.data[i]) * c);
        };
        return v;
    }

    Var add_const(Var x, double c) {
        Grid<T> out = value(x);
        for (T& e : out.data) e = T(double(e) + c);
        Var v = push(std::move(out));
        nodes_[v.id].back = [x, v](Tape& t) {
            const Grid<T>& g = t.node_grad(v);
            Grid<T>& gi = t.node_grad(x);
            for (std::size_t i = 0; i < g.data.size(); ++i) gi.data[i] += g.data[i];
        };
        return v;
    }

    // Elementwise product with a constant grid (e.g. an ROI mask).
    Var mul_const(Var x, Grid<T> mask) {
        if (!(value(x).shape == mask.shape))
            throw std::invalid_argument("mul_const: shape mismatch " + value(x).shape.str() +
                                        " vs " + mask.shape.str());
        // push first: it may reallocate node storage, so take references after
        Var m = push(std::move(mask));
        Grid<T> out = value(x);
        const Grid<T>& mv = value(m);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= mv.data[i];
        Var v = push(std::move(out));
        nodes_[v.id].back = [x, m, v](Tape& t) {
            const Grid<T>& g = t.node_grad(v);
            const Grid<T>& mk = t.value(m);
            Grid<T>& gi = t.node_grad(x);
            for (std::size_t i = 0; i < g.data.size(); ++i) gi.data[i] += g.data[i] * mk.data[i];
        };
        return v;
    }

    // Sum of squared differences against a constant target, over all elements.
    Var sum_sq_diff(Var x, Grid<T> target) {
        if (!(value(x).shape == target.shape))
            throw std::invalid_argument("sum_sq_diff: shape mismatch " + value(x).shape.str() +
                                        " vs " + target.shape.str());
        Var tgt = push(std::move(target));  // may reallocate; fetch references after
        const Grid<T>& gx = value(x);
        const Grid<T>& tv = value(tgt);
        double acc = 0.0;
        for (std::size_t i = 0; i < gx.data.size(); ++i) {
            double d = double(gx.data[i]) - double(tv.data[i]);
            acc += d * d;
        }
        Var v = push(Grid<T>::scalar(T(acc)));
        nodes_[v.id].back = [x, tgt, v](Tape& t) {
            const T g = t.node_grad(v).data[0];
            const Grid<T>& xv = t.value(x);
            const Grid<T>& tv2 = t.value(tgt);
            Grid<T>& gi = t.node_grad(x);
            for (std::size_t i = 0; i < xv.data.size(); ++i)
                gi.data[i] += T(2) * g * (xv.data[i] - tv2.data[i]);
        };
        return v;
    }

    // Mean over all elements of the binary cross entropy with logits against
    // the constant label z (z=1: -log sigmoid(x), z=0: -log(1 - sigmoid(x))).
    Var bce_logits_mean(Var x, double z) {
        const Grid<T>& gx = value(x);
        const double n = double(gx.numel());
        double acc = 0.0;
        for (T e : gx.data) {
            double xv = double(e);
            // z*softplus(-x) + (1-z)*softplus(x)
            acc += z * softplus(-xv) + (1.0 - z) * softplus(xv);
        }
        Var v = push(Grid<T>::scalar(T(acc / n)));
        nodes_[v.id].back = [x, v, z, n](Tape& t) {
            const double g = double(t.node_grad(v).data[0]);
            const Grid<T>& xv = t.value(x);
            Grid<T>& gi = t.node_grad(x);
            for (std::size_t i = 0; i < xv.data.size(); ++i)
                gi.data[i] += T(g * (sigmoid(double(xv.data[i])) - z) / n);
        };
        return v;
    }

    // ---- reverse pass ----

    // Seeds d(out)=1 and walks recorded operations in reverse creation order.
    void backward(Var out) {
        if (value(out).numel() != 1)
            throw std::invalid_argument("backward: output must be scalar, got shape " +
                                        value(out).shape.str());
        for (int i = 0; i <= out.id; ++i) {
            nodes_[std::size_t(i)].grad = Grid<T>(nodes_[std::size_t(i)].value.shape, T(0));
        }
        grads_ready_ = true;
        nodes_[std::size_t(out.id)].grad.data[0] = T(1);
        for (int i = out.id; i >= 0; --i)
            if (nodes_[std::size_t(i)].back) nodes_[std::size_t(i)].back(*this);
    }

  private:
    struct Node {
        Grid<T> value;
        Grid<T> grad;
        std::function<void(Tape&)> back;  // empty for leaves
    };

    int check(Var v) const {
        if (v.id < 0 || std::size_t(v.id) >= nodes_.size())
            throw std::logic_error("Tape: variable does not belong to this tape");
        return v.id;
    }

    Grid<T>& node_grad(Var v) { return nodes_[std::size_t(check(v))].grad; }

    Var push(Grid<T> value) {
        nodes_.push_back(Node{std::move(value), Grid<T>{}, nullptr});
        return Var{int(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
    bool grads_ready_ = false;
};

// ---- finite-difference verification harness ----

struct GradCheckOptions {
    double step = 1e-5;
    // 0 checks every entry; otherwise a seeded sample of entries per parameter
    // keeps full-network checks affordable.
    int max_entries_per_param = 0;
    std::uint64_t sample_seed = 7;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    int checked_entries = 0;
    double max_abs_grad = 0.0;  // over analytic grads, to catch vacuous checks
};

// build(tape, vars) must assemble a scalar-valued computation from the
// operations above, in 64-bit precision. Compares the tape gradient of every
// (sampled) parameter entry against central finite differences.
template <typename F>
GradCheckReport grad_check_report(F&& build, std::vector<Grid<double>> params,
                                  GradCheckOptions opt = {}) {
    // analytic pass
    std::vector<Grid<double>> analytic;
    {
        Tape<double> tape;
        std::vector<Var> vars;
        vars.reserve(params.size());
        for (auto& p : params) vars.push_back(tape.leaf(p));
        Var out = build(tape, vars);
        if (tape.value(out).numel() != 1)
            throw std::invalid_argument("grad_check: computation must be scalar-valued");
        tape.backward(out);
        for (Var v : vars) analytic.push_back(tape.grad(v));
    }

    auto eval = [&](const std::vector<Grid<double>>& ps) {
        Tape<double> tape;
        std::vector<Var> vars;
        vars.reserve(ps.size());
        for (auto& p : ps) vars.push_back(tape.leaf(p));
        Var out = build(tape, vars);
        return tape.value(out).data[0];
    };

    GradCheckReport rep;
    Rng rng(opt.sample_seed);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const std::int64_t n = params[pi].numel();
        std::vector<std::int64_t> idx;
        if (opt.max_entries_per_param > 0 && n > opt.max_entries_per_param) {
            for (int j = 0; j < opt.max_entries_per_param; ++j) idx.push_back(rng.uniform_int(n));
        } else {
            idx.resize(std::size_t(n));
            for (std::int64_t j = 0; j < n; ++j) idx[std::size_t(j)] = j;
        }
        for (std::int64_t e : idx) {
            const double saved = params[pi].data[std::size_t(e)];
            params[pi].data[std::size_t(e)] = saved + opt.step;
            const double fp = eval(params);
            params[pi].data[std::size_t(e)] = saved - opt.step;
            const double fm = eval(params);
            params[pi].data[std::size_t(e)] = saved;
            const double numeric = (fp - fm) / (2.0 * opt.step);
            const double a = analytic[pi].data[std::size_t(e)];
            const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
            rep.max_rel_err = std::max(rep.max_rel_err, rel);
            rep.max_abs_grad = std::max(rep.max_abs_grad, std::abs(a));
            ++rep.checked_entries;
        }
    }
    return rep;
}

template <typename F>
double grad_check(F&& build, std::vector<Grid<double>> params, GradCheckOptions opt = {}) {
    return grad_check_report(std::forward<F>(build), std::move(params), opt).max_rel_err;
}

}  // namespace coda
