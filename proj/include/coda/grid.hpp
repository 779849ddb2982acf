#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace coda {

struct Shape {
    int n = 1, c = 1, h = 1, w = 1;

    std::int64_t numel() const { return std::int64_t(n) * c * h * w; }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
               std::to_string(w);
    }
};

// Rank-4 numeric array (batch, channels, height, width), row-major,
// value semantics. Carries both images and density maps.
template <typename T>
struct Grid {
    Shape shape{};
    std::vector<T> data;

    Grid() : data(1, T(0)) {}

    explicit Grid(Shape s, T fill = T(0)) : shape(s), data(checked_numel(s), fill) {}

  private:
    static std::size_t checked_numel(Shape s) {
        if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
            throw std::invalid_argument("Grid: every dimension must be >= 1, got " + s.str());
        return std::size_t(s.numel());
    }

  public:

    static Grid scalar(T v) {
        Grid g{Shape{1, 1, 1, 1}};
        g.data[0] = v;
        return g;
    }

    static Grid map(int h, int w, T fill = T(0)) { return Grid(Shape{1, 1, h, w}, fill); }

    std::int64_t numel() const { return shape.numel(); }

    T& at(int n, int c, int y, int x) {
        return data[std::size_t(((std::int64_t(n) * shape.c + c) * shape.h + y) * shape.w + x)];
    }
    const T& at(int n, int c, int y, int x) const {
        return data[std::size_t(((std::int64_t(n) * shape.c + c) * shape.h + y) * shape.w + x)];
    }

    T* plane(int n, int c) {
        return data.data() + std::size_t((std::int64_t(n) * shape.c + c) * shape.h * shape.w);
    }
    const T* plane(int n, int c) const {
        return data.data() + std::size_t((std::int64_t(n) * shape.c + c) * shape.h * shape.w);
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

template <typename T>
bool all_finite(const Grid<T>& g) {
    for (T v : g.data)
        if (!std::isfinite(double(v))) return false;
    return true;
}

template <typename U, typename T>
Grid<U> cast(const Grid<T>& g) {
    Grid<U> out(g.shape);
    for (std::size_t i = 0; i < g.data.size(); ++i) out.data[i] = U(g.data[i]);
    return out;
}

// Neumaier-compensated accumulator. Every summation that must agree with
// grid_sum bit-for-bit (e.g. per-cell sums in the grid metrics) goes through
// this same algorithm.
struct NeumaierSum {
    double s = 0.0, comp = 0.0;

    void add(double x) {
        const double t = s + x;
        if (std::abs(s) >= std::abs(x))
            comp += (s - t) + x;
        else
            comp += (x - t) + s;
        s = t;
    }
    double value() const { return s + comp; }
};

// Sum of all elements, Neumaier-compensated in double.
template <typename T>
double grid_sum(const Grid<T>& g) {
    NeumaierSum acc;
    for (T v : g.data) acc.add(double(v));
    return acc.value();
}

// Each output cell is the sum of its factor x factor block; conserves grid_sum.
template <typename T>
Grid<T> block_sum_downsample(const Grid<T>& in, int factor) {
    if (factor < 1) throw std::invalid_argument("block_sum_downsample: factor must be >= 1");
    if (factor == 1) return in;
    if (in.shape.h % factor != 0 || in.shape.w % factor != 0)
        throw std::invalid_argument("block_sum_downsample: spatial dims " + in.shape.str() +
                                    " not divisible by factor " + std::to_string(factor));
    Grid<T> out(Shape{in.shape.n, in.shape.c, in.shape.h / factor, in.shape.w / factor});
    for (int n = 0; n < in.shape.n; ++n)
        for (int c = 0; c < in.shape.c; ++c) {
            const T* ip = in.plane(n, c);
            T* op = out.plane(n, c);
            for (int oy = 0; oy < out.shape.h; ++oy)
                for (int ox = 0; ox < out.shape.w; ++ox) {
                    double acc = 0.0;
                    for (int dy = 0; dy < factor; ++dy) {
                        const T* row = ip + std::int64_t(oy * factor + dy) * in.shape.w + ox * factor;
                        for (int dx = 0; dx < factor; ++dx) acc += double(row[dx]);
                    }
                    op[std::int64_t(oy) * out.shape.w + ox] = T(acc);
                }
        }
    return out;
}

template <typename T>
void block_sum_downsample_backward(const Grid<T>& gout, int factor, Grid<T>& gin) {
    for (int n = 0; n < gout.shape.n; ++n)
        for (int c = 0; c < gout.shape.c; ++c) {
            const T* gp = gout.plane(n, c);
            T* ip = gin.plane(n, c);
            for (int oy = 0; oy < gout.shape.h; ++oy)
                for (int ox = 0; ox < gout.shape.w; ++ox) {
                    T g = gp[std::int64_t(oy) * gout.shape.w + ox];
                    for (int dy = 0; dy < factor; ++dy) {
                        T* row = ip + std::int64_t(oy * factor + dy) * gin.shape.w + ox * factor;
                        for (int dx = 0; dx < factor; ++dx) row[dx] += g;
                    }
                }
        }
}

// Mean of each factor x factor block. Used to bring ROI masks to density
// resolution: the value is the fraction of the cell inside the mask.
template <typename T>
Grid<T> block_mean_downsample(const Grid<T>& in, int factor) {
    Grid<T> out = block_sum_downsample(in, factor);
    T inv = T(1) / T(factor * factor);
    for (T& v : out.data) v *= inv;
    return out;
}

template <typename T>
Grid<T> hadamard(const Grid<T>& a, const Grid<T>& b) {
    if (!(a.shape == b.shape))
        throw std::invalid_argument("hadamard: shape mismatch " + a.shape.str() + " vs " +
                                    b.shape.str());
    Grid<T> out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    return out;
}

}  // namespace coda
