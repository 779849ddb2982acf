#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "coda/grid.hpp"
#include "coda/io.hpp"
#include "coda/kernels.hpp"
#include "coda/rng.hpp"

namespace coda {

// Half-open pixel rectangle [x0, x1) × [y0, y1).
struct Rect {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    int w() const { return x1 - x0; }
    int h() const { return y1 - y0; }
    double cx() const { return 0.5 * (x0 + x1); }
    double cy() const { return 0.5 * (y0 + y1); }

    bool contains(double px, double py) const {
        return px >= x0 && px < x1 && py >= y0 && py < y1;
    }
    bool contains(const Rect& r) const {
        return r.x0 >= x0 && r.y0 >= y0 && r.x1 <= x1 && r.y1 <= y1;
    }
    bool operator==(const Rect&) const = default;
    std::string str() const {
        return "(" + std::to_string(x0) + "," + std::to_string(y0) + "," + std::to_string(x1) +
               "," + std::to_string(y1) + ")";
    }
};

// Uniformly positioned crop covering `fraction` of each image dimension.
inline Rect sample_patch(int image_w, int image_h, Rng& rng, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw std::invalid_argument("sample_patch: fraction must be in (0, 1]");
    int pw = std::max(1, int(std::lround(fraction * image_w)));
    int ph = std::max(1, int(std::lround(fraction * image_h)));
    pw = std::min(pw, image_w);
    ph = std::min(ph, image_h);
    int x0 = int(rng.uniform_int(std::int64_t(image_w - pw + 1)));
    int y0 = int(rng.uniform_int(std::int64_t(image_h - ph + 1)));
    return Rect{x0, y0, x0 + pw, y0 + ph};
}

// Pixel sub-grid for a rect (all channels).
template <typename T>
Grid<T> extract_rect(const Grid<T>& image, const Rect& r) {
    if (r.x0 < 0 || r.y0 < 0 || r.x1 > image.shape.w || r.y1 > image.shape.h || r.w() < 1 ||
        r.h() < 1)
        throw std::invalid_argument("extract_rect: rect " + r.str() + " outside image " +
                                    image.shape.str());
    Grid<T> out(Shape{image.shape.n, image.shape.c, r.h(), r.w()});
    for (int n = 0; n < image.shape.n; ++n)
        for (int c = 0; c < image.shape.c; ++c) {
            const T* src = image.plane(n, c);
            T* dst = out.plane(n, c);
            for (int y = 0; y < r.h(); ++y)
                for (int x = 0; x < r.w(); ++x)
                    dst[std::size_t(y) * r.w() + x] =
                        src[std::size_t(y + r.y0) * image.shape.w + (x + r.x0)];
        }
    return out;
}

template <typename T>
struct PyramidLevel {
    Grid<T> crop;  // resized to the network input size
    Rect rect;     // in source-image coordinates
    std::optional<double> gt_count;
};

template <typename T>
struct PatchPyramid {
    std::vector<PyramidLevel<T>> levels;  // smallest scale first; last = original patch
    std::vector<double> scales;           // ascending, ends with 1.0
};

namespace detail {

inline std::vector<double> normalize_scales(std::vector<double> scales) {
    if (scales.empty()) scales.push_back(1.0);
    for (std::size_t i = 0; i < scales.size(); ++i) {
        if (!(scales[i] > 0.0 && scales[i] <= 1.0))
            throw std::invalid_argument("scales must lie in (0, 1]");
        if (i > 0 && scales[i] <= scales[i - 1])
            throw std::invalid_argument("scales must be strictly ascending");
    }
    if (scales.back() != 1.0) scales.push_back(1.0);
    return scales;
}

// Co-centered sub-rect: floor the top-left, ceil the bottom-right of the
// ideal scaled rectangle, which keeps every smaller rect nested in the larger.
// The epsilon absorbs rounding noise when the ideal edge is an exact integer
// (e.g. 0.8 × 100), so those edges stay put instead of widening by a pixel.
inline Rect scaled_rect(const Rect& patch, double scale) {
    const double cx = patch.cx(), cy = patch.cy();
    const double hw = 0.5 * scale * patch.w(), hh = 0.5 * scale * patch.h();
    const double eps = 1e-9;
    Rect r;
    r.x0 = int(std::floor(cx - hw + eps));
    r.x1 = int(std::ceil(cx + hw - eps));
    r.y0 = int(std::floor(cy - hh + eps));
    r.y1 = int(std::ceil(cy + hh - eps));
    return r;
}

}  // namespace detail

// Annotated points falling inside a rect, remapped to a out_w×out_h frame
// (the coordinate change that resizing the crop applies to its contents).
inline PointAnnotation crop_annotation(const PointAnnotation& ann, const Rect& r, int out_h,
                                       int out_w) {
    PointAnnotation c;
    c.image_id = ann.image_id + r.str();
    c.width = out_w;
    c.height = out_h;
    const double sx = double(out_w) / r.w(), sy = double(out_h) / r.h();
    for (const auto& p : ann.points)
        if (r.contains(p[0], p[1])) c.points.push_back({(p[0] - r.x0) * sx, (p[1] - r.y0) * sy});
    return c;
}

// Co-centered crops of one patch at each scale, resized to the network input
// size; ground-truth counts attached when an annotation is supplied.
template <typename T>
PatchPyramid<T> build_pyramid(const Grid<T>& image, const Rect& patch_rect,
                              std::vector<double> scales, int input_h, int input_w,
                              const PointAnnotation* ann = nullptr) {
    if (patch_rect.w() < 1 || patch_rect.h() < 1)
        throw std::invalid_argument("build_pyramid: empty patch rect");
    PatchPyramid<T> pyr;
    pyr.scales = detail::normalize_scales(std::move(scales));

    for (double s : pyr.scales) {
        Rect r = detail::scaled_rect(patch_rect, s);
        if (r.w() < 8 || r.h() < 8)
            throw std::invalid_argument("build_pyramid: crop " + r.str() + " at scale " +
                                        std::to_string(s) + " is smaller than 8 px");
        PyramidLevel<T> lvl;
        lvl.rect = r;
        lvl.crop = resize_bilinear(extract_rect(image, r), input_h, input_w);
        if (ann) {
            int cnt = 0;
            for (const auto& p : ann->points)
                if (r.contains(p[0], p[1])) ++cnt;
            lvl.gt_count = double(cnt);
        }
        pyr.levels.push_back(std::move(lvl));
    }
    return pyr;
}

}  // namespace coda
