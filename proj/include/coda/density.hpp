#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "coda/grid.hpp"
#include "coda/io.hpp"

namespace coda {

// How the per-point Gaussian width is chosen.
struct SigmaSpec {
    bool adaptive = false;  // true: width from k-nearest-neighbor spacing
    double sigma = 4.0;     // fixed width; also the fallback when too few points
    int k = 3;
    double beta = 0.3;
    double sigma_min = 0.5;
    double sigma_max = 15.0;
};

struct DensityMap {
    Grid<double> grid;     // 1×1×(H/scale)×(W/scale)
    int scale_factor = 1;  // downsampling relative to the image
};

// Per-point width: beta times the mean distance to the k nearest other
// points, clamped. Needs at least k+1 points so every point has k neighbors.
inline std::vector<double> adaptive_sigma(const std::vector<std::array<double, 2>>& pts, int k,
                                          double beta, double sigma_min = 0.5,
                                          double sigma_max = 15.0) {
    if (k < 1) throw std::invalid_argument("adaptive_sigma: k must be >= 1");
    if (beta <= 0) throw std::invalid_argument("adaptive_sigma: beta must be > 0");
    if (int(pts.size()) < k + 1)
        throw std::invalid_argument("adaptive_sigma: need at least k+1 points, got " +
                                    std::to_string(pts.size()));
    std::vector<double> sigmas(pts.size());
    std::vector<double> dists;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        dists.clear();
        for (std::size_t j = 0; j < pts.size(); ++j) {
            if (j == i) continue;
            double dx = pts[i][0] - pts[j][0];
            double dy = pts[i][1] - pts[j][1];
            dists.push_back(std::sqrt(dx * dx + dy * dy));
        }
        std::partial_sort(dists.begin(), dists.begin() + k, dists.end());
        double mean = 0;
        for (int t = 0; t < k; ++t) mean += dists[std::size_t(t)];
        mean /= k;
        sigmas[i] = std::clamp(beta * mean, sigma_min, sigma_max);
    }
    return sigmas;
}

// One truncated Gaussian per annotated point, each renormalized after
// truncation so its mass is exactly 1; optionally block-sum-downsampled.
// The integral therefore equals the point count at every output scale.
inline DensityMap generate_density(const PointAnnotation& ann, const SigmaSpec& mode,
                                   int out_scale = 1) {
    if (out_scale != 1 && out_scale != 2 && out_scale != 4 && out_scale != 8)
        throw std::invalid_argument("generate_density: out_scale must be 1, 2, 4, or 8");
    if (ann.width % out_scale != 0 || ann.height % out_scale != 0)
        throw std::invalid_argument("generate_density: image dims not divisible by out_scale");
    if (!mode.adaptive && mode.sigma <= 0)
        throw std::invalid_argument("generate_density: fixed sigma must be > 0");
    validate_annotation(ann, "generate_density(" + ann.image_id + ")");

    const int H = ann.height, W = ann.width;
    Grid<double> full(Shape{1, 1, H, W}, 0.0);

    std::vector<double> sigmas;
    if (mode.adaptive && int(ann.points.size()) >= mode.k + 1) {
        sigmas = adaptive_sigma(ann.points, mode.k, mode.beta, mode.sigma_min, mode.sigma_max);
    } else {
        // fixed mode, or adaptive fallback when neighbors are undefined
        sigmas.assign(ann.points.size(), mode.sigma);
    }

    double* m = full.plane(0, 0);
    std::vector<double> kernel;
    for (std::size_t p = 0; p < ann.points.size(); ++p) {
        const double px = ann.points[p][0], py = ann.points[p][1];
        const double sg = sigmas[p];
        const int R = int(std::ceil(3.0 * sg));
        // pixels whose centers fall in the square window of half-width R
        const int x0 = std::max(0, int(std::floor(px - R)));
        const int x1 = std::min(W - 1, int(std::ceil(px + R)));
        const int y0 = std::max(0, int(std::floor(py - R)));
        const int y1 = std::min(H - 1, int(std::ceil(py + R)));
        const int kw = x1 - x0 + 1, kh = y1 - y0 + 1;
        kernel.assign(std::size_t(kw) * kh, 0.0);
        const double inv2s2 = 1.0 / (2.0 * sg * sg);
        double ksum = 0.0;
        for (int iy = y0; iy <= y1; ++iy) {
            const double dy = (iy + 0.5) - py;
            for (int ix = x0; ix <= x1; ++ix) {
                const double dx = (ix + 0.5) - px;
                const double w = std::exp(-(dx * dx + dy * dy) * inv2s2);
                kernel[std::size_t(iy - y0) * kw + (ix - x0)] = w;
                ksum += w;
            }
        }
        const double inv = 1.0 / ksum;  // renormalize: truncated mass back to 1
        for (int iy = y0; iy <= y1; ++iy)
            for (int ix = x0; ix <= x1; ++ix)
                m[std::size_t(iy) * W + ix] += kernel[std::size_t(iy - y0) * kw + (ix - x0)] * inv;
    }

    DensityMap out;
    out.scale_factor = out_scale;
    out.grid = out_scale == 1 ? std::move(full) : block_sum_downsample(full, out_scale);
    return out;
}

// Binary ROI mask for an annotation: 1 inside, 0 outside. All-ones when the
// annotation carries no mask.
inline Grid<double> load_roi_mask(const PointAnnotation& ann, const std::string& base_dir) {
    if (ann.roi_path.empty()) return Grid<double>(Shape{1, 1, ann.height, ann.width}, 1.0);
    std::string path = base_dir.empty() ? ann.roi_path : base_dir + "/" + ann.roi_path;
    ImageU8 img = read_pnm(path);
    if (img.channels != 1 || img.width != ann.width || img.height != ann.height)
        throw std::runtime_error("roi mask " + path + " does not match annotation dims");
    Grid<double> mask(Shape{1, 1, ann.height, ann.width});
    for (std::size_t i = 0; i < mask.data.size(); ++i)
        mask.data[i] = img.pix[i] >= 128 ? 1.0 : 0.0;
    return mask;
}

}  // namespace coda
