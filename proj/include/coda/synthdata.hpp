#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "coda/grid.hpp"
#include "coda/io.hpp"
#include "coda/rng.hpp"

namespace coda {

// Fully seeded recipe for one domain's scenes.
struct DomainSpec {
    // object count per image
    bool poisson = true;
    double lambda = 40.0;  // Poisson mean
    int uniform_a = 0;     // inclusive range when poisson == false
    int uniform_b = 0;

    double r_min = 2.0;  // blob radius range, px
    double r_max = 3.0;
    double intensity_min = 0.6;
    double intensity_max = 1.0;

    enum class Background { Flat, Gradient, Noise } background = Background::Flat;
    double noise_sigma = 0.05;
    double bg_level = 0.15;

    int width = 256;
    int height = 256;
    std::uint64_t seed = 1;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                ok = true;
                break;
            }
        if (!ok) throw std::runtime_error(where + ": unknown key '" + it.key() + "'");
    }
}

}  // namespace detail

inline nlohmann::json domain_spec_json(const DomainSpec& s) {
    nlohmann::json j;
    if (s.poisson)
        j["count"] = {{"type", "poisson"}, {"lambda", s.lambda}};
    else
        j["count"] = {{"type", "uniform"}, {"a", s.uniform_a}, {"b", s.uniform_b}};
    j["radius"] = {s.r_min, s.r_max};
    j["intensity"] = {s.intensity_min, s.intensity_max};
    switch (s.background) {
        case DomainSpec::Background::Flat: j["background"] = {{"type", "flat"}}; break;
        case DomainSpec::Background::Gradient: j["background"] = {{"type", "gradient"}}; break;
        case DomainSpec::Background::Noise:
            j["background"] = {{"type", "noise"}, {"sigma", s.noise_sigma}};
            break;
    }
    j["bg_level"] = s.bg_level;
    j["width"] = s.width;
    j["height"] = s.height;
    j["seed"] = s.seed;
    return j;
}

inline DomainSpec parse_domain_spec(const nlohmann::json& j, const std::string& where = "spec") {
    if (!j.is_object()) throw std::runtime_error(where + ": must be an object");
    detail::reject_unknown_keys(
        j, {"count", "radius", "intensity", "background", "bg_level", "width", "height", "seed"},
        where);
    DomainSpec s;
    try {
        if (j.contains("count")) {
            const auto& c = j.at("count");
            detail::reject_unknown_keys(c, {"type", "lambda", "a", "b"}, where + ".count");
            const std::string type = c.at("type").get<std::string>();
            if (type == "poisson") {
                s.poisson = true;
                s.lambda = c.at("lambda").get<double>();
                if (s.lambda < 0) throw std::runtime_error(where + ".count.lambda must be >= 0");
            } else if (type == "uniform") {
                s.poisson = false;
                s.uniform_a = c.at("a").get<int>();
                s.uniform_b = c.at("b").get<int>();
                if (s.uniform_a < 0 || s.uniform_b < s.uniform_a)
                    throw std::runtime_error(where + ".count: need 0 <= a <= b");
            } else {
                throw std::runtime_error(where + ".count.type must be poisson or uniform");
            }
        }
        if (j.contains("radius")) {
            s.r_min = j.at("radius").at(0).get<double>();
            s.r_max = j.at("radius").at(1).get<double>();
        }
        if (j.contains("intensity")) {
            s.intensity_min = j.at("intensity").at(0).get<double>();
            s.intensity_max = j.at("intensity").at(1).get<double>();
        }
        if (j.contains("background")) {
            const auto& b = j.at("background");
            detail::reject_unknown_keys(b, {"type", "sigma"}, where + ".background");
            const std::string type = b.at("type").get<std::string>();
            if (type == "flat")
                s.background = DomainSpec::Background::Flat;
            else if (type == "gradient")
                s.background = DomainSpec::Background::Gradient;
            else if (type == "noise") {
                s.background = DomainSpec::Background::Noise;
                s.noise_sigma = b.at("sigma").get<double>();
            } else {
                throw std::runtime_error(where + ".background.type must be flat/gradient/noise");
            }
        }
        if (j.contains("bg_level")) s.bg_level = j.at("bg_level").get<double>();
        if (j.contains("width")) s.width = j.at("width").get<int>();
        if (j.contains("height")) s.height = j.at("height").get<int>();
        if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(where + ": " + e.what());
    }
    if (s.r_min <= 0 || s.r_max < s.r_min)
        throw std::runtime_error(where + ".radius: need 0 < r_min <= r_max");
    if (s.width < 1 || s.height < 1) throw std::runtime_error(where + ": empty image size");
    return s;
}

// The built-in domain-shift pair: many small objects vs few large ones.
inline std::pair<DomainSpec, DomainSpec> preset_shift_pair() {
    DomainSpec source;  // dense-small
    source.poisson = true;
    source.lambda = 40.0;
    source.r_min = 2.0;
    source.r_max = 3.0;
    DomainSpec target = source;  // sparse-large
    target.lambda = 10.0;
    target.r_min = 5.0;
    target.r_max = 8.0;
    return {source, target};
}

// One rendered scene: image plus exact object centers.
struct SynthImage {
    ImageU8 image;
    PointAnnotation ann;
};

// Deterministic per (spec.seed, index): every random draw for image i comes
// from its own stream.
inline SynthImage generate_image(const DomainSpec& spec, int index) {
    if (2.0 * spec.r_max >= double(std::min(spec.width, spec.height)))
        throw std::invalid_argument("generate_image: blobs larger than the image");
    Rng rng(mix_seed(spec.seed, 0x5ce7e, std::uint64_t(index)));

    const int W = spec.width, H = spec.height;
    std::vector<double> canvas(std::size_t(W) * H, 0.0);

    switch (spec.background) {
        case DomainSpec::Background::Flat:
            std::fill(canvas.begin(), canvas.end(), spec.bg_level);
            break;
        case DomainSpec::Background::Gradient:
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    canvas[std::size_t(y) * W + x] =
                        spec.bg_level * (0.5 + 0.5 * (double(x) / W + double(y) / H));
            break;
        case DomainSpec::Background::Noise:
            for (auto& v : canvas)
                v = std::clamp(spec.bg_level + rng.normal() * spec.noise_sigma, 0.0, 1.0);
            break;
    }

    int k;
    if (spec.poisson)
        k = int(rng.poisson(spec.lambda));
    else
        k = spec.uniform_a + int(rng.uniform_int(std::int64_t(spec.uniform_b - spec.uniform_a + 1)));

    SynthImage out;
    out.ann.width = W;
    out.ann.height = H;
    for (int b = 0; b < k; ++b) {
        const double r = rng.uniform(spec.r_min, spec.r_max);
        const double cx = rng.uniform(r, double(W) - r);
        const double cy = rng.uniform(r, double(H) - r);
        const double inten = rng.uniform(spec.intensity_min, spec.intensity_max);
        // compactly supported radial bump: intensity·(1 − (d/r)²)²
        const int x0 = std::max(0, int(std::floor(cx - r)));
        const int x1 = std::min(W - 1, int(std::ceil(cx + r)));
        const int y0 = std::max(0, int(std::floor(cy - r)));
        const int y1 = std::min(H - 1, int(std::ceil(cy + r)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double dx = (x + 0.5) - cx, dy = (y + 0.5) - cy;
                const double q = (dx * dx + dy * dy) / (r * r);
                if (q >= 1.0) continue;
                canvas[std::size_t(y) * W + x] += inten * (1.0 - q) * (1.0 - q);
            }
        out.ann.points.push_back({cx, cy});
    }

    out.image.width = W;
    out.image.height = H;
    out.image.channels = 1;
    out.image.pix.resize(canvas.size());
    for (std::size_t i = 0; i < canvas.size(); ++i)
        out.image.pix[i] = std::uint8_t(std::lround(std::clamp(canvas[i], 0.0, 1.0) * 255.0));
    return out;
}

inline std::vector<SynthImage> generate_domain(const DomainSpec& spec, int n_images) {
    if (n_images < 1) throw std::invalid_argument("generate_domain: n_images must be >= 1");
    std::vector<SynthImage> out;
    out.reserve(std::size_t(n_images));
    for (int i = 0; i < n_images; ++i) {
        SynthImage im = generate_image(spec, i);
        char buf[32];
        std::snprintf(buf, sizeof buf, "img_%05d", i);
        im.ann.image_id = buf;
        out.push_back(std::move(im));
    }
    return out;
}

}  // namespace coda
