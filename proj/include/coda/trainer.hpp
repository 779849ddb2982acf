#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coda/density.hpp"
#include "coda/grid.hpp"
#include "coda/io.hpp"
#include "coda/losses.hpp"
#include "coda/metrics.hpp"
#include "coda/nets.hpp"
#include "coda/optim.hpp"
#include "coda/pyramid.hpp"
#include "coda/rng.hpp"
#include "coda/synthdata.hpp"
#include "coda/tape.hpp"

namespace coda {

struct TrainConfig {
    int input_h = 128;
    int input_w = 128;
    std::vector<double> scales = {0.4, 0.6, 0.8};  // 1.0 appended when the pyramid is built
    int batch = 1;                                 // images per domain per step
    std::int64_t stage1_steps = 500;
    std::int64_t stage2_steps = 200;

    std::string stage1_optimizer = "sgd";  // "sgd" | "adam"
    double stage1_lr = 1e-6;
    std::string stage2_g_optimizer = "sgd";
    double lr_g = 1e-6;  // generator, stage 2
    double lr_d = 1e-3;  // discriminator Adam base rate (poly-decayed)
    double poly_power = 0.9;
    AdamConfig adam;  // β1=0.9, β2=0.99, eps=1e-8, weight_decay=1e-4

    LossWeights weights;  // λ1=λ2=λ3=0.001, ε=0
    double patch_fraction = 0.5;
    SigmaSpec sigma;  // ground-truth kernel mode
    std::uint64_t seed = 1;
    std::int64_t eval_every = 100;

    CountingNetConfig net;
    DiscriminatorConfig disc;
};

// ---- strict JSON config ----

inline nlohmann::json train_config_json(const TrainConfig& c) {
    nlohmann::json j;
    j["input_size"] = {c.input_h, c.input_w};
    j["scales"] = c.scales;
    j["batch"] = c.batch;
    j["stage1_steps"] = c.stage1_steps;
    j["stage2_steps"] = c.stage2_steps;
    j["stage1_optimizer"] = c.stage1_optimizer;
    j["stage1_lr"] = c.stage1_lr;
    j["stage2_g_optimizer"] = c.stage2_g_optimizer;
    j["lr_g"] = c.lr_g;
    j["lr_d"] = c.lr_d;
    j["poly_power"] = c.poly_power;
    j["adam"] = {{"beta1", c.adam.beta1},
                 {"beta2", c.adam.beta2},
                 {"eps", c.adam.eps},
                 {"weight_decay", c.adam.weight_decay}};
    j["lambda1"] = c.weights.lambda1;
    j["lambda2"] = c.weights.lambda2;
    j["lambda3"] = c.weights.lambda3;
    j["epsilon"] = c.weights.epsilon;
    j["patch_fraction"] = c.patch_fraction;
    j["sigma"] = {{"mode", c.sigma.adaptive ? "adaptive" : "fixed"}, {"sigma", c.sigma.sigma},
                  {"k", c.sigma.k},         {"beta", c.sigma.beta},
                  {"min", c.sigma.sigma_min}, {"max", c.sigma.sigma_max}};
    j["seed"] = c.seed;
    j["eval_every"] = c.eval_every;
    j["net"] = {{"in_channels", c.net.in_channels},
                {"front_blocks", c.net.front_blocks},
                {"backend_channels", c.net.backend_channels},
                {"backend_dilation", c.net.backend_dilation}};
    j["disc"] = {{"channels", c.disc.channels}, {"leaky_slope", c.disc.leaky_slope}};
    return j;
}

inline TrainConfig parse_train_config(const nlohmann::json& j, const std::string& where = "config") {
    if (!j.is_object()) throw std::runtime_error(where + ": must be an object");
    detail::reject_unknown_keys(
        j,
        {"input_size", "scales", "batch", "stage1_steps", "stage2_steps", "stage1_optimizer",
         "stage1_lr", "stage2_g_optimizer", "lr_g", "lr_d", "poly_power", "adam", "lambda1",
         "lambda2", "lambda3", "epsilon", "patch_fraction", "sigma", "seed", "eval_every", "net",
         "disc"},
        where);
    TrainConfig c;
    try {
        if (j.contains("input_size")) {
            c.input_h = j.at("input_size").at(0).get<int>();
            c.input_w = j.at("input_size").at(1).get<int>();
        }
        if (j.contains("scales")) c.scales = j.at("scales").get<std::vector<double>>();
        if (j.contains("batch")) c.batch = j.at("batch").get<int>();
        if (j.contains("stage1_steps")) c.stage1_steps = j.at("stage1_steps").get<std::int64_t>();
        if (j.contains("stage2_steps")) c.stage2_steps = j.at("stage2_steps").get<std::int64_t>();
        if (j.contains("stage1_optimizer"))
            c.stage1_optimizer = j.at("stage1_optimizer").get<std::string>();
        if (j.contains("stage1_lr")) c.stage1_lr = j.at("stage1_lr").get<double>();
        if (j.contains("stage2_g_optimizer"))
            c.stage2_g_optimizer = j.at("stage2_g_optimizer").get<std::string>();
        if (j.contains("lr_g")) c.lr_g = j.at("lr_g").get<double>();
        if (j.contains("lr_d")) c.lr_d = j.at("lr_d").get<double>();
        if (j.contains("poly_power")) c.poly_power = j.at("poly_power").get<double>();
        if (j.contains("adam")) {
            const auto& a = j.at("adam");
            detail::reject_unknown_keys(a, {"beta1", "beta2", "eps", "weight_decay"},
                                        where + ".adam");
            if (a.contains("beta1")) c.adam.beta1 = a.at("beta1").get<double>();
            if (a.contains("beta2")) c.adam.beta2 = a.at("beta2").get<double>();
            if (a.contains("eps")) c.adam.eps = a.at("eps").get<double>();
            if (a.contains("weight_decay")) c.adam.weight_decay = a.at("weight_decay").get<double>();
        }
        if (j.contains("lambda1")) c.weights.lambda1 = j.at("lambda1").get<double>();
        if (j.contains("lambda2")) c.weights.lambda2 = j.at("lambda2").get<double>();
        if (j.contains("lambda3")) c.weights.lambda3 = j.at("lambda3").get<double>();
        if (j.contains("epsilon")) c.weights.epsilon = j.at("epsilon").get<double>();
        if (j.contains("patch_fraction")) c.patch_fraction = j.at("patch_fraction").get<double>();
        if (j.contains("sigma")) {
            const auto& s = j.at("sigma");
            detail::reject_unknown_keys(s, {"mode", "sigma", "k", "beta", "min", "max"},
                                        where + ".sigma");
            if (s.contains("mode")) {
                const std::string m = s.at("mode").get<std::string>();
                if (m == "adaptive")
                    c.sigma.adaptive = true;
                else if (m == "fixed")
                    c.sigma.adaptive = false;
                else
                    throw std::runtime_error(where + ".sigma.mode must be fixed or adaptive");
            }
            if (s.contains("sigma")) c.sigma.sigma = s.at("sigma").get<double>();
            if (s.contains("k")) c.sigma.k = s.at("k").get<int>();
            if (s.contains("beta")) c.sigma.beta = s.at("beta").get<double>();
            if (s.contains("min")) c.sigma.sigma_min = s.at("min").get<double>();
            if (s.contains("max")) c.sigma.sigma_max = s.at("max").get<double>();
        }
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("eval_every")) c.eval_every = j.at("eval_every").get<std::int64_t>();
        if (j.contains("net")) {
            const auto& n = j.at("net");
            detail::reject_unknown_keys(
                n, {"in_channels", "front_blocks", "backend_channels", "backend_dilation"},
                where + ".net");
            if (n.contains("in_channels")) c.net.in_channels = n.at("in_channels").get<int>();
            if (n.contains("front_blocks"))
                c.net.front_blocks = n.at("front_blocks").get<std::vector<std::vector<int>>>();
            if (n.contains("backend_channels"))
                c.net.backend_channels = n.at("backend_channels").get<int>();
            if (n.contains("backend_dilation"))
                c.net.backend_dilation = n.at("backend_dilation").get<int>();
        }
        if (j.contains("disc")) {
            const auto& d = j.at("disc");
            detail::reject_unknown_keys(d, {"channels", "leaky_slope"}, where + ".disc");
            if (d.contains("channels")) c.disc.channels = d.at("channels").get<std::vector<int>>();
            if (d.contains("leaky_slope")) c.disc.leaky_slope = d.at("leaky_slope").get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(where + ": " + e.what());
    }
    // basic sanity
    if (c.input_h < 8 || c.input_w < 8) throw std::runtime_error(where + ": input_size too small");
    if (c.batch < 1) throw std::runtime_error(where + ": batch must be >= 1");
    if (c.stage1_steps < 0 || c.stage2_steps < 0)
        throw std::runtime_error(where + ": step counts must be >= 0");
    if (c.stage1_optimizer != "sgd" && c.stage1_optimizer != "adam")
        throw std::runtime_error(where + ": stage1_optimizer must be sgd or adam");
    if (c.stage2_g_optimizer != "sgd" && c.stage2_g_optimizer != "adam")
        throw std::runtime_error(where + ": stage2_g_optimizer must be sgd or adam");
    if (!(c.patch_fraction > 0.0 && c.patch_fraction <= 1.0))
        throw std::runtime_error(where + ": patch_fraction must be in (0, 1]");
    if (c.weights.lambda1 < 0 || c.weights.lambda2 < 0 || c.weights.lambda3 < 0 ||
        c.weights.epsilon < 0)
        throw std::runtime_error(where + ": loss weights must be >= 0");
    if (c.eval_every < 1) throw std::runtime_error(where + ": eval_every must be >= 1");
    return c;
}

inline TrainConfig load_train_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("config " + path + ": " + e.what());
    }
    return parse_train_config(j, "config " + path);
}

// ---- datasets ----

struct Dataset {
    std::vector<Grid<float>> images;  // 1×C×H×W in [0,1]
    std::vector<PointAnnotation> anns;  // empty when unannotated

    bool annotated() const { return !anns.empty(); }
    std::size_t size() const { return images.size(); }
};

inline Dataset dataset_from_synth(const std::vector<SynthImage>& synth, bool keep_annotations) {
    Dataset d;
    for (const auto& s : synth) {
        d.images.push_back(image_to_grid<float>(s.image));
        if (keep_annotations) d.anns.push_back(s.ann);
    }
    return d;
}

// Directory layout: DIR/images/<image_id>.png (or .pgm) plus optional
// DIR/annotations.json. Without annotations, images load in sorted name order.
inline Dataset load_dataset(const std::string& dir, bool need_annotations) {
    namespace fs = std::filesystem;
    Dataset d;
    const fs::path ann_path = fs::path(dir) / "annotations.json";
    const fs::path img_dir = fs::path(dir) / "images";
    if (!fs::is_directory(img_dir))
        throw std::runtime_error("dataset " + dir + ": missing images/ directory");
    if (fs::exists(ann_path)) {
        d.anns = load_annotations(ann_path.string());
        std::vector<std::string> missing;
        for (const auto& a : d.anns) {
            fs::path png = img_dir / (a.image_id + ".png");
            fs::path pgm = img_dir / (a.image_id + ".pgm");
            if (fs::exists(png))
                d.images.push_back(image_to_grid<float>(read_image(png.string())));
            else if (fs::exists(pgm))
                d.images.push_back(image_to_grid<float>(read_image(pgm.string())));
            else
                missing.push_back(a.image_id);
        }
        if (!missing.empty()) {
            std::string msg = "dataset " + dir + ": missing image files:";
            for (const auto& m : missing) msg += " " + m;
            throw std::runtime_error(msg);
        }
    } else {
        if (need_annotations)
            throw std::runtime_error("dataset " + dir + ": annotations.json required but absent");
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(img_dir)) {
            const std::string ext = e.path().extension().string();
            if (ext == ".png" || ext == ".pgm") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) d.images.push_back(image_to_grid<float>(read_image(f.string())));
    }
    if (d.images.empty()) throw std::runtime_error("dataset " + dir + ": no images");
    return d;
}

// ---- checkpoint bundle ----

struct TrainerState {
    ModelParams<float> cn;
    ModelParams<float> disc;   // empty before stage 2 touches it
    AdamState<float> opt_g;    // populated when a stage uses Adam for the generator
    AdamState<float> opt_d;
    int stage = 0;             // last stage that ran (1 or 2)
    std::int64_t step = 0;     // completed steps within that stage
};

namespace detail {

inline void append_scalar_meta(std::vector<NamedArray>& arrays, const std::string& name,
                               double v) {
    arrays.push_back(NamedArray{name, {1}, {float(v)}});
}

inline std::optional<double> find_scalar_meta(const std::vector<NamedArray>& arrays,
                                              const std::string& name) {
    for (const auto& a : arrays)
        if (a.name == name && a.values.size() == 1) return double(a.values[0]);
    return std::nullopt;
}

template <typename T>
void append_adam_arrays(const AdamState<T>& st, const ModelParams<T>& owner,
                        const std::string& prefix, std::vector<NamedArray>& out) {
    if (st.m.empty()) return;
    ModelParams<T> m, v;
    m.names = owner.names;
    m.grids = st.m;
    v.names = owner.names;
    v.grids = st.v;
    append_param_arrays(m, prefix + "m.", out);
    append_param_arrays(v, prefix + "v.", out);
}

template <typename T>
AdamState<T> extract_adam_arrays(const std::vector<NamedArray>& arrays,
                                 const std::string& prefix, const ModelParams<T>& owner,
                                 std::int64_t t) {
    ModelParams<T> m = extract_param_arrays<T>(arrays, prefix + "m.");
    ModelParams<T> v = extract_param_arrays<T>(arrays, prefix + "v.");
    if (m.count() == 0) return {};
    if (m.count() != owner.count() || v.count() != owner.count())
        throw std::runtime_error("checkpoint: optimizer state count mismatch under " + prefix);
    AdamState<T> st;
    st.m = std::move(m.grids);
    st.v = std::move(v.grids);
    st.t = t;
    for (std::size_t i = 0; i < owner.count(); ++i)
        if (!(st.m[i].shape == owner.grids[i].shape))
            throw std::runtime_error("checkpoint: optimizer state shape mismatch at " +
                                     owner.names[i]);
    return st;
}

}  // namespace detail

inline void save_train_checkpoint(const std::string& path, const TrainerState& st) {
    std::vector<NamedArray> arrays;
    append_param_arrays(st.cn, "cn.", arrays);
    if (st.disc.count() > 0) append_param_arrays(st.disc, "disc.", arrays);
    detail::append_adam_arrays(st.opt_g, st.cn, "opt.g.", arrays);
    if (st.disc.count() > 0) detail::append_adam_arrays(st.opt_d, st.disc, "opt.d.", arrays);
    detail::append_scalar_meta(arrays, "meta.stage", double(st.stage));
    detail::append_scalar_meta(arrays, "meta.step", double(st.step));
    detail::append_scalar_meta(arrays, "meta.opt_g_t", double(st.opt_g.t));
    detail::append_scalar_meta(arrays, "meta.opt_d_t", double(st.opt_d.t));
    save_checkpoint(path, arrays);
}

inline TrainerState load_train_checkpoint(const std::string& path) {
    const auto arrays = load_checkpoint(path);
    TrainerState st;
    st.cn = extract_param_arrays<float>(arrays, "cn.");
    if (st.cn.count() == 0) throw std::runtime_error("checkpoint " + path + ": no cn.* arrays");
    st.disc = extract_param_arrays<float>(arrays, "disc.");
    st.stage = int(detail::find_scalar_meta(arrays, "meta.stage").value_or(0));
    st.step = std::int64_t(detail::find_scalar_meta(arrays, "meta.step").value_or(0));
    const auto gt = std::int64_t(detail::find_scalar_meta(arrays, "meta.opt_g_t").value_or(0));
    const auto dt = std::int64_t(detail::find_scalar_meta(arrays, "meta.opt_d_t").value_or(0));
    st.opt_g = detail::extract_adam_arrays<float>(arrays, "opt.g.", st.cn, gt);
    if (st.disc.count() > 0)
        st.opt_d = detail::extract_adam_arrays<float>(arrays, "opt.d.", st.disc, dt);
    return st;
}

// ---- training internals ----

namespace detail {

constexpr std::uint64_t kStage1Tag = 0xC0DA0001ull;
constexpr std::uint64_t kStage2Tag = 0xC0DA0002ull;

// Ground truth for one crop: points remapped into the resized frame, rendered
// at input resolution, then block-summed to the network's output resolution.
inline Grid<float> crop_gt_map(const PointAnnotation& ann, const Rect& rect, int input_h,
                               int input_w, const SigmaSpec& sigma, int out_scale) {
    const PointAnnotation ca = crop_annotation(ann, rect, input_h, input_w);
    return cast<float>(generate_density(ca, sigma, out_scale).grid);
}

struct StepLossRecord {
    double l_dens = 0, l_disc = 0, l_adv = 0, l_rank = 0, lr = 0;
};

[[noreturn]] inline void abort_non_finite(const TrainerState& st, const std::string& what,
                                          const std::string& dump_path) {
    if (!dump_path.empty()) save_train_checkpoint(dump_path, st);
    throw std::runtime_error("training aborted: non-finite " + what +
                             (dump_path.empty() ? "" : "; state dumped to " + dump_path));
}

}  // namespace detail

// Stage 1: supervised pretraining of the counting network on source patches.
// `resume` continues a stage-1 checkpoint; the per-step RNG streams make the
// continuation identical to an uninterrupted run.
inline TrainerState pretrain(const TrainConfig& cfg, const Dataset& source,
                             const TrainerState* resume = nullptr, std::ostream* log = nullptr,
                             const std::string& abort_dump_path = "",
                             std::int64_t stop_after = -1) {
    if (source.size() == 0) throw std::invalid_argument("pretrain: empty source dataset");
    if (!source.annotated()) throw std::invalid_argument("pretrain: source must be annotated");

    TrainerState st;
    if (resume) {
        st = *resume;
        validate_params(counting_layers(cfg.net), st.cn);
        if (st.stage != 1) throw std::invalid_argument("pretrain: checkpoint is not stage-1");
    } else {
        st.cn = init_params<float>(counting_layers(cfg.net), mix_seed(cfg.seed, 0xC4));
        st.stage = 1;
        st.step = 0;
        if (cfg.stage1_optimizer == "adam") st.opt_g = adam_init(st.cn);
    }
    const int out_scale = cfg.net.out_scale();
    const std::int64_t until =
        stop_after < 0 ? cfg.stage1_steps : std::min(stop_after, cfg.stage1_steps);

    for (std::int64_t t = st.step; t < until; ++t) {
        Rng rng(mix_seed(cfg.seed, detail::kStage1Tag, std::uint64_t(t)));

        Tape<float> tape;
        const std::vector<Var> pvars = leaf_params(tape, st.cn);
        std::vector<Var> preds;
        std::vector<Grid<float>> gts;
        for (int b = 0; b < cfg.batch; ++b) {
            const std::size_t idx = std::size_t(rng.uniform_int(std::int64_t(source.size())));
            const Grid<float>& img = source.images[idx];
            const Rect rect = sample_patch(img.shape.w, img.shape.h, rng, cfg.patch_fraction);
            Grid<float> crop = resize_bilinear(extract_rect(img, rect), cfg.input_h, cfg.input_w);
            preds.push_back(counting_forward(tape, cfg.net, pvars, tape.leaf(std::move(crop))));
            gts.push_back(detail::crop_gt_map(source.anns[idx], rect, cfg.input_h, cfg.input_w,
                                              cfg.sigma, out_scale));
        }
        Var loss = density_loss_tape(tape, preds, gts);
        const double l_dens = double(tape.value(loss).data[0]);
        if (!std::isfinite(l_dens)) detail::abort_non_finite(st, "stage-1 loss", abort_dump_path);
        tape.backward(loss);

        std::vector<Grid<float>> grads;
        grads.reserve(pvars.size());
        for (Var v : pvars) grads.push_back(tape.grad(v));
        if (cfg.stage1_optimizer == "adam")
            adam_step(st.cn, grads, st.opt_g, cfg.stage1_lr, cfg.adam);
        else
            sgd_step(st.cn, grads, cfg.stage1_lr);
        st.step = t + 1;

        if (log) {
            nlohmann::json line;
            line["stage"] = 1;
            line["step"] = t;
            line["l_dens"] = l_dens;
            line["lr"] = cfg.stage1_lr;
            (*log) << line.dump() << "\n";
        }
    }
    return st;
}

// Count prediction for one full image. Dims not divisible by the network's
// output scale are reflection-padded right/bottom; the pad region is excluded
// from the count by zero-extending the ROI, and the emitted map is already
// ROI-masked so its sum equals the count.
inline std::pair<Grid<float>, double> predict(const CountingNetConfig& cfg,
                                              const ModelParams<float>& params,
                                              const Grid<float>& image,
                                              const Grid<float>* roi = nullptr) {
    validate_params(counting_layers(cfg), params);
    const int s = cfg.out_scale();
    const int H = image.shape.h, W = image.shape.w;
    if (H < s || W < s)
        throw std::invalid_argument("predict: image " + image.shape.str() +
                                    " smaller than the network's output scale " +
                                    std::to_string(s));
    if (roi && !(roi->shape == Shape{1, 1, H, W}))
        throw std::invalid_argument("predict: roi must be 1x1x" + std::to_string(H) + "x" +
                                    std::to_string(W));
    const int ph = (s - H % s) % s, pw = (s - W % s) % s;

    Grid<float> padded(Shape{image.shape.n, image.shape.c, H + ph, W + pw});
    for (int n = 0; n < image.shape.n; ++n)
        for (int c = 0; c < image.shape.c; ++c) {
            const float* src = image.plane(n, c);
            float* dst = padded.plane(n, c);
            for (int y = 0; y < H + ph; ++y) {
                const int sy = y < H ? y : 2 * H - 2 - y;  // reflect without edge repeat
                for (int x = 0; x < W + pw; ++x) {
                    const int sx = x < W ? x : 2 * W - 2 - x;
                    dst[std::size_t(y) * (W + pw) + x] = src[std::size_t(sy) * W + sx];
                }
            }
        }

    Grid<float> roi_padded(Shape{1, 1, H + ph, W + pw}, 0.0f);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            roi_padded.plane(0, 0)[std::size_t(y) * (W + pw) + x] =
                roi ? roi->plane(0, 0)[std::size_t(y) * W + x] : 1.0f;

    Grid<float> density = counting_apply(cfg, params, padded);
    Grid<float> roi_ds = block_mean_downsample(roi_padded, s);
    Grid<float> masked = hadamard(density, roi_ds);
    const double count = grid_sum(masked);
    return {std::move(masked), count};
}

// Stage 2: adversarial adaption. Per step: sample one patch per domain, build
// both scale pyramids, run the counting network on every crop; (a) update the
// discriminator on detached density maps (source=1, target=0, λ1·L_disc,
// poly-decayed Adam); (b) update the generator on
// L_dens(src) + λ2·L_adv(tgt) + λ3·(L_rank(src)+L_rank(tgt)) with the fresh
// discriminator parameters held constant.
// `observe`, when set, is called with phase 0 right after each discriminator
// update and phase 1 right after each generator update (for isolation checks).
inline TrainerState adapt(const TrainConfig& cfg, TrainerState st, const Dataset& source,
                          const Dataset& target, const Dataset* eval_split = nullptr,
                          std::ostream* log = nullptr, const std::string& abort_dump_path = "",
                          std::int64_t stop_after = -1,
                          const std::function<void(int, const TrainerState&)>& observe = {}) {
    if (source.size() == 0 || !source.annotated())
        throw std::invalid_argument("adapt: annotated source dataset required");
    if (target.size() == 0) throw std::invalid_argument("adapt: empty target dataset");
    validate_params(counting_layers(cfg.net), st.cn);

    const auto disc_specs = discriminator_layers(cfg.disc);
    std::int64_t start_step = 0;
    if (st.stage == 2 && st.disc.count() > 0) {
        validate_params(disc_specs, st.disc);
        start_step = st.step;  // resuming this stage
    } else {
        st.disc = init_params<float>(disc_specs, mix_seed(cfg.seed, 0xD15C));
        st.opt_d = adam_init(st.disc);
        // entering a new stage resets the generator optimizer: fresh moments
        // for adam, none at all for sgd (stage-1 moments would otherwise
        // linger in every later checkpoint unused)
        st.opt_g = cfg.stage2_g_optimizer == "adam" ? adam_init(st.cn) : AdamState<float>{};
        st.stage = 2;
        st.step = 0;
    }
    const int out_scale = cfg.net.out_scale();
    const int S = int(cfg.scales.size()) + 1;  // pyramid levels include the original
    const std::int64_t until =
        stop_after < 0 ? cfg.stage2_steps : std::min(stop_after, cfg.stage2_steps);

    for (std::int64_t t = start_step; t < until; ++t) {
        Rng rng(mix_seed(cfg.seed, detail::kStage2Tag, std::uint64_t(t)));

        // ---- sample patches, build pyramids ----
        struct DomainBatch {
            std::vector<PatchPyramid<float>> pyramids;
            std::vector<std::size_t> image_idx;
        };
        DomainBatch src, tgt;
        for (int b = 0; b < cfg.batch; ++b) {
            const std::size_t si = std::size_t(rng.uniform_int(std::int64_t(source.size())));
            const Grid<float>& simg = source.images[si];
            const Rect srect = sample_patch(simg.shape.w, simg.shape.h, rng, cfg.patch_fraction);
            src.image_idx.push_back(si);
            src.pyramids.push_back(build_pyramid(simg, srect, cfg.scales, cfg.input_h, cfg.input_w,
                                                 &source.anns[si]));

            const std::size_t ti = std::size_t(rng.uniform_int(std::int64_t(target.size())));
            const Grid<float>& timg = target.images[ti];
            const Rect trect = sample_patch(timg.shape.w, timg.shape.h, rng, cfg.patch_fraction);
            tgt.image_idx.push_back(ti);
            tgt.pyramids.push_back(
                build_pyramid(timg, trect, cfg.scales, cfg.input_h, cfg.input_w, nullptr));
        }

        // ---- generator forward on every crop (tape G) ----
        Tape<float> tape_g;
        const std::vector<Var> g_vars = leaf_params(tape_g, st.cn);
        std::vector<Var> src_densities, tgt_densities;  // batch-major, level order
        std::vector<Grid<float>> src_gts;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& pyr = src.pyramids[std::size_t(b)];
            const auto& ann = source.anns[src.image_idx[std::size_t(b)]];
            for (const auto& lvl : pyr.levels) {
                src_densities.push_back(
                    counting_forward(tape_g, cfg.net, g_vars, tape_g.leaf(lvl.crop)));
                src_gts.push_back(detail::crop_gt_map(ann, lvl.rect, cfg.input_h, cfg.input_w,
                                                      cfg.sigma, out_scale));
            }
            for (const auto& lvl : tgt.pyramids[std::size_t(b)].levels)
                tgt_densities.push_back(
                    counting_forward(tape_g, cfg.net, g_vars, tape_g.leaf(lvl.crop)));
        }

        // ---- discriminator update on detached maps (tape D) ----
        const double lr_d = poly_decay(cfg.lr_d, t, cfg.stage2_steps, cfg.poly_power);
        double l_disc;
        {
            Tape<float> tape_d;
            const std::vector<Var> d_vars = leaf_params(tape_d, st.disc);
            std::vector<Var> logits_src, logits_tgt;
            for (Var dv : src_densities) {
                Grid<float> up =
                    resize_bilinear(tape_g.value(dv), cfg.input_h, cfg.input_w);  // detached
                logits_src.push_back(
                    discriminator_forward(tape_d, cfg.disc, d_vars, tape_d.leaf(std::move(up))));
            }
            for (Var dv : tgt_densities) {
                Grid<float> up = resize_bilinear(tape_g.value(dv), cfg.input_h, cfg.input_w);
                logits_tgt.push_back(
                    discriminator_forward(tape_d, cfg.disc, d_vars, tape_d.leaf(std::move(up))));
            }
            Var d_loss_raw = discriminator_loss_tape(tape_d, logits_src, logits_tgt);
            Var d_loss = tape_d.scale(d_loss_raw, cfg.weights.lambda1);
            l_disc = double(tape_d.value(d_loss_raw).data[0]);
            if (!std::isfinite(l_disc))
                detail::abort_non_finite(st, "discriminator loss at step " + std::to_string(t),
                                         abort_dump_path);
            tape_d.backward(d_loss);
            std::vector<Grid<float>> d_grads;
            d_grads.reserve(d_vars.size());
            for (Var v : d_vars) d_grads.push_back(tape_d.grad(v));
            adam_step(st.disc, d_grads, st.opt_d, lr_d, cfg.adam);
        }
        if (observe) observe(0, st);

        // ---- generator update with the updated discriminator frozen ----
        const std::vector<Var> d_const = leaf_params(tape_g, st.disc);
        std::vector<Var> adv_logits;
        for (Var dv : tgt_densities) {
            Var up = tape_g.resize_bilinear(dv, cfg.input_h, cfg.input_w);
            adv_logits.push_back(discriminator_forward(tape_g, cfg.disc, d_const, up));
        }
        Var l_dens_v = density_loss_tape(tape_g, src_densities, src_gts);
        Var l_adv_v = adversarial_loss_tape(tape_g, adv_logits);

        Var l_rank_v = tape_g.leaf(Grid<float>::scalar(0.0f));
        for (int b = 0; b < cfg.batch; ++b) {
            std::vector<Var> sc, tc;
            for (int l = 0; l < S; ++l) {
                sc.push_back(tape_g.grid_sum(src_densities[std::size_t(b) * S + l]));
                tc.push_back(tape_g.grid_sum(tgt_densities[std::size_t(b) * S + l]));
            }
            l_rank_v = tape_g.add(l_rank_v, ranking_loss_tape(tape_g, sc, cfg.weights.epsilon));
            l_rank_v = tape_g.add(l_rank_v, ranking_loss_tape(tape_g, tc, cfg.weights.epsilon));
        }
        Var g_loss = combined_generator_loss_tape(tape_g, l_dens_v, l_adv_v, l_rank_v, cfg.weights);

        const double l_dens = double(tape_g.value(l_dens_v).data[0]);
        const double l_adv = double(tape_g.value(l_adv_v).data[0]);
        const double l_rank = double(tape_g.value(l_rank_v).data[0]);
        if (!std::isfinite(l_dens) || !std::isfinite(l_adv) || !std::isfinite(l_rank))
            detail::abort_non_finite(st, "generator loss at step " + std::to_string(t),
                                     abort_dump_path);

        tape_g.backward(g_loss);
        std::vector<Grid<float>> g_grads;
        g_grads.reserve(g_vars.size());
        for (Var v : g_vars) g_grads.push_back(tape_g.grad(v));
        // The generator's rate is deliberately constant: only the discriminator
        // anneals. A decayed generator locks in whatever drift the early steps
        // took; the constant rate keeps it mobile for the whole stage.
        if (cfg.stage2_g_optimizer == "adam")
            adam_step(st.cn, g_grads, st.opt_g, cfg.lr_g, cfg.adam);
        else
            sgd_step(st.cn, g_grads, cfg.lr_g);
        st.step = t + 1;
        if (observe) observe(1, st);

        if (log) {
            nlohmann::json line;
            line["stage"] = 2;
            line["step"] = t;
            line["l_dens"] = l_dens;
            line["l_disc"] = l_disc;
            line["l_adv"] = l_adv;
            line["l_rank"] = l_rank;
            line["lr_g"] = lr_g;
            line["lr_d"] = lr_d;
            if (eval_split && eval_split->annotated() &&
                ((t + 1) % cfg.eval_every == 0 || t + 1 == cfg.stage2_steps)) {
                std::vector<CountPair> pairs;
                for (std::size_t i = 0; i < eval_split->size(); ++i) {
                    const auto [map, count] = predict(cfg.net, st.cn, eval_split->images[i]);
                    pairs.push_back({double(eval_split->anns[i].points.size()), count});
                }
                line["eval"] = {{"mae", mae(pairs)}, {"n_images", pairs.size()}};
            }
            (*log) << line.dump() << "\n";
        }
    }
    return st;
}

}  // namespace coda
