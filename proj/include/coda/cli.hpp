#pragma once

// Command-line front end: dataset generation, the two training stages,
// evaluation, density-map rendering, and the gradient verification suite.
// Machine-readable JSON goes to stdout; human-readable progress and tables go
// to stderr. Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "coda/gradsuite.hpp"
#include "coda/synthdata.hpp"
#include "coda/trainer.hpp"

namespace coda {

// Thrown for problems the user can fix by changing flags or config files;
// mapped to exit code 2 (anything else non-CLI maps to 1).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace cli_detail {

// Re-labels config/spec parse failures as usage errors.
template <typename F>
auto as_usage(F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
}

inline void ensure_parent_dir(const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}

inline std::string dataset_label(const std::string& dir) {
    auto p = std::filesystem::path(dir).lexically_normal();
    if (p.filename().empty()) p = p.parent_path();  // trailing slash
    const std::string name = p.filename().string();
    return name.empty() ? dir : name;
}

inline std::ofstream open_log(const std::string& path) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open log file " + path);
    return out;
}

// ---- gen-data ----

struct GenDataArgs {
    std::string preset;
    std::string spec_path;
    std::string out_dir;
    int n = 0;
    std::uint64_t seed = 1;
    bool seed_given = false;
    bool force = false;
    int width = 0;   // 0 keeps the preset/spec value
    int height = 0;
};

inline void write_domain(const std::filesystem::path& dir, const DomainSpec& spec, int n) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    const auto scenes = generate_domain(spec, n);
    std::vector<PointAnnotation> anns;
    anns.reserve(scenes.size());
    for (const auto& s : scenes) {
        write_png((dir / "images" / (s.ann.image_id + ".png")).string(), s.image);
        anns.push_back(s.ann);
    }
    save_annotations(anns, (dir / "annotations.json").string());
}

inline void cmd_gen_data(const GenDataArgs& a) {
    namespace fs = std::filesystem;
    DomainSpec src, tgt;
    if (!a.preset.empty()) {
        if (a.preset != "shift")
            throw UsageError("unknown preset '" + a.preset + "' (available: shift)");
        std::tie(src, tgt) = preset_shift_pair();
    } else {
        const nlohmann::json j = as_usage([&] {
            return nlohmann::json::parse(read_file_text(a.spec_path));
        });
        src = as_usage([&] { return parse_domain_spec(j.at("source"), "source"); });
        tgt = as_usage([&] { return parse_domain_spec(j.at("target"), "target"); });
    }
    if (a.width > 0) src.width = tgt.width = a.width;
    if (a.height > 0) src.height = tgt.height = a.height;
    // presets always derive their stream from --seed; explicit spec files keep
    // their own seeds unless --seed overrides them
    if (!a.preset.empty() || a.seed_given) {
        src.seed = mix_seed(a.seed, 0xA0);
        tgt.seed = mix_seed(a.seed, 0xA1);
    }

    const fs::path out(a.out_dir);
    if (fs::exists(out) && !fs::is_empty(out) && !a.force)
        throw UsageError("output directory " + a.out_dir +
                         " is not empty; pass --force to write into it");
    write_domain(out / "source", src, a.n);
    write_domain(out / "target", tgt, a.n);

    nlohmann::json rep;
    rep["command"] = "gen-data";
    rep["out"] = a.out_dir;
    rep["n_per_domain"] = a.n;
    rep["images"] = 2 * a.n;
    rep["source"] = domain_spec_json(src);
    rep["target"] = domain_spec_json(tgt);
    std::cout << rep.dump() << "\n";
    std::cerr << "gen-data: wrote " << 2 * a.n << " images under " << a.out_dir << "\n";
}

// ---- pretrain ----

struct PretrainArgs {
    std::string config_path;
    std::string data_dir;
    std::string out_ckpt;
    std::string resume_ckpt;
    std::string log_path;
};

inline void cmd_pretrain(const PretrainArgs& a) {
    const TrainConfig cfg = as_usage([&] { return load_train_config(a.config_path); });
    const Dataset source = load_dataset(a.data_dir, true);
    std::optional<TrainerState> resume;
    if (!a.resume_ckpt.empty()) resume = load_train_checkpoint(a.resume_ckpt);

    const std::string log_path = a.log_path.empty() ? a.out_ckpt + ".log" : a.log_path;
    std::ofstream log = open_log(log_path);
    ensure_parent_dir(a.out_ckpt);

    const TrainerState st = pretrain(cfg, source, resume ? &*resume : nullptr, &log,
                                     a.out_ckpt + ".abort.ckpt");
    save_train_checkpoint(a.out_ckpt, st);

    nlohmann::json rep;
    rep["command"] = "pretrain";
    rep["out"] = a.out_ckpt;
    rep["log"] = log_path;
    rep["stage"] = st.stage;
    rep["steps"] = st.step;
    std::cout << rep.dump() << "\n";
    std::cerr << "pretrain: " << st.step << " steps done, checkpoint -> " << a.out_ckpt << "\n";
}

// ---- adapt ----

struct AdaptArgs {
    std::string config_path;
    std::string ckpt;
    std::string source_dir;
    std::string target_dir;
    std::string eval_dir;
    std::string out_ckpt;
    std::string log_path;
    bool allow_annotated = false;
};

inline void cmd_adapt(const AdaptArgs& a) {
    namespace fs = std::filesystem;
    const TrainConfig cfg = as_usage([&] { return load_train_config(a.config_path); });
    if (!a.allow_annotated && fs::exists(fs::path(a.target_dir) / "annotations.json"))
        throw UsageError("target dataset " + a.target_dir +
                         " contains annotations.json; adaption must not see target labels — "
                         "pass --allow-annotated to proceed anyway");

    const Dataset source = load_dataset(a.source_dir, true);
    Dataset target = load_dataset(a.target_dir, false);
    target.anns.clear();  // never read even when present
    std::optional<Dataset> eval_split;
    if (!a.eval_dir.empty()) eval_split = load_dataset(a.eval_dir, true);

    TrainerState st = load_train_checkpoint(a.ckpt);
    const std::string log_path = a.log_path.empty() ? a.out_ckpt + ".log" : a.log_path;
    std::ofstream log = open_log(log_path);
    ensure_parent_dir(a.out_ckpt);

    st = adapt(cfg, std::move(st), source, target, eval_split ? &*eval_split : nullptr, &log,
               a.out_ckpt + ".abort.ckpt");
    save_train_checkpoint(a.out_ckpt, st);

    nlohmann::json rep;
    rep["command"] = "adapt";
    rep["out"] = a.out_ckpt;
    rep["log"] = log_path;
    rep["stage"] = st.stage;
    rep["steps"] = st.step;
    std::cout << rep.dump() << "\n";
    std::cerr << "adapt: " << st.step << " steps done, checkpoint -> " << a.out_ckpt << "\n";
}

// ---- eval ----

struct EvalArgs {
    std::string ckpt;
    std::string data_dir;
    std::string config_path;
    std::vector<int> levels = {0, 1, 2, 3};
    bool use_roi = false;
    bool oracle = false;
    std::string dump_dir;
};

inline void cmd_eval(const EvalArgs& a) {
    namespace fs = std::filesystem;
    TrainConfig cfg;
    if (!a.config_path.empty()) cfg = as_usage([&] { return load_train_config(a.config_path); });
    if (!a.oracle && a.ckpt.empty()) throw UsageError("eval: need --ckpt (or --oracle)");

    const Dataset data = load_dataset(a.data_dir, true);
    std::optional<TrainerState> st;
    if (!a.oracle) st = load_train_checkpoint(a.ckpt);

    const int s = cfg.net.out_scale();
    if (!a.dump_dir.empty()) fs::create_directories(a.dump_dir);

    std::vector<EvalItem> items;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const PointAnnotation& ann = data.anns[i];
        const int out_scale = a.oracle ? 1 : s;
        Grid<double> gt = generate_density(ann, cfg.sigma, out_scale).grid;
        std::optional<Grid<double>> roi;
        if (a.use_roi) roi = load_roi_mask(ann, a.data_dir);

        Grid<double> pred;
        if (a.oracle) {
            pred = gt;
            if (roi) {
                const Grid<double> roi_ds =
                    out_scale == 1 ? *roi : block_mean_downsample(*roi, out_scale);
                pred = hadamard(pred, roi_ds);
                gt = hadamard(gt, roi_ds);
            }
        } else {
            std::optional<Grid<float>> roi_f;
            if (roi) roi_f = cast<float>(*roi);
            const auto [map, count] =
                predict(cfg.net, st->cn, data.images[i], roi_f ? &*roi_f : nullptr);
            pred = cast<double>(map);
            if (roi) gt = hadamard(gt, block_mean_downsample(*roi, s));
        }
        if (!a.dump_dir.empty())
            write_dmap((fs::path(a.dump_dir) / (ann.image_id + ".dmap")).string(),
                       cast<float>(pred));
        items.push_back(EvalItem{std::move(pred), std::move(gt), std::nullopt});
    }

    const EvalReport rep = evaluate_maps(dataset_label(a.data_dir), items, a.levels);
    std::cout << report_json(rep).dump() << "\n";

    std::cerr << "dataset   " << rep.dataset << "  (" << rep.n_images << " images)\n";
    std::cerr << std::fixed << std::setprecision(4);
    std::cerr << "mae       " << rep.mae_value << "\n";
    std::cerr << "mse       " << rep.mse_value << "\n";
    for (const auto& [L, v] : rep.gmae_values)
        std::cerr << "gmae(" << L << ")   " << v << "\n";
}

// ---- render ----

struct RenderArgs {
    std::string dmap_path;
    std::string out_png;
};

inline void cmd_render(const RenderArgs& a) {
    const Grid<float> map = read_dmap(a.dmap_path);
    float mn = map.data.empty() ? 0.0f : map.data[0];
    float mx = mn;
    for (float v : map.data) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    ImageU8 img;
    img.width = map.shape.w;
    img.height = map.shape.h;
    img.channels = 1;
    img.pix.resize(map.data.size());
    const double span = double(mx) - double(mn);
    for (std::size_t i = 0; i < map.data.size(); ++i) {
        // min maps to black, max to white; a constant map renders black
        const double v01 = span > 0 ? (double(map.data[i]) - double(mn)) / span : 0.0;
        img.pix[i] = std::uint8_t(std::lround(v01 * 255.0));
    }
    ensure_parent_dir(a.out_png);
    write_png(a.out_png, img);

    nlohmann::json rep;
    rep["command"] = "render";
    rep["out"] = a.out_png;
    rep["width"] = img.width;
    rep["height"] = img.height;
    rep["min"] = double(mn);
    rep["max"] = double(mx);
    std::cout << rep.dump() << "\n";
    std::cerr << "render: " << a.dmap_path << " -> " << a.out_png << "\n";
}

// ---- gradcheck ----

inline int cmd_gradcheck(const std::string& op_filter) {
    constexpr double kThreshold = 1e-4;
    const auto results = gradient_suite(op_filter);
    if (results.empty()) throw UsageError("gradcheck: unknown op '" + op_filter + "'");

    bool pass = true;
    nlohmann::json ops = nlohmann::json::array();
    std::cerr << std::left << std::setw(24) << "op" << std::right << std::setw(12) << "max_rel_err"
              << std::setw(10) << "entries" << std::setw(14) << "max_abs_grad" << "\n";
    for (const auto& r : results) {
        pass = pass && r.report.max_rel_err < kThreshold;
        std::cerr << std::left << std::setw(24) << r.name << std::right << std::setw(12)
                  << std::scientific << std::setprecision(2) << r.report.max_rel_err
                  << std::setw(10) << r.report.checked_entries << std::setw(14)
                  << r.report.max_abs_grad << "\n";
        ops.push_back({{"name", r.name},
                       {"max_rel_err", r.report.max_rel_err},
                       {"entries", r.report.checked_entries},
                       {"max_abs_grad", r.report.max_abs_grad}});
    }
    nlohmann::json rep;
    rep["command"] = "gradcheck";
    rep["threshold"] = kThreshold;
    rep["pass"] = pass;
    rep["ops"] = std::move(ops);
    std::cout << rep.dump() << "\n";
    std::cerr << (pass ? "gradcheck: all gradients verified\n"
                       : "gradcheck: FAILURES above threshold\n");
    return pass ? 0 : 1;
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv) {
    using namespace cli_detail;
    CLI::App app{
        "coda — density-based object counting with unsupervised domain adaption.\n"
        "JSON results go to stdout, progress and tables to stderr.\n"
        "Exit codes: 0 success, 1 runtime failure, 2 usage/config error."};
    app.require_subcommand(1);
    int rc = 0;

    // gen-data
    auto gd = std::make_shared<GenDataArgs>();
    CLI::App* gen = app.add_subcommand(
        "gen-data", "Generate a two-domain synthetic counting dataset (source/ and target/)");
    CLI::Option* gd_preset =
        gen->add_option("--preset", gd->preset, "Built-in domain pair (shift: dense-small source "
                                                "vs sparse-large target)");
    CLI::Option* gd_spec = gen->add_option("--spec", gd->spec_path,
                                           "JSON file with {\"source\": ..., \"target\": ...} "
                                           "domain recipes")
                               ->check(CLI::ExistingFile);
    gd_preset->excludes(gd_spec);
    gd_spec->excludes(gd_preset);
    gen->add_option("--out", gd->out_dir, "Output directory")->required();
    gen->add_option("--n", gd->n, "Images per domain")->required()->check(CLI::PositiveNumber);
    CLI::Option* gd_seed = gen->add_option("--seed", gd->seed, "Base seed for both domains");
    gen->add_flag("--force", gd->force, "Write into a non-empty output directory");
    gen->add_option("--width", gd->width, "Override image width")->check(CLI::PositiveNumber);
    gen->add_option("--height", gd->height, "Override image height")->check(CLI::PositiveNumber);
    gen->callback([gd, gd_preset, gd_spec, gd_seed] {
        if (gd_preset->count() == 0 && gd_spec->count() == 0)
            throw UsageError("gen-data: need --preset or --spec");
        gd->seed_given = gd_seed->count() > 0;
        cmd_gen_data(*gd);
    });

    // pretrain
    auto pt = std::make_shared<PretrainArgs>();
    CLI::App* pre = app.add_subcommand(
        "pretrain", "Stage 1: train the counting network on an annotated source dataset");
    pre->add_option("--config", pt->config_path, "Training config JSON")
        ->required()
        ->check(CLI::ExistingFile);
    pre->add_option("--data", pt->data_dir, "Annotated dataset directory")->required();
    pre->add_option("--out", pt->out_ckpt, "Output checkpoint path")->required();
    pre->add_option("--resume", pt->resume_ckpt, "Continue from an earlier stage-1 checkpoint")
        ->check(CLI::ExistingFile);
    pre->add_option("--log", pt->log_path, "JSON-lines training log (default: <out>.log)");
    pre->callback([pt] { cmd_pretrain(*pt); });

    // adapt
    auto ad = std::make_shared<AdaptArgs>();
    CLI::App* adp = app.add_subcommand(
        "adapt", "Stage 2: adversarial adaption to an unannotated target dataset");
    adp->add_option("--config", ad->config_path, "Training config JSON")
        ->required()
        ->check(CLI::ExistingFile);
    adp->add_option("--ckpt", ad->ckpt,
                    "Starting checkpoint (stage-1 output, or this command's own output to resume)")
        ->required()
        ->check(CLI::ExistingFile);
    adp->add_option("--source", ad->source_dir, "Annotated source dataset directory")->required();
    adp->add_option("--target", ad->target_dir, "Unannotated target dataset directory")
        ->required();
    adp->add_option("--eval", ad->eval_dir,
                    "Optional annotated held-out split for periodic evaluation");
    adp->add_option("--out", ad->out_ckpt, "Output checkpoint path")->required();
    adp->add_option("--log", ad->log_path, "JSON-lines training log (default: <out>.log)");
    adp->add_flag("--allow-annotated", ad->allow_annotated,
                  "Proceed even if the target directory contains annotations.json (they are "
                  "still ignored)");
    adp->callback([ad] { cmd_adapt(*ad); });

    // eval
    auto ev = std::make_shared<EvalArgs>();
    CLI::App* evl =
        app.add_subcommand("eval", "Count on an annotated dataset and report MAE/MSE/GMAE");
    evl->add_option("--ckpt", ev->ckpt, "Checkpoint to evaluate")->check(CLI::ExistingFile);
    evl->add_option("--data", ev->data_dir, "Annotated dataset directory")->required();
    evl->add_option("--config", ev->config_path,
                    "Training config JSON (network architecture + ground-truth kernel width; "
                    "defaults match the built-in architecture)")
        ->check(CLI::ExistingFile);
    evl->add_option("--gmae-levels", ev->levels, "Comma-separated grid levels (default 0,1,2,3)")
        ->delimiter(',');
    evl->add_flag("--roi", ev->use_roi,
                  "Apply each annotation's region-of-interest mask to predictions and ground "
                  "truth");
    evl->add_flag("--oracle", ev->oracle,
                  "Score the ground truth against itself (pipeline self-check; no --ckpt needed)");
    evl->add_option("--dump-dmaps", ev->dump_dir, "Write per-image predicted density maps here");
    evl->callback([ev] { cmd_eval(*ev); });

    // render
    auto rd = std::make_shared<RenderArgs>();
    CLI::App* ren = app.add_subcommand("render", "Render a density map to a grayscale PNG");
    ren->add_option("--dmap", rd->dmap_path, "Density map file")
        ->required()
        ->check(CLI::ExistingFile);
    ren->add_option("--out", rd->out_png, "Output PNG path")->required();
    ren->callback([rd] { cmd_render(*rd); });

    // gradcheck
    auto op_filter = std::make_shared<std::string>();
    CLI::App* gc = app.add_subcommand(
        "gradcheck", "Verify analytic gradients against finite differences (exit 0 iff all pass)");
    gc->add_option("--op", *op_filter, "Run a single named entry instead of the whole suite");
    gc->callback([op_filter, &rc] { rc = cmd_gradcheck(*op_filter); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help or the parse diagnostic
        return code == 0 ? 0 : 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}

}  // namespace coda
