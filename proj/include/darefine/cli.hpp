#ifndef DAREFINE_CLI_HPP
#define DAREFINE_CLI_HPP

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "compare.hpp"
#include "plot.hpp"

namespace darefine::cli {

inline constexpr const char* kOutEnv = "DAREFINE_OUT";
inline constexpr int kUsageError = 2;

namespace fs = std::filesystem;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

inline fs::path output_root(const Common& c) {
    if (!c.out.empty()) return c.out;
    if (const char* env = std::getenv(kOutEnv); env && *env) return env;
    return "runs";
}

inline ExperimentConfig resolve_config(const Common& c) { return c.config.empty() ? ExperimentConfig{} : load_config(c.config); }

/// Prepares `<root>/<run-id>/` for a manifest whose inputs are filled in.
inline fs::path open_run(RunManifest& m, const Common& c) {
    m.run_id = m.make_run_id();
    const fs::path dir = output_root(c) / m.run_id;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

inline void hash_input(RunManifest& m, const std::string& label, const fs::path& p) { m.inputs[label] = git_blob_hash(read_file(p)); }

inline std::vector<std::string> relative_files(const fs::path& dir, const fs::path& sub) {
    std::vector<std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir / sub))
        if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir).generic_string());
    std::sort(out.begin(), out.end());
    return out;
}

inline int cmd_synth(const Common& c, std::ostream& out) {
    const ExperimentConfig cfg = resolve_config(c);
    RunManifest m;
    m.command = "synth";
    m.seed = c.seed.value_or(0);
    m.config = to_json(cfg);
    const fs::path dir = open_run(m, c);
    const auto slides = synth_slides(cfg.synth, m.seed);
    write_slides(slides, dir / "slides");
    write_dataset(build_dataset(slides, cfg.data.layout, cfg.build_options()), dir / "dataset");
    m.artifacts = relative_files(dir, "slides");
    m.artifacts.push_back(std::string("dataset/") + kManifestFile);
    m.save(dir);
    out << dir.string() << "\n";
    return 0;
}

inline int cmd_tile(const Common& c, const std::string& slides_index, std::ostream& out) {
    const ExperimentConfig cfg = resolve_config(c);
    RunManifest m;
    m.command = "tile";
    m.seed = c.seed.value_or(0);
    m.config = to_json(cfg);
    hash_input(m, "slides", slides_index);
    const auto slides = read_slides(slides_index);
    for (const auto& s : slides) m.inputs["slide:" + s.name] = git_blob_hash(std::string(s.image.pixels.pixels.begin(), s.image.pixels.pixels.end()));
    const fs::path dir = open_run(m, c);
    write_dataset(build_dataset(slides, cfg.data.layout, cfg.build_options()), dir / "dataset");
    m.artifacts = {std::string("dataset/") + kManifestFile};
    m.save(dir);
    out << dir.string() << "\n";
    return 0;
}

inline int cmd_train(const Common& c, const std::string& data, const std::string& mode, const std::string& fusion, std::ostream& out) {
    ExperimentConfig cfg = resolve_config(c);
    ModelSpec spec = cfg.model;
    if (!mode.empty() || !fusion.empty()) {
        const Mode md = mode.empty() ? spec.mode : parse_mode(mode);
        const Fusion fs_ = fusion.empty() ? spec.fusion : parse_fusion(fusion);
        const auto keep = spec;
        spec = ModelSpec::make(md, fs_, keep.slice_encoder, keep.decoder_channels);
        spec.crp_stages = keep.crp_stages;
        spec.num_classes = keep.num_classes;
        cfg.model = spec;
    }
    cfg.train.seed = c.seed.value_or(cfg.train.seed);
    RunManifest m;
    m.command = "train";
    m.seed = cfg.train.seed;
    m.config = to_json(cfg);
    hash_input(m, "dataset", fs::path(data) / kManifestFile);
    const Dataset ds = load_dataset_dir(data);
    const fs::path dir = open_run(m, c);
    Model<Real> model(spec, cfg.train.seed);
    std::ofstream log(dir / "train_log.jsonl");
    const auto result = train(model, ds, cfg.train, [&](const EpochRecord& e) {
        log << epoch_log_line(e) << std::endl;
        out << "epoch " << e.epoch << " loss " << e.train_loss;
        if (e.val) out << " val_miou " << e.val->miou;
        out << "\n";
    });
    save_model(model, dir / "checkpoint.ckpt", {{"seed", cfg.train.seed}, {"best_epoch", result.history.best_epoch}});
    write_file(dir / "config.json", m.config.dump(2) + "\n");
    m.artifacts = {"checkpoint.ckpt", "train_log.jsonl", "config.json"};
    m.save(dir);
    out << dir.string() << "\n";
    return 0;
}

inline int cmd_eval(const Common& c, const std::string& data, const std::string& ckpt, const std::string& split_name, std::ostream& out) {
    const Split split = parse_split(split_name);
    RunManifest m;
    m.command = "eval";
    m.config = {{"split", split_name}};
    hash_input(m, "dataset", fs::path(data) / kManifestFile);
    hash_input(m, "checkpoint", ckpt);
    const Dataset ds = load_dataset_dir(data);
    const auto model = load_model(ckpt);
    const fs::path dir = open_run(m, c);
    const auto ev = evaluate(model, ds, split);
    m.artifacts = write_eval_outputs(ev, ds, split, dir, fs::path(ckpt).parent_path().filename().string());
    m.save(dir);
    out << MetricsReport::csv_header(ds.num_classes) << "\n" << ev.report.csv_row() << "\n" << dir.string() << "\n";
    return 0;
}

inline int cmd_predict(const Common& c, const std::string& ckpt, const std::string& image, std::ostream& out) {
    RunManifest m;
    m.command = "predict";
    hash_input(m, "checkpoint", ckpt);
    hash_input(m, "image", image);
    const ExperimentConfig cfg = resolve_config(c);
    m.config = {{"layout",
                 {{"patch_size", cfg.data.layout.patch_size},
                  {"patch_stride", cfg.data.layout.patch_stride},
                  {"slice_size", cfg.data.layout.slice_size},
                  {"slice_stride", cfg.data.layout.slice_stride},
                  {"context_factor", cfg.data.layout.context_factor}}}};
    const auto model = load_model(ckpt);
    const Image img = png::read_rgb(image);
    const fs::path dir = open_run(m, c);
    png::write_mask((dir / "prediction.png").string(), predict_image(model, img, cfg.data.layout));
    m.artifacts = {"prediction.png"};
    m.save(dir);
    out << dir.string() << "\n";
    return 0;
}

inline int cmd_compare(const Common& c, const std::string& data, std::optional<std::size_t> jobs, std::ostream& out) {
    ExperimentConfig cfg = resolve_config(c);
    if (c.seed) cfg.compare.seeds = {*c.seed, *c.seed + 1, *c.seed + 2};
    if (jobs) cfg.compare.jobs = *jobs;
    if (cfg.compare.jobs == 0) throw ConfigError("compare.jobs: must be positive");
    RunManifest m;
    m.command = "compare";
    m.seed = cfg.compare.seeds.front();
    m.config = to_json(cfg);
    m.config["compare"].erase("jobs");
    hash_input(m, "dataset", fs::path(data) / kManifestFile);
    const Dataset ds = load_dataset_dir(data);
    const fs::path dir = open_run(m, c);
    const auto cells = compare_matrix(cfg.compare.seeds, cfg.model.fusion);
    const auto table = run_compare(cells, ds, cfg, dir, cfg.compare.jobs, &out);
    write_file(dir / "compare.csv", table.to_csv());
    write_file(dir / "compare.json", table.to_json().dump(2) + "\n");
    m.artifacts = {"compare.csv", "compare.json"};
    for (const auto& r : table.rows)
        if (r.ok)
            for (const char* f : {"checkpoint.ckpt", "report.json", "train_log.jsonl"})
                m.artifacts.push_back("cells/" + r.cell.name() + "/" + f);
    m.save(dir);
    out << table.to_csv() << dir.string() << "\n";
    return table.all_ok() ? 0 : 1;
}

inline std::string short_label(const std::string& mode, const std::string& fusion) {
    const std::string m = mode == "single_input" ? "single" : mode == "multi_size_dual" ? "multi" : "dual";
    return mode == "single_input" ? m : m + " " + fusion;
}

inline int cmd_plot(const Common& c, const std::vector<std::string>& reports, std::ostream& out) {
    RunManifest m;
    m.command = "plot";
    for (std::size_t i = 0; i < reports.size(); ++i) {
        if (!fs::exists(reports[i])) throw InputError("report not found: " + reports[i]);
        hash_input(m, "report" + std::to_string(i), reports[i]);
    }
    std::vector<plot::BarGroup> groups;
    struct PanelJob {
        fs::path image, gt, pred;
        std::string name;
    };
    std::vector<PanelJob> panels;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file(reports[i]));
        } catch (const nlohmann::json::exception& e) {
            throw InputError("report " + reports[i] + " is not valid JSON");
        }
        const fs::path base = fs::path(reports[i]).parent_path();
        const std::string kind = j.value("kind", "");
        if (kind == "eval") {
            const auto r = MetricsReport::from_json(j.at("report"));
            groups.push_back({j.value("label", "report " + std::to_string(i)), r.iou_per_class});
            for (const auto& s : j.at("slides"))
                panels.push_back({base / s.at("image").get<std::string>(), base / s.at("ground_truth").get<std::string>(),
                                  base / s.at("prediction").get<std::string>(),
                                  "panel_" + std::to_string(i) + "_" + s.at("slide").get<std::string>() + ".png"});
        } else if (kind == "compare") {
            for (const auto& r : j.at("medians"))
                groups.push_back({short_label(r.at("mode"), r.at("fusion")), MetricsReport::from_json(r.at("report")).iou_per_class});
        } else {
            throw InputError("report " + reports[i] + " has unknown kind '" + kind + "'");
        }
    }
    const fs::path dir = open_run(m, c);
    png::write_rgb((dir / "iou_bars.png").string(), plot::iou_bar_chart(groups).image);
    m.artifacts = {"iou_bars.png"};
    for (const auto& p : panels) {
        const auto img = png::read_rgb(p.image.string());
        const auto pan = plot::comparison_panels(img, png::read_mask(p.gt.string()), png::read_mask(p.pred.string()), p.name);
        png::write_rgb((dir / p.name).string(), pan.image);
        m.artifacts.push_back(p.name);
    }
    m.save(dir);
    out << dir.string() << "\n";
    return 0;
}

/// Parses argv and runs one subcommand. Returns the process exit code: 0 on
/// success and for --help, 2 for usage errors, 1 for runtime failures.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Dual-input refine network toolkit: synthetic data, training, evaluation and ablations.", "darefine"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub, bool config, bool seed) {
        if (config) sub->add_option("--config", common.config, "JSON experiment config")->check(CLI::ExistingFile);
        if (seed) sub->add_option("--seed", common.seed, "random seed");
        sub->add_option("--out", common.out, std::string("output root (default $") + kOutEnv + " or ./runs)");
    };

    auto* synth = app.add_subcommand("synth", "generate synthetic slides and their tiled dataset");
    add_common(synth, true, true);

    std::string slides_index;
    auto* tile = app.add_subcommand("tile", "tile slides listed in a slides.json into a dataset");
    add_common(tile, true, false);
    tile->add_option("--slides", slides_index, "slides.json index")->required()->check(CLI::ExistingFile);

    std::string data, mode, fusion;
    auto* train_cmd = app.add_subcommand("train", "train one model");
    add_common(train_cmd, true, true);
    train_cmd->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    train_cmd->add_option("--mode", mode, "single_input | multi_size_dual | dual_input");
    train_cmd->add_option("--fusion", fusion, "concat | add | attention");

    std::string ckpt, split = "test";
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    add_common(eval, false, false);
    eval->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--checkpoint", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    eval->add_option("--split", split, "train | val | test");

    std::string image;
    auto* predict = app.add_subcommand("predict", "segment a whole image with a checkpoint");
    add_common(predict, true, false);
    predict->add_option("--checkpoint", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    predict->add_option("--image", image, "RGB PNG")->required()->check(CLI::ExistingFile);

    std::optional<std::size_t> jobs;
    auto* compare = app.add_subcommand("compare", "run the mode x fusion ablation over several seeds");
    add_common(compare, true, true);
    compare->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    compare->add_option("--jobs", jobs, "parallel cells")->check(CLI::PositiveNumber);

    std::vector<std::string> reports;
    auto* plot_cmd = app.add_subcommand("plot", "render IoU charts and prediction panels from reports");
    add_common(plot_cmd, false, false);
    plot_cmd->add_option("--report", reports, "report.json or compare.json (repeatable)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        const auto subs = app.get_subcommands();
        out << (subs.empty() ? app.help() : subs.front()->help());
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return kUsageError;
    }

    try {
        if (*synth) return cmd_synth(common, out);
        if (*tile) return cmd_tile(common, slides_index, out);
        if (*train_cmd) return cmd_train(common, data, mode, fusion, out);
        if (*eval) return cmd_eval(common, data, ckpt, split, out);
        if (*predict) return cmd_predict(common, ckpt, image, out);
        if (*compare) return cmd_compare(common, data, jobs, out);
        if (*plot_cmd) return cmd_plot(common, reports, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return kUsageError;
}

}  // namespace darefine::cli

#endif
