#ifndef DAREFINE_PIPELINE_HPP
#define DAREFINE_PIPELINE_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "config.hpp"
#include "run.hpp"

namespace darefine {

/// Training precision of the command-line pipeline.
using Real = float;

inline std::string slide_name(Split split, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%02zu", to_string(split).c_str(), i);
    return buf;
}

/// Generates the configured number of synthetic slides per split. Slide k of
/// the whole list is drawn with a seed derived from (seed, k).
inline std::vector<SlideSource> synth_slides(const SynthSection& cfg, std::uint64_t seed) {
    std::vector<SlideSource> out;
    std::size_t k = 0;
    for (auto [split, count] : {std::pair{Split::train, cfg.train_slides}, {Split::val, cfg.val_slides}, {Split::test, cfg.test_slides}})
        for (std::size_t i = 0; i < count; ++i, ++k)
            out.push_back({slide_name(split, i), synth_wsi(cfg.generator, detail::mix_seed(seed, k)), split});
    return out;
}

/// Slide index file: {"slides": [{"name", "image", "mask", "split"}]}, paths
/// relative to the index file.
inline void write_slides(const std::vector<SlideSource>& slides, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json list = nlohmann::ordered_json::array();
    for (const auto& s : slides) {
        const std::string img = s.name + "_image.png", mask = s.name + "_mask.png";
        png::write_rgb((dir / img).string(), s.image.pixels);
        png::write_mask((dir / mask).string(), s.image.mask);
        list.push_back({{"name", s.name}, {"image", img}, {"mask", mask}, {"split", to_string(s.split)}});
    }
    write_file(dir / "slides.json", nlohmann::ordered_json{{"slides", list}}.dump(2) + "\n");
}

inline std::vector<SlideSource> read_slides(const std::filesystem::path& index) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(index));
    } catch (const nlohmann::json::exception& e) {
        throw InputError("slide index " + index.string() + ": " + e.what());
    }
    const auto dir = index.parent_path();
    std::vector<SlideSource> out;
    try {
        for (const auto& e : j.at("slides")) {
            SlideSource s;
            s.name = e.at("name");
            s.split = parse_split(e.at("split"));
            s.image.pixels = png::read_rgb((dir / e.at("image").get<std::string>()).string());
            s.image.mask = png::read_mask((dir / e.at("mask").get<std::string>()).string());
            out.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError("slide index " + index.string() + ": " + e.what());
    }
    return out;
}

inline Dataset load_dataset_dir(const std::filesystem::path& root) {
    return load_dataset(DatasetManifest::load(root / kManifestFile), root);
}

/// Checkpoint with the model description stored in its metadata.
inline void save_model(const Model<Real>& model, const std::filesystem::path& path, nlohmann::json extra = nlohmann::json::object()) {
    extra["model"] = to_json(model.spec());
    checkpoint::save(model.params(), path.string(), extra);
}

inline Model<Real> load_model(const std::filesystem::path& path) {
    const auto ar = checkpoint::read(path.string());
    if (!ar.meta.contains("model")) throw InputError("checkpoint " + path.string() + " carries no model description");
    Model<Real> model(model_spec_from_json(ar.meta.at("model")), 0);
    checkpoint::load(model.params(), path.string());
    return model;
}

/// Reassembles a slide's RGB pixels from its slices; uncovered pixels stay white.
inline std::map<std::string, Image> stitch_slide_images(const Dataset& ds, Split split) {
    std::map<std::string, Image> out;
    for (auto i : ds.indices(split)) {
        const auto& s = ds.samples[i];
        const auto& p = s.provenance;
        auto it = out.find(p.slide);
        if (it == out.end()) it = out.emplace(p.slide, Image(p.slide_height, p.slide_width, 255)).first;
        for (std::size_t y = 0; y < s.slice_img.height; ++y)
            for (std::size_t x = 0; x < s.slice_img.width; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    it->second.at(p.patch_y + p.slice_y + y, p.patch_x + p.slice_x + x, c) = s.slice_img.at(y, x, c);
    }
    return out;
}

/// Writes report.json, report.csv and per-slide image/ground-truth/prediction
/// PNGs under `dir`. Returns the paths written, relative to `dir`.
inline std::vector<std::string> write_eval_outputs(const EvalResult& ev, const Dataset& ds, Split split, const std::filesystem::path& dir,
                                                   const std::string& label) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "slides");
    std::vector<std::string> written;
    const auto images = stitch_slide_images(ds, split);
    nlohmann::ordered_json slides = nlohmann::ordered_json::array();
    std::string csv = "slide," + MetricsReport::csv_header(ds.num_classes) + "\n";
    for (const auto& s : ev.slides) {
        const std::string img = "slides/" + s.slide + "_image.png", gt = "slides/" + s.slide + "_gt.png",
                          pred = "slides/" + s.slide + "_pred.png";
        png::write_rgb((dir / img).string(), images.at(s.slide));
        png::write_mask((dir / gt).string(), s.ground_truth);
        png::write_mask((dir / pred).string(), s.prediction);
        written.insert(written.end(), {img, gt, pred});
        slides.push_back({{"slide", s.slide}, {"report", s.report.to_json()}, {"image", img}, {"ground_truth", gt}, {"prediction", pred}});
        csv += s.slide + "," + s.report.csv_row() + "\n";
    }
    csv += "mean," + ev.report.csv_row() + "\n";
    nlohmann::ordered_json j{{"kind", "eval"}, {"label", label}, {"split", to_string(split)}, {"report", ev.report.to_json()}, {"slides", slides}};
    write_file(dir / "report.json", j.dump(2) + "\n");
    write_file(dir / "report.csv", csv);
    written.insert(written.end(), {"report.json", "report.csv"});
    return written;
}

/// One line of JSON per epoch.
inline std::string epoch_log_line(const EpochRecord& e) {
    nlohmann::ordered_json j{{"epoch", e.epoch}, {"train_loss", e.train_loss}};
    j["val"] = e.val ? nlohmann::ordered_json(e.val->to_json()) : nlohmann::ordered_json();
    j["wall_seconds"] = e.wall_seconds;
    return j.dump();
}

}  // namespace darefine

#endif
