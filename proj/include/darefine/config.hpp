#ifndef DAREFINE_CONFIG_HPP
#define DAREFINE_CONFIG_HPP

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "arch.hpp"
#include "data.hpp"
#include "synth.hpp"
#include "train.hpp"

namespace darefine {

/// Slides generated by `synth`: counts per split and the generator settings.
struct SynthSection {
    SynthConfig generator;
    std::size_t train_slides = 12;
    std::size_t val_slides = 2;
    std::size_t test_slides = 3;
};

struct DataSection {
    TilingLayout layout;
    std::optional<std::size_t> train_slice_stride = 96;
    std::optional<BalancePolicy> train_balance;
};

struct CompareSection {
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::size_t jobs = 1;
};

/// Everything a run needs, read from one JSON document. Every section and key
/// is optional; omitted values keep their defaults, unknown keys are errors.
struct ExperimentConfig {
    SynthSection synth;
    DataSection data;
    ModelSpec model = ModelSpec::make(Mode::dual_input, Fusion::attention);
    TrainConfig train;
    CompareSection compare;

    BuildOptions build_options() const { return {data.train_slice_stride, data.train_balance}; }
};

namespace detail {

/// Cursor over one JSON object that reports errors by dotted key path and
/// rejects keys nobody asked for.
class ConfigReader {
public:
    ConfigReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }

    ConfigReader object(const std::string& key) { return ConfigReader(j_.at(key), key_path(key)); }

    template <class V>
    void read(const std::string& key, V& out) {
        if (!has(key)) return;
        out = get<V>(key);
    }

    template <class V>
    V get(const std::string& key) {
        seen_.insert(key);
        const auto& v = j_.at(key);
        try {
            if constexpr (std::is_same_v<V, bool>) {
                if (!v.is_boolean()) throw ConfigError("expected a boolean");
            } else if constexpr (std::is_unsigned_v<V>) {
                if (!v.is_number_unsigned()) throw ConfigError("expected a non-negative integer");
            } else if constexpr (std::is_arithmetic_v<V>) {
                if (!v.is_number()) throw ConfigError("expected a number");
            } else if constexpr (std::is_same_v<V, std::string>) {
                if (!v.is_string()) throw ConfigError("expected a string");
            }
            return v.template get<V>();
        } catch (const ConfigError& e) {
            throw ConfigError(key_path(key) + ": " + e.what());
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(key_path(key) + ": " + e.what());
        }
    }

    /// Runs `check`, prefixing any ConfigError it raises with the key path.
    template <class F>
    void checked(const std::string& key, F&& check) {
        try {
            check();
        } catch (const ConfigError& e) {
            throw ConfigError(key_path(key) + ": " + e.what());
        }
    }

    void finish() const {
        for (const auto& [k, _] : j_.items())
            if (!seen_.count(k)) throw ConfigError(key_path(k) + ": unknown key");
    }

    std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    std::string where() const { return path_.empty() ? "config" : path_; }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void read_texture(ConfigReader r, TextureSpec& t) {
    r.read("base", t.base);
    r.read("noise", t.noise);
    r.read("nuclei_density", t.nuclei_density);
    r.read("nuclei_color", t.nuclei_color);
    r.read("nuclei_radius", t.nuclei_radius);
    r.finish();
}

inline nlohmann::ordered_json texture_json(const TextureSpec& t) {
    return {{"base", t.base},
            {"noise", t.noise},
            {"nuclei_density", t.nuclei_density},
            {"nuclei_color", t.nuclei_color},
            {"nuclei_radius", t.nuclei_radius}};
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const ModelSpec& m) {
    return {{"mode", to_string(m.mode)},
            {"fusion", to_string(m.fusion)},
            {"encoder", m.slice_encoder.variant_name},
            {"stage_channels", m.slice_encoder.stage_channels},
            {"decoder_channels", m.decoder_channels},
            {"crp_stages", m.crp_stages},
            {"num_classes", m.num_classes}};
}

inline void read_model(detail::ConfigReader r, ModelSpec& m) {
    std::string mode = to_string(m.mode), fusion = to_string(m.fusion), encoder = m.slice_encoder.variant_name;
    auto channels = m.slice_encoder.stage_channels;
    r.read("mode", mode);
    r.read("fusion", fusion);
    r.read("encoder", encoder);
    r.read("stage_channels", channels);
    std::size_t d = m.decoder_channels, crp = m.crp_stages, classes = m.num_classes;
    r.read("decoder_channels", d);
    r.read("crp_stages", crp);
    r.read("num_classes", classes);
    r.finish();
    Mode md{};
    Fusion fs{};
    EncoderSpec enc;
    r.checked("mode", [&] { md = parse_mode(mode); });
    r.checked("fusion", [&] { fs = parse_fusion(fusion); });
    r.checked("encoder", [&] { enc = EncoderSpec::variant(encoder, channels); });
    r.checked("stage_channels", [&] { enc.validate(); });
    ModelSpec out = ModelSpec::make(md, fs, enc, d);
    out.crp_stages = crp;
    out.num_classes = classes;
    r.checked("decoder_channels", [&] {
        if (d == 0) throw ConfigError("must be positive");
    });
    r.checked("crp_stages", [&] {
        if (crp == 0) throw ConfigError("must be positive");
    });
    r.checked("num_classes", [&] {
        if (classes < 2) throw ConfigError("must be at least 2");
    });
    m = out;
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
    ModelSpec m;
    read_model(detail::ConfigReader(j, "model"), m);
    return m;
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
    using nlohmann::ordered_json;
    const auto& g = c.synth.generator;
    ordered_json textures = ordered_json::array();
    for (const auto& t : g.textures) textures.push_back(detail::texture_json(t));
    ordered_json synth{{"train_slides", c.synth.train_slides},
                       {"val_slides", c.synth.val_slides},
                       {"test_slides", c.synth.test_slides},
                       {"height", g.height},
                       {"width", g.width},
                       {"cell_size", g.cell_size},
                       {"min_radius", g.min_radius},
                       {"max_radius", g.max_radius},
                       {"ring_gap", g.ring_gap},
                       {"ring_width", g.ring_width},
                       {"ambiguous_pair", g.ambiguous_pair},
                       {"textures", textures},
                       {"ring_texture", detail::texture_json(g.ring)}};
    const auto& l = c.data.layout;
    ordered_json data{{"patch_size", l.patch_size},
                      {"patch_stride", l.patch_stride},
                      {"slice_size", l.slice_size},
                      {"slice_stride", l.slice_stride},
                      {"context_factor", l.context_factor},
                      {"train_slice_stride", c.data.train_slice_stride ? ordered_json(*c.data.train_slice_stride) : ordered_json()}};
    if (c.data.train_balance) {
        ordered_json quota = ordered_json::object();
        for (auto [cls, q] : c.data.train_balance->quota) quota[std::to_string(cls)] = q;
        data["train_balance"] = {{"must_contain", c.data.train_balance->must_contain}, {"quota", quota}, {"seed", c.data.train_balance->seed}};
    } else {
        data["train_balance"] = nullptr;
    }
    const auto& t = c.train;
    ordered_json train{{"lr", t.lr},
                       {"momentum", t.momentum},
                       {"batch_size", t.batch_size},
                       {"epochs", t.epochs},
                       {"grad_clip_norm", t.grad_clip_norm},
                       {"augment", t.augment},
                       {"flip_probability", t.augment_config.flip_probability},
                       {"crop_probability", t.augment_config.crop_probability},
                       {"min_crop_fraction", t.augment_config.min_crop_fraction}};
    ordered_json compare{{"seeds", c.compare.seeds}, {"jobs", c.compare.jobs}};
    return {{"synth", synth}, {"data", data}, {"model", to_json(c.model)}, {"train", train}, {"compare", compare}};
}

/// Reads a config document on top of the defaults. Errors name the offending
/// key, e.g. "train.lr: must be finite and positive".
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    using detail::ConfigReader;
    ExperimentConfig c;
    ConfigReader root(j, "");

    if (root.has("synth")) {
        auto r = root.object("synth");
        auto& g = c.synth.generator;
        r.read("train_slides", c.synth.train_slides);
        r.read("val_slides", c.synth.val_slides);
        r.read("test_slides", c.synth.test_slides);
        r.read("height", g.height);
        r.read("width", g.width);
        r.read("cell_size", g.cell_size);
        r.read("min_radius", g.min_radius);
        r.read("max_radius", g.max_radius);
        r.read("ring_gap", g.ring_gap);
        r.read("ring_width", g.ring_width);
        r.read("ambiguous_pair", g.ambiguous_pair);
        if (r.has("textures")) {
            const auto& arr = j.at("synth").at("textures");
            if (!arr.is_array() || arr.size() != 4) throw ConfigError("synth.textures: expected an array of 4 textures");
            for (std::size_t k = 0; k < 4; ++k)
                detail::read_texture(ConfigReader(arr[k], "synth.textures[" + std::to_string(k) + "]"), g.textures[k]);
        }
        if (r.has("ring_texture")) detail::read_texture(r.object("ring_texture"), g.ring);
        r.finish();
        if (c.synth.train_slides == 0) throw ConfigError("synth.train_slides: must be positive");
        if (c.synth.test_slides == 0) throw ConfigError("synth.test_slides: must be positive");
        try {
            g.validate();
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("synth: ") + e.what());
        }
    }

    if (root.has("data")) {
        auto r = root.object("data");
        auto& l = c.data.layout;
        r.read("patch_size", l.patch_size);
        r.read("patch_stride", l.patch_stride);
        r.read("slice_size", l.slice_size);
        r.read("slice_stride", l.slice_stride);
        r.read("context_factor", l.context_factor);
        if (r.has("train_slice_stride")) {
            if (j.at("data").at("train_slice_stride").is_null()) c.data.train_slice_stride.reset();
            else c.data.train_slice_stride = r.get<std::size_t>("train_slice_stride");
        }
        if (r.has("train_balance")) {
            if (j.at("data").at("train_balance").is_null()) {
                c.data.train_balance.reset();
            } else {
                auto b = r.object("train_balance");
                BalancePolicy p;
                std::vector<std::uint8_t> must;
                b.read("must_contain", must);
                p.must_contain = {must.begin(), must.end()};
                if (b.has("quota")) {
                    auto q = b.object("quota");
                    for (const auto& [k, v] : j.at("data").at("train_balance").at("quota").items()) {
                        std::size_t cls = 0;
                        q.checked(k, [&] {
                            try {
                                cls = std::stoul(k);
                            } catch (const std::exception&) {
                                throw ConfigError("quota keys must be class indices");
                            }
                        });
                        p.quota[std::uint8_t(cls)] = q.get<std::size_t>(k);
                    }
                }
                b.read("seed", p.seed);
                b.finish();
                c.data.train_balance = p;
            }
        }
        r.finish();
        try {
            l.validate();
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("data: ") + e.what());
        }
        if (c.data.train_slice_stride && *c.data.train_slice_stride == 0) throw ConfigError("data.train_slice_stride: must be positive");
    }

    if (root.has("model")) read_model(root.object("model"), c.model);

    if (root.has("train")) {
        auto r = root.object("train");
        auto& t = c.train;
        r.read("lr", t.lr);
        r.read("momentum", t.momentum);
        r.read("batch_size", t.batch_size);
        r.read("epochs", t.epochs);
        r.read("grad_clip_norm", t.grad_clip_norm);
        r.read("augment", t.augment);
        r.read("flip_probability", t.augment_config.flip_probability);
        r.read("crop_probability", t.augment_config.crop_probability);
        r.read("min_crop_fraction", t.augment_config.min_crop_fraction);
        r.finish();
        t.validate();
        auto prob = [](double p) { return p >= 0 && p <= 1; };
        if (!prob(t.augment_config.flip_probability)) throw ConfigError("train.flip_probability: must lie in [0,1]");
        if (!prob(t.augment_config.crop_probability)) throw ConfigError("train.crop_probability: must lie in [0,1]");
        if (!(t.augment_config.min_crop_fraction > 0 && t.augment_config.min_crop_fraction <= 1))
            throw ConfigError("train.min_crop_fraction: must lie in (0,1]");
    }

    if (root.has("compare")) {
        auto r = root.object("compare");
        r.read("seeds", c.compare.seeds);
        r.read("jobs", c.compare.jobs);
        r.finish();
        if (c.compare.seeds.empty()) throw ConfigError("compare.seeds: must list at least one seed");
        if (c.compare.jobs == 0) throw ConfigError("compare.jobs: must be positive");
    }

    root.finish();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

}  // namespace darefine

#endif
