#ifndef DAREFINE_DATA_HPP
#define DAREFINE_DATA_HPP

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "image.hpp"

namespace darefine {

/// Patch/slice geometry. A patch is the large window cut from a slide; its
/// slices are the network's fine input and the whole patch, shrunk by
/// `context_factor`, is the coarse input.
struct TilingLayout {
    std::size_t patch_size = 320;
    std::size_t patch_stride = 320;
    std::size_t slice_size = 32;
    std::size_t slice_stride = 32;
    std::size_t context_factor = 10;

    void validate() const {
        if (!patch_size || !patch_stride || !slice_size || !slice_stride || !context_factor)
            throw ConfigError("tiling layout values must be positive");
        if (patch_size != context_factor * slice_size)
            throw ConfigError("patch_size must equal context_factor * slice_size");
        if (slice_size % 32 != 0) throw ConfigError("slice_size must be divisible by 32");
    }

    bool operator==(const TilingLayout&) const = default;
};

/// Window origins along one axis. Windows step by `stride`; if the last one
/// stops short of the border, one more window is clamped flush to it.
inline std::vector<std::size_t> window_offsets(std::size_t extent, std::size_t size, std::size_t stride) {
    if (size > extent) throw InputError("window of " + std::to_string(size) + " exceeds extent " + std::to_string(extent));
    if (stride == 0) throw InputError("window stride must be positive");
    std::vector<std::size_t> out;
    std::size_t off = 0;
    for (; off + size <= extent; off += stride) out.push_back(off);
    if (out.back() + size < extent) out.push_back(extent - size);
    return out;
}

struct Tile {
    LabeledImage image;
    std::size_t y = 0, x = 0;
};

inline std::vector<Tile> tile_image(const LabeledImage& src, std::size_t patch_size, std::size_t patch_stride) {
    src.validate(256);
    if (patch_size > std::min(src.pixels.height, src.pixels.width))
        throw InputError("patch size " + std::to_string(patch_size) + " exceeds image " + std::to_string(src.pixels.height) + "x" +
                         std::to_string(src.pixels.width));
    std::vector<Tile> out;
    for (auto y : window_offsets(src.pixels.height, patch_size, patch_stride))
        for (auto x : window_offsets(src.pixels.width, patch_size, patch_stride))
            out.push_back({crop(src, y, x, patch_size, patch_size), y, x});
    return out;
}

/// Area-average downsampling, each output pixel the rounded (half up) mean of
/// a factor x factor block.
inline Image downsample(const Image& img, std::size_t factor) {
    if (factor == 0) throw InputError("downsample factor must be positive");
    if (img.height % factor || img.width % factor)
        throw InputError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) + " not divisible by " +
                         std::to_string(factor));
    if (factor == 1) return img;
    const std::size_t h = img.height / factor, w = img.width / factor, n = factor * factor;
    Image out(h, w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                std::size_t sum = 0;
                for (std::size_t dy = 0; dy < factor; ++dy)
                    for (std::size_t dx = 0; dx < factor; ++dx) sum += img.at(y * factor + dy, x * factor + dx, c);
                out.at(y, x, c) = std::uint8_t((2 * sum + n) / (2 * n));
            }
    return out;
}

struct Provenance {
    std::string slide;
    std::size_t slide_height = 0, slide_width = 0;
    std::size_t patch_index = 0, slice_index = 0;
    std::size_t patch_y = 0, patch_x = 0;  // patch origin in the slide
    std::size_t slice_y = 0, slice_x = 0;  // slice origin in the patch

    bool operator==(const Provenance&) const = default;
};

/// Slice image, its patch's context image, and the slice mask.
struct PairSample {
    Image slice_img;
    std::shared_ptr<const Image> context_img;
    Mask slice_mask;
    Provenance provenance;

    const Image& context() const { return *context_img; }
};

inline std::vector<PairSample> slice_patch(const LabeledImage& patch, const TilingLayout& layout, Provenance base = {}) {
    layout.validate();
    if (patch.pixels.height != layout.patch_size || patch.pixels.width != layout.patch_size)
        throw InputError("patch is " + std::to_string(patch.pixels.height) + "x" + std::to_string(patch.pixels.width) +
                         ", layout expects " + std::to_string(layout.patch_size));
    auto context = std::make_shared<const Image>(downsample(patch.pixels, layout.context_factor));
    std::vector<PairSample> out;
    const auto offs = window_offsets(layout.patch_size, layout.slice_size, layout.slice_stride);
    std::size_t j = 0;
    for (auto y : offs)
        for (auto x : offs) {
            Provenance p = base;
            p.slice_index = j++;
            p.slice_y = y;
            p.slice_x = x;
            out.push_back({crop(patch.pixels, y, x, layout.slice_size, layout.slice_size), context,
                           crop(patch.mask, y, x, layout.slice_size, layout.slice_size), p});
        }
    return out;
}

struct BalancePolicy {
    std::set<std::uint8_t> must_contain;               // empty: no filter
    std::map<std::uint8_t, std::size_t> quota;          // absent class: unlimited
    std::uint64_t seed = 0;
};

/// Seeded-shuffle scan that keeps a patch when it holds any `must_contain`
/// class and admitting it keeps every present class within quota.
inline std::vector<Tile> balance_select(const std::vector<Tile>& patches, const BalancePolicy& policy) {
    std::vector<std::size_t> order(patches.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(policy.seed);
    std::shuffle(order.begin(), order.end(), rng);

    std::map<std::uint8_t, std::size_t> used;
    std::vector<std::size_t> keep;
    for (auto i : order) {
        std::set<std::uint8_t> present(patches[i].image.mask.labels.begin(), patches[i].image.mask.labels.end());
        if (!policy.must_contain.empty() &&
            std::none_of(policy.must_contain.begin(), policy.must_contain.end(), [&](auto c) { return present.count(c) > 0; }))
            continue;
        bool within = true;
        for (auto c : present) {
            auto q = policy.quota.find(c);
            if (q != policy.quota.end() && used[c] >= q->second) within = false;
        }
        if (!within) continue;
        for (auto c : present) ++used[c];
        keep.push_back(i);
    }
    std::sort(keep.begin(), keep.end());
    std::vector<Tile> out;
    out.reserve(keep.size());
    for (auto i : keep) out.push_back(patches[i]);
    return out;
}

enum class FlipAxis { horizontal, vertical };

inline Image flip(const Image& img, FlipAxis axis) {
    Image out(img.height, img.width);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const std::size_t sy = axis == FlipAxis::vertical ? img.height - 1 - y : y;
            const std::size_t sx = axis == FlipAxis::horizontal ? img.width - 1 - x : x;
            for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(sy, sx, c);
        }
    return out;
}

inline Mask flip(const Mask& m, FlipAxis axis) {
    Mask out(m.height, m.width);
    for (std::size_t y = 0; y < m.height; ++y)
        for (std::size_t x = 0; x < m.width; ++x)
            out.at(y, x) = m.at(axis == FlipAxis::vertical ? m.height - 1 - y : y, axis == FlipAxis::horizontal ? m.width - 1 - x : x);
    return out;
}

/// Flips slice, context and mask together.
inline PairSample flip(const PairSample& s, FlipAxis axis) {
    PairSample out = s;
    out.slice_img = flip(s.slice_img, axis);
    out.context_img = std::make_shared<const Image>(flip(s.context(), axis));
    out.slice_mask = flip(s.slice_mask, axis);
    return out;
}

struct AugmentConfig {
    double flip_probability = 0.5;
    double crop_probability = 0.5;
    double min_crop_fraction = 0.75;
};

/// Random flips on all three rasters; random crop of the slice and its mask
/// only, resized back (bilinear for pixels, nearest for labels).
inline PairSample augment(const PairSample& sample, std::uint64_t seed, const AugmentConfig& cfg = {}) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    PairSample out = sample;
    if (u(rng) < cfg.flip_probability) out = flip(out, FlipAxis::horizontal);
    if (u(rng) < cfg.flip_probability) out = flip(out, FlipAxis::vertical);
    if (u(rng) < cfg.crop_probability) {
        const std::size_t s = out.slice_img.height;
        const auto lo = std::max<std::size_t>(1, std::size_t(std::ceil(cfg.min_crop_fraction * double(s))));
        const std::size_t size = std::uniform_int_distribution<std::size_t>(lo, s)(rng);
        const std::size_t y = std::uniform_int_distribution<std::size_t>(0, s - size)(rng);
        const std::size_t x = std::uniform_int_distribution<std::size_t>(0, s - size)(rng);
        out.slice_img = resize_bilinear(crop(out.slice_img, y, x, size, size), s, s);
        out.slice_mask = resize_nearest(crop(out.slice_mask, y, x, size, size), s, s);
    }
    return out;
}

enum class OverlapPolicy { vote, last };

struct MaskTile {
    Mask mask;
    std::size_t y = 0, x = 0;
};

/// Reassembles tile predictions on a canvas. Pixels no tile covers stay
/// Mask::kUnlabeled.
inline Mask stitch_predictions(const std::vector<MaskTile>& tiles, std::size_t height, std::size_t width, OverlapPolicy policy) {
    Mask out(height, width, Mask::kUnlabeled);
    for (const auto& t : tiles)
        if (t.y + t.mask.height > height || t.x + t.mask.width > width)
            throw InputError("tile at (" + std::to_string(t.y) + "," + std::to_string(t.x) + ") exceeds canvas");
    if (policy == OverlapPolicy::last) {
        for (const auto& t : tiles)
            for (std::size_t y = 0; y < t.mask.height; ++y)
                for (std::size_t x = 0; x < t.mask.width; ++x) out.at(t.y + y, t.x + x) = t.mask.at(y, x);
        return out;
    }
    std::size_t classes = 0;
    for (const auto& t : tiles)
        for (auto v : t.mask.labels)
            if (v != Mask::kUnlabeled) classes = std::max<std::size_t>(classes, std::size_t(v) + 1);
    std::vector<std::uint32_t> votes(height * width * std::max<std::size_t>(classes, 1), 0);
    for (const auto& t : tiles)
        for (std::size_t y = 0; y < t.mask.height; ++y)
            for (std::size_t x = 0; x < t.mask.width; ++x) {
                const auto v = t.mask.at(y, x);
                if (v != Mask::kUnlabeled) ++votes[((t.y + y) * width + t.x + x) * classes + v];
            }
    for (std::size_t p = 0; p < height * width; ++p) {
        std::uint32_t best = 0;
        for (std::size_t c = 0; c < classes; ++c)
            if (votes[p * classes + c] > best) {  // strict: ties keep the lower class
                best = votes[p * classes + c];
                out.labels[p] = std::uint8_t(c);
            }
    }
    return out;
}

enum class Split { train, val, test };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split '" + s + "'");
}

/// In-memory dataset: samples with their split tags.
struct Dataset {
    TilingLayout layout;
    std::size_t num_classes = 4;
    std::vector<PairSample> samples;
    std::vector<Split> splits;

    void add(PairSample s, Split split) {
        samples.push_back(std::move(s));
        splits.push_back(split);
    }

    std::vector<std::size_t> indices(Split split) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < splits.size(); ++i)
            if (splits[i] == split) out.push_back(i);
        return out;
    }

    std::vector<std::uint64_t> histogram() const {
        std::vector<std::uint64_t> h(num_classes, 0);
        for (const auto& s : samples)
            for (auto v : s.slice_mask.labels) ++h.at(v);
        return h;
    }
};

struct SlideSource {
    std::string name;
    LabeledImage image;
    Split split = Split::train;
};

struct BuildOptions {
    std::optional<std::size_t> train_slice_stride;   // defaults to layout.slice_stride
    std::optional<BalancePolicy> train_balance;      // patch selection for the train split
};

/// Tiles slides into patches, then slices; splits follow the source slide.
inline Dataset build_dataset(const std::vector<SlideSource>& slides, const TilingLayout& layout, const BuildOptions& opt = {}) {
    layout.validate();
    Dataset ds;
    ds.layout = layout;
    for (const auto& slide : slides) {
        slide.image.validate(ds.num_classes);
        auto patches = tile_image(slide.image, layout.patch_size, layout.patch_stride);
        TilingLayout lay = layout;
        if (slide.split == Split::train) {
            if (opt.train_balance) patches = balance_select(patches, *opt.train_balance);
            if (opt.train_slice_stride) lay.slice_stride = *opt.train_slice_stride;
        }
        // Patch index is the position in the unfiltered patch grid.
        const auto all_offs_y = window_offsets(slide.image.pixels.height, layout.patch_size, layout.patch_stride);
        const auto all_offs_x = window_offsets(slide.image.pixels.width, layout.patch_size, layout.patch_stride);
        for (const auto& p : patches) {
            const auto iy = std::size_t(std::find(all_offs_y.begin(), all_offs_y.end(), p.y) - all_offs_y.begin());
            const auto ix = std::size_t(std::find(all_offs_x.begin(), all_offs_x.end(), p.x) - all_offs_x.begin());
            Provenance base{slide.name, slide.image.pixels.height, slide.image.pixels.width, iy * all_offs_x.size() + ix, 0, p.y, p.x};
            for (auto& s : slice_patch(p.image, lay, base)) ds.add(std::move(s), slide.split);
        }
    }
    return ds;
}

// Manifest: JSON lines. The first line carries layout and class histogram,
// each following line one sample record.
struct SampleRecord {
    std::string image, mask, context;  // paths relative to the dataset root
    Provenance provenance;
    Split split = Split::train;

    bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
    static constexpr const char* kFormat = "darefine-manifest/1";

    TilingLayout layout;
    std::size_t num_classes = 4;
    std::vector<std::uint64_t> histogram;
    std::vector<SampleRecord> records;

    std::string to_text() const {
        using nlohmann::json;
        std::ostringstream os;
        json header{{"format", kFormat},
                    {"layout",
                     {{"patch_size", layout.patch_size},
                      {"patch_stride", layout.patch_stride},
                      {"slice_size", layout.slice_size},
                      {"slice_stride", layout.slice_stride},
                      {"context_factor", layout.context_factor}}},
                    {"num_classes", num_classes},
                    {"histogram", histogram},
                    {"records", records.size()}};
        os << header.dump() << "\n";
        for (const auto& r : records) {
            const auto& p = r.provenance;
            json j{{"image", r.image},
                   {"mask", r.mask},
                   {"context", r.context},
                   {"split", to_string(r.split)},
                   {"slide", p.slide},
                   {"slide_size", {p.slide_height, p.slide_width}},
                   {"patch", p.patch_index},
                   {"slice", p.slice_index},
                   {"patch_origin", {p.patch_y, p.patch_x}},
                   {"slice_origin", {p.slice_y, p.slice_x}}};
            os << j.dump() << "\n";
        }
        return os.str();
    }

    static DatasetManifest parse(const std::string& text) {
        using nlohmann::json;
        std::istringstream is(text);
        std::string line;
        if (!std::getline(is, line)) throw InputError("empty manifest");
        DatasetManifest m;
        try {
            const json h = json::parse(line);
            if (h.at("format") != kFormat) throw InputError("unsupported manifest format");
            const auto& l = h.at("layout");
            m.layout = {l.at("patch_size"), l.at("patch_stride"), l.at("slice_size"), l.at("slice_stride"), l.at("context_factor")};
            m.num_classes = h.at("num_classes");
            m.histogram = h.at("histogram").get<std::vector<std::uint64_t>>();
            const std::size_t n = h.at("records");
            while (std::getline(is, line)) {
                if (line.empty()) continue;
                const json j = json::parse(line);
                SampleRecord r;
                r.image = j.at("image");
                r.mask = j.at("mask");
                r.context = j.at("context");
                r.split = parse_split(j.at("split"));
                auto& p = r.provenance;
                p.slide = j.at("slide");
                p.slide_height = j.at("slide_size")[0];
                p.slide_width = j.at("slide_size")[1];
                p.patch_index = j.at("patch");
                p.slice_index = j.at("slice");
                p.patch_y = j.at("patch_origin")[0];
                p.patch_x = j.at("patch_origin")[1];
                p.slice_y = j.at("slice_origin")[0];
                p.slice_x = j.at("slice_origin")[1];
                m.records.push_back(std::move(r));
            }
            if (m.records.size() != n) throw InputError("manifest record count mismatch");
        } catch (const json::exception& e) {
            throw InputError(std::string("malformed manifest: ") + e.what());
        }
        m.layout.validate();
        return m;
    }

    static DatasetManifest load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw InputError("cannot open manifest " + path.string());
        std::ostringstream ss;
        ss << is.rdbuf();
        return parse(ss.str());
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw InputError("cannot write manifest " + path.string());
        os << to_text();
    }
};

inline constexpr const char* kManifestFile = "manifest.jsonl";

/// Writes `<root>/{images,masks}/<slide>/<patch>/<slice>.png` plus one
/// context image per patch and the manifest.
inline DatasetManifest write_dataset(const Dataset& ds, const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    DatasetManifest m;
    m.layout = ds.layout;
    m.num_classes = ds.num_classes;
    m.histogram = ds.histogram();
    std::set<std::string> contexts_written;
    char buf[64];
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        const auto& p = s.provenance;
        std::snprintf(buf, sizeof buf, "patch_%04zu", p.patch_index);
        const std::string patch_dir = p.slide + "/" + buf;
        std::snprintf(buf, sizeof buf, "slice_%04zu.png", p.slice_index);
        SampleRecord r{"images/" + patch_dir + "/" + buf, "masks/" + patch_dir + "/" + buf, "images/" + patch_dir + "/context.png",
                       p, ds.splits[i]};
        fs::create_directories(root / "images" / patch_dir);
        fs::create_directories(root / "masks" / patch_dir);
        png::write_rgb((root / r.image).string(), s.slice_img);
        png::write_mask((root / r.mask).string(), s.slice_mask);
        if (contexts_written.insert(r.context).second) png::write_rgb((root / r.context).string(), s.context());
        m.records.push_back(std::move(r));
    }
    m.save(root / kManifestFile);
    return m;
}

/// Loads every record; files are read once per path. The recounted class
/// histogram must equal the manifest's.
inline Dataset load_dataset(const DatasetManifest& m, const std::filesystem::path& root) {
    Dataset ds;
    ds.layout = m.layout;
    ds.num_classes = m.num_classes;
    std::map<std::string, std::shared_ptr<const Image>> contexts;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        const auto& r = m.records[i];
        auto need = [&](const std::string& rel) {
            const auto path = root / rel;
            if (!std::filesystem::exists(path))
                throw InputError("record " + std::to_string(i) + " (" + r.provenance.slide + " patch " +
                                 std::to_string(r.provenance.patch_index) + " slice " + std::to_string(r.provenance.slice_index) +
                                 "): missing file " + path.string());
            return path.string();
        };
        PairSample s;
        s.slice_img = png::read_rgb(need(r.image));
        s.slice_mask = png::read_mask(need(r.mask));
        auto it = contexts.find(r.context);
        if (it == contexts.end()) it = contexts.emplace(r.context, std::make_shared<const Image>(png::read_rgb(need(r.context)))).first;
        s.context_img = it->second;
        s.provenance = r.provenance;
        ds.add(std::move(s), r.split);
    }
    if (ds.histogram() != m.histogram) throw InputError("class histogram of loaded masks differs from manifest");
    return ds;
}

/// Seeded shuffled index batches; the final short batch is kept.
inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed) {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    std::mt19937_64 rng(seed);
    std::shuffle(indices.begin(), indices.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < indices.size(); i += batch_size)
        out.emplace_back(indices.begin() + std::ptrdiff_t(i), indices.begin() + std::ptrdiff_t(std::min(indices.size(), i + batch_size)));
    return out;
}

/// Loads a manifest's samples and yields them in seeded-shuffled batches.
inline std::vector<std::vector<PairSample>> read_dataset(const DatasetManifest& m, const std::filesystem::path& root,
                                                         std::size_t batch_size, std::uint64_t seed) {
    Dataset ds = load_dataset(m, root);
    std::vector<std::size_t> all(ds.samples.size());
    std::iota(all.begin(), all.end(), 0);
    std::vector<std::vector<PairSample>> out;
    for (const auto& b : make_batches(all, batch_size, seed)) {
        auto& batch = out.emplace_back();
        for (auto i : b) batch.push_back(ds.samples[i]);
    }
    return out;
}

}  // namespace darefine

#endif
