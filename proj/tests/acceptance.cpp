// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails.
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include <darefine/compare.hpp>

#include "grad_check.hpp"
#include "metric_oracle.hpp"

using namespace darefine;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

Outcome gradient_suite() {
    const auto t0 = Clock::now();
    double worst = 0;
    std::string worst_at;
    int checks = 0;
    for (auto block : testing::kAllBlocks)
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            const double e = testing::block_gradient_error(block, seed);
            ++checks;
            if (!(e <= worst)) {
                worst = e;
                worst_at = std::string(testing::block_name(block)) + " seed " + std::to_string(seed);
            }
        }
    const double t = seconds_since(t0);
    return {worst < 1e-4 && t < 120,
            std::to_string(checks) + " checks, max relative error " + fmt("%.2e", worst) + " (" + worst_at + "), " + fmt("%.1f s", t)};
}

Outcome metric_oracles() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2024);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<std::uint8_t> pred, gt;
        testing::random_mask_pair(rng, pred, gt);
        const auto want = testing::brute_force(pred, gt);
        const auto cm = confusion_counts(pred, gt, 4);
        const auto got = iou_miou(cm);
        for (int c = 0; c < 4; ++c) {
            if (got.per_class[c].has_value() != want.iou[c].has_value()) worst = INFINITY;
            else if (want.iou[c]) worst = std::max(worst, std::abs(*got.per_class[c] - *want.iou[c]));
        }
        worst = std::max({worst, std::abs(got.miou - want.miou), std::abs(pixel_accuracy(cm) - want.accuracy),
                          std::abs(bach_score(pred, gt) - want.score)});
    }
    using P = std::vector<std::uint8_t>;
    const bool hand = bach_score(P{0, 0}, P{3, 0}) == 0.0 && bach_score(P{1, 3}, P{2, 2}) == 0.5 && bach_score(P{0, 2, 3}, P{0, 2, 3}) == 1.0 &&
                      bach_score(P{0, 0}, P{0, 0}) == 1.0;
    const double t = seconds_since(t0);
    return {worst <= 1e-9 && hand && t < 30,
            "1000 random 8x8 pairs, max deviation " + fmt("%.1e", worst) + ", hand examples " + (hand ? "exact" : "WRONG") + ", " +
                fmt("%.2f s", t)};
}

Outcome pipeline_roundtrips(const fs::path& work) {
    const auto t0 = Clock::now();
    bool stitch_ok = true, pairing_ok = true;
    SynthConfig g;
    g.height = 640;
    g.width = 960;
    const TilingLayout layout;
    std::vector<SlideSource> slides;
    for (std::uint64_t s = 0; s < 3; ++s) {
        const auto li = synth_wsi(g, 100 + s);
        std::vector<MaskTile> tiles;
        for (const auto& t : tile_image(li, layout.patch_size, layout.patch_size)) {
            tiles.push_back({t.image.mask, t.y, t.x});
            const auto want = downsample(t.image.pixels, layout.context_factor);
            for (const auto& p : slice_patch(t.image, layout)) pairing_ok = pairing_ok && p.context() == want;
        }
        for (auto policy : {OverlapPolicy::vote, OverlapPolicy::last})
            stitch_ok = stitch_ok && stitch_predictions(tiles, li.mask.height, li.mask.width, policy) == li.mask;
        slides.push_back({"slide_" + std::to_string(s), li, Split(s)});
    }
    const auto ds = build_dataset(slides, layout, BuildOptions{96, std::nullopt});
    const fs::path a = work / "roundtrip_a", b = work / "roundtrip_b";
    fs::remove_all(a);
    fs::remove_all(b);
    const std::string first = write_dataset(ds, a).to_text();
    const auto reread = DatasetManifest::load(a / kManifestFile);
    const std::string second = write_dataset(load_dataset(reread, a), b).to_text();
    const bool manifest_ok = first == second && reread.to_text() == first && read_file(a / kManifestFile) == read_file(b / kManifestFile);
    fs::remove_all(a);
    fs::remove_all(b);
    const double t = seconds_since(t0);
    return {stitch_ok && pairing_ok && manifest_ok && t < 30,
            std::string("tile->stitch ") + (stitch_ok ? "identity" : "MISMATCH") + ", pairing " + (pairing_ok ? "exact" : "MISMATCH") +
                ", manifest " + (manifest_ok ? "byte-identical" : "DIFFERS") + " (" + std::to_string(ds.samples.size()) + " samples), " +
                fmt("%.1f s", t)};
}

Outcome parameter_accounting() {
    bool ok = true;
    std::ostringstream os;
    for (const char* variant : {"tiny50", "tiny101", "tiny152"}) {
        const auto enc = EncoderSpec::variant(variant);
        const auto single = param_count(ModelSpec::make(Mode::single_input, Fusion::add, enc));
        const auto multi = param_count(ModelSpec::make(Mode::multi_size_dual, Fusion::add, enc));
        const auto dual = param_count(ModelSpec::make(Mode::dual_input, Fusion::add, enc));
        ok = ok && single < dual && multi == dual;
        os << variant << " " << single << " < " << multi << " = " << dual << "; ";
    }
    auto s = os.str();
    return {ok, s.substr(0, s.size() - 2)};
}

Dataset sanity_batch(std::size_t count) {
    const auto li = synth_wsi(SynthConfig{}, 77);
    Dataset ds;
    for (const auto& t : tile_image(li, 320, 320))
        for (auto& s : slice_patch(t.image, TilingLayout{})) {
            std::set<std::uint8_t> classes(s.slice_mask.labels.begin(), s.slice_mask.labels.end());
            if (classes.size() > 1 && ds.samples.size() < count) ds.add(std::move(s), Split::train);
        }
    return ds;
}

Outcome training_sanity() {
    const auto ds = sanity_batch(4);
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.epochs = 300;
    cfg.augment = false;
    Model<float> model(ModelSpec::make(Mode::dual_input, Fusion::attention), 1);
    std::size_t reached = 0;
    double best = INFINITY;
    train(model, ds, cfg, [&](const EpochRecord& e) {
        best = std::min(best, e.train_loss);
        if (!reached && e.train_loss < 0.05) reached = e.epoch + 1;
    });

    Mask target(8, 8);
    for (std::size_t i = 0; i < 64; ++i) target.labels[i] = std::uint8_t(i % 4);
    const double uniform = nll_loss(Tensor<double>({4, 1, 8, 8}), target);
    const bool ln4 = std::abs(uniform - std::log(4.0)) < 1e-6;

    auto rerun = [&] {
        TrainConfig c;
        c.batch_size = 4;
        c.epochs = 3;
        c.seed = 5;
        Model<float> m(ModelSpec::make(Mode::dual_input, Fusion::attention), 2);
        const auto r = train(m, sanity_batch(12), c);
        std::vector<double> losses;
        for (const auto& e : r.history.epochs) losses.push_back(e.train_loss);
        return std::pair{losses, m.params().content_hash()};
    };
    const bool exact = rerun() == rerun();
    return {reached > 0 && ln4 && exact,
            "overfit loss < 0.05 " + (reached ? "at step " + std::to_string(reached) : "not reached (best " + fmt("%.4f", best) + ")") +
                ", uniform loss " + fmt("%.9f", uniform) + ", rerun " + (exact ? "bit-exact" : "DIFFERS")};
}

Outcome shape_contract() {
    double worst = 0;
    bool shapes = true;
    std::mt19937_64 rng(8);
    for (Mode mode : {Mode::single_input, Mode::multi_size_dual, Mode::dual_input}) {
        Model<double> m(ModelSpec::make(mode, Fusion::attention), 3);
        for (std::size_t h : {32, 64, 96})
            for (std::size_t w : {32, 64, 96}) {
                Var<double> slice(testing::random_tensor({3, 1, h, w}, rng)), full(testing::random_tensor({3, 1, h, w}, rng));
                const auto logits = m.forward(slice, mode == Mode::single_input ? nullptr : &full).value();
                shapes = shapes && logits.shape() == Shape{4, 1, h, w};
                const auto p = ops::softmax_channels(logits);
                for (std::size_t i = 0; i < h * w; ++i) worst = std::max(worst, std::abs(p[i] + p[h * w + i] + p[2 * h * w + i] + p[3 * h * w + i] - 1.0));
            }
    }
    return {shapes && worst < 1e-6,
            std::string("27 forwards, shapes ") + (shapes ? "(4,H,W)" : "WRONG") + ", max |sum softmax - 1| " + fmt("%.1e", worst)};
}

struct ExperimentOutcome {
    Outcome context, fusion;
};

ExperimentOutcome context_experiment(const fs::path& work) {
    const auto t0 = Clock::now();
    ExperimentConfig cfg;
    cfg.train.epochs = 15;
    cfg.compare.seeds = {1, 2, 3};
    const fs::path dir = work / "compare";
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_file(dir / "config.json", to_json(cfg).dump(2) + "\n");
    const auto slides = synth_slides(cfg.synth, 2024);
    const Dataset ds = build_dataset(slides, cfg.data.layout, cfg.build_options());
    std::cerr << "compare: " << ds.indices(Split::train).size() << " train / " << ds.indices(Split::val).size() << " val / "
              << ds.indices(Split::test).size() << " test samples" << std::endl;
    const auto table = run_compare(compare_matrix(cfg.compare.seeds, cfg.model.fusion), ds, cfg, dir, 1, &std::cerr);
    write_file(dir / "compare.csv", table.to_csv());
    write_file(dir / "compare.json", table.to_json().dump(2) + "\n");
    const double t = seconds_since(t0);

    ExperimentOutcome out;
    const auto* single = table.median(Mode::single_input, cfg.model.fusion);
    const auto* attn = table.median(Mode::dual_input, Fusion::attention);
    const auto* add = table.median(Mode::dual_input, Fusion::add);
    if (!table.all_ok() || !single || !attn || !add) {
        out.context = out.fusion = {false, "compare run had failed cells; see " + dir.string()};
        return out;
    }
    const double gap = attn->report.miou - single->report.miou;
    out.context = {gap >= 0.10 && t < 3600, "median test MIoU single " + fmt("%.4f", single->report.miou) + " vs dual attention " +
                                                fmt("%.4f", attn->report.miou) + " (gap " + fmt("%+.4f", gap) + "), " +
                                                fmt("%.1f min", t / 60)};
    const double margin = attn->report.miou - add->report.miou;
    out.fusion = {margin >= -0.01, "median test MIoU dual attention " + fmt("%.4f", attn->report.miou) + " vs dual add " +
                                       fmt("%.4f", add->report.miou) + " (difference " + fmt("%+.4f", margin) + "); table in " +
                                       (dir / "compare.csv").string()};
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    fs::path work = "acceptance_work";
    for (int i = 1; i + 1 < argc; ++i)
        if (std::strcmp(argv[i], "--work") == 0) work = argv[i + 1];
    fs::create_directories(work);

    std::vector<std::pair<int, Outcome>> results;
    auto report = [&](int id, const std::string& name, const Outcome& o) {
        std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << name << ": " << o.detail << std::endl;
        results.emplace_back(id, o);
    };
    auto guarded = [](const std::function<Outcome()>& f) -> Outcome {
        try {
            return f();
        } catch (const std::exception& e) {
            return {false, std::string("error: ") + e.what()};
        }
    };

    report(1, "gradient suite", guarded(gradient_suite));
    report(2, "metric oracles", guarded(metric_oracles));
    report(3, "pipeline roundtrips", guarded([&] { return pipeline_roundtrips(work); }));
    ExperimentOutcome exp;
    try {
        exp = context_experiment(work);
    } catch (const std::exception& e) {
        exp.context = exp.fusion = {false, std::string("error: ") + e.what()};
    }
    report(4, "context ambiguity", exp.context);
    report(5, "fusion ordering", exp.fusion);
    report(6, "parameter accounting", guarded(parameter_accounting));
    report(7, "training sanity", guarded(training_sanity));
    report(8, "shape contract", guarded(shape_contract));

    const bool all = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.second.pass; });
    return all ? 0 : 1;
}
