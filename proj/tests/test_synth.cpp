#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <random>

#include <darefine/data.hpp>
#include <darefine/synth.hpp>

using namespace darefine;

namespace {

TEST(SynthWsi, DeterministicPerSeed) {
    const SynthConfig cfg;
    const auto a = synth_wsi(cfg, 42), b = synth_wsi(cfg, 42), c = synth_wsi(cfg, 43);
    EXPECT_EQ(a.pixels, b.pixels);
    EXPECT_EQ(a.mask, b.mask);
    EXPECT_NE(a.pixels, c.pixels);
}

TEST(SynthWsi, MaskValuesAreClasses) {
    SynthConfig cfg;
    cfg.height = 960;
    const auto li = synth_wsi(cfg, 1);
    EXPECT_EQ(li.pixels.height, 960u);
    std::set<std::uint8_t> seen(li.mask.labels.begin(), li.mask.labels.end());
    EXPECT_EQ(seen, (std::set<std::uint8_t>{0, 1, 2, 3}));  // 6 cells cycle every lesion class
}

TEST(SynthWsi, RejectsBadConfig) {
    SynthConfig cfg;
    cfg.width = 500;
    EXPECT_THROW(synth_wsi(cfg, 0), ConfigError);
    cfg = SynthConfig{};
    cfg.ambiguous_pair = {2, 2};
    EXPECT_THROW(synth_wsi(cfg, 0), ConfigError);
    cfg = SynthConfig{};
    cfg.ring_gap = 100;
    EXPECT_THROW(synth_wsi(cfg, 0), ConfigError);
}

/// Random 32x32 windows lying entirely inside a blob of `cls`.
std::vector<Image> interior_crops(std::uint8_t cls, std::size_t count, std::uint64_t seed) {
    std::vector<Image> out;
    std::mt19937_64 rng(seed);
    for (std::uint64_t slide = 0; out.size() < count; ++slide) {
        const auto li = synth_wsi(SynthConfig{}, seed * 1000 + slide);
        for (int attempt = 0; attempt < 400 && out.size() < count; ++attempt) {
            const std::size_t y = rng() % (li.mask.height - 32), x = rng() % (li.mask.width - 32);
            const auto m = crop(li.mask, y, x, 32, 32);
            if (std::all_of(m.labels.begin(), m.labels.end(), [&](auto v) { return v == cls; })) {
                out.push_back(crop(li.pixels, y, x, 32, 32));
                attempt += 100;  // spread crops over slides
            }
        }
    }
    return out;
}

/// Chi-square homogeneity test on pooled per-channel intensity histograms,
/// with bins merged until every expected count is at least 5.
double histogram_test_p(const std::vector<Image>& a, const std::vector<Image>& b) {
    constexpr std::size_t kBins = 32;
    std::array<std::vector<double>, 2> hist{std::vector<double>(3 * kBins), std::vector<double>(3 * kBins)};
    for (std::size_t g = 0; g < 2; ++g)
        for (const auto& img : g == 0 ? a : b)
            for (std::size_t i = 0; i < img.pixels.size(); ++i) hist[g][(i % 3) * kBins + img.pixels[i] * kBins / 256] += 1;
    const double na = std::accumulate(hist[0].begin(), hist[0].end(), 0.0), nb = std::accumulate(hist[1].begin(), hist[1].end(), 0.0);
    const double min_share = std::min(na, nb) / (na + nb);
    std::vector<std::array<double, 2>> merged;
    std::array<double, 2> open{0, 0};
    for (std::size_t k = 0; k < hist[0].size(); ++k) {
        open[0] += hist[0][k];
        open[1] += hist[1][k];
        if ((open[0] + open[1]) * min_share >= 5) {
            merged.push_back(open);
            open = {0, 0};
        }
    }
    if (merged.empty()) return 1.0;
    merged.back()[0] += open[0];
    merged.back()[1] += open[1];
    double stat = 0;
    for (const auto& [ca, cb] : merged) {
        const double ea = (ca + cb) * na / (na + nb), eb = (ca + cb) * nb / (na + nb);
        stat += (ca - ea) * (ca - ea) / ea + (cb - eb) * (cb - eb) / eb;
    }
    const std::size_t cells = merged.size();
    boost::math::chi_squared dist(double(cells - 1));
    return boost::math::cdf(boost::math::complement(dist, stat));
}

TEST(SynthWsi, AmbiguousPairIsLocallyIndistinguishable) {
    const auto c1 = interior_crops(1, 12, 11), c2 = interior_crops(2, 12, 12), c3 = interior_crops(3, 12, 13);
    const double p_pair = histogram_test_p(c1, c2);
    EXPECT_GT(p_pair, 0.01);
    // The same test separates a class with its own texture.
    EXPECT_LT(histogram_test_p(c1, c3), 0.01);
}

/// Count of context pixels with the capsule colour signature (red well above blue).
std::size_t ring_pixels(const Image& context) {
    std::size_t n = 0;
    for (std::size_t y = 0; y < context.height; ++y)
        for (std::size_t x = 0; x < context.width; ++x) n += int(context.at(y, x, 0)) - int(context.at(y, x, 2)) > 50;
    return n;
}

TEST(SynthWsi, ContextSeparatesAmbiguousPair) {
    const SynthConfig cfg;
    std::size_t checked[3] = {0, 0, 0};
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const auto li = synth_wsi(cfg, seed);
        for (const auto& t : tile_image(li, cfg.cell_size, cfg.cell_size)) {
            std::uint8_t cls = 0;
            for (auto v : t.image.mask.labels) cls = std::max(cls, v);
            const auto rings = ring_pixels(downsample(t.image.pixels, 10));
            if (cls == cfg.ambiguous_pair[1]) EXPECT_GT(rings, 20u);
            else EXPECT_EQ(rings, 0u) << "class " << int(cls);
            ++checked[cls - 1];
        }
    }
    for (auto n : checked) EXPECT_GT(n, 0u);
}

TEST(SynthWsi, RingStaysOutsideSlicesThatHoldTheBlob) {
    const SynthConfig cfg;
    ASSERT_GT(cfg.ring_gap, 32.0);
    const auto li = synth_wsi(cfg, 3);
    const auto ringed = cfg.ambiguous_pair[1];
    // A slice containing blob pixels reaches at most 32 px outward, less than the gap.
    for (std::size_t y = 0; y + 32 <= li.mask.height; y += 32)
        for (std::size_t x = 0; x + 32 <= li.mask.width; x += 32) {
            const auto m = crop(li.mask, y, x, 32, 32);
            if (std::find(m.labels.begin(), m.labels.end(), ringed) == m.labels.end()) continue;
            const auto img = crop(li.pixels, y, x, 32, 32);
            std::size_t ring_like = 0;
            for (std::size_t i = 0; i < 32 * 32; ++i)
                ring_like += img.pixels[3 * i] > 130 && img.pixels[3 * i] < 170 && img.pixels[3 * i + 2] < 90;
            EXPECT_EQ(ring_like, 0u) << y << "," << x;
        }
}

}  // namespace
