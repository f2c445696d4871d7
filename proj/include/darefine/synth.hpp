#ifndef DAREFINE_SYNTH_HPP
#define DAREFINE_SYNTH_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "image.hpp"

namespace darefine {

/// Procedural stain-like texture: base colour, per-pixel noise, and a Poisson
/// scatter of dark disc "nuclei".
struct TextureSpec {
    std::array<double, 3> base{220, 190, 210};
    double noise = 12;
    double nuclei_density = 0.002;  // nuclei per pixel
    std::array<double, 3> nuclei_color{120, 60, 150};
    double nuclei_radius = 2.5;
};

/// Synthetic slide generator configuration.
///
/// The slide is a grid of `cell_size` cells, each holding one random blob
/// labelled with one of the lesion classes 1..3. The two classes of
/// `ambiguous_pair` share a texture; blobs of the second class are enclosed
/// by a concentric capsule ring (labelled normal) separated from the blob by
/// a gap of normal tissue. The ring shows up in a downsampled whole-cell view
/// but never in a small window that contains the blob itself.
struct SynthConfig {
    std::size_t height = 640, width = 640;
    std::size_t cell_size = 320;
    double min_radius = 70, max_radius = 95;  // blob radii (pixels)
    double ring_gap = 40, ring_width = 20;
    std::array<std::uint8_t, 2> ambiguous_pair{1, 2};

    std::array<TextureSpec, 4> textures{{
        {{232, 200, 220}, 10, 0.0015, {160, 100, 170}, 2.0},  // normal
        {{200, 145, 195}, 14, 0.0060, {110, 50, 140}, 3.0},   // benign
        {{200, 145, 195}, 14, 0.0060, {110, 50, 140}, 3.0},   // in situ: same texture as benign
        {{165, 95, 165}, 14, 0.0150, {70, 20, 110}, 3.0},     // invasive
    }};
    TextureSpec ring{{150, 85, 60}, 10, 0.0, {0, 0, 0}, 0.0};

    void validate() const {
        if (!cell_size || height % cell_size || width % cell_size) throw ConfigError("slide size must be a multiple of cell_size");
        if (min_radius <= 0 || max_radius < min_radius) throw ConfigError("invalid blob radius range");
        if (ambiguous_pair[0] == ambiguous_pair[1] || ambiguous_pair[0] == 0 || ambiguous_pair[1] == 0 || ambiguous_pair[0] > 3 ||
            ambiguous_pair[1] > 3)
            throw ConfigError("ambiguous_pair must name two distinct lesion classes");
        if (max_radius + ring_gap + ring_width > 0.5 * double(cell_size)) throw ConfigError("blob plus ring does not fit a cell");
    }
};

inline LabeledImage synth_wsi(const SynthConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t H = cfg.height, W = cfg.width;
    const std::size_t rows = H / cfg.cell_size, cols = W / cfg.cell_size;

    // Balanced class assignment over cells: cycle 1,2,3 then shuffle.
    std::vector<std::uint8_t> kinds(rows * cols);
    const std::size_t offset = std::uniform_int_distribution<std::size_t>(0, 2)(rng);
    for (std::size_t i = 0; i < kinds.size(); ++i) kinds[i] = std::uint8_t(1 + (i + offset) % 3);
    std::shuffle(kinds.begin(), kinds.end(), rng);

    // Texture map: 0..3 class textures, 4 ring.
    constexpr std::uint8_t kRing = 4;
    Mask texture(H, W, 0);
    LabeledImage out{Image(H, W), Mask(H, W, 0)};

    for (std::size_t cr = 0; cr < rows; ++cr)
        for (std::size_t cc = 0; cc < cols; ++cc) {
            const std::uint8_t cls = kinds[cr * cols + cc];
            const bool ringed = cls == cfg.ambiguous_pair[1];
            const double r = cfg.min_radius + (cfg.max_radius - cfg.min_radius) * u(rng);
            const double aspect = 0.8 + 0.4 * u(rng);
            const double ry = r * aspect, rx = r / aspect;
            const double reach = std::max(ry, rx) + cfg.ring_gap + cfg.ring_width;
            const double half = 0.5 * double(cfg.cell_size);
            const double slack = std::max(0.0, half - reach);
            const double cy = double(cr * cfg.cell_size) + half + (2 * u(rng) - 1) * slack;
            const double cx = double(cc * cfg.cell_size) + half + (2 * u(rng) - 1) * slack;
            const double wobble_amp = 0.08 * u(rng), wobble_phase = 2 * std::numbers::pi * u(rng);
            const int wobble_freq = 3 + int(u(rng) * 3);

            for (std::size_t y = cr * cfg.cell_size; y < (cr + 1) * cfg.cell_size; ++y)
                for (std::size_t x = cc * cfg.cell_size; x < (cc + 1) * cfg.cell_size; ++x) {
                    const double dy = (double(y) + 0.5 - cy) / ry, dx = (double(x) + 0.5 - cx) / rx;
                    const double theta = std::atan2(dy, dx);
                    const double boundary = 1.0 + wobble_amp * std::sin(wobble_freq * theta + wobble_phase);
                    const double rho = std::sqrt(dy * dy + dx * dx) / boundary;  // 1 on the blob edge
                    if (rho <= 1.0) {
                        out.mask.at(y, x) = cls;
                        texture.at(y, x) = cls;
                    } else if (ringed) {
                        const double dist = (rho - 1.0) * std::min(ry, rx);  // approx. distance outside the edge
                        if (dist >= cfg.ring_gap && dist < cfg.ring_gap + cfg.ring_width) texture.at(y, x) = kRing;
                    }
                }
        }

    auto spec_of = [&](std::uint8_t t) -> const TextureSpec& { return t == kRing ? cfg.ring : cfg.textures[t]; };

    // Base colour plus noise.
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<std::array<double, 3>> rgb(H * W);
    for (std::size_t i = 0; i < H * W; ++i) {
        const auto& t = spec_of(texture.labels[i]);
        for (std::size_t c = 0; c < 3; ++c) rgb[i][c] = t.base[c] + t.noise * g(rng);
    }

    // Nuclei, stamped only where the texture matches the generating class.
    for (std::uint8_t t = 0; t <= kRing; ++t) {
        const auto& spec = spec_of(t);
        if (spec.nuclei_density <= 0) continue;
        std::poisson_distribution<std::size_t> count(spec.nuclei_density * double(H * W));
        const std::size_t n = count(rng);
        for (std::size_t k = 0; k < n; ++k) {
            const double ny = u(rng) * double(H), nx = u(rng) * double(W);
            const double rad = spec.nuclei_radius * (0.7 + 0.6 * u(rng));
            const long y0 = std::max(0L, long(ny - rad)), y1 = std::min(long(H) - 1, long(ny + rad));
            const long x0 = std::max(0L, long(nx - rad)), x1 = std::min(long(W) - 1, long(nx + rad));
            if (texture.at(std::size_t(ny), std::size_t(nx)) != t) continue;
            for (long y = y0; y <= y1; ++y)
                for (long x = x0; x <= x1; ++x) {
                    const double d2 = (double(y) + 0.5 - ny) * (double(y) + 0.5 - ny) + (double(x) + 0.5 - nx) * (double(x) + 0.5 - nx);
                    const std::size_t i = std::size_t(y) * W + std::size_t(x);
                    if (d2 <= rad * rad && texture.labels[i] == t)
                        for (std::size_t c = 0; c < 3; ++c) rgb[i][c] = spec.nuclei_color[c] + 0.5 * spec.noise * g(rng);
                }
        }
    }

    for (std::size_t i = 0; i < H * W; ++i)
        for (std::size_t c = 0; c < 3; ++c) out.pixels.pixels[i * 3 + c] = std::uint8_t(std::clamp(std::lround(rgb[i][c]), 0L, 255L));
    return out;
}

}  // namespace darefine

#endif
