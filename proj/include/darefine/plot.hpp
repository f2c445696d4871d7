#ifndef DAREFINE_PLOT_HPP
#define DAREFINE_PLOT_HPP

#include <algorithm>
#include <array>
#include <cctype>
#include <optional>
#include <string>
#include <vector>

#include "image.hpp"

namespace darefine::plot {

using Color = std::array<std::uint8_t, 3>;

inline constexpr Color kWhite{255, 255, 255};
inline constexpr Color kInk{40, 40, 40};
inline constexpr Color kGrid{210, 210, 210};
inline constexpr Color kMissing{160, 160, 160};

struct Rect {
    std::size_t y = 0, x = 0, h = 0, w = 0;
};

inline void fill(Image& img, Rect r, Color c) {
    for (std::size_t y = r.y; y < std::min(img.height, r.y + r.h); ++y)
        for (std::size_t x = r.x; x < std::min(img.width, r.x + r.w); ++x)
            for (std::size_t ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[ch];
}

inline void outline(Image& img, Rect r, Color c) {
    fill(img, {r.y, r.x, 1, r.w}, c);
    fill(img, {r.y + r.h - 1, r.x, 1, r.w}, c);
    fill(img, {r.y, r.x, r.h, 1}, c);
    fill(img, {r.y, r.x + r.w - 1, r.h, 1}, c);
}

inline void blit(Image& dst, const Image& src, std::size_t y, std::size_t x) {
    for (std::size_t r = 0; r < src.height && y + r < dst.height; ++r)
        for (std::size_t c = 0; c < src.width && x + c < dst.width; ++c)
            for (std::size_t ch = 0; ch < 3; ++ch) dst.at(y + r, x + c, ch) = src.at(r, c, ch);
}

namespace detail {

struct Glyph {
    char ch;
    std::array<std::uint8_t, 7> rows;  // 5 columns, bit 4 is the leftmost
};

// 5x7 bitmap font; lower-case letters render as upper case.
inline constexpr Glyph kFont[] = {
    {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}}, {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
    {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
    {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}}, {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
    {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}}, {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
    {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}}, {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
    {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}}, {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}}, {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
    {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}}, {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
    {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}}, {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
    {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}}, {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
    {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}}, {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
    {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}}, {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}}, {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
    {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}}, {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
    {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}}, {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}}, {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
    {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}}, {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}},
    {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}}, {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
    {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}}, {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
    {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}}, {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
    {'/', {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00}}, {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
    {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}}, {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}},
    {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}}, {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
};

inline const Glyph* glyph(char c) {
    const char u = char(std::toupper(static_cast<unsigned char>(c)));
    for (const auto& g : kFont)
        if (g.ch == u) return &g;
    return nullptr;
}

}  // namespace detail

inline constexpr std::size_t kGlyphWidth = 5, kGlyphHeight = 7, kGlyphAdvance = 6;

inline std::size_t text_width(const std::string& s, std::size_t scale = 1) { return s.size() * kGlyphAdvance * scale; }

/// Draws `s` with its top-left corner at (y, x); unknown characters render as boxes.
inline void text(Image& img, std::size_t y, std::size_t x, const std::string& s, Color c, std::size_t scale = 1) {
    for (std::size_t i = 0; i < s.size(); ++i) {
        const std::size_t gx = x + i * kGlyphAdvance * scale;
        const auto* g = detail::glyph(s[i]);
        if (!g) {
            outline(img, {y, gx, kGlyphHeight * scale, kGlyphWidth * scale}, c);
            continue;
        }
        for (std::size_t r = 0; r < kGlyphHeight; ++r)
            for (std::size_t col = 0; col < kGlyphWidth; ++col)
                if (g->rows[r] & (0x10 >> col)) fill(img, {y + r * scale, gx + col * scale, scale, scale}, c);
    }
}

/// One bar group: a configuration name and its per-class IoU (absent classes
/// are drawn as a hatched stub).
struct BarGroup {
    std::string label;
    std::vector<std::optional<double>> iou;
};

struct Chart {
    Image image;
    std::vector<Rect> legend_swatches;  // one per class, filled with the class colour
};

inline std::string fixed2(double v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

/// Grouped per-class IoU bar chart with a class legend.
inline Chart iou_bar_chart(const std::vector<BarGroup>& groups, const std::string& title = "PER-CLASS IOU") {
    if (groups.empty()) throw InputError("bar chart needs at least one group");
    const std::size_t classes = kClassPalette.size();
    constexpr std::size_t bar_w = 14, bar_gap = 2, group_gap = 24, plot_h = 200;
    constexpr std::size_t left = 44, top = 30, bottom_labels = 40, legend_h = 24;
    std::size_t max_label = 0;
    for (const auto& g : groups) max_label = std::max(max_label, text_width(g.label));
    const std::size_t group_w = std::max(classes * (bar_w + bar_gap), max_label + 4);
    const std::size_t width = std::max<std::size_t>(left + groups.size() * (group_w + group_gap) + 10, 420);
    const std::size_t height = top + plot_h + bottom_labels + legend_h + 10;

    Chart chart{Image(height, width, 255), {}};
    Image& img = chart.image;
    text(img, 8, left, title, kInk, 2);

    for (int t = 0; t <= 4; ++t) {
        const double v = t * 0.25;
        const std::size_t y = top + plot_h - std::size_t(v * plot_h);
        fill(img, {y, left, 1, width - left - 6}, t == 0 ? kInk : kGrid);
        text(img, y - 3, 4, fixed2(v), kInk);
    }
    fill(img, {top, left, plot_h + 1, 1}, kInk);

    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        if (g.iou.size() != classes) throw InputError("bar group '" + g.label + "' has the wrong number of classes");
        const std::size_t gx = left + 8 + gi * (group_w + group_gap);
        for (std::size_t c = 0; c < classes; ++c) {
            const std::size_t x = gx + c * (bar_w + bar_gap);
            if (!g.iou[c]) {
                for (std::size_t k = 0; k < bar_w; k += 3) fill(img, {top + plot_h - 6, x + k, 6, 1}, kMissing);
                continue;
            }
            const double v = std::clamp(*g.iou[c], 0.0, 1.0);
            const std::size_t h = std::size_t(v * plot_h + 0.5);
            fill(img, {top + plot_h - h, x, h, bar_w}, kClassPalette[c]);
            outline(img, {top + plot_h - h, x, std::max<std::size_t>(h, 1), bar_w}, kInk);
        }
        text(img, top + plot_h + 8, gx, g.label, kInk);
    }

    std::size_t lx = left;
    const std::size_t ly = top + plot_h + bottom_labels;
    for (std::size_t c = 0; c < classes; ++c) {
        const Rect sw{ly, lx, 12, 12};
        fill(img, sw, kClassPalette[c]);
        chart.legend_swatches.push_back(sw);
        text(img, ly + 3, lx + 16, kClassNames[c], kInk);
        lx += 16 + text_width(kClassNames[c]) + 16;
    }
    return chart;
}

struct Panels {
    Image image;
    Rect input, ground_truth, prediction;
};

/// Side-by-side input, ground-truth and prediction rasters under captions.
inline Panels comparison_panels(const Image& input, const Mask& gt, const Mask& pred, const std::string& caption = "") {
    if (gt.height != input.height || gt.width != input.width || pred.height != input.height || pred.width != input.width)
        throw InputError("panel rasters differ in size");
    constexpr std::size_t margin = 10, header = 22;
    const std::size_t top = caption.empty() ? header : header + 14;
    const std::size_t H = input.height, W = input.width;
    Panels p;
    p.image = Image(top + H + margin, 4 * margin + 3 * W, 255);
    if (!caption.empty()) text(p.image, 4, margin, caption, kInk);
    const char* names[3] = {"IMAGE", "GROUND TRUTH", "PREDICTION"};
    Rect* rects[3] = {&p.input, &p.ground_truth, &p.prediction};
    const Image rasters[3] = {input, colorize(gt), colorize(pred)};
    for (std::size_t k = 0; k < 3; ++k) {
        const std::size_t x = margin + k * (W + margin);
        text(p.image, top - 12, x, names[k], kInk);
        *rects[k] = {top, x, H, W};
        blit(p.image, rasters[k], top, x);
    }
    return p;
}

inline Image crop(const Image& img, Rect r) { return darefine::crop(img, r.y, r.x, r.h, r.w); }

}  // namespace darefine::plot

#endif
