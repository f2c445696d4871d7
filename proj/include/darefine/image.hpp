#ifndef DAREFINE_IMAGE_HPP
#define DAREFINE_IMAGE_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include "tensor.hpp"

namespace darefine {

/// Interleaved 8-bit RGB raster.
struct Image {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), pixels(h * w * 3, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x, std::size_t ch) { return pixels[(y * width + x) * 3 + ch]; }
    std::uint8_t at(std::size_t y, std::size_t x, std::size_t ch) const { return pixels[(y * width + x) * 3 + ch]; }
    bool operator==(const Image&) const = default;
};

/// Class-index raster. 255 marks pixels that carry no label.
struct Mask {
    static constexpr std::uint8_t kUnlabeled = 255;

    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> labels;

    Mask() = default;
    Mask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
    bool operator==(const Mask&) const = default;
};

struct LabeledImage {
    Image pixels;
    Mask mask;

    void validate(std::size_t num_classes = 4) const {
        if (pixels.height != mask.height || pixels.width != mask.width)
            throw InputError("image and mask sizes differ");
        for (auto v : mask.labels)
            if (v >= num_classes) throw InputError("mask value " + std::to_string(v) + " outside class range");
    }
};

/// Mask colours: normal, benign, in situ, invasive.
inline constexpr std::array<std::array<std::uint8_t, 3>, 4> kClassPalette{{
    {0, 0, 0},
    {255, 0, 0},
    {0, 255, 0},
    {0, 0, 255},
}};

inline constexpr std::array<const char*, 4> kClassNames{"normal", "benign", "in_situ", "invasive"};

/// Crop with top-left (y, x).
inline Image crop(const Image& img, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
    if (y + h > img.height || x + w > img.width) throw InputError("crop window outside image");
    Image out(h, w);
    for (std::size_t r = 0; r < h; ++r)
        std::copy_n(img.pixels.begin() + std::ptrdiff_t(((y + r) * img.width + x) * 3), w * 3,
                    out.pixels.begin() + std::ptrdiff_t(r * w * 3));
    return out;
}

inline Mask crop(const Mask& m, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
    if (y + h > m.height || x + w > m.width) throw InputError("crop window outside mask");
    Mask out(h, w);
    for (std::size_t r = 0; r < h; ++r)
        std::copy_n(m.labels.begin() + std::ptrdiff_t((y + r) * m.width + x), w, out.labels.begin() + std::ptrdiff_t(r * w));
    return out;
}

inline LabeledImage crop(const LabeledImage& li, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
    return {crop(li.pixels, y, x, h, w), crop(li.mask, y, x, h, w)};
}

/// Bilinear resampling of an 8-bit image (half-pixel centres).
inline Image resize_bilinear(const Image& img, std::size_t h, std::size_t w) {
    if (img.height == h && img.width == w) return img;
    Image out(h, w);
    const double sy = double(img.height) / double(h), sx = double(img.width) / double(w);
    for (std::size_t y = 0; y < h; ++y) {
        double fy = std::max(0.0, (double(y) + 0.5) * sy - 0.5);
        const std::size_t y0 = std::min(std::size_t(fy), img.height - 1), y1 = std::min(y0 + 1, img.height - 1);
        fy -= double(y0);
        for (std::size_t x = 0; x < w; ++x) {
            double fx = std::max(0.0, (double(x) + 0.5) * sx - 0.5);
            const std::size_t x0 = std::min(std::size_t(fx), img.width - 1), x1 = std::min(x0 + 1, img.width - 1);
            fx -= double(x0);
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = img.at(y0, x0, c) * (1 - fx) + img.at(y0, x1, c) * fx;
                const double bot = img.at(y1, x0, c) * (1 - fx) + img.at(y1, x1, c) * fx;
                out.at(y, x, c) = std::uint8_t(std::lround(top * (1 - fy) + bot * fy));
            }
        }
    }
    return out;
}

inline Mask resize_nearest(const Mask& m, std::size_t h, std::size_t w) {
    if (m.height == h && m.width == w) return m;
    Mask out(h, w);
    for (std::size_t y = 0; y < h; ++y) {
        const std::size_t sy = std::min(m.height - 1, std::size_t((double(y) + 0.5) * double(m.height) / double(h)));
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t sx = std::min(m.width - 1, std::size_t((double(x) + 0.5) * double(m.width) / double(w)));
            out.at(y, x) = m.at(sy, sx);
        }
    }
    return out;
}

/// Maps 8-bit pixels to roughly zero-mean network input, (v - 128) / 64.
template <class T>
Tensor<T> to_tensor(const Image& img) {
    Tensor<T> t = Tensor<T>::feature_map(3, img.height, img.width);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) t(c, y, x) = (T(img.at(y, x, c)) - T(128)) / T(64);
    return t;
}

/// Colourises a mask with the class palette.
inline Image colorize(const Mask& m) {
    Image out(m.height, m.width);
    for (std::size_t i = 0; i < m.labels.size(); ++i) {
        const auto v = m.labels[i];
        const std::array<std::uint8_t, 3> rgb = v < kClassPalette.size() ? kClassPalette[v] : std::array<std::uint8_t, 3>{128, 128, 128};
        for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = rgb[c];
    }
    return out;
}

// PNG input/output via libpng. libpng reports errors with longjmp, so the
// raw routines below keep only trivially destructible state across setjmp.
namespace png {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void quiet_warning(png_structp, png_const_charp) {}

inline bool write_raw(const char* path, std::size_t h, std::size_t w, int color_type, std::size_t row_bytes,
                      const std::uint8_t* data, const png_color* palette, int palette_size) {
    std::FILE* f = std::fopen(path, "wb");
    if (!f) return false;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, quiet_warning);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(f);
        return false;
    }
    png_init_io(png, f);
    png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 8, color_type, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    if (palette) png_set_PLTE(png, info, palette, palette_size);
    png_write_info(png, info);
    for (std::size_t y = 0; y < h; ++y) png_write_row(png, const_cast<png_bytep>(data + y * row_bytes));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return std::fclose(f) == 0;
}

struct Decoded {
    std::size_t height = 0, width = 0, channels = 0;
    std::vector<std::uint8_t> data;
    std::vector<png_bytep> rows;
    bool wrong_kind = false;
};

inline bool read_raw(const char* path, bool keep_indices, Decoded& out) {
    std::FILE* f = std::fopen(path, "rb");
    if (!f) return false;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, quiet_warning);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(f);
        return false;
    }
    png_init_io(png, f);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (depth < 8) png_set_packing(png);
    if (keep_indices) {
        if (color != PNG_COLOR_TYPE_PALETTE && color != PNG_COLOR_TYPE_GRAY) {
            out.wrong_kind = true;
            png_destroy_read_struct(&png, &info, nullptr);
            std::fclose(f);
            return false;
        }
    } else {
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
        if ((color & PNG_COLOR_MASK_ALPHA) || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);
    out.height = png_get_image_height(png, info);
    out.width = png_get_image_width(png, info);
    out.channels = png_get_channels(png, info);
    const std::size_t row = png_get_rowbytes(png, info);
    out.data.resize(row * out.height);
    out.rows.resize(out.height);
    for (std::size_t y = 0; y < out.height; ++y) out.rows[y] = out.data.data() + y * row;
    png_read_image(png, out.rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(f);
    return true;
}

inline Decoded read(const std::string& path, bool keep_indices) {
    Decoded d;
    if (!read_raw(path.c_str(), keep_indices, d)) {
        if (d.wrong_kind) throw IoError(path + ": label raster must be palette or grayscale");
        throw IoError("cannot read PNG " + path);
    }
    return d;
}

inline void write(const std::string& path, std::size_t h, std::size_t w, int color_type, std::size_t row_bytes,
                  const std::uint8_t* data, const png_color* palette, int palette_size) {
    if (!write_raw(path.c_str(), h, w, color_type, row_bytes, data, palette, palette_size))
        throw IoError("cannot write PNG " + path);
}

}  // namespace detail

inline void write_rgb(const std::string& path, const Image& img) {
    detail::write(path, img.height, img.width, PNG_COLOR_TYPE_RGB, img.width * 3, img.pixels.data(), nullptr, 0);
}

/// Writes an indexed PNG whose palette entries are the class colours.
inline void write_mask(const std::string& path, const Mask& m) {
    std::array<png_color, 256> palette{};
    for (std::size_t i = 0; i < palette.size(); ++i) palette[i] = {128, 128, 128};
    for (std::size_t i = 0; i < kClassPalette.size(); ++i)
        palette[i] = {kClassPalette[i][0], kClassPalette[i][1], kClassPalette[i][2]};
    detail::write(path, m.height, m.width, PNG_COLOR_TYPE_PALETTE, m.width, m.labels.data(), palette.data(), 256);
}

inline Image read_rgb(const std::string& path) {
    auto d = detail::read(path, false);
    if (d.channels != 3) throw IoError(path + ": expected RGB data");
    Image img;
    img.height = d.height;
    img.width = d.width;
    img.pixels = std::move(d.data);
    return img;
}

inline Mask read_mask(const std::string& path) {
    auto d = detail::read(path, true);
    if (d.channels != 1) throw IoError(path + ": expected single-channel labels");
    Mask m;
    m.height = d.height;
    m.width = d.width;
    m.labels = std::move(d.data);
    return m;
}

}  // namespace png

}  // namespace darefine

#endif
