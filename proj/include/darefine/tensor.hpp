#ifndef DAREFINE_TENSOR_HPP
#define DAREFINE_TENSOR_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace darefine {

/// Raised when block wiring or channel counts do not line up.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Raised when an input image or raster has an unusable shape.
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Shape of a channel-major batch: channels, batch, height, width.
///
/// Activations are stored as [c][n][h][w] so that a convolution output
/// (out_channels x batch*pixels) is already in place, and channel
/// concatenation is a plain append of rows. Convolution kernels reuse the
/// same four slots as (out, in, kh, kw).
struct Shape {
    std::size_t c = 0, n = 1, h = 1, w = 1;

    std::size_t size() const { return c * n * h * w; }
    std::size_t plane() const { return n * h * w; }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        std::ostringstream os;
        os << "(" << c << "," << n << "," << h << "," << w << ")";
        return os.str();
    }
};

/// Storage with Eigen's vector alignment. Fixed alignment keeps vectorised
/// kernels on the same code path, so results do not depend on heap addresses.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape_(s), data_(s.size(), fill) {}
    Tensor(Shape s, const std::vector<T>& values) : shape_(s), data_(values.begin(), values.end()) {
        if (data_.size() != shape_.size())
            throw std::invalid_argument("tensor value count does not match shape " + shape_.str());
    }

    /// Single-sample feature map of shape C x H x W.
    static Tensor feature_map(std::size_t c, std::size_t h, std::size_t w, T fill = T(0)) {
        return Tensor(Shape{c, 1, h, w}, fill);
    }

    const Shape& shape() const { return shape_; }
    std::size_t channels() const { return shape_.c; }
    std::size_t batch() const { return shape_.n; }
    std::size_t height() const { return shape_.h; }
    std::size_t width() const { return shape_.w; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::size_t index(std::size_t c, std::size_t n, std::size_t y, std::size_t x) const {
        return ((c * shape_.n + n) * shape_.h + y) * shape_.w + x;
    }
    T& at(std::size_t c, std::size_t n, std::size_t y, std::size_t x) { return data_[index(c, n, y, x)]; }
    const T& at(std::size_t c, std::size_t n, std::size_t y, std::size_t x) const {
        return data_[index(c, n, y, x)];
    }
    /// Feature-map accessor for the n == 0 sample.
    T& operator()(std::size_t c, std::size_t y, std::size_t x) { return at(c, 0, y, x); }
    const T& operator()(std::size_t c, std::size_t y, std::size_t x) const { return at(c, 0, y, x); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor& operator+=(const Tensor& o) {
        check_same(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    /// Extracts sample `n` as a single-sample tensor.
    Tensor sample(std::size_t n) const {
        Tensor out(Shape{shape_.c, 1, shape_.h, shape_.w});
        const std::size_t hw = shape_.h * shape_.w;
        for (std::size_t c = 0; c < shape_.c; ++c)
            std::copy_n(data_.data() + index(c, n, 0, 0), hw, out.data() + c * hw);
        return out;
    }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    void check_same(const Tensor& o) const {
        if (!(shape_ == o.shape_))
            throw ConfigError("shape mismatch " + shape_.str() + " vs " + o.shape_.str());
    }

    Shape shape_;
    AlignedVector<T> data_;
};

template <class T>
using FeatureMap = Tensor<T>;

/// Stacks single-sample tensors of equal shape along the batch axis.
template <class T>
Tensor<T> stack_batch(std::span<const Tensor<T>> items) {
    if (items.empty()) throw std::invalid_argument("stack_batch: no items");
    const Shape s0 = items[0].shape();
    const std::size_t n = items.size();
    Tensor<T> out(Shape{s0.c, n, s0.h, s0.w});
    const std::size_t hw = s0.h * s0.w;
    for (std::size_t i = 0; i < n; ++i) {
        const Shape si = items[i].shape();
        if (si.c != s0.c || si.h != s0.h || si.w != s0.w || si.n != 1)
            throw ConfigError("stack_batch: inconsistent item shape " + si.str());
        for (std::size_t c = 0; c < s0.c; ++c)
            std::copy_n(items[i].data() + c * hw, hw, out.data() + out.index(c, i, 0, 0));
    }
    return out;
}

}  // namespace darefine

#endif
