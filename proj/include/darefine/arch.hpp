#ifndef DAREFINE_ARCH_HPP
#define DAREFINE_ARCH_HPP

#include <array>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ops.hpp"
#include "params.hpp"

namespace darefine {

enum class Mode { single_input, multi_size_dual, dual_input };
enum class Fusion { concat, add, attention };

inline std::string to_string(Mode m) {
    switch (m) {
        case Mode::single_input: return "single_input";
        case Mode::multi_size_dual: return "multi_size_dual";
        case Mode::dual_input: return "dual_input";
    }
    throw ConfigError("unknown mode");
}

inline std::string to_string(Fusion f) {
    switch (f) {
        case Fusion::concat: return "concat";
        case Fusion::add: return "add";
        case Fusion::attention: return "attention";
    }
    throw ConfigError("unknown fusion strategy");
}

inline Mode parse_mode(const std::string& s) {
    if (s == "single_input") return Mode::single_input;
    if (s == "multi_size_dual") return Mode::multi_size_dual;
    if (s == "dual_input") return Mode::dual_input;
    throw ConfigError("unknown mode '" + s + "'");
}

inline Fusion parse_fusion(const std::string& s) {
    if (s == "concat") return Fusion::concat;
    if (s == "add") return Fusion::add;
    if (s == "attention") return Fusion::attention;
    throw ConfigError("unknown fusion strategy '" + s + "'");
}

struct ConvSpec {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 1;
    bool bias = true;

    static ConvSpec same(std::size_t in, std::size_t out, std::size_t kernel, bool bias = true) {
        return {in, out, kernel, 1, (kernel - 1) / 2, bias};
    }

    std::size_t parameter_count() const {
        return out_channels * in_channels * kernel * kernel + (bias ? out_channels : 0);
    }
};

/// Residual backbone description. Stage outputs sit at strides 4, 8, 16, 32.
struct EncoderSpec {
    static constexpr std::array<std::size_t, 4> kStrides{4, 8, 16, 32};

    std::string variant_name = "tiny50";
    std::array<std::size_t, 4> stage_channels{16, 32, 64, 128};
    std::array<std::size_t, 4> stage_depths{1, 1, 2, 1};

    /// Reduced-width analogs of the 50/101/152-layer residual families; depths
    /// keep the deep third stage of the originals.
    static EncoderSpec variant(const std::string& name, std::array<std::size_t, 4> channels = {16, 32, 64, 128}) {
        EncoderSpec s;
        s.variant_name = name;
        s.stage_channels = channels;
        if (name == "tiny50") s.stage_depths = {1, 1, 2, 1};
        else if (name == "tiny101") s.stage_depths = {1, 1, 4, 1};
        else if (name == "tiny152") s.stage_depths = {1, 2, 6, 1};
        else throw ConfigError("unknown encoder variant '" + name + "'");
        return s;
    }

    void validate() const {
        for (std::size_t i = 0; i < 4; ++i) {
            if (stage_channels[i] == 0) throw ConfigError("encoder stage_channels must be positive");
            if (stage_depths[i] == 0) throw ConfigError("encoder stage_depths must be positive");
        }
    }
};

struct ModelSpec {
    EncoderSpec slice_encoder;
    std::optional<EncoderSpec> full_encoder;
    Mode mode = Mode::dual_input;
    Fusion fusion = Fusion::attention;
    std::size_t num_classes = 4;
    std::size_t decoder_channels = 16;
    std::size_t crp_stages = 2;

    bool dual() const { return mode != Mode::single_input; }

    void validate() const {
        slice_encoder.validate();
        if (mode == Mode::single_input && full_encoder) throw ConfigError("single_input mode must not declare full_encoder");
        if (mode != Mode::single_input && !full_encoder) throw ConfigError(to_string(mode) + " mode requires full_encoder");
        if (full_encoder) full_encoder->validate();
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (decoder_channels == 0) throw ConfigError("decoder_channels must be positive");
        if (crp_stages == 0) throw ConfigError("crp_stages must be positive");
    }

    /// Convenience builder: the full encoder mirrors the slice encoder.
    static ModelSpec make(Mode mode, Fusion fusion, EncoderSpec enc = EncoderSpec::variant("tiny50"),
                          std::size_t decoder_channels = 16) {
        ModelSpec s;
        s.slice_encoder = enc;
        if (mode != Mode::single_input) s.full_encoder = enc;
        s.mode = mode;
        s.fusion = fusion;
        s.decoder_channels = decoder_channels;
        return s;
    }
};

/// Registers parameters under a dotted path prefix.
template <class T>
class ParamBuilder {
public:
    ParamBuilder(ParameterStore<T>& store, std::mt19937_64& rng, std::string prefix = "")
        : store_(&store), rng_(&rng), prefix_(std::move(prefix)) {}

    ParamBuilder sub(const std::string& name) const {
        return ParamBuilder(*store_, *rng_, prefix_.empty() ? name : prefix_ + "." + name);
    }

    Var<T> kernel(const std::string& name, Shape s, double gain = 1.0) {
        return store_->add(path(name), gain == 0.0 ? Tensor<T>(s) : he_normal<T>(s, *rng_, gain));
    }
    Var<T> zeros(const std::string& name, Shape s) { return store_->add(path(name), Tensor<T>(s)); }

private:
    std::string path(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }

    ParameterStore<T>* store_;
    std::mt19937_64* rng_;
    std::string prefix_;
};

/// Initial gain of convolutions that close a residual branch.
inline constexpr double kResidualGain = 0.1;

template <class T>
struct Conv {
    ConvSpec spec;
    Var<T> weight, bias;

    Conv() = default;
    /// `gain` scales the initial weight deviation; 0 gives zero weights.
    Conv(ParamBuilder<T> b, ConvSpec s, double gain = 1.0) : spec(s) {
        if (s.kernel % 2 == 0) throw ConfigError("conv kernel must be odd");
        weight = b.kernel("weight", Shape{s.out_channels, s.in_channels, s.kernel, s.kernel}, gain);
        if (s.bias) bias = b.zeros("bias", Shape{s.out_channels, 1, 1, 1});
    }

    Var<T> operator()(const Var<T>& x) const {
        if (x.shape().c != spec.in_channels)
            throw ConfigError("conv expects " + std::to_string(spec.in_channels) + " channels, got " +
                              std::to_string(x.shape().c));
        return ops::conv2d(x, weight, bias, spec.stride, spec.padding);
    }
};

/// Residual convolution unit: x + conv2(relu(conv1(relu(x)))), no normalization.
template <class T>
struct Rcu {
    std::size_t channels = 0;
    Conv<T> conv1, conv2;

    Rcu() = default;
    Rcu(ParamBuilder<T> b, std::size_t c)
        : channels(c),
          conv1(b.sub("conv1"), ConvSpec::same(c, c, 3)),
          conv2(b.sub("conv2"), ConvSpec::same(c, c, 3), kResidualGain) {}

    Var<T> operator()(const Var<T>& x) const {
        if (x.shape().c != channels)
            throw ConfigError("RCU declared for " + std::to_string(channels) + " channels, got " + std::to_string(x.shape().c));
        return ops::add(x, conv2(ops::relu(conv1(ops::relu(x)))));
    }
};

/// Chained residual pooling with 5x5 stride-1 max pools.
template <class T>
struct Crp {
    static constexpr std::size_t kPoolWindow = 5;

    std::size_t channels = 0;
    std::vector<Conv<T>> convs;

    Crp() = default;
    Crp(ParamBuilder<T> b, std::size_t c, std::size_t stages) : channels(c) {
        if (stages == 0) throw ConfigError("CRP needs at least one stage");
        for (std::size_t s = 0; s < stages; ++s)
            convs.emplace_back(b.sub("stage" + std::to_string(s + 1)), ConvSpec::same(c, c, 3, /*bias=*/false), kResidualGain);
    }

    Var<T> operator()(const Var<T>& x) const {
        if (x.shape().c != channels)
            throw ConfigError("CRP declared for " + std::to_string(channels) + " channels, got " + std::to_string(x.shape().c));
        Var<T> acc = ops::relu(x);
        Var<T> pooled = acc;
        for (const auto& conv : convs) {
            pooled = ops::max_pool_same(pooled, kPoolWindow);
            acc = ops::add(acc, conv(pooled));
        }
        return acc;
    }
};

template <class T>
struct FusionOutput {
    Var<T> out;
    Var<T> attention;  // W_attn; defined only for the attention strategy
};

/// Combines the slice path, the optional full-image path, and the optional
/// upsampled output of the coarser block into `decoder_channels` maps.
///
/// add:       adapt(slice) + adapt(full) + prev, then an output RCU
/// concat:    1x1 projection of [slice, full, prev], then an output RCU
/// attention: W = sigmoid(conv3(relu(conv3([adapt(slice), full, prev]))));
///            out = W * adapt(slice) + prev
template <class T>
struct FusionBlock {
    Fusion kind = Fusion::add;
    std::size_t slice_channels = 0, full_channels = 0, out_channels = 0;
    bool has_full = false, has_prev = false;

    Conv<T> slice_adapter, full_adapter, project, attn_hidden, attn_out;
    Rcu<T> out_rcu;

    FusionBlock() = default;
    FusionBlock(ParamBuilder<T> b, Fusion k, std::size_t cs, std::optional<std::size_t> cf, std::size_t d, bool prev)
        : kind(k), slice_channels(cs), full_channels(cf.value_or(0)), out_channels(d), has_full(cf.has_value()),
          has_prev(prev) {
        switch (kind) {
            case Fusion::add:
                slice_adapter = Conv<T>(b.sub("slice_adapter"), ConvSpec::same(cs, d, 1));
                if (has_full) full_adapter = Conv<T>(b.sub("full_adapter"), ConvSpec::same(full_channels, d, 1));
                out_rcu = Rcu<T>(b.sub("out_rcu"), d);
                break;
            case Fusion::concat:
                project = Conv<T>(b.sub("project"), ConvSpec::same(concat_channels(), d, 1));
                out_rcu = Rcu<T>(b.sub("out_rcu"), d);
                break;
            case Fusion::attention: {
                slice_adapter = Conv<T>(b.sub("slice_adapter"), ConvSpec::same(cs, d, 1));
                const std::size_t in = d + full_channels + (has_prev ? d : 0);
                attn_hidden = Conv<T>(b.sub("attn_hidden"), ConvSpec::same(in, d, 3));
                attn_out = Conv<T>(b.sub("attn_out"), ConvSpec::same(d, d, 3), /*gain=*/0.0);
                break;
            }
        }
    }

    std::size_t concat_channels() const { return slice_channels + full_channels + (has_prev ? out_channels : 0); }

    FusionOutput<T> operator()(const Var<T>& xs, const Var<T>* xf, const Var<T>* prev) const {
        if ((xf != nullptr) != has_full) throw ConfigError("fusion: full-image input presence does not match block");
        if ((prev != nullptr) != has_prev) throw ConfigError("fusion: previous-output presence does not match block");
        auto same_grid = [&](const Var<T>& v) {
            const Shape a = xs.shape(), s = v.shape();
            if (a.n != s.n || a.h != s.h || a.w != s.w)
                throw ConfigError("fusion: spatial mismatch " + a.str() + " vs " + s.str());
        };
        if (xf) same_grid(*xf);
        if (prev) {
            same_grid(*prev);
            if (prev->shape().c != out_channels) throw ConfigError("fusion: previous output has wrong channel count");
        }

        switch (kind) {
            case Fusion::add: {
                Var<T> sum = slice_adapter(xs);
                if (xf) sum = ops::add(sum, full_adapter(*xf));
                if (prev) sum = ops::add(sum, *prev);
                return {out_rcu(sum), {}};
            }
            case Fusion::concat: {
                std::vector<Var<T>> parts{xs};
                if (xf) parts.push_back(*xf);
                if (prev) parts.push_back(*prev);
                return {out_rcu(project(ops::concat_channels(parts))), {}};
            }
            case Fusion::attention: {
                Var<T> slice = slice_adapter(xs);
                std::vector<Var<T>> parts{slice};
                if (xf) parts.push_back(*xf);
                if (prev) parts.push_back(*prev);
                Var<T> weights = ops::sigmoid(attn_out(ops::relu(attn_hidden(ops::concat_channels(parts)))));
                Var<T> out = ops::mul(weights, slice);
                if (prev) out = ops::add(out, *prev);
                return {out, weights};
            }
        }
        throw ConfigError("fusion: unknown strategy");
    }
};

/// One decoder stage: two RCUs per input path, fusion, CRP, output RCU.
template <class T>
struct AttnRefineBlock {
    std::size_t slice_channels = 0, full_channels = 0, out_channels = 0;
    std::array<Rcu<T>, 2> slice_path, full_path;
    bool has_full = false;
    FusionBlock<T> fusion;
    Crp<T> crp;
    Rcu<T> out_rcu;

    AttnRefineBlock() = default;
    AttnRefineBlock(ParamBuilder<T> b, Fusion kind, std::size_t cs, std::optional<std::size_t> cf, std::size_t d, bool has_prev,
                    std::size_t crp_stages)
        : slice_channels(cs), full_channels(cf.value_or(0)), out_channels(d), has_full(cf.has_value()) {
        slice_path = {Rcu<T>(b.sub("slice_rcu1"), cs), Rcu<T>(b.sub("slice_rcu2"), cs)};
        if (has_full) full_path = {Rcu<T>(b.sub("full_rcu1"), *cf), Rcu<T>(b.sub("full_rcu2"), *cf)};
        fusion = FusionBlock<T>(b.sub("fusion"), kind, cs, cf, d, has_prev);
        crp = Crp<T>(b.sub("crp"), d, crp_stages);
        out_rcu = Rcu<T>(b.sub("out_rcu"), d);
    }

    struct Trace {
        Var<T> slice_features, full_features, prev_upsampled;
        FusionOutput<T> fused;
    };

    Var<T> operator()(const Var<T>& hs, const Var<T>* hf, const Var<T>* prev, Trace* trace = nullptr) const {
        Var<T> s = slice_path[1](slice_path[0](hs));
        Var<T> f;
        if (hf) {
            if (!has_full) throw ConfigError("refine block has no full-image path");
            f = full_path[1](full_path[0](*hf));
        }
        Var<T> up;
        if (prev) {
            const Shape ps = prev->shape(), ss = hs.shape();
            if (ps.h * 2 != ss.h || ps.w * 2 != ss.w)
                throw std::logic_error("refine block: upsampled previous output " + ps.str() + " does not match " + ss.str());
            up = ops::resize_bilinear(*prev, ss.h, ss.w);
        }
        FusionOutput<T> fused = fusion(s, hf ? &f : nullptr, prev ? &up : nullptr);
        Var<T> out = out_rcu(crp(fused.out));
        if (trace) *trace = {s, f, up, fused};
        return out;
    }
};

template <class T>
struct Encoder {
    EncoderSpec spec;
    Conv<T> stem1, stem2;
    std::array<Conv<T>, 4> down;  // down[0] unused
    std::array<std::vector<Rcu<T>>, 4> units;

    Encoder() = default;
    Encoder(ParamBuilder<T> b, const EncoderSpec& s) : spec(s) {
        s.validate();
        const auto& c = s.stage_channels;
        stem1 = Conv<T>(b.sub("stem1"), ConvSpec{3, c[0], 3, 2, 1, true});
        stem2 = Conv<T>(b.sub("stem2"), ConvSpec{c[0], c[0], 3, 2, 1, true});
        for (std::size_t k = 0; k < 4; ++k) {
            auto stage = b.sub("stage" + std::to_string(k + 1));
            if (k > 0) down[k] = Conv<T>(stage.sub("down"), ConvSpec{c[k - 1], c[k], 3, 2, 1, true});
            for (std::size_t u = 0; u < s.stage_depths[k]; ++u) units[k].emplace_back(stage.sub("unit" + std::to_string(u + 1)), c[k]);
        }
    }

    std::array<Var<T>, 4> operator()(const Var<T>& image) const {
        const Shape s = image.shape();
        if (s.c != 3) throw ConfigError("encoder expects 3-channel input, got " + std::to_string(s.c));
        if (s.h % 32 != 0 || s.w % 32 != 0)
            throw InputError("encoder input " + std::to_string(s.h) + "x" + std::to_string(s.w) + " is not divisible by 32");
        std::array<Var<T>, 4> h;
        Var<T> x = stem2(ops::relu(stem1(image)));
        for (std::size_t k = 0; k < 4; ++k) {
            if (k > 0) x = down[k](ops::relu(x));
            for (const auto& u : units[k]) x = u(x);
            h[k] = x;
        }
        return h;
    }
};

/// Dual-input refine network. Decoder block 0 consumes the stride-32 features,
/// block 3 the stride-4 features; logits are produced on block 3's output and
/// bilinearly upsampled x4 to input resolution.
template <class T>
class Model {
public:
    explicit Model(ModelSpec spec, std::uint64_t seed = 0) : spec_(std::move(spec)) {
        spec_.validate();
        std::mt19937_64 rng(seed);
        ParamBuilder<T> root(params_, rng);
        slice_encoder_ = Encoder<T>(root.sub("slice_encoder"), spec_.slice_encoder);
        if (spec_.full_encoder) full_encoder_ = Encoder<T>(root.sub("full_encoder"), *spec_.full_encoder);
        const std::size_t d = spec_.decoder_channels;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::size_t level = 3 - i;
            std::optional<std::size_t> cf;
            if (spec_.full_encoder) cf = spec_.full_encoder->stage_channels[level];
            blocks_[i] = AttnRefineBlock<T>(root.sub("decoder.block" + std::to_string(i + 1)), spec_.fusion,
                                            spec_.slice_encoder.stage_channels[level], cf, d, i > 0, spec_.crp_stages);
        }
        classifier_ = Conv<T>(root.sub("classifier"), ConvSpec::same(d, spec_.num_classes, 1));
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;

    const ModelSpec& spec() const { return spec_; }
    ParameterStore<T>& params() { return params_; }
    const ParameterStore<T>& params() const { return params_; }
    std::size_t param_count() const { return params_.scalar_count(); }

    const Encoder<T>& slice_encoder() const { return slice_encoder_; }
    const std::optional<Encoder<T>>& full_encoder() const { return full_encoder_; }
    const AttnRefineBlock<T>& block(std::size_t i) const { return blocks_.at(i); }
    const Conv<T>& classifier() const { return classifier_; }

    /// Decoder output o4 before the classifier.
    Var<T> decode(const Var<T>& slice, const Var<T>* full) const {
        check_inputs(slice, full);
        const auto hs = slice_encoder_(slice);
        std::array<Var<T>, 4> hf;
        if (full) hf = (*full_encoder_)(*full);
        Var<T> o;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::size_t level = 3 - i;
            o = blocks_[i](hs[level], full ? &hf[level] : nullptr, i > 0 ? &o : nullptr);
        }
        return o;
    }

    /// Per-pixel class logits at the slice's resolution.
    Var<T> forward(const Var<T>& slice, const Var<T>* full) const {
        Var<T> logits = classifier_(decode(slice, full));
        return ops::resize_bilinear(logits, slice.shape().h, slice.shape().w);
    }

private:
    void check_inputs(const Var<T>& slice, const Var<T>* full) const {
        if (spec_.mode == Mode::single_input && full) throw ConfigError("single_input model was given a full image");
        if (spec_.mode != Mode::single_input && !full) throw ConfigError(to_string(spec_.mode) + " model requires a full image");
        if (full) {
            const Shape a = slice.shape(), b = full->shape();
            if (a.n != b.n || a.h != b.h || a.w != b.w)
                throw ConfigError("slice and full images differ in shape " + a.str() + " vs " + b.str());
        }
    }

    ModelSpec spec_;
    ParameterStore<T> params_;
    Encoder<T> slice_encoder_;
    std::optional<Encoder<T>> full_encoder_;
    std::array<AttnRefineBlock<T>, 4> blocks_;
    Conv<T> classifier_;
};

/// Total learnable scalar count for a spec; independent of seed and data.
inline std::size_t param_count(const ModelSpec& spec) { return Model<float>(spec).param_count(); }

}  // namespace darefine

#endif
