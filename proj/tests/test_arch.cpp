#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <darefine/arch.hpp>

#include "grad_check.hpp"

using namespace darefine;
using darefine::testing::random_tensor;
using darefine::testing::randomize;

namespace {

void set_all(ParameterStore<double>& store, double v) {
    for (auto& [_, p] : store) p.mutable_value().fill(v);
}

void expect_tensor_near(const Tensor<double>& a, const Tensor<double>& b, double tol = 1e-12) {
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], tol) << "at " << i;
}

Tensor<double> scaled_sum(const Tensor<double>& a, double s, const Tensor<double>& b) {
    Tensor<double> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a[i] + b[i];
    return out;
}

struct ArchTest : ::testing::Test {
    std::mt19937_64 rng{7};
    ParameterStore<double> store;
    ParamBuilder<double> b{store, rng};
};

TEST_F(ArchTest, RcuWithZeroWeightsIsIdentity) {
    Rcu<double> rcu(b, 8);
    set_all(store, 0.0);
    const auto x = random_tensor({8, 1, 16, 16}, rng);
    EXPECT_EQ(rcu(Var<double>(x)).value(), x);
}

TEST_F(ArchTest, RcuPreservesShapeAndRejectsChannelMismatch) {
    Rcu<double> rcu(b, 8);
    EXPECT_EQ(rcu(Var<double>(random_tensor({8, 1, 16, 16}, rng))).shape(), (Shape{8, 1, 16, 16}));
    EXPECT_THROW(rcu(Var<double>(Tensor<double>({4, 1, 16, 16}))), ConfigError);
}

TEST_F(ArchTest, RcuHasNoNormalizationParameters) {
    Rcu<double> rcu(b, 4);
    EXPECT_EQ(store.size(), 4u);  // two kernels, two biases
    EXPECT_EQ(store.scalar_count(), 2 * (4 * 4 * 9 + 4));
}

TEST_F(ArchTest, CrpWithZeroWeightsIsRelu) {
    Crp<double> crp(b, 8, 2);
    set_all(store, 0.0);
    const auto x = random_tensor({8, 1, 8, 8}, rng);
    const auto y = crp(Var<double>(x)).value();
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], std::max(0.0, x[i]));
    EXPECT_EQ(y.shape(), x.shape());
}

TEST_F(ArchTest, CrpNonNegativeWeightsDominateRelu) {
    Crp<double> crp(b, 3, 2);
    for (auto& [_, p] : store)
        for (auto& v : p.mutable_value().values()) v = std::abs(v);
    const auto x = random_tensor({3, 1, 6, 6}, rng);
    const auto y = crp(Var<double>(x)).value();
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_GE(y[i], std::max(0.0, x[i]));
}

TEST_F(ArchTest, CrpSingleStageCentreTapEqualsReluPlusPooledRelu) {
    Crp<double> crp(b, 2, 1);
    Var<double> w = store.get("stage1.weight");
    w.mutable_value().fill(0.0);
    for (std::size_t c = 0; c < 2; ++c) w.mutable_value().at(c, c, 1, 1) = 1.0;
    const auto x = random_tensor({2, 1, 7, 7}, rng);
    const auto y = crp(Var<double>(x)).value();
    for (std::size_t c = 0; c < 2; ++c)
        for (long i = 0; i < 7; ++i)
            for (long j = 0; j < 7; ++j) {
                double m = 0.0;  // relu output is non-negative
                for (long di = -2; di <= 2; ++di)
                    for (long dj = -2; dj <= 2; ++dj)
                        if (i + di >= 0 && i + di < 7 && j + dj >= 0 && j + dj < 7)
                            m = std::max(m, std::max(0.0, x.at(c, 0, std::size_t(i + di), std::size_t(j + dj))));
                EXPECT_NEAR(y.at(c, 0, std::size_t(i), std::size_t(j)), std::max(0.0, x.at(c, 0, std::size_t(i), std::size_t(j))) + m, 1e-12);
            }
}

TEST_F(ArchTest, CrpRejectsZeroStages) { EXPECT_THROW(Crp<double>(b, 4, 0), ConfigError); }

TEST_F(ArchTest, AddFusionWithIdentityAdapterAndZeroRcuReturnsSlice) {
    FusionBlock<double> f(b, Fusion::add, 4, 4, 4, false);
    set_all(store, 0.0);
    Var<double> w = store.get("slice_adapter.weight");
    for (std::size_t c = 0; c < 4; ++c) w.mutable_value().at(c, c, 0, 0) = 1.0;
    const auto xs = random_tensor({4, 1, 5, 5}, rng);
    Var<double> xf(Tensor<double>({4, 1, 5, 5}));
    expect_tensor_near(f(Var<double>(xs), &xf, nullptr).out.value(), xs, 0.0);
}

TEST_F(ArchTest, ConcatFusionProjectsThreeInputs) {
    FusionBlock<double> f(b, Fusion::concat, 16, 16, 16, true);
    EXPECT_EQ(f.concat_channels(), 48u);
    EXPECT_EQ(store.get("project.weight").shape(), (Shape{16, 48, 1, 1}));
    Var<double> xs(random_tensor({16, 1, 4, 4}, rng)), xf(random_tensor({16, 1, 4, 4}, rng)), prev(random_tensor({16, 1, 4, 4}, rng));
    EXPECT_EQ(f(xs, &xf, &prev).out.shape(), (Shape{16, 1, 4, 4}));
}

TEST_F(ArchTest, AttentionFusionStartsAtHalfWeight) {
    FusionBlock<double> f(b, Fusion::attention, 6, 5, 4, true);
    Var<double> xs(random_tensor({6, 2, 4, 4}, rng)), xf(random_tensor({5, 2, 4, 4}, rng)), prev(random_tensor({4, 2, 4, 4}, rng));
    const auto out = f(xs, &xf, &prev);
    for (double v : out.attention.value().values()) EXPECT_EQ(v, 0.5);
    const auto slice = f.slice_adapter(xs).value();
    expect_tensor_near(out.out.value(), scaled_sum(slice, 0.5, prev.value()));
}

TEST_F(ArchTest, AttentionFusionFirstBlockIsGatedSliceOnly) {
    FusionBlock<double> f(b, Fusion::attention, 6, 5, 4, false);
    randomize(store, rng);
    Var<double> xs(random_tensor({6, 1, 4, 4}, rng)), xf(random_tensor({5, 1, 4, 4}, rng));
    const auto out = f(xs, &xf, nullptr);
    const auto slice = f.slice_adapter(xs).value();
    const auto& w = out.attention.value();
    ASSERT_EQ(w.shape(), slice.shape());
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(out.out.value()[i], w[i] * slice[i]);
}

TEST_F(ArchTest, AttentionWeightsStayInsideOpenUnitInterval) {
    FusionBlock<double> f(b, Fusion::attention, 3, 3, 4, true);
    for (int draw = 0; draw < 100; ++draw) {
        randomize(store, rng, 0.5);
        Var<double> xs(random_tensor({3, 1, 4, 4}, rng, 3.0)), xf(random_tensor({3, 1, 4, 4}, rng, 3.0)),
            prev(random_tensor({4, 1, 4, 4}, rng, 3.0));
        const auto fused = f(xs, &xf, &prev);
        for (double v : fused.attention.value().values()) {
            ASSERT_GT(v, 0.0);
            ASSERT_LT(v, 1.0);
        }
    }
}

TEST_F(ArchTest, FusionRejectsSpatialMismatchAndWrongPresence) {
    FusionBlock<double> f(b, Fusion::add, 4, 4, 4, true);
    Var<double> xs(Tensor<double>({4, 1, 4, 4})), xf(Tensor<double>({4, 1, 2, 2})), prev(Tensor<double>({4, 1, 4, 4}));
    EXPECT_THROW(f(xs, &xf, &prev), ConfigError);
    EXPECT_THROW(f(xs, nullptr, &prev), ConfigError);
    EXPECT_THROW(f(xs, &prev, nullptr), ConfigError);
    EXPECT_THROW(parse_fusion("multiply"), ConfigError);
}

TEST_F(ArchTest, RefineBlockShapes) {
    AttnRefineBlock<double> deepest(b.sub("b1"), Fusion::attention, 128, 128, 16, false, 2);
    Var<double> h4(random_tensor({128, 1, 2, 2}, rng));
    const auto o1 = deepest(h4, &h4, nullptr);
    EXPECT_EQ(o1.shape(), (Shape{16, 1, 2, 2}));

    AttnRefineBlock<double> next(b.sub("b2"), Fusion::attention, 64, 64, 16, true, 2);
    Var<double> h3(random_tensor({64, 1, 4, 4}, rng));
    AttnRefineBlock<double>::Trace trace;
    EXPECT_EQ(next(h3, &h3, &o1, &trace).shape(), (Shape{16, 1, 4, 4}));
    EXPECT_EQ(trace.prev_upsampled.shape(), (Shape{16, 1, 4, 4}));
}

TEST_F(ArchTest, RefineBlockRejectsUnmatchedPrevious) {
    AttnRefineBlock<double> block(b, Fusion::add, 4, std::nullopt, 4, true, 2);
    Var<double> hs(Tensor<double>({4, 1, 8, 8})), prev(Tensor<double>({4, 1, 2, 2}));
    EXPECT_THROW(block(hs, nullptr, &prev), std::logic_error);
}

TEST_F(ArchTest, RefineBlockAttentionMatchesHandComposition) {
    AttnRefineBlock<double> block(b, Fusion::attention, 3, 2, 4, true, 2);
    Var<double> hs(random_tensor({3, 1, 4, 4}, rng)), hf(random_tensor({2, 1, 4, 4}, rng)), prev(random_tensor({4, 1, 2, 2}, rng));
    AttnRefineBlock<double>::Trace trace;
    const auto out = block(hs, &hf, &prev, &trace).value();

    const auto s = block.slice_path[1](block.slice_path[0](hs));
    const auto up = ops::resize_bilinear(prev, 4, 4);
    const auto fused = scaled_sum(block.fusion.slice_adapter(s).value(), 0.5, up.value());
    expect_tensor_near(trace.fused.out.value(), fused);
    expect_tensor_near(out, block.out_rcu(block.crp(Var<double>(fused))).value());
}

TEST(Encoder, StageShapesAtStrides4To32) {
    std::mt19937_64 rng(1);
    ParameterStore<double> store;
    Encoder<double> enc(ParamBuilder<double>(store, rng), EncoderSpec::variant("tiny50", {8, 12, 16, 20}));
    const auto h = enc(Var<double>(random_tensor({3, 1, 64, 64}, rng)));
    EXPECT_EQ(h[0].shape(), (Shape{8, 1, 16, 16}));
    EXPECT_EQ(h[1].shape(), (Shape{12, 1, 8, 8}));
    EXPECT_EQ(h[2].shape(), (Shape{16, 1, 4, 4}));
    EXPECT_EQ(h[3].shape(), (Shape{20, 1, 2, 2}));
}

TEST(Encoder, RejectsSizesNotDivisibleBy32) {
    std::mt19937_64 rng(1);
    ParameterStore<double> store;
    Encoder<double> enc(ParamBuilder<double>(store, rng), EncoderSpec::variant("tiny50"));
    EXPECT_THROW(enc(Var<double>(Tensor<double>({3, 1, 48, 64}))), InputError);
    EXPECT_THROW(enc(Var<double>(Tensor<double>({1, 1, 64, 64}))), ConfigError);
}

// conv3x3 with bias: 9*in*out + out.
std::size_t conv3(std::size_t in, std::size_t out) { return 9 * in * out + out; }

std::size_t encoder_count_closed_form(const EncoderSpec& s) {
    const auto& c = s.stage_channels;
    std::size_t n = conv3(3, c[0]) + conv3(c[0], c[0]);
    for (std::size_t k = 0; k < 4; ++k) {
        if (k > 0) n += conv3(c[k - 1], c[k]);
        n += s.stage_depths[k] * 2 * conv3(c[k], c[k]);
    }
    return n;
}

std::size_t count_prefix(const ParameterStore<float>& store, const std::string& prefix) {
    std::size_t n = 0;
    for (const auto& [k, v] : store)
        if (k.rfind(prefix, 0) == 0) n += v.value().size();
    return n;
}

TEST(ParamCount, EncoderMatchesClosedForm) {
    for (const char* variant : {"tiny50", "tiny101", "tiny152"}) {
        const auto enc = EncoderSpec::variant(variant, {8, 16, 24, 32});
        Model<float> m(ModelSpec::make(Mode::single_input, Fusion::add, enc), 0);
        EXPECT_EQ(count_prefix(m.params(), "slice_encoder."), encoder_count_closed_form(enc)) << variant;
    }
}

TEST(ParamCount, DoublingStageChannelsAtLeastDoublesEncoderConvs) {
    const auto narrow = EncoderSpec::variant("tiny50", {16, 32, 64, 128});
    const auto wide = EncoderSpec::variant("tiny50", {32, 64, 128, 256});
    EXPECT_GE(encoder_count_closed_form(wide), 2 * encoder_count_closed_form(narrow));
    EXPECT_GE(param_count(ModelSpec::make(Mode::dual_input, Fusion::attention, wide)),
              2 * param_count(ModelSpec::make(Mode::dual_input, Fusion::attention, narrow)));
}

TEST(ParamCount, DualModesShareCountAndExceedSingle) {
    for (Fusion f : {Fusion::concat, Fusion::add, Fusion::attention}) {
        const auto single = param_count(ModelSpec::make(Mode::single_input, f));
        const auto multi = param_count(ModelSpec::make(Mode::multi_size_dual, f));
        const auto dual = param_count(ModelSpec::make(Mode::dual_input, f));
        EXPECT_LT(single, dual) << to_string(f);
        EXPECT_EQ(multi, dual) << to_string(f);
    }
}

TEST(ParamCount, FullEncoderMirrorsSliceEncoder) {
    Model<float> m(ModelSpec::make(Mode::dual_input, Fusion::add), 0);
    EXPECT_EQ(count_prefix(m.params(), "full_encoder."), count_prefix(m.params(), "slice_encoder."));
    EXPECT_EQ(param_count(m.spec()), m.param_count());
}

TEST(Model, ForwardShapeAndSoftmaxInAllModes) {
    for (Mode mode : {Mode::single_input, Mode::multi_size_dual, Mode::dual_input}) {
        Model<double> m(ModelSpec::make(mode, Fusion::attention), 3);
        std::mt19937_64 rng(5);
        for (std::size_t h : {32, 64, 96})
            for (std::size_t w : {32, 64, 96}) {
                Var<double> slice(random_tensor({3, 1, h, w}, rng));
                Var<double> full(random_tensor({3, 1, h, w}, rng));
                const auto logits = m.forward(slice, mode == Mode::single_input ? nullptr : &full).value();
                ASSERT_EQ(logits.shape(), (Shape{4, 1, h, w}));
                ASSERT_TRUE(logits.all_finite());
                const auto prob = ops::softmax_channels(logits);
                for (std::size_t p = 0; p < h * w; ++p) {
                    double sum = 0;
                    for (std::size_t c = 0; c < 4; ++c) sum += prob[c * h * w + p];
                    ASSERT_NEAR(sum, 1.0, 1e-6);
                }
            }
    }
}

TEST(Model, RejectsInputsInconsistentWithMode) {
    Model<float> single(ModelSpec::make(Mode::single_input, Fusion::add), 0);
    Model<float> dual(ModelSpec::make(Mode::dual_input, Fusion::add), 0);
    Var<float> x(Tensor<float>({3, 1, 32, 32})), y(Tensor<float>({3, 1, 64, 64}));
    EXPECT_THROW(single.forward(x, &x), ConfigError);
    EXPECT_THROW(dual.forward(x, nullptr), ConfigError);
    EXPECT_THROW(dual.forward(x, &y), ConfigError);
}

TEST(Model, SameSeedSameOutputsDifferentSeedDifferentParameters) {
    const auto spec = ModelSpec::make(Mode::dual_input, Fusion::attention);
    Model<float> a(spec, 11), b(spec, 11), c(spec, 12);
    EXPECT_EQ(a.params().content_hash(), b.params().content_hash());
    EXPECT_NE(a.params().content_hash(), c.params().content_hash());
    std::mt19937_64 rng(1);
    const auto x = random_tensor({3, 2, 32, 32}, rng).cast<float>();
    Var<float> xs(x);
    EXPECT_EQ(a.forward(xs, &xs).value(), b.forward(xs, &xs).value());
}

TEST(Model, MultiSizeDualAcceptsSliceAsFullImage) {
    Model<float> m(ModelSpec::make(Mode::multi_size_dual, Fusion::add), 0);
    Var<float> x(Tensor<float>({3, 1, 64, 64}, 0.25f));
    EXPECT_EQ(m.forward(x, &x).shape(), (Shape{4, 1, 64, 64}));
}

TEST(Model, SingleInputIgnoresFullEncoderWeights) {
    // A single-input model has no full-image parameters at all; its outputs
    // depend only on the slice.
    Model<float> m(ModelSpec::make(Mode::single_input, Fusion::attention), 4);
    for (const auto& [k, _] : m.params()) EXPECT_EQ(k.find("full"), std::string::npos) << k;
    EXPECT_FALSE(m.full_encoder().has_value());
}

TEST(Model, ModelSpecValidation) {
    ModelSpec s = ModelSpec::make(Mode::single_input, Fusion::add);
    s.full_encoder = s.slice_encoder;
    EXPECT_THROW(s.validate(), ConfigError);
    s = ModelSpec::make(Mode::dual_input, Fusion::add);
    s.num_classes = 1;
    EXPECT_THROW(s.validate(), ConfigError);
    EXPECT_THROW(EncoderSpec::variant("tiny18"), ConfigError);
    EXPECT_THROW(parse_mode("triple"), ConfigError);
}

TEST(Checkpoint, SaveLoadSaveKeepsManifestAndValues) {
    const auto dir = std::filesystem::temp_directory_path() / "darefine_ckpt_test";
    std::filesystem::create_directories(dir);
    Model<float> a(ModelSpec::make(Mode::dual_input, Fusion::attention), 21);
    Model<float> b(ModelSpec::make(Mode::dual_input, Fusion::attention), 22);
    checkpoint::save(a.params(), (dir / "a.ckpt").string(), {{"note", "x"}});
    const auto meta = checkpoint::load(b.params(), (dir / "a.ckpt").string());
    EXPECT_EQ(meta.at("note"), "x");
    EXPECT_EQ(a.params().content_hash(), b.params().content_hash());
    checkpoint::save(b.params(), (dir / "b.ckpt").string(), {{"note", "x"}});
    const auto ra = checkpoint::read((dir / "a.ckpt").string()), rb = checkpoint::read((dir / "b.ckpt").string());
    EXPECT_EQ(checkpoint::manifest_json(ra.entries), checkpoint::manifest_json(rb.entries));
    EXPECT_EQ(ra.arrays, rb.arrays);
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, LoadRejectsMismatchedModel) {
    const auto path = std::filesystem::temp_directory_path() / "darefine_ckpt_mismatch.ckpt";
    Model<float> single(ModelSpec::make(Mode::single_input, Fusion::add), 0);
    Model<float> dual(ModelSpec::make(Mode::dual_input, Fusion::add), 0);
    checkpoint::save(single.params(), path.string());
    EXPECT_THROW(checkpoint::load(dual.params(), path.string()), ConfigError);
    std::filesystem::remove(path);
}

}  // namespace
