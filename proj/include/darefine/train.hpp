#ifndef DAREFINE_TRAIN_HPP
#define DAREFINE_TRAIN_HPP

#include <chrono>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "arch.hpp"
#include "data.hpp"
#include "metrics.hpp"

namespace darefine {

struct TrainConfig {
    double lr = 0.01;
    double momentum = 0.9;
    std::size_t batch_size = 12;
    std::size_t epochs = 30;
    double grad_clip_norm = 5.0;  // global L2 norm bound; 0 disables clipping
    std::uint64_t seed = 0;
    bool augment = true;
    AugmentConfig augment_config;

    void validate() const {
        if (!(std::isfinite(lr) && lr > 0)) throw ConfigError("train.lr must be finite and positive");
        if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train.momentum must lie in [0,1)");
        if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
        if (epochs == 0) throw ConfigError("train.epochs must be positive");
        if (!(std::isfinite(grad_clip_norm) && grad_clip_norm >= 0))
            throw ConfigError("train.grad_clip_norm must be finite and non-negative");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0;
    std::optional<MetricsReport> val;
    double wall_seconds = 0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double best_miou = -1;
};

/// Mean per-pixel cross-entropy of softmax(logits) against `target`.
template <class T>
Var<T> nll_loss(const Var<T>& logits, std::span<const std::uint8_t> target) {
    return ops::softmax_nll(logits, target);
}

template <class T>
T nll_loss(const Tensor<T>& logits, const Mask& target) {
    if (logits.batch() != 1 || logits.height() != target.height || logits.width() != target.width)
        throw ConfigError("nll_loss: logits " + logits.shape().str() + " do not match target");
    NoGradGuard guard;
    return ops::softmax_nll(Var<T>(logits), std::span<const std::uint8_t>(target.labels)).value()[0];
}

/// Momentum SGD on one array: v <- momentum * v + g; p <- p - lr * v.
template <class T>
void sgd_step(std::span<T> params, std::span<const T> grads, T lr, T momentum, std::span<T> velocity) {
    if (params.size() != grads.size() || params.size() != velocity.size())
        throw ConfigError("sgd_step: params, grads and state differ in size");
    for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
}

template <class T>
struct SgdState {
    std::map<std::string, Tensor<T>> velocity;
};

/// Applies sgd_step to every parameter that holds a gradient.
template <class T>
void sgd_step(ParameterStore<T>& store, T lr, T momentum, SgdState<T>& state) {
    for (auto& [name, var] : store) {
        if (var.grad().empty()) continue;
        auto& v = state.velocity.try_emplace(name, Tensor<T>(var.value().shape())).first->second;
        sgd_step<T>(var.mutable_value().values(), var.grad().values(), lr, momentum, v.values());
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before rescaling.
template <class T>
double clip_grad_norm(ParameterStore<T>& store, double max_norm) {
    double sq = 0;
    for (const auto& [_, var] : store)
        for (T g : var.grad().values()) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const T scale = T(max_norm / norm);
        for (auto& [_, var] : store)
            if (!var.grad().empty())
                for (T& g : var.grad_buffer().values()) g *= scale;
    }
    return norm;
}

template <class T>
struct Batch {
    Tensor<T> slice;
    std::optional<Tensor<T>> full;
    std::vector<std::uint8_t> targets;  // (n, y, x)
};

/// Network inputs for a mode: dual_input pairs each slice with its context
/// image, multi_size_dual with the slice resized to itself, single_input
/// uses the slice alone.
template <class T>
Batch<T> make_batch(const std::vector<const PairSample*>& samples, Mode mode) {
    std::vector<Tensor<T>> slices, fulls;
    Batch<T> b;
    for (const auto* s : samples) {
        slices.push_back(to_tensor<T>(s->slice_img));
        if (mode == Mode::dual_input) fulls.push_back(to_tensor<T>(s->context()));
        else if (mode == Mode::multi_size_dual)
            fulls.push_back(to_tensor<T>(resize_bilinear(s->slice_img, s->slice_img.height, s->slice_img.width)));
        b.targets.insert(b.targets.end(), s->slice_mask.labels.begin(), s->slice_mask.labels.end());
    }
    b.slice = stack_batch<T>(slices);
    if (!fulls.empty()) b.full = stack_batch<T>(fulls);
    return b;
}

template <class T>
Var<T> forward_batch(const Model<T>& model, const Batch<T>& b) {
    Var<T> slice(b.slice);
    if (b.full) {
        Var<T> full(*b.full);
        return model.forward(slice, &full);
    }
    return model.forward(slice, nullptr);
}

/// Per-pixel argmax (lowest class on ties) for each sample in a logits batch.
template <class T>
std::vector<Mask> argmax_masks(const Tensor<T>& logits) {
    const Shape s = logits.shape();
    std::vector<Mask> out;
    for (std::size_t n = 0; n < s.n; ++n) {
        Mask m(s.h, s.w);
        for (std::size_t y = 0; y < s.h; ++y)
            for (std::size_t x = 0; x < s.w; ++x) {
                std::size_t best = 0;
                for (std::size_t c = 1; c < s.c; ++c)
                    if (logits.at(c, n, y, x) > logits.at(best, n, y, x)) best = c;
                m.at(y, x) = std::uint8_t(best);
            }
        out.push_back(std::move(m));
    }
    return out;
}

/// Maps a batch of samples to predicted slice masks.
using Predictor = std::function<std::vector<Mask>(const std::vector<const PairSample*>&)>;

template <class T>
Predictor model_predictor(const Model<T>& model) {
    return [&model](const std::vector<const PairSample*>& batch) {
        NoGradGuard guard;
        return argmax_masks(forward_batch(model, make_batch<T>(batch, model.spec().mode)).value());
    };
}

struct SlideResult {
    std::string slide;
    Mask prediction, ground_truth;
    MetricsReport report;
};

struct EvalResult {
    MetricsReport report;  // mean over slides
    std::vector<SlideResult> slides;
};

/// Predicts every sample of a split, stitches predictions and labels per
/// source slide (majority vote), scores each slide on covered pixels, and
/// averages the slide reports.
inline EvalResult evaluate(const Predictor& predict, const Dataset& ds, Split split, std::size_t batch_size = 32) {
    const auto idx = ds.indices(split);
    if (idx.empty()) throw InputError("evaluate: split '" + to_string(split) + "' is empty");

    std::map<std::string, std::vector<MaskTile>> preds, gts;
    std::map<std::string, std::pair<std::size_t, std::size_t>> dims;
    for (std::size_t i = 0; i < idx.size(); i += batch_size) {
        std::vector<const PairSample*> batch;
        for (std::size_t k = i; k < std::min(idx.size(), i + batch_size); ++k) batch.push_back(&ds.samples[idx[k]]);
        auto masks = predict(batch);
        for (std::size_t k = 0; k < batch.size(); ++k) {
            const auto& p = batch[k]->provenance;
            preds[p.slide].push_back({std::move(masks[k]), p.patch_y + p.slice_y, p.patch_x + p.slice_x});
            gts[p.slide].push_back({batch[k]->slice_mask, p.patch_y + p.slice_y, p.patch_x + p.slice_x});
            dims[p.slide] = {p.slide_height, p.slide_width};
        }
    }

    EvalResult out;
    std::vector<MetricsReport> reports;
    for (auto& [slide, tiles] : preds) {
        const auto [h, w] = dims[slide];
        Mask pred = stitch_predictions(tiles, h, w, OverlapPolicy::vote);
        Mask gt = stitch_predictions(gts[slide], h, w, OverlapPolicy::vote);
        std::vector<std::uint8_t> p, g;
        for (std::size_t i = 0; i < gt.labels.size(); ++i)
            if (gt.labels[i] != Mask::kUnlabeled) {
                p.push_back(pred.labels[i]);
                g.push_back(gt.labels[i]);
            }
        const auto cm = confusion_counts(p, g, ds.num_classes);
        const auto iou = iou_miou(cm);
        MetricsReport r{iou.per_class, iou.miou, pixel_accuracy(cm), bach_score(p, g)};
        reports.push_back(r);
        out.slides.push_back({slide, std::move(pred), std::move(gt), r});
    }
    out.report = average_reports(reports);
    return out;
}

template <class T>
EvalResult evaluate(const Model<T>& model, const Dataset& ds, Split split, std::size_t batch_size = 32) {
    return evaluate(model_predictor(model), ds, split, batch_size);
}

struct TrainResult {
    TrainHistory history;
    std::map<std::string, Tensor<double>> best_parameters;
};

namespace detail {
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E5ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}
}  // namespace detail

/// Mini-batch SGD on the train split with per-epoch validation. The model
/// ends holding the parameters of the best validation MIoU epoch (the last
/// epoch when there is no validation split).
template <class T>
TrainResult train(Model<T>& model, const Dataset& ds, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    cfg.validate();
    const auto train_idx = ds.indices(Split::train);
    if (train_idx.empty()) throw InputError("train: the train split is empty");
    const bool has_val = !ds.indices(Split::val).empty();

    TrainResult result;
    SgdState<T> state;
    auto best = model.params().snapshot();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double loss_sum = 0;
        std::size_t steps = 0;
        for (const auto& batch_idx : make_batches(train_idx, cfg.batch_size, detail::mix_seed(cfg.seed, epoch))) {
            std::vector<PairSample> owned;
            std::vector<const PairSample*> batch;
            owned.reserve(batch_idx.size());
            for (auto i : batch_idx) {
                if (cfg.augment) {
                    owned.push_back(augment(ds.samples[i], detail::mix_seed(detail::mix_seed(cfg.seed, epoch), i), cfg.augment_config));
                    batch.push_back(&owned.back());
                } else {
                    batch.push_back(&ds.samples[i]);
                }
            }
            const Batch<T> b = make_batch<T>(batch, model.spec().mode);
            model.params().zero_grad();
            Var<T> loss = nll_loss(forward_batch(model, b), std::span<const std::uint8_t>(b.targets));
            if (!std::isfinite(loss.value()[0])) throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
            backward(loss);
            clip_grad_norm(model.params(), cfg.grad_clip_norm);
            sgd_step(model.params(), T(cfg.lr), T(cfg.momentum), state);
            loss_sum += double(loss.value()[0]);
            ++steps;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / double(steps);
        if (has_val) {
            rec.val = evaluate(model, ds, Split::val).report;
            if (rec.val->miou > result.history.best_miou) {
                result.history.best_miou = rec.val->miou;
                result.history.best_epoch = epoch;
                best = model.params().snapshot();
            }
        } else {
            result.history.best_epoch = epoch;
            best = model.params().snapshot();
        }
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    model.params().restore(best);
    for (const auto& [k, v] : best) result.best_parameters.emplace(k, v.template cast<double>());
    return result;
}

/// Sliding-window prediction over a whole image: patches and slices follow
/// `layout`, overlapping slice predictions are merged by majority vote.
template <class T>
Mask predict_image(const Model<T>& model, const Image& img, const TilingLayout& layout, std::size_t batch_size = 32) {
    LabeledImage li{img, Mask(img.height, img.width, 0)};
    Dataset ds;
    ds.layout = layout;
    std::size_t pi = 0;
    for (auto& tile : tile_image(li, layout.patch_size, layout.patch_stride)) {
        Provenance base{"image", img.height, img.width, pi++, 0, tile.y, tile.x};
        for (auto& s : slice_patch(tile.image, layout, base)) ds.add(std::move(s), Split::test);
    }
    const auto predict = model_predictor(model);
    std::vector<MaskTile> tiles;
    const auto idx = ds.indices(Split::test);
    for (std::size_t i = 0; i < idx.size(); i += batch_size) {
        std::vector<const PairSample*> batch;
        for (std::size_t k = i; k < std::min(idx.size(), i + batch_size); ++k) batch.push_back(&ds.samples[idx[k]]);
        auto masks = predict(batch);
        for (std::size_t k = 0; k < batch.size(); ++k) {
            const auto& p = batch[k]->provenance;
            tiles.push_back({std::move(masks[k]), p.patch_y + p.slice_y, p.patch_x + p.slice_x});
        }
    }
    return stitch_predictions(tiles, img.height, img.width, OverlapPolicy::vote);
}

}  // namespace darefine

#endif
