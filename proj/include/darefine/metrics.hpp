#ifndef DAREFINE_METRICS_HPP
#define DAREFINE_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "image.hpp"

namespace darefine {

/// Rows are ground-truth classes, columns predicted classes.
struct ConfusionMatrix {
    std::size_t classes = 0;
    std::vector<std::uint64_t> counts;

    explicit ConfusionMatrix(std::size_t n = 4) : classes(n), counts(n * n, 0) {}

    std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts[gt * classes + pred]; }
    std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts[gt * classes + pred]; }

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        if (o.classes != classes) throw InputError("confusion matrices differ in class count");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
        return *this;
    }
};

struct UndefinedMetric : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline ConfusionMatrix confusion_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::size_t n_classes) {
    if (pred.size() != gt.size()) throw InputError("prediction and ground truth differ in size");
    ConfusionMatrix cm(n_classes);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] >= n_classes || gt[i] >= n_classes)
            throw InputError("class value outside [0," + std::to_string(n_classes) + ") at pixel " + std::to_string(i));
        ++cm.at(gt[i], pred[i]);
    }
    return cm;
}

inline ConfusionMatrix confusion_counts(const Mask& pred, const Mask& gt, std::size_t n_classes) {
    if (pred.height != gt.height || pred.width != gt.width) throw InputError("prediction and ground truth differ in shape");
    return confusion_counts(pred.labels, gt.labels, n_classes);
}

struct IouResult {
    std::vector<std::optional<double>> per_class;  // nullopt: class absent from both masks
    double miou = 0;
};

/// IoU_c = TP / (TP + FP + FN); classes with an empty union are skipped in the mean.
inline IouResult iou_miou(const ConfusionMatrix& cm) {
    IouResult r;
    double sum = 0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < cm.classes; ++c) {
        std::uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
        for (std::size_t k = 0; k < cm.classes; ++k) {
            if (k == c) continue;
            fp += cm.at(k, c);
            fn += cm.at(c, k);
        }
        const std::uint64_t uni = tp + fp + fn;
        if (uni == 0) {
            r.per_class.push_back(std::nullopt);
            continue;
        }
        const double iou = double(tp) / double(uni);
        r.per_class.push_back(iou);
        sum += iou;
        ++defined;
    }
    if (defined == 0) throw UndefinedMetric("IoU undefined: no class present");
    r.miou = sum / double(defined);
    return r;
}

inline double pixel_accuracy(const ConfusionMatrix& cm) {
    const auto total = cm.total();
    if (total == 0) throw InputError("accuracy of zero pixels");
    std::uint64_t trace = 0;
    for (std::size_t c = 0; c < cm.classes; ++c) trace += cm.at(c, c);
    return double(trace) / double(total);
}

struct ScoreTerms {
    double numerator = 0;  // sum |pred - gt|
    double normalizer = 0; // h
};

/// Accumulates the two sums of the challenge score over a pixel set.
inline ScoreTerms bach_score_terms(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
    if (pred.size() != gt.size()) throw InputError("prediction and ground truth differ in size");
    ScoreTerms t;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const int p = pred[i], g = gt[i];
        if (p > 3 || g > 3) throw InputError("score requires classes in {0,1,2,3}, got " + std::to_string(std::max(p, g)));
        const int pb = p != 0, gb = g != 0;
        t.normalizer += double(std::max(g, 3 - g) * (1 - (1 - pb) * (1 - gb)));
        t.numerator += double(std::abs(p - g));
    }
    return t;
}

/// score = 1 - sum|pred - gt| / h, with h = 0 (only true-negative pixels)
/// scored as 1. Values outside [0, 1] are clamped with a warning.
inline double score_from_terms(const ScoreTerms& t) {
    if (t.normalizer == 0) return 1.0;
    const double s = 1.0 - t.numerator / t.normalizer;
    if (s < 0.0 || s > 1.0) {
        std::clog << "warning: score " << s << " clamped to [0,1]\n";
        return std::clamp(s, 0.0, 1.0);
    }
    return s;
}

inline double bach_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
    return score_from_terms(bach_score_terms(pred, gt));
}

inline double bach_score(const Mask& pred, const Mask& gt) {
    if (pred.height != gt.height || pred.width != gt.width) throw InputError("prediction and ground truth differ in shape");
    return bach_score(pred.labels, gt.labels);
}

struct MetricsReport {
    std::vector<std::optional<double>> iou_per_class;
    double miou = 0;
    double accuracy = 0;
    double score = 0;

    static std::string csv_header(std::size_t classes = 4) {
        std::string h;
        for (std::size_t c = 0; c < classes; ++c) h += "iou_" + std::to_string(c) + ",";
        return h + "miou,accuracy,score";
    }

    /// Absent classes are written as empty fields.
    std::string csv_row() const {
        std::ostringstream os;
        os << std::setprecision(17);
        for (const auto& v : iou_per_class) {
            if (v) os << *v;
            os << ",";
        }
        os << miou << "," << accuracy << "," << score;
        return os.str();
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        for (std::size_t c = 0; c < iou_per_class.size(); ++c) {
            const std::string key = "iou_" + std::to_string(c);
            if (iou_per_class[c]) j[key] = *iou_per_class[c];
            else j[key] = nullptr;
        }
        j["miou"] = miou;
        j["accuracy"] = accuracy;
        j["score"] = score;
        return j;
    }

    static MetricsReport from_json(const nlohmann::json& j, std::size_t classes = 4) {
        MetricsReport r;
        for (std::size_t c = 0; c < classes; ++c) {
            const auto& v = j.at("iou_" + std::to_string(c));
            r.iou_per_class.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
        }
        r.miou = j.at("miou");
        r.accuracy = j.at("accuracy");
        r.score = j.at("score");
        return r;
    }
};

inline MetricsReport evaluate_masks(const Mask& pred, const Mask& gt, std::size_t n_classes = 4) {
    const auto cm = confusion_counts(pred, gt, n_classes);
    const auto iou = iou_miou(cm);
    return {iou.per_class, iou.miou, pixel_accuracy(cm), bach_score(pred, gt)};
}

/// Field-wise mean; a class IoU is averaged over the reports that define it.
inline MetricsReport average_reports(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw InputError("no reports to average");
    const std::size_t n = reports.front().iou_per_class.size();
    MetricsReport out;
    out.iou_per_class.assign(n, std::nullopt);
    std::vector<double> sums(n, 0);
    std::vector<std::size_t> counts(n, 0);
    for (const auto& r : reports) {
        for (std::size_t c = 0; c < n; ++c)
            if (r.iou_per_class[c]) {
                sums[c] += *r.iou_per_class[c];
                ++counts[c];
            }
        out.miou += r.miou;
        out.accuracy += r.accuracy;
        out.score += r.score;
    }
    for (std::size_t c = 0; c < n; ++c)
        if (counts[c]) out.iou_per_class[c] = sums[c] / double(counts[c]);
    const double k = double(reports.size());
    out.miou /= k;
    out.accuracy /= k;
    out.score /= k;
    return out;
}

}  // namespace darefine

#endif
