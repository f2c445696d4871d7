#ifndef DAREFINE_TESTS_METRIC_ORACLE_HPP
#define DAREFINE_TESTS_METRIC_ORACLE_HPP

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <random>
#include <vector>

namespace darefine::testing {

struct Oracle {
    std::vector<std::optional<double>> iou;
    double miou = 0, accuracy = 0, score = 0;
};

/// Pixel-loop reference for IoU, MIoU, accuracy and the challenge score on
/// four classes.
inline Oracle brute_force(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
    Oracle o;
    double sum = 0;
    int defined = 0;
    for (int c = 0; c < 4; ++c) {
        int inter = 0, uni = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool in_p = pred[i] == c, in_g = gt[i] == c;
            inter += in_p && in_g;
            uni += in_p || in_g;
        }
        if (uni == 0) {
            o.iou.push_back(std::nullopt);
            continue;
        }
        o.iou.push_back(double(inter) / uni);
        sum += double(inter) / uni;
        ++defined;
    }
    o.miou = sum / defined;
    int correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == gt[i];
    o.accuracy = double(correct) / double(pred.size());
    double h = 0, diff = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] == 0 && gt[i] == 0) continue;
        h += std::max<int>(gt[i], 3 - gt[i]);
        diff += std::abs(int(pred[i]) - int(gt[i]));
    }
    o.score = h == 0 ? 1.0 : std::clamp(1.0 - diff / h, 0.0, 1.0);
    return o;
}

/// Random 8x8 pair. Label sparsity and class count vary so that absent
/// classes and all-normal pairs both occur.
inline void random_mask_pair(std::mt19937_64& rng, std::vector<std::uint8_t>& pred, std::vector<std::uint8_t>& gt) {
    const unsigned classes = 1 + unsigned(rng() % 4);
    const double zero_bias = double(rng() % 100) / 100.0;
    pred.assign(64, 0);
    gt.assign(64, 0);
    for (auto* m : {&pred, &gt})
        for (auto& v : *m) v = (double(rng() % 1000) / 1000.0 < zero_bias) ? 0 : std::uint8_t(rng() % classes);
}

}  // namespace darefine::testing

#endif
