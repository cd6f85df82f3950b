#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "error.hpp"
#include "voxel.hpp"

namespace voxfuse {

/// Label conventions: class 0 is free space (predictable, but excluded from
/// mIoU); kIgnoreLabel marks voxels skipped by losses and metrics.
inline constexpr int kIgnoreLabel = -1;
inline constexpr int kEmptyClass = 0;

/// Dense per-voxel ground-truth labels over a grid.
struct OccupancyLabels {
    std::array<std::size_t, 3> dims{0, 0, 0};  // nx, ny, nz
    std::vector<int> labels;                   // values in [0, Cls) or kIgnoreLabel

    std::size_t size() const { return labels.size(); }

    void validate(std::size_t num_classes) const {
        if (labels.size() != dims[0] * dims[1] * dims[2])
            throw ShapeError("OccupancyLabels: label count does not match dims");
        for (int v : labels)
            if (v != kIgnoreLabel && (v < 0 || static_cast<std::size_t>(v) >= num_classes))
                throw ValueError("OccupancyLabels: label out of range");
    }

    int at(std::size_t ix, std::size_t iy, std::size_t iz) const {
        return labels[(ix * dims[1] + iy) * dims[2] + iz];
    }
};

/// Per-class TP/FP/FN tallies plus binary occupied/free counters. Instances
/// accumulated independently merge associatively.
struct ConfusionMatrix {
    std::size_t num_classes = 0;
    std::vector<std::int64_t> tp, fp, fn;
    std::int64_t occ_tp = 0, occ_fp = 0, occ_fn = 0;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::size_t classes)
        : num_classes(classes), tp(classes, 0), fp(classes, 0), fn(classes, 0) {}

    void merge(const ConfusionMatrix& other) {
        if (other.num_classes != num_classes)
            throw ShapeError("ConfusionMatrix::merge: class counts differ");
        for (std::size_t c = 0; c < num_classes; ++c) {
            tp[c] += other.tp[c];
            fp[c] += other.fp[c];
            fn[c] += other.fn[c];
        }
        occ_tp += other.occ_tp;
        occ_fp += other.occ_fp;
        occ_fn += other.occ_fn;
    }

    bool operator==(const ConfusionMatrix& o) const {
        return num_classes == o.num_classes && tp == o.tp && fp == o.fp && fn == o.fn &&
               occ_tp == o.occ_tp && occ_fp == o.occ_fp && occ_fn == o.occ_fn;
    }
};

/// Tally predictions against ground truth. Ignored voxels contribute nothing;
/// the binary occupancy counters treat any non-empty label as occupied.
inline void update_confusion(ConfusionMatrix& cm, const std::vector<int>& pred,
                             const std::vector<int>& gt) {
    if (pred.size() != gt.size())
        throw ShapeError("update_confusion: prediction/label counts differ");
    for (std::size_t i = 0; i < pred.size(); ++i) {
        int g = gt[i];
        if (g == kIgnoreLabel) continue;
        int p = pred[i];
        if (g < 0 || static_cast<std::size_t>(g) >= cm.num_classes || p < 0 ||
            static_cast<std::size_t>(p) >= cm.num_classes)
            throw ValueError("update_confusion: label out of range");
        if (p == g) {
            ++cm.tp[static_cast<std::size_t>(p)];
        } else {
            ++cm.fp[static_cast<std::size_t>(p)];
            ++cm.fn[static_cast<std::size_t>(g)];
        }
        bool p_occ = p != kEmptyClass, g_occ = g != kEmptyClass;
        if (p_occ && g_occ)
            ++cm.occ_tp;
        else if (p_occ && !g_occ)
            ++cm.occ_fp;
        else if (!p_occ && g_occ)
            ++cm.occ_fn;
    }
}

inline void update_confusion(ConfusionMatrix& cm, const std::vector<int>& pred,
                             const OccupancyLabels& gt) {
    update_confusion(cm, pred, gt.labels);
}

/// IoU = TP / (TP + FP + FN); nullopt when the denominator is zero.
inline std::optional<double> iou(const ConfusionMatrix& cm, std::size_t cls) {
    if (cls >= cm.num_classes) throw ShapeError("iou: class index out of range");
    std::int64_t denom = cm.tp[cls] + cm.fp[cls] + cm.fn[cls];
    if (denom == 0) return std::nullopt;
    return static_cast<double>(cm.tp[cls]) / static_cast<double>(denom);
}

/// Binary occupied-vs-free IoU.
inline std::optional<double> geometric_iou(const ConfusionMatrix& cm) {
    std::int64_t denom = cm.occ_tp + cm.occ_fp + cm.occ_fn;
    if (denom == 0) return std::nullopt;
    return static_cast<double>(cm.occ_tp) / static_cast<double>(denom);
}

/// Mean IoU over semantic classes (free space excluded); classes whose IoU is
/// undefined are left out of the mean.
inline double miou(const ConfusionMatrix& cm) {
    double acc = 0.0;
    std::size_t defined = 0;
    for (std::size_t c = kEmptyClass + 1; c < cm.num_classes; ++c) {
        auto v = iou(cm, c);
        if (!v) continue;
        acc += *v;
        ++defined;
    }
    if (defined == 0) throw ValueError("miou: no class has a defined IoU");
    return acc / static_cast<double>(defined);
}

}  // namespace voxfuse
