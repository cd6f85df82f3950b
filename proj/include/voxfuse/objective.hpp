#pragma once

#include <vector>

#include "daga.hpp"
#include "metrics.hpp"
#include "tensor.hpp"
#include "voxel.hpp"

namespace voxfuse {

struct ObjectiveConfig {
    double lambda_daga = 0.2;
    DagaConfig daga;
    int ignore_index = kIgnoreLabel;
};

/// The joint objective and its per-term breakdown; `total` carries the tape.
struct LossBreakdown {
    Tensor total;
    Tensor ce;
    Tensor lovasz;
    Tensor daga;  // unweighted term; total applies lambda_daga
    double lambda_daga = 0.0;
};

/// Flatten class-first logits [Cls x nx x ny x nz] into [N x Cls] rows.
inline Tensor logits_to_rows(const Tensor& logits) {
    if (logits.ndim() != 4) throw ShapeError("logits must be [Cls x nx x ny x nz]");
    std::size_t cls = logits.dim(0);
    std::size_t vox = logits.size() / cls;
    return transpose(reshape(logits, {cls, vox}));
}

/// Hard per-voxel predictions (argmax over the class axis).
inline std::vector<int> argmax_labels(const Tensor& logits) {
    if (logits.ndim() != 4) throw ShapeError("logits must be [Cls x nx x ny x nz]");
    std::size_t cls = logits.dim(0);
    std::size_t vox = logits.size() / cls;
    std::vector<int> out(vox, 0);
    for (std::size_t v = 0; v < vox; ++v) {
        double best = logits.data()[v];
        int arg = 0;
        for (std::size_t c = 1; c < cls; ++c) {
            double val = logits.data()[c * vox + v];
            if (val > best) {
                best = val;
                arg = static_cast<int>(c);
            }
        }
        out[v] = arg;
    }
    return out;
}

/// L_total = L_ce + L_lov + lambda_daga * L_DAGA, with the Lovasz term taken
/// on softmaxed logits over the non-ignored voxels. A zero lambda skips the
/// alignment term entirely so the sum stays exact.
inline LossBreakdown total_loss(const Tensor& logits, const OccupancyLabels& gt,
                                const VoxelGrid& v_cam, const VoxelGrid& v_pts,
                                const ObjectiveConfig& cfg) {
    Tensor rows = logits_to_rows(logits);
    if (rows.dim(0) != gt.size())
        throw ShapeError("total_loss: logit voxel count does not match labels");

    Tensor ce = cross_entropy(rows, gt.labels, cfg.ignore_index);

    std::vector<std::size_t> kept;
    std::vector<int> kept_labels;
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
        if (gt.labels[i] == cfg.ignore_index) continue;
        kept.push_back(i);
        kept_labels.push_back(gt.labels[i]);
    }
    Tensor probs = softmax(kept.size() == gt.labels.size() ? rows : take_rows(rows, kept), 1);
    Tensor lov = lovasz_softmax(probs, kept_labels);

    LossBreakdown out;
    out.lambda_daga = cfg.lambda_daga;
    out.ce = ce;
    out.lovasz = lov;
    if (cfg.lambda_daga != 0.0) {
        out.daga = daga_loss(v_cam, v_pts, cfg.daga);
        out.total = add(add(ce, lov), scale(out.daga, cfg.lambda_daga));
    } else {
        out.daga = Tensor::scalar(0.0);
        out.total = add(ce, lov);
    }
    return out;
}

}  // namespace voxfuse
