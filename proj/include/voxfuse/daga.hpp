#pragma once

#include <optional>

#include "tensor.hpp"
#include "voxel.hpp"

namespace voxfuse {

enum class IntensityOrder { norm_then_sigmoid, sigmoid_then_norm };

/// Depth-aware geometric alignment settings. `depth_slices` of nullopt means
/// "one slice per cell along the depth axis".
struct DagaConfig {
    double beta = 1.0;
    std::optional<std::size_t> depth_slice_count;  // D; defaults to the axis extent
    double lambda_sharp = 0.1;
    Axis3 depth_axis = Axis3::z;
    IntensityOrder intensity_order = IntensityOrder::norm_then_sigmoid;
    bool sharpness_on_raw = false;  // Eq. writes V; default compares intensities

    void validate() const {
        if (beta < 0.0) throw ValueError("DagaConfig: beta must be >= 0");
        if (lambda_sharp < 0.0) throw ValueError("DagaConfig: lambda must be >= 0");
        if (depth_slice_count && *depth_slice_count < 1)
            throw ValueError("DagaConfig: D must be >= 1");
    }

    std::size_t resolve_depth(const GridSpec& spec) const {
        std::size_t extent = depth_axis == Axis3::x ? spec.nx
                             : depth_axis == Axis3::y ? spec.ny
                                                      : spec.nz;
        return depth_slice_count.value_or(extent);
    }
};

/// Per-voxel scalar intensity of a feature volume: channel L2 magnitude and a
/// sigmoid, in either order. Output shape [nx x ny x nz].
inline Tensor intensity(const VoxelGrid& grid, IntensityOrder order) {
    if (order == IntensityOrder::norm_then_sigmoid)
        return sigmoid(channel_l2(grid.features));
    return channel_l2(sigmoid(grid.features));
}

/// Near-field depth discount W(d) = 1 / (1 + beta * d / D).
inline double depth_weight(std::size_t d, double beta, std::size_t depth_total) {
    if (depth_total == 0 || d >= depth_total)
        throw ValueError("depth_weight: depth index out of range");
    return 1.0 / (1.0 + beta * (static_cast<double>(d) / static_cast<double>(depth_total)));
}

inline double depth_weight(std::size_t d, const DagaConfig& cfg, const GridSpec& spec) {
    cfg.validate();
    return depth_weight(d, cfg.beta, cfg.resolve_depth(spec));
}

/// Mean L1 distance between the z-axis forward differences of two volumes.
/// Both inputs must share shape with z-extent >= 2 on the last axis.
inline Tensor sharpness_loss(const Tensor& i_cam, const Tensor& i_pts) {
    if (i_cam.shape() != i_pts.shape())
        throw ShapeError("sharpness_loss: shape mismatch");
    std::size_t last = i_cam.ndim() - 1;
    if (i_cam.dim(last) < 2) throw ShapeError("sharpness_loss: z extent must be >= 2");
    return l1(forward_diff(i_cam, last), forward_diff(i_pts, last));
}

/// Depth-aware alignment between the camera and LiDAR volumes: intensity
/// slices compared with MSE under the near-field discount, averaged over D,
/// plus the weighted vertical-sharpness penalty.
inline Tensor daga_loss(const VoxelGrid& v_cam, const VoxelGrid& v_pts, const DagaConfig& cfg) {
    cfg.validate();
    if (!(v_cam.spec == v_pts.spec))
        throw ShapeError("daga_loss: voxel grids must share a spec");
    Tensor i_cam = intensity(v_cam, cfg.intensity_order);
    Tensor i_pts = intensity(v_pts, cfg.intensity_order);

    std::size_t depth_total = cfg.resolve_depth(v_cam.spec);
    std::size_t axis = grid_tensor_axis(cfg.depth_axis) - 1;  // intensity has no channel axis
    auto cam_slices = slice_mean_groups(i_cam, axis, depth_total);
    auto pts_slices = slice_mean_groups(i_pts, axis, depth_total);

    Tensor acc = Tensor::scalar(0.0);
    for (std::size_t d = 0; d < depth_total; ++d) {
        double w = depth_weight(d, cfg.beta, depth_total);
        acc = add(acc, scale(mse(cam_slices[d], pts_slices[d]), w));
    }
    Tensor weighted = scale(acc, 1.0 / static_cast<double>(depth_total));

    Tensor sharp = cfg.sharpness_on_raw ? sharpness_loss(v_cam.features, v_pts.features)
                                        : sharpness_loss(i_cam, i_pts);
    return add(weighted, scale(sharp, cfg.lambda_sharp));
}

}  // namespace voxfuse
