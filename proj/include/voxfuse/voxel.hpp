#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "tensor.hpp"

namespace voxfuse {

/// Metric voxel grid geometry: ranges in meters, counts per axis, feature dim.
struct GridSpec {
    double x_min = -50.0, x_max = 50.0;
    double y_min = -50.0, y_max = 50.0;
    double z_min = -5.0, z_max = 3.0;
    std::size_t nx = 200, ny = 200, nz = 16;
    std::size_t channels = 1;

    void validate() const {
        if (!(x_max > x_min) || !(y_max > y_min) || !(z_max > z_min))
            throw ValueError("GridSpec: degenerate metric range");
        if (nx == 0 || ny == 0 || nz == 0 || channels == 0)
            throw ValueError("GridSpec: zero extent");
    }

    double voxel_size_x() const { return (x_max - x_min) / static_cast<double>(nx); }
    double voxel_size_y() const { return (y_max - y_min) / static_cast<double>(ny); }
    double voxel_size_z() const { return (z_max - z_min) / static_cast<double>(nz); }
    std::size_t num_voxels() const { return nx * ny * nz; }

    std::array<double, 3> voxel_center(std::size_t ix, std::size_t iy, std::size_t iz) const {
        return {x_min + (static_cast<double>(ix) + 0.5) * voxel_size_x(),
                y_min + (static_cast<double>(iy) + 0.5) * voxel_size_y(),
                z_min + (static_cast<double>(iz) + 0.5) * voxel_size_z()};
    }

    bool operator==(const GridSpec& o) const {
        return x_min == o.x_min && x_max == o.x_max && y_min == o.y_min && y_max == o.y_max &&
               z_min == o.z_min && z_max == o.z_max && nx == o.nx && ny == o.ny && nz == o.nz &&
               channels == o.channels;
    }
    bool same_extents(const GridSpec& o) const {
        return x_min == o.x_min && x_max == o.x_max && y_min == o.y_min && y_max == o.y_max &&
               z_min == o.z_min && z_max == o.z_max && nx == o.nx && ny == o.ny && nz == o.nz;
    }
};

/// Dense feature volume over a GridSpec; features laid out [C x nx x ny x nz].
struct VoxelGrid {
    GridSpec spec;
    Tensor features;

    VoxelGrid() = default;

    VoxelGrid(GridSpec s, Tensor f) : spec(s), features(std::move(f)) {
        spec.validate();
        Shape expect{spec.channels, spec.nx, spec.ny, spec.nz};
        if (features.shape() != expect)
            throw ShapeError("VoxelGrid features " + shape_str(features.shape()) +
                             " do not match spec " + shape_str(expect));
    }

    static VoxelGrid zeros(GridSpec s) {
        return VoxelGrid(s, Tensor::zeros({s.channels, s.nx, s.ny, s.nz}));
    }
};

/// LiDAR returns: positions plus a uniform-width feature vector per point,
/// with an optional semantic label carried for bookkeeping.
struct PointCloud {
    std::size_t feature_dim = 0;
    std::vector<double> xyz;       // 3 per point
    std::vector<double> features;  // feature_dim per point
    std::vector<int> labels;       // -1 when unknown

    std::size_t size() const { return labels.size(); }

    void push_point(double x, double y, double z, const std::vector<double>& f, int label = -1) {
        if (f.size() != feature_dim)
            throw ShapeError("PointCloud: feature width " + std::to_string(f.size()) +
                             " != " + std::to_string(feature_dim));
        if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z))
            throw ValueError("PointCloud: non-finite coordinate");
        xyz.insert(xyz.end(), {x, y, z});
        features.insert(features.end(), f.begin(), f.end());
        labels.push_back(label);
    }
};

/// Pinhole camera with a rigid world-to-camera transform and the discrete
/// metric depth bins its lifted frustum samples.
struct CameraModel {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
    std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major, x_cam = R x_w + t
    std::array<double, 3> translation{0, 0, 0};
    std::size_t width = 1, height = 1;
    std::vector<double> depth_bins;

    void validate() const {
        if (fx <= 0.0 || fy <= 0.0) throw ValueError("CameraModel: focal lengths must be positive");
        // R^T R == I within 1e-9
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double acc = 0.0;
                for (int k = 0; k < 3; ++k) acc += rotation[k * 3 + i] * rotation[k * 3 + j];
                if (std::abs(acc - (i == j ? 1.0 : 0.0)) > 1e-9)
                    throw ValueError("CameraModel: rotation not orthonormal");
            }
        if (depth_bins.empty()) throw ValueError("CameraModel: no depth bins");
        double prev = 0.0;
        for (double d : depth_bins) {
            if (d <= prev) throw ValueError("CameraModel: depth bins must be increasing and positive");
            prev = d;
        }
    }

    /// Pixel (u,v) at optical depth d, using pixel-center ray convention.
    std::array<double, 3> unproject(std::size_t u, std::size_t v, double depth) const {
        double xc = (static_cast<double>(u) + 0.5 - cx) / fx * depth;
        double yc = (static_cast<double>(v) + 0.5 - cy) / fy * depth;
        double zc = depth;
        // world = R^T (cam - t)
        double dx = xc - translation[0], dy = yc - translation[1], dz = zc - translation[2];
        return {rotation[0] * dx + rotation[3] * dy + rotation[6] * dz,
                rotation[1] * dx + rotation[4] * dy + rotation[7] * dz,
                rotation[2] * dx + rotation[5] * dy + rotation[8] * dz};
    }

    std::array<double, 3> center() const {
        double dx = -translation[0], dy = -translation[1], dz = -translation[2];
        return {rotation[0] * dx + rotation[3] * dy + rotation[6] * dz,
                rotation[1] * dx + rotation[4] * dy + rotation[7] * dz,
                rotation[2] * dx + rotation[5] * dy + rotation[8] * dz};
    }

    std::array<double, 3> world_to_cam(const std::array<double, 3>& p) const {
        return {rotation[0] * p[0] + rotation[1] * p[1] + rotation[2] * p[2] + translation[0],
                rotation[3] * p[0] + rotation[4] * p[1] + rotation[5] * p[2] + translation[1],
                rotation[6] * p[0] + rotation[7] * p[1] + rotation[8] * p[2] + translation[2]};
    }
};

/// Index of the voxel containing p, or nullopt outside the grid.
/// Min boundaries are inclusive, max boundaries exclusive.
inline std::optional<std::array<std::size_t, 3>> voxel_index(const GridSpec& spec, double x,
                                                             double y, double z) {
    if (x < spec.x_min || x >= spec.x_max || y < spec.y_min || y >= spec.y_max ||
        z < spec.z_min || z >= spec.z_max)
        return std::nullopt;
    auto clamp_idx = [](double v, std::size_t n) {
        auto i = static_cast<std::size_t>(std::floor(v));
        return i >= n ? n - 1 : i;
    };
    return std::array<std::size_t, 3>{
        clamp_idx((x - spec.x_min) / spec.voxel_size_x(), spec.nx),
        clamp_idx((y - spec.y_min) / spec.voxel_size_y(), spec.ny),
        clamp_idx((z - spec.z_min) / spec.voxel_size_z(), spec.nz)};
}

/// Mean-pool point features into their containing voxels. Contributions are
/// summed in a canonical per-voxel order so the result is exactly invariant
/// to input permutation.
inline VoxelGrid voxelize(const PointCloud& pc, const GridSpec& spec) {
    spec.validate();
    if (pc.feature_dim != spec.channels)
        throw ShapeError("voxelize: point feature dim " + std::to_string(pc.feature_dim) +
                         " != grid channels " + std::to_string(spec.channels));
    std::size_t vol = spec.num_voxels();
    std::size_t c = spec.channels;

    struct Entry {
        std::size_t voxel;
        std::size_t point;
    };
    std::vector<Entry> entries;
    entries.reserve(pc.size());
    for (std::size_t p = 0; p < pc.size(); ++p) {
        auto idx = voxel_index(spec, pc.xyz[3 * p], pc.xyz[3 * p + 1], pc.xyz[3 * p + 2]);
        if (!idx) continue;
        entries.push_back({((*idx)[0] * spec.ny + (*idx)[1]) * spec.nz + (*idx)[2], p});
    }
    auto point_less = [&pc, c](std::size_t a, std::size_t b) {
        for (int k = 0; k < 3; ++k)
            if (pc.xyz[3 * a + k] != pc.xyz[3 * b + k]) return pc.xyz[3 * a + k] < pc.xyz[3 * b + k];
        for (std::size_t k = 0; k < c; ++k)
            if (pc.features[c * a + k] != pc.features[c * b + k])
                return pc.features[c * a + k] < pc.features[c * b + k];
        return false;
    };
    std::sort(entries.begin(), entries.end(), [&](const Entry& a, const Entry& b) {
        if (a.voxel != b.voxel) return a.voxel < b.voxel;
        return point_less(a.point, b.point);
    });

    std::vector<double> out(c * vol, 0.0);
    std::size_t i = 0;
    while (i < entries.size()) {
        std::size_t j = i;
        while (j < entries.size() && entries[j].voxel == entries[i].voxel) ++j;
        double inv = 1.0 / static_cast<double>(j - i);
        for (std::size_t k = i; k < j; ++k)
            for (std::size_t ch = 0; ch < c; ++ch)
                out[ch * vol + entries[k].voxel] += pc.features[c * entries[k].point + ch];
        for (std::size_t ch = 0; ch < c; ++ch) out[ch * vol + entries[i].voxel] *= inv;
        i = j;
    }
    GridSpec s = spec;
    return VoxelGrid(s, Tensor({c, spec.nx, spec.ny, spec.nz}, std::move(out)));
}

/// Lift-splat projection: every (pixel, depth-bin) sample is unprojected
/// through the pinhole model and its feature, weighted by the bin probability,
/// is sum-pooled into the containing voxel. Out-of-grid samples are dropped.
/// Differentiable in both image_features and depth_probs.
inline VoxelGrid lss_splat(const Tensor& image_features, const Tensor& depth_probs,
                           const CameraModel& cam, const GridSpec& spec) {
    spec.validate();
    cam.validate();
    if (image_features.ndim() != 3 || depth_probs.ndim() != 3)
        throw ShapeError("lss_splat expects features [FxHxW] and depth probs [DxHxW]");
    std::size_t f = image_features.dim(0), h = image_features.dim(1), w = image_features.dim(2);
    std::size_t d_bins = depth_probs.dim(0);
    if (depth_probs.dim(1) != h || depth_probs.dim(2) != w)
        throw ShapeError("lss_splat: image/depth spatial extents differ");
    if (h != cam.height || w != cam.width)
        throw ShapeError("lss_splat: tensor extents do not match camera image size");
    if (d_bins != cam.depth_bins.size())
        throw ShapeError("lss_splat: depth bin count mismatch");
    if (spec.channels != f)
        throw ShapeError("lss_splat: grid channels != image feature dim");
    for (std::size_t v = 0; v < h; ++v)
        for (std::size_t u = 0; u < w; ++u) {
            double col = 0.0;
            for (std::size_t d = 0; d < d_bins; ++d) {
                double p = depth_probs.data()[(d * h + v) * w + u];
                if (p < 0.0) throw ValueError("lss_splat: negative depth probability");
                col += p;
            }
            if (col > 1.0 + 1e-6)
                throw ValueError("lss_splat: depth probabilities sum beyond 1");
        }

    // Geometry is value-independent: one target voxel (or none) per sample.
    std::size_t vol = spec.num_voxels();
    std::vector<std::int64_t> target(d_bins * h * w, -1);
    for (std::size_t d = 0; d < d_bins; ++d)
        for (std::size_t v = 0; v < h; ++v)
            for (std::size_t u = 0; u < w; ++u) {
                auto pw = cam.unproject(u, v, cam.depth_bins[d]);
                auto idx = voxel_index(spec, pw[0], pw[1], pw[2]);
                if (idx)
                    target[(d * h + v) * w + u] =
                        static_cast<std::int64_t>(((*idx)[0] * spec.ny + (*idx)[1]) * spec.nz +
                                                  (*idx)[2]);
            }

    std::vector<double> out(f * vol, 0.0);
    for (std::size_t d = 0; d < d_bins; ++d)
        for (std::size_t v = 0; v < h; ++v)
            for (std::size_t u = 0; u < w; ++u) {
                std::int64_t t = target[(d * h + v) * w + u];
                if (t < 0) continue;
                double p = depth_probs.data()[(d * h + v) * w + u];
                if (p == 0.0) continue;
                for (std::size_t ch = 0; ch < f; ++ch)
                    out[ch * vol + t] += image_features.data()[(ch * h + v) * w + u] * p;
            }

    auto pf = image_features.node();
    auto pp = depth_probs.node();
    Tensor result = detail::make_op(
        {f, spec.nx, spec.ny, spec.nz}, std::move(out), {image_features, depth_probs},
        [pf, pp, target, f, h, w, d_bins, vol](detail::Node& self) {
            for (std::size_t d = 0; d < d_bins; ++d)
                for (std::size_t v = 0; v < h; ++v)
                    for (std::size_t u = 0; u < w; ++u) {
                        std::int64_t t = target[(d * h + v) * w + u];
                        if (t < 0) continue;
                        double p = pp->value[(d * h + v) * w + u];
                        if (pf->requires_grad) {
                            auto& g = pf->grad_buf();
                            for (std::size_t ch = 0; ch < f; ++ch)
                                g[(ch * h + v) * w + u] += self.grad[ch * vol + t] * p;
                        }
                        if (pp->requires_grad) {
                            double acc = 0.0;
                            for (std::size_t ch = 0; ch < f; ++ch)
                                acc += self.grad[ch * vol + t] * pf->value[(ch * h + v) * w + u];
                            pp->grad_buf()[(d * h + v) * w + u] += acc;
                        }
                    }
        });
    GridSpec s = spec;
    return VoxelGrid(s, std::move(result));
}

enum class Axis3 { x, y, z };

inline std::size_t grid_tensor_axis(Axis3 axis) {
    switch (axis) {
        case Axis3::x: return 1;
        case Axis3::y: return 2;
        default: return 3;
    }
}

/// D contiguous (mean-pooled when D < extent) slices along the chosen axis.
inline std::vector<Tensor> depth_slices(const VoxelGrid& grid, Axis3 depth_axis, std::size_t d) {
    std::size_t axis = grid_tensor_axis(depth_axis);
    std::size_t extent = grid.features.dim(axis);
    if (d > extent) throw ShapeError("depth_slices: D exceeds axis extent");
    return slice_mean_groups(grid.features, axis, d);
}

/// First-order forward difference along the grid z axis; output z-extent nz-1.
inline Tensor vertical_gradient(const VoxelGrid& grid) {
    if (grid.spec.nz < 2) throw ShapeError("vertical_gradient needs nz >= 2");
    return forward_diff(grid.features, 3);
}

}  // namespace voxfuse
