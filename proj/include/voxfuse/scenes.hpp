#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "metrics.hpp"
#include "random.hpp"
#include "tensor.hpp"
#include "voxel.hpp"
#include "weather_fusion.hpp"

namespace voxfuse {

/// Axis-aligned box with a semantic class; ground planes are thin full-extent
/// slabs of the same kind.
struct BoxPrimitive {
    int class_id = 0;
    std::array<double, 3> lo{0, 0, 0};
    std::array<double, 3> hi{0, 0, 0};

    bool contains(double x, double y, double z) const {
        return x >= lo[0] && x < hi[0] && y >= lo[1] && y < hi[1] && z >= lo[2] && z < hi[2];
    }
};

inline BoxPrimitive ground_plane(int class_id, const GridSpec& grid, double thickness) {
    return BoxPrimitive{class_id,
                        {grid.x_min, grid.y_min, grid.z_min},
                        {grid.x_max, grid.y_max, grid.z_min + thickness}};
}

/// Spinning-scan ray pattern: azimuth_count columns over the full circle and
/// elevation_count rows over [elevation_min, elevation_max] degrees.
struct LidarPattern {
    std::size_t azimuth_count = 72;
    std::size_t elevation_count = 12;
    double elevation_min_deg = -32.0;
    double elevation_max_deg = 6.0;
    double max_range = 40.0;
    std::array<double, 3> origin{0.0, 0.0, 0.6};
};

/// Everything that determines one synthetic frame; the seed pins all sampling.
struct SceneSpec {
    std::uint64_t seed = 0;
    std::vector<BoxPrimitive> layout;
    WeatherContext weather;
    GridSpec grid;
    CameraModel camera;
    LidarPattern lidar;
    std::size_t num_classes = 5;  // includes free space at index 0
    std::size_t image_feature_dim = 8;
    std::size_t point_feature_dim = 4;
    double lidar_feature_noise = 0.35;  // per-point measurement noise
    // Supervise only the camera-visible region: voxels outside the frustum
    // get the ignore label, the usual visible-mask evaluation protocol.
    bool mask_outside_frustum = true;
    // Ignore occupied voxels the clean camera never observes (occluded box
    // interiors and surfaces hidden from the camera vantage); empty space
    // stays supervised. Together with the frustum mask this is a
    // camera-visibility evaluation protocol.
    bool mask_unobserved_occupied = true;

    void validate() const {
        if (layout.empty()) throw ValueError("SceneSpec: empty layout");
        grid.validate();
        double sx = 2.0 * (grid.x_max - grid.x_min), sy = 2.0 * (grid.y_max - grid.y_min),
               sz = 2.0 * (grid.z_max - grid.z_min);
        for (const auto& b : layout) {
            if (b.class_id <= kEmptyClass || static_cast<std::size_t>(b.class_id) >= num_classes)
                throw ValueError("SceneSpec: primitive class out of range");
            for (int k = 0; k < 3; ++k)
                if (!(b.lo[k] < b.hi[k])) throw ValueError("SceneSpec: degenerate primitive");
            if (b.lo[0] < grid.x_min - sx || b.hi[0] > grid.x_max + sx ||
                b.lo[1] < grid.y_min - sy || b.hi[1] > grid.y_max + sy ||
                b.lo[2] < grid.z_min - sz || b.hi[2] > grid.z_max + sz)
                throw ValueError("SceneSpec: primitive outside twice the grid range");
        }
    }
};

/// Weather corruption parameters: rain thins and perturbs the point cloud,
/// night crushes camera contrast and adds noise, clear is the identity.
struct CorruptionModel {
    double rain_p_drop = 0.4;
    double rain_range_sigma = 0.1;  // meters
    double night_gamma = 0.2;       // contrast scale in (0, 1]
    double night_noise_sigma = 0.05;

    void validate() const {
        if (rain_p_drop < 0.0 || rain_p_drop > 1.0)
            throw ValueError("CorruptionModel: p_drop outside [0,1]");
        if (night_gamma <= 0.0 || night_gamma > 1.0)
            throw ValueError("CorruptionModel: gamma outside (0,1]");
        if (rain_range_sigma < 0.0 || night_noise_sigma < 0.0)
            throw ValueError("CorruptionModel: negative noise scale");
    }
};

/// One frame of observations plus ground truth.
struct SceneObservation {
    std::uint64_t seed = 0;
    PointCloud cloud;
    Tensor image_features;  // [F x H x W]
    Tensor depth_probs;     // [D x H x W]
    OccupancyLabels labels;
    WeatherContext weather;
    CameraModel camera;
    std::array<double, 3> lidar_origin{0, 0, 0};
};

// ---------------------------------------------------------------------------
// class signatures
// ---------------------------------------------------------------------------

namespace detail {
inline constexpr std::uint64_t kSignatureSeed = 0x51674a7;
}

/// Camera feature signatures: independent random vectors, one per class,
/// well separated so clean camera observations carry strong semantic
/// evidence. Their scale (norm 0.5) sits below the night noise floor once
/// the contrast scale is applied, which is what makes low-light camera
/// features genuinely unreliable rather than merely attenuated.
inline std::vector<std::vector<double>> camera_class_signatures(std::size_t num_classes,
                                                                std::size_t dim) {
    constexpr double kScale = 0.15;
    std::vector<std::vector<double>> sigs(num_classes, std::vector<double>(dim, 0.0));
    for (std::size_t c = 1; c < num_classes; ++c) {
        DetRng rng(mix_seed(detail::kSignatureSeed, 0x100 + c));
        double norm = 0.0;
        for (auto& v : sigs[c]) {
            v = rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(norm) / kScale;
        for (auto& v : sigs[c]) v /= norm;
    }
    return sigs;
}

/// LiDAR feature signatures share a dominant common component: geometry-only
/// returns are class-ambiguous, mirroring how raw range data under-determines
/// semantics.
inline std::vector<std::vector<double>> lidar_class_signatures(std::size_t num_classes,
                                                               std::size_t dim) {
    DetRng common_rng(mix_seed(detail::kSignatureSeed, 0x200));
    std::vector<double> common(dim);
    double cn = 0.0;
    for (auto& v : common) {
        v = common_rng.normal();
        cn += v * v;
    }
    cn = std::sqrt(cn);
    for (auto& v : common) v /= cn;

    std::vector<std::vector<double>> sigs(num_classes, std::vector<double>(dim, 0.0));
    for (std::size_t c = 1; c < num_classes; ++c) {
        DetRng rng(mix_seed(detail::kSignatureSeed, 0x300 + c));
        std::vector<double> unique(dim);
        double un = 0.0;
        for (auto& v : unique) {
            v = rng.normal();
            un += v * v;
        }
        un = std::sqrt(un);
        double norm = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
            sigs[c][k] = 0.85 * common[k] + 0.4 * unique[k] / un;
            norm += sigs[c][k] * sigs[c][k];
        }
        norm = std::sqrt(norm);
        for (auto& v : sigs[c]) v /= norm;
    }
    return sigs;
}

// ---------------------------------------------------------------------------
// ray casting
// ---------------------------------------------------------------------------

/// Entry distance of a ray into a box (slab method); nullopt when the ray
/// misses or starts inside.
inline std::optional<double> ray_box_entry(const std::array<double, 3>& origin,
                                           const std::array<double, 3>& dir,
                                           const BoxPrimitive& box, double max_range) {
    double t_enter = 0.0, t_exit = max_range;
    for (int k = 0; k < 3; ++k) {
        if (std::abs(dir[k]) < 1e-12) {
            if (origin[k] < box.lo[k] || origin[k] > box.hi[k]) return std::nullopt;
            continue;
        }
        double t1 = (box.lo[k] - origin[k]) / dir[k];
        double t2 = (box.hi[k] - origin[k]) / dir[k];
        if (t1 > t2) std::swap(t1, t2);
        t_enter = std::max(t_enter, t1);
        t_exit = std::min(t_exit, t2);
        if (t_enter > t_exit) return std::nullopt;
    }
    if (t_enter <= 1e-9) return std::nullopt;
    return t_enter;
}

struct RayHit {
    double distance;
    std::size_t primitive;
};

inline std::optional<RayHit> cast_ray(const std::array<double, 3>& origin,
                                      const std::array<double, 3>& dir,
                                      const std::vector<BoxPrimitive>& layout, double max_range) {
    std::optional<RayHit> best;
    for (std::size_t p = 0; p < layout.size(); ++p) {
        auto t = ray_box_entry(origin, dir, layout[p], max_range);
        if (t && (!best || *t < best->distance)) best = RayHit{*t, p};
    }
    return best;
}

// ---------------------------------------------------------------------------
// scene generation
// ---------------------------------------------------------------------------

namespace detail {

/// Strict (positive-measure) interval overlap.
inline bool strictly_overlaps(double a_lo, double a_hi, double b_lo, double b_hi) {
    return a_lo < b_hi && a_hi > b_lo;
}

inline bool voxel_overlaps_box(const GridSpec& g, std::size_t ix, std::size_t iy, std::size_t iz,
                               const BoxPrimitive& b) {
    double x0 = g.x_min + static_cast<double>(ix) * g.voxel_size_x();
    double y0 = g.y_min + static_cast<double>(iy) * g.voxel_size_y();
    double z0 = g.z_min + static_cast<double>(iz) * g.voxel_size_z();
    return strictly_overlaps(x0, x0 + g.voxel_size_x(), b.lo[0], b.hi[0]) &&
           strictly_overlaps(y0, y0 + g.voxel_size_y(), b.lo[1], b.hi[1]) &&
           strictly_overlaps(z0, z0 + g.voxel_size_z(), b.lo[2], b.hi[2]);
}

}  // namespace detail

/// Rasterize primitives into per-voxel labels: a voxel takes the class of the
/// last primitive in layout order that strictly overlaps it.
inline OccupancyLabels rasterize_labels(const std::vector<BoxPrimitive>& layout,
                                        const GridSpec& grid) {
    OccupancyLabels out;
    out.dims = {grid.nx, grid.ny, grid.nz};
    out.labels.assign(grid.num_voxels(), kEmptyClass);
    for (const auto& box : layout) {
        for (std::size_t ix = 0; ix < grid.nx; ++ix)
            for (std::size_t iy = 0; iy < grid.ny; ++iy)
                for (std::size_t iz = 0; iz < grid.nz; ++iz)
                    if (detail::voxel_overlaps_box(grid, ix, iy, iz, box))
                        out.labels[(ix * grid.ny + iy) * grid.nz + iz] = box.class_id;
    }
    return out;
}

/// Deterministic synthetic frame: labels rasterized from the layout, LiDAR
/// ray-cast against it, camera features as class signatures with depth mass
/// concentrated at the true surface depth.
inline SceneObservation generate_scene(const SceneSpec& spec) {
    spec.validate();
    spec.camera.validate();

    SceneObservation obs;
    obs.seed = spec.seed;
    obs.weather = spec.weather;
    obs.camera = spec.camera;
    obs.lidar_origin = spec.lidar.origin;
    obs.labels = rasterize_labels(spec.layout, spec.grid);
    if (spec.mask_outside_frustum) {
        for (std::size_t ix = 0; ix < spec.grid.nx; ++ix)
            for (std::size_t iy = 0; iy < spec.grid.ny; ++iy)
                for (std::size_t iz = 0; iz < spec.grid.nz; ++iz) {
                    auto c = spec.grid.voxel_center(ix, iy, iz);
                    auto cam_pt = spec.camera.world_to_cam({c[0], c[1], c[2]});
                    bool visible = cam_pt[2] > 0.0;
                    if (visible) {
                        double u = spec.camera.fx * cam_pt[0] / cam_pt[2] + spec.camera.cx;
                        double v = spec.camera.fy * cam_pt[1] / cam_pt[2] + spec.camera.cy;
                        visible = u >= 0.0 && u < static_cast<double>(spec.camera.width) &&
                                  v >= 0.0 && v < static_cast<double>(spec.camera.height);
                    }
                    if (!visible)
                        obs.labels.labels[(ix * spec.grid.ny + iy) * spec.grid.nz + iz] =
                            kIgnoreLabel;
                }
    }

    auto cam_sigs = camera_class_signatures(spec.num_classes, spec.image_feature_dim);
    auto pts_sigs = lidar_class_signatures(spec.num_classes, spec.point_feature_dim);

    // LiDAR sweep; per-point measurement noise on the feature channels
    obs.cloud.feature_dim = spec.point_feature_dim;
    DetRng feat_rng(mix_seed(spec.seed, 0x11da2));
    const auto& lp = spec.lidar;
    double deg = 3.14159265358979323846 / 180.0;
    for (std::size_t e = 0; e < lp.elevation_count; ++e) {
        double phi = lp.elevation_count == 1
                         ? lp.elevation_min_deg * deg
                         : (lp.elevation_min_deg +
                            (lp.elevation_max_deg - lp.elevation_min_deg) *
                                static_cast<double>(e) /
                                static_cast<double>(lp.elevation_count - 1)) *
                               deg;
        for (std::size_t a = 0; a < lp.azimuth_count; ++a) {
            double theta = 2.0 * 3.14159265358979323846 * static_cast<double>(a) /
                           static_cast<double>(lp.azimuth_count);
            std::array<double, 3> dir{std::cos(phi) * std::cos(theta),
                                      std::cos(phi) * std::sin(theta), std::sin(phi)};
            auto hit = cast_ray(lp.origin, dir, spec.layout, lp.max_range);
            if (!hit) continue;  // ray escapes: no return
            int cls = spec.layout[hit->primitive].class_id;
            std::vector<double> feat = pts_sigs[static_cast<std::size_t>(cls)];
            for (auto& v : feat) v += feat_rng.normal(0.0, spec.lidar_feature_noise);
            obs.cloud.push_point(lp.origin[0] + hit->distance * dir[0],
                                 lp.origin[1] + hit->distance * dir[1],
                                 lp.origin[2] + hit->distance * dir[2], feat, cls);
        }
    }

    // Camera frame
    const auto& cam = spec.camera;
    std::size_t f = spec.image_feature_dim, h = cam.height, w = cam.width;
    std::size_t d_bins = cam.depth_bins.size();
    std::vector<double> feats(f * h * w, 0.0);
    std::vector<double> probs(d_bins * h * w, 0.0);
    std::vector<std::array<double, 3>> camera_hits;
    auto center = cam.center();
    for (std::size_t v = 0; v < h; ++v)
        for (std::size_t u = 0; u < w; ++u) {
            auto far_point = cam.unproject(u, v, 1.0);
            std::array<double, 3> dir{far_point[0] - center[0], far_point[1] - center[1],
                                      far_point[2] - center[2]};
            double n = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
            for (auto& d : dir) d /= n;
            auto hit = cast_ray(center, dir, spec.layout, lp.max_range * 2.0);
            if (!hit) continue;
            std::array<double, 3> pw{center[0] + hit->distance * dir[0],
                                     center[1] + hit->distance * dir[1],
                                     center[2] + hit->distance * dir[2]};
            double z_depth = cam.world_to_cam(pw)[2];
            if (z_depth <= 0.0) continue;
            camera_hits.push_back(pw);
            std::size_t best_bin = 0;
            double best_gap = std::abs(cam.depth_bins[0] - z_depth);
            for (std::size_t d = 1; d < d_bins; ++d) {
                double gap = std::abs(cam.depth_bins[d] - z_depth);
                if (gap < best_gap) {
                    best_gap = gap;
                    best_bin = d;
                }
            }
            // all depth mass at the surface bin
            probs[(best_bin * h + v) * w + u] = 1.0;
            int cls = spec.layout[hit->primitive].class_id;
            for (std::size_t ch = 0; ch < f; ++ch)
                feats[(ch * h + v) * w + u] = cam_sigs[static_cast<std::size_t>(cls)][ch];
        }
    obs.image_features = Tensor({f, h, w}, std::move(feats));
    obs.depth_probs = Tensor({d_bins, h, w}, std::move(probs));

    if (spec.mask_unobserved_occupied) {
        std::vector<char> observed(spec.grid.num_voxels(), 0);
        auto mark = [&](double px, double py, double pz) {
            auto idx = voxel_index(spec.grid, px, py, pz);
            if (idx) observed[((*idx)[0] * spec.grid.ny + (*idx)[1]) * spec.grid.nz + (*idx)[2]] = 1;
        };
        for (std::size_t v = 0; v < h; ++v)
            for (std::size_t u = 0; u < w; ++u)
                for (std::size_t d = 0; d < d_bins; ++d)
                    if (obs.depth_probs.data()[(d * h + v) * w + u] > 0.5) {
                        auto pw = cam.unproject(u, v, cam.depth_bins[d]);
                        mark(pw[0], pw[1], pw[2]);
                    }
        for (const auto& hit : camera_hits) mark(hit[0], hit[1], hit[2]);
        for (std::size_t i = 0; i < observed.size(); ++i)
            if (obs.labels.labels[i] > kEmptyClass && !observed[i])
                obs.labels.labels[i] = kIgnoreLabel;
    }
    return obs;
}

/// Seeded weather corruption. Rain thins the cloud and jitters ranges; night
/// scales camera features by gamma and adds Gaussian noise; anything else
/// passes through unchanged.
inline SceneObservation apply_corruption(const SceneObservation& obs,
                                         const CorruptionModel& model,
                                         const WeatherContext& ctx) {
    model.validate();
    SceneObservation out = obs;
    out.weather = ctx;
    switch (ctx.condition) {
        case WeatherCondition::rain: {
            DetRng rng(mix_seed(obs.seed, 0xa11d));
            PointCloud kept;
            kept.feature_dim = obs.cloud.feature_dim;
            std::size_t fd = obs.cloud.feature_dim;
            for (std::size_t p = 0; p < obs.cloud.size(); ++p) {
                bool dropped = rng.bernoulli(model.rain_p_drop);
                double eps = rng.normal(0.0, model.rain_range_sigma);
                if (dropped) continue;
                double dx = obs.cloud.xyz[3 * p] - obs.lidar_origin[0];
                double dy = obs.cloud.xyz[3 * p + 1] - obs.lidar_origin[1];
                double dz = obs.cloud.xyz[3 * p + 2] - obs.lidar_origin[2];
                double range = std::sqrt(dx * dx + dy * dy + dz * dz);
                double s = range > 1e-9 ? (range + eps) / range : 1.0;
                std::vector<double> feat(obs.cloud.features.begin() + fd * p,
                                         obs.cloud.features.begin() + fd * (p + 1));
                kept.push_point(obs.lidar_origin[0] + dx * s, obs.lidar_origin[1] + dy * s,
                                obs.lidar_origin[2] + dz * s, feat, obs.cloud.labels[p]);
            }
            out.cloud = std::move(kept);
            break;
        }
        case WeatherCondition::night: {
            DetRng rng(mix_seed(obs.seed, 0x0d9e));
            std::vector<double> feats = obs.image_features.data();
            for (auto& v : feats)
                v = v * model.night_gamma + rng.normal(0.0, model.night_noise_sigma);
            out.image_features = Tensor(obs.image_features.shape(), std::move(feats));
            break;
        }
        default:
            break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// desk-scale defaults
// ---------------------------------------------------------------------------

inline GridSpec desk_grid(std::size_t channels = 1) {
    GridSpec g;
    g.x_min = -10.0;
    g.x_max = 10.0;
    g.y_min = -10.0;
    g.y_max = 10.0;
    g.z_min = -2.0;
    g.z_max = 2.0;
    g.nx = 20;
    g.ny = 20;
    g.nz = 8;
    g.channels = channels;
    return g;
}

/// The paper-scale grid, for invariance tests against the desk grid.
inline GridSpec full_grid(std::size_t channels = 1) {
    GridSpec g;
    g.channels = channels;
    return g;  // defaults are already [-50,50]^2 x [-5,3], 200x200x16
}

/// Forward-facing camera on the grid's -x edge looking toward +x.
inline CameraModel desk_camera(const GridSpec& grid) {
    CameraModel cam;
    cam.width = 32;
    cam.height = 20;
    cam.fx = 14.0;
    cam.fy = 14.0;
    cam.cx = 16.0;
    cam.cy = 10.0;
    // camera right = -y_world, camera down = -z_world, camera forward = +x_world
    cam.rotation = {0, -1, 0, 0, 0, -1, 1, 0, 0};
    std::array<double, 3> center{grid.x_min + 1.0, 0.0, 0.6};
    cam.translation = {
        -(cam.rotation[0] * center[0] + cam.rotation[1] * center[1] + cam.rotation[2] * center[2]),
        -(cam.rotation[3] * center[0] + cam.rotation[4] * center[1] + cam.rotation[5] * center[2]),
        -(cam.rotation[6] * center[0] + cam.rotation[7] * center[1] + cam.rotation[8] * center[2])};
    cam.depth_bins.clear();
    for (int d = 0; d < 36; ++d) cam.depth_bins.push_back(1.0 + 0.5 * static_cast<double>(d));
    return cam;
}

inline std::vector<std::string> default_class_names() {
    return {"free space", "driveable surface", "car", "pedestrian", "pole"};
}

/// Randomized desk-scale layout: a ground slab plus a jittered car, pedestrian
/// and pole placed inside the camera frustum.
inline SceneSpec make_default_scene_spec(std::uint64_t seed, WeatherCondition condition,
                                         Region region = Region::USA) {
    SceneSpec spec;
    spec.seed = seed;
    spec.grid = desk_grid();
    spec.camera = desk_camera(spec.grid);
    spec.weather.condition = condition;
    spec.weather.region = region;
    spec.weather.source = WeatherContext::Source::ground_truth_label;
    spec.num_classes = 5;

    DetRng rng(mix_seed(seed, 0x5ce9e));
    spec.layout.push_back(ground_plane(1, spec.grid, 0.35));

    auto add_box = [&](int cls, double cx, double cy, double sx, double sy, double sz) {
        double z0 = spec.grid.z_min + 0.35;
        spec.layout.push_back(BoxPrimitive{
            cls, {cx - sx / 2.0, cy - sy / 2.0, z0}, {cx + sx / 2.0, cy + sy / 2.0, z0 + sz}});
    };
    // a car is always present; pedestrian and pole come and go, so class sets
    // (and with them the instance prompts) vary across scenes
    add_box(2, rng.uniform(-1.0, 5.0), rng.uniform(-3.0, 3.0), rng.uniform(3.4, 4.4),
            rng.uniform(1.7, 2.1), rng.uniform(1.4, 1.7));
    bool with_pedestrian = rng.uniform() < 0.75;
    double ped_x = rng.uniform(-4.0, 1.0), ped_y = rng.uniform(-5.5, -3.8);
    double ped_sx = rng.uniform(0.5, 0.7), ped_sy = rng.uniform(0.5, 0.7);
    double ped_sz = rng.uniform(1.6, 1.9);
    if (with_pedestrian) add_box(3, ped_x, ped_y, ped_sx, ped_sy, ped_sz);
    bool with_pole = rng.uniform() < 0.75;
    double pole_x = rng.uniform(2.0, 7.0), pole_y = rng.uniform(3.8, 5.5);
    double pole_sx = rng.uniform(0.35, 0.5), pole_sy = rng.uniform(0.35, 0.5);
    double pole_sz = rng.uniform(3.0, 3.8);
    if (with_pole) add_box(4, pole_x, pole_y, pole_sx, pole_sy, pole_sz);
    return spec;
}

}  // namespace voxfuse
