#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "metrics.hpp"
#include "scenes.hpp"
#include "semantic_prior.hpp"
#include "voxel.hpp"

namespace voxfuse {

using nlohmann::json;

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_f64(std::ostream& os, double v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
inline double read_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

}  // namespace detail

inline constexpr std::uint32_t kVoxelFormatVersion = 1;

/// Flat binary grid container: magic "VOXF", version, C/nx/ny/nz as u32, the
/// six f64 range bounds, then row-major f64 features.
inline void save_voxel_grid(const std::filesystem::path& path, const VoxelGrid& grid) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw LookupError("cannot open " + path.string() + " for writing");
    os.write("VOXF", 4);
    detail::write_u32(os, kVoxelFormatVersion);
    detail::write_u32(os, static_cast<std::uint32_t>(grid.spec.channels));
    detail::write_u32(os, static_cast<std::uint32_t>(grid.spec.nx));
    detail::write_u32(os, static_cast<std::uint32_t>(grid.spec.ny));
    detail::write_u32(os, static_cast<std::uint32_t>(grid.spec.nz));
    for (double b : {grid.spec.x_min, grid.spec.x_max, grid.spec.y_min, grid.spec.y_max,
                     grid.spec.z_min, grid.spec.z_max})
        detail::write_f64(os, b);
    os.write(reinterpret_cast<const char*>(grid.features.data().data()),
             static_cast<std::streamsize>(grid.features.size() * sizeof(double)));
}

inline VoxelGrid load_voxel_grid(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LookupError("cannot open " + path.string());
    char magic[4] = {};
    is.read(magic, 4);
    if (std::string(magic, 4) != "VOXF") throw ValueError("bad magic in " + path.string());
    std::uint32_t version = detail::read_u32(is);
    if (version != kVoxelFormatVersion)
        throw ValueError("unsupported grid format version " + std::to_string(version));
    GridSpec spec;
    spec.channels = detail::read_u32(is);
    spec.nx = detail::read_u32(is);
    spec.ny = detail::read_u32(is);
    spec.nz = detail::read_u32(is);
    spec.x_min = detail::read_f64(is);
    spec.x_max = detail::read_f64(is);
    spec.y_min = detail::read_f64(is);
    spec.y_max = detail::read_f64(is);
    spec.z_min = detail::read_f64(is);
    spec.z_max = detail::read_f64(is);
    spec.validate();
    std::vector<double> data(spec.channels * spec.num_voxels());
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw ValueError("truncated grid file " + path.string());
    for (double v : data)
        if (!std::isfinite(v)) throw ValueError("non-finite feature in " + path.string());
    return VoxelGrid(spec, Tensor({spec.channels, spec.nx, spec.ny, spec.nz}, std::move(data)));
}

inline json grid_spec_to_json(const GridSpec& spec) {
    return json{{"x_min", spec.x_min}, {"x_max", spec.x_max}, {"y_min", spec.y_min},
                {"y_max", spec.y_max}, {"z_min", spec.z_min}, {"z_max", spec.z_max},
                {"nx", spec.nx},       {"ny", spec.ny},       {"nz", spec.nz},
                {"channels", spec.channels}};
}

inline GridSpec grid_spec_from_json(const json& j) {
    GridSpec spec;
    spec.x_min = j.at("x_min");
    spec.x_max = j.at("x_max");
    spec.y_min = j.at("y_min");
    spec.y_max = j.at("y_max");
    spec.z_min = j.at("z_min");
    spec.z_max = j.at("z_max");
    spec.nx = j.at("nx");
    spec.ny = j.at("ny");
    spec.nz = j.at("nz");
    spec.channels = j.at("channels");
    spec.validate();
    return spec;
}

/// JSON mirror of the binary container, for small human-readable fixtures.
inline json voxel_grid_to_json(const VoxelGrid& grid) {
    return json{{"format", "VOXF"},
                {"version", kVoxelFormatVersion},
                {"spec", grid_spec_to_json(grid.spec)},
                {"features", grid.features.data()}};
}

inline VoxelGrid voxel_grid_from_json(const json& j) {
    if (j.at("format") != "VOXF") throw ValueError("not a VOXF grid document");
    GridSpec spec = grid_spec_from_json(j.at("spec"));
    std::vector<double> data = j.at("features").get<std::vector<double>>();
    return VoxelGrid(spec, Tensor({spec.channels, spec.nx, spec.ny, spec.nz}, std::move(data)));
}

/// Embedding table file: a JSON object mapping exact prompt strings to
/// E-length float arrays. Every row must share one dimension.
inline EmbeddingTable load_embedding_table(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw LookupError("cannot open embedding table " + path.string());
    json j = json::parse(is);
    if (!j.is_object()) throw ValueError("embedding table must be a JSON object");
    EmbeddingTable table;
    for (auto& [key, value] : j.items()) {
        auto vec = value.get<std::vector<double>>();
        if (table.dim == 0) table.dim = vec.size();
        if (vec.size() != table.dim || vec.empty())
            throw ValueError("embedding table rows have inconsistent dimension");
        table.entries.emplace(key, std::move(vec));
    }
    if (table.entries.empty()) throw ValueError("embedding table is empty");
    return table;
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw LookupError("cannot open " + path.string() + " for writing");
    os << j.dump(2) << "\n";
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw LookupError("cannot open " + path.string());
    return json::parse(is);
}

// ---------------------------------------------------------------------------
// scene files: JSON spec + weather, alongside VOXF grids for cached features
// ---------------------------------------------------------------------------

inline const char* region_tag(Region r) {
    switch (r) {
        case Region::USA: return "usa";
        case Region::Singapore: return "singapore";
        default: return "other";
    }
}

inline Region region_from_tag(const std::string& s) {
    if (s == "usa") return Region::USA;
    if (s == "singapore") return Region::Singapore;
    return Region::Other;
}

inline WeatherCondition weather_from_tag(const std::string& s) {
    if (s == "clear_day") return WeatherCondition::clear_day;
    if (s == "rain") return WeatherCondition::rain;
    if (s == "night") return WeatherCondition::night;
    if (s == "fog") return WeatherCondition::fog;
    return WeatherCondition::other;
}

inline json weather_context_to_json(const WeatherContext& ctx) {
    return json{{"condition", weather_name(ctx.condition)},
                {"region", region_tag(ctx.region)},
                {"timestamp", ctx.timestamp},
                {"source", ctx.source == WeatherContext::Source::telemetry ? "telemetry"
                                                                           : "ground_truth_label"}};
}

inline WeatherContext weather_context_from_json(const json& j) {
    WeatherContext ctx;
    ctx.condition = weather_from_tag(j.at("condition"));
    ctx.region = region_from_tag(j.at("region"));
    ctx.timestamp = j.at("timestamp");
    ctx.source = j.at("source") == "telemetry" ? WeatherContext::Source::telemetry
                                               : WeatherContext::Source::ground_truth_label;
    return ctx;
}

inline json scene_spec_to_json(const SceneSpec& spec) {
    json layout = json::array();
    for (const auto& b : spec.layout)
        layout.push_back(json{{"class_id", b.class_id},
                              {"lo", {b.lo[0], b.lo[1], b.lo[2]}},
                              {"hi", {b.hi[0], b.hi[1], b.hi[2]}}});
    json cam{{"fx", spec.camera.fx},
             {"fy", spec.camera.fy},
             {"cx", spec.camera.cx},
             {"cy", spec.camera.cy},
             {"rotation", spec.camera.rotation},
             {"translation", spec.camera.translation},
             {"width", spec.camera.width},
             {"height", spec.camera.height},
             {"depth_bins", spec.camera.depth_bins}};
    json lidar{{"azimuth_count", spec.lidar.azimuth_count},
               {"elevation_count", spec.lidar.elevation_count},
               {"elevation_min_deg", spec.lidar.elevation_min_deg},
               {"elevation_max_deg", spec.lidar.elevation_max_deg},
               {"max_range", spec.lidar.max_range},
               {"origin", spec.lidar.origin}};
    return json{{"seed", spec.seed},
                {"layout", layout},
                {"weather", weather_context_to_json(spec.weather)},
                {"grid", grid_spec_to_json(spec.grid)},
                {"camera", cam},
                {"lidar", lidar},
                {"num_classes", spec.num_classes},
                {"image_feature_dim", spec.image_feature_dim},
                {"point_feature_dim", spec.point_feature_dim},
                {"lidar_feature_noise", spec.lidar_feature_noise},
                {"mask_outside_frustum", spec.mask_outside_frustum},
                {"mask_unobserved_occupied", spec.mask_unobserved_occupied}};
}

inline SceneSpec scene_spec_from_json(const json& j) {
    SceneSpec spec;
    spec.seed = j.at("seed");
    for (const auto& b : j.at("layout")) {
        BoxPrimitive box;
        box.class_id = b.at("class_id");
        for (int k = 0; k < 3; ++k) {
            box.lo[k] = b.at("lo")[k];
            box.hi[k] = b.at("hi")[k];
        }
        spec.layout.push_back(box);
    }
    spec.weather = weather_context_from_json(j.at("weather"));
    spec.grid = grid_spec_from_json(j.at("grid"));
    const json& cam = j.at("camera");
    spec.camera.fx = cam.at("fx");
    spec.camera.fy = cam.at("fy");
    spec.camera.cx = cam.at("cx");
    spec.camera.cy = cam.at("cy");
    for (int k = 0; k < 9; ++k) spec.camera.rotation[k] = cam.at("rotation")[k];
    for (int k = 0; k < 3; ++k) spec.camera.translation[k] = cam.at("translation")[k];
    spec.camera.width = cam.at("width");
    spec.camera.height = cam.at("height");
    spec.camera.depth_bins = cam.at("depth_bins").get<std::vector<double>>();
    const json& lidar = j.at("lidar");
    spec.lidar.azimuth_count = lidar.at("azimuth_count");
    spec.lidar.elevation_count = lidar.at("elevation_count");
    spec.lidar.elevation_min_deg = lidar.at("elevation_min_deg");
    spec.lidar.elevation_max_deg = lidar.at("elevation_max_deg");
    spec.lidar.max_range = lidar.at("max_range");
    for (int k = 0; k < 3; ++k) spec.lidar.origin[k] = lidar.at("origin")[k];
    spec.num_classes = j.at("num_classes");
    spec.image_feature_dim = j.at("image_feature_dim");
    spec.point_feature_dim = j.at("point_feature_dim");
    spec.lidar_feature_noise = j.value("lidar_feature_noise", spec.lidar_feature_noise);
    spec.mask_outside_frustum = j.value("mask_outside_frustum", spec.mask_outside_frustum);
    spec.mask_unobserved_occupied =
        j.value("mask_unobserved_occupied", spec.mask_unobserved_occupied);
    spec.validate();
    return spec;
}

/// Metrics CSV: one row per class plus the binary-occupancy row.
inline void write_metrics_csv(const std::filesystem::path& path, const ConfusionMatrix& cm) {
    std::ofstream os(path);
    if (!os) throw LookupError("cannot open " + path.string() + " for writing");
    os << "class,tp,fp,fn,iou\n";
    for (std::size_t c = 0; c < cm.num_classes; ++c) {
        auto v = iou(cm, c);
        os << c << "," << cm.tp[c] << "," << cm.fp[c] << "," << cm.fn[c] << ",";
        if (v)
            os << *v;
        else
            os << "undefined";
        os << "\n";
    }
    auto g = geometric_iou(cm);
    os << "occupied," << cm.occ_tp << "," << cm.occ_fp << "," << cm.occ_fn << ",";
    if (g)
        os << *g;
    else
        os << "undefined";
    os << "\n";
}

/// JSON metric summary (iou, miou, optional per-term losses).
inline json metrics_summary_json(const ConfusionMatrix& cm) {
    json j;
    auto g = geometric_iou(cm);
    j["iou"] = g ? json(*g) : json(nullptr);
    j["miou"] = miou(cm);
    json per_class = json::object();
    for (std::size_t c = 0; c < cm.num_classes; ++c) {
        auto v = iou(cm, c);
        per_class[std::to_string(c)] = v ? json(*v) : json(nullptr);
    }
    j["per_class_iou"] = per_class;
    return j;
}

}  // namespace voxfuse
