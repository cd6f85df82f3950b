// Generate a synthetic scene, cache its LiDAR voxel grid in the binary VOXF
// container plus the JSON scene file, and read both back.

#include <cstdio>
#include <filesystem>

#include "voxfuse/io.hpp"
#include "voxfuse/scenes.hpp"

int main() {
    using namespace voxfuse;
    SceneSpec spec = make_default_scene_spec(11, WeatherCondition::rain);
    SceneObservation obs = generate_scene(spec);
    std::printf("scene %llu: %zu lidar points, %zu gt voxels occupied\n",
                static_cast<unsigned long long>(spec.seed), obs.cloud.size(), [&] {
                    std::size_t n = 0;
                    for (int v : obs.labels.labels)
                        if (v != kEmptyClass) ++n;
                    return n;
                }());

    GridSpec grid = spec.grid;
    grid.channels = spec.point_feature_dim;
    VoxelGrid voxels = voxelize(obs.cloud, grid);

    auto dir = std::filesystem::temp_directory_path() / "voxfuse_sample";
    std::filesystem::create_directories(dir);
    save_voxel_grid(dir / "lidar.voxf", voxels);
    write_json_file(dir / "scene.json", scene_spec_to_json(spec));

    VoxelGrid back = load_voxel_grid(dir / "lidar.voxf");
    SceneSpec spec_back = scene_spec_from_json(read_json_file(dir / "scene.json"));
    std::printf("round trip: grid %s, weather %s\n",
                back.features.data() == voxels.features.data() ? "identical" : "DIFFERS",
                weather_name(spec_back.weather.condition));
    return 0;
}
