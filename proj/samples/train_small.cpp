// Minimal end-to-end run: train a small model for a handful of steps and
// print the loss trajectory and trained gate weights.

#include <cstdio>

#include "voxfuse/pipeline.hpp"

int main() {
    voxfuse::ExperimentConfig cfg;
    cfg.seed = 3;
    cfg.steps = 60;
    cfg.lr = 3e-3;
    cfg.train_scenes = 6;
    cfg.eval_scenes = 3;

    voxfuse::RunReport report = voxfuse::train(cfg);
    std::printf("step %4zu  loss %.4f\n", report.losses.front().step,
                report.losses.front().total);
    std::printf("step %4zu  loss %.4f\n", report.losses.back().step, report.losses.back().total);
    std::printf("miou %.4f  geometric iou %.4f\n", report.miou_value,
                report.geo_iou.value_or(0.0));
    for (const auto& [name, cam, pts] : report.fusion_weights)
        std::printf("gate %-10s w_cam=%.4f w_pts=%.4f\n", name.c_str(), cam, pts);
    return 0;
}
