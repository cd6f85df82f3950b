// voxfuse command line: seeded training runs, ablation/fusion/adverse sweeps,
// recursive-prompt inference and a gradient self-check.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "voxfuse/pipeline.hpp"

using namespace voxfuse;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool no_instvlm = false;
    bool no_weathfusion = false;
    bool no_daga = false;
    std::string fusion;
    std::uint64_t steps = 0;
    double lr = 0.0;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config JSON");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed, "experiment seed")->each([&args](const std::string&) {
        args.seed_set = true;
    });
    cmd->add_flag("--no-instvlm", args.no_instvlm, "disable the text-prior attention");
    cmd->add_flag("--no-weathfusion", args.no_weathfusion, "disable weather-adaptive fusion");
    cmd->add_flag("--no-daga", args.no_daga, "disable the geometric alignment loss");
    cmd->add_option("--fusion", args.fusion, "fusion strategy: addition|concat|conv3d|weathfusion");
    cmd->add_option("--steps", args.steps, "training step count");
    cmd->add_option("--lr", args.lr, "initial learning rate");
}

ExperimentConfig resolve_config(const CommonArgs& args) {
    ExperimentConfig cfg;
    if (!args.config_path.empty())
        cfg = experiment_config_from_json(read_json_file(args.config_path));
    if (args.seed_set) cfg.seed = args.seed;
    if (args.no_instvlm) cfg.instvlm = false;
    if (args.no_weathfusion) cfg.weathfusion = false;
    if (args.no_daga) cfg.daga = false;
    if (!args.fusion.empty()) cfg.fusion = fusion_from_name(args.fusion);
    if (args.steps) cfg.steps = args.steps;
    if (args.lr > 0.0) cfg.lr = args.lr;
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    cfg.validate();
    return cfg;
}

void print_rows(const std::vector<SweepRow>& rows, const char* axis) {
    std::printf("%-32s %8s %8s %10s\n", axis, "iou", "miou", "wall(s)");
    for (const auto& r : rows)
        std::printf("%-32s %8.4f %8.4f %10.2f\n", r.label.c_str(), r.iou, r.miou,
                    r.wall_clock_sec);
}

PipelineModel train_in_place(const ExperimentConfig& cfg, const TextEncoder& encoder) {
    auto train_set = build_train_scenes(cfg);
    PipelineModel model = PipelineModel::init(cfg);
    AdamOptions opts;
    opts.lr = cfg.lr;
    opts.weight_decay = cfg.weight_decay;
    AdamW optimizer(model.parameters(cfg), opts);
    ObjectiveConfig objective;
    objective.lambda_daga = cfg.daga ? cfg.lambda_daga : 0.0;
    objective.daga = cfg.daga_cfg;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const SceneObservation& obs = train_set[step % train_set.size()];
        auto prompt_classes = classes_in_labels(obs.labels, cfg.class_names);
        PipelineOutput out = forward_pipeline(obs, cfg, model, encoder, prompt_classes, 0);
        LossBreakdown loss = total_loss(out.logits, obs.labels, out.v_cam, out.v_pts, objective);
        optimizer.zero_grad();
        loss.total.backward();
        optimizer.set_lr(cosine_lr(cfg.lr, step, cfg.steps));
        optimizer.step();
    }
    return model;
}

int cmd_train(const CommonArgs& args) {
    ExperimentConfig cfg = resolve_config(args);
    RunReport report = train(cfg);
    std::printf("steps: %zu  final loss: %.6f  miou: %.4f  iou: %.4f  wall: %.2fs\n",
                report.losses.size(), report.losses.back().total, report.miou_value,
                report.geo_iou.value_or(0.0), report.wall_clock_sec);
    for (const auto& [name, cam, pts] : report.fusion_weights)
        std::printf("  gate %-10s w_cam=%.4f w_pts=%.4f\n", name.c_str(), cam, pts);
    if (!cfg.out_dir.empty())
        std::printf("wrote report.json, metrics.csv, losses.csv to %s\n", cfg.out_dir.c_str());
    return 0;
}

int cmd_infer_seq(const CommonArgs& args, std::size_t frames) {
    ExperimentConfig cfg = resolve_config(args);
    TextEncoder encoder = make_encoder(cfg);
    PipelineModel model = train_in_place(cfg, encoder);

    std::vector<SceneObservation> sequence(frames, build_train_scenes(cfg).front());
    auto preds = infer_sequence(sequence, cfg, model, encoder);
    for (std::size_t t = 0; t < preds.size(); ++t) {
        std::printf("frame %zu prompt: %s\n", t, preds[t].prompt.text().c_str());
        std::printf("  predicted classes:");
        for (const auto& c : preds[t].predicted_classes) std::printf(" %s", c.c_str());
        std::printf("\n");
    }
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        json j = json::array();
        for (const auto& p : preds)
            j.push_back(json{{"prompt", p.prompt.text()},
                             {"predicted_classes", p.predicted_classes}});
        write_json_file(std::filesystem::path(cfg.out_dir) / "sequence.json", j);
    }
    return 0;
}

int cmd_grad_check(const CommonArgs& args) {
    ExperimentConfig cfg = resolve_config(args);
    DetRng rng(cfg.seed + 0x60ad);
    auto weights = [&rng](std::size_t n) {
        std::vector<double> w(n);
        for (auto& v : w) v = rng.normal();
        return w;
    };
    auto report = [](const char* op, double err) {
        std::printf("%-24s max rel err %.3e  %s\n", op, err, err <= 1e-4 ? "ok" : "FAIL");
        return err <= 1e-4;
    };

    // central differences, h = 1e-5
    auto fd_check = [](const std::function<Tensor()>& f, std::vector<Tensor> inputs) {
        double worst = 0.0;
        for (auto& t : inputs) t.zero_grad();
        Tensor loss = f();
        loss.backward();
        std::vector<std::vector<double>> analytic;
        for (const auto& t : inputs)
            analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.size(), 0.0));
        for (std::size_t p = 0; p < inputs.size(); ++p) {
            auto& data = inputs[p].mutable_data();
            for (std::size_t i = 0; i < data.size(); ++i) {
                double orig = data[i];
                data[i] = orig + 1e-5;
                double up = f().item();
                data[i] = orig - 1e-5;
                double down = f().item();
                data[i] = orig;
                double numeric = (up - down) / 2e-5;
                double denom = std::max(std::abs(analytic[p][i]) + std::abs(numeric), 1e-6);
                worst = std::max(worst, std::abs(analytic[p][i] - numeric) / denom);
            }
        }
        return worst;
    };

    bool ok = true;
    {
        Tensor x({3, 4}, weights(12), true);
        auto w = weights(12);
        ok &= report("softmax",
                     fd_check([&] { return sum(mul(softmax(x, 1), Tensor({3, 4}, w))); }, {x}));
    }
    {
        Tensor a({3, 4}, weights(12), true);
        Tensor b({4, 2}, weights(8), true);
        auto w = weights(6);
        ok &= report("matmul",
                     fd_check([&] { return sum(mul(matmul(a, b), Tensor({3, 2}, w))); }, {a, b}));
    }
    {
        Tensor logits({5, 3}, weights(15), true);
        std::vector<int> labels{0, 2, 1, 2, 0};
        ok &= report("cross_entropy",
                     fd_check([&] { return cross_entropy(logits, labels); }, {logits}));
        ok &= report("lovasz_softmax",
                     fd_check([&] { return lovasz_softmax(softmax(logits, 1), labels); },
                              {logits}));
    }
    {
        GridSpec g;
        g.x_min = g.y_min = g.z_min = 0;
        g.x_max = g.y_max = g.z_max = 4;
        g.nx = g.ny = g.nz = 4;
        g.channels = 1;
        Tensor fa({1, 4, 4, 4}, weights(64), true);
        Tensor fb({1, 4, 4, 4}, weights(64), true);
        DagaConfig dcfg;
        ok &= report("daga_loss",
                     fd_check([&] { return daga_loss(VoxelGrid(g, fa), VoxelGrid(g, fb), dcfg); },
                              {fa, fb}));
    }
    std::printf("%s\n", ok ? "all gradient checks passed" : "gradient checks FAILED");
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale multimodal voxel occupancy lab"};
    app.require_subcommand(1);

    CommonArgs args;
    std::size_t frames = 4;

    CLI::App* train_cmd = app.add_subcommand("train", "train one configuration");
    add_common(train_cmd, args);
    CLI::App* ablate_cmd = app.add_subcommand("ablate", "2^3 module-toggle sweep");
    add_common(ablate_cmd, args);
    CLI::App* fusion_cmd = app.add_subcommand("fusion-bench", "compare fusion strategies");
    add_common(fusion_cmd, args);
    CLI::App* adverse_cmd =
        app.add_subcommand("adverse", "per-condition comparison of adaptive vs static fusion");
    add_common(adverse_cmd, args);
    CLI::App* infer_cmd =
        app.add_subcommand("infer-seq", "recursive-prompt inference over a static sequence");
    add_common(infer_cmd, args);
    infer_cmd->add_option("--frames", frames, "sequence length");
    CLI::App* grad_cmd = app.add_subcommand("grad-check", "finite-difference self check");
    add_common(grad_cmd, args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(args);
        if (ablate_cmd->parsed()) {
            print_rows(run_ablation(resolve_config(args)), "toggles");
            return 0;
        }
        if (fusion_cmd->parsed()) {
            print_rows(run_fusion_comparison(resolve_config(args)), "strategy");
            return 0;
        }
        if (adverse_cmd->parsed()) {
            print_rows(run_adverse(resolve_config(args)), "condition/fusion");
            return 0;
        }
        if (infer_cmd->parsed()) return cmd_infer_seq(args, frames);
        if (grad_cmd->parsed()) return cmd_grad_check(args);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
