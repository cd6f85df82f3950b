#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "daga.hpp"
#include "io.hpp"
#include "metrics.hpp"
#include "nn.hpp"
#include "objective.hpp"
#include "scenes.hpp"
#include "semantic_prior.hpp"
#include "weather_fusion.hpp"

namespace voxfuse {

enum class FusionStrategy { addition, concat, conv3d, weathfusion };

inline const char* fusion_name(FusionStrategy s) {
    switch (s) {
        case FusionStrategy::addition: return "addition";
        case FusionStrategy::concat: return "concat";
        case FusionStrategy::conv3d: return "conv3d";
        default: return "weathfusion";
    }
}

inline FusionStrategy fusion_from_name(const std::string& s) {
    if (s == "addition") return FusionStrategy::addition;
    if (s == "concat") return FusionStrategy::concat;
    if (s == "conv3d") return FusionStrategy::conv3d;
    if (s == "weathfusion") return FusionStrategy::weathfusion;
    throw ValueError("unknown fusion strategy: " + s);
}

/// Training-mix proportions over the three modeled conditions.
struct WeatherMix {
    double clear_day = 0.5;
    double rain = 0.25;
    double night = 0.25;
};

/// Full experiment description. Everything downstream is a pure function of
/// this struct, so (config, seed) -> outputs is reproducible byte for byte.
struct ExperimentConfig {
    std::uint64_t seed = 7;
    GridSpec grid = desk_grid();

    // module toggles (the ablation axes)
    bool instvlm = true;
    bool weathfusion = true;
    bool daga = true;
    FusionStrategy fusion = FusionStrategy::weathfusion;

    WeatherMix weather_mix;
    CorruptionModel corruption;

    // optimizer
    double lr = 1e-4;
    std::size_t steps = 200;
    std::size_t batch_size = 1;
    double weight_decay = 0.01;

    // objective
    double lambda_daga = 0.2;
    DagaConfig daga_cfg;

    // data
    std::size_t train_scenes = 12;
    std::size_t eval_scenes = 9;
    // distinct training layouts; conditions cycle over the same pool so the
    // weather variable is isolated from layout luck
    std::size_t layout_pool = 3;
    std::size_t num_classes = 5;
    std::vector<std::string> class_names = default_class_names();
    Region region = Region::USA;

    // model dims
    std::size_t voxel_channels = 8;
    std::size_t key_dim = 16;
    std::size_t embed_dim = 512;
    std::size_t image_feature_dim = 8;
    std::size_t point_feature_dim = 4;
    std::size_t lora_rank = 4;
    double lora_alpha = 8.0;

    std::string out_dir;
    std::string embedding_table;  // optional path; empty selects the stub encoder

    void validate() const {
        grid.validate();
        corruption.validate();
        daga_cfg.validate();
        if (num_classes < 2) throw ValueError("ExperimentConfig: need at least two classes");
        if (class_names.size() != num_classes)
            throw ValueError("ExperimentConfig: one name per class required");
        if (batch_size != 1) throw ValueError("ExperimentConfig: batch size is fixed at 1");
        if (steps == 0) throw ValueError("ExperimentConfig: zero steps");
    }

    /// Strategy actually used by the forward pass: turning the WeathFusion
    /// toggle off falls back to plain concatenation.
    FusionStrategy effective_fusion() const {
        if (!weathfusion && fusion == FusionStrategy::weathfusion) return FusionStrategy::concat;
        return fusion;
    }

    std::vector<std::string> semantic_class_names() const {
        return {class_names.begin() + 1, class_names.end()};
    }
};

inline json experiment_config_to_json(const ExperimentConfig& c) {
    return json{{"seed", c.seed},
                {"grid", grid_spec_to_json(c.grid)},
                {"instvlm", c.instvlm},
                {"weathfusion", c.weathfusion},
                {"daga", c.daga},
                {"fusion", fusion_name(c.fusion)},
                {"weather_mix",
                 {{"clear_day", c.weather_mix.clear_day},
                  {"rain", c.weather_mix.rain},
                  {"night", c.weather_mix.night}}},
                {"corruption",
                 {{"rain_p_drop", c.corruption.rain_p_drop},
                  {"rain_range_sigma", c.corruption.rain_range_sigma},
                  {"night_gamma", c.corruption.night_gamma},
                  {"night_noise_sigma", c.corruption.night_noise_sigma}}},
                {"lr", c.lr},
                {"steps", c.steps},
                {"batch_size", c.batch_size},
                {"weight_decay", c.weight_decay},
                {"lambda_daga", c.lambda_daga},
                {"daga_cfg",
                 {{"beta", c.daga_cfg.beta},
                  {"lambda_sharp", c.daga_cfg.lambda_sharp},
                  {"depth_axis", c.daga_cfg.depth_axis == Axis3::x   ? "x"
                                 : c.daga_cfg.depth_axis == Axis3::y ? "y"
                                                                     : "z"},
                  {"depth_slices", c.daga_cfg.depth_slice_count
                                       ? json(*c.daga_cfg.depth_slice_count)
                                       : json(nullptr)},
                  {"intensity_order", c.daga_cfg.intensity_order ==
                                              IntensityOrder::norm_then_sigmoid
                                          ? "norm_then_sigmoid"
                                          : "sigmoid_then_norm"},
                  {"sharpness_on_raw", c.daga_cfg.sharpness_on_raw}}},
                {"train_scenes", c.train_scenes},
                {"layout_pool", c.layout_pool},
                {"eval_scenes", c.eval_scenes},
                {"num_classes", c.num_classes},
                {"class_names", c.class_names},
                {"region", region_tag(c.region)},
                {"voxel_channels", c.voxel_channels},
                {"key_dim", c.key_dim},
                {"embed_dim", c.embed_dim},
                {"image_feature_dim", c.image_feature_dim},
                {"point_feature_dim", c.point_feature_dim},
                {"lora_rank", c.lora_rank},
                {"lora_alpha", c.lora_alpha},
                {"embedding_table", c.embedding_table}};
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig c;
    if (j.contains("seed")) c.seed = j.at("seed");
    if (j.contains("grid")) c.grid = grid_spec_from_json(j.at("grid"));
    if (j.contains("instvlm")) c.instvlm = j.at("instvlm");
    if (j.contains("weathfusion")) c.weathfusion = j.at("weathfusion");
    if (j.contains("daga")) c.daga = j.at("daga");
    if (j.contains("fusion")) c.fusion = fusion_from_name(j.at("fusion"));
    if (j.contains("weather_mix")) {
        const auto& m = j.at("weather_mix");
        c.weather_mix.clear_day = m.value("clear_day", c.weather_mix.clear_day);
        c.weather_mix.rain = m.value("rain", c.weather_mix.rain);
        c.weather_mix.night = m.value("night", c.weather_mix.night);
    }
    if (j.contains("corruption")) {
        const auto& m = j.at("corruption");
        c.corruption.rain_p_drop = m.value("rain_p_drop", c.corruption.rain_p_drop);
        c.corruption.rain_range_sigma = m.value("rain_range_sigma", c.corruption.rain_range_sigma);
        c.corruption.night_gamma = m.value("night_gamma", c.corruption.night_gamma);
        c.corruption.night_noise_sigma =
            m.value("night_noise_sigma", c.corruption.night_noise_sigma);
    }
    if (j.contains("lr")) c.lr = j.at("lr");
    if (j.contains("steps")) c.steps = j.at("steps");
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size");
    if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay");
    if (j.contains("lambda_daga")) c.lambda_daga = j.at("lambda_daga");
    if (j.contains("daga_cfg")) {
        const auto& m = j.at("daga_cfg");
        c.daga_cfg.beta = m.value("beta", c.daga_cfg.beta);
        c.daga_cfg.lambda_sharp = m.value("lambda_sharp", c.daga_cfg.lambda_sharp);
        if (m.contains("depth_axis")) {
            std::string ax = m.at("depth_axis");
            c.daga_cfg.depth_axis = ax == "x" ? Axis3::x : ax == "y" ? Axis3::y : Axis3::z;
        }
        if (m.contains("depth_slices") && !m.at("depth_slices").is_null())
            c.daga_cfg.depth_slice_count = m.at("depth_slices").get<std::size_t>();
        if (m.contains("intensity_order"))
            c.daga_cfg.intensity_order = m.at("intensity_order") == "sigmoid_then_norm"
                                             ? IntensityOrder::sigmoid_then_norm
                                             : IntensityOrder::norm_then_sigmoid;
        c.daga_cfg.sharpness_on_raw = m.value("sharpness_on_raw", c.daga_cfg.sharpness_on_raw);
    }
    if (j.contains("train_scenes")) c.train_scenes = j.at("train_scenes");
    if (j.contains("layout_pool")) c.layout_pool = j.at("layout_pool");
    if (j.contains("eval_scenes")) c.eval_scenes = j.at("eval_scenes");
    if (j.contains("num_classes")) c.num_classes = j.at("num_classes");
    if (j.contains("class_names"))
        c.class_names = j.at("class_names").get<std::vector<std::string>>();
    if (j.contains("region")) c.region = region_from_tag(j.at("region"));
    if (j.contains("voxel_channels")) c.voxel_channels = j.at("voxel_channels");
    if (j.contains("key_dim")) c.key_dim = j.at("key_dim");
    if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim");
    if (j.contains("image_feature_dim")) c.image_feature_dim = j.at("image_feature_dim");
    if (j.contains("point_feature_dim")) c.point_feature_dim = j.at("point_feature_dim");
    if (j.contains("lora_rank")) c.lora_rank = j.at("lora_rank");
    if (j.contains("lora_alpha")) c.lora_alpha = j.at("lora_alpha");
    if (j.contains("embedding_table")) c.embedding_table = j.at("embedding_table");
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

/// All trainable components. Every component is created with the same seeds
/// regardless of toggles, so ablation cells share initialization; only the
/// parameters of enabled modules reach the optimizer.
struct PipelineModel {
    LinearLayer cam_proj;   // image feature dim -> C
    LinearLayer pts_proj;   // point feature dim -> C
    LoRAAdapter lora;       // E -> E, frozen identity base
    InstVLMAttention attn_cam;
    InstVLMAttention attn_pts;
    GatingHead gating;
    LinearLayer fuse_proj;  // 2C -> C after weighted concat
    Tensor conv_kernel;     // [2C x 2C x 3x3x3]
    LinearLayer head_single;  // C -> Cls
    LinearLayer head_double;  // 2C -> Cls

    static PipelineModel init(const ExperimentConfig& cfg) {
        cfg.validate();
        PipelineModel m;
        std::size_t c = cfg.voxel_channels;
        {
            DetRng rng(mix_seed(cfg.seed, 0xb001));
            m.cam_proj = LinearLayer(c, cfg.image_feature_dim, rng);
        }
        {
            DetRng rng(mix_seed(cfg.seed, 0xb002));
            m.pts_proj = LinearLayer(c, cfg.point_feature_dim, rng);
        }
        {
            DetRng rng(mix_seed(cfg.seed, 0xb003));
            m.lora = LoRAAdapter::identity(cfg.embed_dim, cfg.lora_rank, cfg.lora_alpha, rng,
                                           /*b_scale=*/1e-3);
        }
        {
            DetRng rng(mix_seed(cfg.seed, 0xb004));
            m.attn_cam = InstVLMAttention(c, cfg.embed_dim, cfg.key_dim, rng);
        }
        {
            DetRng rng(mix_seed(cfg.seed, 0xb005));
            m.attn_pts = InstVLMAttention(c, cfg.embed_dim, cfg.key_dim, rng);
        }
        {
            DetRng rng(mix_seed(cfg.seed, 0xb006));
            m.gating = GatingHead(cfg.embed_dim, rng);
        }
        {
            DetRng rng(mix_seed(cfg.seed, 0xb007));
            m.fuse_proj = LinearLayer(c, 2 * c, rng);
        }
        {
            DetRng rng(mix_seed(cfg.seed, 0xb008));
            Tensor identity = identity_conv3d_kernel(2 * c);
            auto data = identity.data();
            for (auto& v : data) v += rng.normal() * 1e-3;  // near-identity start
            m.conv_kernel = Tensor({2 * c, 2 * c, 3, 3, 3}, std::move(data), true);
        }
        {
            DetRng rng(mix_seed(cfg.seed, 0xb009));
            m.head_single = LinearLayer(cfg.num_classes, c, rng);
        }
        {
            DetRng rng(mix_seed(cfg.seed, 0xb00a));
            m.head_double = LinearLayer(cfg.num_classes, 2 * c, rng);
        }
        return m;
    }

    const LinearLayer& head_for(FusionStrategy s) const {
        return (s == FusionStrategy::concat || s == FusionStrategy::conv3d) ? head_double
                                                                            : head_single;
    }

    /// Parameters of the modules the config enables, in a fixed order.
    std::vector<Tensor> parameters(const ExperimentConfig& cfg) const {
        std::vector<Tensor> params;
        auto push_all = [&params](const std::vector<Tensor>& ts) {
            for (const auto& t : ts) params.push_back(t);
        };
        push_all(cam_proj.parameters());
        push_all(pts_proj.parameters());
        if (cfg.instvlm) {
            push_all(lora.parameters());
            push_all(attn_cam.parameters());
            push_all(attn_pts.parameters());
        }
        FusionStrategy s = cfg.effective_fusion();
        if (s == FusionStrategy::weathfusion) {
            push_all(gating.parameters());
            push_all(fuse_proj.parameters());
        }
        if (s == FusionStrategy::conv3d) params.push_back(conv_kernel);
        push_all(head_for(s).parameters());
        return params;
    }
};

inline TextEncoder make_encoder(const ExperimentConfig& cfg) {
    TextEncoder enc;
    enc.dim = cfg.embed_dim;
    if (!cfg.embedding_table.empty()) enc.table = load_embedding_table(cfg.embedding_table);
    return enc;
}

// ---------------------------------------------------------------------------
// forward pass
// ---------------------------------------------------------------------------

struct PipelineOutput {
    Tensor logits;   // [Cls x nx x ny x nz]
    VoxelGrid v_cam;  // post-projection camera volume (alignment-loss input)
    VoxelGrid v_pts;  // post-projection LiDAR volume
    std::optional<FusionWeights> weights;
    PromptSpec instance_prompt;
};

/// Semantic classes present in a label volume, as prompt-ready names.
inline std::vector<std::string> classes_in_labels(const OccupancyLabels& labels,
                                                  const std::vector<std::string>& class_names) {
    std::set<int> present;
    for (int v : labels.labels)
        if (v > kEmptyClass) present.insert(v);
    std::vector<std::string> names;
    for (int c : present) names.push_back(class_names[static_cast<std::size_t>(c)]);
    return names;
}

/// Dual-branch forward: voxelize LiDAR, lift-splat the camera, inject text
/// priors per branch when enabled, fuse per the configured strategy, project
/// to class logits. Disabled modules are exact bypasses.
inline PipelineOutput forward_pipeline(const SceneObservation& obs, const ExperimentConfig& cfg,
                                       const PipelineModel& model, const TextEncoder& encoder,
                                       const std::vector<std::string>& prompt_classes,
                                       std::size_t frame_index = 0) {
    GridSpec pts_spec = cfg.grid;
    pts_spec.channels = cfg.point_feature_dim;
    GridSpec cam_spec = cfg.grid;
    cam_spec.channels = cfg.image_feature_dim;

    VoxelGrid pts_raw = voxelize(obs.cloud, pts_spec);
    VoxelGrid cam_raw = lss_splat(obs.image_features, obs.depth_probs, obs.camera, cam_spec);

    VoxelGrid v_pts = project_channels(pts_raw, model.pts_proj);
    VoxelGrid v_cam = project_channels(cam_raw, model.cam_proj);

    PipelineOutput out;
    out.v_cam = v_cam;
    out.v_pts = v_pts;

    VoxelGrid cam_branch = v_cam;
    VoxelGrid pts_branch = v_pts;
    if (cfg.instvlm) {
        std::vector<std::string> classes =
            prompt_classes.empty() ? cfg.semantic_class_names() : prompt_classes;
        out.instance_prompt = build_instance_prompt(classes, cfg.region, frame_index);
        Tensor tokens = encoder.encode_tokens(out.instance_prompt.token_texts());
        Tensor adapted = lora_project(tokens, model.lora);
        cam_branch = gated_cross_attention(cam_branch, adapted, adapted, model.attn_cam);
        pts_branch = gated_cross_attention(pts_branch, adapted, adapted, model.attn_pts);
    }

    FusionStrategy strategy = cfg.effective_fusion();
    VoxelGrid fused;
    switch (strategy) {
        case FusionStrategy::addition:
            fused = fuse_addition(cam_branch, pts_branch);
            break;
        case FusionStrategy::concat:
            fused = fuse_concat(cam_branch, pts_branch);
            break;
        case FusionStrategy::conv3d:
            fused = fuse_conv3d(cam_branch, pts_branch, model.conv_kernel);
            break;
        default: {
            TextEmbedding weath = encoder.encode(weather_prompt(obs.weather));
            FusionWeights w = gate_weights(weath, model.gating);
            out.weights = w;
            fused = fuse_weathfusion(cam_branch, pts_branch, w);
            break;
        }
    }
    // encoder stand-in: global scale normalization (every strategy alike, so
    // the trainable gate controls the modality ratio rather than the overall
    // gain), then the per-voxel projection stack
    fused = VoxelGrid(fused.spec, rms_normalize(fused.features));
    if (strategy == FusionStrategy::weathfusion) fused = project_channels(fused, model.fuse_proj);
    out.logits = project_channels(fused, model.head_for(strategy)).features;
    return out;
}

// ---------------------------------------------------------------------------
// scene sets
// ---------------------------------------------------------------------------

/// Deterministic condition sequence with exact proportional counts, shuffled
/// by the derived seed.
inline std::vector<WeatherCondition> condition_sequence(const WeatherMix& mix, std::size_t n,
                                                        std::uint64_t seed) {
    double total = mix.clear_day + mix.rain + mix.night;
    if (total <= 0.0) throw ValueError("WeatherMix: proportions sum to zero");
    std::size_t n_clear = static_cast<std::size_t>(std::floor(mix.clear_day / total * n + 0.5));
    std::size_t n_rain = static_cast<std::size_t>(std::floor(mix.rain / total * n + 0.5));
    if (n_clear + n_rain > n) n_rain = n - n_clear;
    std::size_t n_night = n - n_clear - n_rain;
    std::vector<WeatherCondition> seq;
    seq.insert(seq.end(), n_clear, WeatherCondition::clear_day);
    seq.insert(seq.end(), n_rain, WeatherCondition::rain);
    seq.insert(seq.end(), n_night, WeatherCondition::night);
    DetRng rng(mix_seed(seed, 0x5e9));
    for (std::size_t i = seq.size(); i > 1; --i) std::swap(seq[i - 1], seq[rng.below(i)]);
    return seq;
}

/// One generated-and-corrupted scene for a (layout, condition) pair.
inline SceneObservation build_scene(const ExperimentConfig& cfg, std::uint64_t base_seed,
                                    std::size_t layout_index, WeatherCondition condition) {
    SceneSpec spec = make_default_scene_spec(mix_seed(base_seed, layout_index), condition,
                                             cfg.region);
    spec.grid = cfg.grid;
    spec.camera = desk_camera(cfg.grid);
    spec.num_classes = cfg.num_classes;
    spec.image_feature_dim = cfg.image_feature_dim;
    spec.point_feature_dim = cfg.point_feature_dim;
    WeatherContext ctx = spec.weather;
    return apply_corruption(generate_scene(spec), cfg.corruption, ctx);
}

inline std::vector<SceneObservation> build_scene_set(const ExperimentConfig& cfg,
                                                     std::uint64_t base_seed, std::size_t count,
                                                     const std::vector<WeatherCondition>& seq) {
    std::vector<SceneObservation> scenes;
    scenes.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        scenes.push_back(build_scene(cfg, base_seed, i, seq[i]));
    return scenes;
}

/// Training scenes: every condition cycles over the same layout pool, so the
/// weather comparison is matched on layouts; only the visit order is shuffled.
inline std::vector<SceneObservation> build_train_scenes(const ExperimentConfig& cfg) {
    auto seq = condition_sequence(cfg.weather_mix, cfg.train_scenes, mix_seed(cfg.seed, 0x7a1));
    std::size_t pool = std::max<std::size_t>(1, cfg.layout_pool);
    std::array<std::size_t, 3> counts{0, 0, 0};
    for (WeatherCondition c : seq)
        ++counts[c == WeatherCondition::clear_day ? 0 : c == WeatherCondition::rain ? 1 : 2];
    std::vector<std::pair<WeatherCondition, std::size_t>> cells;
    const WeatherCondition order[4] = {WeatherCondition::clear_day, WeatherCondition::rain,
                                       WeatherCondition::night};
    for (int c = 0; c < 3; ++c)
        for (std::size_t k = 0; k < counts[static_cast<std::size_t>(c)]; ++k)
            cells.emplace_back(order[c], k % pool);
    DetRng rng(mix_seed(cfg.seed, 0x0d4d34));
    for (std::size_t i = cells.size(); i > 1; --i) std::swap(cells[i - 1], cells[rng.below(i)]);
    std::vector<SceneObservation> scenes;
    scenes.reserve(cells.size());
    std::uint64_t base = mix_seed(cfg.seed, 0x11a);
    for (const auto& [condition, layout] : cells)
        scenes.push_back(build_scene(cfg, base, layout, condition));
    return scenes;
}

inline std::vector<SceneObservation> build_eval_scenes(const ExperimentConfig& cfg) {
    auto seq = condition_sequence(cfg.weather_mix, cfg.eval_scenes, mix_seed(cfg.seed, 0x7a2));
    return build_scene_set(cfg, mix_seed(cfg.seed, 0x22b), cfg.eval_scenes, seq);
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct StepLoss {
    std::size_t step = 0;
    double total = 0, ce = 0, lovasz = 0, daga = 0;
};

/// Everything one training run produces. Wall-clock is reported on stdout and
/// in sweep tables but deliberately kept out of report.json, which must be
/// byte-identical across reruns of the same (config, seed).
struct RunReport {
    std::vector<StepLoss> losses;
    ConfusionMatrix confusion;
    double miou_value = 0.0;
    std::optional<double> geo_iou;
    // condition name -> (w_cam, w_pts) of the trained gate
    std::vector<std::tuple<std::string, double, double>> fusion_weights;
    double wall_clock_sec = 0.0;
};

inline json run_report_to_json(const RunReport& r) {
    json losses = json::array();
    for (const auto& s : r.losses)
        losses.push_back(json{{"step", s.step},
                              {"total", s.total},
                              {"ce", s.ce},
                              {"lovasz", s.lovasz},
                              {"daga", s.daga}});
    json weights = json::object();
    for (const auto& [name, cam, pts] : r.fusion_weights)
        weights[name] = json{{"w_cam", cam}, {"w_pts", pts}};
    json j;
    j["losses"] = losses;
    j["miou"] = r.miou_value;
    j["iou"] = r.geo_iou ? json(*r.geo_iou) : json(nullptr);
    j["fusion_weights"] = weights;
    j["confusion"] = json{{"num_classes", r.confusion.num_classes},
                          {"tp", r.confusion.tp},
                          {"fp", r.confusion.fp},
                          {"fn", r.confusion.fn},
                          {"occ_tp", r.confusion.occ_tp},
                          {"occ_fp", r.confusion.occ_fp},
                          {"occ_fn", r.confusion.occ_fn}};
    return j;
}

inline void write_losses_csv(const std::filesystem::path& path,
                             const std::vector<StepLoss>& losses) {
    std::ofstream os(path);
    if (!os) throw LookupError("cannot open " + path.string() + " for writing");
    os << "step,total,ce,lovasz,daga\n";
    os.precision(17);
    for (const auto& s : losses)
        os << s.step << "," << s.total << "," << s.ce << "," << s.lovasz << "," << s.daga << "\n";
}

/// Evaluate a trained model over scenes, accumulating a confusion matrix.
/// Evaluation frames are independent, so prompting uses the generic template.
inline ConfusionMatrix evaluate_model(const PipelineModel& model, const ExperimentConfig& cfg,
                                      const TextEncoder& encoder,
                                      const std::vector<SceneObservation>& scenes) {
    ConfusionMatrix cm(cfg.num_classes);
    for (const auto& obs : scenes) {
        PipelineOutput out = forward_pipeline(obs, cfg, model, encoder, {}, 0);
        update_confusion(cm, argmax_labels(out.logits), obs.labels);
    }
    return cm;
}

/// Gate weights the trained head assigns to each modeled condition.
inline std::vector<std::tuple<std::string, double, double>> probe_fusion_weights(
    const PipelineModel& model, const ExperimentConfig& cfg, const TextEncoder& encoder) {
    std::vector<std::tuple<std::string, double, double>> rows;
    for (WeatherCondition c :
         {WeatherCondition::clear_day, WeatherCondition::rain, WeatherCondition::night}) {
        WeatherContext ctx;
        ctx.condition = c;
        ctx.region = cfg.region;
        ctx.source = WeatherContext::Source::telemetry;
        FusionWeights w = gate_weights(encoder.encode(weather_prompt(ctx)), model.gating);
        rows.emplace_back(weather_name(c), w.cam(), w.pts());
    }
    return rows;
}

/// Full training run: AdamW over the enabled parameters with cosine-annealed
/// learning rate, one scene per step in round-robin order. Writes report.json,
/// metrics.csv and losses.csv when out_dir is set.
inline RunReport train(const ExperimentConfig& cfg) {
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();

    TextEncoder encoder = make_encoder(cfg);
    std::vector<SceneObservation> train_set = build_train_scenes(cfg);
    std::vector<SceneObservation> eval_set = build_eval_scenes(cfg);

    PipelineModel model = PipelineModel::init(cfg);
    std::vector<Tensor> params = model.parameters(cfg);
    AdamOptions opts;
    opts.lr = cfg.lr;
    opts.weight_decay = cfg.weight_decay;
    AdamW optimizer(params, opts);

    ObjectiveConfig objective;
    objective.lambda_daga = cfg.daga ? cfg.lambda_daga : 0.0;
    objective.daga = cfg.daga_cfg;

    RunReport report;
    report.losses.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const SceneObservation& obs = train_set[step % train_set.size()];
        // ground-truth class sets drive training-time prompting
        auto prompt_classes = classes_in_labels(obs.labels, cfg.class_names);
        PipelineOutput out = forward_pipeline(obs, cfg, model, encoder, prompt_classes, 0);
        LossBreakdown loss = total_loss(out.logits, obs.labels, out.v_cam, out.v_pts, objective);
        double total = loss.total.item();
        if (std::isnan(total) || std::isinf(total))
            throw DivergenceError("train: non-finite loss at step " + std::to_string(step) +
                                  " (ce=" + std::to_string(loss.ce.item()) +
                                  ", lovasz=" + std::to_string(loss.lovasz.item()) +
                                  ", daga=" + std::to_string(loss.daga.item()) + ")");
        report.losses.push_back({step, total, loss.ce.item(), loss.lovasz.item(),
                                 loss.daga.item()});
        optimizer.zero_grad();
        loss.total.backward();
        optimizer.set_lr(cosine_lr(cfg.lr, step, cfg.steps));
        optimizer.step();
    }

    report.confusion = evaluate_model(model, cfg, encoder, eval_set);
    report.miou_value = miou(report.confusion);
    report.geo_iou = geometric_iou(report.confusion);
    if (cfg.effective_fusion() == FusionStrategy::weathfusion)
        report.fusion_weights = probe_fusion_weights(model, cfg, encoder);
    report.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        std::filesystem::path dir(cfg.out_dir);
        write_json_file(dir / "report.json", run_report_to_json(report));
        write_metrics_csv(dir / "metrics.csv", report.confusion);
        write_losses_csv(dir / "losses.csv", report.losses);
    }
    return report;
}

// ---------------------------------------------------------------------------
// sweeps
// ---------------------------------------------------------------------------

struct SweepRow {
    std::string label;
    double iou = 0.0;  // geometric
    double miou = 0.0;
    double wall_clock_sec = 0.0;
};

inline void write_sweep_csv(const std::filesystem::path& path, const std::string& axis_name,
                            const std::vector<SweepRow>& rows) {
    std::ofstream os(path);
    if (!os) throw LookupError("cannot open " + path.string() + " for writing");
    os << axis_name << ",iou,miou,wall_clock_sec\n";
    for (const auto& r : rows)
        os << r.label << "," << r.iou << "," << r.miou << "," << r.wall_clock_sec << "\n";
}

/// Sweep parallelism: capped by VOXFUSE_THREADS when set, otherwise the
/// hardware concurrency. Cells are independent tapes on separate threads.
inline std::size_t sweep_thread_count(std::size_t cells) {
    std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("VOXFUSE_THREADS")) {
        char* end = nullptr;
        unsigned long parsed = std::strtoul(env, &end, 10);
        if (end != env && parsed > 0) n = static_cast<std::size_t>(parsed);
    }
    return std::min(n, std::max<std::size_t>(1, cells));
}

template <typename Fn>
inline void run_cells(std::size_t cells, Fn&& fn) {
    std::size_t workers = sweep_thread_count(cells);
    if (workers <= 1) {
        for (std::size_t i = 0; i < cells; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < cells; i = next.fetch_add(1)) fn(i);
        });
    for (auto& t : pool) t.join();
}

/// Table-per-toggle-combination ablation: 2^3 cells over {instvlm,
/// weathfusion, daga}, shared seeds and scene sets.
inline std::vector<SweepRow> run_ablation(const ExperimentConfig& base) {
    std::vector<SweepRow> rows(8);
    run_cells(8, [&](std::size_t i) {
        ExperimentConfig cfg = base;
        cfg.instvlm = (i & 1) != 0;
        cfg.weathfusion = (i & 2) != 0;
        cfg.daga = (i & 4) != 0;
        cfg.out_dir.clear();
        RunReport r = train(cfg);
        rows[i] = {std::string("instvlm=") + (cfg.instvlm ? "1" : "0") +
                       " weathfusion=" + (cfg.weathfusion ? "1" : "0") +
                       " daga=" + (cfg.daga ? "1" : "0"),
                   r.geo_iou.value_or(0.0), r.miou_value, r.wall_clock_sec};
    });
    if (!base.out_dir.empty()) {
        std::filesystem::create_directories(base.out_dir);
        write_sweep_csv(std::filesystem::path(base.out_dir) / "ablation.csv", "toggles", rows);
    }
    return rows;
}

/// One row per fusion strategy, other toggles as configured.
inline std::vector<SweepRow> run_fusion_comparison(const ExperimentConfig& base) {
    const FusionStrategy strategies[] = {FusionStrategy::addition, FusionStrategy::concat,
                                         FusionStrategy::conv3d, FusionStrategy::weathfusion};
    std::vector<SweepRow> rows(4);
    run_cells(4, [&](std::size_t i) {
        ExperimentConfig cfg = base;
        cfg.fusion = strategies[i];
        cfg.weathfusion = strategies[i] == FusionStrategy::weathfusion;
        cfg.out_dir.clear();
        RunReport r = train(cfg);
        rows[i] = {fusion_name(strategies[i]), r.geo_iou.value_or(0.0), r.miou_value,
                   r.wall_clock_sec};
    });
    if (!base.out_dir.empty()) {
        std::filesystem::create_directories(base.out_dir);
        write_sweep_csv(std::filesystem::path(base.out_dir) / "fusion.csv", "strategy", rows);
    }
    return rows;
}

/// Per-condition evaluation sets with seeds shared across strategies.
inline std::vector<SceneObservation> build_condition_eval_scenes(const ExperimentConfig& cfg,
                                                                 WeatherCondition condition,
                                                                 std::size_t count) {
    std::vector<WeatherCondition> seq(count, condition);
    return build_scene_set(cfg, mix_seed(cfg.seed, 0x33c), count, seq);
}

/// Adverse-condition comparison: train WeathFusion and static concat on the
/// same mixed-weather scene set, then evaluate each per condition.
inline std::vector<SweepRow> run_adverse(const ExperimentConfig& base) {
    const FusionStrategy strategies[] = {FusionStrategy::weathfusion, FusionStrategy::concat};
    const WeatherCondition conditions[] = {WeatherCondition::rain, WeatherCondition::clear_day,
                                           WeatherCondition::night};

    std::vector<SweepRow> rows;
    for (FusionStrategy strategy : strategies) {
        ExperimentConfig cfg = base;
        cfg.fusion = strategy;
        cfg.weathfusion = strategy == FusionStrategy::weathfusion;
        cfg.out_dir.clear();
        auto t0 = std::chrono::steady_clock::now();

        TextEncoder encoder = make_encoder(cfg);
        std::vector<SceneObservation> train_set = build_train_scenes(cfg);
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
            LossBreakdown loss =
                total_loss(out.logits, obs.labels, out.v_cam, out.v_pts, objective);
            optimizer.zero_grad();
            loss.total.backward();
            optimizer.set_lr(cosine_lr(cfg.lr, step, cfg.steps));
            optimizer.step();
        }
        double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        for (WeatherCondition condition : conditions) {
            auto scenes = build_condition_eval_scenes(cfg, condition, cfg.eval_scenes);
            ConfusionMatrix cm = evaluate_model(model, cfg, encoder, scenes);
            auto g = geometric_iou(cm);
            rows.push_back({std::string(weather_name(condition)) + "/" + fusion_name(strategy),
                            g.value_or(0.0), miou(cm), wall});
        }
    }
    if (!base.out_dir.empty()) {
        std::filesystem::create_directories(base.out_dir);
        write_sweep_csv(std::filesystem::path(base.out_dir) / "adverse.csv", "condition/fusion",
                        rows);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// recursive-prompt inference
// ---------------------------------------------------------------------------

struct FramePrediction {
    PromptSpec prompt;
    std::vector<int> labels;
    std::vector<std::string> predicted_classes;
};

/// Frame 0 uses the generic all-class prompt; every later frame's prompt is
/// restricted to the classes predicted in the previous frame. An empty
/// predicted set falls back to the full vocabulary.
inline std::vector<FramePrediction> infer_sequence(const std::vector<SceneObservation>& frames,
                                                   const ExperimentConfig& cfg,
                                                   const PipelineModel& model,
                                                   const TextEncoder& encoder) {
    if (frames.empty()) throw ValueError("infer_sequence: no frames");
    std::vector<FramePrediction> result;
    std::vector<std::string> classes = cfg.semantic_class_names();
    for (std::size_t t = 0; t < frames.size(); ++t) {
        PipelineOutput out = forward_pipeline(frames[t], cfg, model, encoder, classes, t);
        FramePrediction fp;
        fp.prompt = cfg.instvlm ? out.instance_prompt
                                : build_instance_prompt(classes, cfg.region, t);
        fp.labels = argmax_labels(out.logits);
        std::set<int> present;
        for (int v : fp.labels)
            if (v > kEmptyClass) present.insert(v);
        for (int c : present) fp.predicted_classes.push_back(cfg.class_names[static_cast<std::size_t>(c)]);
        classes = fp.predicted_classes.empty() ? cfg.semantic_class_names()
                                               : fp.predicted_classes;
        result.push_back(std::move(fp));
    }
    return result;
}

}  // namespace voxfuse
