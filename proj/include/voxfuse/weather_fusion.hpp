#pragma once

#include <cstdint>
#include <string>

#include "nn.hpp"
#include "semantic_prior.hpp"
#include "tensor.hpp"
#include "voxel.hpp"

namespace voxfuse {

enum class WeatherCondition { clear_day, rain, night, fog, other };

inline const char* weather_name(WeatherCondition c) {
    switch (c) {
        case WeatherCondition::clear_day: return "clear_day";
        case WeatherCondition::rain: return "rain";
        case WeatherCondition::night: return "night";
        case WeatherCondition::fog: return "fog";
        default: return "other";
    }
}

/// Environmental metadata record standing in for CAN-BUS telemetry.
struct WeatherContext {
    WeatherCondition condition = WeatherCondition::clear_day;
    Region region = Region::Other;
    std::int64_t timestamp = 0;
    enum class Source { ground_truth_label, telemetry };
    Source source = Source::ground_truth_label;
};

/// Deterministic environmental-context prompt per condition and region.
/// Conditions without a dedicated template fall back to the generic one.
inline PromptSpec weather_prompt(const WeatherContext& ctx) {
    PromptSpec p;
    p.region = ctx.region;
    p.template_id = 0;
    switch (ctx.condition) {
        case WeatherCondition::clear_day:
            p.class_names = {"a clear daytime road with good visibility"};
            break;
        case WeatherCondition::rain:
            p.class_names = {"a rainy road with precipitation scattering lidar returns"};
            break;
        case WeatherCondition::night:
            p.class_names = {"a night road with low light and weak camera contrast"};
            break;
        default:
            p.class_names = {"a road under unspecified weather conditions"};
            break;
    }
    return p;
}

/// Weather-conditioned gating head: two-layer MLP with a 32-wide hidden
/// layer and ReLU, plus a learnable sharpness scalar. The softplus keeps the
/// inverse temperature strictly positive.
struct GatingHead {
    LinearLayer fc1;  // [hidden x E]
    LinearLayer fc2;  // [2 x hidden]
    Tensor alpha_raw;

    static constexpr std::size_t kHiddenDim = 32;

    GatingHead() = default;

    GatingHead(std::size_t embed_dim, DetRng& rng) : fc1(kHiddenDim, embed_dim, rng) {
        // unit-variance pre-activations: the inputs are unit-norm embeddings,
        // so fan-in scaled init would leave the hidden layer input-blind
        for (auto& v : fc1.weight.mutable_data()) v = rng.normal();
        for (auto& v : fc1.bias.mutable_data()) v = 0.1;
        // small random output layer: weights start near (0.5, 0.5) with no
        // systematic modality preference, yet every parameter sees gradient
        fc2 = LinearLayer(2, kHiddenDim, rng);
        for (auto& v : fc2.weight.mutable_data()) v *= 0.1;
        for (auto& v : fc2.bias.mutable_data()) v = rng.normal() * 0.01;
        // softplus(0.5413...) == 1: the head starts with unit sharpness
        alpha_raw = Tensor({1}, {std::log(std::expm1(1.0))}, true);
    }

    std::size_t embed_dim() const { return fc1.in_dim(); }
    std::size_t hidden_dim() const { return fc1.out_dim(); }

    Tensor temperature() const { return softplus(alpha_raw); }

    std::vector<Tensor> parameters() const {
        return {fc1.weight, fc1.bias, fc2.weight, fc2.bias, alpha_raw};
    }
};

/// Per-modality fusion weights; always a 2-point probability distribution.
struct FusionWeights {
    Tensor w_cam;  // scalar
    Tensor w_pts;  // scalar

    double cam() const { return w_cam.item(); }
    double pts() const { return w_pts.item(); }
};

/// Softmax of the gating logits scaled by the learned inverse temperature.
inline FusionWeights gate_weights(const TextEmbedding& weather_embedding,
                                  const GatingHead& head) {
    if (weather_embedding.vector.size() != head.embed_dim())
        throw ShapeError("gate_weights: embedding dim does not match gating head");
    Tensor e = reshape(weather_embedding.vector, {1, head.embed_dim()});
    Tensor hidden = relu(head.fc1.apply(e));
    Tensor logits = head.fc2.apply(hidden);  // [1 x 2]
    Tensor scaled = scale_by(logits, head.temperature());
    Tensor w = softmax(scaled, 1);
    return {select(w, 0), select(w, 1)};
}

/// Helper used by tests that want weights from explicit logits.
inline FusionWeights fusion_weights_from_logits(const Tensor& logits, const Tensor& temperature) {
    if (logits.size() != 2) throw ShapeError("fusion_weights_from_logits expects 2 logits");
    Tensor scaled = scale_by(reshape(logits, {1, 2}), temperature);
    Tensor w = softmax(scaled, 1);
    return {select(w, 0), select(w, 1)};
}

namespace detail {
inline void check_fusable(const VoxelGrid& v_cam, const VoxelGrid& v_pts) {
    if (!v_cam.spec.same_extents(v_pts.spec))
        throw ShapeError("fusion: voxel grids cover different extents");
}
}  // namespace detail

/// Apply a [C_out x C_in] projection voxel-wise (a 1x1x1 convolution).
inline VoxelGrid project_channels(const VoxelGrid& grid, const LinearLayer& proj) {
    if (proj.in_dim() != grid.spec.channels)
        throw ShapeError("project_channels: layer input dim != grid channels");
    Tensor tokens = voxels_to_tokens(grid);
    Tensor out = proj.apply(tokens);
    GridSpec spec = grid.spec;
    spec.channels = proj.out_dim();
    return tokens_to_voxels(out, spec);
}

/// Weighted channel concatenation (the WeathFusion combiner): each modality
/// is scaled by its gate weight before stacking. An optional 1x1x1 projection
/// stands in for the downstream volumetric encoder.
inline VoxelGrid fuse_weathfusion(const VoxelGrid& v_cam, const VoxelGrid& v_pts,
                                  const FusionWeights& w,
                                  const LinearLayer* projection = nullptr) {
    detail::check_fusable(v_cam, v_pts);
    Tensor cam_scaled = scale_by(v_cam.features, w.w_cam);
    Tensor pts_scaled = scale_by(v_pts.features, w.w_pts);
    GridSpec spec = v_cam.spec;
    spec.channels = v_cam.spec.channels + v_pts.spec.channels;
    VoxelGrid fused(spec, concat({cam_scaled, pts_scaled}, 0));
    if (!projection) return fused;
    return project_channels(fused, *projection);
}

/// Element-wise sum baseline; channel counts must match.
inline VoxelGrid fuse_addition(const VoxelGrid& v_cam, const VoxelGrid& v_pts) {
    detail::check_fusable(v_cam, v_pts);
    if (v_cam.spec.channels != v_pts.spec.channels)
        throw ShapeError("fuse_addition: channel counts differ");
    return VoxelGrid(v_cam.spec, add(v_cam.features, v_pts.features));
}

/// Channel-stacking baseline.
inline VoxelGrid fuse_concat(const VoxelGrid& v_cam, const VoxelGrid& v_pts) {
    detail::check_fusable(v_cam, v_pts);
    GridSpec spec = v_cam.spec;
    spec.channels = v_cam.spec.channels + v_pts.spec.channels;
    return VoxelGrid(spec, concat({v_cam.features, v_pts.features}, 0));
}

/// Identity-centered 3x3x3 kernel: conv3d with it reproduces its input.
inline Tensor identity_conv3d_kernel(std::size_t channels) {
    std::vector<double> k(channels * channels * 27, 0.0);
    for (std::size_t c = 0; c < channels; ++c)
        k[((c * channels + c) * 3 + 1) * 9 + 1 * 3 + 1] = 1.0;
    return Tensor({channels, channels, 3, 3, 3}, std::move(k), true);
}

/// Concat followed by a single 3x3x3 convolution baseline.
inline VoxelGrid fuse_conv3d(const VoxelGrid& v_cam, const VoxelGrid& v_pts,
                             const Tensor& kernel) {
    VoxelGrid stacked = fuse_concat(v_cam, v_pts);
    Tensor out = conv3d(stacked.features, kernel);
    GridSpec spec = stacked.spec;
    spec.channels = kernel.dim(0);
    return VoxelGrid(spec, std::move(out));
}

}  // namespace voxfuse
