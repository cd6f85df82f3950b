#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nn.hpp"
#include "random.hpp"
#include "tensor.hpp"
#include "voxel.hpp"

namespace voxfuse {

enum class Region { USA, Singapore, Other };

inline const char* region_name(Region r) {
    switch (r) {
        case Region::USA: return "the USA";
        case Region::Singapore: return "Singapore";
        default: return "an unspecified region";
    }
}

/// Structured instance prompt: the class vocabulary to anchor, the driving
/// region, and whether this is the generic frame-0 template or a recursive
/// one restricted to previously predicted classes.
struct PromptSpec {
    std::vector<std::string> class_names;
    Region region = Region::Other;
    int template_id = 0;  // 0 = generic, 1 = recursive
    std::vector<std::string> free_slots;

    void validate() const {
        if (class_names.empty()) throw ValueError("PromptSpec: at least one class name required");
    }

    /// Canonical single-string form (also the embedding-table lookup key).
    std::string text() const {
        validate();
        std::string head = template_id == 0
                               ? "a driving scene in " + std::string(region_name(region)) +
                                     " that may contain "
                               : "a driving scene in " + std::string(region_name(region)) +
                                     " currently containing ";
        std::string body;
        for (std::size_t i = 0; i < class_names.size(); ++i) {
            if (i) body += ", ";
            body += class_names[i];
        }
        std::string tail;
        for (const auto& s : free_slots) tail += "; " + s;
        return head + body + tail;
    }

    /// One token string per class; these feed the cross-attention as K/V
    /// sources so each class contributes its own embedding.
    std::vector<std::string> token_texts() const {
        validate();
        std::vector<std::string> tokens;
        tokens.reserve(class_names.size());
        for (const auto& c : class_names)
            tokens.push_back("a " + c + " seen while driving in " + region_name(region));
        return tokens;
    }

    bool operator==(const PromptSpec& o) const {
        return class_names == o.class_names && region == o.region &&
               template_id == o.template_id && free_slots == o.free_slots;
    }
};

/// Generic template at t=0, recursive class-restricted template afterwards.
/// Class names are sorted and deduplicated, so equal sets give equal prompts.
inline PromptSpec build_instance_prompt(const std::vector<std::string>& classes_present,
                                        Region region, std::size_t frame_index) {
    PromptSpec p;
    p.class_names = classes_present;
    std::sort(p.class_names.begin(), p.class_names.end());
    p.class_names.erase(std::unique(p.class_names.begin(), p.class_names.end()),
                        p.class_names.end());
    p.region = region;
    p.template_id = frame_index == 0 ? 0 : 1;
    p.validate();
    return p;
}

/// Unit-norm text embedding plus the hash of the prompt that produced it.
struct TextEmbedding {
    Tensor vector;  // [E]
    std::uint64_t prompt_hash = 0;
};

/// Prompt -> embedding table loaded from JSON (see io.hpp for the loader).
struct EmbeddingTable {
    std::size_t dim = 0;
    std::map<std::string, std::vector<double>> entries;
};

/// Deterministic stand-in for a CLIP text encoder: a seeded hash of the
/// normalized prompt expands into an E-dim pseudo-random unit vector. When a
/// table is attached, prompts are looked up there instead (exact text match).
struct TextEncoder {
    std::size_t dim = 512;
    std::uint64_t seed = 0x0c11bULL;
    std::optional<EmbeddingTable> table;

    static std::string normalize(const std::string& text) {
        std::string out;
        bool pending_space = false;
        for (char ch : text) {
            if (std::isspace(static_cast<unsigned char>(ch))) {
                pending_space = !out.empty();
                continue;
            }
            if (pending_space) {
                out += ' ';
                pending_space = false;
            }
            out += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        }
        return out;
    }

    TextEmbedding encode(const std::string& text) const {
        std::string norm = normalize(text);
        std::uint64_t h = fnv1a(norm);
        if (table) {
            auto it = table->entries.find(text);
            if (it == table->entries.end())
                throw LookupError("embedding table has no entry for prompt: " + text);
            Tensor v({it->second.size()}, it->second);
            return {l2_normalize(v, 0), h};
        }
        DetRng rng(mix_seed(seed, h));
        std::vector<double> v(dim);
        for (auto& x : v) x = rng.normal();
        Tensor raw({dim}, std::move(v));
        return {l2_normalize(raw, 0), h};
    }

    TextEmbedding encode(const PromptSpec& prompt) const { return encode(prompt.text()); }

    /// Stack token embeddings into a [T x E] matrix.
    Tensor encode_tokens(const std::vector<std::string>& tokens) const {
        if (tokens.empty()) throw ValueError("encode_tokens: empty token list");
        std::size_t e = table ? table->dim : dim;
        std::vector<double> data;
        data.reserve(tokens.size() * e);
        for (const auto& t : tokens) {
            TextEmbedding emb = encode(t);
            if (emb.vector.size() != e) throw ShapeError("encode_tokens: inconsistent dims");
            data.insert(data.end(), emb.vector.data().begin(), emb.vector.data().end());
        }
        return Tensor({tokens.size(), e}, std::move(data));
    }
};

/// Low-rank adapter around a frozen base projection: y = W x + (alpha/r) B A x.
/// Only A and B train; W never receives gradient.
struct LoRAAdapter {
    Tensor base;  // [E_out x E_in], frozen
    Tensor a;     // [r x E_in]
    Tensor b;     // [E_out x r]
    double alpha = 1.0;

    std::size_t rank() const { return a.dim(0); }

    void validate() const {
        std::size_t e_out = base.dim(0), e_in = base.dim(1), r = a.dim(0);
        if (r < 1 || r > std::min(e_in, e_out))
            throw ShapeError("LoRAAdapter: rank must satisfy 1 <= r <= min(E_in, E_out)");
        if (a.dim(1) != e_in || b.dim(0) != e_out || b.dim(1) != r)
            throw ShapeError("LoRAAdapter: inconsistent factor shapes");
        if (base.requires_grad()) throw ValueError("LoRAAdapter: base weight must be frozen");
    }

    /// Frozen identity base with random A. b_scale 0 gives the exact-identity
    /// zero-init adapter; a small b_scale keeps the start near identity while
    /// letting gradient reach A from the first step.
    static LoRAAdapter identity(std::size_t dim, std::size_t rank, double alpha, DetRng& rng,
                                double b_scale = 0.0) {
        std::vector<double> eye(dim * dim, 0.0);
        for (std::size_t i = 0; i < dim; ++i) eye[i * dim + i] = 1.0;
        std::vector<double> a_data(rank * dim);
        double s = 1.0 / std::sqrt(static_cast<double>(dim));
        for (auto& v : a_data) v = rng.normal() * s;
        std::vector<double> b_data(dim * rank, 0.0);
        if (b_scale != 0.0)
            for (auto& v : b_data) v = rng.normal() * b_scale;
        LoRAAdapter ad;
        ad.base = Tensor({dim, dim}, std::move(eye), false);
        ad.a = Tensor({rank, dim}, std::move(a_data), true);
        ad.b = Tensor({dim, rank}, std::move(b_data), true);
        ad.alpha = alpha;
        return ad;
    }

    std::vector<Tensor> parameters() const { return {a, b}; }
};

/// Apply the adapter to rows of x: [T x E_in] -> [T x E_out].
/// A 1-d input is treated as a single row and returned 1-d.
inline Tensor lora_project(const Tensor& x, const LoRAAdapter& adapter) {
    adapter.validate();
    bool vector_input = x.ndim() == 1;
    Tensor rows = vector_input ? reshape(x, {1, x.dim(0)}) : x;
    if (rows.ndim() != 2 || rows.dim(1) != adapter.base.dim(1))
        throw ShapeError("lora_project: input width != adapter E_in");
    Tensor frozen = matmul(rows, transpose(adapter.base));
    Tensor low = matmul(matmul(rows, transpose(adapter.a)), transpose(adapter.b));
    double s = adapter.alpha / static_cast<double>(adapter.rank());
    Tensor y = add(frozen, scale(low, s));
    return vector_input ? reshape(y, {y.dim(1)}) : y;
}

/// Per-voxel scalar relevance gate: linear [C -> 1] + sigmoid.
struct GateHead {
    LinearLayer proj;

    GateHead() = default;
    GateHead(std::size_t channels, DetRng& rng) : proj(1, channels, rng) {}

    /// x: [V x C] -> gate values [V x 1], each strictly inside (0,1).
    Tensor apply(const Tensor& x) const { return sigmoid(proj.apply(x)); }

    std::vector<Tensor> parameters() const { return proj.parameters(); }
};

/// Flatten a voxel volume into a [num_voxels x C] token matrix and back.
inline Tensor voxels_to_tokens(const VoxelGrid& grid) {
    return transpose(reshape(grid.features, {grid.spec.channels, grid.spec.num_voxels()}));
}

inline VoxelGrid tokens_to_voxels(const Tensor& tokens, const GridSpec& spec) {
    Tensor feat = reshape(transpose(tokens), {spec.channels, spec.nx, spec.ny, spec.nz});
    return VoxelGrid(spec, std::move(feat));
}

/// Projection weights of one gated cross-attention block. Query/key/value
/// maps are bias-free; the gate carries its own bias.
struct InstVLMAttention {
    Tensor w_query;  // [d_k x C]
    Tensor w_key;    // [d_k x E]
    Tensor w_value;  // [C x E]
    GateHead gate;

    InstVLMAttention() = default;

    InstVLMAttention(std::size_t channels, std::size_t embed_dim, std::size_t d_k, DetRng& rng)
        : gate(channels, rng) {
        auto init = [&rng](std::size_t rows, std::size_t cols) {
            std::vector<double> w(rows * cols);
            double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
            for (auto& v : w) v = rng.uniform(-bound, bound);
            return Tensor({rows, cols}, std::move(w), true);
        };
        w_query = init(d_k, channels);
        w_key = init(d_k, embed_dim);
        w_value = init(channels, embed_dim);
    }

    std::size_t key_dim() const { return w_query.dim(0); }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> p{w_query, w_key, w_value};
        for (auto& t : gate.parameters()) p.push_back(t);
        return p;
    }
};

/// Gated cross-attention from voxel queries onto text tokens:
/// out = Attn(Q_V, K, V_text) * Gate(V) + V, with the gate a per-voxel scalar
/// broadcast over channels. The residual keeps the map an identity wherever
/// the gate closes.
inline VoxelGrid gated_cross_attention(const VoxelGrid& grid, const Tensor& text_keys,
                                       const Tensor& text_vals, const InstVLMAttention& params) {
    if (text_keys.ndim() != 2 || text_vals.ndim() != 2)
        throw ShapeError("gated_cross_attention: token tensors must be [T x E]");
    if (text_keys.dim(0) == 0) throw ValueError("gated_cross_attention: empty token list");
    if (text_keys.dim(0) != text_vals.dim(0))
        throw ShapeError("gated_cross_attention: key/value token counts differ");
    if (params.w_query.dim(1) != grid.spec.channels)
        throw ShapeError("gated_cross_attention: query projection does not match grid channels");
    if (params.w_key.dim(1) != text_keys.dim(1) || params.w_value.dim(1) != text_vals.dim(1))
        throw ShapeError("gated_cross_attention: token width does not match projections");

    Tensor x = voxels_to_tokens(grid);                         // [V x C]
    Tensor q = matmul(x, transpose(params.w_query));           // [V x d_k]
    Tensor k = matmul(text_keys, transpose(params.w_key));     // [T x d_k]
    Tensor v = matmul(text_vals, transpose(params.w_value));   // [T x C]
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(params.key_dim()));
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt);  // [V x T]
    Tensor attn = softmax(scores, 1);
    Tensor injected = matmul(attn, v);                         // [V x C]
    Tensor gate = params.gate.apply(x);                        // [V x 1]
    Tensor out = add(scale_rows(injected, gate), x);
    return tokens_to_voxels(out, grid.spec);
}

}  // namespace voxfuse
