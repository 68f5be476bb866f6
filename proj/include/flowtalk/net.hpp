#pragma once

// Dual-branch transformer producing paired audio/visual vector fields. Both
// branches run the same depth of fusion blocks (four selectable coupling
// strategies), then split into per-modality refinement blocks and linear
// output heads. Timestep conditioning enters through adaptive layer norms;
// temporal structure enters through rotary positions (plus a depthwise
// convolution over the joint sequence in the joint-attention strategy).

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "flowtalk/mat.hpp"
#include "flowtalk/text.hpp"

namespace flowtalk::net {

enum class FusionStrategy { Add, Linear, CrossAttention, MMAttention };

const char* fusion_strategy_name(FusionStrategy s);
FusionStrategy parse_fusion_strategy(const std::string& name);

struct NetConfig {
    int d_model = 64;
    int n_heads = 4;
    int ffn_dim = 128;
    int n_fusion_blocks = 2;
    int n_branch_blocks = 1;
    int n_text_blocks = 2;
    FusionStrategy fusion_strategy = FusionStrategy::MMAttention;
    int vocab_size = 97;
    int mel_dim = 100;     // F
    int visual_dim = 61;
    bool share_branches = false;  // audio/visual branches reuse one weight set
    int conv_pe_kernel = 31;      // depthwise positional conv in joint attention
    int text_conv_kernel = 7;     // depthwise conv inside text encoder blocks
    int time_freq_dim = 256;      // sinusoidal features for the timestep

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
    bool operator==(const NetConfig&) const = default;

    // full-scale configuration from the reference system; desk runs use the
    // defaults above
    static NetConfig reference();
};

struct ModelParams {
    NetConfig cfg;
    // creation-ordered named tensors; order is the checkpoint and optimizer
    // state contract
    std::vector<std::pair<std::string, MatF>> tensors;

    int64_t total_parameters() const;
    const MatF& at(const std::string& name) const;
    MatF& at(const std::string& name);
    bool has(const std::string& name) const;
    size_t index_of(const std::string& name) const;  // throws if absent
};

// Deterministic initialization; modulation weights and output heads start at
// zero so every block begins as an identity map.
ModelParams init_params(const NetConfig& cfg, uint64_t seed);

// Closed-form parameter count for a config; init_params agrees with it.
int64_t param_count(const NetConfig& cfg);

struct ForwardInput {
    MatF noisy_audio;     // N x F
    MatF noisy_visual;    // N x 61
    MatF context_audio;   // N x F, masked-out reference frames
    MatF context_visual;  // N x 61
    features::TokenSequence tokens;
    double t = 0.0;       // flow time in [0, 1]
    bool drop_mel = false;
    bool drop_visual = false;
    bool drop_text = false;

    Eigen::Index frames() const { return noisy_audio.rows(); }
    void validate(const NetConfig& cfg) const;
};

struct VectorFieldPair {
    MatF v_audio;   // N x F
    MatF v_visual;  // N x 61
};

// Inference-path evaluations of the individual stages (float precision).
MatF embed_text(const features::TokenSequence& tokens, const ModelParams& params);
MatF embed_audio(const MatF& noisy, const MatF& context, const ModelParams& params);
MatF embed_visual(const MatF& noisy, const MatF& context, const ModelParams& params);
MatF timestep_embed(double t, const ModelParams& params);  // 1 x d_model

// Rotary rotation applied per head block of q and k (N x d_model each).
void apply_rotary(MatF& q, MatF& k, int n_heads, const std::vector<double>& positions);

// Rotary positions for the text stream: non-filler tokens are stretched to
// cover the frame axis, so token j sits at j * N / (non-filler count).
std::vector<double> text_positions(const features::TokenSequence& tokens);

VectorFieldPair forward(const ForwardInput& input, const ModelParams& params);

// ---- checkpoint file ----

struct Checkpoint {
    ModelParams params;
    std::vector<std::pair<std::string, MatF>> extras;  // optimizer state etc.
};

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const std::vector<std::pair<std::string, MatF>>& extras = {});
Checkpoint load_checkpoint(const std::string& path);

}  // namespace flowtalk::net
