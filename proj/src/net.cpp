#include "flowtalk/net.hpp"

#include <cstring>

#include "flowtalk/io.hpp"
#include "flowtalk/net_graph.hpp"
#include "flowtalk/rope.hpp"

namespace flowtalk::net {

const char* fusion_strategy_name(FusionStrategy s) {
    switch (s) {
        case FusionStrategy::Add: return "add";
        case FusionStrategy::Linear: return "linear";
        case FusionStrategy::CrossAttention: return "cross_attention";
        case FusionStrategy::MMAttention: return "mm_attention";
    }
    throw ValidationError("unknown fusion strategy value");
}

FusionStrategy parse_fusion_strategy(const std::string& name) {
    if (name == "add") return FusionStrategy::Add;
    if (name == "linear") return FusionStrategy::Linear;
    if (name == "cross_attention") return FusionStrategy::CrossAttention;
    if (name == "mm_attention") return FusionStrategy::MMAttention;
    throw ValidationError(strf("unknown fusion strategy '%s' (expected add, linear, "
                               "cross_attention, or mm_attention)",
                               name.c_str()));
}

void NetConfig::validate() const {
    if (d_model <= 0 || n_heads <= 0) throw ValidationError("d_model and n_heads must be positive");
    if (d_model % n_heads != 0)
        throw ValidationError(strf("d_model %d not divisible by n_heads %d", d_model, n_heads));
    if ((d_model / n_heads) % 2 != 0)
        throw ValidationError(strf("head dimension %d must be even for rotary pairing",
                                   d_model / n_heads));
    if (ffn_dim <= 0) throw ValidationError("ffn_dim must be positive");
    if (n_fusion_blocks < 1 || n_branch_blocks < 1 || n_text_blocks < 1)
        throw ValidationError("block counts must be at least 1");
    if (vocab_size < 2) throw ValidationError("vocab_size must be at least 2");
    if (mel_dim < 1 || visual_dim < 1)
        throw ValidationError("feature widths must be positive");
    if (conv_pe_kernel < 1 || conv_pe_kernel % 2 == 0)
        throw ValidationError("conv_pe_kernel must be odd and positive");
    if (text_conv_kernel < 1 || text_conv_kernel % 2 == 0)
        throw ValidationError("text_conv_kernel must be odd and positive");
    if (time_freq_dim < 4 || time_freq_dim % 2 != 0)
        throw ValidationError("time_freq_dim must be even and at least 4");
}

NetConfig NetConfig::reference() {
    NetConfig c;
    c.d_model = 1024;
    c.n_heads = 16;
    c.ffn_dim = 2048;
    c.n_fusion_blocks = 22;
    c.n_branch_blocks = 4;
    c.n_text_blocks = 4;
    c.fusion_strategy = FusionStrategy::MMAttention;
    return c;
}

int64_t ModelParams::total_parameters() const {
    int64_t n = 0;
    for (const auto& [name, m] : tensors) n += int64_t(m.size());
    return n;
}

size_t ModelParams::index_of(const std::string& name) const {
    for (size_t i = 0; i < tensors.size(); ++i)
        if (tensors[i].first == name) return i;
    throw ValidationError(strf("model has no tensor named '%s'", name.c_str()));
}

bool ModelParams::has(const std::string& name) const {
    for (const auto& [n, m] : tensors)
        if (n == name) return true;
    return false;
}

const MatF& ModelParams::at(const std::string& name) const { return tensors[index_of(name)].second; }
MatF& ModelParams::at(const std::string& name) { return tensors[index_of(name)].second; }

namespace {

// Gauss: N(0, 0.02^2), for nulls/conv kernels; Unit: N(0, 1); Align: all ones,
// for attention query/key biases — a shared q/k direction makes the rotary
// logits start as a position-matching kernel (peak sum(cos(theta_i * dp)) at
// matched positions), so cross-stream attention begins aligned and content
// terms only have to differentiate it.
enum class Init { Zero, Xavier, Gauss, Unit, Align };

struct TensorSpec {
    std::string name;
    Eigen::Index rows, cols;
    Init init;
};

// Creation order here is the checkpoint and optimizer-state contract: tensors
// are stored and updated in exactly this sequence.
std::vector<TensorSpec> inventory(const NetConfig& cfg) {
    const Eigen::Index d = cfg.d_model, f = cfg.ffn_dim, F = cfg.mel_dim, V = cfg.visual_dim;
    std::vector<TensorSpec> specs;
    auto add = [&](std::string name, Eigen::Index r, Eigen::Index c, Init k) {
        specs.push_back({std::move(name), r, c, k});
    };

    // unit scale so character identity is not drowned out by the additive
    // sinusoidal position embedding (rms ~0.7) before the text stream is
    // layer-normed
    add("text.table", cfg.vocab_size, d, Init::Unit);
    for (int b = 0; b < cfg.n_text_blocks; ++b) {
        const std::string pre = strf("text.block%d.", b);
        add(pre + "dw", d, cfg.text_conv_kernel, Init::Gauss);
        add(pre + "w1", d, 2 * d, Init::Xavier);
        add(pre + "b1", 1, 2 * d, Init::Zero);
        add(pre + "w2", 2 * d, d, Init::Xavier);
        add(pre + "b2", 1, d, Init::Zero);
    }

    add("audio.in.w", 2 * F, d, Init::Xavier);
    add("audio.in.b", 1, d, Init::Zero);
    add("visual.in.w", 2 * V, d, Init::Xavier);
    add("visual.in.b", 1, d, Init::Zero);

    add("null.mel_ctx", 1, F, Init::Gauss);
    add("null.visual_ctx", 1, V, Init::Gauss);
    add("null.text", 1, d, Init::Gauss);

    add("time.w1", cfg.time_freq_dim, d, Init::Xavier);
    add("time.b1", 1, d, Init::Zero);
    add("time.w2", d, d, Init::Xavier);
    add("time.b2", 1, d, Init::Zero);

    auto add_ada = [&](const std::string& pre) {
        add(pre + "ada.w", d, 6 * d, Init::Zero);
        add(pre + "ada.b", 1, 6 * d, Init::Zero);
    };
    auto add_self_attn = [&](const std::string& pre) {
        for (const char* w : {"wq", "wk", "wv", "wo"}) add(pre + "attn." + w, d, d, Init::Xavier);
        add(pre + "attn.bq", 1, d, Init::Align);
        add(pre + "attn.bk", 1, d, Init::Align);
        add(pre + "attn.bv", 1, d, Init::Zero);
        add(pre + "attn.bo", 1, d, Init::Zero);
    };
    auto add_ffn = [&](const std::string& pre) {
        add(pre + "ffn.w1", d, f, Init::Xavier);
        add(pre + "ffn.b1", 1, f, Init::Zero);
        add(pre + "ffn.w2", f, d, Init::Xavier);
        add(pre + "ffn.b2", 1, d, Init::Zero);
    };

    const std::vector<std::string> branch2 =
        cfg.share_branches ? std::vector<std::string>{"a"} : std::vector<std::string>{"a", "v"};

    for (int i = 0; i < cfg.n_fusion_blocks; ++i) {
        const std::string stem = strf("fusion%d.", i);
        switch (cfg.fusion_strategy) {
            case FusionStrategy::Add:
            case FusionStrategy::CrossAttention:
                for (const auto& s : branch2) {
                    add_ada(stem + s + ".");
                    add_self_attn(stem + s + ".");
                    add_ffn(stem + s + ".");
                }
                break;
            case FusionStrategy::Linear:
                for (const auto& s : branch2) {
                    add_ada(stem + s + ".");
                    add(stem + s + ".mix.self", d, d, Init::Xavier);
                    add(stem + s + ".mix.cross", d, d, Init::Xavier);
                    add(stem + s + ".mix.b", 1, d, Init::Zero);
                    add_ffn(stem + s + ".");
                }
                break;
            case FusionStrategy::MMAttention: {
                add(stem + "pe.dw", d, cfg.conv_pe_kernel, Init::Gauss);
                for (const char* w : {"wq", "wk", "wv"}) add(stem + "joint." + w, d, d, Init::Xavier);
                add(stem + "joint.bq", 1, d, Init::Align);
                add(stem + "joint.bk", 1, d, Init::Align);
                add(stem + "joint.bv", 1, d, Init::Zero);
                // the text stream always owns its weights; the share flag only
                // merges the visual branch into the audio one
                std::vector<std::string> streams = branch2;
                streams.insert(streams.begin() + 1, "t");
                for (const auto& s : streams) {
                    add_ada(stem + s + ".");
                    add(stem + s + ".attn.wo", d, d, Init::Xavier);
                    add(stem + s + ".attn.bo", 1, d, Init::Zero);
                    add_ffn(stem + s + ".");
                }
                break;
            }
        }
    }

    for (int j = 0; j < cfg.n_branch_blocks; ++j)
        for (const auto& s : branch2) {
            const std::string pre = strf("branch%d.", j) + s + ".";
            add_ada(pre);
            add_self_attn(pre);
            add_ffn(pre);
        }

    for (const char* br : {"audio", "visual"}) {
        add(std::string("final.") + br + ".ada.w", d, 2 * d, Init::Zero);
        add(std::string("final.") + br + ".ada.b", 1, 2 * d, Init::Zero);
    }
    add("head.audio.w", d, F, Init::Zero);
    add("head.audio.b", 1, F, Init::Zero);
    add("head.visual.w", d, V, Init::Zero);
    add("head.visual.b", 1, V, Init::Zero);
    return specs;
}

}  // namespace

ModelParams init_params(const NetConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    Rng rng(mix_seed(seed, fnv1a64("net.init", 8)));
    for (const TensorSpec& spec : inventory(cfg)) {
        MatF m(spec.rows, spec.cols);
        switch (spec.init) {
            case Init::Zero: m.setZero(); break;
            case Init::Xavier: {
                const double limit = std::sqrt(6.0 / double(spec.rows + spec.cols));
                for (Eigen::Index r = 0; r < m.rows(); ++r)
                    for (Eigen::Index c = 0; c < m.cols(); ++c)
                        m(r, c) = float(rng.uniform(-limit, limit));
                break;
            }
            case Init::Gauss:
                for (Eigen::Index r = 0; r < m.rows(); ++r)
                    for (Eigen::Index c = 0; c < m.cols(); ++c)
                        m(r, c) = float(rng.normal() * 0.02);
                break;
            case Init::Unit:
                for (Eigen::Index r = 0; r < m.rows(); ++r)
                    for (Eigen::Index c = 0; c < m.cols(); ++c)
                        m(r, c) = float(rng.normal());
                break;
            case Init::Align: m.setOnes(); break;
        }
        p.tensors.emplace_back(spec.name, std::move(m));
    }
    return p;
}

int64_t param_count(const NetConfig& cfg) {
    cfg.validate();
    const int64_t d = cfg.d_model, f = cfg.ffn_dim, F = cfg.mel_dim, V = cfg.visual_dim;
    const int64_t ada = 6 * d * d + 6 * d;
    const int64_t self_attn = 4 * d * d + 4 * d;
    const int64_t ffn = 2 * d * f + f + d;
    const int64_t n2 = cfg.share_branches ? 1 : 2;  // audio/visual weight sets

    int64_t n = 0;
    n += int64_t(cfg.vocab_size) * d;                                       // text table
    n += int64_t(cfg.n_text_blocks) * (d * cfg.text_conv_kernel + 4 * d * d + 3 * d);
    n += (2 * F * d + d) + (2 * V * d + d);                                 // input projections
    n += F + V + d;                                                         // null rows
    n += int64_t(cfg.time_freq_dim) * d + d * d + 2 * d;                    // timestep map

    int64_t per_fusion = 0;
    switch (cfg.fusion_strategy) {
        case FusionStrategy::Add:
        case FusionStrategy::CrossAttention:
            per_fusion = n2 * (ada + self_attn + ffn);
            break;
        case FusionStrategy::Linear:
            per_fusion = n2 * (ada + 2 * d * d + d + ffn);
            break;
        case FusionStrategy::MMAttention:
            per_fusion = d * cfg.conv_pe_kernel + 3 * (d * d + d) +
                         (n2 + 1) * (ada + (d * d + d) + ffn);
            break;
    }
    n += int64_t(cfg.n_fusion_blocks) * per_fusion;
    n += int64_t(cfg.n_branch_blocks) * n2 * (ada + self_attn + ffn);
    n += 2 * (2 * d * d + 2 * d);                                           // final modulations
    n += d * F + F + d * V + V;                                             // output heads
    return n;
}

void ForwardInput::validate(const NetConfig& cfg) const {
    const Eigen::Index n = noisy_audio.rows();
    if (n < 1) throw ValidationError("forward input must have at least one frame");
    auto expect = [&](const MatF& m, const char* what, Eigen::Index cols) {
        if (m.rows() != n || m.cols() != cols)
            throw ValidationError(strf("%s must be %ld x %ld, got %ld x %ld", what, long(n),
                                       long(cols), long(m.rows()), long(m.cols())));
        if (!m.allFinite()) throw ValidationError(strf("%s contains non-finite values", what));
    };
    expect(noisy_audio, "noisy_audio", cfg.mel_dim);
    expect(noisy_visual, "noisy_visual", cfg.visual_dim);
    expect(context_audio, "context_audio", cfg.mel_dim);
    expect(context_visual, "context_visual", cfg.visual_dim);
    if (!(drop_text && tokens.ids.empty())) {
        if (Eigen::Index(tokens.ids.size()) != n)
            throw ValidationError(strf("token sequence length %zu must match the %ld frames",
                                       tokens.ids.size(), long(n)));
        if (tokens.vocab_size != cfg.vocab_size)
            throw ValidationError(strf("token vocabulary %d does not match the model's %d",
                                       tokens.vocab_size, cfg.vocab_size));
    }
    if (!(t >= 0.0 && t <= 1.0)) throw ValidationError(strf("flow time %g outside [0, 1]", t));
}

std::vector<double> text_positions(const features::TokenSequence& tokens) {
    const size_t n = tokens.ids.size();
    size_t content = 0;
    for (int id : tokens.ids)
        if (id != tokens.filler_id) ++content;
    std::vector<double> pos(n);
    for (size_t j = 0; j < n; ++j)
        // stretch content tokens across the frame axis so attention sees a
        // near-zero relative offset for aligned text/audio pairs; an all-filler
        // sequence falls back to unit spacing
        pos[j] = content == 0 ? double(j) : double(j) * double(n) / double(content);
    return pos;
}

void apply_rotary(MatF& q, MatF& k, int n_heads, const std::vector<double>& positions) {
    if (q.cols() != k.cols()) throw ValidationError("rotary: q and k widths differ");
    if (n_heads < 1 || q.cols() % n_heads != 0)
        throw ValidationError("rotary: width not divisible by head count");
    const Eigen::Index dh = q.cols() / n_heads;
    for (int h = 0; h < n_heads; ++h) {
        MatF qb = q.middleCols(Eigen::Index(h) * dh, dh);
        rope_rotate_inplace(qb, positions, kRopeBase);
        q.middleCols(Eigen::Index(h) * dh, dh) = qb;
        MatF kb = k.middleCols(Eigen::Index(h) * dh, dh);
        rope_rotate_inplace(kb, positions, kRopeBase);
        k.middleCols(Eigen::Index(h) * dh, dh) = kb;
    }
}

// ---- float inference wrappers over the templated graph ----

MatF embed_text(const features::TokenSequence& tokens, const ModelParams& params) {
    ad::Tape<float> tape;
    auto g = GraphBuilder<float>::attach(tape, params, false);
    return g.embed_text(tokens, ForwardDebug{}).val();
}

MatF embed_audio(const MatF& noisy, const MatF& context, const ModelParams& params) {
    ad::Tape<float> tape;
    auto g = GraphBuilder<float>::attach(tape, params, false);
    return g.embed_audio(g.leaf(noisy), g.leaf(context)).val();
}

MatF embed_visual(const MatF& noisy, const MatF& context, const ModelParams& params) {
    ad::Tape<float> tape;
    auto g = GraphBuilder<float>::attach(tape, params, false);
    return g.embed_visual(g.leaf(noisy), g.leaf(context)).val();
}

MatF timestep_embed(double t, const ModelParams& params) {
    ad::Tape<float> tape;
    auto g = GraphBuilder<float>::attach(tape, params, false);
    return g.timestep_embed(t).val();
}

VectorFieldPair forward(const ForwardInput& input, const ModelParams& params) {
    ad::Tape<float> tape;
    auto g = GraphBuilder<float>::attach(tape, params, false);
    auto [va, vv] = g.forward(input);
    return {va.val(), vv.val()};
}

// ---- checkpoint file ----

namespace {

constexpr uint32_t kCheckpointVersion = 1;

void write_config(io::ByteWriter& w, const NetConfig& cfg) {
    w.u32(uint32_t(cfg.d_model));
    w.u32(uint32_t(cfg.n_heads));
    w.u32(uint32_t(cfg.ffn_dim));
    w.u32(uint32_t(cfg.n_fusion_blocks));
    w.u32(uint32_t(cfg.n_branch_blocks));
    w.u32(uint32_t(cfg.n_text_blocks));
    w.u32(uint32_t(cfg.fusion_strategy));
    w.u32(uint32_t(cfg.vocab_size));
    w.u32(uint32_t(cfg.mel_dim));
    w.u32(uint32_t(cfg.visual_dim));
    w.u8(cfg.share_branches ? 1 : 0);
    w.u32(uint32_t(cfg.conv_pe_kernel));
    w.u32(uint32_t(cfg.text_conv_kernel));
    w.u32(uint32_t(cfg.time_freq_dim));
}

NetConfig read_config(io::ByteReader& r) {
    NetConfig cfg;
    cfg.d_model = int(r.u32());
    cfg.n_heads = int(r.u32());
    cfg.ffn_dim = int(r.u32());
    cfg.n_fusion_blocks = int(r.u32());
    cfg.n_branch_blocks = int(r.u32());
    cfg.n_text_blocks = int(r.u32());
    const uint32_t strategy = r.u32();
    if (strategy > uint32_t(FusionStrategy::MMAttention))
        throw IoError(strf("checkpoint: invalid fusion strategy code %u", strategy));
    cfg.fusion_strategy = FusionStrategy(strategy);
    cfg.vocab_size = int(r.u32());
    cfg.mel_dim = int(r.u32());
    cfg.visual_dim = int(r.u32());
    cfg.share_branches = r.u8() != 0;
    cfg.conv_pe_kernel = int(r.u32());
    cfg.text_conv_kernel = int(r.u32());
    cfg.time_freq_dim = int(r.u32());
    return cfg;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const std::vector<std::pair<std::string, MatF>>& extras) {
    io::ByteWriter w;
    w.bytes("FTCK", 4);
    w.u32(kCheckpointVersion);
    write_config(w, params.cfg);
    w.u32(uint32_t(params.tensors.size() + extras.size()));
    auto write_tensor = [&](const std::string& name, const MatF& m) {
        w.str(name);
        w.u32(2);  // rank; all tensors here are matrices (rows x cols)
        w.u32(uint32_t(m.rows()));
        w.u32(uint32_t(m.cols()));
        w.f32mat(m);
    };
    for (const auto& [name, m] : params.tensors) write_tensor(name, m);
    for (const auto& [name, m] : extras) write_tensor(name, m);
    io::spew(path, w.data());
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::vector<uint8_t> bytes = io::slurp(path);
    io::ByteReader r(bytes, path);
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, "FTCK", 4) != 0)
        throw IoError(strf("%s: not a checkpoint file (bad magic)", path.c_str()));
    const uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw IoError(strf("%s: unsupported checkpoint version %u", path.c_str(), version));

    Checkpoint ck;
    ck.params.cfg = read_config(r);
    ck.params.cfg.validate();

    const uint32_t count = r.u32();
    std::vector<std::pair<std::string, MatF>> loaded;
    loaded.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        const uint32_t rank = r.u32();
        if (rank != 2)
            throw IoError(strf("%s: tensor '%s' has unsupported rank %u", path.c_str(),
                               name.c_str(), rank));
        const uint32_t rows = r.u32(), cols = r.u32();
        if (rows == 0 || cols == 0 || uint64_t(rows) * cols > (1u << 30))
            throw IoError(strf("%s: tensor '%s' has implausible shape %u x %u", path.c_str(),
                               name.c_str(), rows, cols));
        loaded.emplace_back(std::move(name), r.f32mat(int(rows), int(cols)));
    }
    if (r.remaining() != 0)
        throw IoError(strf("%s: %zu trailing bytes after last tensor", path.c_str(), r.remaining()));

    // split model tensors (validated against the config's inventory) from extras
    const std::vector<TensorSpec> specs = inventory(ck.params.cfg);
    ck.params.tensors.reserve(specs.size());
    for (const TensorSpec& spec : specs) {
        bool found = false;
        for (auto& [name, m] : loaded) {
            if (name != spec.name) continue;
            if (m.rows() != spec.rows || m.cols() != spec.cols)
                throw IoError(strf("%s: tensor '%s' is %ld x %ld, expected %ld x %ld",
                                   path.c_str(), name.c_str(), long(m.rows()), long(m.cols()),
                                   long(spec.rows), long(spec.cols)));
            if (!m.allFinite())
                throw IoError(strf("%s: tensor '%s' contains non-finite values", path.c_str(),
                                   name.c_str()));
            ck.params.tensors.emplace_back(spec.name, std::move(m));
            name.clear();  // consumed
            found = true;
            break;
        }
        if (!found)
            throw IoError(strf("%s: missing tensor '%s'", path.c_str(), spec.name.c_str()));
    }
    for (auto& [name, m] : loaded)
        if (!name.empty()) ck.extras.emplace_back(std::move(name), std::move(m));
    return ck;
}

}  // namespace flowtalk::net
