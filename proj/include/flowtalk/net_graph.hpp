#pragma once

// Differentiable assembly of the dual-branch network on an autodiff tape.
// Templated on the scalar so training runs in float while finite-difference
// oracles run the identical graph in double.

#include <cmath>
#include <string>
#include <vector>

#include "flowtalk/net.hpp"
#include "flowtalk/tape.hpp"

namespace flowtalk::net {

// Optional instrumentation and debug switches for a forward pass.
struct ForwardDebug {
    // collect row-stochastic attention weights from every attention call
    ad::AttnProbe* attn_probe = nullptr;
    // suppress rotary rotations and the text encoder's absolute positions,
    // leaving only (possibly zeroed) convolution kernels as order signals
    bool disable_positions = false;
    // visibility mask over the joint [audio | text | visual] sequence of the
    // joint-attention strategy (length 3N); tests use it to cut cross-stream
    // coupling exactly
    const std::vector<uint8_t>* joint_key_mask = nullptr;
};

template <typename S>
struct GraphBuilder {
    ad::Tape<S>* tape = nullptr;
    const ModelParams* params = nullptr;
    const NetConfig* cfg = nullptr;
    std::vector<ad::Var<S>> vars;  // aligned with params->tensors

    static GraphBuilder attach(ad::Tape<S>& tape, const ModelParams& params, bool needs_grad) {
        GraphBuilder g;
        g.tape = &tape;
        g.params = &params;
        g.cfg = &params.cfg;
        g.vars.reserve(params.tensors.size());
        for (const auto& [name, value] : params.tensors)
            g.vars.push_back(tape.leaf(value.template cast<S>(), needs_grad));
        return g;
    }

    ad::Var<S> p(const std::string& name) const { return vars[params->index_of(name)]; }

    ad::Var<S> leaf(const MatF& m) const { return tape->leaf(m.template cast<S>(), false); }

    ad::Var<S> linear(const ad::Var<S>& x, const std::string& w, const std::string& b) const {
        return ad::add_rowvec(ad::matmul(x, p(w)), p(b));
    }

    // 1xC row broadcast to n rows, differentiable into the row parameter
    ad::Var<S> broadcast_row(const ad::Var<S>& row, Eigen::Index n) const {
        return ad::matmul(tape->leaf(MatT<S>::Ones(n, 1), false), row);
    }

    // x * (1 + scale) + shift with 1xd modulation rows
    ad::Var<S> modulate(const ad::Var<S>& x, const ad::Var<S>& shift, const ad::Var<S>& scale) const {
        return ad::add_rowvec(ad::mul_rowvec(x, ad::add_scalar(scale, 1.0)), shift);
    }

    // ---- stages ----

    ad::Var<S> embed_text(const features::TokenSequence& tokens, const ForwardDebug& dbg) const {
        const int d = cfg->d_model;
        for (int id : tokens.ids)
            if (id < 0 || id >= cfg->vocab_size)
                throw ValidationError(strf("text embedding: token id %d outside vocabulary of %d", id,
                                           cfg->vocab_size));
        ad::Var<S> x = ad::embedding(p("text.table"), tokens.ids);
        if (!dbg.disable_positions) {
            const Eigen::Index n = Eigen::Index(tokens.ids.size());
            MatT<S> pe(n, d);
            for (Eigen::Index r = 0; r < n; ++r)
                for (int i = 0; i < d / 2; ++i) {
                    const double freq = std::pow(10000.0, -2.0 * double(i) / double(d));
                    pe(r, 2 * i) = S(std::sin(double(r) * freq));
                    pe(r, 2 * i + 1) = S(std::cos(double(r) * freq));
                }
            x = ad::add(x, tape->leaf(std::move(pe), false));
        }
        for (int b = 0; b < cfg->n_text_blocks; ++b) {
            const std::string pre = strf("text.block%d.", b);
            ad::Var<S> h = ad::dwconv_time(x, p(pre + "dw"));
            h = ad::layer_norm(h);
            h = linear(h, pre + "w1", pre + "b1");
            h = ad::gelu(h);
            h = linear(h, pre + "w2", pre + "b2");
            x = ad::add(x, h);
        }
        return x;
    }

    ad::Var<S> embed_audio(const ad::Var<S>& noisy, const ad::Var<S>& context) const {
        if (noisy.cols() != cfg->mel_dim || context.cols() != cfg->mel_dim)
            throw ValidationError(strf("audio embedding: expected %d features, got %ld/%ld",
                                       cfg->mel_dim, long(noisy.cols()), long(context.cols())));
        return linear(ad::concat_cols<S>({noisy, context}), "audio.in.w", "audio.in.b");
    }

    ad::Var<S> embed_visual(const ad::Var<S>& noisy, const ad::Var<S>& context) const {
        if (noisy.cols() != cfg->visual_dim || context.cols() != cfg->visual_dim)
            throw ValidationError(strf("visual embedding: expected %d features, got %ld/%ld",
                                       cfg->visual_dim, long(noisy.cols()), long(context.cols())));
        return linear(ad::concat_cols<S>({noisy, context}), "visual.in.w", "visual.in.b");
    }

    ad::Var<S> timestep_embed(double t) const {
        if (!(t >= 0.0 && t <= 1.0))
            throw ValidationError(strf("timestep %g outside [0, 1]", t));
        const int fd = cfg->time_freq_dim;
        MatT<S> f(1, fd);
        for (int i = 0; i < fd / 2; ++i) {
            const double omega = std::pow(1000.0, double(i) / double(fd / 2 - 1));
            f(0, 2 * i) = S(std::sin(t * omega));
            f(0, 2 * i + 1) = S(std::cos(t * omega));
        }
        ad::Var<S> h = linear(tape->leaf(std::move(f), false), "time.w1", "time.b1");
        return linear(ad::silu(h), "time.w2", "time.b2");
    }

    // six 1xd modulation rows from the activated timestep embedding
    struct Modulation {
        ad::Var<S> shift1, scale1, gate1, shift2, scale2, gate2;
    };
    Modulation modulation(const std::string& prefix, const ad::Var<S>& t_act) const {
        ad::Var<S> m = linear(t_act, prefix + "ada.w", prefix + "ada.b");
        const int d = cfg->d_model;
        return Modulation{ad::slice_cols(m, 0, d),     ad::slice_cols(m, d, d),
                          ad::slice_cols(m, 2 * d, d), ad::slice_cols(m, 3 * d, d),
                          ad::slice_cols(m, 4 * d, d), ad::slice_cols(m, 5 * d, d)};
    }

    ad::Var<S> attention_sub(const ad::Var<S>& q_in, const ad::Var<S>& kv_in, const std::string& prefix,
                             const std::vector<double>& pos_q, const std::vector<double>& pos_k,
                             const ForwardDebug& dbg, const std::vector<uint8_t>* key_mask) const {
        ad::Var<S> q = linear(q_in, prefix + "wq", prefix + "bq");
        ad::Var<S> k = linear(kv_in, prefix + "wk", prefix + "bk");
        ad::Var<S> v = linear(kv_in, prefix + "wv", prefix + "bv");
        ad::AttnOptions opt;
        opt.n_heads = cfg->n_heads;
        opt.use_rope = !dbg.disable_positions;
        opt.pos_q = pos_q;
        opt.pos_k = pos_k;
        opt.key_mask = key_mask;
        opt.probe = dbg.attn_probe;
        return ad::attention(q, k, v, opt);
    }

    ad::Var<S> ffn_sub(const ad::Var<S>& x, const std::string& prefix) const {
        return linear(ad::gelu(linear(x, prefix + "ffn.w1", prefix + "ffn.b1")), prefix + "ffn.w2",
                      prefix + "ffn.b2");
    }

    struct Streams {
        ad::Var<S> audio, text, visual;
    };

    // branch weight prefix, honoring the shared-branch switch
    std::string branch_name(const std::string& stem, const char* branch) const {
        if (cfg->share_branches && branch[0] == 'v') return stem + "a.";
        return stem + branch + ".";
    }

    Streams fusion_block(int index, const Streams& in, const ad::Var<S>& t_act,
                         const std::vector<double>& pos_frames, const std::vector<double>& pos_text,
                         const ForwardDebug& dbg) const {
        const std::string stem = strf("fusion%d.", index);
        const std::string pa = branch_name(stem, "a");
        const std::string pv = branch_name(stem, "v");
        Streams out = in;

        switch (cfg->fusion_strategy) {
            case FusionStrategy::Add: {
                Modulation ma = modulation(pa, t_act), mv = modulation(pv, t_act);
                ad::Var<S> na = modulate(ad::layer_norm(in.audio), ma.shift1, ma.scale1);
                ad::Var<S> nv = modulate(ad::layer_norm(in.visual), mv.shift1, mv.scale1);
                ad::Var<S> ha = ad::add(
                    in.audio, ad::mul_rowvec(attention_sub(na, na, pa + "attn.", pos_frames,
                                                           pos_frames, dbg, nullptr),
                                             ma.gate1));
                ad::Var<S> hv = ad::add(
                    in.visual, ad::mul_rowvec(attention_sub(nv, nv, pv + "attn.", pos_frames,
                                                            pos_frames, dbg, nullptr),
                                              mv.gate1));
                // cross-branch feature addition
                ad::Var<S> xa = ad::add(ha, hv);
                ad::Var<S> xv = ad::add(hv, ha);
                out.audio = ad::add(
                    xa, ad::mul_rowvec(ffn_sub(modulate(ad::layer_norm(xa), ma.shift2, ma.scale2), pa),
                                       ma.gate2));
                out.visual = ad::add(
                    xv, ad::mul_rowvec(ffn_sub(modulate(ad::layer_norm(xv), mv.shift2, mv.scale2), pv),
                                       mv.gate2));
                break;
            }
            case FusionStrategy::Linear: {
                Modulation ma = modulation(pa, t_act), mv = modulation(pv, t_act);
                ad::Var<S> na = modulate(ad::layer_norm(in.audio), ma.shift1, ma.scale1);
                ad::Var<S> nv = modulate(ad::layer_norm(in.visual), mv.shift1, mv.scale1);
                ad::Var<S> mix_a = ad::add_rowvec(
                    ad::add(ad::matmul(na, p(pa + "mix.self")), ad::matmul(nv, p(pa + "mix.cross"))),
                    p(pa + "mix.b"));
                ad::Var<S> mix_v = ad::add_rowvec(
                    ad::add(ad::matmul(nv, p(pv + "mix.self")), ad::matmul(na, p(pv + "mix.cross"))),
                    p(pv + "mix.b"));
                ad::Var<S> xa = ad::add(in.audio, ad::mul_rowvec(mix_a, ma.gate1));
                ad::Var<S> xv = ad::add(in.visual, ad::mul_rowvec(mix_v, mv.gate1));
                out.audio = ad::add(
                    xa, ad::mul_rowvec(ffn_sub(modulate(ad::layer_norm(xa), ma.shift2, ma.scale2), pa),
                                       ma.gate2));
                out.visual = ad::add(
                    xv, ad::mul_rowvec(ffn_sub(modulate(ad::layer_norm(xv), mv.shift2, mv.scale2), pv),
                                       mv.gate2));
                break;
            }
            case FusionStrategy::CrossAttention: {
                Modulation ma = modulation(pa, t_act), mv = modulation(pv, t_act);
                ad::Var<S> na = modulate(ad::layer_norm(in.audio), ma.shift1, ma.scale1);
                ad::Var<S> nv = modulate(ad::layer_norm(in.visual), mv.shift1, mv.scale1);
                ad::Var<S> xa = ad::add(
                    in.audio, ad::mul_rowvec(attention_sub(na, nv, pa + "attn.", pos_frames, pos_frames,
                                                           dbg, nullptr),
                                             ma.gate1));
                ad::Var<S> xv = ad::add(
                    in.visual, ad::mul_rowvec(attention_sub(nv, na, pv + "attn.", pos_frames,
                                                            pos_frames, dbg, nullptr),
                                              mv.gate1));
                out.audio = ad::add(
                    xa, ad::mul_rowvec(ffn_sub(modulate(ad::layer_norm(xa), ma.shift2, ma.scale2), pa),
                                       ma.gate2));
                out.visual = ad::add(
                    xv, ad::mul_rowvec(ffn_sub(modulate(ad::layer_norm(xv), mv.shift2, mv.scale2), pv),
                                       mv.gate2));
                break;
            }
            case FusionStrategy::MMAttention: {
                const std::string pt = stem + "t.";
                Modulation ma = modulation(pa, t_act), mv = modulation(pv, t_act),
                           mt = modulation(pt, t_act);
                // depthwise positional convolution, per stream (shared kernel)
                ad::Var<S> sa = ad::add(in.audio, ad::dwconv_time(in.audio, p(stem + "pe.dw")));
                ad::Var<S> st = ad::add(in.text, ad::dwconv_time(in.text, p(stem + "pe.dw")));
                ad::Var<S> sv = ad::add(in.visual, ad::dwconv_time(in.visual, p(stem + "pe.dw")));

                ad::Var<S> na = modulate(ad::layer_norm(sa), ma.shift1, ma.scale1);
                ad::Var<S> nt = modulate(ad::layer_norm(st), mt.shift1, mt.scale1);
                ad::Var<S> nv = modulate(ad::layer_norm(sv), mv.shift1, mv.scale1);

                ad::Var<S> z = ad::concat_rows<S>({na, nt, nv});
                ad::Var<S> q = linear(z, stem + "joint.wq", stem + "joint.bq");
                ad::Var<S> k = linear(z, stem + "joint.wk", stem + "joint.bk");
                ad::Var<S> v = linear(z, stem + "joint.wv", stem + "joint.bv");

                std::vector<double> pos;
                pos.reserve(pos_frames.size() * 2 + pos_text.size());
                pos.insert(pos.end(), pos_frames.begin(), pos_frames.end());
                pos.insert(pos.end(), pos_text.begin(), pos_text.end());
                pos.insert(pos.end(), pos_frames.begin(), pos_frames.end());

                ad::AttnOptions opt;
                opt.n_heads = cfg->n_heads;
                opt.use_rope = !dbg.disable_positions;
                opt.pos_q = pos;
                opt.pos_k = pos;
                opt.key_mask = dbg.joint_key_mask;
                opt.probe = dbg.attn_probe;
                ad::Var<S> joint = ad::attention(q, k, v, opt);

                const Eigen::Index n = in.audio.rows();
                ad::Var<S> oa = ad::slice_rows(joint, 0, n);
                ad::Var<S> ot = ad::slice_rows(joint, n, n);
                ad::Var<S> ov = ad::slice_rows(joint, 2 * n, n);

                ad::Var<S> xa = ad::add(
                    sa, ad::mul_rowvec(linear(oa, pa + "attn.wo", pa + "attn.bo"), ma.gate1));
                ad::Var<S> xt = ad::add(
                    st, ad::mul_rowvec(linear(ot, pt + "attn.wo", pt + "attn.bo"), mt.gate1));
                ad::Var<S> xv = ad::add(
                    sv, ad::mul_rowvec(linear(ov, pv + "attn.wo", pv + "attn.bo"), mv.gate1));

                out.audio = ad::add(
                    xa, ad::mul_rowvec(ffn_sub(modulate(ad::layer_norm(xa), ma.shift2, ma.scale2), pa),
                                       ma.gate2));
                out.text = ad::add(
                    xt, ad::mul_rowvec(ffn_sub(modulate(ad::layer_norm(xt), mt.shift2, mt.scale2), pt),
                                       mt.gate2));
                out.visual = ad::add(
                    xv, ad::mul_rowvec(ffn_sub(modulate(ad::layer_norm(xv), mv.shift2, mv.scale2), pv),
                                       mv.gate2));
                break;
            }
        }
        return out;
    }

    ad::Var<S> refine_block(const std::string& prefix, const ad::Var<S>& x, const ad::Var<S>& t_act,
                            const std::vector<double>& pos, const ForwardDebug& dbg) const {
        Modulation m = modulation(prefix, t_act);
        ad::Var<S> nx = modulate(ad::layer_norm(x), m.shift1, m.scale1);
        ad::Var<S> h =
            ad::add(x, ad::mul_rowvec(attention_sub(nx, nx, prefix + "attn.", pos, pos, dbg, nullptr),
                                      m.gate1));
        return ad::add(
            h, ad::mul_rowvec(ffn_sub(modulate(ad::layer_norm(h), m.shift2, m.scale2), prefix),
                              m.gate2));
    }

    std::pair<ad::Var<S>, ad::Var<S>> forward(const ForwardInput& input,
                                              const ForwardDebug& dbg = {}) const {
        input.validate(*cfg);
        const Eigen::Index n = input.frames();

        // condition dropout replaces streams with learned null rows
        ad::Var<S> ctx_a = input.drop_mel ? broadcast_row(p("null.mel_ctx"), n)
                                          : leaf(input.context_audio);
        ad::Var<S> ctx_v = input.drop_visual ? broadcast_row(p("null.visual_ctx"), n)
                                             : leaf(input.context_visual);
        ad::Var<S> c_t = input.drop_text ? broadcast_row(p("null.text"), n)
                                         : embed_text(input.tokens, dbg);

        ad::Var<S> xa = embed_audio(leaf(input.noisy_audio), ctx_a);
        ad::Var<S> xv = embed_visual(leaf(input.noisy_visual), ctx_v);

        std::vector<double> pos_frames(static_cast<size_t>(n));
        for (size_t i = 0; i < pos_frames.size(); ++i) pos_frames[i] = double(i);
        std::vector<double> pos_text = input.drop_text
                                           ? pos_frames
                                           : text_positions(input.tokens);

        ad::Var<S> t_act = ad::silu(timestep_embed(input.t));

        // filler tokens are padding: they stay in the text stream as queries,
        // but are hidden as joint-attention keys so the softmax over the
        // concatenated sequence only reads real characters
        ForwardDebug fdbg = dbg;
        std::vector<uint8_t> joint_visible;
        if (cfg->fusion_strategy == FusionStrategy::MMAttention && !input.drop_text) {
            joint_visible.assign(size_t(3 * n), 1);
            for (Eigen::Index i = 0; i < n; ++i)
                if (input.tokens.ids[size_t(i)] == input.tokens.filler_id)
                    joint_visible[size_t(n + i)] = 0;
            if (dbg.joint_key_mask)
                for (size_t i = 0; i < joint_visible.size(); ++i)
                    joint_visible[i] = uint8_t(joint_visible[i] & (*dbg.joint_key_mask)[i]);
            fdbg.joint_key_mask = &joint_visible;
        }

        Streams s{xa, c_t, xv};
        if (cfg->fusion_strategy != FusionStrategy::MMAttention) {
            // conditioning joins by feature addition outside the joint strategy
            s.audio = ad::add(s.audio, c_t);
            s.visual = ad::add(s.visual, c_t);
        }
        for (int b = 0; b < cfg->n_fusion_blocks; ++b)
            s = fusion_block(b, s, t_act, pos_frames, pos_text, fdbg);

        ad::Var<S> ya = s.audio, yv = s.visual;
        for (int b = 0; b < cfg->n_branch_blocks; ++b) {
            ya = refine_block(branch_name(strf("branch%d.", b), "a"), ya, t_act, pos_frames, dbg);
            yv = refine_block(branch_name(strf("branch%d.", b), "v"), yv, t_act, pos_frames, dbg);
        }

        // final modulated norm + linear head per branch
        auto head = [&](const ad::Var<S>& y, const std::string& branch) {
            ad::Var<S> m = linear(t_act, "final." + branch + ".ada.w", "final." + branch + ".ada.b");
            const int d = cfg->d_model;
            ad::Var<S> z = modulate(ad::layer_norm(y), ad::slice_cols(m, 0, d), ad::slice_cols(m, d, d));
            return linear(z, "head." + branch + ".w", "head." + branch + ".b");
        };
        return {head(ya, "audio"), head(yv, "visual")};
    }
};

}  // namespace flowtalk::net
