#pragma once

// Training and sampling mathematics: the straight-line transport path between
// noise and data, masked-infilling construction, condition dropout, weighted
// multi-stream losses, multi-condition guidance, and ODE integration.

#include <cstdint>
#include <functional>
#include <vector>

#include "flowtalk/common.hpp"
#include "flowtalk/face.hpp"
#include "flowtalk/mel.hpp"
#include "flowtalk/net.hpp"
#include "flowtalk/net_graph.hpp"

namespace flowtalk::flow {

// Temporal infilling mask. A set bit marks a frame the model must generate;
// clear bits are reference frames the model may condition on.
struct MaskSpec {
    std::vector<uint8_t> mask;  // 1 = to-be-generated
    double min_ratio = 0.7;
    double max_ratio = 1.0;
    int n_segments = 0;  // contiguous masked runs in `mask`

    Eigen::Index frames() const { return Eigen::Index(mask.size()); }
    Eigen::Index masked_count() const;
};

struct LossWeights {
    double mel = 0.1;
    double pose = 0.5;
    double expr = 3.0;
    double eye = 0.5;

    void validate() const;
};

enum class Solver { Euler, Midpoint };

const char* solver_name(Solver s);
Solver parse_solver(const std::string& name);

struct GuidanceSpec {
    double alpha_mel = 2.0;
    double alpha_visual = 2.5;
    double alpha_text = 2.0;
    int steps = 16;
    Solver solver = Solver::Euler;
    // when set, every negative guidance term uses the fully-unconditional
    // field instead of nulling one condition at a time
    bool null_all_conditions = false;

    void validate() const;
};

struct DropFlags {
    bool mel = false;
    bool visual = false;
    bool text = false;
};

// One aligned training clip: mel frames, packed visual codes, token sequence.
struct TrainingSample {
    MatF mel;    // N x F
    MatF codes;  // N x 61, columns [expression | eye | pose]
    features::TokenSequence tokens;

    Eigen::Index frames() const { return mel.rows(); }
};

double logistic(double z);

// t = logistic(z), z standard normal: symmetric around 0.5, endpoints avoided
double sample_timestep(Rng& rng);

struct OtPair {
    MatF x_t;  // (1-t) x0 + t x1
    MatF u;    // x1 - x0, the straight-path velocity
};
OtPair ot_pair(const MatF& x0, const MatF& x1, double t);

// 1-3 contiguous spans covering a uniformly drawn fraction of [min,max]
MaskSpec sample_mask(Eigen::Index n, double min_ratio, double max_ratio, Rng& rng);
inline MaskSpec sample_mask(Eigen::Index n, Rng& rng) { return sample_mask(n, 0.7, 1.0, rng); }

// independent coin flips, drawn in order (mel, visual, text)
DropFlags drop_conditions(Rng& rng, double p = 0.2);

// Masked flow-matching loss over the four weighted streams. The graph variant
// exposes the model outputs and the loss variable so callers can backpropagate
// or probe gradients; per-stream contributions are reported already weighted,
// and `total` is their left-to-right double-precision sum.
template <typename S>
struct CfmLossGraph {
    ad::Var<S> total_var;
    ad::Var<S> v_audio, v_visual;
    double total = 0, mel = 0, pose = 0, expr = 0, eye = 0;
    net::ForwardInput input;  // the constructed noisy/context input
    MatF u_audio, u_visual;   // regression targets
};

template <typename S>
CfmLossGraph<S> cfm_loss_graph(net::GraphBuilder<S>& g, const TrainingSample& sample,
                               const MaskSpec& mask, double t, const DropFlags& drop,
                               const LossWeights& w, Rng& rng,
                               ad::LossKind kind = ad::LossKind::L1) {
    const Eigen::Index n = sample.frames();
    const int F = g.cfg->mel_dim, V = g.cfg->visual_dim;
    if (sample.codes.rows() != n)
        throw ValidationError(strf("training sample: %ld mel frames but %ld code frames", long(n),
                                   long(sample.codes.rows())));
    if (mask.frames() != n)
        throw ValidationError(strf("mask length %ld does not match %ld frames",
                                   long(mask.frames()), long(n)));
    if (mask.masked_count() == 0)
        throw ValidationError("mask selects no frames to reconstruct");

    MatF x0a(n, F), x0v(n, V);
    for (Eigen::Index r = 0; r < n; ++r)
        for (int c = 0; c < F; ++c) x0a(r, c) = float(rng.normal());
    for (Eigen::Index r = 0; r < n; ++r)
        for (int c = 0; c < V; ++c) x0v(r, c) = float(rng.normal());

    OtPair audio = ot_pair(x0a, sample.mel, t);
    OtPair visual = ot_pair(x0v, sample.codes, t);

    CfmLossGraph<S> out;
    out.u_audio = audio.u;
    out.u_visual = visual.u;
    out.input.noisy_audio = audio.x_t;
    out.input.noisy_visual = visual.x_t;
    out.input.context_audio = sample.mel;
    out.input.context_visual = sample.codes;
    for (Eigen::Index r = 0; r < n; ++r)
        if (mask.mask[size_t(r)]) {
            out.input.context_audio.row(r).setZero();
            out.input.context_visual.row(r).setZero();
        }
    out.input.tokens = sample.tokens;
    out.input.t = t;
    out.input.drop_mel = drop.mel;
    out.input.drop_visual = drop.visual;
    out.input.drop_text = drop.text;

    auto [va, vv] = g.forward(out.input);
    out.v_audio = va;
    out.v_visual = vv;

    const MatT<S> ua = audio.u.template cast<S>(), uv = visual.u.template cast<S>();
    ad::Var<S> l_mel = ad::masked_loss(va, ua, mask.mask, 0, F, kind);
    ad::Var<S> l_expr = ad::masked_loss(vv, uv, mask.mask, 0, features::kExprDims, kind);
    ad::Var<S> l_eye = ad::masked_loss(vv, uv, mask.mask, features::kExprDims,
                                       features::kEyeDims, kind);
    ad::Var<S> l_pose = ad::masked_loss(vv, uv, mask.mask,
                                        features::kExprDims + features::kEyeDims,
                                        features::kPoseDims, kind);

    out.mel = w.mel * double(l_mel.scalar());
    out.pose = w.pose * double(l_pose.scalar());
    out.expr = w.expr * double(l_expr.scalar());
    out.eye = w.eye * double(l_eye.scalar());
    out.total = ((out.mel + out.pose) + out.expr) + out.eye;
    out.total_var = ad::add(ad::add(ad::add(ad::scale(l_mel, w.mel), ad::scale(l_pose, w.pose)),
                                    ad::scale(l_expr, w.expr)),
                            ad::scale(l_eye, w.eye));
    return out;
}

struct CfmLossResult {
    double total = 0;
    double mel = 0, pose = 0, expr = 0, eye = 0;  // weighted contributions
};

// Inference-precision evaluation without gradient bookkeeping.
CfmLossResult cfm_loss(const net::ModelParams& params, const TrainingSample& sample,
                       const MaskSpec& mask, double t, const DropFlags& drop,
                       const LossWeights& w, Rng& rng, ad::LossKind kind = ad::LossKind::L1);

// Multi-condition guided field: (1 + sum of alphas) times the fully
// conditioned field, minus each alpha times the field with that condition
// nulled. Zero-alpha terms are skipped entirely, so all-zero guidance is the
// single conditional forward, bit for bit. The input must have no drop flags.
net::VectorFieldPair cfg_field(const net::ForwardInput& input, const net::ModelParams& params,
                               const GuidanceSpec& spec);

// Fixed-step integration of dx/dt = field(x, t) from t=0 to t=1. The state is
// any Eigen matrix; the field is called with (state, t) and must return a
// matrix of the same shape.
template <typename M, typename FieldFn>
void ode_integrate(M& x, FieldFn&& field, int steps, Solver solver) {
    if (steps < 1) throw ValidationError("ode_integrate: steps must be at least 1");
    using Scalar = typename M::Scalar;
    const double h = 1.0 / double(steps);
    for (int k = 0; k < steps; ++k) {
        const double t = double(k) * h;
        M v = field(x, t);
        if (solver == Solver::Midpoint) {
            M xm = x + Scalar(0.5 * h) * v;
            v = field(xm, t + 0.5 * h);
        }
        x += Scalar(h) * v;
        if (!x.allFinite())
            throw NumericError(strf("ode_integrate: non-finite state after step %d of %d", k + 1,
                                    steps));
    }
}

// Generate `gen_frames` new frames continuing a reference clip. The reference
// rows ride the known transport path during integration (they are conditioning,
// not targets) and only the generated region is returned.
struct SampleOutput {
    features::MelSpectrogram mel;
    features::VisualCodes codes;
};
SampleOutput ode_sample(const net::ModelParams& params, const MatF& ref_mel, const MatF& ref_codes,
                        Eigen::Index gen_frames, const features::TokenSequence& tokens,
                        const GuidanceSpec& spec, double frame_rate, Rng& rng);

}  // namespace flowtalk::flow
