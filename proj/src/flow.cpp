#include "flowtalk/flow.hpp"

#include <algorithm>
#include <cmath>

namespace flowtalk::flow {

Eigen::Index MaskSpec::masked_count() const {
    Eigen::Index n = 0;
    for (uint8_t m : mask) n += (m != 0);
    return n;
}

void LossWeights::validate() const {
    if (mel < 0 || pose < 0 || expr < 0 || eye < 0)
        throw ValidationError("loss weights must be non-negative");
}

const char* solver_name(Solver s) {
    switch (s) {
        case Solver::Euler: return "euler";
        case Solver::Midpoint: return "midpoint";
    }
    throw ValidationError("unknown solver value");
}

Solver parse_solver(const std::string& name) {
    if (name == "euler") return Solver::Euler;
    if (name == "midpoint") return Solver::Midpoint;
    throw ValidationError(strf("unknown solver '%s' (expected euler or midpoint)", name.c_str()));
}

void GuidanceSpec::validate() const {
    if (steps < 1) throw ValidationError("guidance: steps must be at least 1");
    if (!std::isfinite(alpha_mel) || !std::isfinite(alpha_visual) || !std::isfinite(alpha_text))
        throw ValidationError("guidance: alphas must be finite");
}

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double sample_timestep(Rng& rng) { return logistic(rng.normal()); }

OtPair ot_pair(const MatF& x0, const MatF& x1, double t) {
    if (x0.rows() != x1.rows() || x0.cols() != x1.cols())
        throw ValidationError(strf("ot_pair: shape mismatch %ld x %ld vs %ld x %ld",
                                   long(x0.rows()), long(x0.cols()), long(x1.rows()),
                                   long(x1.cols())));
    OtPair p;
    p.x_t = float(1.0 - t) * x0 + float(t) * x1;
    p.u = x1 - x0;
    return p;
}

MaskSpec sample_mask(Eigen::Index n, double min_ratio, double max_ratio, Rng& rng) {
    if (n < 1) throw ValidationError("sample_mask: sequence must have at least one frame");
    if (!(min_ratio >= 0.0 && min_ratio <= max_ratio && max_ratio <= 1.0))
        throw ValidationError(strf("sample_mask: invalid ratio bounds [%g, %g]", min_ratio,
                                   max_ratio));

    // total masked length: uniform ratio, rounded, clamped so the realized
    // fraction still honors the bounds after integer rounding
    const double ratio = rng.uniform(min_ratio, max_ratio);
    const Eigen::Index lo = std::max<Eigen::Index>(1, Eigen::Index(std::ceil(min_ratio * double(n))));
    const Eigen::Index hi = std::max(lo, Eigen::Index(std::floor(max_ratio * double(n))));
    Eigen::Index total = Eigen::Index(std::llround(ratio * double(n)));
    total = std::clamp(total, lo, hi);

    // up to three spans; a span needs at least one frame
    Eigen::Index k = 1 + Eigen::Index(rng.uniform_int(3));
    k = std::min(k, total);

    // split the masked budget into k parts of at least one frame each
    std::vector<Eigen::Index> lens(static_cast<size_t>(k));
    Eigen::Index remaining = total;
    for (Eigen::Index i = 0; i + 1 < k; ++i) {
        const Eigen::Index reserve = k - 1 - i;  // frames still owed to later spans
        lens[size_t(i)] = 1 + Eigen::Index(rng.uniform_int(uint64_t(remaining - reserve)));
        remaining -= lens[size_t(i)];
    }
    lens[size_t(k - 1)] = remaining;

    // distribute the unmasked frames into the k+1 gaps around the spans
    std::vector<Eigen::Index> gaps(size_t(k) + 1, 0);
    Eigen::Index free_frames = n - total;
    for (Eigen::Index i = 0; i < k; ++i) {
        gaps[size_t(i)] = Eigen::Index(rng.uniform_int(uint64_t(free_frames) + 1));
        free_frames -= gaps[size_t(i)];
    }
    gaps[size_t(k)] = free_frames;

    MaskSpec spec;
    spec.min_ratio = min_ratio;
    spec.max_ratio = max_ratio;
    spec.mask.assign(size_t(n), 0);
    Eigen::Index pos = 0;
    for (Eigen::Index i = 0; i < k; ++i) {
        pos += gaps[size_t(i)];
        for (Eigen::Index j = 0; j < lens[size_t(i)]; ++j) spec.mask[size_t(pos + j)] = 1;
        pos += lens[size_t(i)];
    }

    // zero gaps merge adjacent spans; report the runs actually present
    for (Eigen::Index i = 0; i < n; ++i)
        if (spec.mask[size_t(i)] && (i == 0 || !spec.mask[size_t(i - 1)])) ++spec.n_segments;
    return spec;
}

DropFlags drop_conditions(Rng& rng, double p) {
    if (!(p >= 0.0 && p <= 1.0))
        throw ValidationError(strf("drop_conditions: probability %g outside [0, 1]", p));
    DropFlags f;
    f.mel = rng.bernoulli(p);
    f.visual = rng.bernoulli(p);
    f.text = rng.bernoulli(p);
    return f;
}

CfmLossResult cfm_loss(const net::ModelParams& params, const TrainingSample& sample,
                       const MaskSpec& mask, double t, const DropFlags& drop,
                       const LossWeights& w, Rng& rng, ad::LossKind kind) {
    w.validate();
    ad::Tape<float> tape;
    auto g = net::GraphBuilder<float>::attach(tape, params, false);
    CfmLossGraph<float> r = cfm_loss_graph(g, sample, mask, t, drop, w, rng, kind);
    return CfmLossResult{r.total, r.mel, r.pose, r.expr, r.eye};
}

net::VectorFieldPair cfg_field(const net::ForwardInput& input, const net::ModelParams& params,
                               const GuidanceSpec& spec) {
    spec.validate();
    if (input.drop_mel || input.drop_visual || input.drop_text)
        throw ValidationError("cfg_field expects a fully conditioned input; guidance nulls "
                              "conditions itself");

    net::VectorFieldPair v = net::forward(input, params);

    struct Term {
        double alpha;
        bool net::ForwardInput::*flag;
    };
    const Term terms[] = {{spec.alpha_mel, &net::ForwardInput::drop_mel},
                          {spec.alpha_visual, &net::ForwardInput::drop_visual},
                          {spec.alpha_text, &net::ForwardInput::drop_text}};

    double alpha_sum = 0.0;
    for (const Term& term : terms) alpha_sum += term.alpha;
    if (alpha_sum == 0.0 && spec.alpha_mel == 0.0 && spec.alpha_visual == 0.0 &&
        spec.alpha_text == 0.0)
        return v;  // guidance degenerates to the conditional field, bit for bit

    net::VectorFieldPair out;
    out.v_audio = float(1.0 + alpha_sum) * v.v_audio;
    out.v_visual = float(1.0 + alpha_sum) * v.v_visual;
    for (const Term& term : terms) {
        if (term.alpha == 0.0) continue;  // skipped entirely: no forward, no arithmetic
        net::ForwardInput nulled = input;
        if (spec.null_all_conditions)
            nulled.drop_mel = nulled.drop_visual = nulled.drop_text = true;
        else
            nulled.*term.flag = true;
        net::VectorFieldPair neg = net::forward(nulled, params);
        out.v_audio -= float(term.alpha) * neg.v_audio;
        out.v_visual -= float(term.alpha) * neg.v_visual;
    }
    return out;
}

SampleOutput ode_sample(const net::ModelParams& params, const MatF& ref_mel, const MatF& ref_codes,
                        Eigen::Index gen_frames, const features::TokenSequence& tokens,
                        const GuidanceSpec& spec, double frame_rate, Rng& rng) {
    spec.validate();
    const int F = params.cfg.mel_dim, V = params.cfg.visual_dim;
    const Eigen::Index nref = ref_mel.rows();
    if (ref_codes.rows() != nref)
        throw ValidationError(strf("ode_sample: %ld reference mel frames but %ld code frames",
                                   long(nref), long(ref_codes.rows())));
    if (nref > 0 && (ref_mel.cols() != F || ref_codes.cols() != V))
        throw ValidationError("ode_sample: reference feature widths do not match the model");
    if (gen_frames < 1) throw ValidationError("ode_sample: nothing to generate");
    const Eigen::Index n = nref + gen_frames;
    if (Eigen::Index(tokens.ids.size()) != n)
        throw ValidationError(strf("ode_sample: token sequence length %zu must cover all %ld "
                                   "frames", tokens.ids.size(), long(n)));

    // conditioning context: reference rows hold data, generated rows are zero
    MatF ctx_audio = MatF::Zero(n, F), ctx_visual = MatF::Zero(n, V);
    ctx_audio.topRows(nref) = ref_mel;
    ctx_visual.topRows(nref) = ref_codes;

    MatF x0(n, F + V);
    for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < F + V; ++c) x0(r, c) = float(rng.normal());

    // the reference rows are conditioning, not targets: they ride the known
    // straight path from their own noise to the data, and their slope is the
    // constant path velocity
    MatF ref_data(nref, F + V);
    ref_data.leftCols(F) = ref_mel;
    ref_data.rightCols(V) = ref_codes;
    const MatF ref_slope = ref_data - x0.topRows(nref);

    auto field = [&](const MatF& state, double t) {
        MatF x = state;
        if (nref > 0)
            x.topRows(nref) = float(1.0 - t) * x0.topRows(nref) + float(t) * ref_data;
        net::ForwardInput in;
        in.noisy_audio = x.leftCols(F);
        in.noisy_visual = x.rightCols(V);
        in.context_audio = ctx_audio;
        in.context_visual = ctx_visual;
        in.tokens = tokens;
        in.t = t;
        net::VectorFieldPair v = cfg_field(in, params, spec);
        MatF vfull(n, F + V);
        vfull.leftCols(F) = v.v_audio;
        vfull.rightCols(V) = v.v_visual;
        if (nref > 0) vfull.topRows(nref) = ref_slope;
        return vfull;
    };

    MatF x = x0;
    ode_integrate(x, field, spec.steps, spec.solver);

    SampleOutput out;
    out.mel.data = x.bottomRows(gen_frames).leftCols(F).transpose();
    out.mel.frame_rate = frame_rate;
    out.codes = features::VisualCodes::from_packed(x.bottomRows(gen_frames).rightCols(V),
                                                   frame_rate);
    return out;
}

}  // namespace flowtalk::flow
