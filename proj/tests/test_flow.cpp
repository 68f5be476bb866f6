#include "doctest.h"

#include <cmath>
#include <vector>

#include "flowtalk/common.hpp"
#include "flowtalk/flow.hpp"
#include "flowtalk/net.hpp"
#include "flowtalk/net_graph.hpp"

using flowtalk::MatD;
using flowtalk::MatF;
using flowtalk::NumericError;
using flowtalk::Rng;
using flowtalk::ValidationError;
namespace ad = flowtalk::ad;
namespace flow = flowtalk::flow;
namespace net = flowtalk::net;
namespace features = flowtalk::features;

namespace {

net::NetConfig tiny_config() {
    net::NetConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.ffn_dim = 32;
    cfg.n_fusion_blocks = 1;
    cfg.n_branch_blocks = 1;
    cfg.n_text_blocks = 1;
    cfg.conv_pe_kernel = 5;
    cfg.text_conv_kernel = 3;
    cfg.time_freq_dim = 32;
    return cfg;
}

MatF randf(Rng& rng, Eigen::Index r, Eigen::Index c, double s = 1.0) {
    MatF m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = float(rng.uniform(-s, s));
    return m;
}

void activate_gates(net::ModelParams& p, uint64_t seed) {
    Rng rng(flowtalk::mix_seed(seed, 0x6a7e5));
    for (auto& [name, m] : p.tensors) {
        if (name.find("ada.") == std::string::npos && name.find("head.") == std::string::npos)
            continue;
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = float(rng.uniform(-0.2, 0.2));
    }
}

flow::TrainingSample random_sample(const net::NetConfig& cfg, Eigen::Index n, uint64_t seed,
                                   const std::string& text = "hey") {
    Rng rng(flowtalk::mix_seed(seed, 0x5a3));
    flow::TrainingSample s;
    s.mel = randf(rng, n, cfg.mel_dim);
    s.codes = randf(rng, n, cfg.visual_dim);
    s.tokens = features::tokenize(text, "", size_t(n), features::Vocab{});
    return s;
}

flow::MaskSpec fixed_mask(std::vector<uint8_t> bits) {
    flow::MaskSpec m;
    m.mask = std::move(bits);
    for (size_t i = 0; i < m.mask.size(); ++i)
        if (m.mask[i] && (i == 0 || !m.mask[i - 1])) ++m.n_segments;
    return m;
}

}  // namespace

TEST_CASE("timestep distribution is the logistic of a standard normal") {
    CHECK(flow::logistic(0.0) == 0.5);
    CHECK(flow::logistic(4.0) == doctest::Approx(0.9820137900379085).epsilon(1e-12));
    CHECK(flow::logistic(-4.0) == doctest::Approx(0.0179862099620915).epsilon(1e-12));

    Rng rng(2024);
    double sum = 0.0;
    int below = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double t = flow::sample_timestep(rng);
        CHECK(t > 0.0);
        CHECK(t < 1.0);
        sum += t;
        below += (t < 0.5);
    }
    CHECK(std::abs(sum / n - 0.5) < 0.01);
    CHECK(std::abs(double(below) / n - 0.5) < 0.01);
}

TEST_CASE("transport path endpoints and recombination identity") {
    Rng rng(7);
    MatF x0 = randf(rng, 5, 8), x1 = randf(rng, 5, 8);

    flow::OtPair p0 = flow::ot_pair(x0, x1, 0.0);
    CHECK(p0.x_t == x0);
    CHECK(p0.u == (x1 - x0).eval());

    flow::OtPair p1 = flow::ot_pair(x0, x1, 1.0);
    CHECK(p1.x_t == x1);

    // x1 = x_t + (1-t) u for random draws, at float working precision
    for (int i = 0; i < 1000; ++i) {
        const double t = rng.uniform();
        MatF a = randf(rng, 3, 4, 2.0), b = randf(rng, 3, 4, 2.0);
        flow::OtPair p = flow::ot_pair(a, b, t);
        MatF rebuilt = p.x_t + float(1.0 - t) * p.u;
        CHECK(double((rebuilt - b).cwiseAbs().maxCoeff()) < 1e-5);
    }

    CHECK_THROWS_AS(flow::ot_pair(MatF::Zero(2, 3), MatF::Zero(3, 2), 0.5), ValidationError);
}

TEST_CASE("mask sampler honors ratio bounds, span structure, and statistics") {
    Rng rng(99);

    // full masking when the ratio range collapses to 1
    flow::MaskSpec full = flow::sample_mask(37, 1.0, 1.0, rng);
    CHECK(full.masked_count() == 37);
    CHECK(full.n_segments == 1);

    // every draw: fraction in bounds, 1-3 contiguous runs verified by an
    // independent run-length scan, and the reported segment count matches
    double frac_sum = 0.0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        const Eigen::Index n = 100;
        flow::MaskSpec m = flow::sample_mask(n, 0.7, 1.0, rng);
        REQUIRE(m.frames() == n);
        const double frac = double(m.masked_count()) / double(n);
        CHECK(frac >= 0.7);
        CHECK(frac <= 1.0);
        frac_sum += frac;

        int runs = 0;
        bool inside = false;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (m.mask[size_t(j)] && !inside) ++runs;
            inside = m.mask[size_t(j)] != 0;
        }
        CHECK(runs >= 1);
        CHECK(runs <= 3);
        CHECK(runs == m.n_segments);
    }
    CHECK(frac_sum / draws > 0.84);
    CHECK(frac_sum / draws < 0.86);

    // short sequences still respect the lower bound after rounding
    for (int i = 0; i < 200; ++i) {
        flow::MaskSpec m = flow::sample_mask(3, 0.7, 1.0, rng);
        CHECK(double(m.masked_count()) / 3.0 >= 0.7);
    }

    Rng a(5), b(5);
    CHECK(flow::sample_mask(50, 0.7, 1.0, a).mask == flow::sample_mask(50, 0.7, 1.0, b).mask);

    CHECK_THROWS_AS(flow::sample_mask(0, 0.7, 1.0, rng), ValidationError);
    CHECK_THROWS_AS(flow::sample_mask(10, 0.9, 0.3, rng), ValidationError);
}

TEST_CASE("condition dropout flips three independent coins") {
    Rng rng(31);
    for (int i = 0; i < 50; ++i) {
        flow::DropFlags f0 = flow::drop_conditions(rng, 0.0);
        CHECK_FALSE(f0.mel);
        CHECK_FALSE(f0.visual);
        CHECK_FALSE(f0.text);
        flow::DropFlags f1 = flow::drop_conditions(rng, 1.0);
        CHECK(f1.mel);
        CHECK(f1.visual);
        CHECK(f1.text);
    }

    int mel = 0, visual = 0, text = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        flow::DropFlags f = flow::drop_conditions(rng, 0.2);
        mel += f.mel;
        visual += f.visual;
        text += f.text;
    }
    CHECK(std::abs(double(mel) / n - 0.2) < 0.015);
    CHECK(std::abs(double(visual) / n - 0.2) < 0.015);
    CHECK(std::abs(double(text) / n - 0.2) < 0.015);

    CHECK_THROWS_AS(flow::drop_conditions(rng, 1.5), ValidationError);
}

TEST_CASE("flow-matching loss: masked restriction, weighting, and components") {
    net::NetConfig cfg = tiny_config();
    // zero-initialized heads emit an exactly-zero field, making the loss a
    // pure function of the targets: ideal for oracle comparisons
    net::ModelParams zero_head = net::init_params(cfg, 11);
    const Eigen::Index n = 6;
    flow::TrainingSample sample = random_sample(cfg, n, 12);
    flow::MaskSpec mask = fixed_mask({0, 1, 1, 0, 1, 0});
    flow::LossWeights w;
    flow::DropFlags keep;

    ad::Tape<float> tape;
    auto g = net::GraphBuilder<float>::attach(tape, zero_head, false);
    Rng rng1(77);
    auto r = flow::cfm_loss_graph(g, sample, mask, 0.35, keep, w, rng1);

    // oracle: with v = 0 each component is its weight times the mean |u|
    // over masked rows and that stream's columns
    auto mean_abs = [&](const MatF& u, int c0, int nc) {
        double acc = 0.0;
        int rows = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (!mask.mask[size_t(i)]) continue;
            ++rows;
            for (int c = c0; c < c0 + nc; ++c) acc += std::abs(double(u(i, c)));
        }
        return acc / (double(rows) * nc);
    };
    CHECK(r.mel ==
          doctest::Approx(w.mel * mean_abs(r.u_audio, 0, cfg.mel_dim)).epsilon(1e-5));
    CHECK(r.expr == doctest::Approx(w.expr * mean_abs(r.u_visual, 0, 51)).epsilon(1e-5));
    CHECK(r.eye == doctest::Approx(w.eye * mean_abs(r.u_visual, 51, 4)).epsilon(1e-5));
    CHECK(r.pose == doctest::Approx(w.pose * mean_abs(r.u_visual, 55, 6)).epsilon(1e-5));

    // exact recombination contract
    CHECK(r.total == ((r.mel + r.pose) + r.expr) + r.eye);

    // the constructed input masks the context and keeps noisy frames everywhere
    for (Eigen::Index i = 0; i < n; ++i) {
        if (mask.mask[size_t(i)]) {
            CHECK(r.input.context_audio.row(i).isZero());
            CHECK(r.input.context_visual.row(i).isZero());
        } else {
            CHECK(r.input.context_audio.row(i) == sample.mel.row(i));
        }
    }

    // changing data on UNMASKED frames does not change the loss (same noise)
    flow::TrainingSample altered = sample;
    altered.mel.row(0).setConstant(9.0f);
    altered.codes.row(3).setConstant(-4.0f);
    ad::Tape<float> tape2;
    auto g2 = net::GraphBuilder<float>::attach(tape2, zero_head, false);
    Rng rng2(77);
    auto r2 = flow::cfm_loss_graph(g2, altered, mask, 0.35, keep, w, rng2);
    CHECK(r2.total == r.total);

    // doubling one weight exactly doubles that component and nothing else
    flow::LossWeights w2 = w;
    w2.expr *= 2.0;
    ad::Tape<float> tape3;
    auto g3 = net::GraphBuilder<float>::attach(tape3, zero_head, false);
    Rng rng3(77);
    auto r3 = flow::cfm_loss_graph(g3, sample, mask, 0.35, keep, w2, rng3);
    CHECK(r3.expr == 2.0 * r.expr);
    CHECK(r3.mel == r.mel);
    CHECK(r3.pose == r.pose);
    CHECK(r3.eye == r.eye);

    // the float wrapper reports the same numbers
    Rng rng4(77);
    flow::CfmLossResult r4 = flow::cfm_loss(zero_head, sample, mask, 0.35, keep, w, rng4);
    CHECK(r4.total == r.total);
    CHECK(r4.expr == r.expr);

    // an all-zero mask has nothing to reconstruct
    flow::MaskSpec none = fixed_mask({0, 0, 0, 0, 0, 0});
    Rng rng5(77);
    CHECK_THROWS_AS(flow::cfm_loss(zero_head, sample, none, 0.35, keep, w, rng5),
                    ValidationError);

    // squared-error variant is selectable and differs
    Rng rng6(77);
    flow::CfmLossResult rl2 =
        flow::cfm_loss(zero_head, sample, mask, 0.35, keep, w, rng6, ad::LossKind::L2);
    CHECK(rl2.total != r.total);
}

TEST_CASE("loss gradient never touches outputs on unmasked frames") {
    net::NetConfig cfg = tiny_config();
    net::ModelParams p = net::init_params(cfg, 21);
    activate_gates(p, 22);
    const Eigen::Index n = 5;
    flow::TrainingSample sample = random_sample(cfg, n, 23);
    flow::MaskSpec mask = fixed_mask({1, 0, 1, 1, 0});

    ad::Tape<float> tape;
    auto g = net::GraphBuilder<float>::attach(tape, p, true);
    Rng rng(24);
    auto r = flow::cfm_loss_graph(g, sample, mask, 0.6, flow::DropFlags{}, flow::LossWeights{},
                                  rng);
    tape.backward(r.total_var);

    const MatF ga = tape.grad(r.v_audio), gv = tape.grad(r.v_visual);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (mask.mask[size_t(i)]) {
            CHECK(ga.row(i).cwiseAbs().maxCoeff() > 0.0f);
        } else {
            CHECK(ga.row(i).isZero());  // exactly zero, not merely small
            CHECK(gv.row(i).isZero());
        }
    }
}

TEST_CASE("guided field: degeneracy, single-condition arithmetic, linearity") {
    net::NetConfig cfg = tiny_config();
    net::ModelParams p = net::init_params(cfg, 41);
    activate_gates(p, 42);
    const Eigen::Index n = 5;
    flow::TrainingSample s = random_sample(cfg, n, 43);
    net::ForwardInput in;
    Rng rng(44);
    in.noisy_audio = randf(rng, n, cfg.mel_dim);
    in.noisy_visual = randf(rng, n, cfg.visual_dim);
    in.context_audio = s.mel;
    in.context_visual = s.codes;
    in.tokens = s.tokens;
    in.t = 0.25;

    // all alphas zero: bitwise-identical to one conditional forward
    flow::GuidanceSpec off;
    off.alpha_mel = off.alpha_visual = off.alpha_text = 0.0;
    net::VectorFieldPair cond = net::forward(in, p);
    net::VectorFieldPair v0 = flow::cfg_field(in, p, off);
    CHECK(v0.v_audio == cond.v_audio);
    CHECK(v0.v_visual == cond.v_visual);

    // single condition: (1+a) v_cond - a v_nulled against a hand combination
    flow::GuidanceSpec single = off;
    single.alpha_mel = 0.7;
    net::ForwardInput dropped = in;
    dropped.drop_mel = true;
    net::VectorFieldPair uncond = net::forward(dropped, p);
    MatF expect_a = float(1.7) * cond.v_audio - float(0.7) * uncond.v_audio;
    MatF expect_v = float(1.7) * cond.v_visual - float(0.7) * uncond.v_visual;
    net::VectorFieldPair v1 = flow::cfg_field(in, p, single);
    CHECK(double((v1.v_audio - expect_a).cwiseAbs().maxCoeff()) < 1e-12);
    CHECK(double((v1.v_visual - expect_v).cwiseAbs().maxCoeff()) < 1e-12);

    // alphas and 2*alphas differ by exactly the sum of per-condition contrasts
    flow::GuidanceSpec g1;
    g1.alpha_mel = 0.5;
    g1.alpha_visual = 0.25;
    g1.alpha_text = 0.125;
    flow::GuidanceSpec g2 = g1;
    g2.alpha_mel *= 2;
    g2.alpha_visual *= 2;
    g2.alpha_text *= 2;
    net::VectorFieldPair va = flow::cfg_field(in, p, g1);
    net::VectorFieldPair vb = flow::cfg_field(in, p, g2);

    MatF contrast = MatF::Zero(n, cfg.mel_dim);
    for (int c = 0; c < 3; ++c) {
        net::ForwardInput d = in;
        double alpha = 0;
        if (c == 0) d.drop_mel = true, alpha = g1.alpha_mel;
        if (c == 1) d.drop_visual = true, alpha = g1.alpha_visual;
        if (c == 2) d.drop_text = true, alpha = g1.alpha_text;
        contrast += float(alpha) * (cond.v_audio - net::forward(d, p).v_audio);
    }
    CHECK(double((vb.v_audio - va.v_audio - contrast).cwiseAbs().maxCoeff()) < 1e-4);

    // the switch that nulls everything in the negative terms
    flow::GuidanceSpec all_null = single;
    all_null.null_all_conditions = true;
    net::ForwardInput all_dropped = in;
    all_dropped.drop_mel = all_dropped.drop_visual = all_dropped.drop_text = true;
    net::VectorFieldPair vn = net::forward(all_dropped, p);
    net::VectorFieldPair v2 = flow::cfg_field(in, p, all_null);
    MatF expect_n = float(1.7) * cond.v_audio - float(0.7) * vn.v_audio;
    CHECK(double((v2.v_audio - expect_n).cwiseAbs().maxCoeff()) < 1e-12);

    // a pre-dropped input is a caller bug
    CHECK_THROWS_AS(flow::cfg_field(dropped, p, single), ValidationError);
}

TEST_CASE("fixed-step integration matches closed forms") {
    Rng rng(55);
    MatD x0(3, 4);
    for (Eigen::Index r = 0; r < 3; ++r)
        for (Eigen::Index c = 0; c < 4; ++c) x0(r, c) = rng.uniform(-2.0, 2.0);

    // one Euler step on a constant field lands exactly on x0 + g
    MatD gfield(3, 4);
    for (Eigen::Index r = 0; r < 3; ++r)
        for (Eigen::Index c = 0; c < 4; ++c) gfield(r, c) = rng.uniform(-1.0, 1.0);
    MatD x = x0;
    flow::ode_integrate(x, [&](const MatD&, double) { return gfield; }, 1, flow::Solver::Euler);
    CHECK(x == (x0 + gfield).eval());

    // Euler on dx/dt = -x contracts by exactly (1 - 1/N) each step
    for (int steps : {10, 64, 100}) {
        MatD y = x0;
        flow::ode_integrate(y, [](const MatD& s, double) { return MatD(-s); }, steps,
                            flow::Solver::Euler);
        const double factor = std::pow(1.0 - 1.0 / double(steps), steps);
        CHECK(double((y - factor * x0).cwiseAbs().maxCoeff()) < 1e-12);
    }

    // midpoint halves the step error by ~4x when steps double (second order)
    auto midpoint_err = [&](int steps) {
        MatD y = x0;
        flow::ode_integrate(y, [](const MatD& s, double) { return MatD(-s); }, steps,
                            flow::Solver::Midpoint);
        return double((y - std::exp(-1.0) * x0).cwiseAbs().maxCoeff());
    };
    const double ratio = midpoint_err(16) / midpoint_err(32);
    CHECK(ratio > 3.5);
    CHECK(ratio < 4.5);

    // divergence is reported with the step number
    MatD z = x0;
    CHECK_THROWS_WITH_AS(
        flow::ode_integrate(
            z,
            [](const MatD& s, double) {
                MatD v = s;
                v(0, 0) = std::numeric_limits<double>::infinity();
                return v;
            },
            4, flow::Solver::Euler),
        doctest::Contains("step"), NumericError);

    MatD w = x0;
    CHECK_THROWS_AS(
        flow::ode_integrate(w, [](const MatD& s, double) { return s; }, 0, flow::Solver::Euler),
        ValidationError);
}

TEST_CASE("sampling is deterministic and returns only the generated region") {
    net::NetConfig cfg = tiny_config();
    net::ModelParams p = net::init_params(cfg, 61);
    activate_gates(p, 62);

    const Eigen::Index nref = 2, ngen = 4;
    Rng data_rng(63);
    MatF ref_mel = randf(data_rng, nref, cfg.mel_dim);
    MatF ref_codes = randf(data_rng, nref, cfg.visual_dim);
    features::TokenSequence tokens =
        features::tokenize("go", "on", size_t(nref + ngen), features::Vocab{});

    flow::GuidanceSpec spec;
    spec.steps = 3;

    Rng s1(7), s2(7), s3(8);
    flow::SampleOutput o1 = flow::ode_sample(p, ref_mel, ref_codes, ngen, tokens, spec, 93.75, s1);
    flow::SampleOutput o2 = flow::ode_sample(p, ref_mel, ref_codes, ngen, tokens, spec, 93.75, s2);
    flow::SampleOutput o3 = flow::ode_sample(p, ref_mel, ref_codes, ngen, tokens, spec, 93.75, s3);

    CHECK(o1.mel.data.rows() == cfg.mel_dim);
    CHECK(o1.mel.data.cols() == ngen);
    CHECK(o1.mel.frame_rate == 93.75);
    CHECK(o1.codes.frames() == ngen);
    CHECK(o1.mel.data.allFinite());
    CHECK(o1.codes.packed().allFinite());

    CHECK(o1.mel.data == o2.mel.data);
    CHECK(o1.codes.packed() == o2.codes.packed());
    CHECK(o1.mel.data != o3.mel.data);  // seed matters

    // midpoint solver and pure generation (no reference) both run
    flow::GuidanceSpec mid = spec;
    mid.solver = flow::Solver::Midpoint;
    mid.steps = 2;
    features::TokenSequence short_tokens = features::tokenize("a", "", 3, features::Vocab{});
    Rng s4(9);
    flow::SampleOutput o4 =
        flow::ode_sample(p, MatF(0, cfg.mel_dim), MatF(0, cfg.visual_dim), 3, short_tokens, mid,
                         93.75, s4);
    CHECK(o4.mel.data.cols() == 3);

    Rng s5(10);
    CHECK_THROWS_AS(flow::ode_sample(p, ref_mel, ref_codes, 2, tokens, spec, 93.75, s5),
                    ValidationError);  // tokens cover 6 frames, not 4
}
