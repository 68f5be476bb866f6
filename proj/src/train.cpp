#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "flowtalk/cli.hpp"
#include "flowtalk/io.hpp"
#include "flowtalk/net_graph.hpp"

namespace flowtalk::cli {

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

// u64 metadata rides in checkpoint extras as four 16-bit chunks, each exactly
// representable as a float
MatF u64_tensor(uint64_t v) {
    MatF m(1, 4);
    for (int i = 0; i < 4; ++i) m(0, i) = float((v >> (16 * (3 - i))) & 0xffffu);
    return m;
}

uint64_t tensor_u64(const MatF& m, const char* what) {
    if (m.rows() != 1 || m.cols() != 4) {
        throw IoError(strf("checkpoint field %s has shape %td x %td, expected 1 x 4", what,
                           m.rows(), m.cols()));
    }
    uint64_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 16) | (uint64_t(m(0, i)) & 0xffffu);
    return v;
}

const MatF* find_extra(const std::vector<std::pair<std::string, MatF>>& extras,
                       const std::string& name) {
    for (const auto& [k, v] : extras) {
        if (k == name) return &v;
    }
    return nullptr;
}

uint64_t train_step_seed(uint64_t seed, int step) {
    return mix_seed(mix_seed(seed, fnv1a64("train.step")), uint64_t(step));
}

struct StepLoss {
    double total = 0, mel = 0, pose = 0, expr = 0, eye = 0;
};

}  // namespace

TrainResult cmd_train(const RunConfig& cfg) {
    cfg.validate();
    const data::Dataset ds = data::read_dataset(cfg.paths.dataset);
    if (ds.samples.empty()) {
        throw ValidationError(strf("dataset %s has no samples", cfg.paths.dataset.c_str()));
    }
    const int data_mel = int(ds.samples[0].mel.data.rows());
    if (cfg.net.mel_dim != data_mel) {
        throw ValidationError(strf("net.mel_dim %d but the dataset carries %d mel bands",
                                   cfg.net.mel_dim, data_mel));
    }
    for (const auto& s : ds.samples) {
        if (s.tokens.vocab_size > cfg.net.vocab_size) {
            throw ValidationError(strf("dataset vocab %d exceeds net.vocab_size %d",
                                       s.tokens.vocab_size, cfg.net.vocab_size));
        }
    }

    const std::vector<data::Batch> batches = data::collate(ds.samples, cfg.optimizer.batch_frames);
    std::vector<flow::TrainingSample> tensors;
    tensors.reserve(ds.samples.size());
    for (const auto& s : ds.samples) tensors.push_back(s.tensors());

    // fresh parameters, or checkpoint + optimizer state on resume
    net::ModelParams params;
    std::vector<MatF> adam_m, adam_v;
    int start_step = 0;
    if (cfg.optimizer.resume.empty()) {
        params = net::init_params(cfg.net, cfg.optimizer.seed);
        for (const auto& [name, value] : params.tensors) {
            adam_m.push_back(MatF::Zero(value.rows(), value.cols()));
            adam_v.push_back(MatF::Zero(value.rows(), value.cols()));
        }
    } else {
        net::Checkpoint ck = net::load_checkpoint(cfg.optimizer.resume);
        if (!(ck.params.cfg == cfg.net)) {
            throw ValidationError(strf("checkpoint %s was trained with a different net config",
                                       cfg.optimizer.resume.c_str()));
        }
        const MatF* seed_t = find_extra(ck.extras, "meta.seed");
        const MatF* step_t = find_extra(ck.extras, "meta.step");
        if (seed_t == nullptr || step_t == nullptr) {
            throw IoError(strf("checkpoint %s lacks training metadata",
                               cfg.optimizer.resume.c_str()));
        }
        if (tensor_u64(*seed_t, "meta.seed") != cfg.optimizer.seed) {
            throw ValidationError(strf(
                "checkpoint %s was trained with seed %llu, config says %llu",
                cfg.optimizer.resume.c_str(),
                static_cast<unsigned long long>(tensor_u64(*seed_t, "meta.seed")),
                static_cast<unsigned long long>(cfg.optimizer.seed)));
        }
        start_step = int(tensor_u64(*step_t, "meta.step"));
        if (start_step >= cfg.optimizer.steps) {
            throw ValidationError(strf("checkpoint is already at step %d, target is %d",
                                       start_step, cfg.optimizer.steps));
        }
        params = std::move(ck.params);
        for (const auto& [name, value] : params.tensors) {
            const MatF* m = find_extra(ck.extras, "adam.m." + name);
            const MatF* v = find_extra(ck.extras, "adam.v." + name);
            if (m == nullptr || v == nullptr) {
                throw IoError(strf("checkpoint %s lacks optimizer state for %s",
                                   cfg.optimizer.resume.c_str(), name.c_str()));
            }
            adam_m.push_back(*m);
            adam_v.push_back(*v);
        }
    }

    namespace fs = std::filesystem;
    fs::create_directories(cfg.paths.checkpoints);
    fs::create_directories(cfg.paths.reports);
    const std::string metrics_path = cfg.paths.reports + "/train_metrics.csv";
    std::string metrics;
    const bool fresh_log = cfg.optimizer.resume.empty() || !io::file_exists(metrics_path);
    if (fresh_log) {
        metrics = strf("# config_hash=%016llx seed=%llu\n",
                       static_cast<unsigned long long>(cfg.hash()),
                       static_cast<unsigned long long>(cfg.optimizer.seed));
        metrics += "step,loss,mel,pose,expr,eye,seconds\n";
    } else {
        metrics = io::slurp_text(metrics_path);
    }

    auto save = [&](int completed, const std::string& path) {
        std::vector<std::pair<std::string, MatF>> extras;
        extras.reserve(2 * params.tensors.size() + 3);
        for (size_t i = 0; i < params.tensors.size(); ++i) {
            extras.emplace_back("adam.m." + params.tensors[i].first, adam_m[i]);
            extras.emplace_back("adam.v." + params.tensors[i].first, adam_v[i]);
        }
        extras.emplace_back("meta.step", u64_tensor(uint64_t(completed)));
        extras.emplace_back("meta.seed", u64_tensor(cfg.optimizer.seed));
        extras.emplace_back("meta.config_hash", u64_tensor(cfg.hash()));
        net::save_checkpoint(path, params, extras);
    };

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult result;
    StepLoss loss;
    for (int step = start_step; step < cfg.optimizer.steps; ++step) {
        const data::Batch& batch = batches[size_t(step) % batches.size()];
        const uint64_t sseed = train_step_seed(cfg.optimizer.seed, step);
        const double inv_n = 1.0 / double(batch.indices.size());

        std::vector<MatF> grads;
        grads.reserve(params.tensors.size());
        for (const auto& [name, value] : params.tensors) {
            grads.push_back(MatF::Zero(value.rows(), value.cols()));
        }
        loss = StepLoss{};
        try {
            for (size_t j = 0; j < batch.indices.size(); ++j) {
                const flow::TrainingSample& clip = tensors[batch.indices[j]];
                Rng rng(mix_seed(sseed, uint64_t(j)));
                const flow::MaskSpec mask = flow::sample_mask(clip.frames(), rng);
                const double t = flow::sample_timestep(rng);
                const flow::DropFlags drop =
                    flow::drop_conditions(rng, cfg.optimizer.cond_dropout);

                ad::Tape<float> tape;
                net::GraphBuilder<float> g = net::GraphBuilder<float>::attach(tape, params, true);
                const flow::CfmLossGraph<float> out =
                    flow::cfm_loss_graph(g, clip, mask, t, drop, cfg.weights, rng);
                tape.backward(out.total_var);
                for (size_t i = 0; i < grads.size(); ++i) grads[i] += tape.grad(g.vars[i]);
                loss.total += out.total * inv_n;
                loss.mel += out.mel * inv_n;
                loss.pose += out.pose * inv_n;
                loss.expr += out.expr * inv_n;
                loss.eye += out.eye * inv_n;
            }
        } catch (const NumericError& e) {
            throw NumericError(strf("%s at step %d (batch seed %llu)", e.what(), step,
                                    static_cast<unsigned long long>(sseed)));
        }
        if (!std::isfinite(loss.total)) {
            throw NumericError(strf("non-finite loss at step %d (batch seed %llu)", step,
                                    static_cast<unsigned long long>(sseed)));
        }

        // mean over clips, then global-norm clipping
        double sq_norm = 0.0;
        for (auto& gmat : grads) {
            gmat *= float(inv_n);
            sq_norm += double(gmat.squaredNorm());
        }
        const double norm = std::sqrt(sq_norm);
        if (!std::isfinite(norm)) {
            throw NumericError(strf("non-finite gradient at step %d (batch seed %llu)", step,
                                    static_cast<unsigned long long>(sseed)));
        }
        const float clip_scale =
            norm > cfg.optimizer.grad_clip ? float(cfg.optimizer.grad_clip / norm) : 1.0f;

        const int adam_t = step + 1;
        const float corr1 = float(1.0 / (1.0 - std::pow(kAdamBeta1, adam_t)));
        const float corr2 = float(1.0 / (1.0 - std::pow(kAdamBeta2, adam_t)));
        const float b1 = float(kAdamBeta1), b2 = float(kAdamBeta2);
        const float lr = float(cfg.optimizer.learning_rate), eps = float(kAdamEps);
        for (size_t i = 0; i < grads.size(); ++i) {
            const MatF g2 = grads[i] * clip_scale;
            adam_m[i] = b1 * adam_m[i] + (1.0f - b1) * g2;
            adam_v[i] = (b2 * adam_v[i].array() + (1.0f - b2) * g2.array().square()).matrix();
            params.tensors[i].second.array() -=
                lr * (adam_m[i].array() * corr1) /
                ((adam_v[i].array() * corr2).sqrt() + eps);
        }

        if (step % cfg.optimizer.log_every == 0 || step + 1 == cfg.optimizer.steps) {
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            metrics += strf("%d,%.8g,%.8g,%.8g,%.8g,%.8g,%.3f\n", step, loss.total, loss.mel,
                            loss.pose, loss.expr, loss.eye, secs);
            std::fprintf(stderr, "step %6d  loss %.5f  (mel %.4f pose %.4f expr %.4f eye %.4f)\n",
                         step, loss.total, loss.mel, loss.pose, loss.expr, loss.eye);
        }
        if ((step + 1) % cfg.optimizer.checkpoint_every == 0 ||
            step + 1 == cfg.optimizer.steps) {
            const std::string path = strf("%s/step_%06d.ftck", cfg.paths.checkpoints.c_str(),
                                          step + 1);
            save(step + 1, path);
            save(step + 1, cfg.paths.checkpoints + "/last.ftck");
            result.checkpoint_path = path;
        }
    }

    io::spew_text(metrics_path, metrics);
    result.steps_run = cfg.optimizer.steps - start_step;
    result.final_loss = loss.total;
    result.metrics_path = metrics_path;
    return result;
}

}  // namespace flowtalk::cli
