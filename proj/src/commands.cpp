#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "flowtalk/cli.hpp"
#include "flowtalk/io.hpp"

namespace fs = std::filesystem;

namespace flowtalk::cli {

namespace {

// ---------------------------------------------------------------------------
// shared plumbing

void ensure_parent_dir(const std::string& path) {
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

std::string styles_sidecar_path(const std::string& dataset_path) {
    return dataset_path + ".styles.txt";
}

std::string manifest_path(const std::string& dataset_path) {
    return dataset_path + ".manifest.tsv";
}

// The dataset records only style ids; the per-band mel offsets the decoder
// needs to strip live in a text sidecar written by `prepare`.
std::vector<data::StyleProfile> load_styles(const std::string& dataset_path) {
    const std::string path = styles_sidecar_path(dataset_path);
    if (!io::file_exists(path)) {
        throw IoError(strf("style table %s not found; run `flowtalk prepare` to build the "
                           "dataset and its sidecar", path.c_str()));
    }
    return data::styles_from_matrix(io::read_matrix_text(path));
}

const data::StyleProfile& style_for(const std::vector<data::StyleProfile>& styles, int id) {
    for (const auto& s : styles) {
        if (s.style_id == id) return s;
    }
    throw ValidationError(strf("style %d is not in the style table", id));
}

Eigen::Index frames_for_seconds(double seconds, double frame_rate) {
    return Eigen::Index(std::floor(seconds * frame_rate)) + 1;
}

// Checkpoints are trained under a specific architecture; the config used for
// sampling or scoring must describe the same one so the recorded config hash
// stays truthful.
net::Checkpoint load_matching_checkpoint(const std::string& path, const net::NetConfig& want) {
    net::Checkpoint ck = net::load_checkpoint(path);
    if (!(ck.params.cfg == want)) {
        throw ValidationError(strf("checkpoint %s was trained with a different net config",
                                   path.c_str()));
    }
    return ck;
}

// ---------------------------------------------------------------------------
// plot writers: portable PGM/PPM so reports need no image library

uint8_t shade(float v, float lo, float hi) {
    if (!(hi > lo)) return 0;
    const float u = (v - lo) / (hi - lo);
    return uint8_t(std::lround(255.0f * std::min(1.0f, std::max(0.0f, u))));
}

// heatmap of a matrix, one pixel per cell; row 0 of `m` is drawn at the bottom
void write_heatmap_pgm(const std::string& path, const MatF& m) {
    const Eigen::Index h = m.rows(), w = m.cols();
    if (h < 1 || w < 1) throw ValidationError(strf("nothing to plot for %s", path.c_str()));
    const float lo = m.minCoeff(), hi = m.maxCoeff();
    std::vector<uint8_t> img;
    img.reserve(size_t(h) * size_t(w) + 64);
    const std::string header = strf("P5\n%td %td\n255\n", w, h);
    img.insert(img.end(), header.begin(), header.end());
    for (Eigen::Index y = 0; y < h; ++y) {
        for (Eigen::Index x = 0; x < w; ++x) img.push_back(shade(m(h - 1 - y, x), lo, hi));
    }
    io::spew(path, img);
}

// time-series chart: one colored trace per column of `series` (frames x channels)
void write_series_ppm(const std::string& path, const MatF& series, int height) {
    const Eigen::Index n = series.rows(), ch = series.cols();
    if (n < 1 || ch < 1) throw ValidationError(strf("nothing to plot for %s", path.c_str()));
    static const uint8_t palette[6][3] = {{220, 30, 30},  {30, 140, 220}, {30, 170, 60},
                                          {230, 150, 20}, {150, 60, 200}, {80, 80, 80}};
    const float lo = series.minCoeff(), hi = series.maxCoeff();
    const float span = hi > lo ? hi - lo : 1.0f;
    const int w = int(n), h = height;
    std::vector<uint8_t> px(size_t(w) * size_t(h) * 3, 255);
    auto put = [&](int x, int y, const uint8_t* rgb) {
        uint8_t* p = &px[(size_t(y) * size_t(w) + size_t(x)) * 3];
        p[0] = rgb[0];
        p[1] = rgb[1];
        p[2] = rgb[2];
    };
    auto to_y = [&](float v) {
        const int y = int(std::lround((hi - v) / span * float(h - 1)));
        return std::min(h - 1, std::max(0, y));
    };
    for (Eigen::Index c = 0; c < ch; ++c) {
        const uint8_t* rgb = palette[c % 6];
        int prev = to_y(series(0, c));
        put(0, prev, rgb);
        for (int x = 1; x < w; ++x) {
            const int cur = to_y(series(x, c));
            for (int y = std::min(prev, cur); y <= std::max(prev, cur); ++y) put(x, y, rgb);
            prev = cur;
        }
    }
    std::vector<uint8_t> img;
    const std::string header = strf("P6\n%d %d\n255\n", w, h);
    img.reserve(px.size() + header.size());
    img.insert(img.end(), header.begin(), header.end());
    img.insert(img.end(), px.begin(), px.end());
    io::spew(path, img);
}

// ---------------------------------------------------------------------------
// corpus text: lowercase words with single spaces, never leading/trailing

std::string random_text(double duration_s, Rng& rng) {
    // one character short of the 10/s budget so the clip always has headroom
    const int n = std::max(1, int(std::floor(duration_s * data::kCharsPerSecond)) - 1);
    std::string text;
    text.reserve(size_t(n));
    for (int k = 0; k < n; ++k) {
        const bool can_space = k > 0 && k + 1 < n && text.back() != ' ';
        if (can_space && rng.uniform() < 0.18) {
            text.push_back(' ');
        } else {
            text.push_back(char('a' + std::min(25, int(rng.uniform() * 26.0))));
        }
    }
    return text;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string cmd_prepare(const RunConfig& cfg) {
    cfg.validate();
    const PrepareConfig& p = cfg.prepare;
    const uint64_t seed = cfg.optimizer.seed;

    std::vector<data::StyleProfile> styles;
    styles.reserve(size_t(p.styles));
    for (int s = 0; s < p.styles; ++s) {
        styles.push_back(data::corpus_style(s, p.styles, seed, cfg.net.mel_dim));
    }

    data::Dataset ds;
    ds.frame_rate = data::kDefaultFrameRate;
    ds.samples.reserve(size_t(p.styles) * size_t(p.clips_per_style));

    std::string manifest = strf("# config_hash=%016llx seed=%llu\n",
                                static_cast<unsigned long long>(cfg.hash()),
                                static_cast<unsigned long long>(seed));
    manifest += "clip\tstyle\tduration_s\ttext\n";

    // clips are interleaved across styles so any contiguous evaluation
    // holdout still covers every style
    int clip = 0;
    for (int j = 0; j < p.clips_per_style; ++j) {
        for (int s = 0; s < p.styles; ++s, ++clip) {
            const uint64_t clip_key = (uint64_t(s) << 32) | uint64_t(j);
            Rng rng(mix_seed(mix_seed(seed, fnv1a64("prepare.clip")), clip_key));
            const double dur =
                p.min_duration_s + (p.max_duration_s - p.min_duration_s) * rng.uniform();
            const std::string text = random_text(dur, rng);
            const uint64_t synth_seed = mix_seed(mix_seed(seed, fnv1a64("prepare.synth")),
                                                 clip_key);
            ds.samples.push_back(data::synth_sample(styles[size_t(s)], text, dur, synth_seed,
                                                    ds.frame_rate));
            manifest += strf("%d\t%d\t%.6f\t%s\n", clip, s, dur, text.c_str());
        }
    }

    ensure_parent_dir(cfg.paths.dataset);
    data::write_dataset(ds, cfg.paths.dataset);
    io::spew_text(manifest_path(cfg.paths.dataset), manifest);
    io::write_matrix_text(styles_sidecar_path(cfg.paths.dataset), data::styles_to_matrix(styles),
                          strf("config_hash=%016llx seed=%llu",
                               static_cast<unsigned long long>(cfg.hash()),
                               static_cast<unsigned long long>(seed)));
    std::fprintf(stderr, "prepared %zu clips (%d styles x %d) in %s\n", ds.samples.size(),
                 p.styles, p.clips_per_style, cfg.paths.dataset.c_str());
    return cfg.paths.dataset;
}

// ---------------------------------------------------------------------------

SampleResult cmd_sample(const RunConfig& cfg) {
    cfg.validate();
    const std::string ck_path = cfg.sample.checkpoint.empty()
                                    ? cfg.paths.checkpoints + "/last.ftck"
                                    : cfg.sample.checkpoint;
    const net::Checkpoint ck = load_matching_checkpoint(ck_path, cfg.net);

    const data::TrainingSample ref =
        data::read_sample(cfg.paths.dataset, size_t(cfg.sample.reference_index));
    const double rate = ref.mel.frame_rate;
    const Eigen::Index raw = ref.frames();
    const Eigen::Index min_frames = frames_for_seconds(1.0, rate);
    if (raw < min_frames) {
        throw ValidationError(strf("reference clip %d is %.2f s, need at least 1 s",
                                   cfg.sample.reference_index, double(raw) / rate));
    }
    const Eigen::Index ref_frames = std::min(raw, frames_for_seconds(10.0, rate));
    const bool truncated = ref_frames < raw;
    if (truncated) {
        std::fprintf(stderr, "reference clip %d TRUNCATED from %.2f s to %.2f s\n",
                     cfg.sample.reference_index, double(raw) / rate, double(ref_frames) / rate);
    }
    const double ref_seconds = double(ref_frames) / rate;

    const features::Vocab vocab{};
    std::string ref_text = features::detokenize(ref.tokens, vocab);
    // characters that still start inside the (possibly truncated) reference
    const size_t keep = std::min(
        ref_text.size(), size_t(std::floor(ref_seconds * data::kCharsPerSecond)));
    ref_text.resize(keep);

    if (double(cfg.sample.text.size()) > cfg.sample.duration_s * data::kCharsPerSecond + 1e-9) {
        throw ValidationError(strf(
            "driving text has %zu characters; %.2f s at %.0f chars/s fits at most %d",
            cfg.sample.text.size(), cfg.sample.duration_s, data::kCharsPerSecond,
            int(cfg.sample.duration_s * data::kCharsPerSecond)));
    }
    const Eigen::Index gen_frames = frames_for_seconds(cfg.sample.duration_s, rate);
    const features::TokenSequence tokens =
        features::tokenize(ref_text, cfg.sample.text, size_t(ref_frames + gen_frames), vocab);

    const MatF ref_mel = ref.mel.data.leftCols(ref_frames).transpose();
    const MatF ref_codes = ref.codes.packed().topRows(ref_frames);
    Rng rng(mix_seed(cfg.optimizer.seed, fnv1a64("sample.ode")));
    const flow::SampleOutput out = flow::ode_sample(ck.params, ref_mel, ref_codes, gen_frames,
                                                    tokens, cfg.guidance, rate, rng);

    fs::create_directories(cfg.paths.reports);
    SampleResult result;
    result.reference_frames = ref_frames;
    result.truncated = truncated;
    result.generated_frames = gen_frames;

    // mel rides the standard dataset container so existing readers open it
    data::Dataset one;
    one.frame_rate = rate;
    data::TrainingSample rec;
    rec.tokens = features::tokenize(cfg.sample.text, "", size_t(gen_frames), vocab);
    rec.mel = out.mel;
    rec.codes = out.codes;
    rec.style_id = ref.style_id;
    one.samples.push_back(std::move(rec));
    result.mel_path = cfg.paths.reports + "/sample_mel.ftds";
    data::write_dataset(one, result.mel_path);

    result.codes_path = cfg.paths.reports + "/sample_codes.txt";
    io::write_matrix_text(result.codes_path, out.codes.packed().cast<double>(),
                          strf("visual codes, one frame per row: 51 expression + 4 eye + 6 pose"
                               " (config_hash=%016llx)",
                               static_cast<unsigned long long>(cfg.hash())));

    std::string meta = strf("config_hash=%016llx\n", static_cast<unsigned long long>(cfg.hash()));
    meta += strf("seed=%llu\n", static_cast<unsigned long long>(cfg.optimizer.seed));
    meta += strf("checkpoint=%s\n", ck_path.c_str());
    meta += strf("dataset=%s\n", cfg.paths.dataset.c_str());
    meta += strf("reference_index=%d\n", cfg.sample.reference_index);
    meta += strf("reference_frames_raw=%td\n", raw);
    meta += strf("reference_frames_used=%td\n", ref_frames);
    meta += strf("reference_seconds_used=%.6f\n", ref_seconds);
    meta += strf("truncated=%d\n", truncated ? 1 : 0);
    meta += strf("reference_text=%s\n", ref_text.c_str());
    meta += strf("text=%s\n", cfg.sample.text.c_str());
    meta += strf("duration_s=%.6f\n", cfg.sample.duration_s);
    meta += strf("generated_frames=%td\n", gen_frames);
    meta += strf("frame_rate=%.6f\n", rate);
    result.meta_path = cfg.paths.reports + "/sample_meta.txt";
    io::spew_text(result.meta_path, meta);

    if (cfg.sample.plots) {
        write_heatmap_pgm(cfg.paths.reports + "/sample_mel.pgm", out.mel.data);
        write_series_ppm(cfg.paths.reports + "/sample_pose.ppm", out.codes.pose, 160);
        if (gen_frames > 1) {
            const MatF packed = out.codes.packed();
            const MatF motion = (packed.bottomRows(gen_frames - 1) -
                                 packed.topRows(gen_frames - 1))
                                    .cwiseAbs()
                                    .transpose();
            write_heatmap_pgm(cfg.paths.reports + "/sample_motion.pgm", motion);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------

namespace {

// reference rows prepended to a generated tail, as one full-length clip
features::VisualCodes splice_codes(const features::VisualCodes& ref, Eigen::Index ref_frames,
                                   const features::VisualCodes& tail) {
    features::VisualCodes out;
    const Eigen::Index n = ref_frames + tail.frames();
    out.expr.resize(n, ref.expr.cols());
    out.eye.resize(n, ref.eye.cols());
    out.pose.resize(n, ref.pose.cols());
    out.expr << ref.expr.topRows(ref_frames), tail.expr;
    out.eye << ref.eye.topRows(ref_frames), tail.eye;
    out.pose << ref.pose.topRows(ref_frames), tail.pose;
    out.frame_rate = ref.frame_rate;
    return out;
}

features::VisualCodes tail_codes(const features::VisualCodes& codes, Eigen::Index tail) {
    features::VisualCodes out;
    out.expr = codes.expr.bottomRows(tail);
    out.eye = codes.eye.bottomRows(tail);
    out.pose = codes.pose.bottomRows(tail);
    out.frame_rate = codes.frame_rate;
    return out;
}

}  // namespace

EvalResult cmd_eval(const RunConfig& cfg) {
    cfg.validate();
    const data::Dataset ds = data::read_dataset(cfg.paths.dataset);
    const size_t n = ds.samples.size();
    if (n == 0) {
        throw ValidationError(strf("dataset %s has no samples", cfg.paths.dataset.c_str()));
    }
    const std::vector<data::StyleProfile> styles = load_styles(cfg.paths.dataset);

    size_t hold = std::max<size_t>(1, size_t(std::floor(double(n) * cfg.eval.holdout)));
    hold = std::min(hold, n);
    const size_t first = n - hold;
    size_t count = hold;
    if (cfg.eval.max_clips > 0) count = std::min(count, size_t(cfg.eval.max_clips));

    // "none" scores the ground truth against itself: a fixed point every
    // metric must recognize (zero distances, perfect decode)
    const bool ground_truth = cfg.eval.checkpoint == "none";
    std::string ck_path = "none";
    net::ModelParams params;
    if (!ground_truth) {
        ck_path = cfg.eval.checkpoint.empty() ? cfg.paths.checkpoints + "/last.ftck"
                                              : cfg.eval.checkpoint;
        params = load_matching_checkpoint(ck_path, cfg.net).params;
    }

    const features::Vocab vocab{};
    fs::create_directories(cfg.paths.reports);
    std::string csv = strf("# dataset=%s holdout_clips=%zu\n", cfg.paths.dataset.c_str(), count);
    csv += "clip," + eval::metric_csv_header() + "\n";

    eval::MetricReport sum;
    std::string log;
    for (size_t k = 0; k < count; ++k) {
        const size_t idx = first + k;
        const data::TrainingSample& clip = ds.samples[idx];
        const Eigen::Index frames = clip.frames();
        if (frames < 2) {
            throw ValidationError(strf("clip %zu has %td frames, too short to split", idx,
                                       frames));
        }
        const double rate = clip.mel.frame_rate;
        Eigen::Index ref_frames =
            Eigen::Index(std::floor(double(frames) * cfg.eval.reference_fraction));
        ref_frames = std::max<Eigen::Index>(1, std::min(ref_frames, frames - 1));
        const Eigen::Index tail = frames - ref_frames;

        features::MelSpectrogram gen_mel;
        gen_mel.frame_rate = rate;
        features::VisualCodes gen_codes;
        if (ground_truth) {
            gen_mel.data = clip.mel.data;
            gen_codes = clip.codes;
        } else {
            Rng rng(mix_seed(mix_seed(cfg.optimizer.seed, fnv1a64("eval.clip")), uint64_t(idx)));
            const flow::SampleOutput out = flow::ode_sample(
                params, clip.mel.data.leftCols(ref_frames).transpose(),
                clip.codes.packed().topRows(ref_frames), tail, clip.tokens, cfg.guidance, rate,
                rng);
            gen_mel.data.resize(clip.mel.data.rows(), frames);
            gen_mel.data << clip.mel.data.leftCols(ref_frames), out.mel.data;
            gen_codes = splice_codes(clip.codes, ref_frames, out.codes);
        }

        eval::MetricReport r;
        r.seed = cfg.optimizer.seed;
        r.checkpoint = ck_path;
        r.config_hash = cfg.hash();
        const Eigen::Index mel_cells = clip.mel.data.rows() * tail;
        const Eigen::Index code_cells = Eigen::Index(clip.codes.packed().cols()) * tail;
        const double abs_err =
            double((gen_mel.data.rightCols(tail) - clip.mel.data.rightCols(tail))
                       .cwiseAbs()
                       .sum()) +
            double((gen_codes.packed().bottomRows(tail) - clip.codes.packed().bottomRows(tail))
                       .cwiseAbs()
                       .sum());
        r.recon_l1 = abs_err / double(mel_cells + code_cells);
        r.e_fd = eval::e_fid({tail_codes(clip.codes, tail)}, {tail_codes(gen_codes, tail)});
        r.p_fd = eval::p_fid({tail_codes(clip.codes, tail)}, {tail_codes(gen_codes, tail)});
        r.sync_corr = eval::sync_corr(gen_mel, gen_codes);
        r.decode_acc = eval::decode_acc(gen_mel, features::detokenize(clip.tokens, vocab),
                                        style_for(styles, clip.style_id));
        r.validate();

        csv += strf("%zu,", idx) + eval::metric_csv_row(r) + "\n";
        log += strf("clip=%zu ", idx) + eval::metric_log_line(r) + "\n";
        sum.recon_l1 += r.recon_l1;
        sum.e_fd += r.e_fd;
        sum.p_fd += r.p_fd;
        sum.sync_corr += r.sync_corr;
        sum.decode_acc += r.decode_acc;
    }

    const double inv = 1.0 / double(count);
    sum.recon_l1 *= inv;
    sum.e_fd *= inv;
    sum.p_fd *= inv;
    sum.sync_corr *= inv;
    sum.decode_acc *= inv;
    sum.seed = cfg.optimizer.seed;
    sum.checkpoint = ck_path;
    sum.config_hash = cfg.hash();
    csv += "summary," + eval::metric_csv_row(sum) + "\n";
    log += "clip=summary " + eval::metric_log_line(sum) + "\n";

    EvalResult result;
    result.report_path = cfg.paths.reports + "/eval_report.csv";
    io::spew_text(result.report_path, csv);
    io::spew_text(cfg.paths.reports + "/eval_log.txt", log);
    result.summary = sum;
    result.clips = int(count);
    std::fprintf(stderr, "evaluated %zu clips against %s: %s\n", count, ck_path.c_str(),
                 eval::metric_log_line(sum).c_str());
    return result;
}

// ---------------------------------------------------------------------------

AblateResult cmd_ablate(const RunConfig& cfg) {
    cfg.validate();
    static const net::FusionStrategy kStrategies[] = {
        net::FusionStrategy::Add, net::FusionStrategy::Linear,
        net::FusionStrategy::CrossAttention, net::FusionStrategy::MMAttention};

    fs::create_directories(cfg.paths.reports);
    std::string table = strf("# seed=%llu\n",
                             static_cast<unsigned long long>(cfg.optimizer.seed));
    table += "strategy,status,final_loss,recon_l1,e_fd,p_fd,sync_corr,decode_acc,config_hash\n";

    AblateResult result;
    for (const net::FusionStrategy s : kStrategies) {
        const std::string name = net::fusion_strategy_name(s);
        RunConfig c = cfg;
        c.net.fusion_strategy = s;
        c.paths.checkpoints = cfg.paths.checkpoints + "/" + name;
        c.paths.reports = cfg.paths.reports + "/" + name;

        AblateRow row;
        row.strategy = name;
        std::fprintf(stderr, "=== ablation: fusion %s ===\n", name.c_str());
        try {
            const TrainResult tr = cmd_train(c);
            RunConfig e = c;
            e.eval.checkpoint = tr.checkpoint_path;
            const EvalResult ev = cmd_eval(e);
            row.final_loss = tr.final_loss;
            row.metrics = ev.summary;
            table += strf("%s,ok,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%016llx\n", name.c_str(),
                          tr.final_loss, ev.summary.recon_l1, ev.summary.e_fd, ev.summary.p_fd,
                          ev.summary.sync_corr, ev.summary.decode_acc,
                          static_cast<unsigned long long>(c.hash()));
        } catch (const NumericError& err) {
            // one diverging variant must not sink the comparison
            row.failed = true;
            std::fprintf(stderr, "ablation %s failed: %s\n", name.c_str(), err.what());
            table += strf("%s,failed,nan,nan,nan,nan,nan,nan,%016llx\n", name.c_str(),
                          static_cast<unsigned long long>(c.hash()));
        }
        result.rows.push_back(std::move(row));
    }

    result.table_path = cfg.paths.reports + "/ablation.csv";
    io::spew_text(result.table_path, table);

    std::printf("%-16s %-8s %12s %12s %12s %12s %10s %10s\n", "strategy", "status", "final_loss",
                "recon_l1", "e_fd", "p_fd", "sync_corr", "decode");
    for (const AblateRow& row : result.rows) {
        if (row.failed) {
            std::printf("%-16s %-8s\n", row.strategy.c_str(), "failed");
        } else {
            std::printf("%-16s %-8s %12.6f %12.6f %12.6f %12.6f %10.4f %10.4f\n",
                        row.strategy.c_str(), "ok", row.final_loss, row.metrics.recon_l1,
                        row.metrics.e_fd, row.metrics.p_fd, row.metrics.sync_corr,
                        row.metrics.decode_acc);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------

namespace {

const char kUsage[] =
    "usage: flowtalk <prepare|train|sample|eval|ablate> --config <path>\n"
    "                [--seed N] [--out DIR] [key=value ...]\n";

bool parse_u64(const std::string& s, uint64_t& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (errno != 0 || end == nullptr || *end != '\0') return false;
    out = v;
    return true;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    try {
        if (args.empty()) {
            std::fputs(kUsage, stderr);
            return 2;
        }
        const std::string cmd = args[0];
        const bool known = cmd == "prepare" || cmd == "train" || cmd == "sample" ||
                           cmd == "eval" || cmd == "ablate";
        if (!known) {
            std::fprintf(stderr, "unknown command '%s'\n%s", cmd.c_str(), kUsage);
            return 2;
        }

        std::string config_path, out_dir;
        bool have_seed = false;
        uint64_t seed = 0;
        std::vector<std::pair<std::string, std::string>> overrides;
        for (size_t i = 1; i < args.size(); ++i) {
            const std::string& a = args[i];
            auto next = [&]() -> const std::string& {
                if (i + 1 >= args.size()) {
                    throw ValidationError(strf("%s needs a value", a.c_str()));
                }
                return args[++i];
            };
            if (a == "--config") {
                config_path = next();
            } else if (a == "--seed") {
                if (!parse_u64(next(), seed)) {
                    throw ValidationError(strf("--seed wants an unsigned integer, got '%s'",
                                               args[i].c_str()));
                }
                have_seed = true;
            } else if (a == "--out") {
                out_dir = next();
            } else if (a.size() >= 2 && a[0] == '-') {
                std::fprintf(stderr, "unknown option '%s'\n%s", a.c_str(), kUsage);
                return 2;
            } else if (a.find('=') != std::string::npos) {
                const size_t eq = a.find('=');
                overrides.emplace_back(a.substr(0, eq), a.substr(eq + 1));
            } else {
                std::fprintf(stderr, "stray argument '%s'\n%s", a.c_str(), kUsage);
                return 2;
            }
        }
        if (config_path.empty()) {
            std::fprintf(stderr, "missing --config\n%s", kUsage);
            return 2;
        }

        RunConfig cfg = load_config(config_path);
        for (const auto& [k, v] : overrides) apply_override(cfg, k, v);
        if (have_seed) cfg.optimizer.seed = seed;
        if (!out_dir.empty()) {
            cfg.paths.reports = out_dir;
            cfg.paths.checkpoints = out_dir + "/checkpoints";
            if (cmd == "prepare") cfg.paths.dataset = out_dir + "/corpus.ftds";
        }

        if (cmd == "prepare") {
            const std::string path = cmd_prepare(cfg);
            std::printf("dataset %s\nmanifest %s\nstyles %s\n", path.c_str(),
                        manifest_path(path).c_str(), styles_sidecar_path(path).c_str());
        } else if (cmd == "train") {
            const TrainResult tr = cmd_train(cfg);
            std::printf("trained %d steps, final loss %.6f\ncheckpoint %s\nmetrics %s\n",
                        tr.steps_run, tr.final_loss, tr.checkpoint_path.c_str(),
                        tr.metrics_path.c_str());
        } else if (cmd == "sample") {
            const SampleResult sr = cmd_sample(cfg);
            std::printf("mel %s\ncodes %s\nmeta %s\nreference_frames %td%s\ngenerated_frames "
                        "%td\n",
                        sr.mel_path.c_str(), sr.codes_path.c_str(), sr.meta_path.c_str(),
                        sr.reference_frames, sr.truncated ? " (truncated)" : "",
                        sr.generated_frames);
        } else if (cmd == "eval") {
            const EvalResult ev = cmd_eval(cfg);
            std::printf("report %s\nclips %d\n%s\n", ev.report_path.c_str(), ev.clips,
                        eval::metric_log_line(ev.summary).c_str());
        } else {
            const AblateResult ab = cmd_ablate(cfg);
            std::printf("table %s\n", ab.table_path.c_str());
        }
        return 0;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

}  // namespace flowtalk::cli
