#pragma once

// Operator-facing commands: corpus preparation, training, stylized sampling,
// evaluation, and the fusion-strategy ablation. Everything is driven by a
// strict key=value config file; unknown keys are errors so hyperparameters
// cannot drift silently. Commands are exposed as functions so tests can call
// them in-process; run_cli wraps them with argument parsing and exit codes.

#include <string>
#include <vector>

#include "flowtalk/data.hpp"
#include "flowtalk/eval.hpp"
#include "flowtalk/flow.hpp"
#include "flowtalk/net.hpp"

namespace flowtalk::cli {

struct OptimizerConfig {
    double learning_rate = 1e-4;
    int steps = 200;
    Eigen::Index batch_frames = 512;   // collate budget per optimizer step
    uint64_t seed = 1;
    double grad_clip = 1.0;            // global-norm ceiling, must be positive
    int checkpoint_every = 100;
    int log_every = 10;
    double cond_dropout = 0.2;         // per-condition drop probability
    std::string resume;                // checkpoint to continue from, optional

    void validate() const;
};

struct PathsConfig {
    std::string dataset = "corpus.ftds";
    std::string checkpoints = "checkpoints";
    std::string reports = "reports";
};

struct PrepareConfig {
    int styles = 2;
    int clips_per_style = 50;
    double min_duration_s = 1.0;
    double max_duration_s = 3.0;

    void validate() const;
};

struct SampleConfig {
    std::string checkpoint;       // empty: <paths.checkpoints>/last.ftck
    int reference_index = 0;      // clip in the dataset used as the style prompt
    std::string text = "hello world";
    double duration_s = 2.0;      // generated tail length
    bool plots = false;

    void validate() const;
};

struct EvalConfig {
    std::string checkpoint;       // empty: score ground truth against itself
    double holdout = 0.2;         // tail fraction of the dataset held out
    int max_clips = 0;            // 0 = all held-out clips
    double reference_fraction = 0.4;  // leading part of each clip kept as context

    void validate() const;
};

struct RunConfig {
    net::NetConfig net;
    flow::LossWeights weights;
    flow::GuidanceSpec guidance;
    OptimizerConfig optimizer;
    PathsConfig paths;
    PrepareConfig prepare;
    SampleConfig sample;
    EvalConfig eval;

    void validate() const;
    // canonical key=value rendering; the config hash embedded in artifacts
    // is the FNV-1a of this text
    std::string canonical() const;
    uint64_t hash() const;
};

// Strict parser: `key = value` lines, '#' comments. Unknown keys, duplicate
// keys, and malformed values are errors naming the line.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
// single dotted-key assignment, same key set as the file format
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);

struct TrainResult {
    int steps_run = 0;
    double final_loss = 0.0;
    std::string checkpoint_path;   // last checkpoint written
    std::string metrics_path;
};

struct SampleResult {
    std::string mel_path;          // one-record dataset file
    std::string codes_path;        // landmark text matrix
    std::string meta_path;
    Eigen::Index reference_frames = 0;  // after the 10 s cap
    bool truncated = false;
    Eigen::Index generated_frames = 0;
};

struct EvalResult {
    std::string report_path;
    eval::MetricReport summary;
    int clips = 0;
};

struct AblateRow {
    std::string strategy;
    bool failed = false;
    double final_loss = 0.0;
    eval::MetricReport metrics;
};

struct AblateResult {
    std::string table_path;
    std::vector<AblateRow> rows;
};

std::string cmd_prepare(const RunConfig& cfg);  // returns the dataset path
TrainResult cmd_train(const RunConfig& cfg);
SampleResult cmd_sample(const RunConfig& cfg);
EvalResult cmd_eval(const RunConfig& cfg);
AblateResult cmd_ablate(const RunConfig& cfg);

// `flowtalk <prepare|train|sample|eval|ablate> --config <path> [--seed N]
//  [--out DIR] [key=value ...]`; returns the process exit code
// (0 ok, 2 validation/IO, 3 numeric failure).
int run_cli(const std::vector<std::string>& args);

}  // namespace flowtalk::cli
