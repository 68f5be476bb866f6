#include <cctype>
#include <cmath>
#include <functional>
#include <map>
#include <set>

#include "flowtalk/cli.hpp"
#include "flowtalk/io.hpp"

namespace flowtalk::cli {

namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

int to_int(const std::string& v) {
    size_t pos = 0;
    int out = 0;
    try {
        out = std::stoi(v, &pos);
    } catch (const std::exception&) {
        throw ValidationError(strf("expected an integer, got '%s'", v.c_str()));
    }
    if (pos != v.size()) throw ValidationError(strf("expected an integer, got '%s'", v.c_str()));
    return out;
}

uint64_t to_u64(const std::string& v) {
    size_t pos = 0;
    unsigned long long out = 0;
    try {
        out = std::stoull(v, &pos);
    } catch (const std::exception&) {
        throw ValidationError(strf("expected an unsigned integer, got '%s'", v.c_str()));
    }
    if (pos != v.size()) {
        throw ValidationError(strf("expected an unsigned integer, got '%s'", v.c_str()));
    }
    return out;
}

double to_double(const std::string& v) {
    size_t pos = 0;
    double out = 0;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw ValidationError(strf("expected a number, got '%s'", v.c_str()));
    }
    if (pos != v.size()) throw ValidationError(strf("expected a number, got '%s'", v.c_str()));
    return out;
}

bool to_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ValidationError(strf("expected true/false, got '%s'", v.c_str()));
}

std::string from_double(double v) { return strf("%.17g", v); }

struct Field {
    const char* key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

// Every configurable knob, in the order canonical() prints them. Parsing and
// overrides share this table, so the file format and k=v overrides cannot
// diverge.
const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        {"net.d_model", [](const RunConfig& c) { return strf("%d", c.net.d_model); },
         [](RunConfig& c, const std::string& v) { c.net.d_model = to_int(v); }},
        {"net.n_heads", [](const RunConfig& c) { return strf("%d", c.net.n_heads); },
         [](RunConfig& c, const std::string& v) { c.net.n_heads = to_int(v); }},
        {"net.ffn_dim", [](const RunConfig& c) { return strf("%d", c.net.ffn_dim); },
         [](RunConfig& c, const std::string& v) { c.net.ffn_dim = to_int(v); }},
        {"net.n_fusion_blocks",
         [](const RunConfig& c) { return strf("%d", c.net.n_fusion_blocks); },
         [](RunConfig& c, const std::string& v) { c.net.n_fusion_blocks = to_int(v); }},
        {"net.n_branch_blocks",
         [](const RunConfig& c) { return strf("%d", c.net.n_branch_blocks); },
         [](RunConfig& c, const std::string& v) { c.net.n_branch_blocks = to_int(v); }},
        {"net.n_text_blocks", [](const RunConfig& c) { return strf("%d", c.net.n_text_blocks); },
         [](RunConfig& c, const std::string& v) { c.net.n_text_blocks = to_int(v); }},
        {"net.fusion_strategy",
         [](const RunConfig& c) { return std::string(net::fusion_strategy_name(c.net.fusion_strategy)); },
         [](RunConfig& c, const std::string& v) { c.net.fusion_strategy = net::parse_fusion_strategy(v); }},
        {"net.vocab_size", [](const RunConfig& c) { return strf("%d", c.net.vocab_size); },
         [](RunConfig& c, const std::string& v) { c.net.vocab_size = to_int(v); }},
        {"net.mel_dim", [](const RunConfig& c) { return strf("%d", c.net.mel_dim); },
         [](RunConfig& c, const std::string& v) { c.net.mel_dim = to_int(v); }},
        {"net.visual_dim", [](const RunConfig& c) { return strf("%d", c.net.visual_dim); },
         [](RunConfig& c, const std::string& v) { c.net.visual_dim = to_int(v); }},
        {"net.share_branches",
         [](const RunConfig& c) { return std::string(c.net.share_branches ? "true" : "false"); },
         [](RunConfig& c, const std::string& v) { c.net.share_branches = to_bool(v); }},
        {"net.conv_pe_kernel", [](const RunConfig& c) { return strf("%d", c.net.conv_pe_kernel); },
         [](RunConfig& c, const std::string& v) { c.net.conv_pe_kernel = to_int(v); }},
        {"net.text_conv_kernel",
         [](const RunConfig& c) { return strf("%d", c.net.text_conv_kernel); },
         [](RunConfig& c, const std::string& v) { c.net.text_conv_kernel = to_int(v); }},
        {"net.time_freq_dim", [](const RunConfig& c) { return strf("%d", c.net.time_freq_dim); },
         [](RunConfig& c, const std::string& v) { c.net.time_freq_dim = to_int(v); }},

        {"weights.mel", [](const RunConfig& c) { return from_double(c.weights.mel); },
         [](RunConfig& c, const std::string& v) { c.weights.mel = to_double(v); }},
        {"weights.pose", [](const RunConfig& c) { return from_double(c.weights.pose); },
         [](RunConfig& c, const std::string& v) { c.weights.pose = to_double(v); }},
        {"weights.expr", [](const RunConfig& c) { return from_double(c.weights.expr); },
         [](RunConfig& c, const std::string& v) { c.weights.expr = to_double(v); }},
        {"weights.eye", [](const RunConfig& c) { return from_double(c.weights.eye); },
         [](RunConfig& c, const std::string& v) { c.weights.eye = to_double(v); }},

        {"guidance.alpha_mel", [](const RunConfig& c) { return from_double(c.guidance.alpha_mel); },
         [](RunConfig& c, const std::string& v) { c.guidance.alpha_mel = to_double(v); }},
        {"guidance.alpha_visual",
         [](const RunConfig& c) { return from_double(c.guidance.alpha_visual); },
         [](RunConfig& c, const std::string& v) { c.guidance.alpha_visual = to_double(v); }},
        {"guidance.alpha_text", [](const RunConfig& c) { return from_double(c.guidance.alpha_text); },
         [](RunConfig& c, const std::string& v) { c.guidance.alpha_text = to_double(v); }},
        {"guidance.steps", [](const RunConfig& c) { return strf("%d", c.guidance.steps); },
         [](RunConfig& c, const std::string& v) { c.guidance.steps = to_int(v); }},
        {"guidance.solver",
         [](const RunConfig& c) { return std::string(flow::solver_name(c.guidance.solver)); },
         [](RunConfig& c, const std::string& v) { c.guidance.solver = flow::parse_solver(v); }},
        {"guidance.null_all_conditions",
         [](const RunConfig& c) {
             return std::string(c.guidance.null_all_conditions ? "true" : "false");
         },
         [](RunConfig& c, const std::string& v) { c.guidance.null_all_conditions = to_bool(v); }},

        {"optimizer.learning_rate",
         [](const RunConfig& c) { return from_double(c.optimizer.learning_rate); },
         [](RunConfig& c, const std::string& v) { c.optimizer.learning_rate = to_double(v); }},
        {"optimizer.steps", [](const RunConfig& c) { return strf("%d", c.optimizer.steps); },
         [](RunConfig& c, const std::string& v) { c.optimizer.steps = to_int(v); }},
        {"optimizer.batch_frames",
         [](const RunConfig& c) { return strf("%td", c.optimizer.batch_frames); },
         [](RunConfig& c, const std::string& v) { c.optimizer.batch_frames = to_int(v); }},
        {"optimizer.seed",
         [](const RunConfig& c) {
             return strf("%llu", static_cast<unsigned long long>(c.optimizer.seed));
         },
         [](RunConfig& c, const std::string& v) { c.optimizer.seed = to_u64(v); }},
        {"optimizer.grad_clip", [](const RunConfig& c) { return from_double(c.optimizer.grad_clip); },
         [](RunConfig& c, const std::string& v) { c.optimizer.grad_clip = to_double(v); }},
        {"optimizer.checkpoint_every",
         [](const RunConfig& c) { return strf("%d", c.optimizer.checkpoint_every); },
         [](RunConfig& c, const std::string& v) { c.optimizer.checkpoint_every = to_int(v); }},
        {"optimizer.log_every", [](const RunConfig& c) { return strf("%d", c.optimizer.log_every); },
         [](RunConfig& c, const std::string& v) { c.optimizer.log_every = to_int(v); }},
        {"optimizer.cond_dropout",
         [](const RunConfig& c) { return from_double(c.optimizer.cond_dropout); },
         [](RunConfig& c, const std::string& v) { c.optimizer.cond_dropout = to_double(v); }},
        {"optimizer.resume", [](const RunConfig& c) { return c.optimizer.resume; },
         [](RunConfig& c, const std::string& v) { c.optimizer.resume = v; }},

        {"paths.dataset", [](const RunConfig& c) { return c.paths.dataset; },
         [](RunConfig& c, const std::string& v) { c.paths.dataset = v; }},
        {"paths.checkpoints", [](const RunConfig& c) { return c.paths.checkpoints; },
         [](RunConfig& c, const std::string& v) { c.paths.checkpoints = v; }},
        {"paths.reports", [](const RunConfig& c) { return c.paths.reports; },
         [](RunConfig& c, const std::string& v) { c.paths.reports = v; }},

        {"prepare.styles", [](const RunConfig& c) { return strf("%d", c.prepare.styles); },
         [](RunConfig& c, const std::string& v) { c.prepare.styles = to_int(v); }},
        {"prepare.clips_per_style",
         [](const RunConfig& c) { return strf("%d", c.prepare.clips_per_style); },
         [](RunConfig& c, const std::string& v) { c.prepare.clips_per_style = to_int(v); }},
        {"prepare.min_duration_s",
         [](const RunConfig& c) { return from_double(c.prepare.min_duration_s); },
         [](RunConfig& c, const std::string& v) { c.prepare.min_duration_s = to_double(v); }},
        {"prepare.max_duration_s",
         [](const RunConfig& c) { return from_double(c.prepare.max_duration_s); },
         [](RunConfig& c, const std::string& v) { c.prepare.max_duration_s = to_double(v); }},

        {"sample.checkpoint", [](const RunConfig& c) { return c.sample.checkpoint; },
         [](RunConfig& c, const std::string& v) { c.sample.checkpoint = v; }},
        {"sample.reference_index",
         [](const RunConfig& c) { return strf("%d", c.sample.reference_index); },
         [](RunConfig& c, const std::string& v) { c.sample.reference_index = to_int(v); }},
        {"sample.text", [](const RunConfig& c) { return c.sample.text; },
         [](RunConfig& c, const std::string& v) { c.sample.text = v; }},
        {"sample.duration_s", [](const RunConfig& c) { return from_double(c.sample.duration_s); },
         [](RunConfig& c, const std::string& v) { c.sample.duration_s = to_double(v); }},
        {"sample.plots",
         [](const RunConfig& c) { return std::string(c.sample.plots ? "true" : "false"); },
         [](RunConfig& c, const std::string& v) { c.sample.plots = to_bool(v); }},

        {"eval.checkpoint", [](const RunConfig& c) { return c.eval.checkpoint; },
         [](RunConfig& c, const std::string& v) { c.eval.checkpoint = v; }},
        {"eval.holdout", [](const RunConfig& c) { return from_double(c.eval.holdout); },
         [](RunConfig& c, const std::string& v) { c.eval.holdout = to_double(v); }},
        {"eval.max_clips", [](const RunConfig& c) { return strf("%d", c.eval.max_clips); },
         [](RunConfig& c, const std::string& v) { c.eval.max_clips = to_int(v); }},
        {"eval.reference_fraction",
         [](const RunConfig& c) { return from_double(c.eval.reference_fraction); },
         [](RunConfig& c, const std::string& v) { c.eval.reference_fraction = to_double(v); }},
    };
    return table;
}

const Field* find_field(const std::string& key) {
    for (const Field& f : fields()) {
        if (key == f.key) return &f;
    }
    return nullptr;
}

}  // namespace

void OptimizerConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ValidationError(strf("optimizer.learning_rate must be positive, got %g",
                                   learning_rate));
    }
    if (steps < 1) throw ValidationError(strf("optimizer.steps must be at least 1, got %d", steps));
    if (batch_frames < 1) {
        throw ValidationError(strf("optimizer.batch_frames must be positive, got %td",
                                   batch_frames));
    }
    if (!(grad_clip > 0.0) || !std::isfinite(grad_clip)) {
        throw ValidationError(strf("optimizer.grad_clip must be positive, got %g", grad_clip));
    }
    if (checkpoint_every < 1 || log_every < 1) {
        throw ValidationError("optimizer.checkpoint_every and log_every must be at least 1");
    }
    if (!(cond_dropout >= 0.0 && cond_dropout <= 1.0)) {
        throw ValidationError(strf("optimizer.cond_dropout %g outside [0, 1]", cond_dropout));
    }
}

void PrepareConfig::validate() const {
    if (styles < 1) throw ValidationError(strf("prepare.styles must be at least 1, got %d", styles));
    if (clips_per_style < 1) {
        throw ValidationError(strf("prepare.clips_per_style must be at least 1, got %d",
                                   clips_per_style));
    }
    if (!(min_duration_s >= 1.0) || !(max_duration_s <= 10.0) ||
        !(min_duration_s <= max_duration_s)) {
        throw ValidationError(strf("prepare durations [%g, %g] must satisfy 1 <= min <= max <= 10",
                                   min_duration_s, max_duration_s));
    }
}

void SampleConfig::validate() const {
    if (reference_index < 0) {
        throw ValidationError(strf("sample.reference_index must be non-negative, got %d",
                                   reference_index));
    }
    if (!(duration_s > 0.0) || !std::isfinite(duration_s)) {
        throw ValidationError(strf("sample.duration_s must be positive, got %g", duration_s));
    }
}

void EvalConfig::validate() const {
    if (!(holdout > 0.0 && holdout <= 1.0)) {
        throw ValidationError(strf("eval.holdout %g outside (0, 1]", holdout));
    }
    if (max_clips < 0) {
        throw ValidationError(strf("eval.max_clips must be non-negative, got %d", max_clips));
    }
    if (!(reference_fraction > 0.0 && reference_fraction < 1.0)) {
        throw ValidationError(strf("eval.reference_fraction %g outside (0, 1)",
                                   reference_fraction));
    }
}

void RunConfig::validate() const {
    net.validate();
    weights.validate();
    guidance.validate();
    optimizer.validate();
    prepare.validate();
    sample.validate();
    eval.validate();
    if (paths.dataset.empty() || paths.checkpoints.empty() || paths.reports.empty()) {
        throw ValidationError("paths.dataset, paths.checkpoints and paths.reports must be set");
    }
}

std::string RunConfig::canonical() const {
    std::string out;
    for (const Field& f : fields()) {
        out += f.key;
        out += " = ";
        out += f.get(*this);
        out += "\n";
    }
    return out;
}

uint64_t RunConfig::hash() const { return fnv1a64(canonical()); }

RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::set<std::string> seen;
    int line_no = 0;
    size_t pos = 0;
    while (pos <= text.size()) {
        const size_t eol = text.find('\n', pos);
        std::string line = text.substr(pos, eol == std::string::npos ? std::string::npos
                                                                     : eol - pos);
        pos = eol == std::string::npos ? text.size() + 1 : eol + 1;
        ++line_no;
        const size_t hash_at = line.find('#');
        if (hash_at != std::string::npos) line = line.substr(0, hash_at);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ValidationError(strf("config line %d: expected 'key = value', got '%s'",
                                       line_no, line.c_str()));
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const Field* f = find_field(key);
        if (f == nullptr) {
            throw ValidationError(strf("config line %d: unknown key '%s'", line_no, key.c_str()));
        }
        if (!seen.insert(key).second) {
            throw ValidationError(strf("config line %d: duplicate key '%s'", line_no, key.c_str()));
        }
        try {
            f->set(cfg, value);
        } catch (const Error& e) {
            throw ValidationError(strf("config line %d (%s): %s", line_no, key.c_str(), e.what()));
        }
    }
    cfg.validate();  // a file that parses is also a file that can run
    return cfg;
}

RunConfig load_config(const std::string& path) { return parse_config(io::slurp_text(path)); }

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    const Field* f = find_field(key);
    if (f == nullptr) throw ValidationError(strf("unknown config key '%s'", key.c_str()));
    f->set(cfg, value);
}

}  // namespace flowtalk::cli
