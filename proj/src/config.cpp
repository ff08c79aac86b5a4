#include "itarflow/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace itarflow {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void fail(const std::string& origin, int line, const std::string& msg) {
    throw ConfigError(origin + ":" + std::to_string(line) + ": " + msg);
}

struct Parser {
    const std::string& origin;
    int line;

    int64_t to_int(const std::string& key, const std::string& v) const {
        try {
            size_t used = 0;
            int64_t r = std::stoll(v, &used);
            if (used != v.size()) throw std::invalid_argument("");
            return r;
        } catch (...) {
            fail(origin, line, "key '" + key + "': expected integer, got '" + v + "'");
        }
    }
    double to_double(const std::string& key, const std::string& v) const {
        try {
            size_t used = 0;
            double r = std::stod(v, &used);
            if (used != v.size() || !std::isfinite(r)) throw std::invalid_argument("");
            return r;
        } catch (...) {
            fail(origin, line, "key '" + key + "': expected number, got '" + v + "'");
        }
    }
    bool to_bool(const std::string& key, const std::string& v) const {
        if (v == "true") return true;
        if (v == "false") return false;
        fail(origin, line, "key '" + key + "': expected true/false, got '" + v + "'");
    }
    std::vector<int> to_int_list(const std::string& key, const std::string& v) const {
        std::vector<int> out;
        std::stringstream ss(v);
        std::string part;
        while (std::getline(ss, part, ',')) {
            part = trim(part);
            if (part.empty()) fail(origin, line, "key '" + key + "': empty list entry");
            out.push_back(static_cast<int>(to_int(key, part)));
        }
        if (out.empty()) fail(origin, line, "key '" + key + "': empty list");
        return out;
    }
};

const std::set<std::string> kTasks = {"gmm1d", "gmm2d", "checkerboard2d", "idx-file",
                                      "image-dir"};
const std::set<std::string> kPresets = {"desk", "tiny", "custom"};

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    bool have_task = false;
    while (std::getline(in, raw)) {
        ++lineno;
        std::string s = raw;
        size_t hash = s.find('#');
        if (hash != std::string::npos) s = s.substr(0, hash);
        s = trim(s);
        if (s.empty()) continue;
        size_t eq = s.find('=');
        if (eq == std::string::npos) fail(origin, lineno, "expected 'key = value', got '" + s + "'");
        std::string key = trim(s.substr(0, eq));
        std::string value = trim(s.substr(eq + 1));
        if (key.empty()) fail(origin, lineno, "missing key");
        if (value.empty()) fail(origin, lineno, "key '" + key + "': missing value");
        if (!seen.insert(key).second) fail(origin, lineno, "duplicate key '" + key + "'");
        Parser p{origin, lineno};

        if (key == "task") {
            if (!kTasks.count(value)) fail(origin, lineno, "key 'task': unknown task '" + value + "'");
            cfg.task = value;
            have_task = true;
        } else if (key == "out_dir") {
            cfg.out_dir = value;
        } else if (key == "data_path") {
            cfg.data_path = value;
        } else if (key == "labels_path") {
            cfg.labels_path = value;
        } else if (key == "preset") {
            if (!kPresets.count(value)) fail(origin, lineno, "key 'preset': unknown preset '" + value + "'");
            cfg.preset = value;
        } else if (key == "block_layers") {
            cfg.block_layers = p.to_int_list(key, value);
            for (int l : cfg.block_layers)
                if (l < 1) fail(origin, lineno, "key 'block_layers': layer counts must be >= 1");
        } else if (key == "width") {
            cfg.width = p.to_int(key, value);
            if (cfg.width < 1) fail(origin, lineno, "key 'width': must be >= 1");
        } else if (key == "heads") {
            cfg.heads = static_cast<int>(p.to_int(key, value));
            if (cfg.heads < 1) fail(origin, lineno, "key 'heads': must be >= 1");
        } else if (key == "time_dim") {
            cfg.time_dim = p.to_int(key, value);
            if (cfg.time_dim < 2 || cfg.time_dim % 2 != 0)
                fail(origin, lineno, "key 'time_dim': must be even and >= 2");
        } else if (key == "seq_len") {
            cfg.seq_len = p.to_int(key, value);
            if (cfg.seq_len < 1) fail(origin, lineno, "key 'seq_len': must be >= 1");
        } else if (key == "patch_size") {
            cfg.patch_size = p.to_int(key, value);
            if (cfg.patch_size < 1) fail(origin, lineno, "key 'patch_size': must be >= 1");
        } else if (key == "t_min") {
            cfg.train.t_min = p.to_double(key, value);
            if (cfg.train.t_min <= 0) fail(origin, lineno, "key 't_min': must be > 0");
        } else if (key == "t_max") {
            cfg.train.t_max = p.to_double(key, value);
            if (cfg.train.t_max <= 0) fail(origin, lineno, "key 't_max': must be > 0");
        } else if (key == "batch_size") {
            cfg.train.batch_size = p.to_int(key, value);
            if (cfg.train.batch_size < 1) fail(origin, lineno, "key 'batch_size': must be >= 1");
        } else if (key == "epochs") {
            cfg.train.epochs = p.to_int(key, value);
            if (cfg.train.epochs < 1) fail(origin, lineno, "key 'epochs': must be >= 1");
        } else if (key == "steps_per_epoch") {
            cfg.train.steps_per_epoch = p.to_int(key, value);
            if (cfg.train.steps_per_epoch < 1)
                fail(origin, lineno, "key 'steps_per_epoch': must be >= 1");
        } else if (key == "lr_min") {
            cfg.train.lr_min = p.to_double(key, value);
            if (cfg.train.lr_min <= 0) fail(origin, lineno, "key 'lr_min': must be > 0");
        } else if (key == "lr_peak") {
            cfg.train.lr_peak = p.to_double(key, value);
            if (cfg.train.lr_peak <= 0) fail(origin, lineno, "key 'lr_peak': must be > 0");
        } else if (key == "weight_decay") {
            cfg.train.weight_decay = p.to_double(key, value);
            if (cfg.train.weight_decay < 0) fail(origin, lineno, "key 'weight_decay': must be >= 0");
        } else if (key == "beta1") {
            cfg.train.beta1 = p.to_double(key, value);
            if (cfg.train.beta1 < 0 || cfg.train.beta1 >= 1)
                fail(origin, lineno, "key 'beta1': must be in [0, 1)");
        } else if (key == "beta2") {
            cfg.train.beta2 = p.to_double(key, value);
            if (cfg.train.beta2 < 0 || cfg.train.beta2 >= 1)
                fail(origin, lineno, "key 'beta2': must be in [0, 1)");
        } else if (key == "label_dropout") {
            cfg.train.label_dropout = p.to_double(key, value);
            if (cfg.train.label_dropout < 0 || cfg.train.label_dropout >= 1)
                fail(origin, lineno, "key 'label_dropout': must be in [0, 1)");
        } else if (key == "checkpoint_every") {
            cfg.train.checkpoint_every = p.to_int(key, value);
            if (cfg.train.checkpoint_every < 0)
                fail(origin, lineno, "key 'checkpoint_every': must be >= 0");
        } else if (key == "sample_count") {
            cfg.sample_count = p.to_int(key, value);
            if (cfg.sample_count < 1) fail(origin, lineno, "key 'sample_count': must be >= 1");
        } else if (key == "cfg_scale") {
            cfg.cfg_scale = p.to_double(key, value);
            if (cfg.cfg_scale < 1) fail(origin, lineno, "key 'cfg_scale': must be >= 1");
        } else if (key == "ode_steps") {
            cfg.ode_steps = p.to_int(key, value);
            if (cfg.ode_steps < 1) fail(origin, lineno, "key 'ode_steps': must be >= 1");
        } else if (key == "final_tweedie") {
            cfg.final_tweedie = p.to_bool(key, value);
        } else if (key == "cfg_mu_only") {
            cfg.cfg_mu_only = p.to_bool(key, value);
        } else if (key == "seed") {
            cfg.seed = static_cast<uint64_t>(p.to_int(key, value));
        } else {
            fail(origin, lineno, "unknown key '" + key + "'");
        }
    }
    if (!have_task) throw ConfigError(origin + ": missing required key 'task'");
    if (cfg.train.t_max <= cfg.train.t_min)
        throw ConfigError(origin + ": t_max must be greater than t_min");
    if (cfg.preset == "custom" && cfg.block_layers.empty())
        throw ConfigError(origin + ": preset 'custom' requires 'block_layers'");
    if ((cfg.task == "idx-file" || cfg.task == "image-dir") && cfg.data_path.empty())
        throw ConfigError(origin + ": task '" + cfg.task + "' requires 'data_path'");
    return cfg;
}

RunConfig parse_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path + ": cannot open config file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path);
}

std::string serialize_config(const RunConfig& cfg) {
    std::ostringstream out;
    out.precision(17);
    out << "task = " << cfg.task << "\n";
    out << "out_dir = " << cfg.out_dir << "\n";
    if (!cfg.data_path.empty()) out << "data_path = " << cfg.data_path << "\n";
    if (!cfg.labels_path.empty()) out << "labels_path = " << cfg.labels_path << "\n";
    out << "preset = " << cfg.preset << "\n";
    if (!cfg.block_layers.empty()) {
        out << "block_layers = ";
        for (size_t i = 0; i < cfg.block_layers.size(); ++i)
            out << (i ? "," : "") << cfg.block_layers[i];
        out << "\n";
    }
    if (cfg.width > 0) out << "width = " << cfg.width << "\n";
    out << "heads = " << cfg.heads << "\n";
    out << "time_dim = " << cfg.time_dim << "\n";
    out << "seq_len = " << cfg.seq_len << "\n";
    out << "patch_size = " << cfg.patch_size << "\n";
    out << "t_min = " << cfg.train.t_min << "\n";
    out << "t_max = " << cfg.train.t_max << "\n";
    out << "batch_size = " << cfg.train.batch_size << "\n";
    out << "epochs = " << cfg.train.epochs << "\n";
    out << "steps_per_epoch = " << cfg.train.steps_per_epoch << "\n";
    out << "lr_min = " << cfg.train.lr_min << "\n";
    out << "lr_peak = " << cfg.train.lr_peak << "\n";
    out << "weight_decay = " << cfg.train.weight_decay << "\n";
    out << "beta1 = " << cfg.train.beta1 << "\n";
    out << "beta2 = " << cfg.train.beta2 << "\n";
    out << "label_dropout = " << cfg.train.label_dropout << "\n";
    out << "checkpoint_every = " << cfg.train.checkpoint_every << "\n";
    out << "sample_count = " << cfg.sample_count << "\n";
    out << "cfg_scale = " << cfg.cfg_scale << "\n";
    out << "ode_steps = " << cfg.ode_steps << "\n";
    out << "final_tweedie = " << (cfg.final_tweedie ? "true" : "false") << "\n";
    out << "cfg_mu_only = " << (cfg.cfg_mu_only ? "true" : "false") << "\n";
    out << "seed = " << cfg.seed << "\n";
    return out.str();
}

}  // namespace itarflow
