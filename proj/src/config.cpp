#include "capseg/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "capseg/error.hpp"
#include "capseg/rng.hpp"

namespace capseg {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::int64_t parse_int(const std::string& key, const std::string& value,
                       const std::string& where) {
    try {
        size_t pos = 0;
        const std::int64_t v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(where + ": key '" + key + "' expects an integer, got '" + value + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value,
                        const std::string& where) {
    try {
        size_t pos = 0;
        const std::uint64_t v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(where + ": key '" + key + "' expects an unsigned integer, got '" +
                          value + "'");
    }
}

double parse_double(const std::string& key, const std::string& value, const std::string& where) {
    try {
        size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(where + ": key '" + key + "' expects a number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value, const std::string& where) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError(where + ": key '" + key + "' expects true/false, got '" + value + "'");
}

std::string fmt_double_config(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void apply_config_entry(TrainConfig& c, const std::string& key, const std::string& value,
                        const std::string& where) {
    if (key == "arch") {
        if (value != "segcaps2d" && value != "ucaps3d")
            throw ConfigError(where + ": arch must be segcaps2d or ucaps3d, got '" + value + "'");
        c.arch = value;
    } else if (key == "dataset") {
        c.dataset = value;
    } else if (key == "seed") {
        c.seed = parse_u64(key, value, where);
    } else if (key == "classes") {
        c.classes = static_cast<int>(parse_int(key, value, where));
    } else if (key == "input_size") {
        c.input_size = parse_int(key, value, where);
    } else if (key == "batch_size") {
        c.batch_size = parse_int(key, value, where);
    } else if (key == "max_iterations") {
        c.max_iterations = parse_int(key, value, where);
    } else if (key == "learning_rate") {
        c.learning_rate = parse_double(key, value, where);
    } else if (key == "lr_decay_factor") {
        c.lr_decay_factor = parse_double(key, value, where);
    } else if (key == "patience_iterations") {
        c.patience_iterations = parse_int(key, value, where);
    } else if (key == "early_stop_iterations") {
        c.early_stop_iterations = parse_int(key, value, where);
    } else if (key == "eval_interval") {
        c.eval_interval = parse_int(key, value, where);
    } else if (key == "checkpoint_interval") {
        c.checkpoint_interval = parse_int(key, value, where);
    } else if (key == "routing_iterations") {
        c.routing_iterations = static_cast<int>(parse_int(key, value, where));
    } else if (key == "gamma") {
        c.gamma = parse_double(key, value, where);
    } else if (key == "margin_m_plus") {
        c.margin_m_plus = parse_double(key, value, where);
    } else if (key == "margin_m_minus") {
        c.margin_m_minus = parse_double(key, value, where);
    } else if (key == "margin_lambda") {
        c.margin_lambda = parse_double(key, value, where);
    } else if (key == "deterministic") {
        c.deterministic = parse_bool(key, value, where);
    } else if (key == "val_fraction") {
        c.val_fraction = parse_double(key, value, where);
    } else if (key == "multi_segcaps") {
        c.multi_segcaps = parse_bool(key, value, where);
    } else if (key == "base_channels") {
        c.base_channels = parse_int(key, value, where);
    } else if (key == "capsule_dim") {
        c.capsule_dim = parse_int(key, value, where);
    } else if (key == "schedule_divisor") {
        c.schedule_divisor = parse_int(key, value, where);
    } else if (key == "vote_bias") {
        c.vote_bias = parse_bool(key, value, where);
    } else if (key == "init_extractor") {
        c.init_extractor = value;
    } else if (key == "folds") {
        c.folds = static_cast<int>(parse_int(key, value, where));
    } else {
        throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

TrainConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    TrainConfig c;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = path + ":" + std::to_string(line_no);
        if (eq == std::string::npos)
            throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
        apply_config_entry(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where);
    }
    return c;
}

void TrainConfig::validate() const {
    if (classes < 2) throw ConfigError("classes must be >= 2");
    if (input_size < 16) throw ConfigError("input_size must be >= 16");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_iterations < 0) throw ConfigError("max_iterations must be >= 0");
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    if (lr_decay_factor <= 0.0 || lr_decay_factor > 1.0)
        throw ConfigError("lr_decay_factor must lie in (0, 1]");
    if (patience_iterations < 1) throw ConfigError("patience_iterations must be >= 1");
    if (early_stop_iterations < 0) throw ConfigError("early_stop_iterations must be >= 0");
    if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
    if (checkpoint_interval < 0) throw ConfigError("checkpoint_interval must be >= 0");
    if (routing_iterations < 1) throw ConfigError("routing_iterations must be >= 1");
    if (gamma < 0.0) throw ConfigError("gamma must be >= 0");
    if (val_fraction <= 0.0 || val_fraction >= 1.0)
        throw ConfigError("val_fraction must lie in (0, 1)");
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (capsule_dim < 1) throw ConfigError("capsule_dim must be >= 1");
    if (schedule_divisor < 1) throw ConfigError("schedule_divisor must be >= 1");
    if (folds < 0) throw ConfigError("folds must be >= 0");
}

std::string TrainConfig::canonical_text() const {
    std::ostringstream os;
    os << "arch = " << arch << "\n";
    os << "dataset = " << dataset << "\n";
    os << "seed = " << seed << "\n";
    os << "classes = " << classes << "\n";
    os << "input_size = " << input_size << "\n";
    os << "batch_size = " << batch_size << "\n";
    os << "max_iterations = " << max_iterations << "\n";
    os << "learning_rate = " << fmt_double_config(learning_rate) << "\n";
    os << "lr_decay_factor = " << fmt_double_config(lr_decay_factor) << "\n";
    os << "patience_iterations = " << patience_iterations << "\n";
    os << "early_stop_iterations = " << early_stop_iterations << "\n";
    os << "eval_interval = " << eval_interval << "\n";
    os << "checkpoint_interval = " << checkpoint_interval << "\n";
    os << "routing_iterations = " << routing_iterations << "\n";
    os << "gamma = " << fmt_double_config(gamma) << "\n";
    os << "margin_m_plus = " << fmt_double_config(margin_m_plus) << "\n";
    os << "margin_m_minus = " << fmt_double_config(margin_m_minus) << "\n";
    os << "margin_lambda = " << fmt_double_config(margin_lambda) << "\n";
    os << "deterministic = " << (deterministic ? "true" : "false") << "\n";
    os << "val_fraction = " << fmt_double_config(val_fraction) << "\n";
    os << "multi_segcaps = " << (multi_segcaps ? "true" : "false") << "\n";
    os << "base_channels = " << base_channels << "\n";
    os << "capsule_dim = " << capsule_dim << "\n";
    os << "schedule_divisor = " << schedule_divisor << "\n";
    os << "vote_bias = " << (vote_bias ? "true" : "false") << "\n";
    os << "init_extractor = " << init_extractor << "\n";
    os << "folds = " << folds << "\n";
    return os.str();
}

std::uint64_t TrainConfig::architecture_hash() const {
    // Prediction-rule and loss knobs stay out: a checkpoint loads wherever
    // the parameter manifest is identical.
    std::ostringstream os;
    os << arch << "|" << classes << "|" << input_size << "|" << base_channels << "|"
       << capsule_dim << "|" << schedule_divisor << "|" << routing_iterations << "|"
       << (vote_bias ? 1 : 0);
    const std::string s = os.str();
    return fnv1a64(s.data(), s.size());
}

}  // namespace capseg
