#include "bevmine/app/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <variant>

namespace bevmine::app {

namespace {

using Target = std::variant<int*, std::uint64_t*, double*, bool*, std::string*, std::vector<double>*>;

struct Field {
    const char* section;
    const char* key;
    Target target;
};

std::vector<Field> fields(RunConfig& c) {
    auto& s = c.scenes;
    return {
        {"scenes", "half_extent", &s.half_extent},
        {"scenes", "placement_margin", &s.placement_margin},
        {"scenes", "min_objects", &s.min_objects},
        {"scenes", "max_objects", &s.max_objects},
        {"scenes", "min_length", &s.min_length},
        {"scenes", "max_length", &s.max_length},
        {"scenes", "min_width", &s.min_width},
        {"scenes", "max_width", &s.max_width},
        {"scenes", "yaw_jitter", &s.yaw_jitter},
        {"scenes", "agent_count", &s.agent_count},
        {"scenes", "agent_spread", &s.agent_spread},
        {"scenes", "sensor_range", &s.sensor_range},
        {"scenes", "points_per_object", &s.points_per_object},
        {"scenes", "range_scale", &s.range_scale},
        {"scenes", "position_noise", &s.position_noise},
        {"scenes", "clutter_rate", &s.clutter_rate},
        {"scenes", "min_distractors", &s.min_distractors},
        {"scenes", "max_distractors", &s.max_distractors},
        {"scenes", "distractor_size", &s.distractor_size},
        {"scenes", "occlusion_dropout", &s.occlusion_dropout},
        {"scenes", "seed", &s.seed},
        {"data", "train_scenes", &c.data.train_scenes},
        {"data", "val_scenes", &c.data.val_scenes},
        {"grid", "height", &c.grid.height},
        {"grid", "width", &c.grid.width},
        {"grid", "cell_size", &c.grid.cell_size},
        {"grid", "origin_x", &c.grid.origin_x},
        {"grid", "origin_y", &c.grid.origin_y},
        {"grid", "anchor_length", &c.grid.anchor_length},
        {"grid", "anchor_width", &c.grid.anchor_width},
        {"grid", "anchor_yaws", &c.grid.anchor_yaws},
        {"mining", "sigma_st_low", &c.mining.sigma_st_low},
        {"mining", "sigma_st_high", &c.mining.sigma_st_high},
        {"mining", "tau", &c.mining.tau},
        {"mining", "tau_nei", &c.mining.tau_nei},
        {"mining", "pseudo_regression", &c.mining.pseudo_regression},
        {"trainer", "alpha", &c.alpha},
        {"trainer", "i_max", &c.i_max},
        {"trainer", "i_refine", &c.i_refine},
        {"trainer", "batch_size", &c.batch_size},
        {"trainer", "pretrain_iterations", &c.pretrain_iterations},
        {"trainer", "seed", &c.train_seed},
        {"trainer", "ablation", &c.ablation},
        {"trainer", "inference_model", &c.inference_model},
        {"trainer", "checkpoint_interval", &c.checkpoint_interval},
        {"optimizer", "lr", &c.optimizer.lr},
        {"optimizer", "beta1", &c.optimizer.beta1},
        {"optimizer", "beta2", &c.optimizer.beta2},
        {"optimizer", "eps", &c.optimizer.eps},
        {"loss", "cls_weight", &c.loss.cls},
        {"loss", "reg_weight", &c.loss.reg},
        {"loss", "dir_weight", &c.loss.dir},
        {"loss", "focal_alpha", &c.loss.focal_alpha},
        {"loss", "focal_gamma", &c.loss.focal_gamma},
        {"loss", "smooth_l1_beta", &c.loss.smooth_l1_beta},
        {"eval", "score_threshold", &c.eval.score_threshold},
        {"eval", "nms_tau", &c.eval.nms_tau},
        {"eval", "iou_thresholds", &c.eval.iou_thresholds},
        {"eval", "pseudo_iou", &c.eval.pseudo_iou},
        {"mine", "sweep", &c.mine_sweep},
    };
}

[[noreturn]] void fail_at(std::size_t line, const std::string& message) {
    throw ConfigError("config line " + std::to_string(line) + ": " + message);
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::string strip_comment(const std::string& line) {
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) {
            in_string = !in_string;
        } else if (line[i] == '#' && !in_string) {
            return line.substr(0, i);
        }
    }
    return line;
}

struct Number {
    bool integral = false;
    long long i = 0;
    double d = 0.0;
};

std::optional<Number> parse_number(const std::string& token) {
    if (token.empty()) {
        return std::nullopt;
    }
    Number n;
    const bool looks_integral = token.find_first_of(".eE") == std::string::npos;
    if (looks_integral) {
        auto [p, ec] = std::from_chars(token.data(), token.data() + token.size(), n.i);
        if (ec == std::errc() && p == token.data() + token.size()) {
            n.integral = true;
            n.d = static_cast<double>(n.i);
            return n;
        }
        return std::nullopt;
    }
    auto [p, ec] = std::from_chars(token.data(), token.data() + token.size(), n.d);
    if (ec != std::errc() || p != token.data() + token.size() || !std::isfinite(n.d)) {
        return std::nullopt;
    }
    return n;
}

std::string parse_string(const std::string& token, std::size_t line) {
    if (token.size() < 2 || token.front() != '"' || token.back() != '"') {
        fail_at(line, "expected a quoted string");
    }
    std::string out;
    for (std::size_t i = 1; i + 1 < token.size(); ++i) {
        if (token[i] == '\\' && i + 2 < token.size()) {
            out.push_back(token[++i]);
        } else {
            out.push_back(token[i]);
        }
    }
    return out;
}

void assign(const Target& target, const std::string& value, const std::string& name, std::size_t line) {
    std::visit(
        [&](auto* ptr) {
            using T = std::remove_pointer_t<decltype(ptr)>;
            if constexpr (std::is_same_v<T, std::string>) {
                *ptr = parse_string(value, line);
            } else if constexpr (std::is_same_v<T, bool>) {
                if (value == "true") {
                    *ptr = true;
                } else if (value == "false") {
                    *ptr = false;
                } else {
                    fail_at(line, name + ": expected true or false");
                }
            } else if constexpr (std::is_same_v<T, std::vector<double>>) {
                if (value.size() < 2 || value.front() != '[' || value.back() != ']') {
                    fail_at(line, name + ": expected an array of numbers");
                }
                std::vector<double> out;
                std::stringstream body(value.substr(1, value.size() - 2));
                std::string item;
                while (std::getline(body, item, ',')) {
                    item = trim(item);
                    if (item.empty()) {
                        continue;
                    }
                    const auto n = parse_number(item);
                    if (!n) {
                        fail_at(line, name + ": '" + item + "' is not a number");
                    }
                    out.push_back(n->d);
                }
                *ptr = std::move(out);
            } else {
                const auto n = parse_number(value);
                if (!n) {
                    fail_at(line, name + ": '" + value + "' is not a number");
                }
                if constexpr (std::is_same_v<T, double>) {
                    *ptr = n->d;
                } else {
                    if (!n->integral) {
                        fail_at(line, name + ": expected an integer");
                    }
                    if (n->i < 0 && std::is_same_v<T, std::uint64_t>) {
                        fail_at(line, name + ": expected a non-negative integer");
                    }
                    if constexpr (std::is_same_v<T, int>) {
                        if (n->i < std::numeric_limits<int>::min() || n->i > std::numeric_limits<int>::max()) {
                            fail_at(line, name + ": integer out of range");
                        }
                    }
                    *ptr = static_cast<T>(n->i);
                }
            }
        },
        target);
}

std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    std::string s(buf, p);
    if (s.find_first_of(".eEn") == std::string::npos) {
        s += ".0";
    }
    return s;
}

std::string format_value(const Target& target) {
    return std::visit(
        [](auto* ptr) -> std::string {
            using T = std::remove_pointer_t<decltype(ptr)>;
            if constexpr (std::is_same_v<T, std::string>) {
                std::string out = "\"";
                for (char ch : *ptr) {
                    if (ch == '"' || ch == '\\') {
                        out.push_back('\\');
                    }
                    out.push_back(ch);
                }
                return out + "\"";
            } else if constexpr (std::is_same_v<T, bool>) {
                return *ptr ? "true" : "false";
            } else if constexpr (std::is_same_v<T, double>) {
                return format_double(*ptr);
            } else if constexpr (std::is_same_v<T, std::vector<double>>) {
                std::string out = "[";
                for (std::size_t i = 0; i < ptr->size(); ++i) {
                    out += (i ? ", " : "") + format_double((*ptr)[i]);
                }
                return out + "]";
            } else {
                return std::to_string(*ptr);
            }
        },
        target);
}

void check(bool ok, const std::string& message) {
    if (!ok) {
        throw ConfigError(message);
    }
}

}  // namespace

AnchorGrid GridConfig::build() const {
    std::vector<AnchorTemplate> templates;
    for (double yaw : anchor_yaws) {
        templates.push_back({anchor_length, anchor_width, yaw});
    }
    return AnchorGrid(height, width, cell_size, {origin_x, origin_y}, std::move(templates));
}

void RunConfig::finalize() {
    try {
        scenes.validate();
        trainer().validate();
        (void)grid.build();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    check(data.train_scenes >= 0 && data.val_scenes >= 0, "data: scene counts must be non-negative");
    check(!grid.anchor_yaws.empty(), "grid.anchor_yaws must not be empty");
    check(checkpoint_interval >= 0, "trainer.checkpoint_interval must be non-negative");
    check(ablation_from_string(ablation).has_value(),
          "trainer.ablation must be one of full, sparse-only, mfm-only, mfm-nas, no-stt");
    check(inference_model == "dynamic_teacher" || inference_model == "student",
          "trainer.inference_model must be dynamic_teacher or student");
    auto unit = [](double v) { return v > 0.0 && v < 1.0; };
    check(unit(eval.score_threshold) && unit(eval.nms_tau) && unit(eval.pseudo_iou),
          "eval thresholds must lie in (0, 1)");
    check(!eval.iou_thresholds.empty(), "eval.iou_thresholds must not be empty");
    for (double t : eval.iou_thresholds) {
        check(unit(t), "eval.iou_thresholds entries must lie in (0, 1)");
    }
    for (double t : mine_sweep) {
        check(unit(t), "mine.sweep entries must lie in (0, 1)");
    }
}

TrainerConfig RunConfig::trainer() const {
    TrainerConfig t;
    t.mining = mining;
    t.alpha = alpha;
    t.i_max = i_max;
    t.i_refine = i_refine < 0 ? i_max / 2 : i_refine;
    t.batch_size = batch_size;
    t.pretrain_iterations = pretrain_iterations;
    t.optimizer = optimizer;
    t.loss = loss;
    t.seed = train_seed;
    if (const auto a = ablation_from_string(ablation)) {
        t.overrides = overrides_for(*a);
    }
    t.inference_model = inference_model == "student" ? InferenceModel::Student : InferenceModel::DynamicTeacher;
    return t;
}

RunConfig parse_config(const std::string& text) {
    RunConfig config;
    std::map<std::string, Target> index;
    for (const auto& f : fields(config)) {
        index.emplace(std::string(f.section) + "." + f.key, f.target);
    }
    std::set<std::string> seen;
    std::string section;
    std::istringstream in(text);
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        const std::string content = trim(strip_comment(raw));
        if (content.empty()) {
            continue;
        }
        if (content.front() == '[') {
            if (content.back() != ']') {
                fail_at(line, "unterminated section header");
            }
            section = trim(content.substr(1, content.size() - 2));
            continue;
        }
        const auto eq = content.find('=');
        if (eq == std::string::npos) {
            fail_at(line, "expected 'key = value'");
        }
        const std::string key = trim(content.substr(0, eq));
        const std::string value = trim(content.substr(eq + 1));
        if (key.empty() || value.empty()) {
            fail_at(line, "expected 'key = value'");
        }
        const std::string name = section.empty() ? key : section + "." + key;
        auto it = index.find(name);
        if (it == index.end()) {
            fail_at(line, "unknown key '" + name + "'");
        }
        if (!seen.insert(name).second) {
            fail_at(line, "duplicate key '" + name + "'");
        }
        assign(it->second, value, name, line);
    }
    config.finalize();
    return config;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read config '" + path.string() + "'");
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str());
}

std::string format_number(double value) { return format_double(value); }

std::string to_toml(const RunConfig& config) {
    RunConfig copy = config;
    copy.i_refine = config.trainer().i_refine;
    std::string out;
    std::string section;
    for (const auto& f : fields(copy)) {
        if (section != f.section) {
            section = f.section;
            out += (out.empty() ? "[" : "\n[") + section + "]\n";
        }
        out += std::string(f.key) + " = " + format_value(f.target) + "\n";
    }
    return out;
}

nlohmann::json to_json(const RunConfig& config) {
    RunConfig copy = config;
    copy.i_refine = config.trainer().i_refine;
    nlohmann::json out = nlohmann::json::object();
    for (const auto& f : fields(copy)) {
        std::visit([&](auto* ptr) { out[f.section][f.key] = *ptr; }, f.target);
    }
    return out;
}

}  // namespace bevmine::app
