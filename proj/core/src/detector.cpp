#include "bevmine/detector.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

namespace bevmine {

namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = kFnvOffset) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= kFnvPrime;
    }
    return h;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// Gathers the zero-padded 3x3 x C input patch around (row, col).
void gather_patch(const FeatureMap& f, int row, int col, std::vector<double>& patch) {
    const int c = f.channels;
    int tap = 0;
    for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc, ++tap) {
            const int r = row + dr;
            const int cc = col + dc;
            double* dst = &patch[static_cast<std::size_t>(tap) * c];
            if (r < 0 || r >= f.height || cc < 0 || cc >= f.width) {
                std::fill(dst, dst + c, 0.0);
            } else {
                const double* src = &f.values[(static_cast<std::size_t>(r) * f.width + cc) * c];
                std::copy(src, src + c, dst);
            }
        }
    }
}

void check_head_shapes(const FeatureMap& fused, const DetectorState& state) {
    if (fused.channels != state.layout.channels) {
        throw std::invalid_argument("detect_head: feature channels do not match the parameter layout");
    }
    if (state.params.size() != state.layout.total()) {
        throw std::invalid_argument("detect_head: parameter vector does not match its layout");
    }
}

}  // namespace

FeatureMap encode(const Agent& agent, const AnchorGrid& grid) {
    FeatureMap f(grid.height_cells(), grid.width_cells(), kFeatureChannels);
    const double cs = grid.cell_size();
    for (const Vec2& p : agent.points) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
            throw std::invalid_argument("encode: non-finite point");
        }
        const auto cell = grid.locate(p);
        if (!cell) {
            continue;
        }
        const Vec2 center = grid.cell_center(*cell);
        f.at(cell->row, cell->col, 0) += 1.0;
        f.at(cell->row, cell->col, 1) += (p.x - center.x) / cs;
        f.at(cell->row, cell->col, 2) += (p.y - center.y) / cs;
    }
    for (int r = 0; r < f.height; ++r) {
        for (int c = 0; c < f.width; ++c) {
            const double n = f.at(r, c, 0);
            if (n > 0.0) {
                f.at(r, c, 1) /= n;
                f.at(r, c, 2) /= n;
                f.at(r, c, 3) = 1.0 - std::exp(-n / kDensityScale);
            }
        }
    }
    return f;
}

FeatureMap project_feature(const FeatureMap& f, const AnchorGrid& grid, const Pose2D& from_pose,
                           const Pose2D& to_pose) {
    if (f.height != grid.height_cells() || f.width != grid.width_cells()) {
        throw std::invalid_argument("project_feature: map does not match grid");
    }
    FeatureMap out(f.height, f.width, f.channels);
    const double dtheta = from_pose.heading - to_pose.heading;
    const double c = std::cos(dtheta);
    const double s = std::sin(dtheta);
    for (int r = 0; r < f.height; ++r) {
        for (int col = 0; col < f.width; ++col) {
            const Vec2 target_center = grid.cell_center({r, col});
            const Vec2 source_point = se2_transform(target_center, to_pose, from_pose);
            const auto src = grid.locate(source_point);
            if (!src) {
                continue;
            }
            for (int ch = 0; ch < f.channels; ++ch) {
                out.at(r, col, ch) = f.at(src->row, src->col, ch);
            }
            if (f.channels >= 3) {
                // Offsets are vectors in the source frame.
                const double ox = f.at(src->row, src->col, 1);
                const double oy = f.at(src->row, src->col, 2);
                out.at(r, col, 1) = c * ox - s * oy;
                out.at(r, col, 2) = s * ox + c * oy;
            }
        }
    }
    return out;
}

FeatureMap fuse_max(const FeatureMap& ego, std::span<const FeatureMap> projected) {
    FeatureMap out = ego;
    for (const auto& m : projected) {
        if (!m.same_shape(ego)) {
            throw std::invalid_argument("fuse_max: feature maps differ in shape");
        }
        for (std::size_t i = 0; i < out.values.size(); ++i) {
            out.values[i] = std::max(out.values[i], m.values[i]);
        }
    }
    return out;
}

FeatureMap collaborative_features(const Scene& scene, const AnchorGrid& grid, std::size_t ego) {
    if (ego >= scene.agents.size()) {
        throw std::invalid_argument("collaborative_features: ego agent index out of range");
    }
    const Agent& ego_agent = scene.agents[ego];
    FeatureMap ego_map = encode(ego_agent, grid);
    std::vector<FeatureMap> others;
    for (std::size_t a = 0; a < scene.agents.size(); ++a) {
        if (a == ego) {
            continue;
        }
        others.push_back(project_feature(encode(scene.agents[a], grid), grid, scene.agents[a].pose, ego_agent.pose));
    }
    return fuse_max(ego_map, others);
}

double Prediction::score(std::size_t anchor) const { return sigmoid(cls[anchor]); }

bool Prediction::finite() const {
    auto all_finite = [](const std::vector<double>& v) {
        return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    return all_finite(cls) && all_finite(reg) && all_finite(dir);
}

ParamLayout ParamLayout::for_head(int channels, int anchors_per_cell) {
    ParamLayout layout;
    layout.channels = channels;
    layout.anchors_per_cell = anchors_per_cell;
    const std::size_t weights = layout.outputs() * layout.inputs();
    layout.blocks = {{"head.weight", 0, weights}, {"head.bias", weights, layout.outputs()}};
    return layout;
}

std::size_t ParamLayout::total() const {
    std::size_t n = 0;
    for (const auto& b : blocks) {
        n = std::max(n, b.offset + b.size);
    }
    return n;
}

bool DetectorState::finite() const {
    return std::all_of(params.begin(), params.end(), [](double x) { return std::isfinite(x); });
}

std::uint64_t DetectorState::fingerprint() const {
    std::uint64_t h = kFnvOffset;
    for (double p : params) {
        const auto bits = std::bit_cast<std::uint64_t>(p);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xffU;
            h *= kFnvPrime;
        }
    }
    return h;
}

DetectorState zero_detector(const AnchorGrid& grid) {
    DetectorState state;
    state.layout = ParamLayout::for_head(kFeatureChannels, static_cast<int>(grid.anchors_per_cell()));
    state.params.assign(state.layout.total(), 0.0);
    return state;
}

DetectorState initialize_detector(const AnchorGrid& grid, std::uint64_t seed, double prior_probability) {
    DetectorState state = zero_detector(grid);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 0.01);
    const std::size_t weights = state.layout.outputs() * state.layout.inputs();
    for (std::size_t i = 0; i < weights; ++i) {
        state.params[i] = normal(rng);
    }
    const double prior_bias = -std::log((1.0 - prior_probability) / prior_probability);
    for (std::size_t a = 0; a < grid.anchors_per_cell(); ++a) {
        state.params[weights + a * kOutputsPerAnchor] = prior_bias;
    }
    return state;
}

Prediction detect_head(const FeatureMap& fused, const DetectorState& state) {
    check_head_shapes(fused, state);
    const std::size_t a_per_cell = static_cast<std::size_t>(state.layout.anchors_per_cell);
    const std::size_t n_in = state.layout.inputs();
    const std::size_t n_out = state.layout.outputs();
    const double* weight = state.params.data();
    const double* bias = weight + n_out * n_in;

    Prediction pred(static_cast<std::size_t>(fused.height) * fused.width * a_per_cell);
    std::vector<double> patch(n_in);
    std::vector<double> out(n_out);
    for (int r = 0; r < fused.height; ++r) {
        for (int c = 0; c < fused.width; ++c) {
            gather_patch(fused, r, c, patch);
            for (std::size_t o = 0; o < n_out; ++o) {
                const double* w = weight + o * n_in;
                double acc = bias[o];
                for (std::size_t k = 0; k < n_in; ++k) {
                    acc += w[k] * patch[k];
                }
                out[o] = acc;
            }
            const std::size_t cell = static_cast<std::size_t>(r) * fused.width + c;
            for (std::size_t a = 0; a < a_per_cell; ++a) {
                const std::size_t anchor = cell * a_per_cell + a;
                const double* o = &out[a * kOutputsPerAnchor];
                pred.cls[anchor] = o[0];
                std::copy(o + 1, o + 6, &pred.reg[anchor * 5]);
                std::copy(o + 6, o + 8, &pred.dir[anchor * 2]);
            }
        }
    }
    return pred;
}

std::vector<double> detect_head_backward(const FeatureMap& fused, const DetectorState& state,
                                         const Prediction& grad_pred) {
    check_head_shapes(fused, state);
    const std::size_t a_per_cell = static_cast<std::size_t>(state.layout.anchors_per_cell);
    const std::size_t n_in = state.layout.inputs();
    const std::size_t n_out = state.layout.outputs();
    if (grad_pred.num_anchors != static_cast<std::size_t>(fused.height) * fused.width * a_per_cell) {
        throw std::invalid_argument("detect_head_backward: gradient shape mismatch");
    }
    std::vector<double> grad(state.params.size(), 0.0);
    double* g_weight = grad.data();
    double* g_bias = g_weight + n_out * n_in;
    std::vector<double> patch(n_in);
    std::vector<double> g_out(n_out);
    for (int r = 0; r < fused.height; ++r) {
        for (int c = 0; c < fused.width; ++c) {
            const std::size_t cell = static_cast<std::size_t>(r) * fused.width + c;
            bool any = false;
            for (std::size_t a = 0; a < a_per_cell; ++a) {
                const std::size_t anchor = cell * a_per_cell + a;
                double* o = &g_out[a * kOutputsPerAnchor];
                o[0] = grad_pred.cls[anchor];
                std::copy(&grad_pred.reg[anchor * 5], &grad_pred.reg[anchor * 5] + 5, o + 1);
                std::copy(&grad_pred.dir[anchor * 2], &grad_pred.dir[anchor * 2] + 2, o + 6);
            }
            for (double v : g_out) {
                any = any || v != 0.0;
            }
            if (!any) {
                continue;
            }
            gather_patch(fused, r, c, patch);
            for (std::size_t o = 0; o < n_out; ++o) {
                const double go = g_out[o];
                if (go == 0.0) {
                    continue;
                }
                double* w = g_weight + o * n_in;
                for (std::size_t k = 0; k < n_in; ++k) {
                    w[k] += go * patch[k];
                }
                g_bias[o] += go;
            }
        }
    }
    return grad;
}

LossResult supervised_loss(const Prediction& pred, const LabelSet& labels, const AnchorGrid& grid,
                           const LossWeights& weights) {
    const std::size_t n = grid.num_anchors();
    if (pred.num_anchors != n) {
        throw std::invalid_argument("supervised_loss: prediction does not match the anchor grid");
    }
    std::vector<const LabelEntry*> positive(n, nullptr);
    for (const auto& e : labels.positives) {
        if (e.anchor >= n) {
            throw std::out_of_range("supervised_loss: label references anchor outside the grid");
        }
        if (!e.target.finite()) {
            throw std::invalid_argument("supervised_loss: positive anchor without a finite regression target");
        }
        if (positive[e.anchor] != nullptr) {
            throw std::invalid_argument("supervised_loss: duplicate label for one anchor");
        }
        positive[e.anchor] = &e;
    }

    LossResult result;
    result.grad = Prediction(n);
    result.num_positives = labels.positives.size();
    const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, result.num_positives));
    const double alpha = weights.focal_alpha;
    const double gamma = weights.focal_gamma;

    double cls_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = pred.cls[i];
        const double p = sigmoid(z);
        const double q = sigmoid(-z);
        double loss = 0.0;
        double dz = 0.0;
        if (positive[i] != nullptr) {
            const double log_p = -softplus(-z);
            const double mod = std::pow(q, gamma);
            loss = -alpha * mod * log_p;
            dz = alpha * mod * (gamma * p * log_p - q);
        } else {
            const double log_q = -softplus(z);
            const double mod = std::pow(p, gamma);
            loss = -(1.0 - alpha) * mod * log_q;
            dz = (1.0 - alpha) * mod * (p - gamma * q * log_q);
        }
        cls_sum += loss;
        result.grad.cls[i] = weights.cls * norm * dz;
    }
    result.cls = weights.cls * norm * cls_sum;

    double reg_sum = 0.0;
    double dir_sum = 0.0;
    const double beta = weights.smooth_l1_beta;
    for (const auto& e : labels.positives) {
        if (e.regress) {
            const auto target = e.target.as_array();
            for (std::size_t k = 0; k < 5; ++k) {
                const double d = pred.reg[e.anchor * 5 + k] - target[k];
                const double ad = std::abs(d);
                double g = 0.0;
                if (ad < beta) {
                    reg_sum += 0.5 * d * d / beta;
                    g = d / beta;
                } else {
                    reg_sum += ad - 0.5 * beta;
                    g = d > 0.0 ? 1.0 : -1.0;
                }
                result.grad.reg[e.anchor * 5 + k] = weights.reg * norm * g;
            }
        }
        const double l0 = pred.dir[e.anchor * 2];
        const double l1 = pred.dir[e.anchor * 2 + 1];
        const double m = std::max(l0, l1);
        const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
        const double p0 = std::exp(l0 - lse);
        const double p1 = std::exp(l1 - lse);
        dir_sum += lse - (e.direction == 1 ? l1 : l0);
        result.grad.dir[e.anchor * 2] = weights.dir * norm * (p0 - (e.direction == 0 ? 1.0 : 0.0));
        result.grad.dir[e.anchor * 2 + 1] = weights.dir * norm * (p1 - (e.direction == 1 ? 1.0 : 0.0));
    }
    result.reg = weights.reg * norm * reg_sum;
    result.dir = weights.dir * norm * dir_sum;
    result.total = result.cls + result.reg + result.dir;
    return result;
}

void optimizer_step(DetectorState& state, std::span<const double> gradient, AdamMemory& memory,
                    const AdamSettings& settings) {
    const std::size_t n = state.params.size();
    if (gradient.size() != n) {
        throw std::invalid_argument("optimizer_step: gradient size does not match the state");
    }
    for (double g : gradient) {
        if (!std::isfinite(g)) {
            throw NumericError("optimizer_step: non-finite gradient");
        }
    }
    if (memory.m.empty() && memory.v.empty()) {
        memory.m.assign(n, 0.0);
        memory.v.assign(n, 0.0);
    }
    if (memory.m.size() != n || memory.v.size() != n) {
        throw std::invalid_argument("optimizer_step: optimizer memory does not match the state");
    }
    ++memory.step;
    const double t = static_cast<double>(memory.step);
    const double bc1 = 1.0 - std::pow(settings.beta1, t);
    const double bc2 = 1.0 - std::pow(settings.beta2, t);
    for (std::size_t i = 0; i < n; ++i) {
        memory.m[i] = settings.beta1 * memory.m[i] + (1.0 - settings.beta1) * gradient[i];
        memory.v[i] = settings.beta2 * memory.v[i] + (1.0 - settings.beta2) * gradient[i] * gradient[i];
        const double m_hat = memory.m[i] / bc1;
        const double v_hat = memory.v[i] / bc2;
        state.params[i] -= settings.lr * m_hat / (std::sqrt(v_hat) + settings.eps);
    }
}

std::uint64_t config_hash(const AnchorGrid& grid, const ParamLayout& layout) {
    std::ostringstream os;
    os << "grid:" << grid.height_cells() << ',' << grid.width_cells() << ',' << fmt_double(grid.cell_size()) << ','
       << fmt_double(grid.origin().x) << ',' << fmt_double(grid.origin().y) << ";templates:";
    for (const auto& t : grid.templates()) {
        os << fmt_double(t.length) << ',' << fmt_double(t.width) << ',' << fmt_double(t.yaw) << ';';
    }
    os << "layout:" << layout.channels << ',' << layout.anchors_per_cell << ';';
    for (const auto& b : layout.blocks) {
        os << b.name << ',' << b.offset << ',' << b.size << ';';
    }
    return fnv1a(os.str());
}

std::string hash_hex(std::uint64_t hash) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
    return buf;
}

void save_checkpoint(const std::filesystem::path& path, const DetectorState& state, const AnchorGrid& grid) {
    nlohmann::json j;
    j["format"] = "bevmine-checkpoint/1";
    j["config_hash"] = hash_hex(config_hash(grid, state.layout));
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : state.layout.blocks) {
        blocks.push_back({{"name", b.name}, {"offset", b.offset}, {"size", b.size}});
    }
    j["layout"] = {{"channels", state.layout.channels},
                   {"anchors_per_cell", state.layout.anchors_per_cell},
                   {"blocks", std::move(blocks)}};
    j["params"] = state.params;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw CheckpointError("cannot open '" + path.string() + "' for writing");
    }
    out << j.dump() << '\n';
}

DetectorState load_checkpoint(const std::filesystem::path& path, const AnchorGrid& grid) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("malformed checkpoint '" + path.string() + "': " + e.what());
    }
    DetectorState state;
    try {
        if (j.at("format").get<std::string>() != "bevmine-checkpoint/1") {
            throw CheckpointError("unsupported checkpoint format in '" + path.string() + "'");
        }
        const auto& jl = j.at("layout");
        state.layout.channels = jl.at("channels").get<int>();
        state.layout.anchors_per_cell = jl.at("anchors_per_cell").get<int>();
        for (const auto& jb : jl.at("blocks")) {
            state.layout.blocks.push_back(
                {jb.at("name").get<std::string>(), jb.at("offset").get<std::size_t>(), jb.at("size").get<std::size_t>()});
        }
        state.params = j.at("params").get<std::vector<double>>();
        const std::string stored = j.at("config_hash").get<std::string>();
        const std::string expected = hash_hex(config_hash(grid, state.layout));
        if (stored != expected) {
            throw CheckpointError("checkpoint '" + path.string() + "' was written for config " + stored +
                                  " but the current grid/layout hashes to " + expected);
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("malformed checkpoint '" + path.string() + "': " + e.what());
    }
    if (state.layout != ParamLayout::for_head(kFeatureChannels, static_cast<int>(grid.anchors_per_cell()))) {
        throw CheckpointError("checkpoint '" + path.string() + "' has an unexpected parameter layout");
    }
    if (state.params.size() != state.layout.total() || !state.finite()) {
        throw CheckpointError("checkpoint '" + path.string() + "' has a corrupt parameter vector");
    }
    return state;
}

}  // namespace bevmine
