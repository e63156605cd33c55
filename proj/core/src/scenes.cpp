#include "bevmine/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "bevmine/rng.hpp"

namespace bevmine {

using nlohmann::json;

namespace {

constexpr int kMaxPlacementTries = 200;
constexpr std::size_t kMaxSceneAttempts = 64;

std::string scene_id_for(std::size_t index) {
    std::string digits = std::to_string(index);
    if (digits.size() < 6) {
        digits.insert(0, 6 - digits.size(), '0');
    }
    return "scene-" + digits;
}

Vec2 sample_in_box(const BoxBEV& box, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    const double lx = u(rng) * box.length;
    const double ly = u(rng) * box.width;
    const double c = std::cos(box.yaw);
    const double s = std::sin(box.yaw);
    return {box.cx + c * lx - s * ly, box.cy + s * lx + c * ly};
}

bool overlaps_any(const BoxBEV& box, const std::vector<BoxBEV>& placed, double max_iou) {
    return std::any_of(placed.begin(), placed.end(),
                       [&](const BoxBEV& other) { return rotated_iou(box, other) > max_iou; });
}

/// Appends a Poisson-sized cluster of noisy points sampled from `box` (global
/// frame) to `out`, expressed in the agent frame.
void observe_cluster(const BoxBEV& box, double expected, const Pose2D& agent_pose, double noise,
                     std::mt19937_64& rng, std::vector<Vec2>& out) {
    if (expected <= 0.0) {
        return;
    }
    std::poisson_distribution<int> count_dist(expected);
    std::normal_distribution<double> jitter(0.0, noise);
    const int n = count_dist(rng);
    const Pose2D world{};
    for (int k = 0; k < n; ++k) {
        Vec2 p = sample_in_box(box, rng);
        if (noise > 0.0) {
            p.x += jitter(rng);
            p.y += jitter(rng);
        }
        out.push_back(se2_transform(p, world, agent_pose));
    }
}

Scene generate_scene_attempt(const SceneGenParams& params, std::size_t index, std::size_t attempt) {
    params.validate();
    std::mt19937_64 rng(derive_seed(params.seed, index, attempt));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    Scene scene;
    scene.scene_id = scene_id_for(index);

    const double reach = params.half_extent - params.placement_margin;
    std::uniform_int_distribution<int> object_count(params.min_objects, params.max_objects);
    const int n_objects = object_count(rng);
    std::vector<BoxBEV> placed;
    for (int i = 0; i < n_objects; ++i) {
        for (int t = 0; t < kMaxPlacementTries; ++t) {
            const int quadrant = static_cast<int>(unit(rng) * 4.0) % 4;
            BoxBEV box{uniform(-reach, reach),
                       uniform(-reach, reach),
                       uniform(params.min_length, params.max_length),
                       uniform(params.min_width, params.max_width),
                       normalize_angle(quadrant * 0.5 * kPi + uniform(-params.yaw_jitter, params.yaw_jitter))};
            if (!overlaps_any(box, placed, 0.1)) {
                placed.push_back(box);
                scene.gt_boxes.push_back({box, static_cast<int>(scene.gt_boxes.size())});
                break;
            }
        }
    }

    std::uniform_int_distribution<int> distractor_count(params.min_distractors, params.max_distractors);
    const int n_distractors = distractor_count(rng);
    std::vector<BoxBEV> distractors;
    for (int i = 0; i < n_distractors; ++i) {
        for (int t = 0; t < kMaxPlacementTries; ++t) {
            BoxBEV box{uniform(-reach, reach), uniform(-reach, reach), params.distractor_size,
                       params.distractor_size * uniform(0.6, 1.0), uniform(-kPi, kPi)};
            if (!overlaps_any(box, placed, 0.0) && !overlaps_any(box, distractors, 0.0)) {
                distractors.push_back(box);
                break;
            }
        }
    }

    for (int a = 0; a < params.agent_count; ++a) {
        Agent agent;
        agent.agent_id = a;
        if (a > 0) {
            const double r = params.agent_spread * std::sqrt(unit(rng));
            const double theta = uniform(-kPi, kPi);
            agent.pose = {r * std::cos(theta), r * std::sin(theta), uniform(-kPi, kPi)};
        }
        auto expected_points = [&](const BoxBEV& box) {
            const double range = std::hypot(box.cx - agent.pose.x, box.cy - agent.pose.y);
            if (range > params.sensor_range) {
                return 0.0;
            }
            const double q = range / params.range_scale;
            return params.points_per_object / (1.0 + q * q);
        };
        for (const auto& obj : scene.gt_boxes) {
            const bool occluded = unit(rng) < params.occlusion_dropout;
            const double expected = expected_points(obj.box);
            if (!occluded) {
                observe_cluster(obj.box, expected, agent.pose, params.position_noise, rng, agent.points);
            }
        }
        for (const auto& box : distractors) {
            observe_cluster(box, 0.6 * expected_points(box), agent.pose, params.position_noise, rng,
                            agent.points);
        }
        std::poisson_distribution<int> clutter(params.clutter_rate);
        const int n_clutter = params.clutter_rate > 0.0 ? clutter(rng) : 0;
        for (int k = 0; k < n_clutter; ++k) {
            agent.points.push_back(
                {uniform(-params.half_extent, params.half_extent), uniform(-params.half_extent, params.half_extent)});
        }
        scene.agents.push_back(std::move(agent));
    }
    return scene;
}

double require_number(const json& obj, const char* key, std::size_t line, const std::string& path) {
    const std::string field = path.empty() ? key : path + "." + key;
    auto it = obj.find(key);
    if (it == obj.end()) {
        throw ParseError(line, field, "missing field");
    }
    if (!it->is_number()) {
        throw ParseError(line, field, "expected a number");
    }
    return it->get<double>();
}

int require_int(const json& obj, const char* key, std::size_t line, const std::string& path) {
    const std::string field = path.empty() ? key : path + "." + key;
    auto it = obj.find(key);
    if (it == obj.end()) {
        throw ParseError(line, field, "missing field");
    }
    if (!it->is_number_integer()) {
        throw ParseError(line, field, "expected an integer");
    }
    return it->get<int>();
}

const json& require_array(const json& obj, const char* key, std::size_t line, const std::string& path) {
    const std::string field = path.empty() ? key : path + "." + key;
    auto it = obj.find(key);
    if (it == obj.end()) {
        throw ParseError(line, field, "missing field");
    }
    if (!it->is_array()) {
        throw ParseError(line, field, "expected an array");
    }
    return *it;
}

const json& require_object(const json& obj, const char* key, std::size_t line, const std::string& path) {
    const std::string field = path.empty() ? key : path + "." + key;
    auto it = obj.find(key);
    if (it == obj.end()) {
        throw ParseError(line, field, "missing field");
    }
    if (!it->is_object()) {
        throw ParseError(line, field, "expected an object");
    }
    return *it;
}

}  // namespace

const GtObject* Scene::find_object(int object_id) const {
    for (const auto& obj : gt_boxes) {
        if (obj.object_id == object_id) {
            return &obj;
        }
    }
    return nullptr;
}

void SceneGenParams::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("SceneGenParams: " + what); };
    if (!(half_extent > 0.0) || placement_margin < 0.0 || placement_margin >= half_extent) {
        fail("extent must be positive and larger than the placement margin");
    }
    if (min_objects < 0 || max_objects < min_objects) {
        fail("object count range is empty");
    }
    if (!(min_length > 0.0) || max_length < min_length || !(min_width > 0.0) || max_width < min_width) {
        fail("object size ranges are empty");
    }
    if (agent_count < 1) {
        fail("at least one agent required");
    }
    if (points_per_object < 0.0 || clutter_rate < 0.0 || position_noise < 0.0 || !(range_scale > 0.0)) {
        fail("rates must be non-negative");
    }
    if (occlusion_dropout < 0.0 || occlusion_dropout > 1.0) {
        fail("occlusion dropout must be a probability");
    }
    if (min_distractors < 0 || max_distractors < min_distractors || !(distractor_size > 0.0)) {
        fail("distractor range is empty");
    }
}

Scene generate_scene(const SceneGenParams& params, std::size_t index) {
    return generate_scene_attempt(params, index, 0);
}

std::vector<int> observed_objects(const Scene& scene, std::size_t agent_index) {
    const Agent& agent = scene.agents.at(agent_index);
    const Pose2D world{};
    std::vector<Vec2> global = se2_transform(agent.points, agent.pose, world);
    std::vector<int> ids;
    for (const auto& obj : scene.gt_boxes) {
        const bool seen =
            std::any_of(global.begin(), global.end(), [&](const Vec2& p) { return obj.box.contains(p); });
        if (seen) {
            ids.push_back(obj.object_id);
        }
    }
    return ids;
}

SparseLabelResult sample_sparse_labels(Scene scene, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SparseLabelResult result;
    for (std::size_t a = 0; a < scene.agents.size(); ++a) {
        const auto ids = observed_objects(scene, a);
        if (ids.empty()) {
            scene.agents[a].sparse_label.reset();
            result.unobserved_agents.push_back(a);
            continue;
        }
        std::uniform_int_distribution<std::size_t> pick(0, ids.size() - 1);
        scene.agents[a].sparse_label = ids[pick(rng)];
    }
    result.scene = std::move(scene);
    return result;
}

std::vector<Scene> generate_corpus(const SceneGenParams& params, std::size_t first_index, std::size_t count) {
    std::vector<Scene> corpus;
    corpus.reserve(count);
    for (std::size_t i = first_index; i < first_index + count; ++i) {
        bool done = false;
        for (std::size_t attempt = 0; attempt < kMaxSceneAttempts && !done; ++attempt) {
            auto labelled = sample_sparse_labels(generate_scene_attempt(params, i, attempt),
                                                 derive_seed(params.seed ^ 0x5a5a5a5aULL, i, attempt));
            if (labelled.ok()) {
                corpus.push_back(std::move(labelled.scene));
                done = true;
            }
        }
        if (!done) {
            throw std::runtime_error("generate_corpus: scene " + std::to_string(i) +
                                     " has an agent observing no object after repeated resampling");
        }
    }
    return corpus;
}

CorpusStats corpus_stats(std::span<const Scene> scenes) {
    CorpusStats stats;
    stats.scenes = scenes.size();
    for (const auto& scene : scenes) {
        stats.agents += scene.agents.size();
        stats.objects += scene.gt_boxes.size();
        std::set<int> distinct;
        for (const auto& agent : scene.agents) {
            if (agent.sparse_label) {
                ++stats.sparse_labels;
                distinct.insert(*agent.sparse_label);
            }
        }
        stats.distinct_sparse_objects += distinct.size();
    }
    stats.sparse_ratio =
        stats.objects == 0 ? 0.0 : static_cast<double>(stats.sparse_labels) / static_cast<double>(stats.objects);
    return stats;
}

ParseError::ParseError(std::size_t line, std::string field, const std::string& message)
    : std::runtime_error("line " + std::to_string(line) + ", field '" + field + "': " + message),
      line_(line),
      field_(std::move(field)) {}

std::string scene_to_json_line(const Scene& scene) {
    json j;
    j["scene_id"] = scene.scene_id;
    json agents = json::array();
    for (const auto& agent : scene.agents) {
        json points = json::array();
        for (const auto& p : agent.points) {
            points.push_back({p.x, p.y});
        }
        agents.push_back({{"agent_id", agent.agent_id},
                          {"pose", {{"x", agent.pose.x}, {"y", agent.pose.y}, {"heading", agent.pose.heading}}},
                          {"points", std::move(points)},
                          {"sparse_label", agent.sparse_label ? json(*agent.sparse_label) : json(nullptr)}});
    }
    j["agents"] = std::move(agents);
    json boxes = json::array();
    for (const auto& obj : scene.gt_boxes) {
        boxes.push_back({{"cx", obj.box.cx},
                         {"cy", obj.box.cy},
                         {"length", obj.box.length},
                         {"width", obj.box.width},
                         {"yaw", obj.box.yaw},
                         {"object_id", obj.object_id}});
    }
    j["gt_boxes"] = std::move(boxes);
    return j.dump();
}

Scene scene_from_json_line(const std::string& line, std::size_t line_number) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        throw ParseError(line_number, "<record>", std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) {
        throw ParseError(line_number, "<record>", "expected a JSON object");
    }
    Scene scene;
    auto id = j.find("scene_id");
    if (id == j.end() || !id->is_string()) {
        throw ParseError(line_number, "scene_id", "missing or not a string");
    }
    scene.scene_id = id->get<std::string>();

    const json& agents = require_array(j, "agents", line_number, "");
    for (std::size_t a = 0; a < agents.size(); ++a) {
        const std::string path = "agents[" + std::to_string(a) + "]";
        const json& ja = agents[a];
        if (!ja.is_object()) {
            throw ParseError(line_number, path, "expected an object");
        }
        Agent agent;
        agent.agent_id = require_int(ja, "agent_id", line_number, path);
        const json& pose = require_object(ja, "pose", line_number, path);
        agent.pose = {require_number(pose, "x", line_number, path + ".pose"),
                      require_number(pose, "y", line_number, path + ".pose"),
                      require_number(pose, "heading", line_number, path + ".pose")};
        const json& points = require_array(ja, "points", line_number, path);
        agent.points.reserve(points.size());
        for (std::size_t k = 0; k < points.size(); ++k) {
            const json& p = points[k];
            if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
                throw ParseError(line_number, path + ".points[" + std::to_string(k) + "]",
                                 "expected an [x, y] pair");
            }
            agent.points.push_back({p[0].get<double>(), p[1].get<double>()});
        }
        auto label = ja.find("sparse_label");
        if (label != ja.end() && !label->is_null()) {
            if (!label->is_number_integer()) {
                throw ParseError(line_number, path + ".sparse_label", "expected an integer or null");
            }
            agent.sparse_label = label->get<int>();
        }
        scene.agents.push_back(std::move(agent));
    }

    const json& boxes = require_array(j, "gt_boxes", line_number, "");
    for (std::size_t b = 0; b < boxes.size(); ++b) {
        const std::string path = "gt_boxes[" + std::to_string(b) + "]";
        const json& jb = boxes[b];
        if (!jb.is_object()) {
            throw ParseError(line_number, path, "expected an object");
        }
        GtObject obj;
        obj.box = {require_number(jb, "cx", line_number, path), require_number(jb, "cy", line_number, path),
                   require_number(jb, "length", line_number, path), require_number(jb, "width", line_number, path),
                   require_number(jb, "yaw", line_number, path)};
        obj.object_id = require_int(jb, "object_id", line_number, path);
        if (!obj.box.valid()) {
            throw ParseError(line_number, path, "box has non-positive size or non-finite values");
        }
        scene.gt_boxes.push_back(obj);
    }

    std::set<int> ids;
    for (const auto& obj : scene.gt_boxes) {
        if (!ids.insert(obj.object_id).second) {
            throw ParseError(line_number, "gt_boxes", "duplicate object_id " + std::to_string(obj.object_id));
        }
    }
    for (std::size_t a = 0; a < scene.agents.size(); ++a) {
        const auto& label = scene.agents[a].sparse_label;
        if (label && !ids.contains(*label)) {
            throw ParseError(line_number, "agents[" + std::to_string(a) + "].sparse_label",
                             "references unknown object_id " + std::to_string(*label));
        }
    }
    return scene;
}

void save_scenes(const std::filesystem::path& path, std::span<const Scene> scenes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    }
    for (const auto& scene : scenes) {
        out << scene_to_json_line(scene) << '\n';
    }
    if (!out) {
        throw std::runtime_error("failed writing '" + path.string() + "'");
    }
}

std::vector<Scene> load_scenes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open '" + path.string() + "' for reading");
    }
    std::vector<Scene> scenes;
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        scenes.push_back(scene_from_json_line(line, line_number));
    }
    return scenes;
}

}  // namespace bevmine
