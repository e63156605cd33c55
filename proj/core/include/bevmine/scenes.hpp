#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevmine/geometry.hpp"

namespace bevmine {

struct Agent {
    int agent_id = 0;
    Pose2D pose;
    /// Observed points, expressed in this agent's frame.
    std::vector<Vec2> points;
    std::optional<int> sparse_label;

    friend bool operator==(const Agent&, const Agent&) = default;
};

struct GtObject {
    BoxBEV box;  // global frame
    int object_id = 0;

    friend bool operator==(const GtObject&, const GtObject&) = default;
};

struct Scene {
    std::string scene_id;
    std::vector<Agent> agents;
    std::vector<GtObject> gt_boxes;

    const GtObject* find_object(int object_id) const;

    friend bool operator==(const Scene&, const Scene&) = default;
};

struct SceneGenParams {
    /// Objects are placed with centers inside [-half_extent, half_extent]^2 of
    /// the global frame (minus `placement_margin`).
    double half_extent = 20.0;
    double placement_margin = 2.0;
    int min_objects = 6;
    int max_objects = 12;
    double min_length = 3.6;
    double max_length = 4.6;
    double min_width = 1.6;
    double max_width = 2.0;
    /// Heading noise around the four axis-aligned road directions.
    double yaw_jitter = 0.12;
    int agent_count = 2;
    /// Non-ego agents are placed within this radius of the ego (the ego sits at the origin).
    double agent_spread = 14.0;
    double sensor_range = 40.0;
    /// Expected points per object at zero range; decays as 1 / (1 + (r / range_scale)^2).
    double points_per_object = 24.0;
    double range_scale = 16.0;
    double position_noise = 0.05;
    /// Expected uniform clutter points per agent over its sensing square.
    double clutter_rate = 60.0;
    int min_distractors = 2;
    int max_distractors = 5;
    double distractor_size = 1.0;
    double occlusion_dropout = 0.2;
    std::uint64_t seed = 7;

    void validate() const;
};

/// Deterministic function of (params, index).
Scene generate_scene(const SceneGenParams& params, std::size_t index);

/// Object ids with at least one of the agent's points inside their footprint.
std::vector<int> observed_objects(const Scene& scene, std::size_t agent_index);

struct SparseLabelResult {
    Scene scene;
    /// Indices of agents that observe no object; their sparse_label stays empty.
    std::vector<std::size_t> unobserved_agents;

    bool ok() const { return unobserved_agents.empty(); }
};

/// Draws each agent's single annotation uniformly from the objects it observes.
SparseLabelResult sample_sparse_labels(Scene scene, std::uint64_t seed);

/// Generates `count` sparse-labelled scenes starting at `first_index`,
/// resampling scenes where some agent observes nothing. Throws when a scene
/// cannot be made valid within a bounded number of attempts.
std::vector<Scene> generate_corpus(const SceneGenParams& params, std::size_t first_index, std::size_t count);

struct CorpusStats {
    std::size_t scenes = 0;
    std::size_t agents = 0;
    std::size_t objects = 0;
    std::size_t sparse_labels = 0;        // one per agent
    std::size_t distinct_sparse_objects = 0;
    double sparse_ratio = 0.0;            // sparse_labels / objects
};

CorpusStats corpus_stats(std::span<const Scene> scenes);

class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t line, std::string field, const std::string& message);
    std::size_t line() const { return line_; }
    const std::string& field() const { return field_; }

private:
    std::size_t line_;
    std::string field_;
};

std::string scene_to_json_line(const Scene& scene);
/// `line_number` is used in error messages only.
Scene scene_from_json_line(const std::string& line, std::size_t line_number);

void save_scenes(const std::filesystem::path& path, std::span<const Scene> scenes);
std::vector<Scene> load_scenes(const std::filesystem::path& path);

}  // namespace bevmine
