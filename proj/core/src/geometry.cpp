#include "bevmine/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace bevmine {

namespace {

constexpr double kTwoPi = 2.0 * kPi;

double cross(Vec2 o, Vec2 a, Vec2 b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

Vec2 line_intersection(Vec2 s, Vec2 e, Vec2 c1, Vec2 c2) {
    const double dx1 = e.x - s.x;
    const double dy1 = e.y - s.y;
    const double dx2 = c2.x - c1.x;
    const double dy2 = c2.y - c1.y;
    const double denom = dx1 * dy2 - dy1 * dx2;
    if (std::abs(denom) < 1e-300) {
        return s;
    }
    const double t = ((c1.x - s.x) * dy2 - (c1.y - s.y) * dx2) / denom;
    return {s.x + t * dx1, s.y + t * dy1};
}

Vec2 rotate(Vec2 p, double angle) {
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    return {c * p.x - s * p.y, s * p.x + c * p.y};
}

}  // namespace

double normalize_angle(double radians) {
    double r = radians - kTwoPi * std::floor((radians + kPi) / kTwoPi);
    if (r >= kPi) {
        r -= kTwoPi;
    }
    if (r < -kPi) {
        r += kTwoPi;
    }
    return r;
}

bool BoxBEV::valid() const {
    return std::isfinite(cx) && std::isfinite(cy) && std::isfinite(yaw) && std::isfinite(length) &&
           std::isfinite(width) && length > 0.0 && width > 0.0;
}

std::array<Vec2, 4> BoxBEV::corners() const {
    const double c = std::cos(yaw);
    const double s = std::sin(yaw);
    const double hl = 0.5 * length;
    const double hw = 0.5 * width;
    const std::array<Vec2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
    std::array<Vec2, 4> out{};
    for (std::size_t i = 0; i < 4; ++i) {
        out[i] = {cx + c * local[i].x - s * local[i].y, cy + s * local[i].x + c * local[i].y};
    }
    return out;
}

bool BoxBEV::contains(Vec2 p) const {
    const Vec2 local = rotate({p.x - cx, p.y - cy}, -yaw);
    return std::abs(local.x) <= 0.5 * length && std::abs(local.y) <= 0.5 * width;
}

double BoxBEV::circumradius() const { return 0.5 * std::hypot(length, width); }

bool RegDelta::finite() const {
    return std::isfinite(dx) && std::isfinite(dy) && std::isfinite(dl) && std::isfinite(dw) &&
           std::isfinite(dyaw);
}

AnchorGrid::AnchorGrid(int height_cells, int width_cells, double cell_size, Vec2 origin,
                       std::vector<AnchorTemplate> templates)
    : height_(height_cells),
      width_(width_cells),
      cell_size_(cell_size),
      origin_(origin),
      templates_(std::move(templates)) {
    if (height_ <= 0 || width_ <= 0) {
        throw std::invalid_argument("AnchorGrid: grid dimensions must be positive");
    }
    if (!(cell_size_ > 0.0) || !std::isfinite(cell_size_)) {
        throw std::invalid_argument("AnchorGrid: cell_size must be positive");
    }
    if (templates_.empty()) {
        throw std::invalid_argument("AnchorGrid: at least one anchor template required");
    }
    for (const auto& t : templates_) {
        if (!(t.length > 0.0) || !(t.width > 0.0)) {
            throw std::invalid_argument("AnchorGrid: templates need positive length and width");
        }
    }
}

std::size_t AnchorGrid::cell_of(std::size_t flat) const {
    if (flat >= num_anchors()) {
        throw std::out_of_range("anchor index " + std::to_string(flat) + " outside grid of " +
                                std::to_string(num_anchors()) + " anchors");
    }
    return anchor_index_to_grid(flat, anchors_per_cell());
}

CellCoord AnchorGrid::cell_coord(std::size_t cell) const {
    return {static_cast<int>(cell / width_), static_cast<int>(cell % width_)};
}

Vec2 AnchorGrid::cell_center(CellCoord c) const {
    return {origin_.x + (c.col + 0.5) * cell_size_, origin_.y + (c.row + 0.5) * cell_size_};
}

BoxBEV AnchorGrid::anchor_box(std::size_t flat) const {
    const std::size_t cell = cell_of(flat);
    const AnchorTemplate& t = templates_[flat % anchors_per_cell()];
    const Vec2 center = cell_center(cell_coord(cell));
    return {center.x, center.y, t.length, t.width, t.yaw};
}

std::optional<CellCoord> AnchorGrid::locate(Vec2 p) const {
    const double fx = (p.x - origin_.x) / cell_size_;
    const double fy = (p.y - origin_.y) / cell_size_;
    if (!(fx >= 0.0) || !(fy >= 0.0) || fx >= width_ || fy >= height_) {
        return std::nullopt;
    }
    return CellCoord{static_cast<int>(fy), static_cast<int>(fx)};
}

std::size_t anchor_index_to_grid(std::size_t flat_index, std::size_t anchors_per_cell) {
    if (anchors_per_cell == 0) {
        throw std::invalid_argument("anchors_per_cell must be positive");
    }
    return flat_index / anchors_per_cell;
}

double polygon_area(std::span<const Vec2> polygon) {
    if (polygon.size() < 3) {
        return 0.0;
    }
    double twice = 0.0;
    for (std::size_t i = 0; i < polygon.size(); ++i) {
        const Vec2& a = polygon[i];
        const Vec2& b = polygon[(i + 1) % polygon.size()];
        twice += a.x * b.y - a.y * b.x;
    }
    return 0.5 * twice;
}

std::vector<Vec2> clip_convex(std::span<const Vec2> subject, std::span<const Vec2> clip) {
    std::vector<Vec2> output(subject.begin(), subject.end());
    std::vector<Vec2> input;
    for (std::size_t i = 0; i < clip.size() && !output.empty(); ++i) {
        const Vec2 c1 = clip[i];
        const Vec2 c2 = clip[(i + 1) % clip.size()];
        input.swap(output);
        output.clear();
        for (std::size_t j = 0; j < input.size(); ++j) {
            const Vec2 s = input[(j + input.size() - 1) % input.size()];
            const Vec2 e = input[j];
            const bool e_in = cross(c1, c2, e) >= 0.0;
            const bool s_in = cross(c1, c2, s) >= 0.0;
            if (e_in) {
                if (!s_in) {
                    output.push_back(line_intersection(s, e, c1, c2));
                }
                output.push_back(e);
            } else if (s_in) {
                output.push_back(line_intersection(s, e, c1, c2));
            }
        }
    }
    return output;
}

double rotated_iou(const BoxBEV& a, const BoxBEV& b) {
    const double reach = a.circumradius() + b.circumradius();
    const double dx = a.cx - b.cx;
    const double dy = a.cy - b.cy;
    if (dx * dx + dy * dy >= reach * reach) {
        return 0.0;
    }
    const auto ca = a.corners();
    const auto cb = b.corners();
    const auto poly = clip_convex(ca, cb);
    const double inter = polygon_area(poly);
    const double min_area = std::min(a.area(), b.area());
    if (!(inter > 1e-12 * min_area)) {
        return 0.0;
    }
    const double uni = a.area() + b.area() - inter;
    return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<std::size_t> nms(std::span<const ScoredBox> candidates, double overlap_threshold) {
    if (!(overlap_threshold > 0.0 && overlap_threshold < 1.0)) {
        throw std::invalid_argument("nms: overlap threshold must lie in (0, 1)");
    }
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (const auto& c : candidates) {
        if (!std::isfinite(c.score)) {
            throw std::invalid_argument("nms: non-finite score");
        }
    }
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
        if (candidates[i].score != candidates[j].score) {
            return candidates[i].score > candidates[j].score;
        }
        if (candidates[i].key != candidates[j].key) {
            return candidates[i].key < candidates[j].key;
        }
        return i < j;
    });

    std::vector<char> suppressed(order.size(), 0);
    std::vector<std::size_t> kept;
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        if (suppressed[oi]) {
            continue;
        }
        const BoxBEV& keep_box = candidates[order[oi]].box;
        kept.push_back(order[oi]);
        for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
            if (!suppressed[oj] && rotated_iou(keep_box, candidates[order[oj]].box) > overlap_threshold) {
                suppressed[oj] = 1;
            }
        }
    }
    return kept;
}

RegDelta encode_box(const BoxBEV& anchor, const BoxBEV& target) {
    const double diag = std::hypot(anchor.length, anchor.width);
    return {(target.cx - anchor.cx) / diag,
            (target.cy - anchor.cy) / diag,
            std::log(target.length / anchor.length),
            std::log(target.width / anchor.width),
            normalize_angle(target.yaw - anchor.yaw)};
}

BoxBEV decode_box(const BoxBEV& anchor, const RegDelta& delta) {
    const double diag = std::hypot(anchor.length, anchor.width);
    return {anchor.cx + delta.dx * diag,
            anchor.cy + delta.dy * diag,
            anchor.length * std::exp(delta.dl),
            anchor.width * std::exp(delta.dw),
            normalize_angle(anchor.yaw + delta.dyaw)};
}

BoxBEV fold_yaw(const BoxBEV& box, double reference_yaw) {
    BoxBEV out = box;
    const double diff = normalize_angle(box.yaw - reference_yaw);
    if (diff >= 0.5 * kPi) {
        out.yaw = normalize_angle(box.yaw - kPi);
    } else if (diff < -0.5 * kPi) {
        out.yaw = normalize_angle(box.yaw + kPi);
    }
    return out;
}

Vec2 se2_transform(Vec2 point, const Pose2D& from_pose, const Pose2D& to_pose) {
    const Vec2 world = rotate(point, from_pose.heading);
    const Vec2 rel{world.x + from_pose.x - to_pose.x, world.y + from_pose.y - to_pose.y};
    return rotate(rel, -to_pose.heading);
}

BoxBEV se2_transform(const BoxBEV& box, const Pose2D& from_pose, const Pose2D& to_pose) {
    const Vec2 c = se2_transform(Vec2{box.cx, box.cy}, from_pose, to_pose);
    return {c.x, c.y, box.length, box.width, normalize_angle(box.yaw + from_pose.heading - to_pose.heading)};
}

std::vector<Vec2> se2_transform(std::span<const Vec2> points, const Pose2D& from_pose, const Pose2D& to_pose) {
    std::vector<Vec2> out;
    out.reserve(points.size());
    for (const Vec2& p : points) {
        out.push_back(se2_transform(p, from_pose, to_pose));
    }
    return out;
}

}  // namespace bevmine
