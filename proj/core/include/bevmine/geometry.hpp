#pragma once

#include <array>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

namespace bevmine {

inline constexpr double kPi = std::numbers::pi;

/// Wraps an angle into [-pi, pi).
double normalize_angle(double radians);

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Vec2&, const Vec2&) = default;
};

/// Oriented rectangle in the bird's-eye-view plane. `length` runs along the
/// heading direction, `width` across it.
struct BoxBEV {
    double cx = 0.0;
    double cy = 0.0;
    double length = 1.0;
    double width = 1.0;
    double yaw = 0.0;

    bool valid() const;
    double area() const { return length * width; }
    /// Counter-clockwise corners.
    std::array<Vec2, 4> corners() const;
    bool contains(Vec2 p) const;
    double circumradius() const;

    friend bool operator==(const BoxBEV&, const BoxBEV&) = default;
};

struct Pose2D {
    double x = 0.0;
    double y = 0.0;
    double heading = 0.0;

    friend bool operator==(const Pose2D&, const Pose2D&) = default;
};

/// Anchor-relative regression residuals. Center offsets are normalized by the
/// anchor diagonal, sizes are log ratios and yaw is an additive residual.
struct RegDelta {
    double dx = 0.0;
    double dy = 0.0;
    double dl = 0.0;
    double dw = 0.0;
    double dyaw = 0.0;

    bool finite() const;
    std::array<double, 5> as_array() const { return {dx, dy, dl, dw, dyaw}; }
    static RegDelta from_array(const std::array<double, 5>& v) { return {v[0], v[1], v[2], v[3], v[4]}; }

    friend bool operator==(const RegDelta&, const RegDelta&) = default;
};

struct AnchorTemplate {
    double length = 1.0;
    double width = 1.0;
    double yaw = 0.0;

    friend bool operator==(const AnchorTemplate&, const AnchorTemplate&) = default;
};

struct CellCoord {
    int row = 0;
    int col = 0;

    friend bool operator==(const CellCoord&, const CellCoord&) = default;
};

/// H x W x A anchor lattice. Cells are row-major with rows along +y and
/// columns along +x; `origin` is the lower-left corner of cell (0, 0).
/// Anchor flat index i lives in cell i / A and uses template i % A.
class AnchorGrid {
public:
    AnchorGrid(int height_cells, int width_cells, double cell_size, Vec2 origin,
               std::vector<AnchorTemplate> templates);

    int height_cells() const { return height_; }
    int width_cells() const { return width_; }
    std::size_t anchors_per_cell() const { return templates_.size(); }
    double cell_size() const { return cell_size_; }
    Vec2 origin() const { return origin_; }
    const std::vector<AnchorTemplate>& templates() const { return templates_; }

    std::size_t num_cells() const { return static_cast<std::size_t>(height_) * width_; }
    std::size_t num_anchors() const { return num_cells() * anchors_per_cell(); }

    /// Grid cell holding anchor `flat`; throws std::out_of_range past the end.
    std::size_t cell_of(std::size_t flat) const;
    CellCoord cell_coord(std::size_t cell) const;
    std::size_t cell_index(CellCoord c) const { return static_cast<std::size_t>(c.row) * width_ + c.col; }
    std::size_t anchor_index(CellCoord c, std::size_t slot) const {
        return cell_index(c) * anchors_per_cell() + slot;
    }
    Vec2 cell_center(CellCoord c) const;
    /// Footprint of anchor `flat`: its template placed at its cell center.
    BoxBEV anchor_box(std::size_t flat) const;
    /// Cell containing `p`, or nullopt outside the grid extent.
    std::optional<CellCoord> locate(Vec2 p) const;
    bool contains(Vec2 p) const { return locate(p).has_value(); }

    friend bool operator==(const AnchorGrid&, const AnchorGrid&) = default;

private:
    int height_;
    int width_;
    double cell_size_;
    Vec2 origin_;
    std::vector<AnchorTemplate> templates_;
};

/// floor(flat_index / anchors_per_cell). Throws std::invalid_argument when
/// anchors_per_cell is zero.
std::size_t anchor_index_to_grid(std::size_t flat_index, std::size_t anchors_per_cell);

/// Shoelace area of a simple polygon (positive for CCW).
double polygon_area(std::span<const Vec2> polygon);

/// Intersection polygon of two convex CCW polygons (Sutherland-Hodgman).
std::vector<Vec2> clip_convex(std::span<const Vec2> subject, std::span<const Vec2> clip);

/// Exact rotated intersection-over-union of two boxes.
double rotated_iou(const BoxBEV& a, const BoxBEV& b);

struct ScoredBox {
    BoxBEV box;
    double score = 0.0;
    /// Tie-break key for equal scores; lower wins. Mining passes anchor flat indices.
    std::size_t key = 0;
};

/// Greedy non-maximum suppression. Returns indices into `candidates` of the
/// kept boxes in descending score order (ties by ascending key). A candidate
/// is suppressed when its IoU with an already kept box exceeds the threshold.
std::vector<std::size_t> nms(std::span<const ScoredBox> candidates, double overlap_threshold);

RegDelta encode_box(const BoxBEV& anchor, const BoxBEV& target);
BoxBEV decode_box(const BoxBEV& anchor, const RegDelta& delta);

/// Returns the same rectangle with yaw rotated by a multiple of pi so that it
/// lies within pi/2 of `reference_yaw`.
BoxBEV fold_yaw(const BoxBEV& box, double reference_yaw);

/// Re-expresses geometry given in `from_pose`'s frame in `to_pose`'s frame.
Vec2 se2_transform(Vec2 point, const Pose2D& from_pose, const Pose2D& to_pose);
BoxBEV se2_transform(const BoxBEV& box, const Pose2D& from_pose, const Pose2D& to_pose);
std::vector<Vec2> se2_transform(std::span<const Vec2> points, const Pose2D& from_pose, const Pose2D& to_pose);

}  // namespace bevmine
