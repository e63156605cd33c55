#pragma once

// Slow reference implementations used to check the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "bevmine/detector.hpp"
#include "bevmine/geometry.hpp"
#include "bevmine/mining.hpp"

namespace oracle {

using namespace bevmine;

inline bool inside(const BoxBEV& b, double x, double y) {
    const double c = std::cos(b.yaw);
    const double s = std::sin(b.yaw);
    const double dx = x - b.cx;
    const double dy = y - b.cy;
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return std::abs(u) <= 0.5 * b.length && std::abs(v) <= 0.5 * b.width;
}

/// Point-sampling IoU estimate over the joint bounding square.
inline double monte_carlo_iou(const BoxBEV& a, const BoxBEV& b, std::size_t samples, std::uint64_t seed) {
    const double ra = 0.5 * std::hypot(a.length, a.width);
    const double rb = 0.5 * std::hypot(b.length, b.width);
    const double x0 = std::min(a.cx - ra, b.cx - rb);
    const double x1 = std::max(a.cx + ra, b.cx + rb);
    const double y0 = std::min(a.cy - ra, b.cy - rb);
    const double y1 = std::max(a.cy + ra, b.cy + rb);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ux(x0, x1);
    std::uniform_real_distribution<double> uy(y0, y1);
    std::size_t both = 0;
    std::size_t either = 0;
    for (std::size_t i = 0; i < samples; ++i) {
        const double x = ux(rng);
        const double y = uy(rng);
        const bool in_a = inside(a, x, y);
        const bool in_b = inside(b, x, y);
        both += (in_a && in_b) ? 1 : 0;
        either += (in_a || in_b) ? 1 : 0;
    }
    return either == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(either);
}

/// Greedy NMS by sorting, then checking every candidate against all kept boxes.
inline std::vector<std::size_t> greedy_nms(const std::vector<ScoredBox>& c, double tau) {
    std::vector<std::size_t> order(c.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
        if (c[i].score != c[j].score) {
            return c[i].score > c[j].score;
        }
        return c[i].key < c[j].key;
    });
    std::vector<std::size_t> kept;
    for (std::size_t i : order) {
        bool ok = true;
        for (std::size_t k : kept) {
            if (rotated_iou(c[i].box, c[k].box) > tau) {
                ok = false;
            }
        }
        if (ok) {
            kept.push_back(i);
        }
    }
    return kept;
}

inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

struct Mined {
    std::size_t anchor;
    double score;
    BoxBEV box;
};

inline std::vector<Mined> threshold_and_nms(const Prediction& p, const AnchorGrid& g, double sigma, double tau) {
    std::vector<ScoredBox> c;
    for (std::size_t a = 0; a < g.num_anchors(); ++a) {
        const double s = sigmoid(p.cls[a]);
        if (s > sigma) {
            const RegDelta d{p.reg[a * 5], p.reg[a * 5 + 1], p.reg[a * 5 + 2], p.reg[a * 5 + 3], p.reg[a * 5 + 4]};
            c.push_back({decode_box(g.anchor_box(a), d), s, a});
        }
    }
    std::vector<Mined> out;
    for (std::size_t k : greedy_nms(c, tau)) {
        out.push_back({c[k].key, c[k].score, c[k].box});
    }
    return out;
}

inline std::vector<Mined> supplement(const Prediction& p, const AnchorGrid& g, double sigma, double tau,
                                     const std::vector<Mined>& main) {
    const std::size_t a_per_cell = g.anchors_per_cell();
    std::vector<Mined> out;
    for (const auto& m : threshold_and_nms(p, g, sigma, tau)) {
        bool clash = false;
        for (const auto& r : main) {
            clash = clash || (m.anchor / a_per_cell == r.anchor / a_per_cell);
        }
        if (!clash) {
            out.push_back(m);
        }
    }
    return out;
}

struct Split {
    double high;
    std::size_t split;
};

/// Tries every contiguous split of the sorted values and keeps the one with
/// the smallest within-cluster SSE (earliest on ties).
inline Split two_means(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    auto centroid = [&](std::size_t lo, std::size_t hi) {
        double shifted = 0.0;
        for (std::size_t i = lo; i < hi; ++i) {
            shifted += v[i] - v[lo];
        }
        return std::clamp(v[lo] + shifted / static_cast<double>(hi - lo), v[lo], v[hi - 1]);
    };
    auto sse = [&](std::size_t lo, std::size_t hi) {
        long double mean = 0.0L;
        for (std::size_t i = lo; i < hi; ++i) {
            mean += static_cast<long double>(v[i]) - v[0];
        }
        mean /= static_cast<long double>(hi - lo);
        long double total = 0.0L;
        for (std::size_t i = lo; i < hi; ++i) {
            const long double d = (static_cast<long double>(v[i]) - v[0]) - mean;
            total += d * d;
        }
        return total;
    };
    std::size_t best = 1;
    long double best_sse = sse(0, 1) + sse(1, n);
    for (std::size_t k = 2; k < n; ++k) {
        const long double s = sse(0, k) + sse(k, n);
        if (s < best_sse) {
            best_sse = s;
            best = k;
        }
    }
    return {centroid(best, n), best};
}

/// Point-by-point precision/recall enumeration with the usual upper envelope.
inline double average_precision(std::vector<std::pair<double, bool>> ranked, std::size_t n_gt) {
    if (n_gt == 0) {
        return 0.0;
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.first > b.first; });
    std::vector<double> prec;
    std::vector<double> rec;
    std::size_t tp = 0;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        tp += ranked[i].second ? 1 : 0;
        prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
        rec.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }
    double ap = 0.0;
    double prev = 0.0;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (!ranked[i].second) {
            continue;
        }
        double best = 0.0;
        for (std::size_t j = i; j < ranked.size(); ++j) {
            best = std::max(best, prec[j]);
        }
        ap += (rec[i] - prev) * best;
        prev = rec[i];
    }
    return ap;
}

/// Anchor with maximal footprint IoU over the whole grid, lowest index on ties.
inline std::size_t argmax_anchor(const BoxBEV& box, const AnchorGrid& g) {
    std::size_t best = 0;
    double best_iou = -1.0;
    for (std::size_t a = 0; a < g.num_anchors(); ++a) {
        const double iou = rotated_iou(g.anchor_box(a), box);
        if (iou > best_iou) {
            best_iou = iou;
            best = a;
        }
    }
    return best;
}

/// Every anchor footprint against every positive box.
inline std::vector<Neighbor> neighbors(const PositiveSet& pos, const AnchorGrid& g, double tau_nei) {
    std::vector<Neighbor> out;
    for (std::size_t a = 0; a < g.num_anchors(); ++a) {
        bool is_positive = false;
        for (const auto& p : pos) {
            is_positive = is_positive || p.anchor == a;
        }
        if (is_positive) {
            continue;
        }
        double best = 0.0;
        std::size_t parent = 0;
        for (std::size_t k = 0; k < pos.size(); ++k) {
            const double iou = rotated_iou(g.anchor_box(a), pos[k].box);
            if (iou > best) {
                best = iou;
                parent = k;
            }
        }
        if (best > tau_nei) {
            out.push_back({a, parent, best});
        }
    }
    return out;
}

/// Central differences of f at x along coordinate i.
inline double central_difference(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                                 std::size_t i, double h) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double up = f(x);
    x[i] = x0 - h;
    const double down = f(x);
    return (up - down) / (2.0 * h);
}

}  // namespace oracle
