#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

namespace selfplay {

inline constexpr double kPi = 3.14159265358979323846;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }

// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  return a;
}

// Oriented box given by center, heading and full extents.
struct ObbBox {
  Vec2 center;
  double heading = 0.0;
  double length = 0.0;
  double width = 0.0;
};

inline std::array<Vec2, 4> obb_corners(const ObbBox& b) {
  const double c = std::cos(b.heading), s = std::sin(b.heading);
  const Vec2 u{c, s}, n{-s, c};
  const double hl = 0.5 * b.length, hw = 0.5 * b.width;
  return {Vec2{b.center + hl * u + hw * n}, Vec2{b.center + hl * u - hw * n},
          Vec2{b.center - hl * u - hw * n}, Vec2{b.center - hl * u + hw * n}};
}

// Signed separation between two oriented boxes along the 4 face normals.
// Negative: strict overlap with |margin| penetration depth along the least
// separating axis. Zero: exact touch. Positive: separated.
inline double obb_margin(const ObbBox& a, const ObbBox& b) {
  const auto axes_of = [](const ObbBox& q) {
    const double c = std::cos(q.heading), s = std::sin(q.heading);
    return std::array<Vec2, 2>{Vec2{c, s}, Vec2{-s, c}};
  };
  const auto ca = axes_of(a), cb = axes_of(b);
  const Vec2 d = b.center - a.center;
  double margin = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < 4; ++k) {
    const Vec2 axis = k < 2 ? ca[k] : cb[k - 2];
    const double ra = 0.5 * a.length * std::abs(dot(axis, ca[0])) +
                      0.5 * a.width * std::abs(dot(axis, ca[1]));
    const double rb = 0.5 * b.length * std::abs(dot(axis, cb[0])) +
                      0.5 * b.width * std::abs(dot(axis, cb[1]));
    margin = std::max(margin, std::abs(dot(axis, d)) - (ra + rb));
  }
  return margin;
}

// Strict overlap; boxes touching exactly are not flagged.
inline bool obb_overlap(const ObbBox& a, const ObbBox& b) {
  return obb_margin(a, b) < 0.0;
}

inline bool point_in_obb(Vec2 p, const ObbBox& b) {
  const double c = std::cos(b.heading), s = std::sin(b.heading);
  const Vec2 d = p - b.center;
  const double lx = c * d.x + s * d.y;
  const double ly = -s * d.x + c * d.y;
  return std::abs(lx) <= 0.5 * b.length && std::abs(ly) <= 0.5 * b.width;
}

using Polygon = std::vector<Vec2>;

// Even-odd rule; boundary points count as inside.
inline bool point_in_polygon(Vec2 p, const Polygon& poly) {
  const int n = static_cast<int>(poly.size());
  bool inside = false;
  for (int i = 0, j = n - 1; i < n; j = i++) {
    const Vec2 a = poly[j], b = poly[i];
    const double cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    if (cross == 0.0 && std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) &&
        std::min(a.y, b.y) <= p.y && p.y <= std::max(a.y, b.y)) {
      return true;
    }
    if ((b.y > p.y) != (a.y > p.y)) {
      const double t = (p.y - b.y) / (a.y - b.y);
      if (p.x < b.x + t * (a.x - b.x)) inside = !inside;
    }
  }
  return inside;
}

inline double point_segment_dist(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  if (len2 == 0.0) return norm(p - a);
  const double t = std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
  return norm(p - (a + t * ab));
}

inline double polygon_signed_area(const Polygon& poly) {
  double s = 0.0;
  const int n = static_cast<int>(poly.size());
  for (int i = 0, j = n - 1; i < n; j = i++) {
    s += poly[j].x * poly[i].y - poly[i].x * poly[j].y;
  }
  return 0.5 * s;
}

inline bool segments_intersect(Vec2 p1, Vec2 p2, Vec2 q1, Vec2 q2) {
  const auto orient = [](Vec2 a, Vec2 b, Vec2 c) {
    const double v = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0);
  };
  const int o1 = orient(p1, p2, q1), o2 = orient(p1, p2, q2);
  const int o3 = orient(q1, q2, p1), o4 = orient(q1, q2, p2);
  return o1 != o2 && o3 != o4;
}

// Simple polygon check: no two non-adjacent edges intersect properly.
inline bool polygon_is_simple(const Polygon& poly) {
  const int n = static_cast<int>(poly.size());
  if (n < 3) return false;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const int i2 = (i + 1) % n, j2 = (j + 1) % n;
      if (i == j || i2 == j || i == j2) continue;
      if (segments_intersect(poly[i], poly[i2], poly[j], poly[j2])) return false;
    }
  }
  return true;
}

}  // namespace selfplay
