#include "selfplay/scenegraph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "selfplay/rng.hpp"

namespace selfplay {

void LaneGraph::validate() const {
  const int n = static_cast<int>(nodes.size());
  for (int i = 0; i < n; ++i) {
    const LaneNode& nd = nodes[static_cast<size_t>(i)];
    if (nd.id != i) throw std::invalid_argument("lane node id must equal its index");
    if (!(nd.width > 0.0)) throw std::invalid_argument("lane width must be positive");
    if (!(nd.heading > -kPi - 1e-12 && nd.heading <= kPi + 1e-12)) {
      throw std::invalid_argument("lane heading not normalized");
    }
    for (const int s : nd.successors) {
      if (s < 0 || s >= n) throw std::invalid_argument("dangling successor index");
    }
    if (nd.left_neighbor != -1 && (nd.left_neighbor < 0 || nd.left_neighbor >= n)) {
      throw std::invalid_argument("dangling left neighbor");
    }
    if (nd.right_neighbor != -1 && (nd.right_neighbor < 0 || nd.right_neighbor >= n)) {
      throw std::invalid_argument("dangling right neighbor");
    }
  }
  for (const Polygon& poly : drivable_polygons) {
    if (poly.size() < 3) throw std::invalid_argument("degenerate drivable polygon");
    if (polygon_signed_area(poly) <= 0.0) {
      throw std::invalid_argument("drivable polygon must be counter-clockwise");
    }
    if (!polygon_is_simple(poly)) {
      throw std::invalid_argument("drivable polygon self-intersects");
    }
  }
}

PairPose pairpose(const Pose& a, const Pose& b) {
  const double c = std::cos(a.heading);
  const double s = std::sin(a.heading);
  const double u = b.x - a.x;
  const double v = b.y - a.y;
  PairPose out;
  out.dx = c * u + s * v;
  out.dy = -s * u + c * v;
  const double dth = b.heading - a.heading;
  out.sin_dth = std::sin(dth);
  out.cos_dth = std::cos(dth);
  out.dist = std::hypot(out.dx, out.dy);
  return out;
}

namespace {

// Point on the reference arc at arc length s, offset d to the left.
Pose arc_pose(double s, double d, double curvature) {
  if (curvature == 0.0) return {s, d, 0.0};
  const double r = 1.0 / curvature;
  const double psi = curvature * s;
  return {(r - d) * std::sin(psi), r - (r - d) * std::cos(psi), wrap_angle(psi)};
}

}  // namespace

LaneGraph build_highway_map(const HighwayMapSpec& spec) {
  if (spec.lanes < 1) throw std::invalid_argument("build_highway_map: lanes must be >= 1");
  if (!(spec.length > 0.0)) throw std::invalid_argument("build_highway_map: length must be > 0");
  if (!(spec.node_spacing > 0.0)) {
    throw std::invalid_argument("build_highway_map: node_spacing must be > 0");
  }
  if (!(spec.lane_width > 0.0)) {
    throw std::invalid_argument("build_highway_map: lane_width must be > 0");
  }
  if (spec.curvature != 0.0 && std::abs(spec.curvature) * spec.length > kPi) {
    throw std::invalid_argument("build_highway_map: arc sweeps more than a half turn");
  }

  const int stations = static_cast<int>(std::floor(spec.length / spec.node_spacing + 1e-9)) + 1;
  LaneGraph g;

  for (int lane = 0; lane < spec.lanes; ++lane) {
    for (int k = 0; k < stations; ++k) {
      const double s = k * spec.node_spacing;
      const Pose p = arc_pose(s, lane * spec.lane_width, spec.curvature);
      LaneNode nd;
      nd.id = lane * stations + k;
      nd.position = {p.x, p.y};
      nd.heading = p.heading;
      nd.width = spec.lane_width;
      if (k + 1 < stations) nd.successors.push_back(nd.id + 1);
      if (lane + 1 < spec.lanes) nd.left_neighbor = (lane + 1) * stations + k;
      if (lane > 0) nd.right_neighbor = (lane - 1) * stations + k;
      g.nodes.push_back(std::move(nd));
    }
  }

  // Main carriageway polygon: right edge of lane 0 out, left edge of the top
  // lane back. Sampled at node stations, counter-clockwise.
  const double half = spec.lane_width / 2.0;
  Polygon main;
  for (int k = 0; k < stations; ++k) {
    const Pose p = arc_pose(k * spec.node_spacing, -half, spec.curvature);
    main.push_back({p.x, p.y});
  }
  for (int k = stations - 1; k >= 0; --k) {
    const Pose p =
        arc_pose(k * spec.node_spacing, (spec.lanes - 1) * spec.lane_width + half, spec.curvature);
    main.push_back({p.x, p.y});
  }
  if (polygon_signed_area(main) < 0.0) std::reverse(main.begin(), main.end());
  g.drivable_polygons.push_back(std::move(main));

  if (spec.merge) {
    MergeSpec m = *spec.merge;
    if (m.start < 0.0) {
      Rng rng(stream_seed(spec.seed, "map/merge"));
      m.start = rng.uniform(0.2 * spec.length, 0.5 * spec.length);
    }
    if (!(m.length > 0.0)) throw std::invalid_argument("build_highway_map: merge length <= 0");
    const int k0 = std::clamp(static_cast<int>(std::ceil(m.start / spec.node_spacing)), 0,
                              stations - 2);
    const int k1 = std::clamp(static_cast<int>(std::floor((m.start + m.length) /
                                                          spec.node_spacing)),
                              k0 + 1, stations - 2);
    const int base = static_cast<int>(g.nodes.size());
    const double ramp_d = -spec.lane_width;  // one lane to the right of lane 0
    for (int k = k0; k <= k1; ++k) {
      const Pose p = arc_pose(k * spec.node_spacing, ramp_d, spec.curvature);
      LaneNode nd;
      nd.id = base + (k - k0);
      nd.position = {p.x, p.y};
      nd.heading = p.heading;
      nd.width = spec.lane_width;
      nd.left_neighbor = k;  // lane 0 node at the same station
      if (k < k1) {
        nd.successors.push_back(nd.id + 1);
      } else {
        nd.successors.push_back(k + 1);  // join lane 0 at the next station
      }
      g.nodes.push_back(std::move(nd));
    }

    // Ramp pavement plus a closing taper back to the lane 0 right edge.
    Polygon ramp;
    for (int k = k0; k <= k1; ++k) {
      const Pose p = arc_pose(k * spec.node_spacing, ramp_d - half, spec.curvature);
      ramp.push_back({p.x, p.y});
    }
    {
      const Pose tip = arc_pose(std::min((k1 + 1) * spec.node_spacing, spec.length), -half,
                                spec.curvature);
      ramp.push_back({tip.x, tip.y});
    }
    for (int k = k1; k >= k0; --k) {
      const Pose p = arc_pose(k * spec.node_spacing, ramp_d + half, spec.curvature);
      ramp.push_back({p.x, p.y});
    }
    if (polygon_signed_area(ramp) < 0.0) std::reverse(ramp.begin(), ramp.end());
    g.drivable_polygons.push_back(std::move(ramp));
  }

  g.validate();
  return g;
}

Pose highway_arc_pose(const HighwayMapSpec& spec, double s, double lateral) {
  return arc_pose(s, lateral, spec.curvature);
}

std::vector<int> nearest_nodes(const LaneGraph& graph, const Vec2& point, int k) {
  if (graph.nodes.empty()) throw std::invalid_argument("nearest_nodes: empty graph");
  if (k < 1) throw std::invalid_argument("nearest_nodes: k must be >= 1");
  std::vector<std::pair<double, int>> by_dist;
  by_dist.reserve(graph.nodes.size());
  for (const LaneNode& nd : graph.nodes) {
    by_dist.emplace_back(norm(nd.position - point), nd.id);
  }
  std::sort(by_dist.begin(), by_dist.end());
  const size_t n = std::min(static_cast<size_t>(k), by_dist.size());
  std::vector<int> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) out.push_back(by_dist[i].second);
  return out;
}

bool point_in_drivable(const LaneGraph& graph, const Vec2& p) {
  for (const Polygon& poly : graph.drivable_polygons) {
    if (point_in_polygon(p, poly)) return true;
  }
  return false;
}

bool is_offroad(const LaneGraph& graph, const ActorState& state) {
  if (!(state.length > 0.0 && state.width > 0.0)) {
    throw std::invalid_argument("is_offroad: non-positive box dims");
  }
  const auto corners = obb_corners(actor_box(state));
  for (const Vec2& c : corners) {
    if (!point_in_drivable(graph, c)) return true;
  }
  return false;
}

double dist_to_drivable_boundary(const LaneGraph& graph, const Vec2& p) {
  double best = std::numeric_limits<double>::infinity();
  for (const Polygon& poly : graph.drivable_polygons) {
    const size_t n = poly.size();
    for (size_t i = 0; i < n; ++i) {
      best = std::min(best, point_segment_dist(p, poly[i], poly[(i + 1) % n]));
    }
  }
  return best;
}

}  // namespace selfplay
