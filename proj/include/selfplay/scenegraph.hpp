#pragma once

#include <optional>
#include <string>
#include <vector>

#include "selfplay/dynamics.hpp"
#include "selfplay/geom.hpp"

namespace selfplay {

struct LaneNode {
  int id = 0;
  Vec2 position;
  double heading = 0.0;  // (-pi, pi]
  double width = 3.7;
  std::vector<int> successors;
  int left_neighbor = -1;   // -1 = none
  int right_neighbor = -1;  // -1 = none
};

struct LaneGraph {
  std::vector<LaneNode> nodes;
  std::vector<Polygon> drivable_polygons;

  // Throws std::invalid_argument on dangling indices, non-positive widths,
  // non-normalized headings, or degenerate/self-intersecting polygons.
  void validate() const;
};

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
};

// Relative pose of b expressed in a's frame.
struct PairPose {
  double dx = 0.0;
  double dy = 0.0;
  double sin_dth = 0.0;
  double cos_dth = 1.0;
  double dist = 0.0;
};

PairPose pairpose(const Pose& a, const Pose& b);

struct MergeSpec {
  double start = -1.0;  // arc length where the on-ramp begins; < 0 = pick from seed
  double length = 60.0;
};

struct HighwayMapSpec {
  int lanes = 3;
  double length = 200.0;
  double curvature = 0.0;  // 1/m; 0 = straight
  double node_spacing = 10.0;
  double lane_width = 3.7;
  std::optional<MergeSpec> merge;
  uint64_t seed = 0;
};

// Multilane highway lane graph: lane 0 is the reference arc, lanes stack to
// its left. An optional on-ramp runs right of lane 0 and joins it. Node ids
// are lane-major, consecutive along each lane.
LaneGraph build_highway_map(const HighwayMapSpec& spec);

// Pose at arc length s along the reference line, offset `lateral` to its
// left. Lane i's centerline is lateral = i * lane_width.
Pose highway_arc_pose(const HighwayMapSpec& spec, double s, double lateral);

// Indices of the min(k, K) nodes closest to `point`, ascending distance,
// ties broken by ascending id.
std::vector<int> nearest_nodes(const LaneGraph& graph, const Vec2& point, int k);

bool point_in_drivable(const LaneGraph& graph, const Vec2& p);

// True iff any bounding-box corner is outside the drivable-area union.
bool is_offroad(const LaneGraph& graph, const ActorState& state);

// Distance from a point to the nearest drivable-polygon boundary edge.
double dist_to_drivable_boundary(const LaneGraph& graph, const Vec2& p);

}  // namespace selfplay
