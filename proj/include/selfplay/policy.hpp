#pragma once

#include <string>
#include <utility>
#include <vector>

#include "selfplay/dynamics.hpp"
#include "selfplay/params.hpp"
#include "selfplay/scenegraph.hpp"
#include "selfplay/tape.hpp"

namespace selfplay {

enum class Role { kStudent, kTeacherAdversary, kTeacherDemonstrator };

const char* role_name(Role r);
Role role_from_name(const std::string& name);

struct PolicyConfig {
  int hidden_dim = 32;  // D, divisible by num_heads
  int num_blocks = 2;   // M
  int num_heads = 2;
  int history_len = 3;  // H
  int knn_k = 8;        // map-attention neighbors
  int ff_dim = 64;
  int head_hidden = 32;
  int target_embed_dim = 8;
  Role role = Role::kStudent;

  void validate() const;
};

// Everything except the role. The demonstrator must equal the student here.
bool architecture_equal(const PolicyConfig& a, const PolicyConfig& b);

// Creates (and initializes) every parameter tensor for one policy under
// `prefix`. Weights are truncated normal (std 0.02) from per-name substreams
// of `seed`, biases and layer-norm offsets zero, layer-norm gains one. The
// final action-head layer is zeroed when zero_action_head (initial policy
// coasts); pass false to probe gradient flow.
void make_policy_params(const PolicyConfig& cfg, const std::string& prefix, uint64_t seed,
                        ParamStore& store, bool zero_action_head = true);

// Per-tape, parameter-independent map geometry: each node's neighborhood
// (self, successors, predecessors, left, right) flattened into ragged rows,
// with relation one-hots and input-scaled relative poses.
struct MapContext {
  const LaneGraph* graph = nullptr;
  std::vector<std::pair<int, int>> nbr_ranges;  // per node, into pair rows
  std::vector<int> nbr_idx;                     // neighbor node id per pair row
  ad::Var rel_feats;                            // [P, 10] one-hot(5) ⊕ scaled pairpose(5)
  ad::Var width_feat;                           // [K, 1] widths / 5
  std::vector<Pose> node_poses;
};
MapContext build_map_context(ad::Tape& tape, const LaneGraph& graph);

// Joint scene state at one rollout step, as tape handles of shape [N].
struct JointState {
  ad::Var x, y, theta, v;
};

// Per-step, parameter-independent features shared by every policy evaluated
// at this step: state-encoder inputs, per-history-step actor pair poses, and
// actor-to-map pair poses over each actor's knn nodes.
struct StepGeometry {
  int n_actors = 0;
  int history_len = 0;
  int knn = 0;                     // effective neighbors = min(knn_k, K)
  ad::Var hist_feat;               // [N*H, 8] actor-major, oldest first
  std::vector<ad::Var> a2a_rows;   // per t': [N*N, 5] scaled pairpose
  ad::Var a2m_rows;                // [N*knn, 5] scaled pairpose actor->node
  std::vector<int> a2m_node_idx;   // flat node ids per (actor, neighbor)
  JointState current;              // history.back(), for target conditioning
};
StepGeometry build_step_geometry(ad::Tape& tape, const std::vector<JointState>& history,
                                 ad::Var length, ad::Var width, const MapContext& map_ctx,
                                 int knn_k);

// Map features [K, D] for one policy's parameters. Depends on parameters, so
// compute once per (tape, policy) and reuse across steps.
ad::Var encode_map(ad::Tape& tape, const PolicyConfig& cfg, const MountedParams& params,
                   const std::string& prefix, const MapContext& map_ctx);

// (adversary index in the joint scene, its target actor index)
using TargetAssignment = std::vector<std::pair<int, int>>;

struct PolicyOutput {
  ad::Var features;  // [N, D] current-time actor features
  ad::Var actions;   // [N, 2] (u, phi), tanh-squashed into limits
};

// Full forward pass over the joint scene: state encoder, M factorized
// attention blocks, target conditioning (teacher-adversary role only), and
// the action head. Every actor gets an action row; the caller picks the rows
// this policy actually controls.
PolicyOutput policy_forward(ad::Tape& tape, const PolicyConfig& cfg, const MountedParams& params,
                            const std::string& prefix, ad::Var map_feats,
                            const StepGeometry& geom, const TargetAssignment& targets,
                            const ActionLimits& limits);

}  // namespace selfplay
