#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "selfplay/dynamics.hpp"
#include "selfplay/params.hpp"
#include "selfplay/policy.hpp"
#include "selfplay/rng.hpp"
#include "selfplay/scenegraph.hpp"
#include "selfplay/tape.hpp"

namespace selfplay {

// Fixed per-actor action sequence baked into a scenario file. Used for safety
// maneuvers (hard brake, cut-in, stopped vehicle) and frozen attack sets;
// never used as a training signal.
struct ActorScript {
  std::string kind;              // informational label, e.g. "hard_brake"
  std::vector<Action> actions;   // length horizon - 1
};

struct Scenario {
  std::string id;
  LaneGraph map;
  int horizon = 12;              // T: states per rollout, so T - 1 transitions
  double dt = dt_default();
  // history[t][i], oldest first; history.back() is the rollout start state.
  std::vector<std::vector<ActorState>> history;
  // logged_future[t][i]; logged_future[0] equals history.back().
  std::vector<std::vector<ActorState>> logged_future;
  // logged_actions[t][i] maps logged_future[t] to logged_future[t+1] exactly
  // through step(); replaying them reproduces the log bit for bit.
  std::vector<std::vector<Action>> logged_actions;
  std::map<int, ActorScript> scripts;  // actor id -> scripted maneuver

  int num_actors() const { return history.empty() ? 0 : static_cast<int>(history[0].size()); }
  int history_len() const { return static_cast<int>(history.size()); }
  void validate() const;
};

// One interaction split: disjoint proposer and solver sets covering all
// actors, plus a target assignment from each proposer actor into the solver
// set.
struct Partition {
  std::vector<int> teacher_set;  // sorted ascending
  std::vector<int> student_set;  // sorted ascending, complement of teacher_set
  std::map<int, int> targets;    // teacher actor -> target actor in student_set

  bool is_teacher(int actor) const;
  void validate(int n_actors) const;
  TargetAssignment target_assignment() const;
};

// Independent coin per actor (probability teacher_frac of joining the teacher
// set); degenerate draws that leave either side empty are resampled. Each
// teacher actor gets a target drawn uniformly from the student set. Requires
// n_actors >= 2.
Partition sample_partition(int n_actors, Rng& rng, double teacher_frac = 0.3);

struct Rollout {
  std::vector<std::vector<ActorState>> states;  // [T][N]; states[0] = start
  std::vector<std::vector<Action>> actions;     // [T-1][N] as executed
  std::vector<uint8_t> controlled;              // [N] actively driven this rollout
  std::vector<uint8_t> collided;                // [N] strict box overlap at any step
  std::vector<uint8_t> offroad;                 // [N] any box corner off drivable
};

// How one actor is driven during a rollout.
enum class BindingKind {
  kPolicy,       // row of a joint policy forward pass
  kScripted,     // ScriptedController queried step by step
  kReplay,       // fixed action sequence entered as tape constants
  kFreeActions,  // caller-created tape leaves, one scalar pair per step
  kStateReplay,  // next state injected verbatim from logged_future
};

// Open-loop or feedback controller driving a single actor outside the policy.
// Sees value-level states only; no gradient flows through its decisions.
class ScriptedController {
 public:
  virtual ~ScriptedController() = default;
  virtual Action act(const Scenario& scn,
                     const std::vector<std::vector<ActorState>>& states_so_far, int actor,
                     int t) const = 0;
};

// Pure-pursuit lane following plus proportional speed control. Steers toward
// a point on the nearest lane's forward chain one lookahead distance ahead.
class LaneFollowController : public ScriptedController {
 public:
  explicit LaneFollowController(std::vector<double> target_speeds = {}, double accel_gain = 1.0,
                                double lookahead_time = 1.0, double min_lookahead = 6.0);
  Action act(const Scenario& scn, const std::vector<std::vector<ActorState>>& states_so_far,
             int actor, int t) const override;

 private:
  std::vector<double> target_speeds_;  // per actor; empty = hold initial speed
  double accel_gain_;
  double lookahead_time_;
  double min_lookahead_;
};

// Replays a scenario's baked script for one actor.
class ScriptController : public ScriptedController {
 public:
  Action act(const Scenario& scn, const std::vector<std::vector<ActorState>>& states_so_far,
             int actor, int t) const override;
};

// One policy mounted on the rollout tape. Params are mounted by the caller so
// several rollouts on the same tape share one set of leaves, and map features
// are encoded once per tape.
struct PolicySlot {
  const PolicyConfig* cfg = nullptr;
  const MountedParams* params = nullptr;
  std::string prefix;
  ad::Var map_feats;          // encode_map output on this tape
  TargetAssignment targets;   // adversary conditioning; empty = none
};

struct ActorBinding {
  BindingKind kind = BindingKind::kStateReplay;
  int policy_slot = -1;                          // kPolicy
  const ScriptedController* scripted = nullptr;  // kScripted
  std::vector<Action> replay;                    // kReplay, length T-1
  std::vector<ad::Var> free_u;                   // kFreeActions, length T-1, shape [1]
  std::vector<ad::Var> free_phi;                 // kFreeActions, length T-1, shape [1]
};

struct RolloutSpec {
  std::vector<PolicySlot> slots;
  std::vector<ActorBinding> bindings;  // one per actor
  ActionLimits limits;
};

// A rollout recorded on a tape: value-level trajectory plus the tape handles
// losses are built from.
struct RolloutRecording {
  Rollout rollout;
  std::vector<JointState> states;  // [T] tape handles, states[0] = constants
  std::vector<ad::Var> u;          // [T-1] composed [N] action vectors
  std::vector<ad::Var> phi;        // [T-1]
};

// Simulates scenario.horizon states on the tape. The op sequence depends only
// on the scenario, binding kinds, and slot order, never on whether params are
// mounted trainable, so re-running with different mount choices reproduces
// values bit for bit.
RolloutRecording run_rollout(ad::Tape& tape, const Scenario& scn, const MapContext& map_ctx,
                             const RolloutSpec& spec);

// Re-mounts an already-computed rollout on a tape as constants (no gradient
// paths). Lets a loss read another tape's rollout values.
RolloutRecording mount_rollout_constants(ad::Tape& tape, const Rollout& rollout);

// Convenience value-level simulation: mounts each policy's params as
// constants on a scratch tape and runs one rollout.
struct SimPolicy {
  PolicyConfig cfg;
  const ParamStore* params = nullptr;
  std::string prefix;
  TargetAssignment targets;
};

Rollout simulate(const Scenario& scn, const std::vector<SimPolicy>& policies,
                 const std::vector<ActorBinding>& bindings, const ActionLimits& limits = {});

// All actors bound to one policy (no targets): the solver-controls-everything
// evaluation mode.
Rollout simulate_single_policy(const Scenario& scn, const SimPolicy& policy,
                               const ActionLimits& limits = {});

// All actors replayed from the log; reproduces logged_future bitwise.
Rollout simulate_log_replay(const Scenario& scn);

// Recovers per-step actions that drive logged_future through step(). Used as
// a fallback for logs without stored actions; speed recovery is exact, but
// heading inversion through tan/atan can be off by an ulp.
std::vector<std::vector<Action>> derive_actions(const Scenario& scn,
                                                const ActionLimits& limits = {});

// Scenario and corpus serialization. Doubles survive the round trip exactly.
std::string scenario_to_json(const Scenario& scn);
Scenario scenario_from_json(const std::string& text);
void save_corpus(const std::string& dir, const std::vector<Scenario>& corpus, uint64_t seed);
std::vector<Scenario> load_corpus(const std::string& dir);

// Synthetic highway corpus generation.
struct CorpusSpec {
  int scenarios = 200;
  int actors_min = 4;
  int actors_max = 8;
  int horizon = 12;
  int history_len = 3;
  double dt = dt_default();
  std::string map_preset = "mixed";  // straight | curved | merge | mixed
  double lane_width = 3.7;
  uint64_t seed = 0;
};

Scenario gen_scenario(const CorpusSpec& spec, int index);
std::vector<Scenario> gen_corpus(const CorpusSpec& spec);

}  // namespace selfplay
