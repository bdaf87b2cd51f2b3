#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "selfplay/simkit.hpp"

namespace selfplay {

struct ObjectiveConfig {
  double beta = 0.5;             // realism weight
  double w_challenge = 1.0;      // weight on collisions caused for the solver set
  double w_solvable = 1.0;       // weight on the proposer demonstrating a clean solution
  double lambda_dist = 0.05;     // pull each adversary toward its target
  double huber_delta = 1.0;      // meters
  double collision_buffer = 0.2; // extra circle separation b, meters

  void validate() const;
};

// Ordered-pair masks over n actors; mask[i][j] = 1 selects the pair (i, j).
std::vector<std::vector<uint8_t>> pairs_all(int n);                                  // i != j
std::vector<std::vector<uint8_t>> pairs_involving(int n, const std::vector<int>& set);
std::vector<std::vector<uint8_t>> pairs_from(int n, const std::vector<int>& set);    // i in set

// Each actor's footprint is covered by 5 circles of radius width/2, centers
// on the box long axis at fractions {-0.4,-0.2,0,0.2,0.4} of the length from
// the box center. Returned offsets are measured from the rear axle.
std::array<double, 5> circle_offsets(const ActorState& dims);

// Smallest center distance over the 25 circle pairs of two actors. Matches
// the recorded-op arithmetic exactly.
double min_circle_distance(const ActorState& a, const ActorState& b);

// Differentiable collision potential: mean over all T steps and n*n ordered
// pairs of mask * relu(r_i + r_j + buffer - min_circle_distance), with the
// 1/(n*T) normalizer fixed to the full actor count so shrinking the mask can
// only shrink the value. `dims` supplies per-actor length/width/wheelbase.
ad::Var collision_loss(ad::Tape& tape, const std::vector<JointState>& states,
                       const std::vector<ActorState>& dims,
                       const std::vector<std::vector<uint8_t>>& pair_mask, double buffer);

// Value-level twin of collision_loss (same arithmetic and summation order).
double collision_loss_value(const std::vector<std::vector<ActorState>>& states,
                            const std::vector<std::vector<uint8_t>>& pair_mask, double buffer);

// Strict oriented-box overlap at any step; boxes merely touching do not
// count. flags[i] = 1 iff actor i overlaps someone at some step.
std::vector<uint8_t> exact_collision(const std::vector<std::vector<ActorState>>& states);

// Huber tracking error against the log: mean over the given actors and all T
// steps of huber(x - x_log) + huber(y - y_log).
ad::Var realism_term(ad::Tape& tape, const std::vector<JointState>& states, const Scenario& scn,
                     const std::vector<int>& actors, double huber_delta);
double realism_value(const std::vector<std::vector<ActorState>>& states, const Scenario& scn,
                     const std::vector<int>& actors, double huber_delta);

// Mean Euclidean distance from each adversary to its target over all steps.
// Empty assignment yields constant zero.
ad::Var distance_term(ad::Tape& tape, const std::vector<JointState>& states,
                      const TargetAssignment& targets);

// Proposer objective over a rollout pair that starts from the same state:
//   - w_challenge * colloss(mixed, pairs involving the solver set)
//   + w_solvable  * colloss(demo, all pairs)
//   + beta * (realism(demo, all) + realism(mixed, all))
//   + lambda_dist * distance(mixed)
// Minimized. Component values are recorded for logging.
struct TeacherLoss {
  ad::Var total;
  double challenge = 0.0;
  double solvable = 0.0;
  double realism_demo = 0.0;
  double realism_mixed = 0.0;
  double distance = 0.0;
};
TeacherLoss teacher_loss(ad::Tape& tape, const ObjectiveConfig& cfg, const Scenario& scn,
                         const Partition& part, const RolloutRecording& demo,
                         const RolloutRecording& mixed);

// Solver objective on the mixed rollout:
//   colloss(mixed, pairs involving the solver set) + beta * realism(mixed, solver set)
struct StudentLoss {
  ad::Var total;
  double challenge = 0.0;
  double realism = 0.0;
};
StudentLoss student_loss(ad::Tape& tape, const ObjectiveConfig& cfg, const Scenario& scn,
                         const Partition& part, const RolloutRecording& mixed);

// Scalar summary of one training pair, feeding the equilibrium bound check.
struct TheoryTuple {
  double c_t_n = 0.0;   // demo collision potential, all pairs
  double c_ts_s = 0.0;  // mixed collision potential, solver pairs
  double i_t = 0.0;     // demo realism
  double i_ts = 0.0;    // mixed realism
  double beta = 1.0;
};

// Equilibrium bound: if the proposer return C_TS_S - C_T_N + beta*(I_T+I_TS)
// exceeded 2*beta*I_TS, the solver could do strictly better by copying the
// demonstrated solution (-C_T_N + beta*I_T > -C_TS_S + beta*I_TS). Returns
// whether that implication holds for this tuple; algebraically it always
// does, and the check evaluates both sides literally in double arithmetic.
bool lemma1_check(const TheoryTuple& t);

// Realism level below which a failure certifies the proposal was effectively
// unsolvable for an equilibrium solver.
inline double alpha_bound(double i_ts, double beta) { return i_ts + 1.0 / (2.0 * beta); }

}  // namespace selfplay
