#pragma once

#include "selfplay/geom.hpp"
#include "selfplay/tape.hpp"

namespace selfplay {

enum class ActorClass { kVehicle };

// Bicycle-model state. (x, y) is the rear-axle center; the bounding box
// center sits wheelbase/2 ahead of it along the heading.
struct ActorState {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;  // (-pi, pi]
  double v = 0.0;
  double length = 4.5;
  double width = 2.0;
  double wheelbase = 2.8;
  ActorClass actor_class = ActorClass::kVehicle;
};

struct Action {
  double u = 0.0;    // acceleration, m/s^2
  double phi = 0.0;  // steering angle, rad
};

struct ActionLimits {
  double u_max = 6.0;
  double phi_max = 0.5;
};

constexpr double dt_default() { return 0.5; }

ObbBox actor_box(const ActorState& s);

// One explicit-Euler step: position and heading advance with the current
// speed, then speed integrates acceleration. Actions are clamped to the
// limits before use. Arithmetic order matches the batched tape step exactly,
// so scalar and recorded rollouts agree bitwise.
ActorState step(const ActorState& s, const Action& a, double dt,
                const ActionLimits& limits = {});

// Batched differentiable step over [N] state vectors on one tape. wheelbase
// holds per-actor values; returns the next (x, y, theta, v) handles.
struct StepVars {
  ad::Var x, y, theta, v;
};
StepVars step_on_tape(ad::Tape& tape, StepVars s, ad::Var u, ad::Var phi, ad::Var wheelbase,
                      double dt, const ActionLimits& limits = {});

}  // namespace selfplay
