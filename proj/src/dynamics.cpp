#include "selfplay/dynamics.hpp"

#include <cmath>
#include <stdexcept>

namespace selfplay {

ObbBox actor_box(const ActorState& s) {
  const double off = s.wheelbase / 2.0;
  return ObbBox{{s.x + off * std::cos(s.theta), s.y + off * std::sin(s.theta)},
                s.theta,
                s.length,
                s.width};
}

ActorState step(const ActorState& s, const Action& a, double dt, const ActionLimits& limits) {
  if (!(dt > 0.0)) throw std::invalid_argument("step: dt must be positive");
  if (!std::isfinite(s.x) || !std::isfinite(s.y) || !std::isfinite(s.theta) ||
      !std::isfinite(s.v) || !std::isfinite(a.u) || !std::isfinite(a.phi)) {
    throw std::invalid_argument("step: non-finite state or action");
  }
  const double u = std::clamp(a.u, -limits.u_max, limits.u_max);
  const double phi = std::clamp(a.phi, -limits.phi_max, limits.phi_max);
  const double c = std::cos(s.theta);
  const double sn = std::sin(s.theta);
  const double tn = std::tan(phi);
  ActorState n = s;
  n.x = s.x + (s.v * c) * dt;
  n.y = s.y + (s.v * sn) * dt;
  n.theta = wrap_angle(s.theta + ((s.v / s.wheelbase) * tn) * dt);
  n.v = s.v + u * dt;
  return n;
}

StepVars step_on_tape(ad::Tape& tape, StepVars s, ad::Var u, ad::Var phi, ad::Var wheelbase,
                      double dt, const ActionLimits& limits) {
  if (!(dt > 0.0)) throw std::invalid_argument("step_on_tape: dt must be positive");
  using namespace ad;
  const Var uc = clamp(u, -limits.u_max, limits.u_max);
  const Var pc = clamp(phi, -limits.phi_max, limits.phi_max);
  const Var c = vcos(s.theta);
  const Var sn = vsin(s.theta);
  const Var tn = vtan(pc);
  StepVars n;
  n.x = s.x + (s.v * c) * dt;
  n.y = s.y + (s.v * sn) * dt;
  n.theta = wrap_angle_op(s.theta + (divide(s.v, wheelbase) * tn) * dt);
  n.v = s.v + uc * dt;
  (void)tape;
  return n;
}

}  // namespace selfplay
