#include "selfplay/simkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "selfplay/log.hpp"

namespace selfplay {

namespace {

bool state_finite(const ActorState& s) {
  return std::isfinite(s.x) && std::isfinite(s.y) && std::isfinite(s.theta) &&
         std::isfinite(s.v) && std::isfinite(s.length) && std::isfinite(s.width) &&
         std::isfinite(s.wheelbase);
}

bool same_state(const ActorState& a, const ActorState& b) {
  return a.x == b.x && a.y == b.y && a.theta == b.theta && a.v == b.v && a.length == b.length &&
         a.width == b.width && a.wheelbase == b.wheelbase;
}

}  // namespace

void Scenario::validate() const {
  if (horizon < 2) throw std::invalid_argument("scenario: horizon must be >= 2");
  if (!(dt > 0.0) || !std::isfinite(dt)) throw std::invalid_argument("scenario: bad dt");
  if (history.empty()) throw std::invalid_argument("scenario: empty history");
  const size_t n = history[0].size();
  if (n == 0) throw std::invalid_argument("scenario: no actors");
  for (const auto& row : history) {
    if (row.size() != n) throw std::invalid_argument("scenario: ragged history");
  }
  if (logged_future.size() != static_cast<size_t>(horizon)) {
    throw std::invalid_argument("scenario: logged_future must hold horizon steps");
  }
  for (const auto& row : logged_future) {
    if (row.size() != n) throw std::invalid_argument("scenario: ragged logged_future");
  }
  if (logged_actions.size() != static_cast<size_t>(horizon - 1)) {
    throw std::invalid_argument("scenario: logged_actions must hold horizon-1 steps");
  }
  for (const auto& row : logged_actions) {
    if (row.size() != n) throw std::invalid_argument("scenario: ragged logged_actions");
    for (const Action& a : row) {
      if (!std::isfinite(a.u) || !std::isfinite(a.phi)) {
        throw std::invalid_argument("scenario: non-finite logged action");
      }
    }
  }
  for (size_t i = 0; i < n; ++i) {
    if (!same_state(history.back()[i], logged_future[0][i])) {
      throw std::invalid_argument("scenario: logged_future[0] must equal history.back()");
    }
  }
  for (const auto& row : history) {
    for (const ActorState& s : row) {
      if (!state_finite(s)) throw std::invalid_argument("scenario: non-finite state");
      if (!(s.length > 0.0) || !(s.width > 0.0) || !(s.wheelbase > 0.0)) {
        throw std::invalid_argument("scenario: non-positive actor dimensions");
      }
    }
  }
  for (const auto& row : logged_future) {
    for (const ActorState& s : row) {
      if (!state_finite(s)) throw std::invalid_argument("scenario: non-finite logged state");
    }
  }
  for (const auto& [actor, script] : scripts) {
    if (actor < 0 || actor >= static_cast<int>(n)) {
      throw std::invalid_argument("scenario: script actor out of range");
    }
    if (script.actions.size() != static_cast<size_t>(horizon - 1)) {
      throw std::invalid_argument("scenario: script length must be horizon-1");
    }
  }
  map.validate();
}

bool Partition::is_teacher(int actor) const {
  return std::binary_search(teacher_set.begin(), teacher_set.end(), actor);
}

void Partition::validate(int n_actors) const {
  if (teacher_set.empty() || student_set.empty()) {
    throw std::invalid_argument("partition: both sets must be non-empty");
  }
  if (!std::is_sorted(teacher_set.begin(), teacher_set.end()) ||
      !std::is_sorted(student_set.begin(), student_set.end())) {
    throw std::invalid_argument("partition: sets must be sorted");
  }
  std::vector<uint8_t> seen(static_cast<size_t>(n_actors), 0);
  for (int a : teacher_set) {
    if (a < 0 || a >= n_actors || seen[a]) throw std::invalid_argument("partition: bad teacher set");
    seen[a] = 1;
  }
  for (int a : student_set) {
    if (a < 0 || a >= n_actors || seen[a]) throw std::invalid_argument("partition: bad student set");
    seen[a] = 1;
  }
  for (int a = 0; a < n_actors; ++a) {
    if (!seen[a]) throw std::invalid_argument("partition: sets must cover all actors");
  }
  if (targets.size() != teacher_set.size()) {
    throw std::invalid_argument("partition: every teacher actor needs a target");
  }
  for (const auto& [adv, tgt] : targets) {
    if (!is_teacher(adv)) throw std::invalid_argument("partition: target key not a teacher actor");
    if (!std::binary_search(student_set.begin(), student_set.end(), tgt)) {
      throw std::invalid_argument("partition: target must be a student actor");
    }
  }
}

TargetAssignment Partition::target_assignment() const {
  TargetAssignment out(targets.begin(), targets.end());
  return out;
}

Partition sample_partition(int n_actors, Rng& rng, double teacher_frac) {
  if (n_actors < 2) throw std::invalid_argument("sample_partition: need at least 2 actors");
  if (!(teacher_frac > 0.0) || !(teacher_frac < 1.0)) {
    throw std::invalid_argument("sample_partition: teacher_frac must be in (0, 1)");
  }
  Partition p;
  for (;;) {
    p.teacher_set.clear();
    p.student_set.clear();
    for (int i = 0; i < n_actors; ++i) {
      (rng.bernoulli(teacher_frac) ? p.teacher_set : p.student_set).push_back(i);
    }
    if (!p.teacher_set.empty() && !p.student_set.empty()) break;
  }
  for (int adv : p.teacher_set) {
    const int pick = static_cast<int>(rng.uniform_int(p.student_set.size()));
    p.targets[adv] = p.student_set[static_cast<size_t>(pick)];
  }
  p.validate(n_actors);
  return p;
}

LaneFollowController::LaneFollowController(std::vector<double> target_speeds, double accel_gain,
                                           double lookahead_time, double min_lookahead)
    : target_speeds_(std::move(target_speeds)),
      accel_gain_(accel_gain),
      lookahead_time_(lookahead_time),
      min_lookahead_(min_lookahead) {}

Action LaneFollowController::act(const Scenario& scn,
                                 const std::vector<std::vector<ActorState>>& states_so_far,
                                 int actor, int t) const {
  (void)t;
  const ActorState& s = states_so_far.back()[static_cast<size_t>(actor)];
  const double v_target = target_speeds_.empty()
                              ? states_so_far.front()[static_cast<size_t>(actor)].v
                              : target_speeds_[static_cast<size_t>(actor)];
  const double lookahead = std::max(min_lookahead_, lookahead_time_ * std::max(s.v, 0.0));

  // Walk the successor chain from the nearest node until the accumulated
  // arc length reaches the lookahead, extending past a dead end if needed.
  int node = nearest_nodes(scn.map, {s.x, s.y}, 1)[0];
  double acc = 0.0;
  while (acc < lookahead && !scn.map.nodes[static_cast<size_t>(node)].successors.empty()) {
    const int next = scn.map.nodes[static_cast<size_t>(node)].successors[0];
    acc += norm(scn.map.nodes[static_cast<size_t>(next)].position -
                scn.map.nodes[static_cast<size_t>(node)].position);
    node = next;
  }
  const LaneNode& goal_node = scn.map.nodes[static_cast<size_t>(node)];
  Vec2 goal = goal_node.position;
  if (acc < lookahead) {
    const double extend = lookahead - acc;
    goal = goal + Vec2{extend * std::cos(goal_node.heading), extend * std::sin(goal_node.heading)};
  }

  const double alpha = wrap_angle(std::atan2(goal.y - s.y, goal.x - s.x) - s.theta);
  const double dist = std::max(norm(goal - Vec2{s.x, s.y}), 1e-6);
  Action a;
  a.phi = std::atan2(2.0 * s.wheelbase * std::sin(alpha), dist);
  a.u = accel_gain_ * (v_target - s.v);
  return a;
}

Action ScriptController::act(const Scenario& scn,
                             const std::vector<std::vector<ActorState>>& states_so_far, int actor,
                             int t) const {
  (void)states_so_far;
  const auto it = scn.scripts.find(actor);
  if (it == scn.scripts.end()) throw std::invalid_argument("script controller: actor has no script");
  return it->second.actions.at(static_cast<size_t>(t));
}

namespace {

ad::Var const_vector(ad::Tape& tape, const std::vector<double>& v) {
  return tape.constant(Tensor::from_vector(v));
}

void check_bindings(const Scenario& scn, const RolloutSpec& spec) {
  const int n = scn.num_actors();
  const int steps = scn.horizon - 1;
  if (static_cast<int>(spec.bindings.size()) != n) {
    throw std::invalid_argument("rollout: need one binding per actor");
  }
  for (int i = 0; i < n; ++i) {
    const ActorBinding& b = spec.bindings[static_cast<size_t>(i)];
    switch (b.kind) {
      case BindingKind::kPolicy:
        if (b.policy_slot < 0 || b.policy_slot >= static_cast<int>(spec.slots.size())) {
          throw std::invalid_argument("rollout: policy slot out of range");
        }
        break;
      case BindingKind::kScripted:
        if (b.scripted == nullptr) throw std::invalid_argument("rollout: missing controller");
        break;
      case BindingKind::kReplay:
        if (static_cast<int>(b.replay.size()) != steps) {
          throw std::invalid_argument("rollout: replay length must be horizon-1");
        }
        break;
      case BindingKind::kFreeActions:
        if (static_cast<int>(b.free_u.size()) != steps ||
            static_cast<int>(b.free_phi.size()) != steps) {
          throw std::invalid_argument("rollout: free action length must be horizon-1");
        }
        break;
      case BindingKind::kStateReplay:
        break;
    }
  }
  for (const PolicySlot& slot : spec.slots) {
    if (slot.cfg == nullptr || slot.params == nullptr) {
      throw std::invalid_argument("rollout: slot missing config or params");
    }
    if (slot.cfg->history_len != scn.history_len()) {
      throw std::invalid_argument("rollout: policy history length != scenario history length");
    }
    if (!slot.map_feats.valid()) throw std::invalid_argument("rollout: slot missing map features");
  }
  if (!spec.slots.empty()) {
    const int knn = spec.slots[0].cfg->knn_k;
    for (const PolicySlot& slot : spec.slots) {
      if (slot.cfg->knn_k != knn) {
        throw std::invalid_argument("rollout: slots disagree on map neighborhood size");
      }
    }
  }
}

}  // namespace

RolloutRecording run_rollout(ad::Tape& tape, const Scenario& scn, const MapContext& map_ctx,
                             const RolloutSpec& spec) {
  scn.validate();
  check_bindings(scn, spec);
  const int n = scn.num_actors();
  const int T = scn.horizon;
  const int H = scn.history_len();
  const size_t nn = static_cast<size_t>(n);

  // Static per-actor dimensions.
  std::vector<double> len(nn), wid(nn), wb(nn);
  for (int i = 0; i < n; ++i) {
    const ActorState& s = scn.history.back()[static_cast<size_t>(i)];
    len[static_cast<size_t>(i)] = s.length;
    wid[static_cast<size_t>(i)] = s.width;
    wb[static_cast<size_t>(i)] = s.wheelbase;
  }
  const ad::Var len_c = const_vector(tape, len);
  const ad::Var wid_c = const_vector(tape, wid);
  const ad::Var wb_c = const_vector(tape, wb);

  // Actor groups, in a fixed order independent of mount status.
  std::vector<std::vector<int>> slot_actors(spec.slots.size());
  std::vector<int> scripted_actors, const_actors, free_actors, replay_state_actors;
  for (int i = 0; i < n; ++i) {
    const ActorBinding& b = spec.bindings[static_cast<size_t>(i)];
    switch (b.kind) {
      case BindingKind::kPolicy:
        slot_actors[static_cast<size_t>(b.policy_slot)].push_back(i);
        break;
      case BindingKind::kScripted:
        scripted_actors.push_back(i);
        break;
      case BindingKind::kReplay:
        const_actors.push_back(i);
        break;
      case BindingKind::kFreeActions:
        free_actors.push_back(i);
        break;
      case BindingKind::kStateReplay:
        const_actors.push_back(i);
        replay_state_actors.push_back(i);
        break;
    }
  }
  std::vector<int> dynamic_actors;  // complement of replay_state_actors
  for (int i = 0; i < n; ++i) {
    if (!std::binary_search(replay_state_actors.begin(), replay_state_actors.end(), i)) {
      dynamic_actors.push_back(i);
    }
  }

  RolloutRecording rec;
  rec.rollout.states.assign(static_cast<size_t>(T), std::vector<ActorState>(nn));
  rec.rollout.actions.assign(static_cast<size_t>(T - 1), std::vector<Action>(nn));
  rec.rollout.controlled.assign(nn, 0);
  rec.rollout.collided.assign(nn, 0);
  rec.rollout.offroad.assign(nn, 0);
  for (int i = 0; i < n; ++i) {
    const BindingKind k = spec.bindings[static_cast<size_t>(i)].kind;
    rec.rollout.controlled[static_cast<size_t>(i)] =
        (k == BindingKind::kPolicy || k == BindingKind::kFreeActions) ? 1 : 0;
  }
  rec.rollout.states[0] = scn.history.back();

  // Value-level trajectory so far, grown step by step; scripted controllers
  // see this prefix.
  std::vector<std::vector<ActorState>> traj{scn.history.back()};

  // History window as tape constants, oldest first.
  std::vector<JointState> window;
  window.reserve(static_cast<size_t>(H));
  for (int t = 0; t < H; ++t) {
    std::vector<double> x(nn), y(nn), th(nn), v(nn);
    for (int i = 0; i < n; ++i) {
      const ActorState& s = scn.history[static_cast<size_t>(t)][static_cast<size_t>(i)];
      x[static_cast<size_t>(i)] = s.x;
      y[static_cast<size_t>(i)] = s.y;
      th[static_cast<size_t>(i)] = s.theta;
      v[static_cast<size_t>(i)] = s.v;
    }
    window.push_back(JointState{const_vector(tape, x), const_vector(tape, y),
                                const_vector(tape, th), const_vector(tape, v)});
  }
  rec.states.push_back(window.back());

  const int knn = spec.slots.empty() ? 1 : spec.slots[0].cfg->knn_k;

  for (int t = 0; t + 1 < T; ++t) {
    ad::Var u_all, phi_all;
    const bool any_policy =
        std::any_of(slot_actors.begin(), slot_actors.end(),
                    [](const std::vector<int>& a) { return !a.empty(); });
    StepGeometry geom;
    if (any_policy) {
      geom = build_step_geometry(tape, window, len_c, wid_c, map_ctx, knn);
    }

    std::vector<std::pair<ad::Var, std::vector<int>>> u_parts, phi_parts;
    for (size_t s = 0; s < spec.slots.size(); ++s) {
      if (slot_actors[s].empty()) continue;
      const PolicySlot& slot = spec.slots[s];
      const PolicyOutput out = policy_forward(tape, *slot.cfg, *slot.params, slot.prefix,
                                              slot.map_feats, geom, slot.targets, spec.limits);
      const ad::Var u_col = ad::reshape(ad::slice_cols(out.actions, 0, 1), {n});
      const ad::Var phi_col = ad::reshape(ad::slice_cols(out.actions, 1, 1), {n});
      u_parts.emplace_back(ad::gather_elems(u_col, slot_actors[s]), slot_actors[s]);
      phi_parts.emplace_back(ad::gather_elems(phi_col, slot_actors[s]), slot_actors[s]);
    }
    if (!scripted_actors.empty()) {
      std::vector<double> su, sphi;
      for (int i : scripted_actors) {
        const Action a = spec.bindings[static_cast<size_t>(i)].scripted->act(scn, traj, i, t);
        su.push_back(a.u);
        sphi.push_back(a.phi);
      }
      u_parts.emplace_back(const_vector(tape, su), scripted_actors);
      phi_parts.emplace_back(const_vector(tape, sphi), scripted_actors);
    }
    if (!const_actors.empty()) {
      std::vector<double> cu, cphi;
      for (int i : const_actors) {
        const ActorBinding& b = spec.bindings[static_cast<size_t>(i)];
        if (b.kind == BindingKind::kReplay) {
          cu.push_back(b.replay[static_cast<size_t>(t)].u);
          cphi.push_back(b.replay[static_cast<size_t>(t)].phi);
        } else {  // state replay: placeholder action, state injected below
          cu.push_back(0.0);
          cphi.push_back(0.0);
        }
      }
      u_parts.emplace_back(const_vector(tape, cu), const_actors);
      phi_parts.emplace_back(const_vector(tape, cphi), const_actors);
    }
    for (int i : free_actors) {
      const ActorBinding& b = spec.bindings[static_cast<size_t>(i)];
      u_parts.emplace_back(b.free_u[static_cast<size_t>(t)], std::vector<int>{i});
      phi_parts.emplace_back(b.free_phi[static_cast<size_t>(t)], std::vector<int>{i});
    }
    u_all = ad::compose_vector(u_parts, n);
    phi_all = ad::compose_vector(phi_parts, n);

    const JointState& cur = window.back();
    const StepVars stepped = step_on_tape(tape, StepVars{cur.x, cur.y, cur.theta, cur.v}, u_all,
                                          phi_all, wb_c, scn.dt, spec.limits);

    JointState next{stepped.x, stepped.y, stepped.theta, stepped.v};
    if (!replay_state_actors.empty()) {
      std::vector<double> rx, ry, rth, rv;
      for (int i : replay_state_actors) {
        const ActorState& s = scn.logged_future[static_cast<size_t>(t + 1)][static_cast<size_t>(i)];
        rx.push_back(s.x);
        ry.push_back(s.y);
        rth.push_back(s.theta);
        rv.push_back(s.v);
      }
      const auto inject = [&](ad::Var stepped_coord, const std::vector<double>& logged) {
        std::vector<std::pair<ad::Var, std::vector<int>>> parts;
        if (!dynamic_actors.empty()) {
          parts.emplace_back(ad::gather_elems(stepped_coord, dynamic_actors), dynamic_actors);
        }
        parts.emplace_back(const_vector(tape, logged), replay_state_actors);
        return ad::compose_vector(parts, n);
      };
      next = JointState{inject(stepped.x, rx), inject(stepped.y, ry), inject(stepped.theta, rth),
                        inject(stepped.v, rv)};
    }

    window.push_back(next);
    window.erase(window.begin());
    rec.states.push_back(next);
    rec.u.push_back(u_all);
    rec.phi.push_back(phi_all);

    const Tensor& xu = tape.value(u_all);
    const Tensor& xphi = tape.value(phi_all);
    const Tensor& vx = tape.value(next.x);
    const Tensor& vy = tape.value(next.y);
    const Tensor& vth = tape.value(next.theta);
    const Tensor& vv = tape.value(next.v);
    for (int i = 0; i < n; ++i) {
      const size_t si = static_cast<size_t>(i);
      rec.rollout.actions[static_cast<size_t>(t)][si] = {xu.data[si], xphi.data[si]};
      ActorState s = rec.rollout.states[0][si];
      s.x = vx.data[si];
      s.y = vy.data[si];
      s.theta = vth.data[si];
      s.v = vv.data[si];
      rec.rollout.states[static_cast<size_t>(t + 1)][si] = s;
    }
    traj.push_back(rec.rollout.states[static_cast<size_t>(t + 1)]);
  }

  for (int t = 0; t < T; ++t) {
    const auto& row = rec.rollout.states[static_cast<size_t>(t)];
    for (int i = 0; i < n; ++i) {
      if (is_offroad(scn.map, row[static_cast<size_t>(i)])) {
        rec.rollout.offroad[static_cast<size_t>(i)] = 1;
      }
      for (int j = i + 1; j < n; ++j) {
        if (obb_overlap(actor_box(row[static_cast<size_t>(i)]),
                        actor_box(row[static_cast<size_t>(j)]))) {
          rec.rollout.collided[static_cast<size_t>(i)] = 1;
          rec.rollout.collided[static_cast<size_t>(j)] = 1;
        }
      }
    }
  }
  return rec;
}

RolloutRecording mount_rollout_constants(ad::Tape& tape, const Rollout& rollout) {
  RolloutRecording rec;
  rec.rollout = rollout;
  const size_t n = rollout.states.empty() ? 0 : rollout.states[0].size();
  for (const auto& row : rollout.states) {
    std::vector<double> x(n), y(n), th(n), v(n);
    for (size_t i = 0; i < n; ++i) {
      x[i] = row[i].x;
      y[i] = row[i].y;
      th[i] = row[i].theta;
      v[i] = row[i].v;
    }
    rec.states.push_back(JointState{const_vector(tape, x), const_vector(tape, y),
                                    const_vector(tape, th), const_vector(tape, v)});
  }
  return rec;
}

Rollout simulate(const Scenario& scn, const std::vector<SimPolicy>& policies,
                 const std::vector<ActorBinding>& bindings, const ActionLimits& limits) {
  ad::Tape tape;
  const MapContext ctx = build_map_context(tape, scn.map);
  std::vector<MountedParams> mounted;
  mounted.reserve(policies.size());
  RolloutSpec spec;
  spec.bindings = bindings;
  spec.limits = limits;
  for (const SimPolicy& p : policies) {
    if (p.params == nullptr) throw std::invalid_argument("simulate: policy missing params");
    mounted.emplace_back(tape, *p.params, /*trainable=*/false);
    PolicySlot slot;
    slot.cfg = &p.cfg;
    slot.params = &mounted.back();
    slot.prefix = p.prefix;
    slot.targets = p.targets;
    slot.map_feats = encode_map(tape, p.cfg, mounted.back(), p.prefix, ctx);
    spec.slots.push_back(std::move(slot));
  }
  return run_rollout(tape, scn, ctx, spec).rollout;
}

Rollout simulate_single_policy(const Scenario& scn, const SimPolicy& policy,
                               const ActionLimits& limits) {
  std::vector<ActorBinding> bindings(static_cast<size_t>(scn.num_actors()));
  for (ActorBinding& b : bindings) {
    b.kind = BindingKind::kPolicy;
    b.policy_slot = 0;
  }
  return simulate(scn, {policy}, bindings, limits);
}

Rollout simulate_log_replay(const Scenario& scn) {
  ad::Tape tape;
  const MapContext ctx = build_map_context(tape, scn.map);
  RolloutSpec spec;
  spec.bindings.assign(static_cast<size_t>(scn.num_actors()), ActorBinding{});
  return run_rollout(tape, scn, ctx, spec).rollout;
}

std::vector<std::vector<Action>> derive_actions(const Scenario& scn, const ActionLimits& limits) {
  const int n = scn.num_actors();
  std::vector<std::vector<Action>> out(static_cast<size_t>(scn.horizon - 1),
                                       std::vector<Action>(static_cast<size_t>(n)));
  for (int t = 0; t + 1 < scn.horizon; ++t) {
    for (int i = 0; i < n; ++i) {
      const ActorState& a = scn.logged_future[static_cast<size_t>(t)][static_cast<size_t>(i)];
      const ActorState& b = scn.logged_future[static_cast<size_t>(t + 1)][static_cast<size_t>(i)];
      Action act;
      act.u = std::clamp((b.v - a.v) / scn.dt, -limits.u_max, limits.u_max);
      const double dth = wrap_angle(b.theta - a.theta);
      act.phi = a.v != 0.0
                    ? std::clamp(std::atan(dth / scn.dt * a.wheelbase / a.v), -limits.phi_max,
                                 limits.phi_max)
                    : 0.0;
      out[static_cast<size_t>(t)][static_cast<size_t>(i)] = act;
    }
  }
  return out;
}

namespace {

using nlohmann::json;

json state_to_json(const ActorState& s) {
  return json{{"x", s.x}, {"y", s.y}, {"theta", s.theta}, {"v", s.v}};
}

void state_from_json(const json& j, ActorState& s) {
  s.x = j.at("x").get<double>();
  s.y = j.at("y").get<double>();
  s.theta = j.at("theta").get<double>();
  s.v = j.at("v").get<double>();
}

}  // namespace

std::string scenario_to_json(const Scenario& scn) {
  scn.validate();
  const int n = scn.num_actors();
  json j;
  j["id"] = scn.id;
  j["horizon"] = scn.horizon;
  j["dt"] = scn.dt;

  json nodes = json::array();
  for (const LaneNode& nd : scn.map.nodes) {
    nodes.push_back(json{{"id", nd.id},
                         {"x", nd.position.x},
                         {"y", nd.position.y},
                         {"heading", nd.heading},
                         {"width", nd.width},
                         {"successors", nd.successors},
                         {"left", nd.left_neighbor},
                         {"right", nd.right_neighbor}});
  }
  json polys = json::array();
  for (const Polygon& poly : scn.map.drivable_polygons) {
    json ring = json::array();
    for (const Vec2& p : poly) ring.push_back(json::array({p.x, p.y}));
    polys.push_back(std::move(ring));
  }
  j["map"] = json{{"nodes", std::move(nodes)}, {"drivable", std::move(polys)}};

  json actors = json::array();
  for (int i = 0; i < n; ++i) {
    const ActorState& ref = scn.history.back()[static_cast<size_t>(i)];
    json hist = json::array();
    for (const auto& row : scn.history) hist.push_back(state_to_json(row[static_cast<size_t>(i)]));
    actors.push_back(json{{"id", i},
                          {"length", ref.length},
                          {"width", ref.width},
                          {"wheelbase", ref.wheelbase},
                          {"history", std::move(hist)}});
  }
  j["actors"] = std::move(actors);

  json future = json::array();
  for (int i = 0; i < n; ++i) {
    json track = json::array();
    for (const auto& row : scn.logged_future) track.push_back(state_to_json(row[static_cast<size_t>(i)]));
    future.push_back(std::move(track));
  }
  j["logged_future"] = std::move(future);

  json acts = json::array();
  for (int i = 0; i < n; ++i) {
    json track = json::array();
    for (const auto& row : scn.logged_actions) {
      const Action& a = row[static_cast<size_t>(i)];
      track.push_back(json{{"u", a.u}, {"phi", a.phi}});
    }
    acts.push_back(std::move(track));
  }
  j["logged_actions"] = std::move(acts);

  if (!scn.scripts.empty()) {
    json scripts = json::object();
    for (const auto& [actor, script] : scn.scripts) {
      json u = json::array(), phi = json::array();
      for (const Action& a : script.actions) {
        u.push_back(a.u);
        phi.push_back(a.phi);
      }
      scripts[std::to_string(actor)] =
          json{{"kind", script.kind}, {"u", std::move(u)}, {"phi", std::move(phi)}};
    }
    j["scripts"] = std::move(scripts);
  }
  return j.dump(2);
}

Scenario scenario_from_json(const std::string& text) {
  const json j = json::parse(text);
  Scenario scn;
  scn.id = j.at("id").get<std::string>();
  scn.horizon = j.at("horizon").get<int>();
  scn.dt = j.at("dt").get<double>();

  const json& jm = j.at("map");
  for (const json& jn : jm.at("nodes")) {
    LaneNode nd;
    nd.id = jn.at("id").get<int>();
    nd.position = {jn.at("x").get<double>(), jn.at("y").get<double>()};
    nd.heading = jn.at("heading").get<double>();
    nd.width = jn.at("width").get<double>();
    nd.successors = jn.at("successors").get<std::vector<int>>();
    nd.left_neighbor = jn.at("left").get<int>();
    nd.right_neighbor = jn.at("right").get<int>();
    scn.map.nodes.push_back(std::move(nd));
  }
  for (const json& ring : jm.at("drivable")) {
    Polygon poly;
    for (const json& p : ring) poly.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    scn.map.drivable_polygons.push_back(std::move(poly));
  }

  const json& ja = j.at("actors");
  const int n = static_cast<int>(ja.size());
  if (n == 0) throw std::invalid_argument("scenario json: no actors");
  const int hist_len = static_cast<int>(ja.at(0).at("history").size());
  scn.history.assign(static_cast<size_t>(hist_len), std::vector<ActorState>(static_cast<size_t>(n)));
  for (int i = 0; i < n; ++i) {
    const json& actor = ja.at(static_cast<size_t>(i));
    if (actor.at("id").get<int>() != i) throw std::invalid_argument("scenario json: ids must be 0..n-1 in order");
    ActorState base;
    base.length = actor.at("length").get<double>();
    base.width = actor.at("width").get<double>();
    base.wheelbase = actor.at("wheelbase").get<double>();
    const json& hist = actor.at("history");
    if (static_cast<int>(hist.size()) != hist_len) {
      throw std::invalid_argument("scenario json: ragged history");
    }
    for (int t = 0; t < hist_len; ++t) {
      ActorState s = base;
      state_from_json(hist.at(static_cast<size_t>(t)), s);
      scn.history[static_cast<size_t>(t)][static_cast<size_t>(i)] = s;
    }
  }

  const json& jf = j.at("logged_future");
  scn.logged_future.assign(static_cast<size_t>(scn.horizon),
                           std::vector<ActorState>(static_cast<size_t>(n)));
  for (int i = 0; i < n; ++i) {
    const json& track = jf.at(static_cast<size_t>(i));
    if (static_cast<int>(track.size()) != scn.horizon) {
      throw std::invalid_argument("scenario json: logged_future length mismatch");
    }
    for (int t = 0; t < scn.horizon; ++t) {
      ActorState s = scn.history.back()[static_cast<size_t>(i)];
      state_from_json(track.at(static_cast<size_t>(t)), s);
      scn.logged_future[static_cast<size_t>(t)][static_cast<size_t>(i)] = s;
    }
  }

  if (j.contains("logged_actions")) {
    const json& jact = j.at("logged_actions");
    scn.logged_actions.assign(static_cast<size_t>(scn.horizon - 1),
                              std::vector<Action>(static_cast<size_t>(n)));
    for (int i = 0; i < n; ++i) {
      const json& track = jact.at(static_cast<size_t>(i));
      if (static_cast<int>(track.size()) != scn.horizon - 1) {
        throw std::invalid_argument("scenario json: logged_actions length mismatch");
      }
      for (int t = 0; t + 1 < scn.horizon; ++t) {
        const json& a = track.at(static_cast<size_t>(t));
        scn.logged_actions[static_cast<size_t>(t)][static_cast<size_t>(i)] = {
            a.at("u").get<double>(), a.at("phi").get<double>()};
      }
    }
  } else {
    log_info("scenario %s: no stored actions, deriving approximate ones from the log",
             scn.id.c_str());
    scn.logged_actions = derive_actions(scn);
  }

  if (j.contains("scripts")) {
    for (const auto& [key, js] : j.at("scripts").items()) {
      ActorScript script;
      script.kind = js.at("kind").get<std::string>();
      const auto u = js.at("u").get<std::vector<double>>();
      const auto phi = js.at("phi").get<std::vector<double>>();
      if (u.size() != phi.size()) throw std::invalid_argument("scenario json: ragged script");
      for (size_t t = 0; t < u.size(); ++t) script.actions.push_back({u[t], phi[t]});
      scn.scripts[std::stoi(key)] = std::move(script);
    }
  }

  scn.validate();
  return scn;
}

void save_corpus(const std::string& dir, const std::vector<Scenario>& corpus, uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json manifest;
  manifest["seed"] = seed;
  manifest["count"] = corpus.size();
  json files = json::array();
  for (const Scenario& scn : corpus) {
    const std::string fname = scn.id + ".json";
    std::ofstream out(fs::path(dir) / fname, std::ios::binary);
    if (!out) throw std::runtime_error("save_corpus: cannot write " + fname);
    out << scenario_to_json(scn);
    files.push_back(fname);
  }
  manifest["files"] = std::move(files);
  std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!out) throw std::runtime_error("save_corpus: cannot write manifest.json");
  out << manifest.dump(2);
}

std::vector<Scenario> load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!in) throw std::runtime_error("load_corpus: missing manifest.json in " + dir);
  json manifest;
  in >> manifest;
  std::vector<Scenario> out;
  for (const json& f : manifest.at("files")) {
    const std::string fname = f.get<std::string>();
    std::ifstream sf(fs::path(dir) / fname, std::ios::binary);
    if (!sf) throw std::runtime_error("load_corpus: missing " + fname);
    std::stringstream ss;
    ss << sf.rdbuf();
    out.push_back(scenario_from_json(ss.str()));
  }
  return out;
}

namespace {

struct Placement {
  double station = 0.0;
  double lateral = 0.0;
  double speed = 0.0;
};

}  // namespace

Scenario gen_scenario(const CorpusSpec& spec, int index) {
  if (spec.actors_min < 2 || spec.actors_max < spec.actors_min) {
    throw std::invalid_argument("corpus: need actors_min >= 2 and actors_max >= actors_min");
  }
  if (spec.history_len < 1) throw std::invalid_argument("corpus: history_len must be >= 1");
  if (spec.horizon < 2) throw std::invalid_argument("corpus: horizon must be >= 2");

  Rng rng(stream_seed(spec.seed, "corpus/" + std::to_string(index)));

  std::string preset = spec.map_preset;
  if (preset == "mixed") {
    const char* kinds[3] = {"straight", "curved", "merge"};
    preset = kinds[rng.uniform_int(3)];
  }
  HighwayMapSpec ms;
  ms.lanes = 2 + static_cast<int>(rng.uniform_int(2));
  ms.length = 400.0;
  ms.node_spacing = 10.0;
  ms.lane_width = spec.lane_width;
  ms.seed = stream_seed(spec.seed, "map/" + std::to_string(index));
  if (preset == "curved") {
    // Kept gentle: pure-pursuit logs cut inside an arc by about L^2/(8R),
    // which must stay within the half-lane margin at 30 m/s lookaheads.
    const double mag = rng.uniform(0.001, 0.0025);
    ms.curvature = rng.bernoulli(0.5) ? mag : -mag;
  } else if (preset == "merge") {
    ms.merge = MergeSpec{};
  } else if (preset != "straight") {
    throw std::invalid_argument("corpus: unknown map preset " + spec.map_preset);
  }

  Scenario scn;
  scn.id = [&] {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scn_%04d", index);
    return std::string(buf);
  }();
  scn.map = build_highway_map(ms);
  scn.horizon = spec.horizon;
  scn.dt = spec.dt;

  const int n = spec.actors_min +
                static_cast<int>(rng.uniform_int(spec.actors_max - spec.actors_min + 1));

  // Place actors front to back, round-robin over lanes, keeping a speed-aware
  // gap behind each leader.
  std::vector<Placement> placed(static_cast<size_t>(n));
  std::vector<double> lane_front(static_cast<size_t>(ms.lanes), 0.0);
  std::vector<double> lane_front_speed(static_cast<size_t>(ms.lanes), 0.0);
  std::vector<bool> lane_used(static_cast<size_t>(ms.lanes), false);
  const double roll_time = (spec.horizon - 1) * spec.dt;
  for (int a = 0; a < n; ++a) {
    const int lane = a % ms.lanes;
    const size_t sl = static_cast<size_t>(lane);
    double speed;
    double station;
    if (!lane_used[sl]) {
      // Leaders get road ahead: 30 m/s for horizon-1 steps stays on the map.
      speed = rng.uniform(15.0, 30.0);
      station = 160.0 + rng.uniform(0.0, 50.0);
      lane_used[sl] = true;
    } else {
      // Followers roughly match their leader so constant-speed logs never
      // rear-end; the gap still absorbs the worst-case closing drift.
      speed = std::clamp(lane_front_speed[sl] + rng.uniform(-4.0, 2.0), 8.0, 30.0);
      const double closing = std::max(0.0, speed - lane_front_speed[sl]);
      const double gap = 8.0 + closing * roll_time + rng.uniform(2.0, 20.0);
      station = lane_front[sl] - gap - 5.0;
    }
    if (station < 5.0) throw std::runtime_error("corpus: ran out of road placing actors");
    lane_front[sl] = station;
    lane_front_speed[sl] = speed;
    placed[static_cast<size_t>(a)] = {station, lane * ms.lane_width, speed};
  }

  std::vector<ActorState> start(static_cast<size_t>(n));
  for (int a = 0; a < n; ++a) {
    const Placement& pl = placed[static_cast<size_t>(a)];
    const Pose pose = highway_arc_pose(ms, pl.station, pl.lateral);
    ActorState s;
    s.x = pose.x;
    s.y = pose.y;
    s.theta = pose.heading;
    s.v = pl.speed;
    s.length = rng.uniform(4.0, 4.5);
    s.width = rng.uniform(1.95, 2.1);
    s.wheelbase = 0.62 * s.length;
    start[static_cast<size_t>(a)] = s;
  }

  // Pre-history: straight-line extrapolation backwards at constant speed.
  scn.history.assign(static_cast<size_t>(spec.history_len),
                     std::vector<ActorState>(static_cast<size_t>(n)));
  scn.history.back() = start;
  for (int t = spec.history_len - 2; t >= 0; --t) {
    for (int a = 0; a < n; ++a) {
      ActorState s = scn.history[static_cast<size_t>(t + 1)][static_cast<size_t>(a)];
      s.x -= s.v * std::cos(s.theta) * spec.dt;
      s.y -= s.v * std::sin(s.theta) * spec.dt;
      scn.history[static_cast<size_t>(t)][static_cast<size_t>(a)] = s;
    }
  }

  // Logged future: every actor follows its lane at its initial speed. The
  // executed (clamped) actions are stored so replay is exact.
  std::vector<double> targets(static_cast<size_t>(n));
  for (int a = 0; a < n; ++a) targets[static_cast<size_t>(a)] = start[static_cast<size_t>(a)].v;
  const LaneFollowController ctrl(targets);
  const ActionLimits limits;
  scn.logged_future.assign(static_cast<size_t>(spec.horizon),
                           std::vector<ActorState>(static_cast<size_t>(n)));
  scn.logged_actions.assign(static_cast<size_t>(spec.horizon - 1),
                            std::vector<Action>(static_cast<size_t>(n)));
  scn.logged_future[0] = start;
  std::vector<std::vector<ActorState>> so_far{start};
  for (int t = 0; t + 1 < spec.horizon; ++t) {
    std::vector<ActorState> next(static_cast<size_t>(n));
    for (int a = 0; a < n; ++a) {
      Action act = ctrl.act(scn, so_far, a, t);
      act.u = std::clamp(act.u, -limits.u_max, limits.u_max);
      act.phi = std::clamp(act.phi, -limits.phi_max, limits.phi_max);
      scn.logged_actions[static_cast<size_t>(t)][static_cast<size_t>(a)] = act;
      next[static_cast<size_t>(a)] =
          step(so_far.back()[static_cast<size_t>(a)], act, spec.dt, limits);
    }
    scn.logged_future[static_cast<size_t>(t + 1)] = next;
    so_far.push_back(std::move(next));
  }

  scn.validate();
  return scn;
}

std::vector<Scenario> gen_corpus(const CorpusSpec& spec) {
  std::vector<Scenario> out;
  out.reserve(static_cast<size_t>(spec.scenarios));
  for (int i = 0; i < spec.scenarios; ++i) out.push_back(gen_scenario(spec, i));
  return out;
}

}  // namespace selfplay
