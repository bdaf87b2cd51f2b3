#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "selfplay/objectives.hpp"
#include "selfplay/rng.hpp"
#include "selfplay/simkit.hpp"

using namespace selfplay;

namespace {

// Brute-force circle oracle: smallest of the 25 center distances, computed
// with independent arithmetic (box center + fractional offsets).
double oracle_circle_dist(const ActorState& a, const ActorState& b) {
  const auto centers = [](const ActorState& s) {
    std::array<Vec2, 5> out;
    const double cx = s.x + 0.5 * s.wheelbase * std::cos(s.theta);
    const double cy = s.y + 0.5 * s.wheelbase * std::sin(s.theta);
    const std::array<double, 5> fr{-0.4, -0.2, 0.0, 0.2, 0.4};
    for (size_t k = 0; k < 5; ++k) {
      out[k] = {cx + fr[k] * s.length * std::cos(s.theta),
                cy + fr[k] * s.length * std::sin(s.theta)};
    }
    return out;
  };
  double best = 1e300;
  for (const Vec2 pa : centers(a)) {
    for (const Vec2 pb : centers(b)) best = std::min(best, norm(pb - pa));
  }
  return best;
}

std::vector<std::vector<ActorState>> single_frame(std::vector<ActorState> actors) {
  return {std::move(actors)};
}

// Mounts value-level states as tape constants for the differentiable twins.
std::vector<JointState> mount_states(ad::Tape& tape,
                                     const std::vector<std::vector<ActorState>>& states) {
  std::vector<JointState> out;
  for (const auto& frame : states) {
    std::vector<double> x, y, th, v;
    for (const ActorState& s : frame) {
      x.push_back(s.x);
      y.push_back(s.y);
      th.push_back(s.theta);
      v.push_back(s.v);
    }
    out.push_back({tape.constant(Tensor::from_vector(x)), tape.constant(Tensor::from_vector(y)),
                   tape.constant(Tensor::from_vector(th)),
                   tape.constant(Tensor::from_vector(v))});
  }
  return out;
}

ActorState at_pose(double x, double y, double theta = 0.0) {
  ActorState s;
  s.x = x;
  s.y = y;
  s.theta = theta;
  return s;
}

Scenario tiny_scenario(uint64_t seed = 5, int actors = 3) {
  CorpusSpec spec;
  spec.scenarios = 1;
  spec.actors_min = actors;
  spec.actors_max = actors;
  spec.horizon = 6;
  spec.seed = seed;
  return gen_scenario(spec, 0);
}

}  // namespace

TEST_SUITE("objectives") {

TEST_CASE("footprint circles sit on the box axis") {
  const ActorState s;  // length 4.5, wheelbase 2.8
  const std::array<double, 5> off = circle_offsets(s);
  // Box center is 1.4 ahead of the rear axle; fractions of 4.5 around it.
  CHECK(off[0] == doctest::Approx(-0.4).epsilon(1e-12));
  CHECK(off[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(off[2] == doctest::Approx(1.4).epsilon(1e-12));
  CHECK(off[3] == doctest::Approx(2.3).epsilon(1e-12));
  CHECK(off[4] == doctest::Approx(3.2).epsilon(1e-12));
}

TEST_CASE("minimum circle distance on an axis-aligned pair") {
  // Rear axles 20 m apart, same heading: closest circles are the front of a
  // and the back of b, 20 - 3.2 + (-0.4) keeps 16.4 m between centers.
  const double d = min_circle_distance(at_pose(0, 0), at_pose(20, 0));
  CHECK(d == doctest::Approx(16.4).epsilon(1e-12));
  CHECK(min_circle_distance(at_pose(20, 0), at_pose(0, 0)) == doctest::Approx(d).epsilon(1e-15));
}

TEST_CASE("circle distance matches the independent oracle on random pairs") {
  Rng rng(23);
  for (int trial = 0; trial < 2000; ++trial) {
    ActorState a = at_pose(rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-kPi + 1e-9, kPi));
    ActorState b = at_pose(rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-kPi + 1e-9, kPi));
    a.length = rng.uniform(3.5, 5.5);
    b.width = rng.uniform(1.6, 2.4);
    const double got = min_circle_distance(a, b);
    const double want = oracle_circle_dist(a, b);
    REQUIRE(std::abs(got - want) < 1e-9);
  }
}

TEST_CASE("collision potential hand value for one coincident pair") {
  // Two identical actors on the same pose: every circle pair coincides, so
  // the hinge is r+r+buffer = 2.2 for both ordered pairs. Mean over n*n*T
  // with n=2, T=1 gives 2*2.2/4 wait, the normalizer is 1/(n*T) over masked
  // pair sums: 2 pairs * 2.2 / (2*1) = 2.2.
  const auto states = single_frame({at_pose(0, 0), at_pose(0, 0)});
  const double v = collision_loss_value(states, pairs_all(2), 0.2);
  CHECK(v == doctest::Approx(2.2).epsilon(1e-12));

  ad::Tape tape;
  const auto js = mount_states(tape, states);
  const std::vector<ActorState> dims{at_pose(0, 0), at_pose(0, 0)};
  const ad::Var loss = collision_loss(tape, js, dims, pairs_all(2), 0.2);
  CHECK(tape.scalar_value(loss) == v);  // twins agree bitwise
}

TEST_CASE("collision potential switches off at the buffer boundary") {
  // Heading-aligned actors: the circle gap hits the 2.2 threshold when the
  // rear axles sit 5.8 apart (5.8 - 3.6). Pin the switch from both sides.
  const auto outside = single_frame({at_pose(0, 0), at_pose(5.8 + 1e-6, 0)});
  CHECK(collision_loss_value(outside, pairs_all(2), 0.2) == 0.0);
  const auto inside = single_frame({at_pose(0, 0), at_pose(5.8 - 1e-6, 0)});
  CHECK(collision_loss_value(inside, pairs_all(2), 0.2) > 0.0);
  const auto far = single_frame({at_pose(0, 0), at_pose(100, 0)});
  CHECK(collision_loss_value(far, pairs_all(2), 0.2) == 0.0);
}

TEST_CASE("potential is zero iff every masked pair clears the buffered radii") {
  Rng rng(29);
  for (int trial = 0; trial < 2000; ++trial) {
    const ActorState a = at_pose(rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-kPi + 1e-9, kPi));
    const ActorState b = at_pose(rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-kPi + 1e-9, kPi));
    const double v = collision_loss_value(single_frame({a, b}), pairs_all(2), 0.2);
    const double gap = oracle_circle_dist(a, b) - (1.0 + 1.0 + 0.2);
    if (gap < 0.0) {
      REQUIRE(v > 0.0);
    } else {
      REQUIRE(v == 0.0);
    }
  }
}

TEST_CASE("masks select ordered pairs") {
  const auto all = pairs_all(3);
  int count = 0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      CHECK(all[i][j] == (i != j ? 1 : 0));
      count += all[i][j];
    }
  }
  CHECK(count == 6);

  const auto inv = pairs_involving(3, {1});
  CHECK(inv[0][1] == 1);
  CHECK(inv[1][0] == 1);
  CHECK(inv[1][2] == 1);
  CHECK(inv[2][1] == 1);
  CHECK(inv[0][2] == 0);
  CHECK(inv[2][0] == 0);
  CHECK(inv[1][1] == 0);

  const auto from = pairs_from(3, {1});
  CHECK(from[1][0] == 1);
  CHECK(from[1][2] == 1);
  CHECK(from[0][1] == 0);
  CHECK(from[1][1] == 0);

  CHECK_THROWS_AS(pairs_involving(3, {3}), std::invalid_argument);
}

TEST_CASE("shrinking the mask can only shrink the potential") {
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<ActorState> actors;
    for (int i = 0; i < 4; ++i) {
      actors.push_back(at_pose(rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(-kPi + 1e-9, kPi)));
    }
    const auto frame = single_frame(actors);
    const double full = collision_loss_value(frame, pairs_all(4), 0.2);
    const double sub = collision_loss_value(frame, pairs_involving(4, {1, 2}), 0.2);
    REQUIRE(sub <= full + 1e-15);
  }
}

TEST_CASE("strict box overlap flags") {
  // Coincident boxes overlap; both actors get flagged.
  const auto hit = exact_collision(single_frame({at_pose(0, 0), at_pose(0.5, 0.3)}));
  CHECK(hit == std::vector<uint8_t>{1, 1});

  // Exact touch: boxes back to back, center distance = length, zero margin.
  const auto touch = exact_collision(single_frame({at_pose(0, 0), at_pose(4.5, 0)}));
  CHECK(touch == std::vector<uint8_t>{0, 0});

  const auto miss = exact_collision(single_frame({at_pose(0, 0), at_pose(30, 0)}));
  CHECK(miss == std::vector<uint8_t>{0, 0});

  // Third actor far away stays clean while the close pair lights up.
  const auto mixed = exact_collision(single_frame({at_pose(0, 0), at_pose(1, 0.5), at_pose(50, 0)}));
  CHECK(mixed == std::vector<uint8_t>{1, 1, 0});
}

TEST_CASE("tracking error is zero on the log and scales with the offset") {
  const Scenario scn = tiny_scenario(7);
  const Rollout log = simulate_log_replay(scn);
  const std::vector<int> everyone{0, 1, 2};
  CHECK(realism_value(log.states, scn, everyone, 1.0) == 0.0);

  // One actor shifted 0.1 m on one axis at every step: quadratic zone.
  auto shifted = log.states;
  for (auto& frame : shifted) frame[1].y += 0.1;
  CHECK(realism_value(shifted, scn, {1}, 1.0) == doctest::Approx(0.005).epsilon(1e-12));

  // 10 m offset lands in the linear zone: 10 - 0.5.
  auto far = log.states;
  for (auto& frame : far) frame[2].x += 10.0;
  CHECK(realism_value(far, scn, {2}, 1.0) == doctest::Approx(9.5).epsilon(1e-12));

  // Subset mean: actor 1 contributes 0.005, actor 0 contributes 0.
  CHECK(realism_value(shifted, scn, {0, 1}, 1.0) == doctest::Approx(0.0025).epsilon(1e-12));

  ad::Tape tape;
  const auto js = mount_states(tape, shifted);
  const ad::Var r = realism_term(tape, js, scn, {1}, 1.0);
  CHECK(tape.scalar_value(r) == realism_value(shifted, scn, {1}, 1.0));
}

TEST_CASE("target distance averages adversary-to-target gaps") {
  ad::Tape tape;
  // Two frames, two actors 5 m apart in x at every step.
  const auto js = mount_states(
      tape, {{at_pose(0, 0), at_pose(5, 0)}, {at_pose(1, 0), at_pose(6, 0)}});
  CHECK(tape.scalar_value(distance_term(tape, js, {{0, 1}})) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(tape.scalar_value(distance_term(tape, js, {})) == 0.0);

  ad::Tape tape2;
  const auto js2 = mount_states(
      tape2, {{at_pose(0, 0), at_pose(3, 0), at_pose(0, 7)}});
  const ad::Var d = distance_term(tape2, js2, {{1, 0}, {2, 0}});
  CHECK(tape2.scalar_value(d) == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("proposer loss assembles its components linearly") {
  const Scenario scn = tiny_scenario(13, 4);
  Partition part;
  part.teacher_set = {0, 2};
  part.student_set = {1, 3};
  part.targets = {{0, 1}, {2, 3}};

  ObjectiveConfig cfg;
  cfg.beta = 0.7;
  cfg.lambda_dist = 0.03;
  cfg.w_challenge = 1.3;
  cfg.w_solvable = 0.9;

  ad::Tape tape;
  const MapContext mc = build_map_context(tape, scn.map);
  RolloutSpec replay_spec;
  replay_spec.bindings.resize(4);
  for (int i = 0; i < 4; ++i) {
    replay_spec.bindings[static_cast<size_t>(i)].kind = BindingKind::kReplay;
    std::vector<Action> acts;
    for (int t = 0; t + 1 < scn.horizon; ++t) {
      Action a = scn.logged_actions[static_cast<size_t>(t)][static_cast<size_t>(i)];
      if (i == 0) a.phi += 0.1;  // push the demo off the log a little
      acts.push_back(a);
    }
    replay_spec.bindings[static_cast<size_t>(i)].replay = std::move(acts);
  }
  const RolloutRecording demo = run_rollout(tape, scn, mc, replay_spec);

  RolloutSpec mixed_spec = replay_spec;
  for (int i = 0; i < 4; ++i) {
    auto& acts = mixed_spec.bindings[static_cast<size_t>(i)].replay;
    for (auto& a : acts) {
      if (i == 1) a.u += 0.4;  // and the mixed run too
    }
  }
  const RolloutRecording mixed = run_rollout(tape, scn, mc, mixed_spec);

  const TeacherLoss tl = teacher_loss(tape, cfg, scn, part, demo, mixed);
  const double expect = -cfg.w_challenge * tl.challenge + cfg.w_solvable * tl.solvable +
                        cfg.beta * (tl.realism_demo + tl.realism_mixed) +
                        cfg.lambda_dist * tl.distance;
  CHECK(tape.scalar_value(tl.total) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(tl.realism_demo > 0.0);
  CHECK(tl.realism_mixed > 0.0);
  CHECK(tl.distance > 0.0);

  const StudentLoss sl = student_loss(tape, cfg, scn, part, mixed);
  const double sexpect = sl.challenge + cfg.beta * sl.realism;
  CHECK(tape.scalar_value(sl.total) == doctest::Approx(sexpect).epsilon(1e-12));
  // Student challenge and teacher challenge read the same masked potential.
  CHECK(sl.challenge == tl.challenge);
}

TEST_CASE("rollout pairs must share their start state") {
  const Scenario scn = tiny_scenario(17, 3);
  Partition part;
  part.teacher_set = {0};
  part.student_set = {1, 2};
  part.targets = {{0, 1}};

  ad::Tape tape;
  const MapContext mc = build_map_context(tape, scn.map);
  RolloutSpec spec;
  spec.bindings.resize(3);  // all state replay
  const RolloutRecording demo = run_rollout(tape, scn, mc, spec);

  Scenario moved = scn;
  moved.history.back()[0].x += 1.0;
  moved.logged_future[0][0].x += 1.0;
  const MapContext mc2 = build_map_context(tape, moved.map);
  const RolloutRecording other = run_rollout(tape, moved, mc2, spec);

  ObjectiveConfig cfg;
  CHECK_THROWS_AS(teacher_loss(tape, cfg, scn, part, demo, other), std::invalid_argument);
}

TEST_CASE("config validation rejects bad weights") {
  ObjectiveConfig cfg;
  cfg.validate();
  cfg.beta = -0.1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ObjectiveConfig{};
  cfg.huber_delta = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ObjectiveConfig{};
  cfg.collision_buffer = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ObjectiveConfig{};
  cfg.w_challenge = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("equilibrium bound holds on hand tuples and random sweeps") {
  // A failed solve with a clean demo: the textbook certificate case.
  CHECK(lemma1_check({0.0, 1.0, 0.0, 0.0, 1.0}));
  // Zero tuple: no collisions anywhere, trivially consistent.
  CHECK(lemma1_check({0.0, 0.0, 0.0, 0.0, 1.0}));
  // Demo collides more than the mixed run: premise false, still consistent.
  CHECK(lemma1_check({2.0, 0.5, 0.3, 0.1, 0.5}));

  Rng rng(37);
  for (int trial = 0; trial < 100000; ++trial) {
    TheoryTuple t;
    t.c_t_n = rng.uniform(0.0, 5.0);
    t.c_ts_s = rng.uniform(0.0, 5.0);
    t.i_t = rng.uniform(0.0, 3.0);
    t.i_ts = rng.uniform(0.0, 3.0);
    t.beta = rng.uniform(0.01, 4.0);
    REQUIRE(lemma1_check(t));
  }

  CHECK(alpha_bound(0.5, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(alpha_bound(0.0, 0.5) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("losses are invariant to rigid motion of the whole scene") {
  const Scenario scn = tiny_scenario(41, 3);
  const Rollout log = simulate_log_replay(scn);

  const double ang = 0.7, tx = 15.0, ty = -4.0;
  const double c = std::cos(ang), s = std::sin(ang);
  auto moved_states = log.states;
  for (auto& frame : moved_states) {
    for (auto& a : frame) {
      const double nx = c * a.x - s * a.y + tx;
      const double ny = s * a.x + c * a.y + ty;
      a.x = nx;
      a.y = ny;
      a.theta = wrap_angle(a.theta + ang);
    }
  }
  const double base = collision_loss_value(log.states, pairs_all(3), 0.2);
  const double moved = collision_loss_value(moved_states, pairs_all(3), 0.2);
  CHECK(moved == doctest::Approx(base).epsilon(1e-9));

  // Relabeling actors consistently in states and mask leaves the value alone.
  auto swapped = log.states;
  for (auto& frame : swapped) std::swap(frame[0], frame[2]);
  CHECK(collision_loss_value(swapped, pairs_all(3), 0.2) ==
        doctest::Approx(base).epsilon(1e-12));
  CHECK(collision_loss_value(swapped, pairs_involving(3, {0}), 0.2) ==
        doctest::Approx(collision_loss_value(log.states, pairs_involving(3, {2}), 0.2))
            .epsilon(1e-12));
}

TEST_CASE("collision gradients match finite differences near contact") {
  // Two actors near the hinge on the active side.
  const double h = 1e-6;
  const auto eval = [&](double bx, double* grad) {
    ad::Tape tape;
    const ad::Var x = tape.leaf(Tensor::from_vector({0.0, bx}));
    const ad::Var y = tape.constant(Tensor::from_vector({0.0, 0.4}));
    const ad::Var th = tape.constant(Tensor::from_vector({0.0, 0.2}));
    const ad::Var v = tape.constant(Tensor::from_vector({0.0, 0.0}));
    const std::vector<JointState> js{{x, y, th, v}};
    const std::vector<ActorState> dims(2);
    const ad::Var loss = collision_loss(tape, js, dims, pairs_all(2), 0.2);
    const double out = tape.scalar_value(loss);
    if (grad) {
      tape.backward(loss);
      *grad = tape.grad_of(x).data[1];
    }
    return out;
  };
  double g = 0.0;
  REQUIRE(eval(4.0, &g) > 0.0);  // active hinge
  const double fd = (eval(4.0 + h, nullptr) - eval(4.0 - h, nullptr)) / (2.0 * h);
  CHECK(std::abs(g - fd) / std::max({1.0, std::abs(g), std::abs(fd)}) < 1e-6);
}

}  // TEST_SUITE
