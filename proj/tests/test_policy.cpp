#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "selfplay/dynamics.hpp"
#include "selfplay/params.hpp"
#include "selfplay/policy.hpp"
#include "selfplay/rng.hpp"
#include "selfplay/scenegraph.hpp"

using namespace selfplay;

namespace {

using Frames = std::vector<std::vector<ActorState>>;  // [H][N], oldest first

// Scene with mild per-step steering so the history is not degenerate.
Frames random_frames(Rng& rng, int n, int h) {
  std::vector<ActorState> cur;
  for (int i = 0; i < n; ++i) {
    ActorState s;
    s.x = rng.uniform(10.0, 150.0);
    s.y = rng.uniform(0.0, 7.4);
    s.theta = rng.uniform(-0.3, 0.3);
    s.v = rng.uniform(3.0, 15.0);
    cur.push_back(s);
  }
  Frames frames{cur};
  for (int t = 1; t < h; ++t) {
    for (auto& s : cur) s = step(s, {rng.uniform(-2.0, 2.0), rng.uniform(-0.1, 0.1)}, 0.5);
    frames.push_back(cur);
  }
  return frames;
}

struct ForwardResult {
  Tensor features;
  Tensor actions;
  Tensor map_feats;
};

ForwardResult run_forward(const LaneGraph& graph, const Frames& frames, const ParamStore& store,
                          const PolicyConfig& cfg, const std::string& prefix,
                          const TargetAssignment& targets = {}) {
  ad::Tape tape;
  const MountedParams mp(tape, store, false);
  const MapContext mc = build_map_context(tape, graph);

  const size_t n = frames[0].size();
  std::vector<JointState> hist;
  for (const auto& frame : frames) {
    std::vector<double> x, y, th, v;
    for (const ActorState& s : frame) {
      x.push_back(s.x);
      y.push_back(s.y);
      th.push_back(s.theta);
      v.push_back(s.v);
    }
    hist.push_back({tape.constant(Tensor::from_vector(x)), tape.constant(Tensor::from_vector(y)),
                    tape.constant(Tensor::from_vector(th)),
                    tape.constant(Tensor::from_vector(v))});
  }
  std::vector<double> len(n), wid(n);
  for (size_t i = 0; i < n; ++i) {
    len[i] = frames[0][i].length;
    wid[i] = frames[0][i].width;
  }
  const StepGeometry geom =
      build_step_geometry(tape, hist, tape.constant(Tensor::from_vector(len)),
                          tape.constant(Tensor::from_vector(wid)), mc, cfg.knn_k);
  const ad::Var mf = encode_map(tape, cfg, mp, prefix, mc);
  const PolicyOutput out = policy_forward(tape, cfg, mp, prefix, mf, geom, targets, {});
  return {tape.value(out.features), tape.value(out.actions), tape.value(mf)};
}

LaneGraph transformed_graph(const LaneGraph& g, double ang, double tx, double ty) {
  const double c = std::cos(ang), s = std::sin(ang);
  const auto move = [&](Vec2 p) { return Vec2{c * p.x - s * p.y + tx, s * p.x + c * p.y + ty}; };
  LaneGraph out = g;
  for (auto& n : out.nodes) {
    n.position = move(n.position);
    n.heading = wrap_angle(n.heading + ang);
  }
  for (auto& poly : out.drivable_polygons) {
    for (auto& p : poly) p = move(p);
  }
  return out;
}

Frames transformed_frames(const Frames& frames, double ang, double tx, double ty) {
  const double c = std::cos(ang), s = std::sin(ang);
  Frames out = frames;
  for (auto& frame : out) {
    for (auto& a : frame) {
      const double nx = c * a.x - s * a.y + tx;
      const double ny = s * a.x + c * a.y + ty;
      a.x = nx;
      a.y = ny;
      a.theta = wrap_angle(a.theta + ang);
    }
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST_SUITE("policy") {

TEST_CASE("parameter creation is deterministic and role-scoped") {
  PolicyConfig cfg;
  ParamStore a, b, c;
  make_policy_params(cfg, "pi", 7, a);
  make_policy_params(cfg, "pi", 7, b);
  CHECK(a.equals(b));
  make_policy_params(cfg, "pi", 8, c);
  CHECK_FALSE(a.equals(c));

  CHECK_FALSE(a.has("pi/target/embed"));
  PolicyConfig adv = cfg;
  adv.role = Role::kTeacherAdversary;
  ParamStore d;
  make_policy_params(adv, "adv", 7, d);
  CHECK(d.has("adv/target/embed"));
  CHECK(d.has("adv/target/w1"));
  CHECK(d.count() == a.count() + 5);

  // Shared names draw from per-name substreams: identical across roles.
  ParamStore e;
  make_policy_params(adv, "pi", 7, e);
  for (const auto& name : a.names()) {
    REQUIRE(e.has(name));
    const Tensor& ta = a.get(name);
    const Tensor& te = e.get(name);
    REQUIRE(ta.data == te.data);
  }

  // Default init zeroes the last head layer; probing mode fills it.
  const Tensor& w3 = a.get("pi/head/w3");
  CHECK(*std::max_element(w3.data.begin(), w3.data.end()) == 0.0);
  ParamStore f;
  make_policy_params(cfg, "pi", 7, f, false);
  double mx = 0.0;
  for (const double v : f.get("pi/head/w3").data) mx = std::max(mx, std::abs(v));
  CHECK(mx > 0.0);
}

TEST_CASE("architecture comparison ignores the role") {
  PolicyConfig a, b;
  b.role = Role::kTeacherDemonstrator;
  CHECK(architecture_equal(a, b));
  b.hidden_dim = 16;
  CHECK_FALSE(architecture_equal(a, b));
  b = a;
  b.history_len = 5;
  CHECK_FALSE(architecture_equal(a, b));
}

TEST_CASE("config validation rejects bad dimensions") {
  PolicyConfig cfg;
  cfg.hidden_dim = 30;  // not divisible by num_heads=2? 30 is; pick odd
  cfg.num_heads = 4;    // 30 % 4 != 0
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = PolicyConfig{};
  cfg.num_blocks = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = PolicyConfig{};
  cfg.history_len = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = PolicyConfig{};
  cfg.knn_k = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("zero action head coasts exactly") {
  const LaneGraph g = build_highway_map(HighwayMapSpec{});
  Rng rng(11);
  const Frames frames = random_frames(rng, 4, 3);
  PolicyConfig cfg;
  ParamStore store;
  make_policy_params(cfg, "pi", 3, store);
  const ForwardResult out = run_forward(g, frames, store, cfg, "pi");
  REQUIRE(out.actions.shape == std::vector<int>{4, 2});
  for (const double a : out.actions.data) REQUIRE(a == 0.0);
}

TEST_CASE("actions stay strictly inside the limits") {
  const LaneGraph g = build_highway_map(HighwayMapSpec{});
  Rng rng(12);
  const Frames frames = random_frames(rng, 6, 3);
  PolicyConfig cfg;
  ParamStore store;
  make_policy_params(cfg, "pi", 21, store, false);
  const ForwardResult out = run_forward(g, frames, store, cfg, "pi");
  for (int i = 0; i < 6; ++i) {
    REQUIRE(std::abs(out.actions.at(i, 0)) < 6.0);
    REQUIRE(std::abs(out.actions.at(i, 1)) < 0.5);
    REQUIRE(std::isfinite(out.features.at(i, 0)));
  }
}

TEST_CASE("rigid transforms of the whole scene leave actions unchanged") {
  HighwayMapSpec spec;
  spec.curvature = 0.004;
  const LaneGraph g = build_highway_map(spec);
  Rng rng(13);
  const Frames frames = random_frames(rng, 5, 3);
  PolicyConfig cfg;
  ParamStore store;
  make_policy_params(cfg, "pi", 5, store, false);

  const ForwardResult base = run_forward(g, frames, store, cfg, "pi");

  const ForwardResult shifted = run_forward(transformed_graph(g, 0.0, 37.5, -12.25),
                                            transformed_frames(frames, 0.0, 37.5, -12.25), store,
                                            cfg, "pi");
  CHECK(max_abs_diff(base.actions, shifted.actions) < 1e-9);
  CHECK(max_abs_diff(base.features, shifted.features) < 1e-9);
  CHECK(max_abs_diff(base.map_feats, shifted.map_feats) < 1e-9);

  const ForwardResult rotated = run_forward(transformed_graph(g, 1.0, -20.0, 8.0),
                                            transformed_frames(frames, 1.0, -20.0, 8.0), store,
                                            cfg, "pi");
  CHECK(max_abs_diff(base.actions, rotated.actions) < 1e-8);
  CHECK(max_abs_diff(base.features, rotated.features) < 1e-8);
}

TEST_CASE("permuting actor order permutes the outputs") {
  const LaneGraph g = build_highway_map(HighwayMapSpec{});
  Rng rng(14);
  const Frames frames = random_frames(rng, 5, 3);
  PolicyConfig cfg;
  ParamStore store;
  make_policy_params(cfg, "pi", 9, store, false);

  const std::vector<int> perm{3, 0, 4, 1, 2};
  Frames shuffled = frames;
  for (size_t t = 0; t < frames.size(); ++t) {
    for (size_t i = 0; i < perm.size(); ++i) {
      shuffled[t][i] = frames[t][static_cast<size_t>(perm[i])];
    }
  }

  const ForwardResult base = run_forward(g, frames, store, cfg, "pi");
  const ForwardResult mixed = run_forward(g, shuffled, store, cfg, "pi");
  for (size_t i = 0; i < perm.size(); ++i) {
    const int src = perm[i];
    for (int c = 0; c < 2; ++c) {
      REQUIRE(std::abs(mixed.actions.at(static_cast<int>(i), c) - base.actions.at(src, c)) <
              1e-9);
    }
  }
}

TEST_CASE("degenerate scenes still work") {
  const LaneGraph g = build_highway_map(HighwayMapSpec{});
  Rng rng(15);
  PolicyConfig cfg;
  ParamStore store;
  make_policy_params(cfg, "pi", 4, store, false);

  const Frames solo = random_frames(rng, 1, 3);
  const ForwardResult one = run_forward(g, solo, store, cfg, "pi");
  for (const double v : one.actions.data) REQUIRE(std::isfinite(v));

  PolicyConfig short_cfg = cfg;
  short_cfg.history_len = 1;
  ParamStore store1;
  make_policy_params(short_cfg, "pi", 4, store1, false);
  const Frames brief = random_frames(rng, 3, 1);
  const ForwardResult h1 = run_forward(g, brief, store1, short_cfg, "pi");
  for (const double v : h1.actions.data) REQUIRE(std::isfinite(v));
}

TEST_CASE("target conditioning is gated by role and touches only the adversary rows") {
  const LaneGraph g = build_highway_map(HighwayMapSpec{});
  Rng rng(16);
  const Frames frames = random_frames(rng, 5, 3);

  PolicyConfig adv;
  adv.role = Role::kTeacherAdversary;
  ParamStore store;
  make_policy_params(adv, "pi", 6, store, false);

  const ForwardResult plain = run_forward(g, frames, store, adv, "pi", {});
  const ForwardResult cond = run_forward(g, frames, store, adv, "pi", {{1, 3}, {4, 0}});

  for (int i = 0; i < 5; ++i) {
    const bool is_adv = (i == 1 || i == 4);
    double dact = 0.0, dfeat = 0.0;
    for (int c = 0; c < 2; ++c) dact = std::max(dact, std::abs(cond.actions.at(i, c) - plain.actions.at(i, c)));
    for (int c = 0; c < plain.features.shape[1]; ++c) {
      dfeat = std::max(dfeat, std::abs(cond.features.at(i, c) - plain.features.at(i, c)));
    }
    if (is_adv) {
      REQUIRE(dact > 0.0);
    } else {
      // Non-adversary rows pass through bitwise untouched.
      REQUIRE(dact == 0.0);
      REQUIRE(dfeat == 0.0);
    }
  }

  // Student role carries no target parameters and ignores assignments.
  PolicyConfig stu;
  ParamStore sstore;
  make_policy_params(stu, "pi", 6, sstore, false);
  const ForwardResult sp = run_forward(g, frames, sstore, stu, "pi", {});
  const ForwardResult st = run_forward(g, frames, sstore, stu, "pi", {{1, 3}});
  CHECK(max_abs_diff(sp.actions, st.actions) == 0.0);

  // Adversary backbone with no assignment matches the student bitwise.
  const ForwardResult adv_plain = run_forward(g, frames, store, adv, "pi", {});
  CHECK(max_abs_diff(sp.actions, adv_plain.actions) == 0.0);

  CHECK_THROWS_AS(run_forward(g, frames, store, adv, "pi", {{0, 99}}), std::out_of_range);
  CHECK_THROWS_AS(run_forward(g, frames, store, adv, "pi", {{-1, 2}}), std::out_of_range);
}

TEST_CASE("stationary history collapses to repeated encoder rows") {
  const LaneGraph g = build_highway_map(HighwayMapSpec{});
  ActorState s;
  s.x = 40.0;
  s.y = 3.7;
  s.v = 5.0;
  const Frames frames{{s}, {s}, {s}};

  ad::Tape tape;
  const MapContext mc = build_map_context(tape, g);
  std::vector<JointState> hist;
  for (int t = 0; t < 3; ++t) {
    hist.push_back({tape.constant(Tensor::from_vector({s.x})),
                    tape.constant(Tensor::from_vector({s.y})),
                    tape.constant(Tensor::from_vector({s.theta})),
                    tape.constant(Tensor::from_vector({s.v}))});
  }
  const StepGeometry geom = build_step_geometry(
      tape, hist, tape.constant(Tensor::from_vector({s.length})),
      tape.constant(Tensor::from_vector({s.width})), mc, 8);
  const Tensor& hf = tape.value(geom.hist_feat);
  REQUIRE(hf.shape == std::vector<int>{3, 8});
  for (int t = 1; t < 3; ++t) {
    for (int c = 0; c < 8; ++c) REQUIRE(hf.at(t, c) == hf.at(0, c));
  }
}

TEST_CASE("every parameter influences the actions") {
  const LaneGraph g = build_highway_map(HighwayMapSpec{});
  Rng rng(17);
  const Frames frames = random_frames(rng, 4, 3);
  PolicyConfig adv;
  adv.role = Role::kTeacherAdversary;
  ParamStore store;
  make_policy_params(adv, "pi", 30, store, false);

  std::map<std::string, Tensor> grads;
  record_and_grad(store,
                  [&](ad::Tape& tape, const MountedParams& mp) {
                    const MapContext mc = build_map_context(tape, g);
                    std::vector<JointState> hist;
                    for (const auto& frame : frames) {
                      std::vector<double> x, y, th, v;
                      for (const ActorState& a : frame) {
                        x.push_back(a.x);
                        y.push_back(a.y);
                        th.push_back(a.theta);
                        v.push_back(a.v);
                      }
                      hist.push_back({tape.constant(Tensor::from_vector(x)),
                                      tape.constant(Tensor::from_vector(y)),
                                      tape.constant(Tensor::from_vector(th)),
                                      tape.constant(Tensor::from_vector(v))});
                    }
                    std::vector<double> len(4, 4.5), wid(4, 2.0);
                    const StepGeometry geom = build_step_geometry(
                        tape, hist, tape.constant(Tensor::from_vector(len)),
                        tape.constant(Tensor::from_vector(wid)), mc, adv.knn_k);
                    const ad::Var mf = encode_map(tape, adv, mp, "pi", mc);
                    const PolicyOutput out =
                        policy_forward(tape, adv, mp, "pi", mf, geom, {{2, 0}}, {});
                    return ad::sum_all(out.actions);
                  },
                  grads);

  for (const auto& name : store.names()) {
    double mx = 0.0;
    for (const double v : grads.at(name).data) mx = std::max(mx, std::abs(v));
    INFO("parameter ", name);
    REQUIRE(mx > 0.0);
  }
}

}  // TEST_SUITE
