#include "selfplay/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "selfplay/log.hpp"
#include "selfplay/objectives.hpp"
#include "selfplay/support.hpp"

namespace selfplay {
namespace {

using nlohmann::json;

std::vector<int> all_actor_ids(int n) {
  std::vector<int> ids(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) ids[static_cast<size_t>(i)] = i;
  return ids;
}

// One actor's feature samples from a state sequence, into per-feature
// histograms. Velocity-derived features use finite differences over dt.
void add_actor_samples(std::array<FeatureHistogram, kNumFeatures>& h,
                       const std::vector<std::vector<ActorState>>& states, const LaneGraph& map,
                       int actor, double dt) {
  const int steps = static_cast<int>(states.size());
  const int n = static_cast<int>(states[0].size());
  for (int t = 0; t < steps; ++t) {
    const ActorState& s = states[static_cast<size_t>(t)][static_cast<size_t>(actor)];
    h[static_cast<size_t>(Feature::kSpeed)].add(s.v);
    h[static_cast<size_t>(Feature::kBoundaryDist)].add(
        dist_to_drivable_boundary(map, Vec2{s.x, s.y}));
    if (n > 1) {
      double best = std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j) {
        if (j == actor) continue;
        const ActorState& o = states[static_cast<size_t>(t)][static_cast<size_t>(j)];
        best = std::min(best, std::hypot(o.x - s.x, o.y - s.y));
      }
      h[static_cast<size_t>(Feature::kClosestActorDist)].add(best);
    }
    if (t > 0) {
      const ActorState& p = states[static_cast<size_t>(t - 1)][static_cast<size_t>(actor)];
      h[static_cast<size_t>(Feature::kAccel)].add((s.v - p.v) / dt);
      h[static_cast<size_t>(Feature::kAngularSpeed)].add(wrap_angle(s.theta - p.theta) / dt);
    }
  }
}

std::array<FeatureHistogram, kNumFeatures> fresh_histograms() {
  std::array<FeatureHistogram, kNumFeatures> h;
  for (int f = 0; f < kNumFeatures; ++f) {
    h[static_cast<size_t>(f)] = FeatureHistogram::for_feature(static_cast<Feature>(f));
  }
  return h;
}

// Open-loop action script built by forward simulation from `start`, driven by
// a per-step callback (state, t) -> Action. Stored actions are pre-clamped so
// replaying them is exact.
template <typename Fn>
std::vector<Action> bake_script(const ActorState& start, int steps, double dt,
                                const ActionLimits& lim, Fn&& decide) {
  std::vector<Action> acts;
  acts.reserve(static_cast<size_t>(steps));
  ActorState s = start;
  for (int t = 0; t < steps; ++t) {
    Action a = decide(s, t);
    a.u = std::clamp(a.u, -lim.u_max, lim.u_max);
    a.phi = std::clamp(a.phi, -lim.phi_max, lim.phi_max);
    acts.push_back(a);
    s = step(s, a, dt, lim);
  }
  return acts;
}

// Pure-pursuit steering toward the lane-0 centerline (y = 0 on a straight
// map) at a fixed lookahead.
double steer_to_centerline(const ActorState& s, double lookahead, double phi_max) {
  const double alpha = wrap_angle(std::atan2(0.0 - s.y, lookahead) - s.theta);
  const double dist = std::max(std::hypot(lookahead, s.y), 1e-6);
  return std::clamp(std::atan2(2.0 * s.wheelbase * std::sin(alpha), dist), -phi_max, phi_max);
}

}  // namespace

const char* feature_name(Feature f) {
  switch (f) {
    case Feature::kSpeed: return "linear_speed";
    case Feature::kAccel: return "linear_accel";
    case Feature::kAngularSpeed: return "angular_speed";
    case Feature::kBoundaryDist: return "dist_to_road_boundary";
    case Feature::kClosestActorDist: return "dist_to_closest_actor";
  }
  return "unknown";
}

FeatureHistogram::FeatureHistogram(double lo_, double hi_, int bins_)
    : lo(lo_), hi(hi_), bins(bins_), counts(static_cast<size_t>(bins_), 0.0) {
  if (bins_ < 1 || !(hi_ > lo_)) throw std::invalid_argument("histogram: bad bin layout");
}

FeatureHistogram FeatureHistogram::for_feature(Feature f) {
  switch (f) {
    case Feature::kSpeed: return FeatureHistogram(0.0, 40.0, 32);
    case Feature::kAccel: return FeatureHistogram(-8.0, 8.0, 32);
    case Feature::kAngularSpeed: return FeatureHistogram(-1.0, 1.0, 32);
    case Feature::kBoundaryDist: return FeatureHistogram(0.0, 10.0, 32);
    case Feature::kClosestActorDist: return FeatureHistogram(0.0, 50.0, 32);
  }
  throw std::invalid_argument("histogram: unknown feature");
}

void FeatureHistogram::add(double x) {
  if (!std::isfinite(x)) throw std::invalid_argument("histogram: non-finite sample");
  int b = static_cast<int>(std::floor((x - lo) / (hi - lo) * bins));
  b = std::clamp(b, 0, bins - 1);
  counts[static_cast<size_t>(b)] += 1.0;
}

std::vector<double> FeatureHistogram::distribution(double eps) const {
  double total = 0.0;
  for (const double c : counts) total += c;
  const double denom = total + eps * bins;
  std::vector<double> p(counts.size());
  if (denom <= 0.0) {
    std::fill(p.begin(), p.end(), 1.0 / bins);
    return p;
  }
  for (size_t i = 0; i < counts.size(); ++i) p[i] = (counts[i] + eps) / denom;
  return p;
}

double jsd(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw std::invalid_argument("jsd: length mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) acc += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) acc += 0.5 * q[i] * std::log(q[i] / m);
  }
  return acc;
}

double jsd(const FeatureHistogram& p, const FeatureHistogram& q, double eps) {
  if (p.lo != q.lo || p.hi != q.hi || p.bins != q.bins) {
    throw std::invalid_argument("jsd: histogram bin layouts differ");
  }
  return jsd(p.distribution(eps), q.distribution(eps));
}

MetricsReport metrics_from_rollouts(const std::vector<Scenario>& corpus,
                                    const std::vector<Rollout>& rollouts) {
  if (corpus.empty()) throw std::invalid_argument("metrics: empty corpus");
  if (corpus.size() != rollouts.size()) {
    throw std::invalid_argument("metrics: rollout count mismatch");
  }
  MetricsReport rep;
  rep.scenarios = static_cast<int>(corpus.size());
  int total_actors = 0;
  int collided = 0;
  int offroad = 0;
  double fde_sum = 0.0;
  std::array<double, kNumFeatures> jsd_sum{};
  int jsd_actors = 0;

  for (size_t k = 0; k < corpus.size(); ++k) {
    const Scenario& scn = corpus[k];
    const Rollout& roll = rollouts[k];
    const int n = scn.num_actors();
    const size_t last = static_cast<size_t>(scn.horizon - 1);
    if (roll.states.size() != static_cast<size_t>(scn.horizon) ||
        roll.states[0].size() != static_cast<size_t>(n)) {
      throw std::invalid_argument("metrics: rollout does not match its scenario");
    }

    ScenarioMetrics sm;
    sm.id = scn.id;
    int scn_col = 0;
    int scn_off = 0;
    double scn_fde = 0.0;
    for (int i = 0; i < n; ++i) {
      const ActorState& sim = roll.states[last][static_cast<size_t>(i)];
      const ActorState& gt = scn.logged_future[last][static_cast<size_t>(i)];
      scn_fde += std::hypot(sim.x - gt.x, sim.y - gt.y);
      scn_col += roll.collided[static_cast<size_t>(i)] != 0;
      scn_off += roll.offroad[static_cast<size_t>(i)] != 0;

      auto hs = fresh_histograms();
      auto hg = fresh_histograms();
      add_actor_samples(hs, roll.states, scn.map, i, scn.dt);
      add_actor_samples(hg, scn.logged_future, scn.map, i, scn.dt);
      for (int f = 0; f < kNumFeatures; ++f) {
        jsd_sum[static_cast<size_t>(f)] += jsd(hs[static_cast<size_t>(f)],
                                               hg[static_cast<size_t>(f)]);
      }
      ++jsd_actors;
    }
    sm.fde = scn_fde / n;
    sm.collision_pct = 100.0 * scn_col / n;
    sm.offroad_pct = 100.0 * scn_off / n;
    rep.per_scenario.push_back(std::move(sm));
    fde_sum += scn_fde;
    collided += scn_col;
    offroad += scn_off;
    total_actors += n;
  }

  rep.fde = fde_sum / total_actors;
  rep.collision_pct = 100.0 * collided / total_actors;
  rep.offroad_pct = 100.0 * offroad / total_actors;
  double comp = 0.0;
  for (int f = 0; f < kNumFeatures; ++f) {
    rep.jsd_per_feature[static_cast<size_t>(f)] = jsd_sum[static_cast<size_t>(f)] / jsd_actors;
    comp += rep.jsd_per_feature[static_cast<size_t>(f)];
  }
  rep.jsd_composite = comp / kNumFeatures;
  return rep;
}

MetricsReport evaluate(const SimPolicy& policy, const std::vector<Scenario>& corpus,
                       const ActionLimits& limits, int workers) {
  if (corpus.empty()) throw std::invalid_argument("evaluate: empty corpus");
  std::vector<Rollout> rolls(corpus.size());
  run_indexed(static_cast<int>(corpus.size()), workers, [&](int i) {
    rolls[static_cast<size_t>(i)] =
        simulate_single_policy(corpus[static_cast<size_t>(i)], policy, limits);
  });
  return metrics_from_rollouts(corpus, rolls);
}

double scripted_eval_collision_pct(const SimPolicy& policy, const std::vector<Scenario>& corpus,
                                   const ActionLimits& limits, int workers) {
  if (corpus.empty()) throw std::invalid_argument("scripted eval: empty corpus");
  const ScriptController script_ctrl;
  std::vector<int> hits(corpus.size(), 0);
  std::vector<int> driven(corpus.size(), 0);
  run_indexed(static_cast<int>(corpus.size()), workers, [&](int k) {
    const Scenario& scn = corpus[static_cast<size_t>(k)];
    const int n = scn.num_actors();
    std::vector<ActorBinding> bindings(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      if (scn.scripts.count(i) != 0) {
        bindings[static_cast<size_t>(i)].kind = BindingKind::kScripted;
        bindings[static_cast<size_t>(i)].scripted = &script_ctrl;
      } else {
        bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
        bindings[static_cast<size_t>(i)].policy_slot = 0;
      }
    }
    const Rollout r = simulate(scn, {policy}, bindings, limits);
    for (int i = 0; i < n; ++i) {
      if (scn.scripts.count(i) != 0) continue;
      driven[static_cast<size_t>(k)] += 1;
      hits[static_cast<size_t>(k)] += r.collided[static_cast<size_t>(i)] != 0;
    }
  });
  int total_hits = 0;
  int total_driven = 0;
  for (size_t k = 0; k < corpus.size(); ++k) {
    total_hits += hits[k];
    total_driven += driven[k];
  }
  return total_driven > 0 ? 100.0 * total_hits / total_driven : 0.0;
}

std::vector<Scenario> gen_safety_corpus(int scenarios, uint64_t seed) {
  if (scenarios < 1) throw std::invalid_argument("safety corpus: need at least one scenario");
  const char* kinds[] = {"cut_in", "hard_brake", "stopped_lead"};
  const ActionLimits lim;
  const double dt = dt_default();
  const int horizon = 12;
  const int steps = horizon - 1;
  const int hist = 3;

  std::vector<Scenario> out;
  out.reserve(static_cast<size_t>(scenarios));
  for (int idx = 0; idx < scenarios; ++idx) {
    const std::string kind = kinds[idx % 3];
    Rng rng(stream_seed(seed, "safety/" + std::to_string(idx)));

    HighwayMapSpec ms;
    ms.lanes = 2;
    ms.length = 200.0;
    ms.curvature = 0.0;
    ms.node_spacing = 10.0;
    ms.seed = stream_seed(seed, "safety_map/" + std::to_string(idx));

    Scenario scn;
    scn.id = "safety_" + kind + "_" + std::to_string(idx);
    scn.map = build_highway_map(ms);
    scn.horizon = horizon;
    scn.dt = dt;

    auto make_actor = [&](double station, double lane, double v) {
      ActorState s;
      const Pose p = highway_arc_pose(ms, station, lane * ms.lane_width);
      s.x = p.x;
      s.y = p.y;
      s.theta = p.heading;
      s.v = v;
      s.length = rng.uniform(4.0, 4.5);
      s.width = rng.uniform(1.95, 2.1);
      s.wheelbase = 0.62 * s.length;
      return s;
    };

    const double ego_v = rng.uniform(12.0, 18.0);
    const double ego_s = rng.uniform(25.0, 35.0);
    std::vector<ActorState> start;
    start.push_back(make_actor(ego_s, 0.0, ego_v));

    ActorState hazard;
    std::vector<Action> hazard_script;
    if (kind == "cut_in") {
      hazard = make_actor(ego_s + rng.uniform(8.0, 14.0), 1.0, ego_v - rng.uniform(0.0, 2.0));
      hazard_script = bake_script(hazard, steps, dt, lim, [&](const ActorState& s, int t) {
        Action a;
        if (t >= 2) {
          a.phi = steer_to_centerline(s, 8.0, lim.phi_max);
          a.u = -0.5;
        }
        return a;
      });
    } else if (kind == "hard_brake") {
      hazard = make_actor(ego_s + rng.uniform(15.0, 25.0), 0.0, ego_v + rng.uniform(0.0, 3.0));
      hazard_script = bake_script(hazard, steps, dt, lim, [&](const ActorState& s, int t) {
        Action a;
        if (t >= 2) a.u = std::max(-lim.u_max, -s.v / dt);
        return a;
      });
    } else {
      hazard = make_actor(ego_s + rng.uniform(30.0, 45.0), 0.0, 0.0);
      hazard_script = bake_script(hazard, steps, dt, lim,
                                  [](const ActorState&, int) { return Action{}; });
    }
    start.push_back(hazard);

    // One unremarkable background actor holding the other lane.
    const ActorState background =
        make_actor(ego_s - rng.uniform(15.0, 25.0), 1.0, rng.uniform(13.0, 17.0));
    start.push_back(background);
    const std::vector<Action> background_script =
        bake_script(background, steps, dt, lim, [](const ActorState&, int) { return Action{}; });

    const int n = static_cast<int>(start.size());

    // History: straight constant-speed extrapolation backwards.
    scn.history.assign(static_cast<size_t>(hist), start);
    for (int k = 0; k < hist - 1; ++k) {
      const double back = dt * (hist - 1 - k);
      for (int i = 0; i < n; ++i) {
        ActorState& s = scn.history[static_cast<size_t>(k)][static_cast<size_t>(i)];
        s.x -= s.v * back * std::cos(s.theta);
        s.y -= s.v * back * std::sin(s.theta);
      }
    }

    // Log: ego holds its lane and speed, the others follow their scripts.
    scn.scripts[1] = ActorScript{kind, hazard_script};
    scn.scripts[2] = ActorScript{"constant", background_script};
    scn.logged_future.assign(1, start);
    scn.logged_actions.clear();
    for (int t = 0; t < steps; ++t) {
      const std::vector<ActorState>& cur = scn.logged_future.back();
      std::vector<Action> row(static_cast<size_t>(n));
      const ActorState& ego = cur[0];
      row[0].u = std::clamp(1.0 * (ego_v - ego.v), -lim.u_max, lim.u_max);
      row[0].phi = steer_to_centerline(ego, std::max(6.0, ego.v), lim.phi_max);
      row[1] = hazard_script[static_cast<size_t>(t)];
      row[2] = background_script[static_cast<size_t>(t)];
      std::vector<ActorState> nxt(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) {
        nxt[static_cast<size_t>(i)] =
            step(cur[static_cast<size_t>(i)], row[static_cast<size_t>(i)], dt, lim);
      }
      scn.logged_actions.push_back(std::move(row));
      scn.logged_future.push_back(std::move(nxt));
    }

    scn.validate();
    out.push_back(std::move(scn));
  }
  return out;
}

std::vector<Scenario> build_adversarial_set(const std::vector<Scenario>& corpus,
                                            const PolicyConfig& ref_cfg,
                                            const ParamStore& ref_params,
                                            const std::string& ref_prefix,
                                            const TrainConfig& cfg) {
  if (corpus.empty()) throw std::invalid_argument("adversarial set: empty corpus");
  std::vector<Scenario> out(corpus.size());
  run_indexed(static_cast<int>(corpus.size()), cfg.workers, [&](int i) {
    const Scenario& scn = corpus[static_cast<size_t>(i)];
    Rng rng(stream_seed(cfg.seed, "advset/" + std::to_string(i)));
    const Partition part = sample_partition(scn.num_actors(), rng, cfg.teacher_frac);
    const KingResult kr = king_attack(scn, ref_cfg, ref_params, ref_prefix, part, cfg);
    Scenario adv = scn;
    adv.id = scn.id + "_adv";
    for (const auto& [actor, acts] : kr.attacked) {
      adv.scripts[actor] = ActorScript{"adversarial", acts};
    }
    adv.validate();
    out[static_cast<size_t>(i)] = std::move(adv);
  });
  return out;
}

ZeroShotReport zero_shot_attack_eval(const Checkpoint& teacher_ck,
                                     const ScriptedController& external,
                                     const std::vector<Scenario>& corpus, int ego) {
  if (corpus.empty()) throw std::invalid_argument("zero-shot eval: empty corpus");
  if (teacher_ck.teacher.count() == 0) {
    throw std::invalid_argument("zero-shot eval: checkpoint has no proposer parameters");
  }
  const TrainConfig& cfg = teacher_ck.config;
  PolicyConfig adv_cfg = cfg.arch;
  adv_cfg.role = Role::kTeacherAdversary;
  PolicyConfig demo_cfg = cfg.arch;
  demo_cfg.role =
      cfg.fairplay_three_player ? Role::kTeacherDemonstrator : Role::kTeacherAdversary;
  const std::string demo_prefix = cfg.fairplay_three_player ? "demo" : "adversary";

  ZeroShotReport rep;
  rep.outcomes.resize(corpus.size());
  run_indexed(static_cast<int>(corpus.size()), cfg.workers, [&](int idx) {
    const Scenario& scn = corpus[static_cast<size_t>(idx)];
    const int n = scn.num_actors();
    if (ego < 0 || ego >= n) throw std::invalid_argument("zero-shot eval: ego out of range");

    Rng rng(stream_seed(cfg.seed, "zeroshot/" + std::to_string(idx)));
    Partition part = sample_partition(n, rng, cfg.teacher_frac);
    if (part.is_teacher(ego)) {
      part.teacher_set.erase(
          std::find(part.teacher_set.begin(), part.teacher_set.end(), ego));
      part.student_set.insert(
          std::lower_bound(part.student_set.begin(), part.student_set.end(), ego), ego);
      if (part.teacher_set.empty()) {
        for (const int i : part.student_set) {
          if (i == ego) continue;
          part.student_set.erase(
              std::find(part.student_set.begin(), part.student_set.end(), i));
          part.teacher_set.push_back(i);
          break;
        }
      }
    }
    part.targets.clear();
    for (const int a : part.teacher_set) part.targets[a] = ego;
    part.validate(n);
    if (part.is_teacher(ego)) throw std::logic_error("zero-shot eval: ego on the proposer side");
    for (const auto& [a, t] : part.targets) {
      if (t != ego) throw std::logic_error("zero-shot eval: adversary not aimed at the ego");
    }

    const std::vector<SimPolicy> pols = {
        SimPolicy{adv_cfg, &teacher_ck.teacher, "adversary", part.target_assignment()},
        SimPolicy{demo_cfg, &teacher_ck.teacher, demo_prefix, {}},
    };
    std::vector<ActorBinding> bindings(static_cast<size_t>(n));
    for (const int i : part.teacher_set) {
      bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
      bindings[static_cast<size_t>(i)].policy_slot = 0;
    }
    for (const int i : part.student_set) {
      if (i == ego) {
        bindings[static_cast<size_t>(i)].kind = BindingKind::kScripted;
        bindings[static_cast<size_t>(i)].scripted = &external;
      } else {
        bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
        bindings[static_cast<size_t>(i)].policy_slot = 1;
      }
    }
    const Rollout r = simulate(scn, pols, bindings, cfg.limits);
    ZeroShotOutcome& o = rep.outcomes[static_cast<size_t>(idx)];
    o.id = scn.id;
    o.ego_collided = r.collided[static_cast<size_t>(ego)] != 0;
    o.realism =
        realism_value(r.states, scn, all_actor_ids(n), cfg.objective.huber_delta);
  });

  int hits = 0;
  double realism_sum = 0.0;
  for (const ZeroShotOutcome& o : rep.outcomes) {
    hits += o.ego_collided;
    realism_sum += o.realism;
  }
  rep.ego_collision_pct = 100.0 * hits / static_cast<double>(rep.outcomes.size());
  rep.realism = realism_sum / static_cast<double>(rep.outcomes.size());
  return rep;
}

ParetoReport pareto_table(const std::vector<ParetoPoint>& sweep, const ParetoPoint& selfplay) {
  if (sweep.size() < 2) throw std::invalid_argument("pareto: need at least two sweep points");
  ParetoReport rep;
  rep.sweep = sweep;
  rep.selfplay = selfplay;
  rep.selfplay_dominated = false;
  for (const ParetoPoint& p : sweep) {
    if (p.nominal_collision_pct < selfplay.nominal_collision_pct &&
        p.safety_collision_pct < selfplay.safety_collision_pct) {
      rep.selfplay_dominated = true;
    }
  }
  return rep;
}

std::string metrics_to_json(const MetricsReport& r) {
  json j;
  j["fde"] = r.fde;
  j["collision_pct"] = r.collision_pct;
  j["offroad_pct"] = r.offroad_pct;
  j["jsd_composite"] = r.jsd_composite;
  json feats = json::object();
  for (int f = 0; f < kNumFeatures; ++f) {
    feats[feature_name(static_cast<Feature>(f))] = r.jsd_per_feature[static_cast<size_t>(f)];
  }
  j["jsd_per_feature"] = feats;
  j["scenarios"] = r.scenarios;
  json rows = json::array();
  for (const ScenarioMetrics& sm : r.per_scenario) {
    rows.push_back({{"id", sm.id},
                    {"fde", sm.fde},
                    {"collision_pct", sm.collision_pct},
                    {"offroad_pct", sm.offroad_pct}});
  }
  j["per_scenario"] = rows;
  return j.dump(2);
}

std::string metrics_to_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << "id,fde,collision_pct,offroad_pct\n";
  for (const ScenarioMetrics& sm : r.per_scenario) {
    os << sm.id << ',' << fmt_shortest(sm.fde) << ',' << fmt_shortest(sm.collision_pct) << ','
       << fmt_shortest(sm.offroad_pct) << '\n';
  }
  os << "ALL," << fmt_shortest(r.fde) << ',' << fmt_shortest(r.collision_pct) << ','
     << fmt_shortest(r.offroad_pct) << '\n';
  return os.str();
}

std::string pareto_to_json(const ParetoReport& r) {
  json j;
  json rows = json::array();
  for (const ParetoPoint& p : r.sweep) {
    rows.push_back({{"w_col", p.w_col},
                    {"nominal_collision_pct", p.nominal_collision_pct},
                    {"safety_collision_pct", p.safety_collision_pct}});
  }
  j["sweep"] = rows;
  j["selfplay"] = {{"w_col", r.selfplay.w_col},
                   {"nominal_collision_pct", r.selfplay.nominal_collision_pct},
                   {"safety_collision_pct", r.selfplay.safety_collision_pct}};
  j["selfplay_dominated"] = r.selfplay_dominated;
  return j.dump(2);
}

std::string pareto_to_csv(const ParetoReport& r) {
  std::ostringstream os;
  os << "label,w_col,nominal_collision_pct,safety_collision_pct\n";
  for (size_t i = 0; i < r.sweep.size(); ++i) {
    const ParetoPoint& p = r.sweep[i];
    os << "sweep_" << i << ',' << fmt_shortest(p.w_col) << ','
       << fmt_shortest(p.nominal_collision_pct) << ',' << fmt_shortest(p.safety_collision_pct)
       << '\n';
  }
  os << "selfplay," << fmt_shortest(r.selfplay.w_col) << ','
     << fmt_shortest(r.selfplay.nominal_collision_pct) << ','
     << fmt_shortest(r.selfplay.safety_collision_pct) << '\n';
  return os.str();
}

}  // namespace selfplay
