#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "selfplay/simkit.hpp"
#include "selfplay/trainer.hpp"

namespace selfplay {

// The five per-actor realism features.
enum class Feature {
  kSpeed = 0,
  kAccel,
  kAngularSpeed,
  kBoundaryDist,
  kClosestActorDist,
};
inline constexpr int kNumFeatures = 5;
const char* feature_name(Feature f);

// Fixed-range histogram; samples beyond the range land in the edge bins.
struct FeatureHistogram {
  double lo = 0.0;
  double hi = 1.0;
  int bins = 32;
  std::vector<double> counts;

  FeatureHistogram() = default;
  FeatureHistogram(double lo, double hi, int bins);
  // Pinned per-feature ranges: speed [0,40] m/s, accel [-8,8] m/s^2, angular
  // speed [-1,1] rad/s, boundary distance [0,10] m, closest actor [0,50] m,
  // 32 bins each.
  static FeatureHistogram for_feature(Feature f);

  void add(double x);
  // Add-eps smoothed probabilities; sums to 1 even with no samples.
  std::vector<double> distribution(double eps = 1e-9) const;
};

// Jensen-Shannon divergence in nats: 0.5*KL(p||m) + 0.5*KL(q||m), m=(p+q)/2,
// natural log. Same-length probability vectors; zero bins contribute zero.
double jsd(const std::vector<double>& p, const std::vector<double>& q);
// Histogram form; throws std::invalid_argument when bin layouts differ.
double jsd(const FeatureHistogram& p, const FeatureHistogram& q, double eps = 1e-9);

struct ScenarioMetrics {
  std::string id;
  double fde = 0.0;
  double collision_pct = 0.0;
  double offroad_pct = 0.0;
};

struct MetricsReport {
  double fde = 0.0;            // mean final-step displacement, meters
  double collision_pct = 0.0;  // % of actors with a strict box overlap
  double offroad_pct = 0.0;    // % of actors leaving the drivable area
  double jsd_composite = 0.0;  // mean of the per-feature divergences
  std::array<double, kNumFeatures> jsd_per_feature{};
  int scenarios = 0;
  std::vector<ScenarioMetrics> per_scenario;
};

// Metrics of precomputed rollouts against their scenarios' logs; rollouts[i]
// must come from corpus[i]. Collision and offroad flags are taken from the
// rollouts (same detectors the objectives use); FDE compares final rear-axle
// positions; divergences use per-actor histograms, one JSD per actor and
// feature, averaged afterwards.
MetricsReport metrics_from_rollouts(const std::vector<Scenario>& corpus,
                                    const std::vector<Rollout>& rollouts);

// The policy drives every actor of every scenario.
MetricsReport evaluate(const SimPolicy& policy, const std::vector<Scenario>& corpus,
                       const ActionLimits& limits = {}, int workers = 1);

// The policy drives the unscripted actors while scripted actors replay their
// stored scripts. Returns the collision percentage over the policy-driven
// actors only: the safety-style and adversarial-set measure.
double scripted_eval_collision_pct(const SimPolicy& policy, const std::vector<Scenario>& corpus,
                                   const ActionLimits& limits = {}, int workers = 1);

// Out-of-distribution safety-style set: the ego (actor 0) meets scripted
// cut-in, hard-brake, and stopped-lead situations that never occur in
// training corpora. Non-ego actors carry open-loop scripts.
std::vector<Scenario> gen_safety_corpus(int scenarios, uint64_t seed);

// Attacks every scenario with the gradient-based adversary against a frozen
// reference policy and bakes the attacked adversary actions in as scripts,
// yielding one fixed adversarial evaluation set shared across methods.
std::vector<Scenario> build_adversarial_set(const std::vector<Scenario>& corpus,
                                            const PolicyConfig& ref_cfg,
                                            const ParamStore& ref_params,
                                            const std::string& ref_prefix,
                                            const TrainConfig& cfg);

struct ZeroShotOutcome {
  std::string id;
  bool ego_collided = false;
  double realism = 0.0;
};

struct ZeroShotReport {
  double ego_collision_pct = 0.0;  // % of scenarios whose ego collided
  double realism = 0.0;            // mean positional realism over scenarios
  std::vector<ZeroShotOutcome> outcomes;
};

// Zero-shot attack transfer: in each scenario one ego actor is driven by an
// external controller, every proposer adversary targets the ego, and the
// remaining actors are driven by the proposer's demonstrator. The checkpoint
// must hold proposer parameters.
ZeroShotReport zero_shot_attack_eval(const Checkpoint& teacher_ck,
                                     const ScriptedController& external,
                                     const std::vector<Scenario>& corpus, int ego = 0);

struct ParetoPoint {
  double w_col = 0.0;
  double nominal_collision_pct = 0.0;
  double safety_collision_pct = 0.0;
};

struct ParetoReport {
  std::vector<ParetoPoint> sweep;
  ParetoPoint selfplay;
  bool selfplay_dominated = false;
};

// Collision trade-off table: the self-play point is dominated when some sweep
// point beats it strictly on both axes. Requires at least two sweep points.
ParetoReport pareto_table(const std::vector<ParetoPoint>& sweep, const ParetoPoint& selfplay);

std::string metrics_to_json(const MetricsReport& r);
std::string metrics_to_csv(const MetricsReport& r);  // per-scenario rows + total
std::string pareto_to_json(const ParetoReport& r);
std::string pareto_to_csv(const ParetoReport& r);

}  // namespace selfplay
