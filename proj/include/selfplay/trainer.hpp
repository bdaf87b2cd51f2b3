#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "selfplay/objectives.hpp"
#include "selfplay/optim.hpp"
#include "selfplay/policy.hpp"
#include "selfplay/simkit.hpp"

namespace selfplay {

struct TrainConfig {
  std::string mode = "selfplay";  // selfplay | il | trafficsim | curation
  int total_steps = 2000;
  int warmup_steps = 100;
  int batch_size = 8;
  double lr_peak = 1e-4;
  double clip_norm = 10.0;
  double w_col = 0.0;        // collision prior weight for il/trafficsim
  double teacher_frac = 0.3;
  bool fairplay_three_player = true;  // separate adversary and demonstrator params
  bool fairplay_replay = true;        // coin-flipped action replay across the pair
  double curation_step_frac = 0.2;    // fine-tune budget, fraction of total_steps
  double curation_lr_frac = 0.1;      // fine-tune peak lr, fraction of lr_peak
  int king_steps = 200;
  double king_step_size = 1e-2;
  int eval_every = 200;
  int workers = 1;
  uint64_t seed = 0;
  ObjectiveConfig objective;
  PolicyConfig arch;  // shared architecture; roles are assigned per policy
  AdamWConfig adamw;
  ActionLimits limits;

  void validate() const;
};

// Flat-key JSON round trip, shared by the CLI config file, resolved_config
// dumps, and checkpoint headers.
std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

struct Checkpoint {
  uint32_t version = 1;
  int64_t step = 0;
  TrainConfig config;
  ParamStore student;
  ParamStore teacher;  // adversary params, plus demonstrator params when 3-player
  std::vector<double> opt_student_state;
  int64_t opt_student_t = 0;
  std::vector<double> opt_teacher_state;
  int64_t opt_teacher_t = 0;
  std::string data_rng;  // serialized engine states
  std::string coin_rng;
};

// Binary checkpoint file: magic "ASPT", u32 format version, u64 JSON header
// length + header (configs, tensor shapes, RNG states, step), little-endian
// f64 payload, trailing CRC32 over everything before it. Byte-stable:
// save(load(f)) == f.
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Per-iteration scalars, averaged over the batch. Teacher fields are only
// meaningful in selfplay mode.
struct IterationStats {
  double loss_teacher = 0.0;
  double loss_student = 0.0;
  double challenge = 0.0;
  double solvable = 0.0;
  double realism_demo = 0.0;
  double realism_mixed = 0.0;
};

// Training driver for all modes. One iterate() = one optimizer step on each
// trained parameter set. CSV rows follow the pinned header
// `step,loss_teacher,loss_student,challenge,solvable,realism_demo,realism_mixed,col_rate_eval`
// with teacher columns left empty outside selfplay mode and col_rate_eval
// filled only on evaluation steps.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::vector<Scenario> corpus);
  Trainer(const Checkpoint& ck, std::vector<Scenario> corpus);

  IterationStats iterate();

  // Runs to cfg.total_steps, streaming CSV rows (header included when
  // starting from step 0). eval_corpus feeds the periodic exact-collision
  // evaluation; pass nullptr to skip it.
  void train(std::ostream* csv, const std::vector<Scenario>* eval_corpus);

  // Exact collision percentage of the student controlling all actors.
  double eval_collision_pct(const std::vector<Scenario>& corpus) const;

  Checkpoint checkpoint() const;
  int64_t step() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  const ParamStore& student_params() const { return student_; }
  const ParamStore& teacher_params() const { return teacher_; }

  // Scenarios of `corpus` whose student-controls-all rollout has at least one
  // exact collision. Deterministic; an empty result is allowed.
  std::vector<Scenario> curate(const std::vector<Scenario>& corpus) const;

  // Shifts the step column of CSV rows so a fine-tune phase can continue an
  // earlier file's numbering. Not part of the checkpoint.
  void set_csv_step_offset(int64_t offset) { csv_step_offset_ = offset; }

 private:
  IterationStats iterate_selfplay();
  IterationStats iterate_il();
  void init_policies();
  // {exact collision %, mean positional realism} of the student driving all
  // actors across `corpus`.
  std::pair<double, double> eval_metrics(const std::vector<Scenario>& corpus) const;

  TrainConfig cfg_;
  std::vector<Scenario> corpus_;
  ParamStore student_;
  ParamStore teacher_;
  AdamW opt_student_;
  AdamW opt_teacher_;
  Rng data_rng_;
  Rng coin_rng_;
  int64_t step_ = 0;
  int64_t csv_step_offset_ = 0;
  PolicyConfig student_cfg_;
  PolicyConfig adversary_cfg_;
  PolicyConfig demonstrator_cfg_;
};

// Convenience: full training per cfg.mode (curation mode runs its base IL
// phase, curates, then fine-tunes). Returns the final checkpoint; CSV rows go
// to `csv` when non-null.
Checkpoint run_training(const TrainConfig& cfg, const std::vector<Scenario>& corpus,
                        std::ostream* csv, const std::vector<Scenario>* eval_corpus);

// Gradient-based per-scenario attack: the adversary set's action sequences
// are optimized open loop against the frozen policy driving everyone else,
// minimizing
//   -10 * colloss(adversary-target pairs) + distance(adversaries -> targets)
//   + realism(adversaries)
// for king_steps projected gradient steps. A repair phase then perturbs the
// remaining background actors' actions to clear their own collisions, and
// feasibility reports whether a background-collision-free completion exists.
struct KingResult {
  std::map<int, std::vector<Action>> attacked;  // adversary actor -> actions
  std::map<int, std::vector<Action>> repaired;  // background actor -> actions
  bool feasible = true;       // background actors end collision-free
  bool target_hit = false;    // some adversary strictly overlaps its target
  double loss_before = 0.0;   // challenge measure before the attack
  double loss_after = 0.0;    // and after
};
KingResult king_attack(const Scenario& scn, const PolicyConfig& policy_cfg,
                       const ParamStore& policy_params, const std::string& policy_prefix,
                       const Partition& part, const TrainConfig& cfg);

}  // namespace selfplay
