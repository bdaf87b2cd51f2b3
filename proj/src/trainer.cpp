#include "selfplay/trainer.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "selfplay/geom.hpp"
#include "selfplay/log.hpp"
#include "selfplay/support.hpp"

namespace selfplay {
namespace {

using nlohmann::json;

std::vector<int> all_actor_ids(int n) {
  std::vector<int> ids(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) ids[static_cast<size_t>(i)] = i;
  return ids;
}

std::vector<Action> action_column(const std::vector<std::vector<Action>>& actions, int actor) {
  std::vector<Action> out(actions.size());
  for (size_t t = 0; t < actions.size(); ++t) out[t] = actions[t][static_cast<size_t>(actor)];
  return out;
}

bool same_states(const Rollout& a, const Rollout& b) {
  if (a.states.size() != b.states.size()) return false;
  for (size_t t = 0; t < a.states.size(); ++t) {
    if (a.states[t].size() != b.states[t].size()) return false;
    for (size_t i = 0; i < a.states[t].size(); ++i) {
      const ActorState& p = a.states[t][i];
      const ActorState& q = b.states[t][i];
      if (p.x != q.x || p.y != q.y || p.theta != q.theta || p.v != q.v) return false;
    }
  }
  return true;
}

// Everything a worker needs to process one scenario. Stores are read-only
// while workers run.
struct PolicySetup {
  const TrainConfig* cfg = nullptr;
  const ParamStore* student = nullptr;
  const ParamStore* teacher = nullptr;
  const PolicyConfig* student_cfg = nullptr;
  const PolicyConfig* adversary_cfg = nullptr;
  const PolicyConfig* demo_cfg = nullptr;
  std::string demo_prefix;
};

struct ScenGrads {
  std::map<std::string, Tensor> teacher;
  std::map<std::string, Tensor> student;
  IterationStats stats;
};

void add_into(std::map<std::string, Tensor>& acc, const std::map<std::string, Tensor>& g) {
  for (const auto& [name, t] : g) {
    auto it = acc.find(name);
    if (it == acc.end()) {
      acc.emplace(name, t);
      continue;
    }
    if (it->second.data.size() != t.data.size()) {
      throw std::logic_error("gradient shape drift for " + name);
    }
    for (size_t i = 0; i < t.data.size(); ++i) it->second.data[i] += t.data[i];
  }
}

void scale_grads(std::map<std::string, Tensor>& grads, double s) {
  for (auto& [name, t] : grads) {
    for (double& x : t.data) x *= s;
  }
}

// One proposer/solver training pair. Two tapes isolate the gradients: the
// solver tape mounts solver params trainable and proposer params frozen, the
// proposer tape the reverse. The coin picks which rollout the proposer acts
// in when action replay is on; coin < 0 means replay is off and both rollouts
// are free.
ScenGrads process_selfplay(const PolicySetup& ps, const Scenario& scn, const Partition& part,
                           double coin) {
  ScenGrads out;
  const ObjectiveConfig& obj = ps.cfg->objective;
  const ActionLimits& lim = ps.cfg->limits;
  const TargetAssignment tgt = part.target_assignment();
  const int n = scn.num_actors();

  ad::Tape tape_s;
  MountedParams s_student(tape_s, *ps.student, true);
  MountedParams s_teacher(tape_s, *ps.teacher, false);
  MapContext ctx_s = build_map_context(tape_s, scn.map);
  const ad::Var s_feat_student = encode_map(tape_s, *ps.student_cfg, s_student, "student", ctx_s);

  ad::Tape tape_t;
  MountedParams t_teacher(tape_t, *ps.teacher, true);
  MountedParams t_student(tape_t, *ps.student, false);
  MapContext ctx_t = build_map_context(tape_t, scn.map);
  const ad::Var t_feat_adv = encode_map(tape_t, *ps.adversary_cfg, t_teacher, "adversary", ctx_t);
  const ad::Var t_feat_demo = encode_map(tape_t, *ps.demo_cfg, t_teacher, ps.demo_prefix, ctx_t);

  // Mixed rollout spec with both policies free. Slot order is fixed so the
  // two tapes record the identical op sequence.
  auto mixed_spec = [&](const MountedParams& adv_m, ad::Var adv_feat, const MountedParams& stu_m,
                        ad::Var stu_feat) {
    RolloutSpec spec;
    spec.limits = lim;
    spec.slots.push_back(PolicySlot{ps.adversary_cfg, &adv_m, "adversary", adv_feat, tgt});
    spec.slots.push_back(PolicySlot{ps.student_cfg, &stu_m, "student", stu_feat, {}});
    spec.bindings.assign(static_cast<size_t>(n), ActorBinding{});
    for (int i : part.teacher_set) {
      spec.bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
      spec.bindings[static_cast<size_t>(i)].policy_slot = 0;
    }
    for (int i : part.student_set) {
      spec.bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
      spec.bindings[static_cast<size_t>(i)].policy_slot = 1;
    }
    return spec;
  };

  const bool replay = ps.cfg->fairplay_replay;
  RolloutRecording mixed_s;
  RolloutRecording demo_t;
  RolloutRecording mixed_t;

  if (replay && coin < 0.5) {
    // Proposer acts in the demonstration; those actions replay into the
    // mixed rollout, so the proposer sees the mixed outcome as a constant.
    RolloutSpec dspec;
    dspec.limits = lim;
    dspec.slots.push_back(PolicySlot{ps.adversary_cfg, &t_teacher, "adversary", t_feat_adv, tgt});
    dspec.slots.push_back(PolicySlot{ps.demo_cfg, &t_teacher, ps.demo_prefix, t_feat_demo, {}});
    dspec.bindings.assign(static_cast<size_t>(n), ActorBinding{});
    for (int i : part.teacher_set) {
      dspec.bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
      dspec.bindings[static_cast<size_t>(i)].policy_slot = 0;
    }
    for (int i : part.student_set) {
      dspec.bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
      dspec.bindings[static_cast<size_t>(i)].policy_slot = 1;
    }
    demo_t = run_rollout(tape_t, scn, ctx_t, dspec);

    RolloutSpec mspec;
    mspec.limits = lim;
    mspec.slots.push_back(
        PolicySlot{ps.student_cfg, &s_student, "student", s_feat_student, {}});
    mspec.bindings.assign(static_cast<size_t>(n), ActorBinding{});
    for (int i : part.student_set) {
      mspec.bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
      mspec.bindings[static_cast<size_t>(i)].policy_slot = 0;
    }
    for (int i : part.teacher_set) {
      mspec.bindings[static_cast<size_t>(i)].kind = BindingKind::kReplay;
      mspec.bindings[static_cast<size_t>(i)].replay = action_column(demo_t.rollout.actions, i);
    }
    mixed_s = run_rollout(tape_s, scn, ctx_s, mspec);
    mixed_t = mount_rollout_constants(tape_t, mixed_s.rollout);
  } else {
    // Mixed rollout is free. Simulate it on both tapes; the op sequences
    // match, so the trajectories agree bit for bit.
    const ad::Var s_feat_adv = encode_map(tape_s, *ps.adversary_cfg, s_teacher, "adversary", ctx_s);
    const ad::Var t_feat_student =
        encode_map(tape_t, *ps.student_cfg, t_student, "student", ctx_t);
    mixed_s = run_rollout(tape_s, scn, ctx_s,
                          mixed_spec(s_teacher, s_feat_adv, s_student, s_feat_student));
    mixed_t = run_rollout(tape_t, scn, ctx_t,
                          mixed_spec(t_teacher, t_feat_adv, t_student, t_feat_student));
    if (!same_states(mixed_s.rollout, mixed_t.rollout)) {
      throw std::logic_error("paired mixed rollouts diverged across tapes");
    }

    RolloutSpec dspec;
    dspec.limits = lim;
    dspec.bindings.assign(static_cast<size_t>(n), ActorBinding{});
    if (replay) {
      // Proposer acted in the mixed rollout; replay its actions here so the
      // demonstration grades the same proposal.
      dspec.slots.push_back(PolicySlot{ps.demo_cfg, &t_teacher, ps.demo_prefix, t_feat_demo, {}});
      for (int i : part.student_set) {
        dspec.bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
        dspec.bindings[static_cast<size_t>(i)].policy_slot = 0;
      }
      for (int i : part.teacher_set) {
        dspec.bindings[static_cast<size_t>(i)].kind = BindingKind::kReplay;
        dspec.bindings[static_cast<size_t>(i)].replay = action_column(mixed_t.rollout.actions, i);
      }
    } else {
      dspec.slots.push_back(PolicySlot{ps.adversary_cfg, &t_teacher, "adversary", t_feat_adv, tgt});
      dspec.slots.push_back(PolicySlot{ps.demo_cfg, &t_teacher, ps.demo_prefix, t_feat_demo, {}});
      for (int i : part.teacher_set) {
        dspec.bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
        dspec.bindings[static_cast<size_t>(i)].policy_slot = 0;
      }
      for (int i : part.student_set) {
        dspec.bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
        dspec.bindings[static_cast<size_t>(i)].policy_slot = 1;
      }
    }
    demo_t = run_rollout(tape_t, scn, ctx_t, dspec);
  }

  const TeacherLoss tl = teacher_loss(tape_t, obj, scn, part, demo_t, mixed_t);
  const StudentLoss sl = student_loss(tape_s, obj, scn, part, mixed_s);
  tape_t.backward(tl.total);
  tape_s.backward(sl.total);
  out.teacher = t_teacher.grads();
  out.student = s_student.grads();
  out.stats.loss_teacher = tape_t.scalar_value(tl.total);
  out.stats.loss_student = tape_s.scalar_value(sl.total);
  out.stats.challenge = tl.challenge;
  out.stats.solvable = tl.solvable;
  out.stats.realism_demo = tl.realism_demo;
  out.stats.realism_mixed = tl.realism_mixed;
  return out;
}

// Closed-loop imitation on one scenario: the solver drives every actor and
// tracks the log, optionally with a collision penalty on top.
ScenGrads process_il(const PolicySetup& ps, const Scenario& scn) {
  ScenGrads out;
  const ObjectiveConfig& obj = ps.cfg->objective;
  const int n = scn.num_actors();

  ad::Tape tape;
  MountedParams m(tape, *ps.student, true);
  MapContext ctx = build_map_context(tape, scn.map);
  const ad::Var feats = encode_map(tape, *ps.student_cfg, m, "student", ctx);

  RolloutSpec spec;
  spec.limits = ps.cfg->limits;
  spec.slots.push_back(PolicySlot{ps.student_cfg, &m, "student", feats, {}});
  spec.bindings.assign(static_cast<size_t>(n), ActorBinding{});
  for (int i = 0; i < n; ++i) {
    spec.bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
    spec.bindings[static_cast<size_t>(i)].policy_slot = 0;
  }
  const RolloutRecording rec = run_rollout(tape, scn, ctx, spec);

  ad::Var loss = realism_term(tape, rec.states, scn, all_actor_ids(n), obj.huber_delta);
  out.stats.realism_mixed = tape.scalar_value(loss);
  if (ps.cfg->w_col > 0.0) {
    const ad::Var col = collision_loss(tape, rec.states, scn.history.back(), pairs_all(n),
                                       obj.collision_buffer);
    out.stats.challenge = tape.scalar_value(col);
    loss = ad::add(loss, ad::mul_scalar(col, ps.cfg->w_col));
  }
  tape.backward(loss);
  out.student = m.grads();
  out.stats.loss_student = tape.scalar_value(loss);
  return out;
}

void put_u32(std::string& out, uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}

void put_u64(std::string& out, uint64_t v) {
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}

void put_f64(std::string& out, double d) {
  uint64_t bits = 0;
  std::memcpy(&bits, &d, sizeof bits);
  put_u64(out, bits);
}

uint32_t read_u32(const std::string& s, size_t ofs) {
  uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= static_cast<uint32_t>(static_cast<unsigned char>(s[ofs + static_cast<size_t>(k)])) << (8 * k);
  return v;
}

uint64_t read_u64(const std::string& s, size_t ofs) {
  uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<uint64_t>(static_cast<unsigned char>(s[ofs + static_cast<size_t>(k)])) << (8 * k);
  return v;
}

double read_f64(const std::string& s, size_t ofs) {
  const uint64_t bits = read_u64(s, ofs);
  double d = 0.0;
  std::memcpy(&d, &bits, sizeof d);
  return d;
}

json shapes_to_json(const ParamStore& store) {
  json j = json::object();
  for (const auto& [name, shape] : store.shapes()) j[name] = shape;
  return j;
}

ParamStore store_from_shapes(const json& j, const std::string& payload, size_t& ofs) {
  ParamStore store;
  for (auto it = j.begin(); it != j.end(); ++it) {
    Tensor& t = store.create(it.key(), it.value().get<std::vector<int>>());
    for (double& x : t.data) {
      if (ofs + 8 > payload.size()) throw std::runtime_error("checkpoint payload truncated");
      x = read_f64(payload, ofs);
      ofs += 8;
    }
  }
  return store;
}

// CSV cell for an IterationStats field; empty when the column does not apply.
std::string stat_cell(double v, bool applies) { return applies ? fmt_shortest(v) : std::string(); }

}  // namespace

void TrainConfig::validate() const {
  if (mode != "selfplay" && mode != "il" && mode != "trafficsim" && mode != "curation") {
    throw std::invalid_argument("TrainConfig: unknown mode " + mode);
  }
  if (total_steps < 1) throw std::invalid_argument("TrainConfig: total_steps must be >= 1");
  if (warmup_steps < 0 || warmup_steps >= total_steps) {
    throw std::invalid_argument("TrainConfig: warmup_steps must be in [0, total_steps)");
  }
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(lr_peak > 0.0)) throw std::invalid_argument("TrainConfig: lr_peak must be positive");
  if (clip_norm < 0.0) throw std::invalid_argument("TrainConfig: clip_norm must be >= 0");
  if (w_col < 0.0) throw std::invalid_argument("TrainConfig: w_col must be >= 0");
  if (!(teacher_frac > 0.0 && teacher_frac < 1.0)) {
    throw std::invalid_argument("TrainConfig: teacher_frac must be in (0, 1)");
  }
  if (!(curation_step_frac > 0.0 && curation_step_frac <= 1.0)) {
    throw std::invalid_argument("TrainConfig: curation_step_frac must be in (0, 1]");
  }
  if (!(curation_lr_frac > 0.0 && curation_lr_frac <= 1.0)) {
    throw std::invalid_argument("TrainConfig: curation_lr_frac must be in (0, 1]");
  }
  if (king_steps < 0) throw std::invalid_argument("TrainConfig: king_steps must be >= 0");
  if (!(king_step_size > 0.0)) {
    throw std::invalid_argument("TrainConfig: king_step_size must be positive");
  }
  if (eval_every < 1) throw std::invalid_argument("TrainConfig: eval_every must be >= 1");
  if (workers < 1) throw std::invalid_argument("TrainConfig: workers must be >= 1");
  objective.validate();
  arch.validate();
}

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["mode"] = c.mode;
  j["total_steps"] = c.total_steps;
  j["warmup_steps"] = c.warmup_steps;
  j["batch_size"] = c.batch_size;
  j["lr_peak"] = c.lr_peak;
  j["clip_norm"] = c.clip_norm;
  j["w_col"] = c.w_col;
  j["teacher_frac"] = c.teacher_frac;
  j["fairplay_three_player"] = c.fairplay_three_player;
  j["fairplay_replay"] = c.fairplay_replay;
  j["curation_step_frac"] = c.curation_step_frac;
  j["curation_lr_frac"] = c.curation_lr_frac;
  j["king_steps"] = c.king_steps;
  j["king_step_size"] = c.king_step_size;
  j["eval_every"] = c.eval_every;
  j["workers"] = c.workers;
  j["seed"] = c.seed;
  j["objective_beta"] = c.objective.beta;
  j["objective_w_challenge"] = c.objective.w_challenge;
  j["objective_w_solvable"] = c.objective.w_solvable;
  j["objective_lambda_dist"] = c.objective.lambda_dist;
  j["objective_huber_delta"] = c.objective.huber_delta;
  j["objective_collision_buffer"] = c.objective.collision_buffer;
  j["arch_hidden_dim"] = c.arch.hidden_dim;
  j["arch_num_blocks"] = c.arch.num_blocks;
  j["arch_num_heads"] = c.arch.num_heads;
  j["arch_history_len"] = c.arch.history_len;
  j["arch_knn_k"] = c.arch.knn_k;
  j["arch_ff_dim"] = c.arch.ff_dim;
  j["arch_head_hidden"] = c.arch.head_hidden;
  j["arch_target_embed_dim"] = c.arch.target_embed_dim;
  j["adamw_beta1"] = c.adamw.beta1;
  j["adamw_beta2"] = c.adamw.beta2;
  j["adamw_eps"] = c.adamw.eps;
  j["adamw_weight_decay"] = c.adamw.weight_decay;
  j["limits_u_max"] = c.limits.u_max;
  j["limits_phi_max"] = c.limits.phi_max;
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  TrainConfig c;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const json& v = it.value();
      if (k == "mode") c.mode = v.get<std::string>();
      else if (k == "total_steps") c.total_steps = v.get<int>();
      else if (k == "warmup_steps") c.warmup_steps = v.get<int>();
      else if (k == "batch_size") c.batch_size = v.get<int>();
      else if (k == "lr_peak") c.lr_peak = v.get<double>();
      else if (k == "clip_norm") c.clip_norm = v.get<double>();
      else if (k == "w_col") c.w_col = v.get<double>();
      else if (k == "teacher_frac") c.teacher_frac = v.get<double>();
      else if (k == "fairplay_three_player") c.fairplay_three_player = v.get<bool>();
      else if (k == "fairplay_replay") c.fairplay_replay = v.get<bool>();
      else if (k == "curation_step_frac") c.curation_step_frac = v.get<double>();
      else if (k == "curation_lr_frac") c.curation_lr_frac = v.get<double>();
      else if (k == "king_steps") c.king_steps = v.get<int>();
      else if (k == "king_step_size") c.king_step_size = v.get<double>();
      else if (k == "eval_every") c.eval_every = v.get<int>();
      else if (k == "workers") c.workers = v.get<int>();
      else if (k == "seed") c.seed = v.get<uint64_t>();
      else if (k == "objective_beta") c.objective.beta = v.get<double>();
      else if (k == "objective_w_challenge") c.objective.w_challenge = v.get<double>();
      else if (k == "objective_w_solvable") c.objective.w_solvable = v.get<double>();
      else if (k == "objective_lambda_dist") c.objective.lambda_dist = v.get<double>();
      else if (k == "objective_huber_delta") c.objective.huber_delta = v.get<double>();
      else if (k == "objective_collision_buffer") c.objective.collision_buffer = v.get<double>();
      else if (k == "arch_hidden_dim") c.arch.hidden_dim = v.get<int>();
      else if (k == "arch_num_blocks") c.arch.num_blocks = v.get<int>();
      else if (k == "arch_num_heads") c.arch.num_heads = v.get<int>();
      else if (k == "arch_history_len") c.arch.history_len = v.get<int>();
      else if (k == "arch_knn_k") c.arch.knn_k = v.get<int>();
      else if (k == "arch_ff_dim") c.arch.ff_dim = v.get<int>();
      else if (k == "arch_head_hidden") c.arch.head_hidden = v.get<int>();
      else if (k == "arch_target_embed_dim") c.arch.target_embed_dim = v.get<int>();
      else if (k == "adamw_beta1") c.adamw.beta1 = v.get<double>();
      else if (k == "adamw_beta2") c.adamw.beta2 = v.get<double>();
      else if (k == "adamw_eps") c.adamw.eps = v.get<double>();
      else if (k == "adamw_weight_decay") c.adamw.weight_decay = v.get<double>();
      else if (k == "limits_u_max") c.limits.u_max = v.get<double>();
      else if (k == "limits_phi_max") c.limits.phi_max = v.get<double>();
      else throw std::invalid_argument("config: unknown key " + k);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: bad value type: ") + e.what());
  }
  return c;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  json h;
  h["step"] = ck.step;
  h["config"] = json::parse(train_config_to_json(ck.config));
  h["student"] = shapes_to_json(ck.student);
  h["teacher"] = shapes_to_json(ck.teacher);
  h["opt_student"] = {{"t", ck.opt_student_t}, {"len", ck.opt_student_state.size()}};
  h["opt_teacher"] = {{"t", ck.opt_teacher_t}, {"len", ck.opt_teacher_state.size()}};
  h["data_rng"] = ck.data_rng;
  h["coin_rng"] = ck.coin_rng;
  const std::string header = h.dump();

  std::string buf;
  buf += "ASPT";
  put_u32(buf, ck.version);
  put_u64(buf, header.size());
  buf += header;
  for (const double d : ck.student.flatten()) put_f64(buf, d);
  for (const double d : ck.teacher.flatten()) put_f64(buf, d);
  for (const double d : ck.opt_student_state) put_f64(buf, d);
  for (const double d : ck.opt_teacher_state) put_f64(buf, d);
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size()));
  put_u32(buf, static_cast<uint32_t>(crc));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();

  if (buf.size() < 4 + 4 + 8 + 4) throw std::runtime_error("checkpoint truncated: " + path);
  if (buf.compare(0, 4, "ASPT") != 0) throw std::runtime_error("not a checkpoint file: " + path);
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()),
              static_cast<uInt>(buf.size() - 4));
  if (static_cast<uint32_t>(crc) != read_u32(buf, buf.size() - 4)) {
    throw std::runtime_error("checkpoint CRC mismatch: " + path);
  }

  Checkpoint ck;
  ck.version = read_u32(buf, 4);
  if (ck.version != 1) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(ck.version));
  }
  const uint64_t header_len = read_u64(buf, 8);
  const size_t header_start = 16;
  if (header_start + header_len + 4 > buf.size()) {
    throw std::runtime_error("checkpoint header overruns file: " + path);
  }
  json h;
  try {
    h = json::parse(buf.substr(header_start, header_len));
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  ck.step = h.at("step").get<int64_t>();
  ck.config = train_config_from_json(h.at("config").dump());
  ck.data_rng = h.at("data_rng").get<std::string>();
  ck.coin_rng = h.at("coin_rng").get<std::string>();
  ck.opt_student_t = h.at("opt_student").at("t").get<int64_t>();
  ck.opt_teacher_t = h.at("opt_teacher").at("t").get<int64_t>();
  const size_t opt_student_len = h.at("opt_student").at("len").get<size_t>();
  const size_t opt_teacher_len = h.at("opt_teacher").at("len").get<size_t>();

  const std::string payload = buf.substr(header_start + header_len,
                                         buf.size() - 4 - header_start - header_len);
  size_t ofs = 0;
  ck.student = store_from_shapes(h.at("student"), payload, ofs);
  ck.teacher = store_from_shapes(h.at("teacher"), payload, ofs);
  ck.opt_student_state.resize(opt_student_len);
  for (double& x : ck.opt_student_state) {
    if (ofs + 8 > payload.size()) throw std::runtime_error("checkpoint payload truncated");
    x = read_f64(payload, ofs);
    ofs += 8;
  }
  ck.opt_teacher_state.resize(opt_teacher_len);
  for (double& x : ck.opt_teacher_state) {
    if (ofs + 8 > payload.size()) throw std::runtime_error("checkpoint payload truncated");
    x = read_f64(payload, ofs);
    ofs += 8;
  }
  if (ofs != payload.size()) throw std::runtime_error("checkpoint payload size mismatch: " + path);
  return ck;
}

Trainer::Trainer(const TrainConfig& cfg, std::vector<Scenario> corpus)
    : cfg_(cfg),
      corpus_(std::move(corpus)),
      opt_student_(cfg.adamw),
      opt_teacher_(cfg.adamw),
      data_rng_(stream_seed(cfg.seed, "data")),
      coin_rng_(stream_seed(cfg.seed, "coin")) {
  // Plain imitation has no collision prior by definition; the trafficsim
  // baseline is the same objective with w_col on.
  if (cfg_.mode == "il" || cfg_.mode == "curation") cfg_.w_col = 0.0;
  cfg_.validate();
  if (corpus_.empty()) throw std::invalid_argument("Trainer: empty corpus");
  init_policies();
}

Trainer::Trainer(const Checkpoint& ck, std::vector<Scenario> corpus)
    : cfg_(ck.config),
      corpus_(std::move(corpus)),
      opt_student_(ck.config.adamw),
      opt_teacher_(ck.config.adamw) {
  if (ck.version != 1) throw std::runtime_error("unsupported checkpoint version");
  if (cfg_.mode == "il" || cfg_.mode == "curation") cfg_.w_col = 0.0;
  cfg_.validate();
  if (corpus_.empty()) throw std::invalid_argument("Trainer: empty corpus");
  init_policies();
  if (student_.shapes() != ck.student.shapes()) {
    throw std::runtime_error("checkpoint solver parameter layout mismatch");
  }
  if (teacher_.shapes() != ck.teacher.shapes()) {
    throw std::runtime_error("checkpoint proposer parameter layout mismatch");
  }
  student_ = ck.student;
  teacher_ = ck.teacher;
  if (ck.opt_student_t > 0) {
    opt_student_.load_state_blob(student_, ck.opt_student_state, ck.opt_student_t);
  } else if (!ck.opt_student_state.empty()) {
    throw std::runtime_error("checkpoint optimizer state without steps");
  }
  if (ck.opt_teacher_t > 0) {
    opt_teacher_.load_state_blob(teacher_, ck.opt_teacher_state, ck.opt_teacher_t);
  } else if (!ck.opt_teacher_state.empty()) {
    throw std::runtime_error("checkpoint optimizer state without steps");
  }
  data_rng_.deserialize(ck.data_rng);
  coin_rng_.deserialize(ck.coin_rng);
  step_ = ck.step;
}

void Trainer::init_policies() {
  student_cfg_ = cfg_.arch;
  student_cfg_.role = Role::kStudent;
  adversary_cfg_ = cfg_.arch;
  adversary_cfg_.role = Role::kTeacherAdversary;
  demonstrator_cfg_ = cfg_.arch;
  demonstrator_cfg_.role =
      cfg_.fairplay_three_player ? Role::kTeacherDemonstrator : Role::kTeacherAdversary;
  if (!architecture_equal(demonstrator_cfg_, student_cfg_)) {
    throw std::logic_error("demonstrator must share the solver architecture");
  }

  make_policy_params(student_cfg_, "student", stream_seed(cfg_.seed, "init/student"), student_);
  if (cfg_.mode == "selfplay") {
    make_policy_params(adversary_cfg_, "adversary", stream_seed(cfg_.seed, "init/adversary"),
                       teacher_);
    if (cfg_.fairplay_three_player) {
      make_policy_params(demonstrator_cfg_, "demo", stream_seed(cfg_.seed, "init/demo"),
                         teacher_);
    }
  }
}

IterationStats Trainer::iterate() {
  for (const std::string& name : teacher_.names()) {
    if (student_.has(name)) {
      throw std::logic_error("proposer and solver share parameter " + name);
    }
  }
  return cfg_.mode == "selfplay" ? iterate_selfplay() : iterate_il();
}

IterationStats Trainer::iterate_selfplay() {
  const int batch = cfg_.batch_size;
  struct Work {
    const Scenario* scn = nullptr;
    Partition part;
    double coin = -1.0;
  };
  // All stochastic choices happen here, in order, before any parallel work,
  // so the iteration is reproducible for every worker count.
  std::vector<Work> work(static_cast<size_t>(batch));
  for (auto& w : work) {
    w.scn = &corpus_[static_cast<size_t>(data_rng_.uniform_int(corpus_.size()))];
    w.part = sample_partition(w.scn->num_actors(), data_rng_, cfg_.teacher_frac);
    if (cfg_.fairplay_replay) w.coin = coin_rng_.uniform();
  }

  PolicySetup ps;
  ps.cfg = &cfg_;
  ps.student = &student_;
  ps.teacher = &teacher_;
  ps.student_cfg = &student_cfg_;
  ps.adversary_cfg = &adversary_cfg_;
  ps.demo_cfg = &demonstrator_cfg_;
  ps.demo_prefix = cfg_.fairplay_three_player ? "demo" : "adversary";

  std::vector<ScenGrads> results(static_cast<size_t>(batch));
  run_indexed(batch, cfg_.workers, [&](int b) {
    const Work& w = work[static_cast<size_t>(b)];
    results[static_cast<size_t>(b)] = process_selfplay(ps, *w.scn, w.part, w.coin);
  });

  std::map<std::string, Tensor> tg;
  std::map<std::string, Tensor> sg;
  IterationStats stats;
  for (const ScenGrads& r : results) {
    add_into(tg, r.teacher);
    add_into(sg, r.student);
    stats.loss_teacher += r.stats.loss_teacher;
    stats.loss_student += r.stats.loss_student;
    stats.challenge += r.stats.challenge;
    stats.solvable += r.stats.solvable;
    stats.realism_demo += r.stats.realism_demo;
    stats.realism_mixed += r.stats.realism_mixed;
  }
  const double inv = 1.0 / batch;
  scale_grads(tg, inv);
  scale_grads(sg, inv);
  stats.loss_teacher *= inv;
  stats.loss_student *= inv;
  stats.challenge *= inv;
  stats.solvable *= inv;
  stats.realism_demo *= inv;
  stats.realism_mixed *= inv;

  clip_global_norm(tg, cfg_.clip_norm);
  clip_global_norm(sg, cfg_.clip_norm);
  const double lr = lr_at(static_cast<int>(step_), cfg_.total_steps, cfg_.warmup_steps,
                          cfg_.lr_peak);
  opt_teacher_.update(teacher_, tg, lr);
  opt_student_.update(student_, sg, lr);
  ++step_;
  return stats;
}

IterationStats Trainer::iterate_il() {
  const int batch = cfg_.batch_size;
  std::vector<const Scenario*> work(static_cast<size_t>(batch));
  for (auto& w : work) w = &corpus_[static_cast<size_t>(data_rng_.uniform_int(corpus_.size()))];

  PolicySetup ps;
  ps.cfg = &cfg_;
  ps.student = &student_;
  ps.teacher = &teacher_;
  ps.student_cfg = &student_cfg_;
  ps.adversary_cfg = &adversary_cfg_;
  ps.demo_cfg = &demonstrator_cfg_;

  std::vector<ScenGrads> results(static_cast<size_t>(batch));
  run_indexed(batch, cfg_.workers, [&](int b) {
    results[static_cast<size_t>(b)] = process_il(ps, *work[static_cast<size_t>(b)]);
  });

  std::map<std::string, Tensor> sg;
  IterationStats stats;
  for (const ScenGrads& r : results) {
    add_into(sg, r.student);
    stats.loss_student += r.stats.loss_student;
    stats.challenge += r.stats.challenge;
    stats.realism_mixed += r.stats.realism_mixed;
  }
  const double inv = 1.0 / batch;
  scale_grads(sg, inv);
  stats.loss_student *= inv;
  stats.challenge *= inv;
  stats.realism_mixed *= inv;

  clip_global_norm(sg, cfg_.clip_norm);
  const double lr = lr_at(static_cast<int>(step_), cfg_.total_steps, cfg_.warmup_steps,
                          cfg_.lr_peak);
  opt_student_.update(student_, sg, lr);
  ++step_;
  return stats;
}

std::pair<double, double> Trainer::eval_metrics(const std::vector<Scenario>& corpus) const {
  if (corpus.empty()) return {0.0, 0.0};
  const SimPolicy sp{student_cfg_, &student_, "student", {}};
  std::vector<int> collided(corpus.size(), 0);
  std::vector<int> actors(corpus.size(), 0);
  std::vector<double> realism(corpus.size(), 0.0);
  run_indexed(static_cast<int>(corpus.size()), cfg_.workers, [&](int i) {
    const Scenario& scn = corpus[static_cast<size_t>(i)];
    const Rollout r = simulate_single_policy(scn, sp, cfg_.limits);
    int hits = 0;
    for (const uint8_t c : r.collided) hits += c != 0;
    collided[static_cast<size_t>(i)] = hits;
    actors[static_cast<size_t>(i)] = scn.num_actors();
    realism[static_cast<size_t>(i)] =
        realism_value(r.states, scn, all_actor_ids(scn.num_actors()), cfg_.objective.huber_delta);
  });
  int total_hits = 0;
  int total_actors = 0;
  double realism_sum = 0.0;
  for (size_t i = 0; i < corpus.size(); ++i) {
    total_hits += collided[i];
    total_actors += actors[i];
    realism_sum += realism[i];
  }
  const double pct = total_actors > 0 ? 100.0 * total_hits / total_actors : 0.0;
  return {pct, realism_sum / static_cast<double>(corpus.size())};
}

double Trainer::eval_collision_pct(const std::vector<Scenario>& corpus) const {
  return eval_metrics(corpus).first;
}

void Trainer::train(std::ostream* csv, const std::vector<Scenario>* eval_corpus) {
  const bool selfplay = cfg_.mode == "selfplay";
  if (csv != nullptr && step_ == 0 && csv_step_offset_ == 0) {
    *csv << "step,loss_teacher,loss_student,challenge,solvable,realism_demo,realism_mixed,"
            "col_rate_eval\n";
  }
  while (step_ < cfg_.total_steps) {
    std::string eval_cell;
    if (eval_corpus != nullptr && !eval_corpus->empty() && step_ % cfg_.eval_every == 0) {
      const auto [pct, realism] = eval_metrics(*eval_corpus);
      eval_cell = fmt_shortest(pct);
      if (cfg_.objective.beta > 0.0) {
        log_info("eval step %lld: collision_pct=%.6g realism=%.6g challenge_gap_bound=%.6g",
                 static_cast<long long>(step_ + csv_step_offset_), pct, realism,
                 alpha_bound(realism, cfg_.objective.beta));
      } else {
        log_info("eval step %lld: collision_pct=%.6g realism=%.6g",
                 static_cast<long long>(step_ + csv_step_offset_), pct, realism);
      }
    }
    const int64_t row = step_ + csv_step_offset_;
    const IterationStats st = iterate();
    if (csv != nullptr) {
      *csv << row << ',' << stat_cell(st.loss_teacher, selfplay) << ','
           << fmt_shortest(st.loss_student) << ',' << stat_cell(st.challenge, selfplay) << ','
           << stat_cell(st.solvable, selfplay) << ',' << stat_cell(st.realism_demo, selfplay)
           << ',' << fmt_shortest(st.realism_mixed) << ',' << eval_cell << '\n';
    }
  }
  if (csv != nullptr) csv->flush();
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.step = step_;
  ck.config = cfg_;
  ck.student = student_;
  ck.teacher = teacher_;
  ck.opt_student_state = opt_student_.state_blob();
  ck.opt_student_t = opt_student_.step_count();
  ck.opt_teacher_state = opt_teacher_.state_blob();
  ck.opt_teacher_t = opt_teacher_.step_count();
  ck.data_rng = data_rng_.serialize();
  ck.coin_rng = coin_rng_.serialize();
  return ck;
}

std::vector<Scenario> Trainer::curate(const std::vector<Scenario>& corpus) const {
  const SimPolicy sp{student_cfg_, &student_, "student", {}};
  std::vector<uint8_t> keep(corpus.size(), 0);
  run_indexed(static_cast<int>(corpus.size()), cfg_.workers, [&](int i) {
    const Rollout r = simulate_single_policy(corpus[static_cast<size_t>(i)], sp, cfg_.limits);
    for (const uint8_t c : r.collided) {
      if (c != 0) {
        keep[static_cast<size_t>(i)] = 1;
        break;
      }
    }
  });
  std::vector<Scenario> out;
  for (size_t i = 0; i < corpus.size(); ++i) {
    if (keep[i]) out.push_back(corpus[i]);
  }
  return out;
}

Checkpoint run_training(const TrainConfig& cfg, const std::vector<Scenario>& corpus,
                        std::ostream* csv, const std::vector<Scenario>* eval_corpus) {
  cfg.validate();
  if (cfg.mode != "curation") {
    Trainer tr(cfg, corpus);
    tr.train(csv, eval_corpus);
    return tr.checkpoint();
  }

  // Curation baseline: imitation first, then fine-tune on the scenarios the
  // trained solver still fails, at a reduced learning rate.
  Trainer base(cfg, corpus);
  base.train(csv, eval_corpus);
  std::vector<Scenario> hard = base.curate(corpus);
  log_info("curation: %zu of %zu scenarios selected", hard.size(), corpus.size());
  if (hard.empty()) {
    log_info("curation: no failing scenarios, fine-tuning on the full corpus");
    hard = corpus;
  }

  Checkpoint ck = base.checkpoint();
  ck.step = 0;
  ck.opt_student_state.clear();
  ck.opt_student_t = 0;
  ck.opt_teacher_state.clear();
  ck.opt_teacher_t = 0;
  ck.config.total_steps = static_cast<int>(
      std::ceil(cfg.curation_step_frac * static_cast<double>(cfg.total_steps)));
  ck.config.lr_peak = cfg.lr_peak * cfg.curation_lr_frac;
  ck.config.warmup_steps = std::min(cfg.warmup_steps, ck.config.total_steps / 5);

  Trainer fine(ck, hard);
  fine.set_csv_step_offset(cfg.total_steps);
  fine.train(csv, eval_corpus);
  return fine.checkpoint();
}

KingResult king_attack(const Scenario& scn, const PolicyConfig& policy_cfg,
                       const ParamStore& policy_params, const std::string& policy_prefix,
                       const Partition& part, const TrainConfig& cfg) {
  scn.validate();
  const int n = scn.num_actors();
  part.validate(n);
  const int steps_per_actor = scn.horizon - 1;
  const ObjectiveConfig& obj = cfg.objective;
  const ActionLimits& lim = cfg.limits;
  const std::vector<ActorState>& dims = scn.history.back();
  const TargetAssignment tgt = part.target_assignment();

  // Adversary action sequences start from the log.
  std::map<int, std::vector<Action>> adv;
  for (const int i : part.teacher_set) adv[i] = action_column(scn.logged_actions, i);

  const SimPolicy sp{policy_cfg, &policy_params, policy_prefix, {}};
  auto simulate_with = [&](const std::map<int, std::vector<Action>>& replays,
                           const std::vector<int>& policy_actors) {
    std::vector<ActorBinding> bindings(static_cast<size_t>(n));
    for (const int i : policy_actors) {
      bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
      bindings[static_cast<size_t>(i)].policy_slot = 0;
    }
    for (const auto& [i, acts] : replays) {
      bindings[static_cast<size_t>(i)].kind = BindingKind::kReplay;
      bindings[static_cast<size_t>(i)].replay = acts;
    }
    return simulate(scn, {sp}, bindings, lim);
  };
  auto challenge_of = [&](const Rollout& r) {
    return collision_loss_value(r.states, pairs_involving(n, part.student_set),
                                obj.collision_buffer);
  };

  KingResult res;
  res.loss_before = challenge_of(simulate_with(adv, part.student_set));

  // Pairs the attack pushes together: each adversary with its own target.
  std::vector<std::vector<uint8_t>> attack_mask(static_cast<size_t>(n),
                                                std::vector<uint8_t>(static_cast<size_t>(n), 0));
  for (const auto& [a, t] : part.targets) {
    attack_mask[static_cast<size_t>(a)][static_cast<size_t>(t)] = 1;
    attack_mask[static_cast<size_t>(t)][static_cast<size_t>(a)] = 1;
  }

  // Projected gradient steps on one set of open-loop actions against the
  // frozen policy reacting in closed loop.
  auto optimize = [&](std::map<int, std::vector<Action>>& vars,
                      const std::map<int, std::vector<Action>>* replays,
                      const std::vector<int>& policy_actors, const bool attack_phase) {
    for (int it = 0; it < cfg.king_steps; ++it) {
      ad::Tape tape;
      MountedParams mp(tape, policy_params, false);
      MapContext ctx = build_map_context(tape, scn.map);
      const ad::Var feats = encode_map(tape, policy_cfg, mp, policy_prefix, ctx);
      RolloutSpec spec;
      spec.limits = lim;
      spec.slots.push_back(PolicySlot{&policy_cfg, &mp, policy_prefix, feats, {}});
      spec.bindings.assign(static_cast<size_t>(n), ActorBinding{});
      for (const int i : policy_actors) {
        spec.bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
        spec.bindings[static_cast<size_t>(i)].policy_slot = 0;
      }
      if (replays != nullptr) {
        for (const auto& [i, acts] : *replays) {
          spec.bindings[static_cast<size_t>(i)].kind = BindingKind::kReplay;
          spec.bindings[static_cast<size_t>(i)].replay = acts;
        }
      }
      for (auto& [i, acts] : vars) {
        ActorBinding& b = spec.bindings[static_cast<size_t>(i)];
        b.kind = BindingKind::kFreeActions;
        b.free_u.reserve(static_cast<size_t>(steps_per_actor));
        b.free_phi.reserve(static_cast<size_t>(steps_per_actor));
        for (int t = 0; t < steps_per_actor; ++t) {
          b.free_u.push_back(tape.leaf(Tensor::scalar(acts[static_cast<size_t>(t)].u)));
          b.free_phi.push_back(tape.leaf(Tensor::scalar(acts[static_cast<size_t>(t)].phi)));
        }
      }
      const RolloutRecording rec = run_rollout(tape, scn, ctx, spec);

      ad::Var loss;
      if (attack_phase) {
        const ad::Var col =
            collision_loss(tape, rec.states, dims, attack_mask, obj.collision_buffer);
        loss = ad::add(ad::mul_scalar(col, -10.0),
                       ad::add(distance_term(tape, rec.states, tgt),
                               realism_term(tape, rec.states, scn, part.teacher_set,
                                            obj.huber_delta)));
      } else {
        std::vector<int> repair_actors;
        for (const auto& [i, acts] : vars) repair_actors.push_back(i);
        loss = collision_loss(tape, rec.states, dims, pairs_involving(n, repair_actors),
                              obj.collision_buffer);
      }
      tape.backward(loss);

      for (auto& [i, acts] : vars) {
        const ActorBinding& b = spec.bindings[static_cast<size_t>(i)];
        for (int t = 0; t < steps_per_actor; ++t) {
          const double gu = tape.grad_of(b.free_u[static_cast<size_t>(t)]).data[0];
          const double gp = tape.grad_of(b.free_phi[static_cast<size_t>(t)]).data[0];
          Action& a = acts[static_cast<size_t>(t)];
          a.u = std::clamp(a.u - cfg.king_step_size * gu, -lim.u_max, lim.u_max);
          a.phi = std::clamp(a.phi - cfg.king_step_size * gp, -lim.phi_max, lim.phi_max);
        }
      }
    }
  };

  optimize(adv, nullptr, part.student_set, true);
  const Rollout attacked = simulate_with(adv, part.student_set);
  res.loss_after = challenge_of(attacked);
  res.attacked = adv;

  // Repair: background actors (solver set minus targets) adjust their actions
  // to stay collision-free while the targets keep reacting via the policy.
  std::set<int> target_actors;
  for (const auto& [a, t] : part.targets) target_actors.insert(t);
  std::vector<int> background;
  for (const int i : part.student_set) {
    if (target_actors.count(i) == 0) background.push_back(i);
  }
  std::vector<int> policy_targets(target_actors.begin(), target_actors.end());

  Rollout completed = attacked;
  if (!background.empty()) {
    std::map<int, std::vector<Action>> rep;
    for (const int i : background) rep[i] = action_column(attacked.actions, i);
    optimize(rep, &adv, policy_targets, false);
    std::map<int, std::vector<Action>> all_replays = adv;
    for (const auto& [i, acts] : rep) all_replays[i] = acts;
    completed = simulate_with(all_replays, policy_targets);
    res.repaired = rep;
  }

  res.feasible = true;
  for (const int i : background) {
    if (completed.collided[static_cast<size_t>(i)] != 0) res.feasible = false;
  }
  res.target_hit = false;
  for (const auto& [a, t] : part.targets) {
    for (const auto& step_states : completed.states) {
      ActorState sa = step_states[static_cast<size_t>(a)];
      ActorState st = step_states[static_cast<size_t>(t)];
      if (obb_overlap(actor_box(sa), actor_box(st))) {
        res.target_hit = true;
        break;
      }
    }
    if (res.target_hit) break;
  }
  return res;
}

}  // namespace selfplay
