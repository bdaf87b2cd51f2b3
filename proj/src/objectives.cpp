#include "selfplay/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace selfplay {

void ObjectiveConfig::validate() const {
  if (beta < 0.0) throw std::invalid_argument("objective: beta must be >= 0");
  if (w_challenge < 0.0 || w_solvable < 0.0 || lambda_dist < 0.0) {
    throw std::invalid_argument("objective: weights must be >= 0");
  }
  if (!(huber_delta > 0.0)) throw std::invalid_argument("objective: huber_delta must be > 0");
  if (collision_buffer < 0.0) throw std::invalid_argument("objective: buffer must be >= 0");
}

std::vector<std::vector<uint8_t>> pairs_all(int n) {
  std::vector<std::vector<uint8_t>> m(static_cast<size_t>(n),
                                      std::vector<uint8_t>(static_cast<size_t>(n), 1));
  for (int i = 0; i < n; ++i) m[static_cast<size_t>(i)][static_cast<size_t>(i)] = 0;
  return m;
}

std::vector<std::vector<uint8_t>> pairs_involving(int n, const std::vector<int>& set) {
  std::vector<uint8_t> in(static_cast<size_t>(n), 0);
  for (int a : set) {
    if (a < 0 || a >= n) throw std::invalid_argument("pair mask: actor out of range");
    in[static_cast<size_t>(a)] = 1;
  }
  std::vector<std::vector<uint8_t>> m(static_cast<size_t>(n),
                                      std::vector<uint8_t>(static_cast<size_t>(n), 0));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i != j && (in[static_cast<size_t>(i)] || in[static_cast<size_t>(j)])) {
        m[static_cast<size_t>(i)][static_cast<size_t>(j)] = 1;
      }
    }
  }
  return m;
}

std::vector<std::vector<uint8_t>> pairs_from(int n, const std::vector<int>& set) {
  std::vector<std::vector<uint8_t>> m(static_cast<size_t>(n),
                                      std::vector<uint8_t>(static_cast<size_t>(n), 0));
  for (int a : set) {
    if (a < 0 || a >= n) throw std::invalid_argument("pair mask: actor out of range");
    for (int j = 0; j < n; ++j) {
      if (j != a) m[static_cast<size_t>(a)][static_cast<size_t>(j)] = 1;
    }
  }
  return m;
}

std::array<double, 5> circle_offsets(const ActorState& dims) {
  static constexpr double kFractions[5] = {-0.4, -0.2, 0.0, 0.2, 0.4};
  std::array<double, 5> out{};
  for (int p = 0; p < 5; ++p) {
    out[static_cast<size_t>(p)] = dims.wheelbase / 2.0 + kFractions[p] * dims.length;
  }
  return out;
}

double min_circle_distance(const ActorState& a, const ActorState& b) {
  const std::array<double, 5> oa = circle_offsets(a);
  const std::array<double, 5> ob = circle_offsets(b);
  const double ca = std::cos(a.theta), sa = std::sin(a.theta);
  const double cb = std::cos(b.theta), sb = std::sin(b.theta);
  double best = std::numeric_limits<double>::infinity();
  for (int p = 0; p < 5; ++p) {
    const double ax = a.x + oa[static_cast<size_t>(p)] * ca;
    const double ay = a.y + oa[static_cast<size_t>(p)] * sa;
    for (int q = 0; q < 5; ++q) {
      const double bx = b.x + ob[static_cast<size_t>(q)] * cb;
      const double by = b.y + ob[static_cast<size_t>(q)] * sb;
      const double d = std::hypot(bx - ax, by - ay);
      if (d < best) best = d;
    }
  }
  return best;
}

namespace {

void check_mask(const std::vector<std::vector<uint8_t>>& mask, size_t n) {
  if (mask.size() != n) throw std::invalid_argument("collision loss: mask size mismatch");
  for (const auto& row : mask) {
    if (row.size() != n) throw std::invalid_argument("collision loss: ragged mask");
  }
  for (size_t i = 0; i < n; ++i) {
    if (mask[i][i]) throw std::invalid_argument("collision loss: mask may not select (i, i)");
  }
}

}  // namespace

ad::Var collision_loss(ad::Tape& tape, const std::vector<JointState>& states,
                       const std::vector<ActorState>& dims,
                       const std::vector<std::vector<uint8_t>>& pair_mask, double buffer) {
  const size_t n = dims.size();
  if (n == 0 || states.empty()) throw std::invalid_argument("collision loss: empty input");
  check_mask(pair_mask, n);

  std::vector<std::array<double, 5>> offsets(n);
  Tensor thr = Tensor::zeros({static_cast<int>(n), static_cast<int>(n)});
  Tensor mask = Tensor::zeros({static_cast<int>(n), static_cast<int>(n)});
  for (size_t i = 0; i < n; ++i) {
    offsets[i] = circle_offsets(dims[i]);
    for (size_t j = 0; j < n; ++j) {
      if (!pair_mask[i][j] || i == j) continue;
      mask.data[i * n + j] = 1.0;
      thr.data[i * n + j] = dims[i].width / 2.0 + dims[j].width / 2.0 + buffer;
    }
  }
  const ad::Var thr_c = tape.constant(std::move(thr));
  const ad::Var mask_c = tape.constant(std::move(mask));

  ad::Var acc;
  for (const JointState& s : states) {
    const ad::Var d = ad::circle_pair_min_dist(s.x, s.y, s.theta, offsets);
    const ad::Var term = ad::sum_all(ad::mul(ad::relu(ad::sub(thr_c, d)), mask_c));
    acc = acc.valid() ? ad::add(acc, term) : term;
  }
  const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(states.size()));
  return ad::mul_scalar(acc, scale);
}

double collision_loss_value(const std::vector<std::vector<ActorState>>& states,
                            const std::vector<std::vector<uint8_t>>& pair_mask, double buffer) {
  if (states.empty() || states[0].empty()) {
    throw std::invalid_argument("collision loss: empty input");
  }
  const size_t n = states[0].size();
  check_mask(pair_mask, n);
  double acc = 0.0;
  for (const auto& row : states) {
    double term = 0.0;
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j < n; ++j) {
        if (!pair_mask[i][j] || i == j) continue;
        const double thr = row[i].width / 2.0 + row[j].width / 2.0 + buffer;
        const double gap = thr - min_circle_distance(row[i], row[j]);
        term += std::max(gap, 0.0);
      }
    }
    acc += term;
  }
  return acc * (1.0 / (static_cast<double>(n) * static_cast<double>(states.size())));
}

std::vector<uint8_t> exact_collision(const std::vector<std::vector<ActorState>>& states) {
  if (states.empty()) return {};
  const size_t n = states[0].size();
  std::vector<uint8_t> flags(n, 0);
  for (const auto& row : states) {
    if (row.size() != n) throw std::invalid_argument("exact_collision: ragged states");
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = i + 1; j < n; ++j) {
        if (obb_overlap(actor_box(row[i]), actor_box(row[j]))) {
          flags[i] = 1;
          flags[j] = 1;
        }
      }
    }
  }
  return flags;
}

ad::Var realism_term(ad::Tape& tape, const std::vector<JointState>& states, const Scenario& scn,
                     const std::vector<int>& actors, double huber_delta) {
  if (actors.empty()) throw std::invalid_argument("realism: empty actor set");
  if (states.size() != scn.logged_future.size()) {
    throw std::invalid_argument("realism: rollout length != log length");
  }
  ad::Var acc;
  for (size_t t = 0; t < states.size(); ++t) {
    std::vector<double> lx, ly;
    lx.reserve(actors.size());
    ly.reserve(actors.size());
    for (int i : actors) {
      const ActorState& s = scn.logged_future[t][static_cast<size_t>(i)];
      lx.push_back(s.x);
      ly.push_back(s.y);
    }
    const ad::Var gx = ad::gather_elems(states[t].x, actors);
    const ad::Var gy = ad::gather_elems(states[t].y, actors);
    const ad::Var hx = ad::huber(gx, tape.constant(Tensor::from_vector(lx)), huber_delta);
    const ad::Var hy = ad::huber(gy, tape.constant(Tensor::from_vector(ly)), huber_delta);
    const ad::Var term = ad::sum_all(ad::add(hx, hy));
    acc = acc.valid() ? ad::add(acc, term) : term;
  }
  const double scale =
      1.0 / (static_cast<double>(actors.size()) * static_cast<double>(states.size()));
  return ad::mul_scalar(acc, scale);
}

double realism_value(const std::vector<std::vector<ActorState>>& states, const Scenario& scn,
                     const std::vector<int>& actors, double huber_delta) {
  if (actors.empty()) throw std::invalid_argument("realism: empty actor set");
  if (states.size() != scn.logged_future.size()) {
    throw std::invalid_argument("realism: rollout length != log length");
  }
  const auto huber1 = [huber_delta](double r) {
    const double a = std::abs(r);
    return a <= huber_delta ? 0.5 * r * r : huber_delta * (a - 0.5 * huber_delta);
  };
  double acc = 0.0;
  for (size_t t = 0; t < states.size(); ++t) {
    double term = 0.0;
    for (int i : actors) {
      const ActorState& s = states[t][static_cast<size_t>(i)];
      const ActorState& l = scn.logged_future[t][static_cast<size_t>(i)];
      term += huber1(s.x - l.x) + huber1(s.y - l.y);
    }
    acc += term;
  }
  return acc * (1.0 / (static_cast<double>(actors.size()) * static_cast<double>(states.size())));
}

ad::Var distance_term(ad::Tape& tape, const std::vector<JointState>& states,
                      const TargetAssignment& targets) {
  if (targets.empty()) return tape.constant_scalar(0.0);
  if (states.empty()) throw std::invalid_argument("distance: empty states");
  std::vector<int> advs, tgts;
  for (const auto& [a, b] : targets) {
    advs.push_back(a);
    tgts.push_back(b);
  }
  ad::Var acc;
  for (const JointState& s : states) {
    const ad::Var dx = ad::sub(ad::gather_elems(s.x, advs), ad::gather_elems(s.x, tgts));
    const ad::Var dy = ad::sub(ad::gather_elems(s.y, advs), ad::gather_elems(s.y, tgts));
    const ad::Var d = ad::vsqrt(ad::add(ad::mul(dx, dx), ad::mul(dy, dy)));
    const ad::Var term = ad::sum_all(d);
    acc = acc.valid() ? ad::add(acc, term) : term;
  }
  const double scale =
      1.0 / (static_cast<double>(targets.size()) * static_cast<double>(states.size()));
  return ad::mul_scalar(acc, scale);
}

namespace {

std::vector<int> all_actors(int n) {
  std::vector<int> v(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<size_t>(i)] = i;
  return v;
}

void check_same_start(const RolloutRecording& a, const RolloutRecording& b) {
  if (a.rollout.states.empty() || b.rollout.states.empty() ||
      a.rollout.states[0].size() != b.rollout.states[0].size()) {
    throw std::invalid_argument("loss pair: rollouts disagree on actor count");
  }
  const auto& ra = a.rollout.states[0];
  const auto& rb = b.rollout.states[0];
  for (size_t i = 0; i < ra.size(); ++i) {
    if (ra[i].x != rb[i].x || ra[i].y != rb[i].y || ra[i].theta != rb[i].theta ||
        ra[i].v != rb[i].v) {
      throw std::invalid_argument("loss pair: rollouts start from different states");
    }
  }
}

}  // namespace

TeacherLoss teacher_loss(ad::Tape& tape, const ObjectiveConfig& cfg, const Scenario& scn,
                         const Partition& part, const RolloutRecording& demo,
                         const RolloutRecording& mixed) {
  cfg.validate();
  const int n = scn.num_actors();
  part.validate(n);
  check_same_start(demo, mixed);
  const std::vector<ActorState>& dims = scn.history.back();
  const std::vector<int> everyone = all_actors(n);

  const ad::Var challenge = collision_loss(tape, mixed.states, dims,
                                           pairs_involving(n, part.student_set),
                                           cfg.collision_buffer);
  const ad::Var solvable =
      collision_loss(tape, demo.states, dims, pairs_all(n), cfg.collision_buffer);
  const ad::Var realism_demo = realism_term(tape, demo.states, scn, everyone, cfg.huber_delta);
  const ad::Var realism_mixed = realism_term(tape, mixed.states, scn, everyone, cfg.huber_delta);
  const ad::Var dist = distance_term(tape, mixed.states, part.target_assignment());

  TeacherLoss out;
  out.challenge = tape.scalar_value(challenge);
  out.solvable = tape.scalar_value(solvable);
  out.realism_demo = tape.scalar_value(realism_demo);
  out.realism_mixed = tape.scalar_value(realism_mixed);
  out.distance = tape.scalar_value(dist);
  out.total = ad::add(
      ad::add(ad::add(ad::mul_scalar(challenge, -cfg.w_challenge),
                      ad::mul_scalar(solvable, cfg.w_solvable)),
              ad::mul_scalar(ad::add(realism_demo, realism_mixed), cfg.beta)),
      ad::mul_scalar(dist, cfg.lambda_dist));
  return out;
}

StudentLoss student_loss(ad::Tape& tape, const ObjectiveConfig& cfg, const Scenario& scn,
                         const Partition& part, const RolloutRecording& mixed) {
  cfg.validate();
  const int n = scn.num_actors();
  part.validate(n);

  const ad::Var challenge = collision_loss(tape, mixed.states, scn.history.back(),
                                           pairs_involving(n, part.student_set),
                                           cfg.collision_buffer);
  const ad::Var realism =
      realism_term(tape, mixed.states, scn, part.student_set, cfg.huber_delta);

  StudentLoss out;
  out.challenge = tape.scalar_value(challenge);
  out.realism = tape.scalar_value(realism);
  out.total = ad::add(challenge, ad::mul_scalar(realism, cfg.beta));
  return out;
}

bool lemma1_check(const TheoryTuple& t) {
  const double r_teacher = t.c_ts_s - t.c_t_n + t.beta * (t.i_t + t.i_ts);
  if (!(r_teacher > 2.0 * t.beta * t.i_ts)) return true;  // antecedent false
  const double copy_return = -t.c_t_n + t.beta * t.i_t;
  const double student_return = -t.c_ts_s + t.beta * t.i_ts;
  return copy_return > student_return;
}

}  // namespace selfplay
