#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "selfplay/dynamics.hpp"
#include "selfplay/geom.hpp"
#include "selfplay/rng.hpp"
#include "selfplay/tape.hpp"
#include "selfplay/tensor.hpp"

using namespace selfplay;

namespace {

ActorState random_state(Rng& rng) {
  ActorState s;
  s.x = rng.uniform(-100.0, 100.0);
  s.y = rng.uniform(-100.0, 100.0);
  s.theta = rng.uniform(-kPi + 1e-9, kPi);
  s.v = rng.uniform(0.0, 30.0);
  s.wheelbase = rng.uniform(2.2, 3.5);
  return s;
}

}  // namespace

TEST_SUITE("dynamics") {

TEST_CASE("straight cruise advances x only") {
  ActorState s;
  s.v = 10.0;
  const ActorState n = step(s, {0.0, 0.0}, 0.5);
  CHECK(n.x == 5.0);
  CHECK(n.y == 0.0);
  CHECK(n.theta == 0.0);
  CHECK(n.v == 10.0);
}

TEST_CASE("braking integrates after the position update") {
  ActorState s;
  s.v = 10.0;
  const ActorState n = step(s, {-2.0, 0.0}, 0.5);
  CHECK(n.x == 5.0);  // position uses the pre-update speed
  CHECK(n.v == 9.0);
}

TEST_CASE("full-lock turn matches the closed form") {
  ActorState s;
  s.v = 2.0;
  s.wheelbase = 2.0;
  const ActionLimits wide{6.0, 1.0};  // default phi_max would clamp pi/4
  const ActorState n = step(s, {0.0, kPi / 4.0}, 0.5, wide);
  CHECK(n.x == 1.0);
  CHECK(n.y == 0.0);
  CHECK(n.v == 2.0);
  CHECK(n.theta == 0.5 * std::tan(kPi / 4.0));  // 0.49999999999999994
}

TEST_CASE("actions clamp to the limits") {
  ActorState s;
  s.v = 2.0;
  s.wheelbase = 2.0;
  const ActorState hard = step(s, {100.0, kPi / 4.0}, 0.5);  // default limits
  const ActorState at_limit = step(s, {6.0, 0.5}, 0.5);
  CHECK(hard.x == at_limit.x);
  CHECK(hard.theta == at_limit.theta);
  CHECK(hard.v == at_limit.v);

  const ActorState neg = step(s, {-100.0, -2.0}, 0.5);
  const ActorState neg_limit = step(s, {-6.0, -0.5}, 0.5);
  CHECK(neg.v == neg_limit.v);
  CHECK(neg.theta == neg_limit.theta);
}

TEST_CASE("invalid inputs are rejected") {
  ActorState s;
  CHECK_THROWS_AS(step(s, {}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(step(s, {}, -0.5), std::invalid_argument);
  s.v = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(step(s, {}, 0.5), std::invalid_argument);
  s.v = 0.0;
  CHECK_THROWS_AS(step(s, {std::numeric_limits<double>::infinity(), 0.0}, 0.5),
                  std::invalid_argument);
  CHECK(dt_default() == 0.5);
}

TEST_CASE("zero acceleration keeps speed, zero steering keeps heading") {
  Rng rng(7);
  for (int i = 0; i < 10000; ++i) {
    const ActorState s = random_state(rng);
    const ActorState coast = step(s, {0.0, rng.uniform(-0.5, 0.5)}, 0.5);
    REQUIRE(coast.v == s.v);
    const ActorState straight = step(s, {rng.uniform(-6.0, 6.0), 0.0}, 0.5);
    REQUIRE(straight.theta == s.theta);
  }
}

TEST_CASE("heading always stays in the wrap range") {
  Rng rng(8);
  for (int i = 0; i < 10000; ++i) {
    ActorState s = random_state(rng);
    const Action a{rng.uniform(-6.0, 6.0), rng.uniform(-0.5, 0.5)};
    s = step(s, a, 0.5);
    REQUIRE(s.theta > -kPi);
    REQUIRE(s.theta <= kPi);
    REQUIRE(std::isfinite(s.x));
    REQUIRE(std::isfinite(s.y));
  }
}

TEST_CASE("batched tape step reproduces the scalar step bitwise") {
  Rng rng(9);
  const int n = 5;
  std::vector<ActorState> states;
  std::vector<Action> actions;
  std::vector<double> xs, ys, ths, vs, wbs, us, phis;
  for (int i = 0; i < n; ++i) {
    states.push_back(random_state(rng));
    actions.push_back({rng.uniform(-8.0, 8.0), rng.uniform(-1.0, 1.0)});  // some clamp
    xs.push_back(states[i].x);
    ys.push_back(states[i].y);
    ths.push_back(states[i].theta);
    vs.push_back(states[i].v);
    wbs.push_back(states[i].wheelbase);
    us.push_back(actions[i].u);
    phis.push_back(actions[i].phi);
  }

  ad::Tape tape;
  StepVars sv{tape.constant(Tensor::from_vector(xs)), tape.constant(Tensor::from_vector(ys)),
              tape.constant(Tensor::from_vector(ths)), tape.constant(Tensor::from_vector(vs))};
  const StepVars nv =
      step_on_tape(tape, sv, tape.constant(Tensor::from_vector(us)),
                   tape.constant(Tensor::from_vector(phis)),
                   tape.constant(Tensor::from_vector(wbs)), 0.5);

  for (int i = 0; i < n; ++i) {
    const ActorState ref = step(states[i], actions[i], 0.5);
    REQUIRE(tape.value(nv.x).data[i] == ref.x);
    REQUIRE(tape.value(nv.y).data[i] == ref.y);
    REQUIRE(tape.value(nv.theta).data[i] == ref.theta);
    REQUIRE(tape.value(nv.v).data[i] == ref.v);
  }
}

TEST_CASE("tape step gradients match finite differences") {
  Rng rng(10);
  const double h = 1e-6;
  for (int trial = 0; trial < 50; ++trial) {
    ActorState s = random_state(rng);
    // Keep actions inside the clamp band so the kink never triggers.
    Action a{rng.uniform(-5.0, 5.0), rng.uniform(-0.4, 0.4)};
    // Keep the heading away from the wrap seam under perturbation.
    s.theta = rng.uniform(-3.0, 3.0);

    std::vector<double> in{s.x, s.y, s.theta, s.v, a.u, a.phi};
    auto eval = [&](const std::vector<double>& q, std::vector<double>* grad) {
      ad::Tape tape;
      const ad::Var x = tape.leaf(Tensor::from_vector({q[0]}));
      const ad::Var y = tape.leaf(Tensor::from_vector({q[1]}));
      const ad::Var th = tape.leaf(Tensor::from_vector({q[2]}));
      const ad::Var v = tape.leaf(Tensor::from_vector({q[3]}));
      const ad::Var u = tape.leaf(Tensor::from_vector({q[4]}));
      const ad::Var phi = tape.leaf(Tensor::from_vector({q[5]}));
      const StepVars nv = step_on_tape(tape, {x, y, th, v}, u, phi,
                                       tape.constant(Tensor::from_vector({s.wheelbase})), 0.5);
      // Weighted sum keeps every output in play with distinct coefficients.
      ad::Var loss = ad::add(ad::add(nv.x, ad::mul_scalar(nv.y, 2.0)),
                             ad::add(ad::mul_scalar(nv.theta, 3.0), ad::mul_scalar(nv.v, 4.0)));
      loss = ad::sum_all(loss);
      const double out = tape.scalar_value(loss);
      if (grad) {
        tape.backward(loss);
        *grad = {tape.grad_of(x).data[0], tape.grad_of(y).data[0], tape.grad_of(th).data[0],
                 tape.grad_of(v).data[0], tape.grad_of(u).data[0], tape.grad_of(phi).data[0]};
      }
      return out;
    };

    std::vector<double> grad;
    eval(in, &grad);
    for (size_t k = 0; k < in.size(); ++k) {
      std::vector<double> plus = in, minus = in;
      plus[k] += h;
      minus[k] -= h;
      const double fd = (eval(plus, nullptr) - eval(minus, nullptr)) / (2.0 * h);
      const double err = std::abs(grad[k] - fd) / std::max({1.0, std::abs(grad[k]), std::abs(fd)});
      REQUIRE(err < 1e-6);
    }
  }
}

TEST_CASE("bounding box centers ahead of the rear axle") {
  ActorState s;  // wheelbase 2.8, heading 0
  const ObbBox east = actor_box(s);
  CHECK(east.center.x == doctest::Approx(1.4).epsilon(1e-12));
  CHECK(east.center.y == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(east.length == doctest::Approx(4.5));
  CHECK(east.width == doctest::Approx(2.0));

  s.theta = kPi / 2.0;
  const ObbBox north = actor_box(s);
  CHECK(north.center.x == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(north.center.y == doctest::Approx(1.4).epsilon(1e-12));
}

}  // TEST_SUITE
