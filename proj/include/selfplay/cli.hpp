#pragma once

#include <cstdint>

namespace selfplay {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int coords = 0;
  int seeds = 0;
};

// Reverse-mode gradients of the solver loss through a full mixed rollout
// versus central finite differences. Per seed: fresh random scenario,
// partition and policies (action heads randomly initialized so every layer
// carries gradient), then `coords_per_seed` parameter coordinates probed,
// half of them the largest-magnitude gradients and the rest uniform picks.
// Error per coordinate is |bp - fd| / max(1, |bp|, |fd|).
GradCheckReport run_gradcheck(int seeds, int actors, int horizon, int coords_per_seed,
                              double fd_step, uint64_t master_seed);

// Full command-line surface. Returns the process exit code:
// 0 success, 1 runtime or IO failure, 2 usage error.
int run_cli(int argc, const char* const* argv);

}  // namespace selfplay
