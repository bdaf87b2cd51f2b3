#include "selfplay/policy.hpp"

#include <cmath>
#include <stdexcept>

namespace selfplay {

namespace {

constexpr double kPosScale = 1.0 / 20.0;    // positions and distances
constexpr double kSpeedScale = 1.0 / 20.0;  // speeds
constexpr double kDimScale = 1.0 / 5.0;     // box dims
constexpr double kInitStd = 0.02;

std::string last_component(const std::string& name) {
  const size_t p = name.rfind('/');
  return p == std::string::npos ? name : name.substr(p + 1);
}

// Scales the (dx, dy, sin, cos, dist) columns into network units.
ad::Var scale_pairpose(ad::Tape& tape, ad::Var rows) {
  const ad::Var s = tape.constant(
      Tensor::from_vector({kPosScale, kPosScale, 1.0, 1.0, kPosScale}));
  return ad::mul_rowvec(rows, s);
}

ad::Var linear(ad::Var x, ad::Var w, ad::Var b) { return ad::add_rowvec(ad::matmul(x, w), b); }

ad::Var mlp2(ad::Var x, ad::Var w1, ad::Var b1, ad::Var w2, ad::Var b2) {
  return linear(ad::vtanh(linear(x, w1, b1)), w2, b2);
}

ad::Var ln_affine(ad::Var x, ad::Var g, ad::Var b) {
  return ad::add_rowvec(ad::mul_rowvec(ad::layer_norm_rows(x), g), b);
}

// Multi-head ragged attention: one call of the fused kernel per head over
// column slices, outputs re-concatenated.
ad::Var multihead(ad::Var q, ad::Var k, ad::Var v, const std::vector<std::pair<int, int>>& ranges,
                  int heads, ad::Tape& tape) {
  const int d = tape.value(q).cols();
  const int dh = d / heads;
  if (heads == 1) return ad::attn_qkv(q, k, v, ranges);
  std::vector<ad::Var> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    outs.push_back(ad::attn_qkv(ad::slice_cols(q, h * dh, dh), ad::slice_cols(k, h * dh, dh),
                                ad::slice_cols(v, h * dh, dh), ranges));
  }
  return ad::concat_cols(outs);
}

Tensor sinusoidal_rows(int n_actors, int hist, int dim) {
  Tensor pe = Tensor::zeros({n_actors * hist, dim});
  for (int t = 0; t < hist; ++t) {
    for (int c = 0; c < dim; ++c) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (c / 2)) / dim);
      const double val = c % 2 == 0 ? std::sin(t * freq) : std::cos(t * freq);
      for (int i = 0; i < n_actors; ++i) {
        pe.data[static_cast<size_t>(i * hist + t) * dim + c] = val;
      }
    }
  }
  return pe;
}

}  // namespace

const char* role_name(Role r) {
  switch (r) {
    case Role::kStudent: return "student";
    case Role::kTeacherAdversary: return "teacher_adversary";
    case Role::kTeacherDemonstrator: return "teacher_demonstrator";
  }
  return "?";
}

Role role_from_name(const std::string& name) {
  if (name == "student") return Role::kStudent;
  if (name == "teacher_adversary") return Role::kTeacherAdversary;
  if (name == "teacher_demonstrator") return Role::kTeacherDemonstrator;
  throw std::invalid_argument("unknown policy role: " + name);
}

void PolicyConfig::validate() const {
  if (hidden_dim < 1 || num_blocks < 1 || num_heads < 1 || history_len < 1 || knn_k < 1 ||
      ff_dim < 1 || head_hidden < 1 || target_embed_dim < 1) {
    throw std::invalid_argument("policy config: all sizes must be >= 1");
  }
  if (hidden_dim % num_heads != 0) {
    throw std::invalid_argument("policy config: hidden_dim must divide by num_heads");
  }
}

bool architecture_equal(const PolicyConfig& a, const PolicyConfig& b) {
  return a.hidden_dim == b.hidden_dim && a.num_blocks == b.num_blocks &&
         a.num_heads == b.num_heads && a.history_len == b.history_len && a.knn_k == b.knn_k &&
         a.ff_dim == b.ff_dim && a.head_hidden == b.head_hidden &&
         a.target_embed_dim == b.target_embed_dim;
}

void make_policy_params(const PolicyConfig& cfg, const std::string& prefix, uint64_t seed,
                        ParamStore& store, bool zero_action_head) {
  cfg.validate();
  const int D = cfg.hidden_dim, F = cfg.ff_dim, Hh = cfg.head_hidden, E = cfg.target_embed_dim;

  std::vector<std::string> names;
  const auto add = [&](const std::string& sub, std::vector<int> shape) {
    const std::string name = prefix + "/" + sub;
    store.create(name, std::move(shape));
    names.push_back(name);
  };
  const auto add_ln = [&](const std::string& sub) {
    add(sub + "/g", {D});
    add(sub + "/b", {D});
  };

  add("map/init/w", {1, D});
  add("map/init/b", {D});
  for (int r = 0; r < 2; ++r) {
    const std::string base = "map/r" + std::to_string(r);
    add_ln(base + "/ln");
    add(base + "/rel/w1", {10, D});
    add(base + "/rel/b1", {D});
    add(base + "/rel/w2", {D, D});
    add(base + "/rel/b2", {D});
    add(base + "/wo", {D, D});
    add(base + "/bo", {D});
  }
  add_ln("map/out_ln");

  add("enc/w1", {8, D});
  add("enc/b1", {D});
  add("enc/w2", {D, D});
  add("enc/b2", {D});

  for (int m = 0; m < cfg.num_blocks; ++m) {
    const std::string base = "blk" + std::to_string(m);
    add_ln(base + "/a2t/ln");
    for (const char* w : {"wq", "wk", "wv", "wo"}) add(base + "/a2t/" + std::string(w), {D, D});
    for (const char* b : {"bq", "bk", "bv", "bo"}) add(base + "/a2t/" + std::string(b), {D});
    for (const char* sub : {"a2a", "a2m"}) {
      const std::string s = base + "/" + sub;
      add_ln(s + "/ln");
      add(s + "/rel/w1", {5, D});
      add(s + "/rel/b1", {D});
      add(s + "/rel/w2", {D, D});
      add(s + "/rel/b2", {D});
      add(s + "/wo", {D, D});
      add(s + "/bo", {D});
    }
    add_ln(base + "/ff/ln");
    add(base + "/ff/w1", {D, F});
    add(base + "/ff/b1", {F});
    add(base + "/ff/w2", {F, D});
    add(base + "/ff/b2", {D});
  }
  add_ln("final_ln");

  if (cfg.role == Role::kTeacherAdversary) {
    add("target/embed", {E});
    add("target/w1", {E + 5, D});
    add("target/b1", {D});
    add("target/w2", {D, D});
    add("target/b2", {D});
  }

  add("head/w1", {D, Hh});
  add("head/b1", {Hh});
  add("head/w2", {Hh, Hh});
  add("head/b2", {Hh});
  add("head/w3", {Hh, 2});
  add("head/b3", {2});

  for (const std::string& name : names) {
    Tensor& t = store.get(name);
    const std::string leafname = last_component(name);
    if (leafname == "g") {  // layer-norm gains
      for (double& v : t.data) v = 1.0;
      continue;
    }
    if (!leafname.empty() && leafname[0] == 'b') continue;  // biases stay zero
    if (zero_action_head && name == prefix + "/head/w3") continue;
    Rng rng(stream_seed(seed, name));
    fill_truncated_normal(t, rng, kInitStd);
  }
}

MapContext build_map_context(ad::Tape& tape, const LaneGraph& graph) {
  const int K = static_cast<int>(graph.nodes.size());
  if (K < 1) throw std::invalid_argument("build_map_context: empty graph");

  std::vector<std::vector<int>> preds(static_cast<size_t>(K));
  for (const LaneNode& nd : graph.nodes) {
    for (const int s : nd.successors) preds[static_cast<size_t>(s)].push_back(nd.id);
  }

  MapContext ctx;
  ctx.graph = &graph;
  ctx.node_poses.reserve(static_cast<size_t>(K));
  for (const LaneNode& nd : graph.nodes) {
    ctx.node_poses.push_back({nd.position.x, nd.position.y, nd.heading});
  }

  // Relations: 0 self, 1 successor, 2 predecessor, 3 left, 4 right.
  std::vector<std::pair<int, int>> rel_pairs;  // (relation, neighbor)
  std::vector<double> feat_rows;
  for (int i = 0; i < K; ++i) {
    const LaneNode& nd = graph.nodes[static_cast<size_t>(i)];
    rel_pairs.clear();
    rel_pairs.emplace_back(0, i);
    for (const int s : nd.successors) rel_pairs.emplace_back(1, s);
    for (const int p : preds[static_cast<size_t>(i)]) rel_pairs.emplace_back(2, p);
    if (nd.left_neighbor >= 0) rel_pairs.emplace_back(3, nd.left_neighbor);
    if (nd.right_neighbor >= 0) rel_pairs.emplace_back(4, nd.right_neighbor);

    const int start = static_cast<int>(ctx.nbr_idx.size());
    for (const auto& [rel, j] : rel_pairs) {
      ctx.nbr_idx.push_back(j);
      const PairPose pp =
          pairpose(ctx.node_poses[static_cast<size_t>(i)], ctx.node_poses[static_cast<size_t>(j)]);
      double onehot[5] = {0, 0, 0, 0, 0};
      onehot[rel] = 1.0;
      for (const double o : onehot) feat_rows.push_back(o);
      feat_rows.push_back(pp.dx * kPosScale);
      feat_rows.push_back(pp.dy * kPosScale);
      feat_rows.push_back(pp.sin_dth);
      feat_rows.push_back(pp.cos_dth);
      feat_rows.push_back(pp.dist * kPosScale);
    }
    ctx.nbr_ranges.emplace_back(start, static_cast<int>(ctx.nbr_idx.size()));
  }

  ctx.rel_feats = tape.constant(
      Tensor::matrix(static_cast<int>(ctx.nbr_idx.size()), 10, std::move(feat_rows)));
  std::vector<double> widths(static_cast<size_t>(K));
  for (int i = 0; i < K; ++i) widths[static_cast<size_t>(i)] = graph.nodes[static_cast<size_t>(i)].width * kDimScale;
  ctx.width_feat = tape.constant(Tensor::matrix(K, 1, std::move(widths)));
  return ctx;
}

ad::Var encode_map(ad::Tape& tape, const PolicyConfig& cfg, const MountedParams& params,
                   const std::string& prefix, const MapContext& map_ctx) {
  cfg.validate();
  const auto P = [&](const std::string& sub) { return params.at(prefix + "/" + sub); };
  ad::Var f = linear(map_ctx.width_feat, P("map/init/w"), P("map/init/b"));
  for (int r = 0; r < 2; ++r) {
    const std::string base = "map/r" + std::to_string(r);
    const ad::Var y = ln_affine(f, P(base + "/ln/g"), P(base + "/ln/b"));
    const ad::Var rel = mlp2(map_ctx.rel_feats, P(base + "/rel/w1"), P(base + "/rel/b1"),
                             P(base + "/rel/w2"), P(base + "/rel/b2"));
    const ad::Var kv = ad::add(ad::gather_rows(y, map_ctx.nbr_idx), rel);
    const ad::Var att = multihead(y, kv, kv, map_ctx.nbr_ranges, cfg.num_heads, tape);
    f = ad::add(f, linear(att, P(base + "/wo"), P(base + "/bo")));
  }
  return ln_affine(f, P("map/out_ln/g"), P("map/out_ln/b"));
}

StepGeometry build_step_geometry(ad::Tape& tape, const std::vector<JointState>& history,
                                 ad::Var length, ad::Var width, const MapContext& map_ctx,
                                 int knn_k) {
  if (history.empty()) throw std::invalid_argument("build_step_geometry: empty history");
  const int H = static_cast<int>(history.size());
  const int N = static_cast<int>(tape.value(history[0].x).size());
  const int K = static_cast<int>(map_ctx.node_poses.size());

  StepGeometry g;
  g.n_actors = N;
  g.history_len = H;
  g.current = history.back();

  // State-encoder inputs: per history step, the past pose in the current
  // frame plus scaled speed and box dims; assembled time-major then permuted
  // to actor-major (row i*H + t', oldest first).
  std::vector<ad::Var> time_major;
  for (int t = 0; t < H; ++t) {
    const JointState& past = history[static_cast<size_t>(t)];
    const ad::Var pp = ad::pairpose_pair(g.current.x, g.current.y, g.current.theta, past.x, past.y,
                                         past.theta);
    const ad::Var scaled = scale_pairpose(tape, pp);
    const ad::Var vcol = ad::reshape(ad::mul_scalar(past.v, kSpeedScale), {N, 1});
    const ad::Var lcol = ad::reshape(ad::mul_scalar(length, kDimScale), {N, 1});
    const ad::Var wcol = ad::reshape(ad::mul_scalar(width, kDimScale), {N, 1});
    time_major.push_back(ad::concat_cols({scaled, vcol, lcol, wcol}));
  }
  const ad::Var stacked = ad::concat_rows(time_major);
  std::vector<int> perm(static_cast<size_t>(N) * H);
  for (int i = 0; i < N; ++i) {
    for (int t = 0; t < H; ++t) perm[static_cast<size_t>(i) * H + t] = t * N + i;
  }
  g.hist_feat = ad::gather_rows(stacked, perm);

  for (int t = 0; t < H; ++t) {
    const JointState& s = history[static_cast<size_t>(t)];
    g.a2a_rows.push_back(
        scale_pairpose(tape, ad::pairpose_cross(s.x, s.y, s.theta, s.x, s.y, s.theta)));
  }

  // Actor-to-map pairs: knn node selection by current position (values), pose
  // rows differentiable through the actor side only.
  g.knn = std::min(knn_k, K);
  std::vector<double> nx(static_cast<size_t>(K)), ny(static_cast<size_t>(K)),
      nth(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) {
    nx[static_cast<size_t>(k)] = map_ctx.node_poses[static_cast<size_t>(k)].x;
    ny[static_cast<size_t>(k)] = map_ctx.node_poses[static_cast<size_t>(k)].y;
    nth[static_cast<size_t>(k)] = map_ctx.node_poses[static_cast<size_t>(k)].heading;
  }
  const ad::Var mx = tape.constant(Tensor::from_vector(nx));
  const ad::Var my = tape.constant(Tensor::from_vector(ny));
  const ad::Var mth = tape.constant(Tensor::from_vector(nth));
  const ad::Var allpairs =
      ad::pairpose_cross(g.current.x, g.current.y, g.current.theta, mx, my, mth);  // [N*K, 5]

  const Tensor& cx = tape.value(g.current.x);
  const Tensor& cy = tape.value(g.current.y);
  std::vector<int> pick;
  pick.reserve(static_cast<size_t>(N) * g.knn);
  for (int i = 0; i < N; ++i) {
    const std::vector<int> ids =
        nearest_nodes(*map_ctx.graph, {cx.data[static_cast<size_t>(i)], cy.data[static_cast<size_t>(i)]}, g.knn);
    for (const int id : ids) {
      g.a2m_node_idx.push_back(id);
      pick.push_back(i * K + id);
    }
  }
  g.a2m_rows = scale_pairpose(tape, ad::gather_rows(allpairs, pick));
  return g;
}

PolicyOutput policy_forward(ad::Tape& tape, const PolicyConfig& cfg, const MountedParams& params,
                            const std::string& prefix, ad::Var map_feats,
                            const StepGeometry& geom, const TargetAssignment& targets,
                            const ActionLimits& limits) {
  cfg.validate();
  const int N = geom.n_actors, H = geom.history_len, D = cfg.hidden_dim;
  if (H != cfg.history_len) {
    throw std::invalid_argument("policy_forward: history length != config");
  }
  const auto P = [&](const std::string& sub) { return params.at(prefix + "/" + sub); };

  ad::Var x = mlp2(geom.hist_feat, P("enc/w1"), P("enc/b1"), P("enc/w2"), P("enc/b2"));
  const ad::Var pe = tape.constant(sinusoidal_rows(N, H, D));

  // One range per history row: row i*H+t attends over actor i's H rows.
  std::vector<std::pair<int, int>> actor_ranges;
  for (int i = 0; i < N; ++i) {
    for (int t = 0; t < H; ++t) actor_ranges.emplace_back(i * H, (i + 1) * H);
  }
  std::vector<std::pair<int, int>> pair_ranges;
  for (int i = 0; i < N; ++i) pair_ranges.emplace_back(i * N, (i + 1) * N);
  std::vector<std::pair<int, int>> knn_ranges;
  for (int i = 0; i < N; ++i) knn_ranges.emplace_back(i * geom.knn, (i + 1) * geom.knn);
  std::vector<int> cur_idx(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) cur_idx[static_cast<size_t>(i)] = i * H + (H - 1);

  for (int m = 0; m < cfg.num_blocks; ++m) {
    const std::string base = "blk" + std::to_string(m);
    {
      const ad::Var y = ln_affine(x, P(base + "/a2t/ln/g"), P(base + "/a2t/ln/b"));
      const ad::Var yp = ad::add(y, pe);
      const ad::Var q = linear(yp, P(base + "/a2t/wq"), P(base + "/a2t/bq"));
      const ad::Var k = linear(yp, P(base + "/a2t/wk"), P(base + "/a2t/bk"));
      const ad::Var v = linear(y, P(base + "/a2t/wv"), P(base + "/a2t/bv"));
      const ad::Var att = multihead(q, k, v, actor_ranges, cfg.num_heads, tape);
      x = ad::add(x, linear(att, P(base + "/a2t/wo"), P(base + "/a2t/bo")));
    }
    {
      const ad::Var y = ln_affine(x, P(base + "/a2a/ln/g"), P(base + "/a2a/ln/b"));
      for (int t = 0; t < H; ++t) {
        std::vector<int> idx_t(static_cast<size_t>(N));
        for (int i = 0; i < N; ++i) idx_t[static_cast<size_t>(i)] = i * H + t;
        const ad::Var rows = ad::gather_rows(y, idx_t);
        const ad::Var rel = mlp2(geom.a2a_rows[static_cast<size_t>(t)], P(base + "/a2a/rel/w1"),
                                 P(base + "/a2a/rel/b1"), P(base + "/a2a/rel/w2"),
                                 P(base + "/a2a/rel/b2"));
        const ad::Var kv = ad::add(ad::repeat_mat(rows, N), rel);
        const ad::Var att = multihead(rows, kv, kv, pair_ranges, cfg.num_heads, tape);
        x = ad::scatter_rows_add(x, idx_t, linear(att, P(base + "/a2a/wo"), P(base + "/a2a/bo")));
      }
    }
    {
      const ad::Var y = ln_affine(x, P(base + "/a2m/ln/g"), P(base + "/a2m/ln/b"));
      const ad::Var rows = ad::gather_rows(y, cur_idx);
      const ad::Var rel = mlp2(geom.a2m_rows, P(base + "/a2m/rel/w1"), P(base + "/a2m/rel/b1"),
                               P(base + "/a2m/rel/w2"), P(base + "/a2m/rel/b2"));
      const ad::Var kv = ad::add(ad::gather_rows(map_feats, geom.a2m_node_idx), rel);
      const ad::Var att = multihead(rows, kv, kv, knn_ranges, cfg.num_heads, tape);
      x = ad::scatter_rows_add(x, cur_idx, linear(att, P(base + "/a2m/wo"), P(base + "/a2m/bo")));
    }
    {
      const ad::Var y = ln_affine(x, P(base + "/ff/ln/g"), P(base + "/ff/ln/b"));
      const ad::Var h = ad::vtanh(linear(y, P(base + "/ff/w1"), P(base + "/ff/b1")));
      x = ad::add(x, linear(h, P(base + "/ff/w2"), P(base + "/ff/b2")));
    }
  }

  ad::Var feats = ad::gather_rows(ln_affine(x, P("final_ln/g"), P("final_ln/b")), cur_idx);

  if (cfg.role == Role::kTeacherAdversary && !targets.empty()) {
    std::vector<int> ti, tj;
    for (const auto& [i, j] : targets) {
      if (i < 0 || i >= N || j < 0 || j >= N) {
        throw std::out_of_range("policy_forward: target index out of range");
      }
      ti.push_back(i);
      tj.push_back(j);
    }
    const ad::Var ax = ad::gather_elems(geom.current.x, ti);
    const ad::Var ay = ad::gather_elems(geom.current.y, ti);
    const ad::Var ath = ad::gather_elems(geom.current.theta, ti);
    const ad::Var bx = ad::gather_elems(geom.current.x, tj);
    const ad::Var by = ad::gather_elems(geom.current.y, tj);
    const ad::Var bth = ad::gather_elems(geom.current.theta, tj);
    const ad::Var pp = scale_pairpose(tape, ad::pairpose_pair(ax, ay, ath, bx, by, bth));
    const ad::Var e = ad::rows_of(P("target/embed"), static_cast<int>(ti.size()));
    const ad::Var inp = ad::concat_cols({e, pp});
    const ad::Var delta =
        mlp2(inp, P("target/w1"), P("target/b1"), P("target/w2"), P("target/b2"));
    feats = ad::scatter_rows_add(feats, ti, delta);
  }

  ad::Var o = ad::vtanh(linear(feats, P("head/w1"), P("head/b1")));
  o = ad::vtanh(linear(o, P("head/w2"), P("head/b2")));
  o = linear(o, P("head/w3"), P("head/b3"));
  const ad::Var squashed = ad::vtanh(o);
  const ad::Var lim = tape.constant(Tensor::from_vector({limits.u_max, limits.phi_max}));
  return {feats, ad::mul_rowvec(squashed, lim)};
}

}  // namespace selfplay
