#include "selfplay/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "selfplay/evalkit.hpp"
#include "selfplay/log.hpp"
#include "selfplay/objectives.hpp"
#include "selfplay/support.hpp"

namespace selfplay {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("short write to " + path.string());
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(what + ": " + e.what());
  }
}

struct GenOpts {
  std::string out;
  CorpusSpec spec;
  bool safety = false;
};

struct TrainOpts {
  std::string corpus;
  std::string eval_corpus;
  std::string config_file;
  std::string out;
  json overrides = json::object();
};

struct EvalOpts {
  std::string checkpoint;
  std::string corpus;
  std::string out;
  std::string policy = "student";
  bool scripted = false;
  int workers = 1;
};

struct AttackOpts {
  std::string checkpoint;
  std::string corpus;
  std::string out;
  int king_steps = -1;
  double king_step_size = 0.0;
  double teacher_frac = 0.0;
  uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  int workers = 0;
};

struct GradOpts {
  double tolerance = 1e-4;
  int seeds = 20;
  int actors = 4;
  int horizon = 12;
  int coords = 6;
  double fd_step = 1e-5;
  uint64_t seed = 0;
  std::string out;
};

struct ReportOpts {
  std::string pareto_dir;
  std::vector<std::string> logs;
  std::string out;
};

void cmd_gen_data(const GenOpts& o) {
  if (o.spec.scenarios < 1) throw std::invalid_argument("--scenarios must be at least 1");
  if (o.spec.actors_min > o.spec.actors_max) {
    throw std::invalid_argument("--actors-min exceeds --actors-max");
  }
  const std::vector<Scenario> corpus =
      o.safety ? gen_safety_corpus(o.spec.scenarios, o.spec.seed) : gen_corpus(o.spec);
  fs::create_directories(o.out);
  save_corpus(o.out, corpus, o.spec.seed);
  std::cout << "wrote " << corpus.size() << " scenarios to " << o.out << "\n";
}

void cmd_train(const TrainOpts& o) {
  json cfgj = json::object();
  if (!o.config_file.empty()) {
    cfgj = parse_json(read_text(o.config_file), "config file");
    if (!cfgj.is_object()) throw std::invalid_argument("config file: expected a JSON object");
  }
  for (auto it = o.overrides.begin(); it != o.overrides.end(); ++it) cfgj[it.key()] = it.value();
  const TrainConfig cfg = train_config_from_json(cfgj.dump());
  cfg.validate();

  const std::vector<Scenario> corpus = load_corpus(o.corpus);
  std::vector<Scenario> eval_corpus;
  const std::vector<Scenario>* eval_ptr = nullptr;
  if (!o.eval_corpus.empty()) {
    eval_corpus = load_corpus(o.eval_corpus);
    eval_ptr = &eval_corpus;
  }

  fs::create_directories(o.out);
  write_text(fs::path(o.out) / "resolved_config.json", train_config_to_json(cfg));
  std::ofstream csv(fs::path(o.out) / "training_log.csv", std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write training log in " + o.out);

  const Checkpoint ck = run_training(cfg, corpus, &csv, eval_ptr);
  csv.flush();
  if (!csv) throw std::runtime_error("short write to training log in " + o.out);
  const fs::path ck_path = fs::path(o.out) / "checkpoint_final.aspt";
  save_checkpoint(ck, ck_path.string());
  std::cout << "mode " << cfg.mode << ": " << ck.step << " steps, checkpoint at "
            << ck_path.string() << "\n";
}

void cmd_eval(const EvalOpts& o) {
  const std::vector<Scenario> corpus = load_corpus(o.corpus);
  fs::create_directories(o.out);

  if (o.policy == "log-replay") {
    if (o.scripted) throw std::invalid_argument("eval: --scripted needs --policy student");
    std::vector<Rollout> rolls(corpus.size());
    run_indexed(static_cast<int>(corpus.size()), o.workers, [&](int i) {
      rolls[static_cast<size_t>(i)] = simulate_log_replay(corpus[static_cast<size_t>(i)]);
    });
    const MetricsReport rep = metrics_from_rollouts(corpus, rolls);
    write_text(fs::path(o.out) / "metrics.json", metrics_to_json(rep));
    write_text(fs::path(o.out) / "metrics.csv", metrics_to_csv(rep));
    std::cout << "fde " << rep.fde << " collision% " << rep.collision_pct << " jsd "
              << rep.jsd_composite << "\n";
    return;
  }

  if (o.checkpoint.empty()) {
    throw std::invalid_argument("eval: --checkpoint required for --policy student");
  }
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  PolicyConfig scfg = ck.config.arch;
  scfg.role = Role::kStudent;
  const SimPolicy policy{scfg, &ck.student, "student", {}};

  if (o.scripted) {
    const double pct =
        scripted_eval_collision_pct(policy, corpus, ck.config.limits, o.workers);
    json j;
    j["collision_pct"] = pct;
    j["scenarios"] = corpus.size();
    write_text(fs::path(o.out) / "scripted_eval.json", j.dump(2));
    std::cout << "scripted collision% " << pct << " over " << corpus.size() << " scenarios\n";
    return;
  }

  const MetricsReport rep = evaluate(policy, corpus, ck.config.limits, o.workers);
  write_text(fs::path(o.out) / "metrics.json", metrics_to_json(rep));
  write_text(fs::path(o.out) / "metrics.csv", metrics_to_csv(rep));
  std::cout << "fde " << rep.fde << " collision% " << rep.collision_pct << " jsd "
            << rep.jsd_composite << "\n";
}

void cmd_attack(const AttackOpts& o) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const std::vector<Scenario> corpus = load_corpus(o.corpus);
  if (corpus.empty()) throw std::invalid_argument("attack: empty corpus");

  TrainConfig cfg = ck.config;
  if (o.king_steps >= 0) cfg.king_steps = o.king_steps;
  if (o.king_step_size > 0.0) cfg.king_step_size = o.king_step_size;
  if (o.teacher_frac > 0.0) cfg.teacher_frac = o.teacher_frac;
  if (o.workers >= 1) cfg.workers = o.workers;
  if (o.seed_opt != nullptr && o.seed_opt->count() > 0) cfg.seed = o.seed;

  PolicyConfig scfg = cfg.arch;
  scfg.role = Role::kStudent;

  std::vector<Scenario> attacked(corpus.size());
  std::vector<KingResult> verdicts(corpus.size());
  run_indexed(static_cast<int>(corpus.size()), cfg.workers, [&](int i) {
    const Scenario& scn = corpus[static_cast<size_t>(i)];
    Rng rng(stream_seed(cfg.seed, "attack/" + std::to_string(i)));
    const Partition part = sample_partition(scn.num_actors(), rng, cfg.teacher_frac);
    KingResult kr = king_attack(scn, scfg, ck.student, "student", part, cfg);
    Scenario adv = scn;
    adv.id = scn.id + "_adv";
    for (const auto& [actor, acts] : kr.attacked) {
      adv.scripts[actor] = ActorScript{"adversarial", acts};
    }
    adv.validate();
    attacked[static_cast<size_t>(i)] = std::move(adv);
    verdicts[static_cast<size_t>(i)] = std::move(kr);
  });

  fs::create_directories(fs::path(o.out) / "attacked");
  save_corpus((fs::path(o.out) / "attacked").string(), attacked, cfg.seed);

  int hits = 0;
  int feasible = 0;
  json rows = json::array();
  for (size_t i = 0; i < corpus.size(); ++i) {
    const KingResult& kr = verdicts[i];
    hits += kr.target_hit;
    feasible += kr.feasible;
    rows.push_back({{"id", corpus[i].id},
                    {"target_hit", kr.target_hit},
                    {"feasible", kr.feasible},
                    {"loss_before", kr.loss_before},
                    {"loss_after", kr.loss_after}});
  }
  json j;
  j["scenarios"] = corpus.size();
  j["target_hits"] = hits;
  j["feasible"] = feasible;
  j["per_scenario"] = rows;
  write_text(fs::path(o.out) / "attack_report.json", j.dump(2));
  std::cout << "attacked " << corpus.size() << " scenarios: " << hits << " target hits, "
            << feasible << " feasible\n";
}

int cmd_gradcheck(const GradOpts& o) {
  const GradCheckReport rep =
      run_gradcheck(o.seeds, o.actors, o.horizon, o.coords, o.fd_step, o.seed);
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    json j;
    j["max_rel_err"] = rep.max_rel_err;
    j["coords"] = rep.coords;
    j["seeds"] = rep.seeds;
    j["tolerance"] = o.tolerance;
    write_text(fs::path(o.out) / "gradcheck.json", j.dump(2));
  }
  std::cout << "gradcheck max_rel_err " << rep.max_rel_err << " over " << rep.coords
            << " coordinates (" << rep.seeds << " seeds)\n";
  return rep.max_rel_err <= o.tolerance ? 0 : 1;
}

void report_pareto(const std::string& dir, const fs::path& out) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("report: no point files in " + dir);

  std::vector<ParetoPoint> sweep;
  ParetoPoint selfplay;
  int selfplay_count = 0;
  for (const fs::path& f : files) {
    const json j = parse_json(read_text(f.string()), f.string());
    ParetoPoint p;
    p.w_col = j.at("w_col").get<double>();
    p.nominal_collision_pct = j.at("nominal_collision_pct").get<double>();
    p.safety_collision_pct = j.at("safety_collision_pct").get<double>();
    if (j.at("label").get<std::string>() == "selfplay") {
      selfplay = p;
      ++selfplay_count;
    } else {
      sweep.push_back(p);
    }
  }
  if (selfplay_count != 1) {
    throw std::invalid_argument("report: expected exactly one point labeled selfplay");
  }
  std::sort(sweep.begin(), sweep.end(),
            [](const ParetoPoint& a, const ParetoPoint& b) { return a.w_col < b.w_col; });
  const ParetoReport rep = pareto_table(sweep, selfplay);
  write_text(out / "pareto.csv", pareto_to_csv(rep));
  write_text(out / "pareto.json", pareto_to_json(rep));
  std::cout << "pareto: selfplay " << (rep.selfplay_dominated ? "dominated" : "not dominated")
            << " by " << sweep.size() << " sweep points\n";
}

void report_logs(const std::vector<std::string>& logs, const fs::path& out) {
  std::ostringstream merged;
  std::string header;
  for (const std::string& path : logs) {
    std::istringstream in(read_text(path));
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("report: empty log " + path);
    if (header.empty()) {
      header = line;
      merged << "run," << header << "\n";
    } else if (line != header) {
      throw std::invalid_argument("report: log headers differ: " + path);
    }
    const std::string run = fs::path(path).stem().string();
    while (std::getline(in, line)) {
      if (!line.empty()) merged << run << ',' << line << "\n";
    }
  }
  write_text(out / "training_curves.csv", merged.str());
  std::cout << "merged " << logs.size() << " training logs\n";
}

void cmd_report(const ReportOpts& o) {
  if (o.pareto_dir.empty() && o.logs.empty()) {
    throw std::invalid_argument("report: need --pareto and/or --logs");
  }
  fs::create_directories(o.out);
  if (!o.pareto_dir.empty()) report_pareto(o.pareto_dir, o.out);
  if (!o.logs.empty()) report_logs(o.logs, o.out);
}

}  // namespace

GradCheckReport run_gradcheck(int seeds, int actors, int horizon, int coords_per_seed,
                              double fd_step, uint64_t master_seed) {
  if (seeds < 1 || actors < 2 || horizon < 2 || coords_per_seed < 1 || !(fd_step > 0.0)) {
    throw std::invalid_argument("gradcheck: bad arguments");
  }
  const ObjectiveConfig obj;
  const ActionLimits lim;
  GradCheckReport rep;
  rep.seeds = seeds;

  for (int s = 0; s < seeds; ++s) {
    const uint64_t seed = stream_seed(master_seed, "gradcheck/" + std::to_string(s));
    CorpusSpec cs;
    cs.scenarios = 1;
    cs.actors_min = actors;
    cs.actors_max = actors;
    cs.horizon = horizon;
    cs.seed = seed;
    const Scenario scn = gen_scenario(cs, 0);
    Rng prng(stream_seed(seed, "part"));
    const Partition part = sample_partition(actors, prng, 0.3);
    const TargetAssignment tgt = part.target_assignment();

    PolicyConfig scfg;
    scfg.role = Role::kStudent;
    PolicyConfig acfg;
    acfg.role = Role::kTeacherAdversary;
    ParamStore student;
    ParamStore adversary;
    make_policy_params(scfg, "student", stream_seed(seed, "student"), student, false);
    make_policy_params(acfg, "adversary", stream_seed(seed, "adversary"), adversary, false);

    const auto build_spec = [&](const MountedParams& adv_m, ad::Var adv_feat,
                                const MountedParams& stu_m, ad::Var stu_feat) {
      RolloutSpec spec;
      spec.limits = lim;
      spec.slots.push_back(PolicySlot{&acfg, &adv_m, "adversary", adv_feat, tgt});
      spec.slots.push_back(PolicySlot{&scfg, &stu_m, "student", stu_feat, {}});
      spec.bindings.assign(static_cast<size_t>(actors), ActorBinding{});
      for (const int i : part.teacher_set) {
        spec.bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
        spec.bindings[static_cast<size_t>(i)].policy_slot = 0;
      }
      for (const int i : part.student_set) {
        spec.bindings[static_cast<size_t>(i)].kind = BindingKind::kPolicy;
        spec.bindings[static_cast<size_t>(i)].policy_slot = 1;
      }
      return spec;
    };

    const auto loss_value = [&](const ParamStore& stu) {
      ad::Tape tape;
      MountedParams stu_m(tape, stu, false);
      MountedParams adv_m(tape, adversary, false);
      MapContext ctx = build_map_context(tape, scn.map);
      const ad::Var af = encode_map(tape, acfg, adv_m, "adversary", ctx);
      const ad::Var sf = encode_map(tape, scfg, stu_m, "student", ctx);
      const RolloutRecording rec = run_rollout(tape, scn, ctx, build_spec(adv_m, af, stu_m, sf));
      return tape.scalar_value(student_loss(tape, obj, scn, part, rec).total);
    };

    std::map<std::string, Tensor> bp;
    {
      ad::Tape tape;
      MountedParams stu_m(tape, student, true);
      MountedParams adv_m(tape, adversary, false);
      MapContext ctx = build_map_context(tape, scn.map);
      const ad::Var af = encode_map(tape, acfg, adv_m, "adversary", ctx);
      const ad::Var sf = encode_map(tape, scfg, stu_m, "student", ctx);
      const RolloutRecording rec = run_rollout(tape, scn, ctx, build_spec(adv_m, af, stu_m, sf));
      const StudentLoss sl = student_loss(tape, obj, scn, part, rec);
      tape.backward(sl.total);
      bp = stu_m.grads();
    }

    struct Coord {
      std::string name;
      int64_t idx = 0;
      double g = 0.0;
    };
    std::vector<Coord> all;
    for (const auto& [name, g] : bp) {
      for (int64_t i = 0; i < g.size(); ++i) {
        all.push_back(Coord{name, i, g.data[static_cast<size_t>(i)]});
      }
    }
    const int top = std::min<int64_t>(coords_per_seed / 2, static_cast<int64_t>(all.size()));
    std::partial_sort(all.begin(), all.begin() + top, all.end(),
                      [](const Coord& a, const Coord& b) { return std::fabs(a.g) > std::fabs(b.g); });
    std::vector<Coord> picked(all.begin(), all.begin() + top);
    Rng crng(stream_seed(seed, "coords"));
    while (static_cast<int>(picked.size()) < coords_per_seed && !all.empty()) {
      picked.push_back(all[static_cast<size_t>(crng.uniform_int(all.size()))]);
    }

    for (const Coord& c : picked) {
      double& slot = student.get(c.name).data[static_cast<size_t>(c.idx)];
      const double orig = slot;
      slot = orig + fd_step;
      const double lp = loss_value(student);
      slot = orig - fd_step;
      const double lm = loss_value(student);
      slot = orig;
      const double fd = (lp - lm) / (2.0 * fd_step);
      const double rel =
          std::fabs(c.g - fd) / std::max({1.0, std::fabs(c.g), std::fabs(fd)});
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.coords;
    }
  }
  return rep;
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Asymmetric self-play training for lane-graph driving policies"};
  app.require_subcommand(1);
  int rc = 0;

  // gen-data
  auto g = std::make_shared<GenOpts>();
  CLI::App* gd = app.add_subcommand("gen-data", "Generate a scenario corpus");
  gd->add_option("--out", g->out, "Output directory")->required();
  gd->add_option("--scenarios", g->spec.scenarios, "Number of scenarios");
  gd->add_option("--actors-min", g->spec.actors_min, "Minimum actors per scenario");
  gd->add_option("--actors-max", g->spec.actors_max, "Maximum actors per scenario");
  gd->add_option("--horizon", g->spec.horizon, "Steps per scenario");
  gd->add_option("--history-len", g->spec.history_len, "History states per scenario");
  gd->add_option("--map-preset", g->spec.map_preset, "Map family")
      ->check(CLI::IsMember({"straight", "curved", "merge", "mixed"}));
  gd->add_option("--lane-width", g->spec.lane_width, "Lane width, meters");
  gd->add_option("--dt", g->spec.dt, "Step length, seconds");
  gd->add_option("--seed", g->spec.seed, "Corpus seed");
  gd->add_flag("--safety", g->safety,
               "Scripted cut-in / hard-brake / stopped-lead set instead of the nominal corpus");
  gd->callback([g] { cmd_gen_data(*g); });

  // train
  auto t = std::make_shared<TrainOpts>();
  CLI::App* tr = app.add_subcommand("train", "Train a policy on a corpus");
  tr->add_option("--corpus", t->corpus, "Training corpus directory")->required();
  tr->add_option("--eval-corpus", t->eval_corpus, "Held-out corpus for the CSV eval column");
  tr->add_option("--config", t->config_file, "JSON config file; flags override its keys");
  tr->add_option("--out", t->out, "Output directory")->required();

  const auto mir_i = [t, tr](const char* key, const char* help) {
    tr->add_option_function<int64_t>(
        dashed(key), [t, key](const int64_t& v) { t->overrides[key] = v; }, help);
  };
  const auto mir_u = [t, tr](const char* key, const char* help) {
    tr->add_option_function<uint64_t>(
        dashed(key), [t, key](const uint64_t& v) { t->overrides[key] = v; }, help);
  };
  const auto mir_f = [t, tr](const char* key, const char* help) {
    tr->add_option_function<double>(
        dashed(key), [t, key](const double& v) { t->overrides[key] = v; }, help);
  };
  const auto mir_b = [t, tr](const char* key, const char* help) {
    tr->add_option_function<bool>(
        dashed(key), [t, key](const bool& v) { t->overrides[key] = v; }, help);
  };

  tr->add_option_function<std::string>(
        "--mode", [t](const std::string& v) { t->overrides["mode"] = v; },
        "Training mode")
      ->check(CLI::IsMember({"selfplay", "il", "trafficsim", "curation"}));
  mir_i("total_steps", "Optimizer steps");
  mir_i("warmup_steps", "Linear warmup steps");
  mir_i("batch_size", "Scenarios per step");
  mir_f("lr_peak", "Peak learning rate");
  mir_f("clip_norm", "Global gradient norm clip");
  mir_f("w_col", "Collision prior weight (il/trafficsim family)");
  mir_f("teacher_frac", "Fraction of actors given to the proposer");
  mir_b("fairplay_three_player", "Split the proposer into adversary and demonstrator");
  mir_b("fairplay_replay", "Replay proposer actions between paired rollouts");
  mir_f("curation_step_frac", "Fine-tune steps as a fraction of total_steps");
  mir_f("curation_lr_frac", "Fine-tune peak LR as a fraction of lr_peak");
  mir_i("king_steps", "Attack gradient steps");
  mir_f("king_step_size", "Attack gradient step size");
  mir_i("eval_every", "Steps between CSV eval columns");
  mir_i("workers", "Scenario-level worker threads");
  mir_u("seed", "Master seed; all randomness derives from it via named streams");
  mir_f("objective_beta", "Realism weight in both losses");
  mir_f("objective_w_challenge", "Challenge weight in the proposer loss");
  mir_f("objective_w_solvable", "Demonstration weight in the proposer loss");
  mir_f("objective_lambda_dist", "Adversary-to-target pull weight");
  mir_f("objective_huber_delta", "Realism Huber width, meters");
  mir_f("objective_collision_buffer", "Extra circle separation, meters");
  mir_i("arch_hidden_dim", "Policy hidden width");
  mir_i("arch_num_blocks", "Policy attention blocks");
  mir_i("arch_num_heads", "Attention heads");
  mir_i("arch_history_len", "History states fed to the policy");
  mir_i("arch_knn_k", "Nearest map nodes per actor");
  mir_i("arch_ff_dim", "Feed-forward width");
  mir_i("arch_head_hidden", "Action head hidden width");
  mir_i("arch_target_embed_dim", "Adversary target embedding width");
  mir_f("adamw_beta1", "AdamW beta1");
  mir_f("adamw_beta2", "AdamW beta2");
  mir_f("adamw_eps", "AdamW epsilon");
  mir_f("adamw_weight_decay", "AdamW decoupled weight decay");
  mir_f("limits_u_max", "Acceleration limit, m/s^2");
  mir_f("limits_phi_max", "Steering limit, rad");

  tr->add_flag_callback(
      "--ablate-solvable", [t] { t->overrides["objective_w_solvable"] = 0.0; },
      "Drop the demonstration term from the proposer loss");
  tr->add_flag_callback(
      "--ablate-realism", [t] { t->overrides["objective_beta"] = 0.0; },
      "Drop the realism terms from both losses");
  tr->add_option_function<std::string>(
      "--fairplay",
      [t](const std::string& v) {
        bool three = false;
        bool replay = false;
        bool any = false;
        if (v != "none") {
          std::istringstream ss(v);
          std::string tok;
          while (std::getline(ss, tok, ',')) {
            if (tok == "3player") {
              three = true;
            } else if (tok == "replay") {
              replay = true;
            } else {
              throw CLI::ValidationError(
                  "--fairplay", "expected none, 3player, replay or 3player,replay");
            }
            any = true;
          }
          if (!any) {
            throw CLI::ValidationError("--fairplay",
                                       "expected none, 3player, replay or 3player,replay");
          }
        }
        t->overrides["fairplay_three_player"] = three;
        t->overrides["fairplay_replay"] = replay;
      },
      "Fair-play mechanisms: none, 3player, replay or 3player,replay");
  tr->callback([t] { cmd_train(*t); });

  // eval
  auto e = std::make_shared<EvalOpts>();
  CLI::App* ev = app.add_subcommand("eval", "Evaluate a policy on a corpus");
  ev->add_option("--checkpoint", e->checkpoint, "Checkpoint file");
  ev->add_option("--corpus", e->corpus, "Evaluation corpus directory")->required();
  ev->add_option("--out", e->out, "Output directory")->required();
  ev->add_option("--policy", e->policy, "Policy to evaluate")
      ->check(CLI::IsMember({"student", "log-replay"}));
  ev->add_flag("--scripted", e->scripted,
               "Scripted actors replay their scripts; report collision% of the rest");
  ev->add_option("--workers", e->workers, "Scenario-level worker threads");
  ev->callback([e] { cmd_eval(*e); });

  // attack
  auto a = std::make_shared<AttackOpts>();
  CLI::App* at = app.add_subcommand("attack", "Gradient-attack scenarios against a checkpoint");
  at->add_option("--checkpoint", a->checkpoint, "Checkpoint holding the policy to attack")
      ->required();
  at->add_option("--corpus", a->corpus, "Corpus to attack")->required();
  at->add_option("--out", a->out, "Output directory")->required();
  at->add_option("--king-steps", a->king_steps, "Attack gradient steps");
  at->add_option("--king-step-size", a->king_step_size, "Attack gradient step size");
  at->add_option("--teacher-frac", a->teacher_frac, "Fraction of actors made adversarial");
  a->seed_opt = at->add_option("--seed", a->seed, "Attack seed (default: checkpoint seed)");
  at->add_option("--workers", a->workers, "Scenario-level worker threads");
  at->callback([a] { cmd_attack(*a); });

  // gradcheck
  auto gc = std::make_shared<GradOpts>();
  CLI::App* gk = app.add_subcommand("gradcheck", "Compare rollout gradients to finite differences");
  gk->add_option("--tolerance", gc->tolerance, "Maximum allowed relative error");
  gk->add_option("--seeds", gc->seeds, "Randomized trials");
  gk->add_option("--actors", gc->actors, "Actors per trial scenario");
  gk->add_option("--horizon", gc->horizon, "Steps per trial rollout");
  gk->add_option("--coords", gc->coords, "Parameter coordinates probed per trial");
  gk->add_option("--fd-step", gc->fd_step, "Central difference step");
  gk->add_option("--seed", gc->seed, "Master seed");
  gk->add_option("--out", gc->out, "Optional directory for gradcheck.json");
  gk->callback([gc, &rc] { rc = cmd_gradcheck(*gc); });

  // report
  auto r = std::make_shared<ReportOpts>();
  CLI::App* rp = app.add_subcommand("report", "Assemble plot-data files from run artifacts");
  rp->add_option("--pareto", r->pareto_dir,
                 "Directory of point JSONs (one labeled selfplay) for the trade-off table");
  rp->add_option("--logs", r->logs, "Training CSVs to merge into one curve file");
  rp->add_option("--out", r->out, "Output directory")->required();
  rp->callback([r] { cmd_report(*r); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe);
    return code == 0 ? 0 : 2;
  } catch (const std::invalid_argument& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return rc;
}

}  // namespace selfplay
