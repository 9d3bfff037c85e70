#include "lbi/pipeline.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <sstream>

#include "lbi/model_common.hpp"

namespace lbi::pipeline {
namespace {

namespace fs = std::filesystem;
using torch::Tensor;

Tensor row_tensor(const std::vector<float>& v) {
  return torch::from_blob(const_cast<float*>(v.data()), {static_cast<int64_t>(v.size())})
      .clone();
}

void patch_terrain(std::vector<float>& state, const model::ModelLayout& L, int terrain) {
  const int base = env::kStateBlock * L.units();
  for (int k = 0; k < env::kNumTerrains; ++k) state[base + k] = k == terrain ? 1.0f : 0.0f;
}

std::string sanitize(const std::string& name) {
  std::string out = name;
  for (char& c : out)
    if (c == ':' || c == '/' || c == '\\') c = '_';
  return out;
}

double mean_of(const std::vector<double>& xs) {
  double m = 0.0;
  for (double x : xs) m += x;
  return xs.empty() ? 0.0 : m / static_cast<double>(xs.size());
}

double std_of(const std::vector<double>& xs) {
  const double m = mean_of(xs);
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return xs.empty() ? 0.0 : std::sqrt(v / static_cast<double>(xs.size()));
}

// Runs stages behind content-hash stamps in <out>/stamps so that reruns with
// an identical resolved config skip completed work but keep its metrics.
class StageRunner {
 public:
  StageRunner(fs::path out_dir, json* stages) : dir_(std::move(out_dir)), stages_(stages) {
    fs::create_directories(dir_ / "stamps");
  }

  json run(const std::string& name, const std::string& hash,
           const std::vector<fs::path>& artifacts, const std::function<json()>& fn) {
    const fs::path stamp = dir_ / "stamps" / (sanitize(name) + ".json");
    bool hit = fs::exists(stamp);
    json prev;
    if (hit) {
      prev = read_json_file(stamp);
      hit = prev.value("hash", "") == hash;
    }
    for (const auto& a : artifacts) hit = hit && fs::exists(a);

    json entry;
    entry["hash"] = hash;
    entry["cached"] = hit;
    if (hit) {
      entry["seconds"] = prev.value("seconds", 0.0);
      entry["metrics"] = prev.value("metrics", json::object());
    } else {
      const auto t0 = std::chrono::steady_clock::now();
      json metrics;
      try {
        metrics = fn();
      } catch (const ConfigError& e) {
        throw ConfigError("stage '" + name + "' failed: " + e.what());
      } catch (const std::exception& e) {
        throw DomainError("stage '" + name + "' failed: " + e.what());
      }
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
      entry["seconds"] = dt.count();
      entry["metrics"] = metrics;
      write_json_file(stamp, json{{"hash", hash},
                                  {"seconds", entry["seconds"]},
                                  {"metrics", metrics}});
    }
    (*stages_)[name] = entry;
    return entry["metrics"];
  }

 private:
  fs::path dir_;
  json* stages_;
};

// Greedy joint action for rollout steps; mirrors the evaluation rule.
std::vector<int> greedy_actions(solver::PolicyHandle& policy, const model::ModelLayout& L,
                                const std::vector<std::vector<float>>& obs,
                                const std::vector<std::vector<uint8_t>>& avail,
                                const std::vector<std::vector<float>>& qref) {
  const int n = L.n_max;
  const int a_max = L.a_max();
  Tensor obs_t = torch::zeros({n, L.obs_dim()});
  for (int i = 0; i < n; ++i)
    std::memcpy(obs_t[i].data_ptr<float>(), obs[i].data(), sizeof(float) * obs[i].size());
  Tensor qv = policy.q->forward(obs_t, torch::eye(n));
  auto q_a = qv.accessor<float, 2>();

  std::vector<int> acts(n, env::kActionNoop);
  for (int i = 0; i < n; ++i) {
    int best = -1;
    double best_score = 0.0;
    for (int a = 0; a < a_max; ++a) {
      if (!avail[i][a]) continue;
      double score;
      if (policy.mode == solver::PolicyMode::kSoftQ) {
        if (qref[i][a] <= 0.0f) continue;
        score = std::log(static_cast<double>(qref[i][a])) +
                static_cast<double>(q_a[i][a]) / policy.cfg.alpha;
      } else {
        score = q_a[i][a];
      }
      if (best < 0 || score > best_score) {
        best = a;
        best_score = score;
      }
    }
    if (best < 0) throw ContractViolation("no available action for a rollout agent");
    acts[i] = best;
  }
  return acts;
}

json eval_to_json(const std::string& name, const std::vector<uint64_t>& seeds,
                  const std::vector<solver::EvalResult>& results) {
  std::vector<double> wins, rets;
  json per_seed = json::array();
  for (size_t k = 0; k < results.size(); ++k) {
    wins.push_back(results[k].win_rate);
    rets.push_back(results[k].mean_return);
    per_seed.push_back(json{{"seed", seeds[k]},
                            {"win_rate", results[k].win_rate},
                            {"mean_return", results[k].mean_return},
                            {"std_return", results[k].std_return}});
  }
  return json{{"name", name},
              {"win_rate_mean", mean_of(wins)},
              {"win_rate_std", std_of(wins)},
              {"return_mean", mean_of(rets)},
              {"return_std", std_of(rets)},
              {"per_seed", per_seed}};
}

}  // namespace

env::Scenario resolve_scenario(const std::string& name) {
  std::vector<fs::path> tried;
  std::vector<fs::path> candidates{fs::path(name), fs::path(name + ".json")};
  if (const char* dir = std::getenv("LBI_SCENARIO_DIR"))
    candidates.push_back(fs::path(dir) / (name + ".json"));
  candidates.push_back(fs::path("scenarios") / (name + ".json"));
  for (const auto& c : candidates) {
    if (fs::exists(c) && fs::is_regular_file(c)) return env::Scenario::load(c);
    tried.push_back(c);
  }
  std::string msg = "scenario '" + name + "' not found; tried:";
  for (const auto& t : tried) msg += " " + t.string();
  throw ConfigError(msg);
}

std::vector<std::string> PipelineConfig::tags() const {
  std::vector<std::string> out;
  if (no_residual) out.push_back("wo-RT");
  if (no_image_ref) out.push_back("wo-IR");
  if (gt_image) out.push_back("GTI");
  if (no_reward_constraint) out.push_back("wo-RC");
  if (no_behavior_reg) out.push_back("wo-BR");
  if (gt_reward) out.push_back("GTR");
  return out;
}

void PipelineConfig::validate() const {
  if (scenarios.empty()) throw ConfigError("pipeline needs at least one scenario");
  if (episodes < 1) throw ConfigError("episodes per scenario must be positive");
  if (eval_episodes < 1) throw ConfigError("eval_episodes must be positive");
  if (solve_seeds.empty()) throw ConfigError("pipeline needs at least one solve seed");
  if (!(train_frac > 0.0 && train_frac < 1.0))
    throw ConfigError("train_frac must lie strictly between 0 and 1");
  data::parse_policy_kind(collect_policy);  // throws on unknown names
  const std::string solve = solve_scenario.empty() ? scenarios.front() : solve_scenario;
  const bool solve_in_data =
      std::find(scenarios.begin(), scenarios.end(), solve) != scenarios.end();
  if ((with_gtr || gt_reward) && !solve_in_data)
    throw ConfigError("ground-truth-reward arms need the solve scenario in the dataset");
}

json PipelineConfig::to_json() const {
  json scn = json::array();
  for (const auto& s : scenarios) scn.push_back(s);
  json seeds = json::array();
  for (uint64_t s : solve_seeds) seeds.push_back(s);
  return json{{"scenarios", scn},
              {"solve_scenario", solve_scenario},
              {"seed", seed},
              {"solve_seeds", seeds},
              {"episodes", episodes},
              {"collect_policy", collect_policy},
              {"eval_episodes", eval_episodes},
              {"train_frac", train_frac},
              {"tokenizer", tokenizer.to_json()},
              {"dynamics", dynamics.to_json()},
              {"reward", reward.to_json()},
              {"solver", solver.to_json()},
              {"bc", bc.to_json()},
              {"with_bc", with_bc},
              {"with_gtr", with_gtr},
              {"with_random", with_random},
              {"no_residual", no_residual},
              {"no_image_ref", no_image_ref},
              {"gt_image", gt_image},
              {"no_reward_constraint", no_reward_constraint},
              {"no_behavior_reg", no_behavior_reg},
              {"gt_reward", gt_reward},
              {"out_dir", out_dir.string()}};
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  if (j.contains("scenarios")) {
    c.scenarios.clear();
    for (const auto& s : j.at("scenarios")) c.scenarios.push_back(s.get<std::string>());
  }
  c.solve_scenario = j.value("solve_scenario", c.solve_scenario);
  c.seed = j.value("seed", c.seed);
  if (j.contains("solve_seeds")) {
    c.solve_seeds.clear();
    for (const auto& s : j.at("solve_seeds")) c.solve_seeds.push_back(s.get<uint64_t>());
  }
  c.episodes = j.value("episodes", c.episodes);
  c.collect_policy = j.value("collect_policy", c.collect_policy);
  c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
  c.train_frac = j.value("train_frac", c.train_frac);
  if (j.contains("tokenizer")) c.tokenizer = vq::VqConfig::from_json(j.at("tokenizer"));
  if (j.contains("dynamics")) c.dynamics = dyn::DynamicsConfig::from_json(j.at("dynamics"));
  if (j.contains("reward")) c.reward = reward::RewardConfig::from_json(j.at("reward"));
  if (j.contains("solver")) c.solver = solver::SolverConfig::from_json(j.at("solver"));
  if (j.contains("bc")) c.bc = solver::BcConfig::from_json(j.at("bc"));
  c.with_bc = j.value("with_bc", c.with_bc);
  c.with_gtr = j.value("with_gtr", c.with_gtr);
  c.with_random = j.value("with_random", c.with_random);
  c.no_residual = j.value("no_residual", c.no_residual);
  c.no_image_ref = j.value("no_image_ref", c.no_image_ref);
  c.gt_image = j.value("gt_image", c.gt_image);
  c.no_reward_constraint = j.value("no_reward_constraint", c.no_reward_constraint);
  c.no_behavior_reg = j.value("no_behavior_reg", c.no_behavior_reg);
  c.gt_reward = j.value("gt_reward", c.gt_reward);
  if (j.contains("out_dir")) c.out_dir = fs::path(j.at("out_dir").get<std::string>());
  return c;
}

json run_pipeline(const PipelineConfig& cfg_in) {
  PipelineConfig cfg = cfg_in;
  if (cfg.solve_scenario.empty()) cfg.solve_scenario = cfg.scenarios.front();
  cfg.validate();

  // Fold the ablation switches into the stage configs once, up front, so the
  // resolved snapshot and the stage hashes both see the effective values.
  cfg.dynamics.residual = cfg.dynamics.residual && !cfg.no_residual;
  cfg.dynamics.image_ref = cfg.dynamics.image_ref && !cfg.no_image_ref;
  cfg.reward.reward_constraint = cfg.reward.reward_constraint && !cfg.no_reward_constraint;
  cfg.solver.behavior_reg = cfg.solver.behavior_reg && !cfg.no_behavior_reg;
  cfg.solver.gt_image = cfg.solver.gt_image || cfg.gt_image;

  json no_dir = cfg.to_json();
  no_dir.erase("out_dir");
  const std::string run_hash = model::config_hash(no_dir);
  if (cfg.out_dir.empty()) cfg.out_dir = data_root() / "runs" / run_hash.substr(0, 12);
  fs::create_directories(cfg.out_dir);

  const json resolved = cfg.to_json();
  write_json_file(cfg.out_dir / "resolved_config.json", resolved);

  std::vector<env::Scenario> scns;
  for (const auto& name : cfg.scenarios) scns.push_back(resolve_scenario(name));
  env::Scenario solve_scn = resolve_scenario(cfg.solve_scenario);
  std::vector<env::Scenario> all = scns;
  all.push_back(solve_scn);
  const model::ModelLayout layout = model::ModelLayout::cover(all);
  const vision::TaskDescription task = vision::describe_victory(solve_scn, solve_scn.terrain_id);

  json stages = json::object();
  StageRunner runner(cfg.out_dir, &stages);
  json dataset = json::object();

  // --- collect ---------------------------------------------------------------
  std::vector<data::EpisodeStore> stores;
  std::vector<std::string> data_hashes;
  int solve_index = -1;
  for (size_t i = 0; i < scns.size(); ++i) {
    const fs::path dir = cfg.out_dir / "data" / scns[i].name;
    const std::string h = model::config_hash(json{{"stage", "collect"},
                                                  {"scenario", scns[i].to_json()},
                                                  {"episodes", cfg.episodes},
                                                  {"policy", cfg.collect_policy},
                                                  {"seed", cfg.seed}});
    const env::Scenario& scn = scns[i];
    dataset[scn.name] = runner.run(
        "collect:" + scn.name, h, {dir / "manifest.json", dir / "payload.bin"}, [&]() {
          auto store = data::collect(scn, data::parse_policy_kind(cfg.collect_policy),
                                     cfg.episodes, mix_seed(cfg.seed, 100 + i));
          store.save(dir);
          return store.stats().to_json();
        });
    stores.push_back(data::EpisodeStore::load(dir));
    data_hashes.push_back(h);
    if (scn.name == solve_scn.name) solve_index = static_cast<int>(i);
  }

  std::vector<data::EpisodeStore> train_split, val_split;
  for (size_t i = 0; i < stores.size(); ++i) {
    auto [tr, va] = stores[i].split(cfg.train_frac, 1.0 - cfg.train_frac,
                                    mix_seed(cfg.seed, 200 + i));
    train_split.push_back(std::move(tr));
    val_split.push_back(std::move(va));
  }
  std::vector<const data::EpisodeStore*> train_ptrs, val_ptrs;
  for (size_t i = 0; i < stores.size(); ++i) {
    train_ptrs.push_back(&train_split[i]);
    val_ptrs.push_back(&val_split[i]);
  }

  // --- tokenizer ---------------------------------------------------------------
  const fs::path tok_ckpt = cfg.out_dir / "tokenizer.pt";
  const std::string h_tok = model::config_hash(json{{"stage", "tokenizer"},
                                                    {"config", cfg.tokenizer.to_json()},
                                                    {"seed", cfg.seed},
                                                    {"data", data_hashes}});
  json tok_metrics = runner.run("tokenizer", h_tok, {tok_ckpt}, [&]() {
    return vq::train_tokenizer(train_ptrs, val_ptrs, cfg.tokenizer, mix_seed(cfg.seed, 300),
                               tok_ckpt)
        .to_json();
  });
  vq::VqVae tokenizer = vq::load_tokenizer(tok_ckpt);

  // --- dynamics ---------------------------------------------------------------
  const fs::path dyn_ckpt = cfg.out_dir / "dynamics.pt";
  const std::string h_dyn = model::config_hash(json{{"stage", "dynamics"},
                                                    {"config", cfg.dynamics.to_json()},
                                                    {"layout", layout.to_json()},
                                                    {"seed", cfg.seed},
                                                    {"tokenizer", h_tok},
                                                    {"data", data_hashes}});
  json dyn_metrics = runner.run("dynamics", h_dyn, {dyn_ckpt}, [&]() {
    return dyn::train_dynamics(train_ptrs, val_ptrs, tokenizer, cfg.dynamics, layout,
                               mix_seed(cfg.seed, 400), dyn_ckpt)
        .to_json();
  });
  dyn::DynamicsModel dynamics = dyn::load_dynamics(dyn_ckpt);

  // --- reward -----------------------------------------------------------------
  const fs::path rew_ckpt = cfg.out_dir / "reward.pt";
  const std::string h_rew = model::config_hash(json{{"stage", "reward"},
                                                    {"config", cfg.reward.to_json()},
                                                    {"layout", layout.to_json()},
                                                    {"seed", cfg.seed},
                                                    {"dynamics", h_dyn},
                                                    {"gt_reward", cfg.gt_reward}});
  reward::RewardModel reward_model{nullptr};
  if (cfg.gt_reward) {
    json entry{{"hash", h_rew}, {"cached", false}, {"seconds", 0.0},
               {"metrics", json{{"bypassed", true}}}};
    stages["reward"] = entry;
  } else {
    runner.run("reward", h_rew, {rew_ckpt}, [&]() {
      return reward::train_reward(train_ptrs, val_ptrs, dynamics, tokenizer, cfg.reward, layout,
                                  mix_seed(cfg.seed, 500), rew_ckpt)
          .to_json();
    });
    reward_model = reward::load_reward(rew_ckpt);
  }

  // --- solve ------------------------------------------------------------------
  fs::create_directories(cfg.out_dir / "policies");
  struct Arm {
    std::string name;
    std::vector<fs::path> ckpts;
  };
  std::vector<Arm> arms;
  arms.push_back({"lbi", {}});
  if (cfg.with_gtr && !cfg.gt_reward) arms.push_back({"gtr", {}});
  if (cfg.with_bc) arms.push_back({"bc", {}});

  for (auto& arm : arms) {
    for (uint64_t sk : cfg.solve_seeds) {
      const fs::path ckpt =
          cfg.out_dir / "policies" / (arm.name + "_seed" + std::to_string(sk) + ".pt");
      json stage_cfg{{"stage", "solve"},     {"arm", arm.name},
                     {"seed", sk},           {"dynamics", h_dyn},
                     {"reward", h_rew},      {"scenario", solve_scn.to_json()},
                     {"layout", layout.to_json()}};
      if (arm.name == "bc")
        stage_cfg["config"] = cfg.bc.to_json();
      else
        stage_cfg["config"] = cfg.solver.to_json();
      const std::string h = model::config_hash(stage_cfg);
      runner.run("solve:" + arm.name + ":" + std::to_string(sk), h, {ckpt}, [&]() -> json {
        if (arm.name == "bc")
          return solver::bc_baseline(train_ptrs, cfg.bc, layout, sk, ckpt).to_json();
        if (arm.name == "gtr" || cfg.gt_reward)
          return solver::train_policy_gtr(dynamics, tokenizer, {train_ptrs[solve_index]},
                                          cfg.solver, layout, sk, ckpt)
              .to_json();
        return solver::train_policy(dynamics, tokenizer, reward_model, solve_scn, task,
                                    cfg.solver, layout, sk, ckpt)
            .to_json();
      });
      arm.ckpts.push_back(ckpt);
    }
  }

  // --- evaluate ---------------------------------------------------------------
  json arms_json = json::object();
  json eval_cfg{{"stage", "eval"},
                {"episodes", cfg.eval_episodes},
                {"seeds", cfg.solve_seeds},
                {"with_random", cfg.with_random},
                {"scenario", solve_scn.to_json()}};
  for (const auto& arm : arms)
    for (const auto& c : arm.ckpts) eval_cfg["policies"].push_back(c.string());
  const std::string h_eval = model::config_hash(eval_cfg);
  json eval_metrics = runner.run("eval", h_eval, {}, [&]() {
    json out = json::object();
    for (const auto& arm : arms) {
      std::vector<solver::EvalResult> results;
      for (size_t k = 0; k < cfg.solve_seeds.size(); ++k) {
        auto handle = solver::load_policy(arm.ckpts[k]);
        results.push_back(solver::evaluate(handle, &dynamics, &tokenizer, solve_scn, task,
                                           cfg.eval_episodes, cfg.solve_seeds[k]));
      }
      out[arm.name] = eval_to_json(arm.name, cfg.solve_seeds, results);
    }
    if (cfg.with_random) {
      std::vector<solver::EvalResult> results;
      for (uint64_t sk : cfg.solve_seeds)
        results.push_back(random_eval(solve_scn, cfg.eval_episodes, sk));
      out["random"] = eval_to_json("random", cfg.solve_seeds, results);
    }
    return out;
  });

  // --- report -----------------------------------------------------------------
  json report;
  report["schema_version"] = 1;
  report["config"] = resolved;
  report["config_hash"] = run_hash;
  report["tags"] = cfg.tags();
  report["scenario"] = solve_scn.name;
  report["stages"] = stages;
  report["dataset"] = dataset;
  report["world_model"] = json{
      {"tokenizer_val_mse", tok_metrics.value("val_recon_mse", 0.0)},
      {"tokenizer_codebook_usage", tok_metrics.value("codebook_usage", 0.0)},
      {"val_state_mse", dyn_metrics.value("val_state_mse", 0.0)},
      {"val_action_ce", dyn_metrics.value("val_action_ce", 0.0)},
      {"val_obs_mse", dyn_metrics.value("val_obs_mse", 0.0)}};
  json seeds = json::array();
  for (uint64_t s : cfg.solve_seeds) seeds.push_back(s);
  report["evaluation"] = json{{"episodes_per_seed", cfg.eval_episodes},
                              {"seeds", seeds},
                              {"arms", eval_metrics}};

  validate_schema(report, report_schema());
  write_json_file(cfg.out_dir / "report.json", report);
  write_json_file(cfg.out_dir / "report.schema.json", report_schema());
  return report;
}

// --- answers ------------------------------------------------------------------

json Answer::to_json() const {
  json actions_j = json::array(), labels_j = json::array(), rewards_j = json::array();
  for (const auto& row : actions) actions_j.push_back(row);
  for (const auto& row : labels) labels_j.push_back(row);
  for (const auto& row : rewards) rewards_j.push_back(row);
  return json{{"description", description.to_json()},
              {"text", description.text()},
              {"horizon", static_cast<int>(actions.size())},
              {"simulated_steps", simulated_steps},
              {"frame_source", frame_source},
              {"frame_count", static_cast<int>(frames.size())},
              {"actions", actions_j},
              {"labels", labels_j},
              {"rewards", rewards_j}};
}

Answer make_answer(dyn::DynamicsModel& dynamics, vq::VqVae& tokenizer,
                   reward::RewardModel& reward_model, solver::PolicyHandle& policy,
                   const env::Scenario& scn, const vision::TaskDescription& task, int horizon,
                   uint64_t seed) {
  if (horizon < 0) throw DomainError("answer horizon must be non-negative");
  const model::ModelLayout& layout = policy.layout;
  if (!layout.fits(scn)) throw ConfigError("scenario exceeds the policy layout");
  if (dynamics->layout() != layout)
    throw ConfigError("policy layout must match the dynamics model");
  if (reward_model->layout() != layout)
    throw ConfigError("policy layout must match the reward model");
  if (policy.mode == solver::PolicyMode::kSoftQ && policy.cfg.alpha <= 0.0)
    throw ConfigError("alpha must be positive");

  torch::NoGradGuard ng;
  dynamics->eval();
  policy.q->eval();

  env::BattleEnv env(scn);
  auto rr = env.reset(mix_seed(seed, 11));
  std::vector<float> state0 = model::pad_state(scn, layout, rr.state_vec);
  patch_terrain(state0, layout, task.terrain_id);
  const vision::Frame frame0 = vision::augment(scn, rr.state, task.terrain_id);
  const std::vector<float> zbar0 =
      vq::pooled_embedding(tokenizer, vq::encode_frame(tokenizer, frame0));
  const auto dvec = vision::encode_description(task);

  dyn::RolloutStart start{state0, zbar0, std::vector<float>(dvec.begin(), dvec.end())};
  auto policy_fn = [&](int, const std::vector<float>&,
                       const std::vector<std::vector<float>>& obs,
                       const std::vector<std::vector<uint8_t>>& avail,
                       const std::vector<std::vector<float>>& qref) {
    return greedy_actions(policy, layout, obs, avail, qref);
  };
  auto sims = dyn::rollout(dynamics, scn, {start}, policy_fn, horizon,
                           policy.cfg.gt_image ? &tokenizer : nullptr);
  const dyn::SimEpisode& sim = sims[0];

  Answer out;
  out.description = task;
  out.simulated_steps = sim.T();
  out.frame_source = dynamics->config().image_ref ? "tokens" : "state";

  std::vector<std::vector<float>> rhat;
  if (sim.T() > 0) {
    auto traj = reward::traj_from_sim(sim, row_tensor(start.desc));
    rhat = reward::relabel(reward_model, traj);
  }

  out.frames.push_back(frame0);
  for (int t = 1; t <= sim.T(); ++t) {
    if (out.frame_source == "tokens")
      out.frames.push_back(dyn::frame_from_zbar(tokenizer, sim.zbars[t]));
    else
      out.frames.push_back(vision::render_vec(scn, model::unpad_state(scn, layout, sim.states[t])));
  }

  const int n = scn.n_allies();
  for (int t = 0; t < horizon; ++t) {
    std::vector<int> acts(n, env::kActionNoop);
    std::vector<std::string> labels(n);
    std::vector<float> rews(n, 0.0f);
    if (t < sim.T()) {
      for (int i = 0; i < n; ++i) {
        acts[i] = sim.actions[t][i];
        rews[i] = rhat[t][i];
      }
    }
    for (int i = 0; i < n; ++i) labels[i] = env::action_label(scn, i, acts[i]);
    out.actions.push_back(std::move(acts));
    out.labels.push_back(std::move(labels));
    out.rewards.push_back(std::move(rews));
    if (t >= sim.T()) out.frames.push_back(out.frames.back());
  }
  return out;
}

void write_answer(const Answer& answer, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  json j = answer.to_json();
  json files = json::array();
  for (size_t t = 0; t < answer.frames.size(); ++t) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03zu.png", t);
    vision::write_png(out_dir / name, answer.frames[t]);
    files.push_back(name);
  }
  j["frames"] = files;
  write_json_file(out_dir / "answer.json", j);
}

// --- evaluation reports ---------------------------------------------------------

solver::EvalResult random_eval(const env::Scenario& scn, int episodes, uint64_t seed) {
  if (episodes <= 0) throw DomainError("evaluate needs a positive episode count");
  env::BattleEnv env(scn);
  std::mt19937_64 rng(mix_seed(seed, 7));
  int wins = 0;
  std::vector<double> returns;
  for (int e = 0; e < episodes; ++e) {
    auto rr = env.reset(rng());
    env::EnvState st = rr.state;
    double ret = 0.0;
    bool won = false;
    for (int t = 0; t < scn.max_steps; ++t) {
      const auto acts = data::random_actions(env, st, rng);
      const auto sr = env.step(st, acts);
      ret += sr.global_reward;
      st = sr.state;
      if (sr.terminated) {
        won = sr.won;
        break;
      }
    }
    wins += won ? 1 : 0;
    returns.push_back(ret);
  }
  solver::EvalResult out;
  out.episodes = episodes;
  out.win_rate = static_cast<double>(wins) / episodes;
  out.mean_return = mean_of(returns);
  out.std_return = std_of(returns);
  return out;
}

json eval_report(const std::vector<fs::path>& policies, dyn::DynamicsModel* dynamics,
                 vq::VqVae* tokenizer, const env::Scenario& scn,
                 const vision::TaskDescription& task, const std::vector<uint64_t>& seeds,
                 int episodes, bool with_random) {
  if (seeds.size() < 2) throw ConfigError("evaluation needs at least two seeds");
  if (episodes < 1) throw ConfigError("evaluation needs a positive episode count");
  if (policies.empty() && !with_random) throw ConfigError("no policies to evaluate");

  json rows = json::array();
  for (const auto& p : policies) {
    auto handle = solver::load_policy(p);
    std::vector<solver::EvalResult> results;
    for (uint64_t s : seeds)
      results.push_back(solver::evaluate(handle, dynamics, tokenizer, scn, task, episodes, s));
    std::vector<uint64_t> sv(seeds.begin(), seeds.end());
    rows.push_back(eval_to_json(p.stem().string(), sv, results));
  }
  if (with_random) {
    std::vector<solver::EvalResult> results;
    for (uint64_t s : seeds) results.push_back(random_eval(scn, episodes, s));
    rows.push_back(eval_to_json("random", seeds, results));
  }
  json seeds_j = json::array();
  for (uint64_t s : seeds) seeds_j.push_back(s);
  return json{{"scenario", scn.name},
              {"episodes_per_seed", episodes},
              {"seeds", seeds_j},
              {"rows", rows}};
}

std::string render_table(const json& report) {
  std::ostringstream os;
  size_t width = 10;
  for (const auto& row : report.at("rows"))
    width = std::max(width, row.at("name").get<std::string>().size() + 2);
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%-*s %19s %21s\n", static_cast<int>(width), "policy",
                "win_rate", "return");
  os << buf;
  for (const auto& row : report.at("rows")) {
    std::snprintf(buf, sizeof(buf), "%-*s %8.4f ± %8.4f %9.4f ± %9.4f\n",
                  static_cast<int>(width), row.at("name").get<std::string>().c_str(),
                  row.at("win_rate_mean").get<double>(), row.at("win_rate_std").get<double>(),
                  row.at("return_mean").get<double>(), row.at("return_std").get<double>());
    os << buf;
  }
  return os.str();
}

// --- report schema ----------------------------------------------------------------

json report_schema() {
  static const json schema = json::parse(R"JSON(
{
  "title": "lbi pipeline report",
  "type": "object",
  "required": ["schema_version", "config", "config_hash", "tags", "scenario",
               "stages", "dataset", "world_model", "evaluation"],
  "properties": {
    "schema_version": {"type": "integer", "enum": [1]},
    "config": {"type": "object"},
    "config_hash": {"type": "string"},
    "tags": {
      "type": "array",
      "items": {"type": "string",
                "enum": ["wo-RT", "wo-IR", "GTI", "wo-RC", "wo-BR", "GTR"]}
    },
    "scenario": {"type": "string"},
    "stages": {
      "type": "object",
      "additionalProperties": {
        "type": "object",
        "required": ["cached", "seconds", "hash", "metrics"],
        "properties": {
          "cached": {"type": "boolean"},
          "seconds": {"type": "number"},
          "hash": {"type": "string"},
          "metrics": {"type": "object"}
        }
      }
    },
    "dataset": {"type": "object", "additionalProperties": {"type": "object"}},
    "world_model": {
      "type": "object",
      "required": ["tokenizer_val_mse", "tokenizer_codebook_usage",
                   "val_state_mse", "val_action_ce", "val_obs_mse"],
      "properties": {
        "tokenizer_val_mse": {"type": "number"},
        "tokenizer_codebook_usage": {"type": "number"},
        "val_state_mse": {"type": "number"},
        "val_action_ce": {"type": "number"},
        "val_obs_mse": {"type": "number"}
      }
    },
    "evaluation": {
      "type": "object",
      "required": ["episodes_per_seed", "seeds", "arms"],
      "properties": {
        "episodes_per_seed": {"type": "integer"},
        "seeds": {"type": "array", "items": {"type": "integer"}},
        "arms": {
          "type": "object",
          "additionalProperties": {
            "type": "object",
            "required": ["name", "win_rate_mean", "win_rate_std",
                         "return_mean", "return_std", "per_seed"],
            "properties": {
              "name": {"type": "string"},
              "win_rate_mean": {"type": "number"},
              "win_rate_std": {"type": "number"},
              "return_mean": {"type": "number"},
              "return_std": {"type": "number"},
              "per_seed": {
                "type": "array",
                "items": {
                  "type": "object",
                  "required": ["seed", "win_rate", "mean_return", "std_return"],
                  "properties": {
                    "seed": {"type": "integer"},
                    "win_rate": {"type": "number"},
                    "mean_return": {"type": "number"},
                    "std_return": {"type": "number"}
                  }
                }
              }
            }
          }
        }
      }
    }
  }
}
)JSON");
  return schema;
}

namespace {

bool type_matches(const json& value, const std::string& t) {
  if (t == "object") return value.is_object();
  if (t == "array") return value.is_array();
  if (t == "string") return value.is_string();
  if (t == "boolean") return value.is_boolean();
  if (t == "integer") return value.is_number_integer() || value.is_number_unsigned();
  if (t == "number") return value.is_number();
  if (t == "null") return value.is_null();
  throw DomainError("unknown schema type '" + t + "'");
}

}  // namespace

void validate_schema(const json& value, const json& schema, const std::string& path) {
  if (schema.contains("type")) {
    const std::string t = schema.at("type").get<std::string>();
    if (!type_matches(value, t))
      throw DomainError(path + ": expected " + t + ", got " + std::string(value.type_name()));
  }
  if (schema.contains("enum")) {
    bool ok = false;
    for (const auto& e : schema.at("enum")) ok = ok || e == value;
    if (!ok) throw DomainError(path + ": value not in enum");
  }
  if (value.is_object()) {
    if (schema.contains("required"))
      for (const auto& key : schema.at("required"))
        if (!value.contains(key.get<std::string>()))
          throw DomainError(path + ": missing required key '" + key.get<std::string>() + "'");
    const json props = schema.value("properties", json::object());
    for (const auto& [key, sub] : value.items()) {
      if (props.contains(key)) {
        validate_schema(sub, props.at(key), path + "." + key);
      } else if (schema.contains("additionalProperties")) {
        const json& ap = schema.at("additionalProperties");
        if (ap.is_boolean()) {
          if (!ap.get<bool>())
            throw DomainError(path + ": unexpected key '" + key + "'");
        } else {
          validate_schema(sub, ap, path + "." + key);
        }
      }
    }
  }
  if (value.is_array() && schema.contains("items")) {
    int i = 0;
    for (const auto& item : value) {
      validate_schema(item, schema.at("items"), path + "[" + std::to_string(i) + "]");
      ++i;
    }
  }
}

}  // namespace lbi::pipeline
