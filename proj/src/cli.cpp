#include "lbi/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <functional>
#include <iostream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lbi/common.hpp"
#include "lbi/data.hpp"
#include "lbi/dynamics.hpp"
#include "lbi/env.hpp"
#include "lbi/model_common.hpp"
#include "lbi/pipeline.hpp"
#include "lbi/reward.hpp"
#include "lbi/solver.hpp"
#include "lbi/vision.hpp"
#include "lbi/vqvae.hpp"

namespace lbi::cli {
namespace {

namespace fs = std::filesystem;

// Every subcommand resolves its settings as JSON layers: built-in defaults,
// then the --config file, then explicitly passed flags.
struct OptSink {
  json flags = json::object();
  std::string config_file;

  json merged(json defaults) const {
    if (!config_file.empty()) {
      if (!fs::exists(config_file))
        throw ConfigError("config file '" + config_file + "' not found");
      defaults.update(read_json_file(config_file), true);
    }
    defaults.update(flags, true);
    return defaults;
  }

  void put(const std::string& pointer, json value) {
    flags[json::json_pointer(pointer)] = std::move(value);
  }
};

using Sink = std::shared_ptr<OptSink>;

Sink attach_config(CLI::App* sub) {
  auto sink = std::make_shared<OptSink>();
  sub->add_option("--config", sink->config_file, "JSON config file (flags override it)");
  return sink;
}

void opt_str(CLI::App* sub, const Sink& s, const std::string& name, const std::string& ptr,
             const std::string& help) {
  sub->add_option_function<std::string>(
      name, [s, ptr](const std::string& v) { s->put(ptr, v); }, help);
}

void opt_int(CLI::App* sub, const Sink& s, const std::string& name, const std::string& ptr,
             const std::string& help) {
  sub->add_option_function<int64_t>(
      name, [s, ptr](const int64_t& v) { s->put(ptr, v); }, help);
}

void opt_double(CLI::App* sub, const Sink& s, const std::string& name, const std::string& ptr,
                const std::string& help) {
  sub->add_option_function<double>(
      name, [s, ptr](const double& v) { s->put(ptr, v); }, help);
}

void opt_flag(CLI::App* sub, const Sink& s, const std::string& name, const std::string& ptr,
              json value, const std::string& help) {
  sub->add_flag_function(
      name, [s, ptr, value](int64_t) { s->put(ptr, value); }, help);
}

void opt_list(CLI::App* sub, const Sink& s, const std::string& name, const std::string& ptr,
              const std::string& help) {
  sub->add_option_function<std::vector<std::string>>(
      name, [s, ptr](const std::vector<std::string>& v) { s->put(ptr, v); }, help);
}

std::vector<uint64_t> parse_seed_list(const std::string& csv) {
  std::vector<uint64_t> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      out.push_back(std::stoull(tok));
    } catch (const std::exception&) {
      throw ConfigError("bad seed '" + tok + "' in seed list");
    }
  }
  if (out.empty()) throw ConfigError("empty seed list");
  return out;
}

void opt_seeds(CLI::App* sub, const Sink& s, const std::string& name, const std::string& ptr,
               const std::string& help) {
  sub->add_option_function<std::string>(
      name, [s, ptr](const std::string& v) { s->put(ptr, parse_seed_list(v)); }, help);
}

// --- typed readers over the merged json -------------------------------------

std::string need_str(const json& m, const std::string& key, const std::string& flag) {
  const std::string v = m.value(key, std::string());
  if (v.empty()) throw ConfigError("missing " + flag);
  return v;
}

std::vector<std::string> str_list(const json& m, const std::string& key) {
  std::vector<std::string> out;
  if (m.contains(key))
    for (const auto& v : m.at(key)) out.push_back(v.get<std::string>());
  return out;
}

std::vector<uint64_t> seed_list(const json& m, const std::string& key) {
  std::vector<uint64_t> out;
  if (m.contains(key))
    for (const auto& v : m.at(key)) out.push_back(v.get<uint64_t>());
  return out;
}

fs::path out_or(const json& m, const fs::path& fallback) {
  const std::string v = m.value("out", std::string());
  return v.empty() ? fallback : fs::path(v);
}

// --- artifact loading with stage-naming errors -------------------------------

data::EpisodeStore load_store(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json"))
    throw ConfigError("no episode store at '" + dir.string() + "'; run `lbi collect` first");
  return data::EpisodeStore::load(dir);
}

std::vector<data::EpisodeStore> load_stores(const json& m) {
  const auto dirs = str_list(m, "data");
  if (dirs.empty()) throw ConfigError("missing --data (one or more episode store directories)");
  std::vector<data::EpisodeStore> stores;
  for (const auto& d : dirs) stores.push_back(load_store(d));
  return stores;
}

void require_ckpt(const fs::path& p, const std::string& what, const std::string& stage) {
  if (p.empty())
    throw ConfigError("missing --" + what + "; train one with `lbi " + stage + "`");
  if (!fs::exists(p))
    throw ConfigError(what + " '" + p.string() + "' not found; run `lbi " + stage + "` first");
}

vq::VqVae tokenizer_at(const json& m) {
  const fs::path p = m.value("tokenizer_ckpt", std::string());
  require_ckpt(p, "tokenizer-ckpt", "train-tokenizer");
  return vq::load_tokenizer(p);
}

dyn::DynamicsModel dynamics_at(const json& m, const std::string& key = "dynamics_ckpt",
                               const std::string& flag = "dynamics-ckpt") {
  const fs::path p = m.value(key, std::string());
  require_ckpt(p, flag, "train-dynamics");
  return dyn::load_dynamics(p);
}

bool is_gt_reward_marker(const fs::path& p) {
  try {
    return read_json_file(p).value("kind", "") == "reward-gt";
  } catch (const std::exception&) {
    return false;
  }
}

// Train/val splits shared by the world-model trainers.
struct Splits {
  std::vector<data::EpisodeStore> train, val;
  std::vector<const data::EpisodeStore*> train_ptrs, val_ptrs;
};

Splits split_stores(const std::vector<data::EpisodeStore>& stores, double train_frac,
                    uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0))
    throw ConfigError("train_frac must lie strictly between 0 and 1");
  Splits s;
  for (size_t i = 0; i < stores.size(); ++i) {
    auto [tr, va] = stores[i].split(train_frac, 1.0 - train_frac, mix_seed(seed, 200 + i));
    s.train.push_back(std::move(tr));
    s.val.push_back(std::move(va));
  }
  for (size_t i = 0; i < stores.size(); ++i) {
    s.train_ptrs.push_back(&s.train[i]);
    s.val_ptrs.push_back(&s.val[i]);
  }
  return s;
}

model::ModelLayout layout_for(const json& m, const std::vector<data::EpisodeStore>& stores) {
  std::vector<env::Scenario> scns;
  for (const auto& s : stores) scns.push_back(s.scenario());
  model::ModelLayout L = model::ModelLayout::cover(scns);
  const int n = m.value("layout_n", 0);
  const int mm = m.value("layout_m", 0);
  if (n > 0 || mm > 0) {
    model::ModelLayout wanted{std::max(n, L.n_max), std::max(mm, L.m_max)};
    L = wanted;
  }
  return L;
}

void emit(const json& j) { std::cout << j.dump(2) << "\n"; }

// --- subcommands --------------------------------------------------------------

int cmd_collect(const json& m) {
  const std::string name = need_str(m, "scenario", "--scenario");
  const env::Scenario scn = pipeline::resolve_scenario(name);
  const auto kind = data::parse_policy_kind(m.value("policy", std::string("mixed")));
  const int episodes = m.value("episodes", 200);
  const uint64_t seed = m.value("seed", 0ULL);
  const fs::path out = out_or(m, data_root() / scn.name);

  auto store = data::collect(scn, kind, episodes, seed);
  store.save(out);
  emit(json{{"out", out.string()}, {"episodes", store.size()}, {"stats", store.stats().to_json()}});
  return kExitOk;
}

int cmd_train_tokenizer(const json& m) {
  const auto stores = load_stores(m);
  const uint64_t seed = m.value("seed", 0ULL);
  const auto cfg = vq::VqConfig::from_json(m.value("tokenizer", json::object()));
  const fs::path out = out_or(m, data_root() / "checkpoints" / "tokenizer.pt");
  fs::create_directories(out.parent_path());

  auto splits = split_stores(stores, m.value("train_frac", 0.9), seed);
  auto metrics = vq::train_tokenizer(splits.train_ptrs, splits.val_ptrs, cfg, seed, out);
  emit(json{{"out", out.string()}, {"metrics", metrics.to_json()}});
  return kExitOk;
}

int cmd_train_dynamics(const json& m) {
  const auto stores = load_stores(m);
  const uint64_t seed = m.value("seed", 0ULL);
  auto tokenizer = tokenizer_at(m);
  const auto cfg = dyn::DynamicsConfig::from_json(m.value("dynamics", json::object()));
  const model::ModelLayout layout = layout_for(m, stores);
  const fs::path out = out_or(m, data_root() / "checkpoints" / "dynamics.pt");
  fs::create_directories(out.parent_path());

  auto splits = split_stores(stores, m.value("train_frac", 0.9), seed);
  auto metrics =
      dyn::train_dynamics(splits.train_ptrs, splits.val_ptrs, tokenizer, cfg, layout, seed, out);
  emit(json{{"out", out.string()},
            {"layout", layout.to_json()},
            {"metrics", metrics.to_json()}});
  return kExitOk;
}

int cmd_train_reward(const json& m) {
  const fs::path out = out_or(m, data_root() / "checkpoints" / "reward.pt");
  fs::create_directories(out.parent_path());
  if (m.value("gt_reward", false)) {
    // Marker checkpoint: `lbi solve` sees it and trains on the stored global
    // rewards split equally among living agents instead of a learned model.
    write_json_file(out, json{{"kind", "reward-gt"}});
    emit(json{{"out", out.string()}, {"metrics", json{{"bypassed", true}}}});
    return kExitOk;
  }
  const auto stores = load_stores(m);
  const uint64_t seed = m.value("seed", 0ULL);
  auto tokenizer = tokenizer_at(m);
  auto dynamics = dynamics_at(m);
  const auto cfg = reward::RewardConfig::from_json(m.value("reward", json::object()));

  auto splits = split_stores(stores, m.value("train_frac", 0.9), seed);
  auto metrics = reward::train_reward(splits.train_ptrs, splits.val_ptrs, dynamics, tokenizer,
                                      cfg, dynamics->layout(), seed, out);
  emit(json{{"out", out.string()}, {"metrics", metrics.to_json()}});
  return kExitOk;
}

int cmd_solve(const json& m) {
  const std::string name = need_str(m, "scenario", "--scenario");
  const env::Scenario scn = pipeline::resolve_scenario(name);
  const uint64_t seed = m.value("seed", 0ULL);
  const fs::path out = out_or(m, data_root() / "checkpoints" / "policy.pt");
  fs::create_directories(out.parent_path());

  if (m.value("bc", false)) {
    const auto stores = load_stores(m);
    std::vector<env::Scenario> scns{scn};
    for (const auto& s : stores) scns.push_back(s.scenario());
    const model::ModelLayout layout = model::ModelLayout::cover(scns);
    std::vector<const data::EpisodeStore*> ptrs;
    for (const auto& s : stores) ptrs.push_back(&s);
    const auto cfg = solver::BcConfig::from_json(m.value("bc_config", json::object()));
    auto metrics = solver::bc_baseline(ptrs, cfg, layout, seed, out);
    emit(json{{"out", out.string()}, {"arm", "bc"}, {"metrics", metrics.to_json()}});
    return kExitOk;
  }

  auto tokenizer = tokenizer_at(m);
  auto dynamics = dynamics_at(m);
  const model::ModelLayout layout = dynamics->layout();
  const auto cfg = solver::SolverConfig::from_json(m.value("solver", json::object()));
  const int terrain = m.value("terrain", -1);
  const auto task =
      vision::describe_victory(scn, terrain >= 0 ? terrain : scn.terrain_id);

  const fs::path reward_ckpt = m.value("reward_ckpt", std::string());
  require_ckpt(reward_ckpt, "reward-ckpt", "train-reward");
  if (is_gt_reward_marker(reward_ckpt)) {
    const auto stores = load_stores(m);
    std::vector<const data::EpisodeStore*> ptrs;
    for (const auto& s : stores) ptrs.push_back(&s);
    auto metrics = solver::train_policy_gtr(dynamics, tokenizer, ptrs, cfg, layout, seed, out);
    emit(json{{"out", out.string()}, {"arm", "gtr"}, {"metrics", metrics.to_json()}});
    return kExitOk;
  }

  auto reward_model = reward::load_reward(reward_ckpt);
  auto metrics =
      solver::train_policy(dynamics, tokenizer, reward_model, scn, task, cfg, layout, seed, out);
  emit(json{{"out", out.string()},
            {"arm", cfg.behavior_reg ? "lbi" : "wo-br"},
            {"metrics", metrics.to_json()}});
  return kExitOk;
}

int cmd_answer(const json& m) {
  const std::string name = need_str(m, "scenario", "--scenario");
  const env::Scenario scn = pipeline::resolve_scenario(name);
  const int horizon = m.value("horizon", 40);
  if (horizon < 0 || horizon > dyn::kMaxContext)
    throw ConfigError("answer horizon must lie in [0, " + std::to_string(dyn::kMaxContext) + "]");
  const uint64_t seed = m.value("seed", 0ULL);
  const int terrain = m.value("terrain", -1);
  if (terrain >= env::kNumTerrains) throw ConfigError("terrain id out of range");

  auto tokenizer = tokenizer_at(m);
  auto dynamics = dynamics_at(m);
  const fs::path reward_ckpt = m.value("reward_ckpt", std::string());
  require_ckpt(reward_ckpt, "reward-ckpt", "train-reward");
  if (is_gt_reward_marker(reward_ckpt))
    throw ConfigError("answers need a trained reward model; run `lbi train-reward` without "
                      "--gt-reward");
  auto reward_model = reward::load_reward(reward_ckpt);
  const model::ModelLayout layout = dynamics->layout();
  const auto task =
      vision::describe_victory(scn, terrain >= 0 ? terrain : scn.terrain_id);
  const fs::path out =
      out_or(m, data_root() / "answers" / (scn.name + "-seed" + std::to_string(seed)));
  fs::create_directories(out);

  solver::PolicyHandle policy;
  const fs::path reuse = m.value("reuse_policy", std::string());
  if (!reuse.empty()) {
    if (!fs::exists(reuse))
      throw ConfigError("policy '" + reuse.string() + "' not found; run `lbi solve` first");
    policy = solver::load_policy(reuse);
  } else {
    const auto cfg = solver::SolverConfig::from_json(m.value("solver", json::object()));
    solver::train_policy(dynamics, tokenizer, reward_model, scn, task, cfg, layout, seed,
                         out / "policy.pt");
    policy = solver::load_policy(out / "policy.pt");
  }

  auto answer = pipeline::make_answer(dynamics, tokenizer, reward_model, policy, scn, task,
                                      horizon, seed);
  pipeline::write_answer(answer, out);
  std::cout << "task: " << answer.description.text() << "\n";
  std::cout << "wrote " << answer.frames.size() << " frames and answer.json to " << out.string()
            << "\n";
  return kExitOk;
}

int cmd_eval(const json& m) {
  const std::string name = need_str(m, "scenario", "--scenario");
  const env::Scenario scn = pipeline::resolve_scenario(name);
  const auto seeds = seed_list(m, "seeds");
  const int episodes = m.value("episodes", 32);
  const int terrain = m.value("terrain", -1);
  const auto task =
      vision::describe_victory(scn, terrain >= 0 ? terrain : scn.terrain_id);

  std::vector<fs::path> policies;
  for (const auto& p : str_list(m, "policy")) {
    if (!fs::exists(p))
      throw ConfigError("policy '" + p + "' not found; run `lbi solve` first");
    policies.emplace_back(p);
  }

  // Soft-Q rows consult the dynamics model; load it only when provided.
  dyn::DynamicsModel dynamics{nullptr};
  vq::VqVae tokenizer{nullptr};
  dyn::DynamicsModel* dyn_ptr = nullptr;
  vq::VqVae* tok_ptr = nullptr;
  if (m.contains("dynamics_ckpt") && !m.at("dynamics_ckpt").get<std::string>().empty()) {
    dynamics = dynamics_at(m);
    dyn_ptr = &dynamics;
  }
  if (m.contains("tokenizer_ckpt") && !m.at("tokenizer_ckpt").get<std::string>().empty()) {
    tokenizer = tokenizer_at(m);
    tok_ptr = &tokenizer;
  }

  json report = pipeline::eval_report(policies, dyn_ptr, tok_ptr, scn, task, seeds, episodes,
                                      m.value("with_random", false));
  std::cout << pipeline::render_table(report);
  const std::string out = m.value("out", std::string());
  if (!out.empty()) {
    write_json_file(out, report);
    std::cout << "report: " << out << "\n";
  }
  return kExitOk;
}

int cmd_rollout(const json& m) {
  const std::string name = need_str(m, "scenario", "--scenario");
  const env::Scenario scn = pipeline::resolve_scenario(name);
  const int horizon = m.value("horizon", 40);
  if (horizon < 0 || horizon > dyn::kMaxContext)
    throw ConfigError("rollout horizon must lie in [0, " + std::to_string(dyn::kMaxContext) +
                      "]");
  const uint64_t seed = m.value("seed", 0ULL);
  const std::string policy = m.value("policy", std::string("random"));
  if (policy != "random" && policy != "ref")
    throw ConfigError("rollout policy must be 'random' or 'ref'");

  auto tokenizer = tokenizer_at(m);
  auto dynamics = dynamics_at(m, "ckpt", "ckpt");
  const model::ModelLayout layout = dynamics->layout();
  if (!layout.fits(scn)) throw ConfigError("scenario exceeds the dynamics layout");
  const fs::path out =
      out_or(m, data_root() / "rollouts" / (scn.name + "-seed" + std::to_string(seed)));
  fs::create_directories(out);

  env::BattleEnv env(scn);
  auto rr = env.reset(mix_seed(seed, 11));
  std::vector<float> state0 = model::pad_state(scn, layout, rr.state_vec);
  const vision::Frame frame0 = vision::render(scn, rr.state);
  const auto task = vision::describe_victory(scn, scn.terrain_id);
  const auto dvec = vision::encode_description(task);
  dyn::RolloutStart start{state0,
                          vq::pooled_embedding(tokenizer, vq::encode_frame(tokenizer, frame0)),
                          std::vector<float>(dvec.begin(), dvec.end())};

  std::mt19937_64 rng(mix_seed(seed, 12));
  auto policy_fn = [&](int, const std::vector<float>&,
                       const std::vector<std::vector<float>>&,
                       const std::vector<std::vector<uint8_t>>& avail,
                       const std::vector<std::vector<float>>& qref) {
    std::vector<int> acts(layout.n_max, env::kActionNoop);
    for (int i = 0; i < layout.n_max; ++i) {
      if (policy == "random") {
        std::vector<int> options;
        for (size_t a = 0; a < avail[i].size(); ++a)
          if (avail[i][a]) options.push_back(static_cast<int>(a));
        acts[i] = options.size() == 1
                      ? options[0]
                      : options[rng() % options.size()];
      } else {
        std::discrete_distribution<int> dist(qref[i].begin(), qref[i].end());
        acts[i] = dist(rng);
      }
    }
    return acts;
  };

  torch::NoGradGuard ng;
  dynamics->eval();
  auto sims = dyn::rollout(dynamics, scn, {start}, policy_fn, horizon);
  const dyn::SimEpisode& sim = sims[0];

  const bool tokens = dynamics->config().image_ref;
  json log;
  log["scenario"] = scn.name;
  log["policy"] = policy;
  log["seed"] = seed;
  log["horizon"] = horizon;
  log["simulated_steps"] = sim.T();
  log["frame_source"] = tokens ? "tokens" : "state";
  json frames = json::array(), actions = json::array(), labels = json::array();
  for (int t = 0; t <= sim.T(); ++t) {
    char fname[32];
    std::snprintf(fname, sizeof(fname), "frame_%03d.png", t);
    const vision::Frame frame =
        t == 0 ? frame0
               : (tokens ? dyn::frame_from_zbar(tokenizer, sim.zbars[t])
                         : vision::render_vec(scn, model::unpad_state(scn, layout, sim.states[t])));
    vision::write_png(out / fname, frame);
    frames.push_back(fname);
  }
  for (int t = 0; t < sim.T(); ++t) {
    json arow = json::array(), lrow = json::array();
    for (int i = 0; i < scn.n_allies(); ++i) {
      arow.push_back(sim.actions[t][i]);
      lrow.push_back(env::action_label(scn, i, sim.actions[t][i]));
    }
    actions.push_back(arow);
    labels.push_back(lrow);
  }
  log["frames"] = frames;
  log["actions"] = actions;
  log["labels"] = labels;
  write_json_file(out / "rollout.json", log);
  std::cout << "wrote " << sim.T() + 1 << " frames and rollout.json to " << out.string() << "\n";
  return kExitOk;
}

int cmd_pipeline(const json& m) {
  const auto cfg = pipeline::PipelineConfig::from_json(m);
  json report = pipeline::run_pipeline(cfg);

  json rows = json::array();
  for (const auto& [name, arm] : report.at("evaluation").at("arms").items()) rows.push_back(arm);
  std::cout << pipeline::render_table(json{{"rows", rows}});
  const fs::path out_dir = report.at("config").at("out_dir").get<std::string>();
  std::cout << "report: " << (out_dir / "report.json").string() << "\n";
  return kExitOk;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"lbi: learning-before-interaction world-model pipeline"};
  app.require_subcommand(1);
  std::function<int()> action;
  auto bind = [&action](CLI::App* sub, const Sink& sink, int (*fn)(const json&), json defaults) {
    sub->callback([&action, sink, fn, defaults]() {
      action = [sink, fn, defaults]() { return fn(sink->merged(defaults)); };
    });
  };

  {
    auto* sub = app.add_subcommand("collect", "collect offline episodes");
    auto s = attach_config(sub);
    opt_str(sub, s, "--scenario", "/scenario", "scenario name or JSON path");
    opt_int(sub, s, "--episodes", "/episodes", "episode count");
    opt_str(sub, s, "--policy", "/policy", "random|scripted|qlearn|mixed");
    opt_int(sub, s, "--seed", "/seed", "collection seed");
    opt_str(sub, s, "--out", "/out", "output store directory");
    bind(sub, s, cmd_collect, json{{"episodes", 200}, {"policy", "mixed"}, {"seed", 0}});
  }
  {
    auto* sub = app.add_subcommand("train-tokenizer", "train the image tokenizer");
    auto s = attach_config(sub);
    opt_list(sub, s, "--data", "/data", "episode store directories");
    opt_int(sub, s, "--steps", "/tokenizer/steps", "training steps");
    opt_int(sub, s, "--batch", "/tokenizer/batch", "batch size");
    opt_double(sub, s, "--lr", "/tokenizer/lr", "learning rate");
    opt_int(sub, s, "--codes", "/tokenizer/num_codes", "codebook size");
    opt_int(sub, s, "--latent-dim", "/tokenizer/latent_dim", "code dimension");
    opt_double(sub, s, "--train-frac", "/train_frac", "train split fraction");
    opt_int(sub, s, "--seed", "/seed", "training seed");
    opt_str(sub, s, "--out", "/out", "checkpoint path");
    bind(sub, s, cmd_train_tokenizer,
         json{{"seed", 0}, {"train_frac", 0.9}, {"tokenizer", vq::VqConfig().to_json()}});
  }
  {
    auto* sub = app.add_subcommand("train-dynamics", "train the dynamics model");
    auto s = attach_config(sub);
    opt_list(sub, s, "--data", "/data", "episode store directories");
    opt_str(sub, s, "--tokenizer-ckpt", "/tokenizer_ckpt", "tokenizer checkpoint");
    opt_int(sub, s, "--steps", "/dynamics/steps", "training steps");
    opt_int(sub, s, "--batch", "/dynamics/batch", "episodes per batch");
    opt_int(sub, s, "--layers", "/dynamics/layers", "transformer layers");
    opt_int(sub, s, "--heads", "/dynamics/heads", "attention heads");
    opt_int(sub, s, "--embed", "/dynamics/embed_dim", "embedding width");
    opt_int(sub, s, "--window", "/dynamics/window", "timesteps per training window");
    opt_double(sub, s, "--lr", "/dynamics/lr", "learning rate");
    opt_flag(sub, s, "--no-residual", "/dynamics/residual", false,
             "predict absolute next states");
    opt_flag(sub, s, "--no-image-ref", "/dynamics/image_ref", false,
             "drop image-token conditioning");
    opt_int(sub, s, "--layout-n", "/layout_n", "minimum ally capacity");
    opt_int(sub, s, "--layout-m", "/layout_m", "minimum enemy capacity");
    opt_double(sub, s, "--train-frac", "/train_frac", "train split fraction");
    opt_int(sub, s, "--seed", "/seed", "training seed");
    opt_str(sub, s, "--out", "/out", "checkpoint path");
    bind(sub, s, cmd_train_dynamics,
         json{{"seed", 0}, {"train_frac", 0.9}, {"dynamics", dyn::DynamicsConfig().to_json()}});
  }
  {
    auto* sub = app.add_subcommand("train-reward", "train the reward model");
    auto s = attach_config(sub);
    opt_list(sub, s, "--data", "/data", "episode store directories");
    opt_str(sub, s, "--dynamics-ckpt", "/dynamics_ckpt", "dynamics checkpoint");
    opt_str(sub, s, "--tokenizer-ckpt", "/tokenizer_ckpt", "tokenizer checkpoint");
    opt_int(sub, s, "--k", "/reward/k", "inner-policy updates per reward update");
    opt_double(sub, s, "--beta", "/reward/beta_margin", "reward margin");
    opt_int(sub, s, "--steps", "/reward/steps", "reward updates");
    opt_int(sub, s, "--batch", "/reward/batch", "trajectory pairs per update");
    opt_flag(sub, s, "--no-reward-constraint", "/reward/reward_constraint", false,
             "drop the unavailable-action penalty");
    opt_flag(sub, s, "--gt-reward", "/gt_reward", true,
             "skip training; emit a marker so `lbi solve` uses stored rewards");
    opt_double(sub, s, "--train-frac", "/train_frac", "train split fraction");
    opt_int(sub, s, "--seed", "/seed", "training seed");
    opt_str(sub, s, "--out", "/out", "checkpoint path");
    bind(sub, s, cmd_train_reward,
         json{{"seed", 0},
              {"train_frac", 0.9},
              {"gt_reward", false},
              {"reward", reward::RewardConfig().to_json()}});
  }
  {
    auto* sub = app.add_subcommand("solve", "train a task policy inside the world model");
    auto s = attach_config(sub);
    opt_str(sub, s, "--scenario", "/scenario", "task scenario");
    opt_str(sub, s, "--dynamics-ckpt", "/dynamics_ckpt", "dynamics checkpoint");
    opt_str(sub, s, "--tokenizer-ckpt", "/tokenizer_ckpt", "tokenizer checkpoint");
    opt_str(sub, s, "--reward-ckpt", "/reward_ckpt", "reward checkpoint (or gt marker)");
    opt_list(sub, s, "--data", "/data", "episode stores (cloning / gt-reward arms)");
    opt_flag(sub, s, "--bc", "/bc", true, "train the behavior-cloning baseline instead");
    opt_double(sub, s, "--alpha", "/solver/alpha", "KL temperature");
    opt_int(sub, s, "--episodes", "/solver/episodes", "imagined training episodes");
    opt_int(sub, s, "--horizon", "/solver/horizon", "imagined rollout length");
    opt_int(sub, s, "--batch", "/solver/batch", "transitions per update");
    opt_flag(sub, s, "--no-behavior-reg", "/solver/behavior_reg", false,
             "hard-max backup without the reference policy");
    opt_flag(sub, s, "--gt-image", "/solver/gt_image", true,
             "re-tokenize imagined frames from predicted states");
    opt_int(sub, s, "--terrain", "/terrain", "terrain id for the task description");
    opt_int(sub, s, "--seed", "/seed", "training seed");
    opt_str(sub, s, "--out", "/out", "policy checkpoint path");
    bind(sub, s, cmd_solve,
         json{{"seed", 0},
              {"bc", false},
              {"terrain", -1},
              {"solver", solver::SolverConfig().to_json()},
              {"bc_config", solver::BcConfig().to_json()}});
  }
  {
    auto* sub = app.add_subcommand("answer",
                                   "answer a task description with frames and actions");
    auto s = attach_config(sub);
    opt_str(sub, s, "--scenario", "/scenario", "task scenario");
    opt_str(sub, s, "--dynamics-ckpt", "/dynamics_ckpt", "dynamics checkpoint");
    opt_str(sub, s, "--tokenizer-ckpt", "/tokenizer_ckpt", "tokenizer checkpoint");
    opt_str(sub, s, "--reward-ckpt", "/reward_ckpt", "reward checkpoint");
    opt_str(sub, s, "--reuse-policy", "/reuse_policy",
            "reuse this policy checkpoint instead of training a fresh one");
    opt_int(sub, s, "--horizon", "/horizon", "rollout length (frames = horizon + 1)");
    opt_int(sub, s, "--episodes", "/solver/episodes", "fresh-policy training episodes");
    opt_double(sub, s, "--alpha", "/solver/alpha", "KL temperature");
    opt_int(sub, s, "--terrain", "/terrain", "terrain id for the task description");
    opt_int(sub, s, "--seed", "/seed", "rollout / training seed");
    opt_str(sub, s, "--out", "/out", "answer output directory");
    bind(sub, s, cmd_answer,
         json{{"seed", 0},
              {"horizon", 40},
              {"terrain", -1},
              {"solver", solver::SolverConfig().to_json()}});
  }
  {
    auto* sub = app.add_subcommand("eval", "evaluate policies in the real environment");
    auto s = attach_config(sub);
    opt_str(sub, s, "--scenario", "/scenario", "evaluation scenario");
    opt_list(sub, s, "--policy", "/policy", "policy checkpoints (repeatable)");
    opt_seeds(sub, s, "--seeds", "/seeds", "comma-separated seeds (at least two)");
    opt_int(sub, s, "--episodes", "/episodes", "episodes per seed");
    opt_str(sub, s, "--dynamics-ckpt", "/dynamics_ckpt", "dynamics checkpoint (soft-q rows)");
    opt_str(sub, s, "--tokenizer-ckpt", "/tokenizer_ckpt", "tokenizer checkpoint (soft-q rows)");
    opt_flag(sub, s, "--with-random", "/with_random", true, "add a uniform-random row");
    opt_int(sub, s, "--terrain", "/terrain", "terrain id for the task description");
    opt_str(sub, s, "--out", "/out", "also write the report JSON here");
    bind(sub, s, cmd_eval,
         json{{"seeds", json::array({0, 1})},
              {"episodes", 32},
              {"terrain", -1},
              {"with_random", false}});
  }
  {
    auto* sub = app.add_subcommand("rollout", "roll a policy inside the dynamics model");
    auto s = attach_config(sub);
    opt_str(sub, s, "--ckpt", "/ckpt", "dynamics checkpoint");
    opt_str(sub, s, "--tokenizer-ckpt", "/tokenizer_ckpt", "tokenizer checkpoint");
    opt_str(sub, s, "--scenario", "/scenario", "scenario name or JSON path");
    opt_str(sub, s, "--policy", "/policy", "random|ref");
    opt_int(sub, s, "--horizon", "/horizon", "rollout length");
    opt_int(sub, s, "--seed", "/seed", "rollout seed");
    opt_str(sub, s, "--out", "/out", "frame output directory");
    bind(sub, s, cmd_rollout,
         json{{"policy", "random"}, {"horizon", 40}, {"seed", 0}});
  }
  {
    auto* sub = app.add_subcommand("pipeline", "run every stage in order");
    auto s = attach_config(sub);
    opt_list(sub, s, "--scenario", "/scenarios", "training scenarios (repeatable)");
    opt_str(sub, s, "--solve-scenario", "/solve_scenario", "task scenario (defaults to first)");
    opt_int(sub, s, "--seed", "/seed", "pipeline seed");
    opt_seeds(sub, s, "--seeds", "/solve_seeds", "comma-separated policy seeds");
    opt_int(sub, s, "--episodes", "/episodes", "collected episodes per scenario");
    opt_str(sub, s, "--collect-policy", "/collect_policy", "collection policy");
    opt_int(sub, s, "--eval-episodes", "/eval_episodes", "evaluation episodes per seed");
    opt_int(sub, s, "--tokenizer-steps", "/tokenizer/steps", "tokenizer training steps");
    opt_int(sub, s, "--dynamics-steps", "/dynamics/steps", "dynamics training steps");
    opt_int(sub, s, "--reward-steps", "/reward/steps", "reward training steps");
    opt_int(sub, s, "--solve-episodes", "/solver/episodes", "imagined training episodes");
    opt_double(sub, s, "--alpha", "/solver/alpha", "KL temperature");
    opt_flag(sub, s, "--no-residual", "/no_residual", true, "wo-RT ablation");
    opt_flag(sub, s, "--no-image-ref", "/no_image_ref", true, "wo-IR ablation");
    opt_flag(sub, s, "--gt-image", "/gt_image", true, "GTI ablation");
    opt_flag(sub, s, "--no-reward-constraint", "/no_reward_constraint", true, "wo-RC ablation");
    opt_flag(sub, s, "--no-behavior-reg", "/no_behavior_reg", true, "wo-BR ablation");
    opt_flag(sub, s, "--gt-reward", "/gt_reward", true, "GTR ablation");
    opt_flag(sub, s, "--with-gtr", "/with_gtr", true, "add the offline gt-reward arm");
    opt_flag(sub, s, "--no-bc", "/with_bc", false, "drop the cloning arm");
    opt_flag(sub, s, "--no-random", "/with_random", false, "drop the random row");
    opt_str(sub, s, "--out", "/out_dir", "run directory");
    bind(sub, s, cmd_pipeline, pipeline::PipelineConfig().to_json());
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfigError;
  }

  try {
    return action ? action() : kExitConfigError;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitStageFailure;
  }
}

}  // namespace lbi::cli
