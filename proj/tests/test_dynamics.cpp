#include <filesystem>

#include "lbi/dynamics.hpp"
#include "torch_doctest.hpp"

using namespace lbi;
using dyn::DynamicsConfig;
using dyn::DynamicsModel;
using dyn::SequenceBatch;
using model::ModelLayout;
using torch::Tensor;

namespace {

env::Scenario load_scenario(const std::string& name) {
  return env::Scenario::load(std::string(LBI_SCENARIO_DIR) + "/" + name + ".json");
}

DynamicsConfig tiny_config() {
  DynamicsConfig cfg;
  cfg.layers = 2;
  cfg.heads = 4;
  cfg.embed_dim = 32;
  cfg.window = 8;
  cfg.batch = 8;
  cfg.steps = 0;
  return cfg;
}

vq::VqConfig tiny_vq() {
  vq::VqConfig cfg;
  cfg.num_codes = 16;
  cfg.latent_dim = 8;
  cfg.channels = 8;
  cfg.steps = 0;
  return cfg;
}

std::filesystem::path temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("lbi_dyn_" + tag);
  std::filesystem::create_directories(p);
  return p;
}

vq::VqVae init_tokenizer(const data::EpisodeStore& store, const std::string& tag, uint64_t seed) {
  const auto ckpt = temp_dir(tag) / "tok.pt";
  vq::train_tokenizer(store, store, tiny_vq(), seed, ckpt);
  return vq::load_tokenizer(ckpt);
}

// A store whose states never change: every action is a no-op and the
// trajectory repeats the reset state.
data::EpisodeStore constant_store(const env::Scenario& scn, int episodes, int T) {
  data::EpisodeStore store(scn);
  env::BattleEnv env(scn);
  for (int e = 0; e < episodes; ++e) {
    auto reset = env.reset(100 + e);
    data::Trajectory traj;
    const auto sv = env.state_vector(reset.state);
    std::vector<std::vector<float>> obs_rows;
    for (int i = 0; i < scn.n_allies(); ++i) obs_rows.push_back(env.observe(reset.state, i));
    std::vector<uint8_t> noop_only(scn.action_count(), 0);
    noop_only[env::kActionNoop] = 1;
    for (int t = 0; t <= T; ++t) {
      traj.states.push_back(sv);
      traj.obs.push_back(obs_rows);
      traj.avail.push_back(
          std::vector<std::vector<uint8_t>>(scn.n_allies(), noop_only));
      traj.done.push_back(std::vector<uint8_t>(scn.n_allies(), 0));
    }
    for (int t = 0; t < T; ++t) {
      traj.actions.push_back(std::vector<int32_t>(scn.n_allies(), env::kActionNoop));
      traj.rewards.push_back(0.0f);
    }
    store.append(std::move(traj));
  }
  return store;
}

SequenceBatch random_batch(const ModelLayout& L, int latent, int B, int W, uint64_t seed) {
  model::init_torch(seed);
  SequenceBatch b;
  b.desc = torch::rand({B, vision::kDescriptorDim});
  b.zbar = torch::randn({B, W + 1, latent});
  b.state = torch::rand({B, W + 1, L.state_dim()});
  b.obs = torch::randn({B, W, L.n_max, L.obs_dim()});
  b.actions = torch::randint(L.a_max(), {B, W, L.n_max}, torch::kLong);
  b.avail = torch::ones({B, W, L.n_max, L.a_max()});
  b.t0 = torch::zeros({B}, torch::kLong);
  b.valid = torch::ones({B, W});
  return b;
}

}  // namespace

TEST_SUITE_BEGIN("dynamics");

TEST_CASE("slot bookkeeping follows the layout") {
  model::init_torch(1);
  ModelLayout L{3, 3};
  DynamicsModel with_z(tiny_config(), L, 8);
  CHECK(with_z->slots_per_step() == 3 + 2 * 3);
  auto cfg = tiny_config();
  cfg.image_ref = false;
  DynamicsModel without_z(cfg, L, 8);
  CHECK(without_z->slots_per_step() == 2 + 2 * 3);
}

TEST_CASE("causal mask: perturbing a later timestep leaves earlier outputs bit-equal") {
  model::init_torch(2);
  ModelLayout L{3, 3};
  DynamicsModel model(tiny_config(), L, 8);
  model->eval();
  torch::NoGradGuard ng;

  SequenceBatch a = random_batch(L, 8, 2, 4, 77);
  SequenceBatch b = a;
  b.state = a.state.clone();
  b.obs = a.obs.clone();
  b.zbar = a.zbar.clone();
  b.actions = a.actions.clone();
  b.state.select(1, 2).fill_(0.123f);
  b.obs.select(1, 2).fill_(-1.0f);
  b.zbar.select(1, 2).fill_(3.0f);
  b.actions.select(1, 2).fill_(1);

  auto pa = model->forward(a);
  auto pb = model->forward(b);
  CHECK(torch::equal(pa.action_logits.narrow(1, 0, 2), pb.action_logits.narrow(1, 0, 2)));
  CHECK(torch::equal(pa.state_out.narrow(1, 0, 2), pb.state_out.narrow(1, 0, 2)));
  CHECK(torch::equal(pa.zbar_out.narrow(1, 0, 2), pb.zbar_out.narrow(1, 0, 2)));
  // The perturbed step itself must change somewhere, or the probe is vacuous.
  CHECK(!torch::equal(pa.state_out.select(1, 2), pb.state_out.select(1, 2)));
}

TEST_CASE("within a step, action slots come after the logits that predict them") {
  model::init_torch(2);
  ModelLayout L{3, 3};
  DynamicsModel model(tiny_config(), L, 8);
  model->eval();
  torch::NoGradGuard ng;

  SequenceBatch a = random_batch(L, 8, 1, 3, 78);
  SequenceBatch b = a;
  b.actions = a.actions.clone();
  b.actions.select(1, 1).fill_(2);  // change the joint action at t = 1

  auto pa = model->forward(a);
  auto pb = model->forward(b);
  // Logits at t=1 read the o slots, which precede the u slots.
  CHECK(torch::equal(pa.action_logits.narrow(1, 0, 2), pb.action_logits.narrow(1, 0, 2)));
  CHECK(torch::equal(pa.state_out.select(1, 0), pb.state_out.select(1, 0)));
  // The state prediction at t=1 reads u^n of t=1 and must react.
  CHECK(!torch::equal(pa.state_out.select(1, 1), pb.state_out.select(1, 1)));
}

TEST_CASE("observation head sees only the current state") {
  model::init_torch(3);
  ModelLayout L{3, 3};
  DynamicsModel model(tiny_config(), L, 8);
  model->eval();
  torch::NoGradGuard ng;

  SequenceBatch a = random_batch(L, 8, 2, 4, 79);
  SequenceBatch b = a;
  b.desc = torch::rand_like(a.desc);
  b.zbar = torch::randn_like(a.zbar);
  b.obs = torch::randn_like(a.obs);
  b.actions = torch::randint_like(a.actions, L.a_max());

  auto pa = model->forward(a);
  auto pb = model->forward(b);
  CHECK(torch::equal(pa.obs_pred, pb.obs_pred));
}

TEST_CASE("incremental decoding with the KV cache matches the full forward pass") {
  model::init_torch(4);
  ModelLayout L{3, 3};
  DynamicsModel model(tiny_config(), L, 8);
  model->eval();
  torch::NoGradGuard ng;

  const int W = 5;
  SequenceBatch b = random_batch(L, 8, 3, W, 80);
  auto full = model->forward(b);

  dyn::SequenceContext ctx(model, b.desc);
  for (int k = 0; k < W; ++k) {
    Tensor logits = ctx.step_begin(b.zbar.select(1, k), b.state.select(1, k), b.obs.select(1, k));
    CHECK(torch::allclose(logits, full.action_logits.select(1, k), 1e-5, 2e-5));
    auto [ds, dz] = ctx.step_end(b.actions.select(1, k));
    CHECK(torch::allclose(ds, full.state_out.select(1, k), 1e-5, 2e-5));
    CHECK(torch::allclose(dz, full.zbar_out.select(1, k), 1e-5, 2e-5));
  }
  CHECK(ctx.t() == W);
}

TEST_CASE("masked softmax oracles") {
  Tensor logits = torch::tensor({{3.0f, -1.0f, 0.5f, 2.0f}});
  Tensor only_two = torch::tensor({{0.0f, 0.0f, 1.0f, 0.0f}});
  Tensor p = dyn::masked_softmax(logits, only_two);
  CHECK(p[0][2].item<float>() == 1.0f);

  Tensor uniform = dyn::masked_softmax(torch::tensor({{0.7f, 0.7f, 0.0f, 0.0f}}),
                                       torch::tensor({{1.0f, 1.0f, 0.0f, 0.0f}}));
  CHECK(uniform[0][0].item<float>() == doctest::Approx(0.5));
  CHECK(uniform[0][1].item<float>() == doctest::Approx(0.5));
  CHECK(uniform.sum().item<float>() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("episode tensors pad agents and cycle terrain deterministically") {
  const auto scn = load_scenario("m3v3");
  data::EpisodeStore store = data::collect(scn, data::PolicyKind::kScripted, 4, 51);
  ModelLayout L{5, 6};
  auto eps = dyn::episode_tensors(store, L, nullptr, true);
  REQUIRE(eps.size() == 4);
  for (int e = 0; e < 4; ++e) {
    const auto& et = eps[e];
    const int terrain = dyn::augmented_terrain(scn, e, true);
    CHECK(terrain == e % 3);
    // Terrain one-hot patched into the padded state rows.
    for (int t = 0; t <= et.T; ++t)
      for (int k = 0; k < env::kNumTerrains; ++k)
        CHECK(et.state[t][8 * L.units() + k].item<float>() == (k == terrain ? 1.0f : 0.0f));
    // Description vec carries the same terrain.
    for (int k = 0; k < env::kNumTerrains; ++k)
      CHECK(et.desc[k].item<float>() == (k == terrain ? 1.0f : 0.0f));
    // Padded agents may only no-op.
    for (int t = 0; t < et.T; ++t)
      for (int i = scn.n_allies(); i < L.n_max; ++i) {
        CHECK(et.avail[t][i][env::kActionNoop].item<float>() == 1.0f);
        CHECK(et.avail[t][i].sum().item<float>() == 1.0f);
        CHECK(et.actions[t][i].item<int64_t>() == env::kActionNoop);
      }
    // Real rows match the padding helpers.
    const auto padded = model::pad_obs(scn, L, store.episode(e).obs[0][1], 1);
    for (int k = 0; k < L.obs_dim(); ++k)
      CHECK(et.obs[0][1][k].item<float>() == padded[static_cast<size_t>(k)]);
  }
  CHECK(dyn::augmented_terrain(scn, 1, false) == scn.terrain_id);
}

TEST_CASE("constant transitions drive the residual head to zero") {
  const auto scn = load_scenario("m3v3");
  auto store = constant_store(scn, 6, 4);
  vq::VqVae tok = init_tokenizer(store, "const_tok", 5);

  auto cfg = tiny_config();
  cfg.window = 4;
  cfg.steps = 300;
  cfg.lr = 5e-3;
  ModelLayout L{3, 3};
  const auto ckpt = temp_dir("const") / "dyn.pt";
  auto metrics =
      dyn::train_dynamics({&store}, {&store}, tok, cfg, L, 13, ckpt, false);
  CHECK(metrics.val_state_mse < 1e-4);

  DynamicsModel model = dyn::load_dynamics(ckpt);
  torch::NoGradGuard ng;
  auto eps = dyn::episode_tensors(store, L, &tok, false);
  SequenceBatch b = random_batch(L, tok->config().latent_dim, 1, 4, 81);
  b.desc[0] = eps[0].desc;
  b.zbar[0] = eps[0].zbar;
  b.state[0] = eps[0].state;
  b.obs[0] = eps[0].obs;
  b.actions[0] = eps[0].actions;
  auto pred = model->forward(b);
  CHECK(pred.state_out.pow(2).mean().item<double>() < 1e-4);
}

TEST_CASE("absolute-state ablation predicts the next state directly") {
  const auto scn = load_scenario("m3v3");
  auto store = constant_store(scn, 6, 4);
  vq::VqVae tok = init_tokenizer(store, "abs_tok", 5);

  auto cfg = tiny_config();
  cfg.window = 4;
  cfg.steps = 600;
  cfg.lr = 5e-3;
  cfg.residual = false;
  ModelLayout L{3, 3};
  const auto ckpt = temp_dir("abs") / "dyn.pt";
  dyn::train_dynamics({&store}, {&store}, tok, cfg, L, 13, ckpt, false);

  DynamicsModel model = dyn::load_dynamics(ckpt);
  CHECK(!model->config().residual);
  torch::NoGradGuard ng;
  auto eps = dyn::episode_tensors(store, L, &tok, false);
  SequenceBatch b = random_batch(L, tok->config().latent_dim, 1, 4, 82);
  b.desc[0] = eps[0].desc;
  b.zbar[0] = eps[0].zbar;
  b.state[0] = eps[0].state;
  b.obs[0] = eps[0].obs;
  b.actions[0] = eps[0].actions;
  auto pred = model->forward(b);
  CHECK((pred.state_out - b.state.narrow(1, 1, 4)).pow(2).mean().item<double>() < 1e-3);
}

TEST_CASE("held-out state error shrinks with training and is seed-deterministic") {
  const auto scn = load_scenario("m3v3");
  data::EpisodeStore store = data::collect(scn, data::PolicyKind::kMixed, 24, 61);
  auto [train, val] = store.split(0.75, 0.25, 61);
  vq::VqVae tok = init_tokenizer(train, "real_tok", 7);

  auto cfg = tiny_config();
  const auto dir = temp_dir("real");
  auto before = dyn::train_dynamics({&train}, {&val}, tok, cfg, ModelLayout{3, 3}, 21,
                                    dir / "d0.pt");
  cfg.steps = 250;
  auto after = dyn::train_dynamics({&train}, {&val}, tok, cfg, ModelLayout{3, 3}, 21,
                                   dir / "d1.pt");
  auto again = dyn::train_dynamics({&train}, {&val}, tok, cfg, ModelLayout{3, 3}, 21,
                                   dir / "d2.pt");

  CHECK(after.val_state_mse < before.val_state_mse);
  CHECK(after.val_action_ce < before.val_action_ce);
  CHECK(after.final_loss == doctest::Approx(again.final_loss).epsilon(1e-12));
  CHECK(after.val_state_mse == doctest::Approx(again.val_state_mse).epsilon(1e-12));
}

TEST_CASE("rollout honors horizon bounds") {
  const auto scn = load_scenario("m3v3");
  auto store = constant_store(scn, 2, 2);
  vq::VqVae tok = init_tokenizer(store, "roll_tok", 5);
  model::init_torch(9);
  ModelLayout L{3, 3};
  DynamicsModel model(tiny_config(), L, tok->config().latent_dim);

  auto starts = dyn::starts_from_store(store, L, tok, {0, 1}, false);
  auto noop_policy = [&](int, const std::vector<float>&,
                         const std::vector<std::vector<float>>&,
                         const std::vector<std::vector<uint8_t>>& avail,
                         const std::vector<std::vector<float>>&) {
    std::vector<int> acts;
    for (const auto& m : avail)
      acts.push_back(m[env::kActionStop] ? env::kActionStop : env::kActionNoop);
    return acts;
  };

  auto zero = dyn::rollout(model, scn, starts, noop_policy, 0);
  REQUIRE(zero.size() == 2);
  CHECK(zero[0].T() == 0);
  CHECK(zero[0].states.size() == 1);
  CHECK(zero[0].states[0] == starts[0].state);

  CHECK_THROWS_AS(dyn::rollout(model, scn, starts, noop_policy, dyn::kMaxContext + 1),
                  ContractViolation);
}

TEST_CASE("rollout enforces masks, freezes the dead, and keeps flags monotone") {
  const auto scn = load_scenario("m3v3");
  data::EpisodeStore store = data::collect(scn, data::PolicyKind::kScripted, 3, 71);
  vq::VqVae tok = init_tokenizer(store, "roll2_tok", 5);
  model::init_torch(10);
  ModelLayout L{3, 3};
  DynamicsModel model(tiny_config(), L, tok->config().latent_dim);

  auto starts = dyn::starts_from_store(store, L, tok, {0, 1, 2}, false);
  std::mt19937_64 rng(99);
  auto random_policy = [&](int, const std::vector<float>&,
                           const std::vector<std::vector<float>>&,
                           const std::vector<std::vector<uint8_t>>& avail,
                           const std::vector<std::vector<float>>& qref) {
    std::vector<int> acts;
    for (size_t i = 0; i < avail.size(); ++i) {
      double total = 0.0;
      for (size_t a = 0; a < qref[i].size(); ++a) total += qref[i][a];
      CHECK(total == doctest::Approx(1.0).epsilon(1e-5));
      std::vector<int> options;
      for (size_t a = 0; a < avail[i].size(); ++a)
        if (avail[i][a]) options.push_back(static_cast<int>(a));
      acts.push_back(options[rng() % options.size()]);
    }
    return acts;
  };

  auto sims = dyn::rollout(model, scn, starts, random_policy, 15);
  for (const auto& sim : sims) {
    REQUIRE(sim.states.size() == static_cast<size_t>(sim.T() + 1));
    REQUIRE(sim.alive.size() == sim.states.size());
    for (int t = 0; t < sim.T(); ++t) {
      for (int u = 0; u < L.units(); ++u)
        CHECK(sim.alive[t + 1][u] <= sim.alive[t][u]);  // dead stays dead
      for (int i = 0; i < L.n_max; ++i) {
        CHECK(sim.avail[t][i][sim.actions[t][i]] == 1);
        if (!sim.alive[t][i]) {
          CHECK(sim.actions[t][i] == env::kActionNoop);
          CHECK(sim.qref[t][i][env::kActionNoop] == 1.0f);
          for (float v : sim.obs[t][i]) CHECK(v == 0.0f);
        }
      }
    }
  }

  auto bad_policy = [&](int, const std::vector<float>&,
                        const std::vector<std::vector<float>>&,
                        const std::vector<std::vector<uint8_t>>&,
                        const std::vector<std::vector<float>>&) {
    return std::vector<int>(L.n_max, env::kActionNoop);  // no-op while alive
  };
  CHECK_THROWS_AS(dyn::rollout(model, scn, starts, bad_policy, 3), ContractViolation);
}

TEST_CASE("rollout starts carry augmented descriptors and pooled embeddings") {
  const auto scn = load_scenario("m3v3");
  data::EpisodeStore store = data::collect(scn, data::PolicyKind::kScripted, 3, 81);
  vq::VqVae tok = init_tokenizer(store, "starts_tok", 5);
  ModelLayout L{5, 6};

  auto starts = dyn::starts_from_store(store, L, tok, {0, 1, 2}, true);
  REQUIRE(starts.size() == 3);
  for (int e = 0; e < 3; ++e) {
    const int terrain = dyn::augmented_terrain(scn, e, true);
    for (int k = 0; k < env::kNumTerrains; ++k) {
      CHECK(starts[e].desc[k] == (k == terrain ? 1.0f : 0.0f));
      CHECK(starts[e].state[8 * L.units() + k] == (k == terrain ? 1.0f : 0.0f));
    }
    env::EnvState st = vision::state_from_vector(scn, store.episode(e).states[0]);
    auto grid = vq::encode_frame(tok, vision::augment(scn, st, terrain));
    auto pooled = vq::pooled_embedding(tok, grid);
    REQUIRE(starts[e].zbar.size() == pooled.size());
    for (size_t k = 0; k < pooled.size(); ++k)
      CHECK(starts[e].zbar[k] == doctest::Approx(pooled[k]).epsilon(1e-5));
  }
}

TEST_CASE("dynamics checkpoints restore an identical model") {
  const auto scn = load_scenario("m3v3");
  auto store = constant_store(scn, 4, 3);
  vq::VqVae tok = init_tokenizer(store, "ckpt_tok", 5);
  auto cfg = tiny_config();
  cfg.window = 3;
  const auto ckpt = temp_dir("ckpt") / "dyn.pt";
  dyn::train_dynamics({&store}, {}, tok, cfg, ModelLayout{3, 3}, 55, ckpt, false);

  DynamicsModel loaded = dyn::load_dynamics(ckpt);
  model::init_torch(mix_seed(55, 0xD1CE));
  DynamicsModel fresh(cfg, ModelLayout{3, 3}, tok->config().latent_dim);
  auto lp = loaded->parameters();
  auto fp = fresh->parameters();
  REQUIRE(lp.size() == fp.size());
  for (size_t i = 0; i < lp.size(); ++i) CHECK(torch::equal(lp[i], fp[i]));

  CHECK_THROWS_AS(dyn::load_dynamics(temp_dir("ckpt_tok") / "tok.pt"), ConfigError);
}

TEST_SUITE_END();
