#include <filesystem>

#include "lbi/reward.hpp"
#include "torch_doctest.hpp"

using namespace lbi;
using model::ModelLayout;
using reward::IrlBatch;
using reward::MasacBatch;
using reward::RewardConfig;
using reward::RewardModel;
using reward::RewardTraj;
using torch::Tensor;

namespace {

env::Scenario load_scenario(const std::string& name) {
  return env::Scenario::load(std::string(LBI_SCENARIO_DIR) + "/" + name + ".json");
}

RewardConfig tiny_config() {
  RewardConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.embed_dim = 16;
  cfg.steps = 0;
  cfg.batch = 2;
  cfg.policy_horizon = 4;
  cfg.masac_batch = 32;
  return cfg;
}

std::filesystem::path temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("lbi_rew_" + tag);
  std::filesystem::create_directories(p);
  return p;
}

// Random-but-valid forward inputs for a toy layout.
struct Probe {
  Tensor state, actions, desc, lengths;
};

Probe make_probe(const ModelLayout& L, int B, int T, uint64_t seed) {
  model::init_torch(seed);
  Probe p;
  p.state = torch::rand({B, T + 1, L.state_dim()});
  p.actions = torch::randint(L.a_max(), {B, T, L.n_max}, torch::kLong);
  p.desc = torch::rand({B, vision::kDescriptorDim});
  p.lengths = torch::full({B}, T, torch::kLong);
  return p;
}

RewardTraj random_traj(const ModelLayout& L, int T, uint64_t seed) {
  model::init_torch(seed);
  RewardTraj tr;
  tr.state = torch::rand({T + 1, L.state_dim()});
  tr.actions = torch::randint(L.a_max(), {T, L.n_max}, torch::kLong);
  tr.avail = torch::ones({T, L.n_max, L.a_max()});
  tr.alive = torch::ones({T, L.n_max});
  tr.desc = torch::rand({vision::kDescriptorDim});
  return tr;
}

data::EpisodeStore constant_store(const env::Scenario& scn, int episodes, int T) {
  data::EpisodeStore store(scn);
  env::BattleEnv env(scn);
  for (int e = 0; e < episodes; ++e) {
    auto reset = env.reset(300 + e);
    data::Trajectory traj;
    const auto sv = env.state_vector(reset.state);
    std::vector<std::vector<float>> obs_rows;
    for (int i = 0; i < scn.n_allies(); ++i) obs_rows.push_back(env.observe(reset.state, i));
    std::vector<uint8_t> noop_only(scn.action_count(), 0);
    noop_only[env::kActionNoop] = 1;
    for (int t = 0; t <= T; ++t) {
      traj.states.push_back(sv);
      traj.obs.push_back(obs_rows);
      traj.avail.push_back(std::vector<std::vector<uint8_t>>(scn.n_allies(), noop_only));
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

vq::VqConfig tiny_vq() {
  vq::VqConfig cfg;
  cfg.num_codes = 16;
  cfg.latent_dim = 8;
  cfg.channels = 8;
  cfg.steps = 0;
  return cfg;
}

}  // namespace

TEST_SUITE_BEGIN("reward");

TEST_CASE("per-action head: shape, squash, one read-out per step, determinism") {
  model::init_torch(11);
  ModelLayout L{2, 2};
  RewardModel rm(tiny_config(), L);
  rm->eval();
  torch::NoGradGuard ng;

  Probe p = make_probe(L, 3, 5, 21);
  Tensor out = rm->forward(p.state, p.actions, p.desc, p.lengths);
  CHECK(out.sizes() == torch::IntArrayRef({3, 5, 2, L.a_max()}));
  CHECK(out.abs().max().item<float>() <= 1.0f);
  Tensor again = rm->forward(p.state, p.actions, p.desc, p.lengths);
  CHECK(torch::equal(out, again));
}

TEST_CASE("credit assignment is bidirectional in time") {
  model::init_torch(12);
  ModelLayout L{2, 2};
  RewardModel rm(tiny_config(), L);
  rm->eval();
  torch::NoGradGuard ng;

  Probe p = make_probe(L, 1, 4, 22);
  Tensor base = rm->forward(p.state, p.actions, p.desc, p.lengths);

  // An action at t=0 reshapes the reward read at t>0.
  Tensor acts = p.actions.clone();
  acts[0][0][0] = (acts[0][0][0].item<int64_t>() + 1) % L.a_max();
  Tensor shifted = rm->forward(p.state, acts, p.desc, p.lengths);
  CHECK(!torch::equal(base.select(1, 2), shifted.select(1, 2)));

  // The terminal state reshapes the reward read at t=0.
  Tensor st = p.state.clone();
  st.select(1, 4).fill_(0.77f);
  Tensor future = rm->forward(p.state.clone(), p.actions, p.desc, p.lengths);
  Tensor future2 = rm->forward(st, p.actions, p.desc, p.lengths);
  CHECK(!torch::equal(future.select(1, 0), future2.select(1, 0)));
}

TEST_CASE("descriptions steer the predicted rewards") {
  model::init_torch(13);
  ModelLayout L{2, 2};
  RewardModel rm(tiny_config(), L);
  rm->eval();
  torch::NoGradGuard ng;

  Probe p = make_probe(L, 1, 3, 23);
  Tensor a = rm->forward(p.state, p.actions, p.desc, p.lengths);
  Tensor b = rm->forward(p.state, p.actions, p.desc + 0.25f, p.lengths);
  CHECK(!torch::equal(a, b));
}

TEST_CASE("batch padding leaves a short trajectory's rewards unchanged") {
  model::init_torch(14);
  ModelLayout L{2, 2};
  RewardModel rm(tiny_config(), L);
  rm->eval();
  torch::NoGradGuard ng;

  RewardTraj short_tr = random_traj(L, 2, 31);
  RewardTraj long_tr = random_traj(L, 6, 32);
  Tensor alone = reward_forward(rm, {short_tr}).out;
  Tensor padded = reward_forward(rm, {short_tr, long_tr}).out;
  CHECK(torch::allclose(alone[0], padded[0].narrow(0, 0, 2), 1e-5, 1e-6));
}

TEST_CASE("discounted sums follow the closed form") {
  RewardConfig cfg;
  cfg.reward_constraint = false;

  IrlBatch exp;
  exp.out = torch::zeros({1, 2, 1, 3});
  exp.out[0][0][0][1] = 0.3f;
  exp.out[0][1][0][1] = -0.2f;
  exp.actions = torch::ones({1, 2, 1}, torch::kLong);
  exp.avail = torch::ones({1, 2, 1, 3});
  exp.weight = torch::tensor({1.0f, 0.99f}).reshape({1, 2, 1});

  IrlBatch pol;
  pol.out = torch::zeros({1, 2, 1, 3});
  pol.out[0][0][0][2] = 0.1f;
  pol.out[0][1][0][2] = 0.4f;
  pol.actions = torch::full({1, 2, 1}, 2, torch::kLong);
  pol.avail = torch::ones({1, 2, 1, 3});
  pol.weight = exp.weight.clone();

  auto parts = reward::irl_loss(exp, pol, exp.actions, cfg);
  CHECK(parts.expert_term.item<double>() == doctest::Approx(-(0.3 + 0.99 * -0.2)).epsilon(1e-6));
  CHECK(parts.policy_term.item<double>() == doctest::Approx(0.1 + 0.99 * 0.4).epsilon(1e-6));
  CHECK(parts.unavail_term.item<double>() == doctest::Approx(0.0));
  CHECK(parts.total.item<double>() ==
        doctest::Approx(-(0.3 - 0.198) + 0.496).epsilon(1e-6));
}

TEST_CASE("identical expert and policy batches cancel to zero loss") {
  model::init_torch(15);
  RewardConfig cfg;
  cfg.reward_constraint = false;

  IrlBatch exp;
  exp.out = torch::rand({2, 3, 2, 4}) * 2.0 - 1.0;
  exp.actions = torch::randint(4, {2, 3, 2}, torch::kLong);
  exp.avail = torch::ones({2, 3, 2, 4});
  exp.weight = torch::rand({2, 3, 2});
  IrlBatch pol = exp;

  auto parts = reward::irl_loss(exp, pol, exp.actions, cfg);
  CHECK(parts.total.item<double>() == doctest::Approx(0.0).epsilon(1e-7));
}

TEST_CASE("margin stops gradient on confident expert wins only") {
  RewardConfig cfg;
  cfg.reward_constraint = false;
  cfg.beta_margin = 0.5;

  Tensor out = torch::zeros({1, 1, 2, 2});
  out[0][0][0][0] = 0.9f;  // taken; alt 0.1 -> gap 0.8 > beta, capped
  out[0][0][0][1] = 0.1f;
  out[0][0][1][0] = 0.2f;  // taken; alt 0.0 -> gap 0.2 < beta, live
  out.requires_grad_(true);

  IrlBatch exp;
  exp.out = out;
  exp.actions = torch::zeros({1, 1, 2}, torch::kLong);
  exp.avail = torch::ones({1, 1, 2, 2});
  exp.weight = torch::ones({1, 1, 2});

  IrlBatch pol;
  pol.out = torch::zeros({1, 1, 2, 2}, torch::requires_grad());
  pol.actions = torch::zeros({1, 1, 2}, torch::kLong);
  pol.avail = torch::ones({1, 1, 2, 2});
  pol.weight = torch::ones({1, 1, 2});

  Tensor margin = torch::ones({1, 1, 2}, torch::kLong);
  auto parts = reward::irl_loss(exp, pol, margin, cfg);
  parts.total.backward();

  CHECK(out.grad()[0][0][0][0].item<float>() == 0.0f);   // capped
  CHECK(out.grad()[0][0][1][0].item<float>() == -1.0f);  // still learning
  CHECK(out.grad()[0][0][0][1].item<float>() == 0.0f);   // comparison entry is detached
  CHECK(pol.out.grad()[0][0][0][0].item<float>() == 1.0f);
}

TEST_CASE("terminated entries receive exactly zero gradient") {
  RewardConfig cfg;  // reward constraint on: every term must respect the mask

  Tensor out = (torch::rand({1, 3, 2, 3}) * 0.8).requires_grad_(true);
  Tensor weight = torch::ones({1, 3, 2});
  weight.select(2, 1).narrow(0, 0, 1).narrow(1, 1, 2).zero_();  // agent 1 dies at t=1
  Tensor avail = torch::ones({1, 3, 2, 3});
  avail[0][2][1][2] = 0.0f;  // an unavailable action inside the dead region

  IrlBatch exp{out, torch::zeros({1, 3, 2}, torch::kLong), avail, weight};
  IrlBatch pol;
  pol.out = torch::rand({1, 3, 2, 3}).requires_grad_(true);
  pol.actions = torch::zeros({1, 3, 2}, torch::kLong);
  pol.avail = torch::ones({1, 3, 2, 3});
  pol.weight = torch::ones({1, 3, 2});

  auto parts = reward::irl_loss(exp, pol, exp.actions, cfg);
  parts.total.backward();

  Tensor dead = out.grad().select(2, 1).narrow(1, 1, 2);
  CHECK(torch::equal(dead, torch::zeros_like(dead)));
  CHECK(out.grad().select(2, 0).abs().sum().item<float>() > 0.0f);
}

TEST_CASE("discounting is linear in the weights") {
  model::init_torch(16);
  RewardConfig cfg;
  cfg.reward_constraint = false;

  IrlBatch exp;
  exp.out = torch::rand({2, 4, 2, 3}) * 1.6 - 0.8;
  exp.actions = torch::randint(3, {2, 4, 2}, torch::kLong);
  exp.avail = torch::ones({2, 4, 2, 3});
  exp.weight = torch::rand({2, 4, 2});
  IrlBatch pol;
  pol.out = torch::rand({2, 4, 2, 3}) * 1.6 - 0.8;
  pol.actions = torch::randint(3, {2, 4, 2}, torch::kLong);
  pol.avail = torch::ones({2, 4, 2, 3});
  pol.weight = torch::rand({2, 4, 2});

  auto base = reward::irl_loss(exp, pol, exp.actions, cfg);
  IrlBatch exp2 = exp;
  exp2.weight = exp.weight * 2.0;
  IrlBatch pol2 = pol;
  pol2.weight = pol.weight * 2.0;
  auto doubled = reward::irl_loss(exp2, pol2, exp2.actions, cfg);

  CHECK(doubled.expert_term.item<double>() ==
        doctest::Approx(2.0 * base.expert_term.item<double>()).epsilon(1e-6));
  CHECK(doubled.policy_term.item<double>() ==
        doctest::Approx(2.0 * base.policy_term.item<double>()).epsilon(1e-6));
}

TEST_CASE("empty batches are rejected") {
  model::init_torch(17);
  ModelLayout L{2, 2};
  RewardModel rm(tiny_config(), L);
  CHECK_THROWS_AS(reward_forward(rm, {}), DomainError);
}

TEST_CASE("taken rewards are silenced for dead agents and padding") {
  model::init_torch(18);
  ModelLayout L{2, 2};
  RewardModel rm(tiny_config(), L);
  rm->eval();
  torch::NoGradGuard ng;

  RewardTraj tr = random_traj(L, 3, 41);
  tr.alive[1][1] = 0.0f;
  tr.alive[2][0] = 0.0f;
  tr.alive[2][1] = 0.0f;
  RewardTraj longer = random_traj(L, 5, 42);

  auto batch = reward_forward(rm, {tr, longer});
  Tensor taken = reward::taken_rewards(batch);
  CHECK(taken[0][1][1].item<float>() == 0.0f);
  CHECK(taken[0][2][0].item<float>() == 0.0f);
  CHECK(torch::equal(taken[0].narrow(0, 3, 2), torch::zeros({2, 2})));  // padded tail
  CHECK(taken[0][0].abs().sum().item<float>() > 0.0f);

  auto rows = reward::relabel(rm, tr);
  REQUIRE(rows.size() == 3);
  CHECK(rows[1][1] == 0.0f);
  CHECK(rows[0][0] == doctest::Approx(taken[0][0][0].item<float>()).epsilon(1e-6));
}

TEST_CASE("critic target reduces to the reward at gamma zero") {
  model::init_torch(19);
  reward::InnerPolicy net(6, 2, 4);
  RewardConfig cfg;
  cfg.gamma = 0.0;

  MasacBatch b;
  b.state = torch::randn({5, 6});
  b.agent = torch::eye(2).index_select(0, torch::randint(2, {5}, torch::kLong));
  b.action = torch::randint(4, {5}, torch::kLong);
  b.reward = torch::randn({5});
  b.next_state = torch::randn({5, 6});
  b.avail = torch::ones({5, 4});
  b.next_avail = torch::ones({5, 4});
  b.done = torch::zeros({5});

  CHECK(torch::equal(reward::critic_target(net, b, cfg), b.reward));
}

TEST_CASE("critic target matches the soft backup when the next action is forced") {
  model::init_torch(20);
  reward::InnerPolicy net(6, 2, 4);
  RewardConfig cfg;

  MasacBatch b;
  b.state = torch::randn({3, 6});
  b.agent = torch::eye(2).index_select(0, torch::tensor({0, 1, 0}));
  b.action = torch::zeros({3}, torch::kLong);
  b.reward = torch::tensor({0.5f, -0.25f, 0.0f});
  b.next_state = torch::randn({3, 6});
  b.avail = torch::ones({3, 4});
  b.next_avail = torch::zeros({3, 4});
  b.next_avail.select(1, 2).fill_(1.0f);  // only action 2 survives the mask
  b.done = torch::tensor({0.0f, 1.0f, 0.0f});

  torch::NoGradGuard ng;
  Tensor y = reward::critic_target(net, b, cfg);
  Tensor logp = reward::masked_log_softmax(net->pi_logits(b.next_state, b.agent), b.next_avail);
  Tensor q = net->q_target(b.next_state, b.agent);
  for (int i = 0; i < 3; ++i) {
    const double expected =
        b.reward[i].item<float>() +
        cfg.gamma * (1.0 - b.done[i].item<float>()) *
            (q[i][2].item<float>() - cfg.alpha_sac * logp[i][2].item<float>());
    CHECK(y[i].item<double>() == doctest::Approx(expected).epsilon(1e-6));
  }
}

TEST_CASE("actor objective settles at the soft fixed point") {
  model::init_torch(21);
  RewardConfig cfg;
  cfg.alpha_sac = 1.0;

  reward::InnerPolicy net(4, 1, 2);
  torch::optim::Adam opt(net->pi_parameters(), torch::optim::AdamOptions(1e-2));
  Tensor state = torch::zeros({1, 4});
  Tensor agent = torch::ones({1, 1});
  Tensor avail = torch::ones({1, 2});
  Tensor q_fixed = torch::tensor({{1.0f, 0.0f}});
  for (int i = 0; i < 400; ++i) {
    Tensor loss = reward::actor_loss(net, state, agent, avail, q_fixed, cfg);
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  Tensor p = reward::masked_log_softmax(net->pi_logits(state, agent), avail).exp();
  CHECK(p[0][0].item<float>() == doctest::Approx(0.7311).epsilon(0.02));
  CHECK(p[0][1].item<float>() == doctest::Approx(0.2689).epsilon(0.05));

  // Flat values under a mask: the optimum is uniform over the support only.
  reward::InnerPolicy net3(4, 1, 3);
  torch::optim::Adam opt3(net3->pi_parameters(), torch::optim::AdamOptions(1e-2));
  Tensor avail3 = torch::tensor({{1.0f, 1.0f, 0.0f}});
  Tensor q_zero = torch::zeros({1, 3});
  for (int i = 0; i < 400; ++i) {
    Tensor loss = reward::actor_loss(net3, state, agent, avail3, q_zero, cfg);
    opt3.zero_grad();
    loss.backward();
    opt3.step();
  }
  Tensor p3 = reward::masked_log_softmax(net3->pi_logits(state, agent), avail3).exp();
  CHECK(p3[0][0].item<float>() == doctest::Approx(0.5).epsilon(0.02));
  CHECK(p3[0][2].item<float>() == 0.0f);
}

TEST_CASE("masac updates run and the target critic syncs on schedule") {
  model::init_torch(22);
  reward::InnerPolicy net(6, 2, 4);
  RewardConfig cfg;
  cfg.target_copy = 2;
  torch::optim::Adam pi_opt(net->pi_parameters(), torch::optim::AdamOptions(cfg.sac_lr));
  torch::optim::Adam q_opt(net->q_parameters(), torch::optim::AdamOptions(cfg.sac_lr));

  MasacBatch b;
  b.state = torch::randn({16, 6});
  b.agent = torch::eye(2).index_select(0, torch::randint(2, {16}, torch::kLong));
  b.action = torch::randint(4, {16}, torch::kLong);
  b.reward = torch::randn({16});
  b.next_state = torch::randn({16, 6});
  b.avail = torch::ones({16, 4});
  b.next_avail = torch::ones({16, 4});
  b.done = torch::zeros({16});

  auto params_equal = [&] {
    auto named = net->named_parameters();
    for (const auto& item : named)
      if (item.key().rfind("q_tgt.", 0) == 0 &&
          !torch::equal(item.value(), named[std::string("q.") + item.key().substr(6)]))
        return false;
    return true;
  };

  int counter = 0;
  auto [c1, a1] = reward::masac_update(net, b, cfg, pi_opt, q_opt, &counter);
  CHECK(std::isfinite(c1));
  CHECK(std::isfinite(a1));
  CHECK(counter == 1);
  CHECK(!params_equal());  // critic moved, target lags
  reward::masac_update(net, b, cfg, pi_opt, q_opt, &counter);
  CHECK(counter == 2);
  CHECK(params_equal());  // hard sync on schedule
}

TEST_CASE("one reward step separates expert from policy actions at the same states") {
  model::init_torch(23);
  ModelLayout L{2, 2};
  RewardConfig cfg = tiny_config();
  cfg.reward_constraint = false;  // isolate the two discounted-sum terms
  RewardModel rm(cfg, L);
  torch::optim::AdamW opt(rm->parameters(), torch::optim::AdamWOptions(5e-3));

  RewardTraj expert = random_traj(L, 3, 51);
  expert.actions.fill_(1);
  RewardTraj policy = expert;
  policy.actions = expert.actions.clone();
  policy.actions.fill_(2);

  auto snapshot = [&] {
    torch::NoGradGuard ng;
    rm->eval();
    auto batch = reward_forward(rm, {expert});
    Tensor out = batch.out[0];  // [T,n,a]
    rm->train();
    return std::make_pair(out.select(2, 1).sum().item<double>(),
                          out.select(2, 2).sum().item<double>());
  };

  auto [exp_before, pol_before] = snapshot();
  auto exp_fw = reward_forward(rm, {expert});
  auto pol_fw = reward_forward(rm, {policy});
  Tensor gammas = torch::pow(cfg.gamma, torch::arange(3, torch::kFloat));
  IrlBatch exp_b{exp_fw.out, exp_fw.actions, exp_fw.avail,
                 gammas.reshape({1, 3, 1}) * exp_fw.alive};
  IrlBatch pol_b{pol_fw.out, pol_fw.actions, pol_fw.avail,
                 gammas.reshape({1, 3, 1}) * pol_fw.alive};
  auto parts = reward::irl_loss(exp_b, pol_b, exp_fw.actions, cfg);
  opt.zero_grad();
  parts.total.backward();
  opt.step();
  auto [exp_after, pol_after] = snapshot();

  CHECK(exp_after > exp_before);
  CHECK(pol_after < pol_before);
}

TEST_CASE("alternation holds the k-to-one ratio and checkpoints round trip") {
  const auto scn = load_scenario("m3v3");
  ModelLayout L{3, 3};
  auto store = constant_store(scn, 4, 6);
  const auto dir = temp_dir("alt");

  vq::train_tokenizer(store, store, tiny_vq(), 91, dir / "tok.pt");
  auto tok = vq::load_tokenizer(dir / "tok.pt");
  dyn::DynamicsConfig dcfg;
  dcfg.layers = 1;
  dcfg.heads = 2;
  dcfg.embed_dim = 16;
  dcfg.steps = 0;
  dcfg.window = 4;
  dcfg.batch = 4;
  dyn::train_dynamics({&store}, {}, tok, dcfg, L, 92, dir / "dyn.pt");
  auto dyn_model = dyn::load_dynamics(dir / "dyn.pt");

  RewardConfig cfg = tiny_config();
  cfg.steps = 2;
  cfg.k = 5;
  auto metrics =
      reward::train_reward({&store}, {&store}, dyn_model, tok, cfg, L, 93, dir / "rew.pt");
  CHECK(metrics.reward_steps == 2);
  CHECK(metrics.policy_steps == 10);
  CHECK(std::isfinite(metrics.final_loss));
  CHECK(metrics.val_unavail_abs >= 0.0);

  json meta;
  auto loaded = reward::load_reward(dir / "rew.pt", &meta);
  CHECK(meta.at("kind") == "reward");
  CHECK(meta.at("metrics").at("policy_steps") == 10);
  CHECK_THROWS_AS(reward::load_reward(dir / "tok.pt"), ConfigError);

  // Same seed, same data: training must reproduce bit-identical parameters.
  auto metrics2 =
      reward::train_reward({&store}, {&store}, dyn_model, tok, cfg, L, 93, dir / "rew2.pt");
  CHECK(metrics2.final_loss == metrics.final_loss);
  auto loaded2 = reward::load_reward(dir / "rew2.pt");
  auto pa = loaded->parameters();
  auto pb = loaded2->parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) CHECK(torch::equal(pa[i], pb[i]));
}

TEST_CASE("ground-truth rewards split equally among the living") {
  const auto scn = load_scenario("m3v3");
  data::Trajectory traj;
  traj.rewards = {3.0f, 2.0f};
  traj.done = {{0, 0, 0}, {0, 1, 0}, {1, 1, 0}};
  traj.actions = {{0, 0, 0}, {0, 0, 0}};  // only T matters here

  auto split = reward::split_ground_truth(traj, scn);
  REQUIRE(split.size() == 2);
  CHECK(split[0][0] == doctest::Approx(1.0f));
  CHECK(split[0][1] == doctest::Approx(1.0f));
  CHECK(split[0][2] == doctest::Approx(1.0f));
  CHECK(split[1][0] == doctest::Approx(1.0f));
  CHECK(split[1][1] == 0.0f);
  CHECK(split[1][2] == doctest::Approx(1.0f));
}

TEST_CASE("configuration guards reject bad setups") {
  const auto scn = load_scenario("m3v3");
  ModelLayout L{3, 3};
  auto store = constant_store(scn, 1, 2);
  const auto dir = temp_dir("guards");
  vq::train_tokenizer(store, store, tiny_vq(), 95, dir / "tok.pt");
  auto tok = vq::load_tokenizer(dir / "tok.pt");
  dyn::DynamicsConfig dcfg;
  dcfg.layers = 1;
  dcfg.heads = 2;
  dcfg.embed_dim = 16;
  dcfg.steps = 0;
  dcfg.window = 2;
  dyn::train_dynamics({&store}, {}, tok, dcfg, L, 96, dir / "dyn.pt");
  auto dyn_model = dyn::load_dynamics(dir / "dyn.pt");

  RewardConfig cfg = tiny_config();
  cfg.steps = 1;
  cfg.k = 0;
  CHECK_THROWS_AS(
      reward::train_reward({&store}, {}, dyn_model, tok, cfg, L, 97, dir / "r.pt"),
      ConfigError);
  cfg.k = 5;
  cfg.policy_horizon = 0;
  CHECK_THROWS_AS(
      reward::train_reward({&store}, {}, dyn_model, tok, cfg, L, 97, dir / "r.pt"),
      ConfigError);
  cfg.policy_horizon = 4;
  CHECK_THROWS_AS(reward::train_reward({}, {}, dyn_model, tok, cfg, L, 97, dir / "r.pt"),
                  ConfigError);
}

TEST_SUITE_END();
