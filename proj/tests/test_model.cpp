#include <filesystem>

#include "lbi/model_common.hpp"
#include "torch_doctest.hpp"

using namespace lbi;
using model::ModelLayout;

namespace {

env::Scenario load_scenario(const std::string& name) {
  return env::Scenario::load(std::string(LBI_SCENARIO_DIR) + "/" + name + ".json");
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("layout covers scenarios and derives dims") {
  const auto m3 = load_scenario("m3v3");
  const auto m5 = load_scenario("m5v6");
  ModelLayout L = ModelLayout::cover({m3, m5});
  CHECK(L.n_max == 5);
  CHECK(L.m_max == 6);
  CHECK(L.units() == 11);
  CHECK(L.state_dim() == 8 * 11 + 3);
  CHECK(L.obs_dim() == 8 * 10 + 4);
  CHECK(L.a_max() == 6 + 6);
  CHECK(L.fits(m3));
  CHECK(L.fits(m5));
  CHECK(!ModelLayout{3, 3}.fits(m5));
}

TEST_CASE("state padding keeps units in place and round-trips") {
  const auto m3 = load_scenario("m3v3");
  ModelLayout L{5, 6};
  env::BattleEnv env(m3);
  auto sv = env.state_vector(env.reset(11).state);
  auto padded = model::pad_state(m3, L, sv);
  REQUIRE(static_cast<int>(padded.size()) == L.state_dim());
  // Ally block 0 is shared; enemy 0 moves from slot n to slot n_max.
  for (int k = 0; k < env::kStateBlock; ++k) {
    CHECK(padded[k] == sv[k]);
    CHECK(padded[env::kStateBlock * L.n_max + k] == sv[env::kStateBlock * 3 + k]);
  }
  // Absent slots stay zero.
  for (int u = 3; u < 5; ++u)
    for (int k = 0; k < env::kStateBlock; ++k) CHECK(padded[env::kStateBlock * u + k] == 0.0f);
  CHECK(model::unpad_state(m3, L, padded) == sv);
}

TEST_CASE("obs padding keeps the self block at the tail") {
  const auto m3 = load_scenario("m3v3");
  ModelLayout L{5, 6};
  env::BattleEnv env(m3);
  auto st = env.reset(11).state;
  auto obs = env.observe(st, 1);
  auto padded = model::pad_obs(m3, L, obs, 1);
  REQUIRE(static_cast<int>(padded.size()) == L.obs_dim());
  const int self = env::kObsBlock * (L.units() - 1);
  const int self_src = env::kObsBlock * (m3.n_units() - 1);
  for (int k = 0; k < 4; ++k) CHECK(padded[self + k] == obs[self_src + k]);
  // First other-ally block is shared; first enemy block lands at n_max-1.
  for (int k = 0; k < env::kObsBlock; ++k) {
    CHECK(padded[k] == obs[k]);
    CHECK(padded[env::kObsBlock * (L.n_max - 1) + k] == obs[env::kObsBlock * 2 + k]);
  }
}

TEST_CASE("rollout mask follows predicted aliveness") {
  ModelLayout L{3, 3};
  std::vector<uint8_t> alive = {1, 0, 1, 1, 0, 1};  // allies 0,2; enemies 0,2

  auto mask = model::rollout_mask(L, alive, 0, false);
  REQUIRE(static_cast<int>(mask.size()) == L.a_max());
  CHECK(mask[env::kActionNoop] == 0);
  CHECK(mask[env::kActionStop] == 1);
  for (int mv = env::kActionMoveN; mv <= env::kActionMoveW; ++mv) CHECK(mask[mv] == 1);
  CHECK(mask[env::kAttackBase + 0] == 1);  // enemy 0 alive
  CHECK(mask[env::kAttackBase + 1] == 0);  // enemy 1 dead
  CHECK(mask[env::kAttackBase + 2] == 1);

  // Dead agent: no-op only.
  auto dead = model::rollout_mask(L, alive, 1, false);
  CHECK(dead[env::kActionNoop] == 1);
  for (int a = 1; a < L.a_max(); ++a) CHECK(dead[a] == 0);

  // Healer targets allies, never itself.
  auto healer = model::rollout_mask(L, alive, 0, true);
  CHECK(healer[env::kAttackBase + 0] == 0);  // self
  CHECK(healer[env::kAttackBase + 1] == 0);  // dead ally
  CHECK(healer[env::kAttackBase + 2] == 1);
}

TEST_CASE("checkpoints round-trip parameters and metadata") {
  model::init_torch(5);
  torch::nn::Linear net(4, 3);
  const auto dir = std::filesystem::temp_directory_path() / "lbi_model_ckpt";
  std::filesystem::create_directories(dir);
  model::save_checkpoint(dir / "net.pt", *net, json{{"kind", "probe"}, {"n", 7}});

  const json meta = model::load_checkpoint_meta(dir / "net.pt");
  CHECK(meta.at("kind") == "probe");
  CHECK(meta.at("n") == 7);

  model::init_torch(6);
  torch::nn::Linear other(4, 3);
  CHECK(!torch::equal(net->weight, other->weight));
  model::load_checkpoint_into(dir / "net.pt", *other);
  CHECK(torch::equal(net->weight, other->weight));
  CHECK(torch::equal(net->bias, other->bias));

  CHECK_THROWS_AS(model::load_checkpoint_meta(dir / "missing.pt"), ConfigError);
}

TEST_CASE("config hash is stable and key-order independent") {
  const auto a = model::config_hash(json{{"x", 1}, {"y", 2}});
  const auto b = model::config_hash(json{{"y", 2}, {"x", 1}});
  const auto c = model::config_hash(json{{"x", 1}, {"y", 3}});
  CHECK(a == b);
  CHECK(a != c);
  CHECK(a.size() == 16);
}

TEST_SUITE_END();
