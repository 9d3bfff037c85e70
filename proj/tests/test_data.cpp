#include <doctest.h>

#include <fstream>
#include <set>

#include "lbi/data.hpp"

using namespace lbi;
using data::EpisodeStore;
using data::Trajectory;
using env::Scenario;

namespace {

Scenario load_scenario(const std::string& name) {
  return Scenario::load(std::string(LBI_SCENARIO_DIR) + "/" + name + ".json");
}

// A minimal synthetic trajectory with fabricated rewards for stats tests.
Trajectory synthetic(const Scenario& s, float reward, bool won) {
  Trajectory t;
  const int n = s.n_allies();
  const std::vector<float> state(env::state_dim(s), 0.0f);
  t.states = {state, state};
  t.obs.assign(2, std::vector<std::vector<float>>(n, std::vector<float>(env::obs_dim(s), 0.0f)));
  std::vector<uint8_t> mask(s.action_count(), 0);
  mask[env::kActionNoop] = 1;
  t.avail.assign(2, std::vector<std::vector<uint8_t>>(n, mask));
  t.done = {std::vector<uint8_t>(n, 0), std::vector<uint8_t>(n, 1)};
  t.actions = {std::vector<int32_t>(n, env::kActionNoop)};
  t.rewards = {reward};
  t.won = won;
  return t;
}

std::string store_checksum(const EpisodeStore& store, const std::filesystem::path& dir) {
  store.save(dir);
  return read_json_file(dir / "manifest.json").at("checksum_crc32").get<std::string>();
}

}  // namespace

TEST_SUITE_BEGIN("data");

TEST_CASE("stats closed forms") {
  const Scenario s = load_scenario("m3v3");
  EpisodeStore one(s);
  one.append(synthetic(s, 5.0f, true));
  auto st = one.stats();
  CHECK(st.mean_return == doctest::Approx(5.0));
  CHECK(st.std_return == doctest::Approx(0.0));
  CHECK(st.win_rate == doctest::Approx(1.0));

  EpisodeStore two(s);
  two.append(synthetic(s, 0.0f, false));
  two.append(synthetic(s, 20.0f, true));
  st = two.stats();
  CHECK(st.mean_return == doctest::Approx(10.0));
  CHECK(st.std_return == doctest::Approx(10.0));
  CHECK(st.win_rate == doctest::Approx(0.5));
  CHECK(st.length_histogram.at(1) == 2);

  EpisodeStore empty(s);
  CHECK_THROWS_AS(empty.stats(), DomainError);
}

TEST_CASE("split is disjoint, covering, and deterministic") {
  const Scenario s = load_scenario("m3v3");
  EpisodeStore store(s);
  for (int i = 0; i < 10; ++i) store.append(synthetic(s, static_cast<float>(i), false));
  auto [train, val] = store.split(0.8, 0.2, 1);
  CHECK(train.size() == 8);
  CHECK(val.size() == 2);
  std::multiset<float> seen;
  for (int i = 0; i < train.size(); ++i)
    seen.insert(train.episode(i).rewards[0]);
  for (int i = 0; i < val.size(); ++i)
    seen.insert(val.episode(i).rewards[0]);
  CHECK(seen.size() == 10);
  CHECK(*seen.begin() == 0.0f);
  CHECK(*seen.rbegin() == 9.0f);

  auto [train2, val2] = store.split(0.8, 0.2, 1);
  for (int i = 0; i < train.size(); ++i)
    CHECK(train.episode(i).rewards[0] == train2.episode(i).rewards[0]);

  CHECK_THROWS_AS(store.split(0.5, 0.6, 1), ConfigError);
}

TEST_CASE("collect is deterministic per seed") {
  const Scenario s = load_scenario("m3v3");
  const auto dir = std::filesystem::temp_directory_path() / "lbi_store_a";
  const auto dir2 = std::filesystem::temp_directory_path() / "lbi_store_b";
  const auto a = data::collect(s, data::PolicyKind::kScripted, 1, 7);
  const auto b = data::collect(s, data::PolicyKind::kScripted, 1, 7);
  CHECK(store_checksum(a, dir) == store_checksum(b, dir2));
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST_CASE("mixed collection spreads returns and random loses to scripted") {
  const Scenario s = load_scenario("m3v3");
  const auto mixed = data::collect(s, data::PolicyKind::kMixed, 50, 0);
  std::set<float> returns;
  for (int i = 0; i < mixed.size(); ++i)
    returns.insert(static_cast<float>(mixed.episode(i).episode_return()));
  CHECK(returns.size() >= 3);

  const auto random = data::collect(s, data::PolicyKind::kRandom, 100, 0);
  const auto scripted = data::collect(s, data::PolicyKind::kScripted, 100, 0);
  CHECK(random.stats().win_rate < scripted.stats().win_rate);
}

TEST_CASE("save and load round trip bit-exactly") {
  const Scenario s = load_scenario("m3v3");
  const auto store = data::collect(s, data::PolicyKind::kMixed, 12, 3);
  const auto dir = std::filesystem::temp_directory_path() / "lbi_store_rt";
  store.save(dir);
  const auto loaded = EpisodeStore::load(dir);
  REQUIRE(loaded.size() == store.size());
  for (int i = 0; i < store.size(); ++i) {
    const Trajectory& a = store.episode(i);
    const Trajectory& b = loaded.episode(i);
    CHECK(a.states == b.states);
    CHECK(a.obs == b.obs);
    CHECK(a.actions == b.actions);
    CHECK(a.avail == b.avail);
    CHECK(a.done == b.done);
    CHECK(a.rewards == b.rewards);
    CHECK(a.won == b.won);
    CHECK(store.description(i).text() == loaded.description(i).text());
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("stored actions respect stored masks and descriptions are hindsight-consistent") {
  const Scenario s = load_scenario("m3v3");
  const auto store = data::collect(s, data::PolicyKind::kMixed, 25, 5);
  for (int i = 0; i < store.size(); ++i) {
    const Trajectory& t = store.episode(i);
    for (int step = 0; step < t.T(); ++step)
      for (int agent = 0; agent < s.n_allies(); ++agent)
        CHECK(t.avail[step][agent][t.actions[step][agent]] == 1);
    for (int step = 0; step + 1 <= t.T(); ++step)
      for (int agent = 0; agent < s.n_allies(); ++agent)
        if (t.done[step][agent]) CHECK(t.done[step + 1][agent]);
    const auto recomputed = vision::describe_from_vec(s, t.states.back());
    CHECK(recomputed.text() == store.description(i).text());
  }
}

TEST_CASE("corrupted payload is rejected") {
  const Scenario s = load_scenario("m3v3");
  const auto store = data::collect(s, data::PolicyKind::kScripted, 2, 9);
  const auto dir = std::filesystem::temp_directory_path() / "lbi_store_corrupt";
  store.save(dir);
  {
    std::fstream f(dir / "payload.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(17);
    char byte;
    f.seekg(17);
    f.get(byte);
    byte = static_cast<char>(byte ^ 0x5A);
    f.seekp(17);
    f.put(byte);
  }
  CHECK_THROWS_AS(EpisodeStore::load(dir), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST_SUITE_END();
