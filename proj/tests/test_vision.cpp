#include <doctest.h>

#include <set>

#include "lbi/vision.hpp"

using namespace lbi;
using env::BattleEnv;
using env::EnvState;
using env::Scenario;
using vision::Frame;

namespace {

Scenario load_scenario(const std::string& name) {
  return Scenario::load(std::string(LBI_SCENARIO_DIR) + "/" + name + ".json");
}

int pure_green_pixels(const Frame& f) {
  int count = 0;
  for (int y = 0; y < vision::kFrameH; ++y)
    for (int x = 0; x < vision::kFrameW; ++x)
      if (f.at(y, x, 0) == 0.0f && f.at(y, x, 1) == 1.0f && f.at(y, x, 2) == 0.0f) ++count;
  return count;
}

}  // namespace

TEST_SUITE_BEGIN("vision");

TEST_CASE("render is deterministic") {
  const Scenario s = load_scenario("m3v3");
  const BattleEnv e(s);
  const EnvState st = e.reset(5).state;
  CHECK(vision::render(s, st).pixels == vision::render(s, st).pixels);
}

TEST_CASE("all units dead renders pure terrain") {
  const Scenario s = load_scenario("m3v3");
  const BattleEnv e(s);
  EnvState st = e.reset(0).state;
  for (int& hp : st.hp) hp = 0;
  const Frame f = vision::render(s, st);
  std::set<std::tuple<float, float, float>> colors;
  for (int y = 0; y < vision::kFrameH; ++y)
    for (int x = 0; x < vision::kFrameW; ++x)
      colors.insert({f.at(y, x, 0), f.at(y, x, 1), f.at(y, x, 2)});
  CHECK(colors.size() == 1);
}

TEST_CASE("half hp bar holds half the full-fill pixels") {
  const Scenario s = load_scenario("m3v3");
  const BattleEnv e(s);
  EnvState st = e.reset(0).state;
  for (int u = 1; u < s.n_units(); ++u) st.hp[u] = 0;  // isolate unit 0
  const int full = pure_green_pixels(vision::render(s, st));
  st.hp[0] = s.unit(0).max_hp / 2;
  const int half = pure_green_pixels(vision::render(s, st));
  CHECK(full == 4);
  CHECK(std::abs(half * 2 - full) <= 1);
}

TEST_CASE("every hp level renders a distinct bar") {
  const Scenario s = load_scenario("m3v3");
  const BattleEnv e(s);
  EnvState st = e.reset(0).state;
  for (int u = 1; u < s.n_units(); ++u) st.hp[u] = 0;
  std::set<std::vector<float>> bars;
  for (int hp = 1; hp <= s.unit(0).max_hp; ++hp) {
    st.hp[0] = hp;
    bars.insert(vision::render(s, st).pixels);
  }
  CHECK(bars.size() == static_cast<size_t>(s.unit(0).max_hp));
}

TEST_CASE("augment changes background only") {
  const Scenario s = load_scenario("m3v3");
  REQUIRE(s.terrain_id == 0);
  const BattleEnv e(s);
  const EnvState st = e.reset(2).state;
  const Frame base = vision::render(s, st);
  CHECK(vision::augment(s, st, 0).pixels == base.pixels);
  const Frame other = vision::augment(s, st, 2);
  CHECK(other.pixels != base.pixels);
  // Sprite and bar pixels (those differing from the empty-field render)
  // must match between the two terrains.
  const Frame empty0 = [&] {
    EnvState dead = st;
    for (int& hp : dead.hp) hp = 0;
    return vision::render(s, dead);
  }();
  int sprite_pixels = 0;
  for (size_t i = 0; i < base.pixels.size(); i += 3) {
    const bool on_sprite = base.pixels[i] != empty0.pixels[i] ||
                           base.pixels[i + 1] != empty0.pixels[i + 1] ||
                           base.pixels[i + 2] != empty0.pixels[i + 2];
    if (!on_sprite) continue;
    ++sprite_pixels;
    CHECK(other.pixels[i] == base.pixels[i]);
    CHECK(other.pixels[i + 1] == base.pixels[i + 1]);
    CHECK(other.pixels[i + 2] == base.pixels[i + 2]);
  }
  CHECK(sprite_pixels > 0);
  CHECK_THROWS_AS(vision::augment(s, st, 3), ConfigError);
}

TEST_CASE("rendering distinguishes 100 random states") {
  const Scenario s = load_scenario("m3v3");
  const BattleEnv e(s);
  std::vector<std::vector<float>> frames;
  std::set<std::vector<float>> states;
  std::mt19937_64 rng(3);
  int seed = 0;
  while (static_cast<int>(frames.size()) < 100) {
    auto st = e.reset(seed++).state;
    for (int hops = rng() % 4; hops > 0 && !e.terminal(st); --hops) {
      std::vector<int> acts(s.n_allies());
      for (int i = 0; i < s.n_allies(); ++i) {
        const auto mask = e.available_actions(st, i).mask;
        std::vector<int> opts;
        for (size_t a = 0; a < mask.size(); ++a)
          if (mask[a]) opts.push_back(static_cast<int>(a));
        acts[i] = opts[rng() % opts.size()];
      }
      st = e.step(st, acts).state;
    }
    if (!states.insert(e.state_vector(st)).second) continue;
    frames.push_back(vision::render(s, st).pixels);
  }
  for (size_t i = 0; i < frames.size(); ++i)
    for (size_t j = i + 1; j < frames.size(); ++j) CHECK(frames[i] != frames[j]);
}

TEST_CASE("descriptions read the terminal state") {
  const Scenario s = load_scenario("m3v3");
  const BattleEnv e(s);
  EnvState st = e.reset(0).state;
  vision::TaskDescription untouched = vision::describe_terminal(s, st);
  CHECK(untouched.terminal_enemy_hp_sum == 30);
  CHECK(untouched.enemy_max_hp_sum == 30);
  for (int u = s.n_allies(); u < s.n_units(); ++u) st.hp[u] = 0;
  vision::TaskDescription win = vision::describe_terminal(s, st);
  CHECK(win.terminal_enemy_hp_sum == 0);
  CHECK(win.text().find("remaining health totals 0") != std::string::npos);
  CHECK(win.text() == vision::describe_terminal(s, st).text());
  CHECK(win.n_allies == 3);
  CHECK(win.ally_type_counts[0] == 3);
}

TEST_CASE("descriptor encoding layout") {
  const Scenario s = load_scenario("m3v3");
  const BattleEnv e(s);
  EnvState st = e.reset(0).state;
  vision::TaskDescription a = vision::describe_terminal(s, st);
  vision::TaskDescription b = a;
  b.terminal_enemy_hp_sum = 0;
  const auto va = vision::encode_description(a);
  const auto vb = vision::encode_description(b);
  for (int k = 0; k < vision::kDescriptorDim - 1; ++k) CHECK(va[k] == vb[k]);
  CHECK(vb[vision::kDescriptorHpIndex] == 0.0f);
  CHECK(va[vision::kDescriptorHpIndex] == 1.0f);
  for (int k = 0; k < 3; ++k) CHECK(va[3 + k] == va[6 + k]);  // 3 melee each side
  for (float v : va) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("hindsight description survives the state-vector round trip") {
  const Scenario s = load_scenario("m5v6");
  const BattleEnv e(s);
  EnvState st = e.reset(1).state;
  st.hp[5] = 4;
  st.hp[6] = 0;
  const auto direct = vision::describe_terminal(s, st);
  const auto via_vec = vision::describe_from_vec(s, e.state_vector(st));
  CHECK(direct.terminal_enemy_hp_sum == via_vec.terminal_enemy_hp_sum);
  CHECK(direct.text() == via_vec.text());
}

TEST_CASE("state_from_vector inverts state_vector") {
  const Scenario s = load_scenario("m3v3");
  const BattleEnv e(s);
  EnvState st = e.reset(9).state;
  st.hp[1] = 4;
  st.hp[3] = 0;
  st.cooldowns[0] = 1;
  const EnvState back = vision::state_from_vector(s, e.state_vector(st));
  CHECK(back.hp == st.hp);
  CHECK(back.cooldowns == st.cooldowns);
  CHECK(back.terrain_id == st.terrain_id);
  for (int u = 0; u < s.n_units(); ++u)
    if (st.alive(u)) CHECK(back.positions[u] == st.positions[u]);
}

TEST_CASE("png io round trips within quantization") {
  const Scenario s = load_scenario("m3v3");
  const BattleEnv e(s);
  const Frame f = vision::render(s, e.reset(4).state);
  const auto path = std::filesystem::temp_directory_path() / "lbi_vision_test.png";
  vision::write_png(path, f);
  const Frame g = vision::read_png(path);
  for (size_t i = 0; i < f.pixels.size(); ++i)
    CHECK(std::abs(f.pixels[i] - g.pixels[i]) <= 0.5f / 255.0f + 1e-6f);
  std::filesystem::remove(path);
}

TEST_SUITE_END();
