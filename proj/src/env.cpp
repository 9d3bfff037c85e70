#include "lbi/env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace lbi::env {

namespace {

UnitType parse_unit_type(const std::string& s) {
  if (s == "melee") return UnitType::kMelee;
  if (s == "ranged") return UnitType::kRanged;
  if (s == "healer") return UnitType::kHealer;
  throw ConfigError("unknown unit type '" + s + "' (expected melee|ranged|healer)");
}

std::string unit_type_name(UnitType t) {
  switch (t) {
    case UnitType::kMelee: return "melee";
    case UnitType::kRanged: return "ranged";
    case UnitType::kHealer: return "healer";
  }
  return "melee";
}

UnitSpec parse_unit(const json& j, Team team) {
  UnitSpec u;
  u.team = team;
  u.unit_type = parse_unit_type(j.at("type").get<std::string>());
  u.max_hp = j.value("hp", 10);
  u.attack_damage = j.value("damage", 3);
  u.attack_range = j.value("attack_range", 1);
  u.sight_range = j.value("sight_range", 5);
  u.move_allowed = j.value("move_allowed", true);
  return u;
}

json unit_to_json(const UnitSpec& u) {
  return json{{"type", unit_type_name(u.unit_type)},
              {"hp", u.max_hp},
              {"damage", u.attack_damage},
              {"attack_range", u.attack_range},
              {"sight_range", u.sight_range},
              {"move_allowed", u.move_allowed}};
}

int sq_dist(std::pair<int, int> a, std::pair<int, int> b) {
  const int dx = a.first - b.first;
  const int dy = a.second - b.second;
  return dx * dx + dy * dy;
}

bool in_range(std::pair<int, int> a, std::pair<int, int> b, int range) {
  return sq_dist(a, b) <= range * range;
}

}  // namespace

void Scenario::validate() const {
  if (name.empty()) throw ConfigError("scenario name is empty");
  if (grid_w < 4 || grid_h < 4 || grid_w > 64 || grid_h > 48)
    throw ConfigError("grid size out of range [4,64]x[4,48] in scenario '" + name + "'");
  if (terrain_id < 0 || terrain_id >= kNumTerrains)
    throw ConfigError("terrain id out of range [0,2] in scenario '" + name + "'");
  if (ally_units.empty() || enemy_units.empty())
    throw ConfigError("scenario '" + name + "' needs at least one unit per side");
  if (n_allies() > 8 || n_enemies() > 8)
    throw ConfigError("scenario '" + name + "' exceeds 8 units per side");
  if (max_steps < 1 || max_steps > 200)
    throw ConfigError("max_steps out of range [1,200] in scenario '" + name + "'");
  for (int u = 0; u < n_units(); ++u) {
    const UnitSpec& spec = unit(u);
    if (spec.max_hp <= 0) throw ConfigError("unit hp must be positive");
    if (spec.attack_damage < 0) throw ConfigError("unit damage must be non-negative");
    if (spec.attack_range < 1) throw ConfigError("unit attack_range must be >= 1");
    if (spec.sight_range < spec.attack_range)
      throw ConfigError("unit sight_range must cover attack_range");
  }
  for (const UnitSpec& e : enemy_units)
    if (e.unit_type == UnitType::kHealer)
      throw ConfigError("enemy healers are unsupported in scenario '" + name + "'");
  if (!spawn_positions.empty()) {
    if (static_cast<int>(spawn_positions.size()) != n_units())
      throw ConfigError("spawn list size mismatch in scenario '" + name + "'");
    for (size_t i = 0; i < spawn_positions.size(); ++i) {
      auto [x, y] = spawn_positions[i];
      if (x < 0 || y < 0 || x >= grid_w || y >= grid_h)
        throw ConfigError("spawn position out of bounds in scenario '" + name + "'");
      for (size_t j = i + 1; j < spawn_positions.size(); ++j)
        if (spawn_positions[j] == spawn_positions[i])
          throw ConfigError("overlapping spawn positions in scenario '" + name + "'");
    }
  }
}

double Scenario::max_raw_reward() const {
  double total = 0.0;
  for (const UnitSpec& e : enemy_units) total += e.max_hp;
  total += 10.0 * n_enemies() + 200.0;
  return total;
}

Scenario Scenario::from_json(const json& j) {
  Scenario s;
  try {
    s.name = j.at("name").get<std::string>();
    s.grid_w = j.at("grid").at("width").get<int>();
    s.grid_h = j.at("grid").at("height").get<int>();
    s.terrain_id = j.value("terrain", 0);
    s.max_steps = j.value("max_steps", 40);
    for (const json& u : j.at("allies")) s.ally_units.push_back(parse_unit(u, Team::kAlly));
    for (const json& u : j.at("enemies")) s.enemy_units.push_back(parse_unit(u, Team::kEnemy));
    if (j.contains("spawns"))
      for (const json& p : j.at("spawns"))
        s.spawn_positions.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad scenario json: ") + e.what());
  }
  s.validate();
  return s;
}

json Scenario::to_json() const {
  json j{{"name", name},
         {"grid", {{"width", grid_w}, {"height", grid_h}}},
         {"terrain", terrain_id},
         {"max_steps", max_steps}};
  j["allies"] = json::array();
  for (const UnitSpec& u : ally_units) j["allies"].push_back(unit_to_json(u));
  j["enemies"] = json::array();
  for (const UnitSpec& u : enemy_units) j["enemies"].push_back(unit_to_json(u));
  if (!spawn_positions.empty()) {
    j["spawns"] = json::array();
    for (auto [x, y] : spawn_positions) j["spawns"].push_back(json::array({x, y}));
  }
  return j;
}

Scenario Scenario::load(const std::filesystem::path& file) {
  return from_json(read_json_file(file));
}

int ActionMask::count() const {
  int c = 0;
  for (uint8_t m : mask) c += m != 0;
  return c;
}

int obs_dim(const Scenario& s) { return kObsBlock * (s.n_units() - 1) + 4; }
int state_dim(const Scenario& s) { return kStateBlock * s.n_units() + kNumTerrains; }

BattleEnv::BattleEnv(Scenario scenario) : scn_(std::move(scenario)) { scn_.validate(); }

ResetResult BattleEnv::reset(uint64_t seed) const {
  EnvState st;
  st.terrain_id = scn_.terrain_id;
  st.step_index = 0;
  st.rng.seed(mix_seed(seed, 0));
  const int n = scn_.n_allies();
  const int m = scn_.n_enemies();
  st.hp.resize(n + m);
  st.cooldowns.assign(n + m, 0);
  for (int u = 0; u < n + m; ++u) st.hp[u] = scn_.unit(u).max_hp;

  if (!scn_.spawn_positions.empty()) {
    st.positions = scn_.spawn_positions;
  } else {
    // Allies spawn in the left band, enemies in the right band; the seed
    // shuffles cell choice within each band so starts vary across episodes.
    st.positions.resize(n + m);
    auto fill_band = [&](int first, int count, int x_lo, int x_hi) {
      std::vector<std::pair<int, int>> cells;
      for (int x = x_lo; x <= x_hi; ++x)
        for (int y = 1; y < scn_.grid_h - 1; ++y) cells.emplace_back(x, y);
      std::shuffle(cells.begin(), cells.end(), st.rng);
      for (int i = 0; i < count; ++i) st.positions[first + i] = cells[i];
    };
    fill_band(0, n, 1, 3);
    fill_band(n, m, scn_.grid_w - 4, scn_.grid_w - 2);
  }

  ResetResult out;
  out.observations.reserve(n);
  for (int i = 0; i < n; ++i) out.observations.push_back(observe(st, i));
  out.state_vec = state_vector(st);
  out.state = std::move(st);
  return out;
}

ActionMask BattleEnv::available_actions(const EnvState& state, int unit_id) const {
  const int n = scn_.n_allies();
  ActionMask out;
  out.mask.assign(scn_.action_count(), 0);
  if (!state.alive(unit_id)) {
    out.mask[kActionNoop] = 1;
    return out;
  }
  out.mask[kActionStop] = 1;
  const UnitSpec& spec = scn_.unit(unit_id);
  if (spec.move_allowed) {
    auto [x, y] = state.positions[unit_id];
    if (y > 0) out.mask[kActionMoveN] = 1;
    if (y < scn_.grid_h - 1) out.mask[kActionMoveS] = 1;
    if (x < scn_.grid_w - 1) out.mask[kActionMoveE] = 1;
    if (x > 0) out.mask[kActionMoveW] = 1;
  }
  const bool heals = spec.unit_type == UnitType::kHealer;
  const int target_base = heals ? 0 : n;
  const int target_count = heals ? n : scn_.n_enemies();
  for (int j = 0; j < target_count && kAttackBase + j < scn_.action_count(); ++j) {
    const int tgt = target_base + j;
    if (heals && tgt == unit_id) continue;
    if (state.alive(tgt) &&
        in_range(state.positions[unit_id], state.positions[tgt], spec.attack_range))
      out.mask[kAttackBase + j] = 1;
  }
  return out;
}

int BattleEnv::enemy_action(const EnvState& state, int enemy_id) const {
  const int n = scn_.n_allies();
  const int uid = n + enemy_id;
  if (!state.alive(uid)) return kActionNoop;
  const UnitSpec& spec = scn_.unit(uid);
  const auto pos = state.positions[uid];

  int nearest = -1;
  int nearest_d2 = std::numeric_limits<int>::max();
  for (int i = 0; i < n; ++i) {
    if (!state.alive(i)) continue;
    const int d2 = sq_dist(pos, state.positions[i]);
    if (d2 <= spec.sight_range * spec.sight_range && d2 < nearest_d2) {
      nearest_d2 = d2;
      nearest = i;
    }
  }
  if (nearest < 0) return kActionStop;
  if (nearest_d2 <= spec.attack_range * spec.attack_range) return kAttackBase + nearest;

  // Close the larger axis gap first; execution resolves blocked moves to stop.
  const int dx = state.positions[nearest].first - pos.first;
  const int dy = state.positions[nearest].second - pos.second;
  if (std::abs(dx) >= std::abs(dy) && dx != 0) return dx > 0 ? kActionMoveE : kActionMoveW;
  if (dy != 0) return dy > 0 ? kActionMoveS : kActionMoveN;
  return kActionStop;
}

StepResult BattleEnv::step(const EnvState& state, const std::vector<int>& ally_actions) const {
  const int n = scn_.n_allies();
  const int m = scn_.n_enemies();
  if (static_cast<int>(ally_actions.size()) != n)
    throw ContractViolation("expected " + std::to_string(n) + " actions, got " +
                            std::to_string(ally_actions.size()));
  if (terminal(state)) throw ContractViolation("step() called on a terminal state");
  for (int i = 0; i < n; ++i) {
    const int a = ally_actions[i];
    if (a < 0 || a >= scn_.action_count())
      throw ContractViolation("action " + std::to_string(a) + " out of range for agent " +
                              std::to_string(i));
    if (!available_actions(state, i).available(a))
      throw ContractViolation("action " + std::to_string(a) + " unavailable for agent " +
                              std::to_string(i));
  }

  StepResult out;
  out.state = state;
  EnvState& st = out.state;

  std::vector<int> actions(n + m);
  for (int i = 0; i < n; ++i) actions[i] = ally_actions[i];
  for (int e = 0; e < m; ++e) actions[n + e] = enemy_action(state, e);

  // Movement resolves in unit order; a blocked or out-of-bounds move is a stop.
  auto occupied = [&](std::pair<int, int> cell, int self) {
    for (int u = 0; u < n + m; ++u)
      if (u != self && st.alive(u) && st.positions[u] == cell) return true;
    return false;
  };
  for (int u = 0; u < n + m; ++u) {
    if (!st.alive(u)) continue;
    const int a = actions[u];
    if (a < kActionMoveN || a > kActionMoveW) continue;
    auto [x, y] = st.positions[u];
    if (a == kActionMoveN) y -= 1;
    if (a == kActionMoveS) y += 1;
    if (a == kActionMoveE) x += 1;
    if (a == kActionMoveW) x -= 1;
    if (x < 0 || y < 0 || x >= scn_.grid_w || y >= scn_.grid_h) continue;
    if (occupied({x, y}, u)) continue;
    st.positions[u] = {x, y};
  }

  // Attacks resolve sequentially; deaths apply immediately, overkill is
  // clipped, and a unit still cooling down whiffs.
  double raw_reward = 0.0;
  for (int u = 0; u < n + m; ++u) {
    const int a = actions[u];
    if (a < kAttackBase || !st.alive(u)) continue;
    const UnitSpec& spec = scn_.unit(u);
    const bool heals = spec.unit_type == UnitType::kHealer;
    const bool targets_allies = heals || spec.team == Team::kEnemy;
    const int j = a - kAttackBase;
    if (j >= (targets_allies ? n : m)) continue;
    const int tgt = (targets_allies ? 0 : n) + j;
    if (!st.alive(tgt)) continue;
    if (!in_range(st.positions[u], st.positions[tgt], spec.attack_range)) continue;
    if (st.cooldowns[u] > 0) continue;
    st.cooldowns[u] = kCooldownSteps + 1;
    if (heals) {
      st.hp[tgt] = std::min(scn_.unit(tgt).max_hp, st.hp[tgt] + spec.attack_damage);
      continue;
    }
    const int dealt = std::min(spec.attack_damage, st.hp[tgt]);
    st.hp[tgt] -= dealt;
    if (spec.team == Team::kAlly) {
      raw_reward += dealt;
      if (st.hp[tgt] == 0) raw_reward += 10.0;
    }
  }
  for (int u = 0; u < n + m; ++u)
    if (st.cooldowns[u] > 0) st.cooldowns[u] -= 1;

  st.step_index += 1;
  out.won = all_enemies_dead(st);
  if (out.won) raw_reward += 200.0;
  out.terminated = out.won || side_eliminated(st) || st.step_index >= scn_.max_steps;
  out.global_reward = raw_reward * scn_.reward_scale();
  out.per_agent_done.resize(n);
  for (int i = 0; i < n; ++i) out.per_agent_done[i] = (!st.alive(i) || out.terminated) ? 1 : 0;
  return out;
}

Observation BattleEnv::observe(const EnvState& state, int agent_id) const {
  const int n = scn_.n_allies();
  const int m = scn_.n_enemies();
  Observation obs(obs_dim(scn_), 0.0f);
  if (agent_id < 0 || agent_id >= n)
    throw ContractViolation("observe: agent id " + std::to_string(agent_id) + " out of range");
  if (!state.alive(agent_id)) return obs;

  const UnitSpec& self = scn_.unit(agent_id);
  const auto pos = state.positions[agent_id];
  const float sight = static_cast<float>(self.sight_range);
  int slot = 0;
  for (int u = 0; u < n + m; ++u) {
    if (u == agent_id) continue;
    float* f = obs.data() + kObsBlock * slot;
    ++slot;
    if (!state.alive(u)) continue;
    const int d2 = sq_dist(pos, state.positions[u]);
    if (d2 > self.sight_range * self.sight_range) continue;
    const UnitSpec& other = scn_.unit(u);
    f[0] = 1.0f;
    f[1] = std::sqrt(static_cast<float>(d2)) / sight;
    f[2] = static_cast<float>(state.positions[u].first - pos.first) / sight;
    f[3] = static_cast<float>(state.positions[u].second - pos.second) / sight;
    f[4] = static_cast<float>(state.hp[u]) / static_cast<float>(other.max_hp);
    f[5 + static_cast<int>(other.unit_type)] = 1.0f;
  }
  float* self_f = obs.data() + kObsBlock * (n + m - 1);
  self_f[0] = static_cast<float>(state.hp[agent_id]) / static_cast<float>(self.max_hp);
  self_f[1] = static_cast<float>(pos.first) / static_cast<float>(scn_.grid_w);
  self_f[2] = static_cast<float>(pos.second) / static_cast<float>(scn_.grid_h);
  self_f[3] = static_cast<float>(state.cooldowns[agent_id]) / static_cast<float>(kCooldownSteps);
  return obs;
}

std::vector<float> BattleEnv::state_vector(const EnvState& state) const {
  const int n = scn_.n_allies();
  const int m = scn_.n_enemies();
  std::vector<float> sv(state_dim(scn_), 0.0f);
  for (int u = 0; u < n + m; ++u) {
    float* f = sv.data() + kStateBlock * u;
    const UnitSpec& spec = scn_.unit(u);
    if (!state.alive(u)) continue;  // dead units stay all-zero
    f[0] = static_cast<float>(state.hp[u]) / static_cast<float>(spec.max_hp);
    f[1] = static_cast<float>(state.positions[u].first) / static_cast<float>(scn_.grid_w);
    f[2] = static_cast<float>(state.positions[u].second) / static_cast<float>(scn_.grid_h);
    f[3] = static_cast<float>(state.cooldowns[u]) / static_cast<float>(kCooldownSteps);
    f[4 + static_cast<int>(spec.unit_type)] = 1.0f;
    f[7] = 1.0f;
  }
  sv[kStateBlock * (n + m) + state.terrain_id] = 1.0f;
  return sv;
}

bool BattleEnv::all_enemies_dead(const EnvState& state) const {
  for (int e = 0; e < scn_.n_enemies(); ++e)
    if (state.alive(scn_.n_allies() + e)) return false;
  return true;
}

bool BattleEnv::side_eliminated(const EnvState& state) const {
  bool ally_alive = false;
  for (int i = 0; i < scn_.n_allies(); ++i) ally_alive = ally_alive || state.alive(i);
  return !ally_alive || all_enemies_dead(state);
}

bool BattleEnv::terminal(const EnvState& state) const {
  return side_eliminated(state) || state.step_index >= scn_.max_steps;
}

std::string action_label(const Scenario& scn, int u, int action) {
  if (action < 0 || action >= scn.action_count()) throw DomainError("action out of range");
  switch (action) {
    case kActionNoop: return "no-op";
    case kActionStop: return "stop";
    case kActionMoveN: return "north";
    case kActionMoveS: return "south";
    case kActionMoveE: return "east";
    case kActionMoveW: return "west";
    default: break;
  }
  const int slot = action - kAttackBase + 1;
  if (scn.unit(u).unit_type == UnitType::kHealer)
    return "heal a" + std::to_string(slot);
  return "attack e" + std::to_string(slot);
}

}  // namespace lbi::env
