#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "lbi/common.hpp"

namespace lbi::env {

enum class Team { kAlly, kEnemy };
enum class UnitType { kMelee = 0, kRanged = 1, kHealer = 2 };
inline constexpr int kNumUnitTypes = 3;
inline constexpr int kNumTerrains = 3;

// Fixed action indices. Attack slots start at kAttackBase; for healers the
// same slots target allies (heal) instead of enemies.
inline constexpr int kActionNoop = 0;
inline constexpr int kActionStop = 1;
inline constexpr int kActionMoveN = 2;
inline constexpr int kActionMoveS = 3;
inline constexpr int kActionMoveE = 4;
inline constexpr int kActionMoveW = 5;
inline constexpr int kAttackBase = 6;
inline constexpr int kFixedActions = 6;

// A unit re-enters cooldown for this many steps after a landed attack/heal.
inline constexpr int kCooldownSteps = 1;

struct UnitSpec {
  Team team = Team::kAlly;
  UnitType unit_type = UnitType::kMelee;
  int max_hp = 10;
  int attack_damage = 3;  // heal amount for healers
  int attack_range = 1;
  int sight_range = 5;
  bool move_allowed = true;
};

struct Scenario {
  std::string name;
  int grid_w = 16;
  int grid_h = 12;
  int terrain_id = 0;
  std::vector<UnitSpec> ally_units;
  std::vector<UnitSpec> enemy_units;
  int max_steps = 40;
  std::vector<std::pair<int, int>> spawn_positions;  // allies then enemies

  int n_allies() const { return static_cast<int>(ally_units.size()); }
  int n_enemies() const { return static_cast<int>(enemy_units.size()); }
  int n_units() const { return n_allies() + n_enemies(); }
  // Attack slots cover enemy targets; healers reuse them for ally targets,
  // so the slot count covers the larger side.
  int action_count() const { return kFixedActions + std::max(n_allies(), n_enemies()); }

  const UnitSpec& unit(int u) const {
    return u < n_allies() ? ally_units[u] : enemy_units[u - n_allies()];
  }

  // Throws ConfigError naming the violated invariant.
  void validate() const;

  // Maximum achievable raw episode reward; the per-step scale is
  // 20 / this value, which makes the best possible return exactly 20.
  double max_raw_reward() const;
  double reward_scale() const { return 20.0 / max_raw_reward(); }

  static Scenario from_json(const json& j);
  json to_json() const;
  static Scenario load(const std::filesystem::path& file);
};

struct EnvState {
  std::vector<std::pair<int, int>> positions;  // allies then enemies
  std::vector<int> hp;
  std::vector<int> cooldowns;
  int step_index = 0;
  int terrain_id = 0;
  std::mt19937_64 rng;  // seedable; the current dynamics never draw from it

  bool alive(int u) const { return hp[u] > 0; }
  bool operator==(const EnvState& other) const = default;
};

struct ActionMask {
  std::vector<uint8_t> mask;
  bool available(int a) const { return mask[a] != 0; }
  int count() const;
};

using Observation = std::vector<float>;

struct ResetResult {
  EnvState state;
  std::vector<Observation> observations;
  std::vector<float> state_vec;
};

struct StepResult {
  EnvState state;
  double global_reward = 0.0;
  bool terminated = false;
  bool won = false;
  std::vector<uint8_t> per_agent_done;
};

// Per-scenario feature sizes: 8 numbers per observed unit, 8 per unit in the
// global state plus a terrain one-hot.
inline constexpr int kObsBlock = 8;
inline constexpr int kStateBlock = 8;
int obs_dim(const Scenario& s);
int state_dim(const Scenario& s);

// Human-readable action name for unit `u`: "no-op", "stop", the four
// directions, "attack e<k>" (or "heal a<k>" for healers) with 1-based targets.
std::string action_label(const Scenario& scn, int u, int action);

// Index of a unit's health / alive entries inside the state vector; the
// dynamics rollout reads these to apply per-agent termination.
inline int state_health_index(int u) { return u * kStateBlock; }
inline int state_alive_index(int u) { return u * kStateBlock + 7; }
inline int state_x_index(int u) { return u * kStateBlock + 1; }
inline int state_y_index(int u) { return u * kStateBlock + 2; }

// Deterministic toy battle: grid movement, ranged/melee attacks with a
// one-step cooldown, scripted enemies. All methods are pure in the state.
class BattleEnv {
 public:
  explicit BattleEnv(Scenario scenario);

  const Scenario& scenario() const { return scn_; }

  ResetResult reset(uint64_t seed) const;
  StepResult step(const EnvState& state, const std::vector<int>& ally_actions) const;
  Observation observe(const EnvState& state, int agent_id) const;
  ActionMask available_actions(const EnvState& state, int unit_id) const;
  std::vector<float> state_vector(const EnvState& state) const;

  bool side_eliminated(const EnvState& state) const;
  bool all_enemies_dead(const EnvState& state) const;
  bool terminal(const EnvState& state) const;

 private:
  int enemy_action(const EnvState& state, int enemy_id) const;
  Scenario scn_;
};

}  // namespace lbi::env
