#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lbi/env.hpp"
#include "lbi/vision.hpp"

namespace lbi::data {

struct Trajectory {
  std::vector<std::vector<float>> states;                // [T+1][state_dim]
  std::vector<std::vector<std::vector<float>>> obs;      // [T+1][n][obs_dim]
  std::vector<std::vector<int32_t>> actions;             // [T][n]
  std::vector<std::vector<std::vector<uint8_t>>> avail;  // [T+1][n][A]
  std::vector<std::vector<uint8_t>> done;                // [T+1][n]
  std::vector<float> rewards;                            // [T]
  bool won = false;

  int T() const { return static_cast<int>(actions.size()); }
  double episode_return() const;
};

struct Stats {
  double mean_return = 0.0;
  double std_return = 0.0;  // population
  double win_rate = 0.0;
  std::map<int, int> length_histogram;
  json to_json() const;
};

// In-memory episode collection persisted as manifest.json + payload.bin.
class EpisodeStore {
 public:
  EpisodeStore() = default;
  explicit EpisodeStore(env::Scenario scenario) : scenario_(std::move(scenario)) {}

  const env::Scenario& scenario() const { return scenario_; }
  int size() const { return static_cast<int>(episodes_.size()); }
  const Trajectory& episode(int i) const { return episodes_.at(i); }
  const vision::TaskDescription& description(int i) const { return descriptions_.at(i); }

  void append(Trajectory traj);
  Stats stats() const;
  std::pair<EpisodeStore, EpisodeStore> split(double train_frac, double val_frac,
                                              uint64_t seed) const;

  void save(const std::filesystem::path& dir) const;
  static EpisodeStore load(const std::filesystem::path& dir);

 private:
  env::Scenario scenario_;
  std::vector<Trajectory> episodes_;
  std::vector<vision::TaskDescription> descriptions_;
};

enum class PolicyKind { kRandom, kScripted, kQLearn, kMixed };
PolicyKind parse_policy_kind(const std::string& s);

// Per-agent tabular Q-learner over a discretized observation key and four
// abstract actions; collection episodes double as its training stream.
class TabularQ {
 public:
  TabularQ(double lr, double gamma) : lr_(lr), gamma_(gamma) {}

  int abstract_action_count() const { return 4; }
  int64_t key(const env::BattleEnv& env, const env::EnvState& st, int agent) const;
  int concrete_action(const env::BattleEnv& env, const env::EnvState& st, int agent,
                      int abstract) const;
  int select(const env::BattleEnv& env, const env::EnvState& st, int agent, double eps,
             std::mt19937_64& rng);
  void update(int64_t key, int abstract, double reward, std::optional<int64_t> next_key);

 private:
  double lr_;
  double gamma_;
  std::map<std::pair<int64_t, int>, double> q_;
};

std::vector<int> random_actions(const env::BattleEnv& env, const env::EnvState& st,
                                std::mt19937_64& rng);
std::vector<int> scripted_actions(const env::BattleEnv& env, const env::EnvState& st);

EpisodeStore collect(const env::Scenario& scenario, PolicyKind kind, int episodes,
                     uint64_t seed);

void materialize_frames(const EpisodeStore& store, const std::filesystem::path& dir);

}  // namespace lbi::data
