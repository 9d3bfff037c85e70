#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <vector>

#include "lbi/data.hpp"
#include "lbi/env.hpp"
#include "lbi/vision.hpp"

namespace lbi::model {

// Cross-scenario tensor layout. Scenarios with fewer units map into the
// leading slots; absent units stay all-zero, which matches the dead-unit
// encoding, so one checkpoint serves every scenario that fits.
struct ModelLayout {
  int n_max = 1;
  int m_max = 1;

  int units() const { return n_max + m_max; }
  int state_dim() const { return env::kStateBlock * units() + env::kNumTerrains; }
  int obs_dim() const { return env::kObsBlock * (units() - 1) + 4; }
  int a_max() const { return env::kFixedActions + std::max(n_max, m_max); }

  bool fits(const env::Scenario& s) const {
    return s.n_allies() <= n_max && s.n_enemies() <= m_max;
  }

  json to_json() const { return json{{"n_max", n_max}, {"m_max", m_max}}; }
  static ModelLayout from_json(const json& j) {
    return ModelLayout{j.at("n_max").get<int>(), j.at("m_max").get<int>()};
  }
  static ModelLayout cover(const std::vector<env::Scenario>& scenarios);
  bool operator==(const ModelLayout&) const = default;
};

// Single-threaded deterministic torch setup.
void init_torch(uint64_t seed);

std::vector<float> pad_state(const env::Scenario& s, const ModelLayout& L,
                             const std::vector<float>& sv);
std::vector<float> unpad_state(const env::Scenario& s, const ModelLayout& L,
                               const std::vector<float>& padded);
std::vector<float> pad_obs(const env::Scenario& s, const ModelLayout& L,
                           const std::vector<float>& obs, int agent);
std::vector<uint8_t> pad_mask(const env::Scenario& s, const ModelLayout& L,
                              const std::vector<uint8_t>& mask);

// Health / alive coordinates inside a layout state vector, for the rollout
// termination rule.
inline int layout_health_index(int unit) { return unit * env::kStateBlock; }
inline int layout_alive_index(int unit) { return unit * env::kStateBlock + 7; }

// Availability during model rollouts, derived from predicted health only:
// a dead agent exposes no-op; a live one may stop, move, or target any
// predicted-living unit on the proper side.
std::vector<uint8_t> rollout_mask(const ModelLayout& L, const std::vector<uint8_t>& unit_alive,
                                  int agent, bool agent_is_healer);

// Checkpoint = parameter archive + sidecar json with config and hashes.
void save_checkpoint(const std::filesystem::path& path, const torch::nn::Module& module,
                     const json& meta);
json load_checkpoint_meta(const std::filesystem::path& path);
void load_checkpoint_into(const std::filesystem::path& path, torch::nn::Module& module);

std::string config_hash(const json& config);

}  // namespace lbi::model
