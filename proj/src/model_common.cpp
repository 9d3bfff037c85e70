#include "lbi/model_common.hpp"

#include <cstring>
#include <fstream>

namespace lbi::model {

ModelLayout ModelLayout::cover(const std::vector<env::Scenario>& scenarios) {
  if (scenarios.empty()) throw ConfigError("layout cover needs at least one scenario");
  ModelLayout L{0, 0};
  for (const env::Scenario& s : scenarios) {
    L.n_max = std::max(L.n_max, s.n_allies());
    L.m_max = std::max(L.m_max, s.n_enemies());
  }
  return L;
}

void init_torch(uint64_t seed) {
  static bool threads_set = false;
  if (!threads_set) {
    at::set_num_threads(1);
    threads_set = true;
  }
  torch::manual_seed(seed);
}

std::vector<float> pad_state(const env::Scenario& s, const ModelLayout& L,
                             const std::vector<float>& sv) {
  if (!L.fits(s)) throw ContractViolation("scenario '" + s.name + "' exceeds model layout");
  if (static_cast<int>(sv.size()) != env::state_dim(s))
    throw ContractViolation("state vector size mismatch");
  std::vector<float> out(L.state_dim(), 0.0f);
  const int n = s.n_allies();
  const int m = s.n_enemies();
  std::memcpy(out.data(), sv.data(), sizeof(float) * env::kStateBlock * n);
  std::memcpy(out.data() + env::kStateBlock * L.n_max, sv.data() + env::kStateBlock * n,
              sizeof(float) * env::kStateBlock * m);
  std::memcpy(out.data() + env::kStateBlock * L.units(),
              sv.data() + env::kStateBlock * (n + m), sizeof(float) * env::kNumTerrains);
  return out;
}

std::vector<float> unpad_state(const env::Scenario& s, const ModelLayout& L,
                               const std::vector<float>& padded) {
  if (!L.fits(s)) throw ContractViolation("scenario '" + s.name + "' exceeds model layout");
  if (static_cast<int>(padded.size()) != L.state_dim())
    throw ContractViolation("padded state size mismatch");
  std::vector<float> out(env::state_dim(s), 0.0f);
  const int n = s.n_allies();
  const int m = s.n_enemies();
  std::memcpy(out.data(), padded.data(), sizeof(float) * env::kStateBlock * n);
  std::memcpy(out.data() + env::kStateBlock * n, padded.data() + env::kStateBlock * L.n_max,
              sizeof(float) * env::kStateBlock * m);
  std::memcpy(out.data() + env::kStateBlock * (n + m),
              padded.data() + env::kStateBlock * L.units(), sizeof(float) * env::kNumTerrains);
  return out;
}

std::vector<float> pad_obs(const env::Scenario& s, const ModelLayout& L,
                           const std::vector<float>& obs, int agent) {
  if (!L.fits(s)) throw ContractViolation("scenario '" + s.name + "' exceeds model layout");
  if (static_cast<int>(obs.size()) != env::obs_dim(s))
    throw ContractViolation("observation size mismatch");
  std::vector<float> out(L.obs_dim(), 0.0f);
  const int n = s.n_allies();
  const int m = s.n_enemies();
  const int block = env::kObsBlock;
  // Other-ally blocks keep their relative order because agent slots coincide
  // between the scenario and the layout.
  for (int j = 0; j < n - 1; ++j)
    std::memcpy(out.data() + block * j, obs.data() + block * j, sizeof(float) * block);
  for (int e = 0; e < m; ++e)
    std::memcpy(out.data() + block * (L.n_max - 1 + e), obs.data() + block * (n - 1 + e),
                sizeof(float) * block);
  std::memcpy(out.data() + block * (L.units() - 1), obs.data() + block * (n - 1 + m),
              sizeof(float) * 4);
  (void)agent;
  return out;
}

std::vector<uint8_t> pad_mask(const env::Scenario& s, const ModelLayout& L,
                              const std::vector<uint8_t>& mask) {
  if (static_cast<int>(mask.size()) != s.action_count())
    throw ContractViolation("action mask size mismatch");
  std::vector<uint8_t> out(L.a_max(), 0);
  std::memcpy(out.data(), mask.data(), mask.size());
  return out;
}

std::vector<uint8_t> rollout_mask(const ModelLayout& L, const std::vector<uint8_t>& unit_alive,
                                  int agent, bool agent_is_healer) {
  std::vector<uint8_t> mask(L.a_max(), 0);
  if (!unit_alive[agent]) {
    mask[env::kActionNoop] = 1;
    return mask;
  }
  mask[env::kActionStop] = 1;
  for (int a = env::kActionMoveN; a <= env::kActionMoveW; ++a) mask[a] = 1;
  const int target_base = agent_is_healer ? 0 : L.n_max;
  const int target_count = agent_is_healer ? L.n_max : L.m_max;
  for (int j = 0; j < target_count && env::kAttackBase + j < L.a_max(); ++j) {
    const int unit = target_base + j;
    if (agent_is_healer && unit == agent) continue;
    if (unit_alive[unit]) mask[env::kAttackBase + j] = 1;
  }
  return mask;
}

void save_checkpoint(const std::filesystem::path& path, const torch::nn::Module& module,
                     const json& meta) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  torch::serialize::OutputArchive archive;
  module.save(archive);
  archive.save_to(path.string());
  write_json_file(path.string() + ".json", meta);
}

json load_checkpoint_meta(const std::filesystem::path& path) {
  return read_json_file(path.string() + ".json");
}

void load_checkpoint_into(const std::filesystem::path& path, torch::nn::Module& module) {
  if (!std::filesystem::exists(path))
    throw ConfigError("checkpoint '" + path.string() + "' not found");
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  module.load(archive);
}

std::string config_hash(const json& config) {
  return hex64(fnv1a64(config.dump()));
}

}  // namespace lbi::model
