#pragma once

#include <deque>
#include <filesystem>
#include <random>
#include <vector>

#include <torch/torch.h>

#include "lbi/common.hpp"
#include "lbi/data.hpp"
#include "lbi/dynamics.hpp"
#include "lbi/model_common.hpp"
#include "lbi/reward.hpp"
#include "lbi/vqvae.hpp"

namespace lbi::solver {

struct SolverConfig {
  double alpha = 0.1;    // KL-to-reference temperature
  double gamma = 0.99;
  double lr = 5e-4;
  int episodes = 1500;   // imagined training episodes
  int horizon = 40;
  int batch = 256;
  int updates_per_episode = 4;
  double eps_start = 1.0;
  double eps_end = 0.05;
  double eps_frac = 0.2;  // exploration anneals over this fraction of episodes
  int target_copy = 200;  // hard target-net sync period, in Q updates
  int buffer_capacity = 5000;  // episodes
  int rollout_batch = 8;
  bool behavior_reg = true;  // false -> hard-max backup and greedy-on-Q acting
  bool gt_image = false;     // imagined frames re-tokenized from predicted states

  json to_json() const;
  static SolverConfig from_json(const json& j);
};

// Closed-form optimum of max_pi E_pi[Q] - alpha * KL(pi || q_ref):
// V = alpha * log sum_a q_ref(a) * exp(Q(a)/alpha), computed stably.
double soft_backup(const std::vector<double>& q, const std::vector<double>& q_ref, double alpha);
torch::Tensor soft_backup_batch(const torch::Tensor& q, const torch::Tensor& q_ref,
                                double alpha);  // [B,a] -> [B]

// pi_bar(u) ∝ q_ref(u) * exp(Q(u)/alpha); exact zeros wherever q_ref is zero.
torch::Tensor behavior_policy(const torch::Tensor& q, const torch::Tensor& q_ref, double alpha);

// Per-agent action values over obs rows plus a one-hot agent identity; the
// same trunk serves the behavior-cloning baseline as action logits.
class QNetImpl : public torch::nn::Module {
 public:
  QNetImpl(int obs_dim, int n_max, int a_max);
  torch::Tensor forward(torch::Tensor obs, torch::Tensor agent_onehot);
  int a_max() const { return a_max_; }

 private:
  int a_max_;
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(QNet);

enum class PolicyMode { kSoftQ, kHardQ, kBc };
PolicyMode parse_policy_mode(const std::string& s);
std::string policy_mode_name(PolicyMode m);

struct PolicyHandle {
  QNet q{nullptr};
  model::ModelLayout layout;
  SolverConfig cfg;
  PolicyMode mode = PolicyMode::kSoftQ;
};

void save_policy(const std::filesystem::path& path, PolicyHandle& policy, const json& extra_meta);
PolicyHandle load_policy(const std::filesystem::path& path, json* meta_out = nullptr);

// One agent's transition as stored in replay.
struct Transition {
  std::vector<float> obs, next_obs, next_qref;
  std::vector<uint8_t> next_avail;
  int agent = 0;
  int action = 0;
  float reward = 0.0f;
  bool done = false;
};

struct TransitionBatch {
  torch::Tensor obs, agent, action, reward, next_obs, next_avail, next_qref, done;
};

// Bootstrapped regression target r + gamma * (1 - done) * V(o'), where V is
// the soft backup under behavior regularization and the available-action max
// without it.
torch::Tensor q_target(QNet& target_net, const TransitionBatch& batch, const SolverConfig& cfg);

// FIFO ring over whole episodes; sampling is uniform over transitions and
// with replacement. n_max sizes the one-hot agent column of drawn batches.
class ReplayBuffer {
 public:
  ReplayBuffer(int capacity_episodes, int n_max);

  void push_episode(std::vector<Transition> rows);
  TransitionBatch sample(int batch, std::mt19937_64& rng) const;
  int episodes() const { return static_cast<int>(episodes_.size()); }
  int transitions() const { return transitions_; }

 private:
  int capacity_;
  int n_max_;
  int transitions_ = 0;
  std::deque<std::vector<Transition>> episodes_;
};

struct SolveMetrics {
  double final_loss = 0.0;
  double mean_imagined_return = 0.0;  // over the last rollout batch
  double bc_accuracy = 0.0;           // masked-argmax accuracy (cloning only)
  int episodes = 0;
  int updates = 0;
  json to_json() const;
};

// Behavior-regularized soft Q-learning inside the learned simulator, with
// rewards from the relabeling model.
SolveMetrics train_policy(dyn::DynamicsModel& dynamics, vq::VqVae& tokenizer,
                          reward::RewardModel& reward_model, const env::Scenario& scn,
                          const vision::TaskDescription& task, const SolverConfig& cfg,
                          const model::ModelLayout& layout, uint64_t seed,
                          const std::filesystem::path& out_ckpt);

// Ground-truth-reward arm: offline soft Q-learning on dataset transitions with
// the stored global rewards split among living agents; the reference policy
// still comes from the dynamics model, teacher-forced on the real episodes.
SolveMetrics train_policy_gtr(dyn::DynamicsModel& dynamics, vq::VqVae& tokenizer,
                              const std::vector<const data::EpisodeStore*>& stores,
                              const SolverConfig& cfg, const model::ModelLayout& layout,
                              uint64_t seed, const std::filesystem::path& out_ckpt);

struct BcConfig {
  int steps = 2000;
  int batch = 256;
  double lr = 1e-3;
  json to_json() const;
  static BcConfig from_json(const json& j);
};

// Cross-entropy fit to the datasets' actions (live agents only).
SolveMetrics bc_baseline(const std::vector<const data::EpisodeStore*>& stores, const BcConfig& cfg,
                         const model::ModelLayout& layout, uint64_t seed,
                         const std::filesystem::path& out_ckpt);

struct EvalResult {
  double win_rate = 0.0;
  double mean_return = 0.0;
  double std_return = 0.0;  // population, over episodes
  int episodes = 0;
  json to_json() const;
};

// Greedy execution in the ground-truth environment. Soft-Q policies consult
// the dynamics model (teacher-forced on real frames and states) for the
// reference distribution; hard-Q and BC policies act from their own heads
// alone and may pass null dynamics/tokenizer.
EvalResult evaluate(PolicyHandle& policy, dyn::DynamicsModel* dynamics, vq::VqVae* tokenizer,
                    const env::Scenario& scn, const vision::TaskDescription& task, int episodes,
                    uint64_t seed);

}  // namespace lbi::solver
