#pragma once

#include <filesystem>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "lbi/common.hpp"
#include "lbi/data.hpp"
#include "lbi/dynamics.hpp"
#include "lbi/model_common.hpp"
#include "lbi/vqvae.hpp"

namespace lbi::reward {

struct RewardConfig {
  int layers = 6;
  int heads = 8;
  int embed_dim = 64;
  double grad_clip = 1.0;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double lr = 3e-4;
  int steps = 400;         // reward-model updates (outer loop)
  int batch = 8;           // expert/policy trajectory pairs per update
  double gamma = 0.99;
  double beta_margin = 2.0;
  double lambda_rc = 0.1;
  bool reward_constraint = true;  // disables the availability L2 term when false
  int k = 5;               // inner-policy updates per reward update
  int policy_horizon = 16; // imagined rollout length for policy batches
  int masac_batch = 256;
  double alpha_sac = 0.05;
  double sac_lr = 5e-4;
  int target_copy = 200;   // hard target-critic sync period, in critic updates

  json to_json() const;
  static RewardConfig from_json(const json& j);
};

// One side of the IRL objective: per-action model outputs plus the data needed
// to weight and mask them. `weight` carries gamma^t * alive * valid so masked
// entries contribute exactly zero gradient.
struct IrlBatch {
  torch::Tensor out;      // [B,T,n,a_max] tanh-squashed rewards
  torch::Tensor actions;  // [B,T,n] long
  torch::Tensor avail;    // [B,T,n,a_max] float
  torch::Tensor weight;   // [B,T,n] float
};

struct IrlParts {
  torch::Tensor total;
  torch::Tensor expert_term;
  torch::Tensor policy_term;
  torch::Tensor rc_term;
  torch::Tensor unavail_term;
};

// margin_actions [B,T,n]: comparison actions sampled from the inner policy at
// the expert states; expert entries whose reward exceeds the comparison's by
// more than beta_margin stop contributing gradient.
IrlParts irl_loss(const IrlBatch& expert, const IrlBatch& policy,
                  const torch::Tensor& margin_actions, const RewardConfig& cfg);

// Bidirectional transformer over [s_t, L, u^1..u^n, rhat_t] groups plus the
// terminal state; every rhat read-out sees the whole trajectory.
class RewardModelImpl : public torch::nn::Module {
 public:
  RewardModelImpl(RewardConfig cfg, model::ModelLayout layout);

  // state [B,Tm+1,S], actions [B,Tm,n] long, desc [B,10], lengths [B] long.
  // Returns per-action rewards [B,Tm,n,a_max]; entries past an episode's
  // length are garbage and must be masked by the caller.
  torch::Tensor forward(torch::Tensor state, torch::Tensor actions, torch::Tensor desc,
                        torch::Tensor lengths);

  const RewardConfig& config() const { return cfg_; }
  const model::ModelLayout& layout() const { return layout_; }

 private:
  RewardConfig cfg_;
  model::ModelLayout layout_;
  torch::nn::Linear s_in_{nullptr}, desc_in_{nullptr};
  torch::nn::Embedding u_in_{nullptr}, type_embed_{nullptr}, agent_embed_{nullptr},
      time_embed_{nullptr};
  torch::Tensor rhat_token_;
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::LayerNorm final_ln_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(RewardModel);

// A reward-model input: padded states plus actions/availability/liveness.
struct RewardTraj {
  torch::Tensor state;    // [T+1,S]
  torch::Tensor actions;  // [T,n] long
  torch::Tensor avail;    // [T,n,a_max] float
  torch::Tensor alive;    // [T,n] float, liveness at the step's start
  torch::Tensor desc;     // [10]
};

RewardTraj traj_from_tensors(const dyn::EpisodeTensors& ep, const model::ModelLayout& layout);
RewardTraj traj_from_sim(const dyn::SimEpisode& sim, const torch::Tensor& desc);

// Batched per-action outputs for a set of trajectories (padded to max T).
// Also returns the stacked actions/avail/alive/valid tensors used to build
// IrlBatch weights or to gather taken-action rewards.
struct RewardBatch {
  torch::Tensor out;      // [B,T,n,a_max]
  torch::Tensor actions;  // [B,T,n]
  torch::Tensor avail;    // [B,T,n,a_max]
  torch::Tensor alive;    // [B,T,n]
  torch::Tensor valid;    // [B,T]
};
RewardBatch reward_forward(RewardModel& model, const std::vector<RewardTraj>& trajs);

// Taken-action rewards with termination masking applied: [B,T,n], zero for
// dead agents and padded steps.
torch::Tensor taken_rewards(const RewardBatch& batch);

// Per-step per-agent rewards for one trajectory, masked to zero at and after
// each agent's termination.
std::vector<std::vector<float>> relabel(RewardModel& model, const RewardTraj& traj);

// Shared-parameter inner policy and critic; agents are distinguished by a
// one-hot identity appended to the padded global state.
class InnerPolicyImpl : public torch::nn::Module {
 public:
  InnerPolicyImpl(int state_dim, int n_max, int a_max);

  torch::Tensor pi_logits(torch::Tensor state, torch::Tensor agent_onehot);
  torch::Tensor q_values(torch::Tensor state, torch::Tensor agent_onehot);
  torch::Tensor q_target(torch::Tensor state, torch::Tensor agent_onehot);
  void sync_target();

  std::vector<torch::Tensor> pi_parameters() { return pi_->parameters(); }
  std::vector<torch::Tensor> q_parameters() { return q_->parameters(); }
  int a_max() const { return a_max_; }

 private:
  int a_max_;
  torch::nn::Sequential pi_{nullptr}, q_{nullptr}, q_tgt_{nullptr};
};
TORCH_MODULE(InnerPolicy);

// Availability-masked softmax / log-softmax over the last dim.
torch::Tensor masked_log_softmax(const torch::Tensor& logits, const torch::Tensor& avail);

struct MasacBatch {
  torch::Tensor state;       // [B,S]
  torch::Tensor agent;       // [B,n_max] one-hot
  torch::Tensor action;      // [B] long
  torch::Tensor reward;      // [B]
  torch::Tensor next_state;  // [B,S]
  torch::Tensor avail;       // [B,a_max]
  torch::Tensor next_avail;  // [B,a_max]
  torch::Tensor done;        // [B] float
};

// Soft-actor-critic target y = r + gamma * (1-done) * (Qhat(s',u~) - alpha*log pi(u~|s'))
// with u~ sampled from the masked policy at s'.
torch::Tensor critic_target(InnerPolicy& net, const MasacBatch& batch, const RewardConfig& cfg);

// Closed-form discrete actor objective sum_a pi(a|s) * (alpha*log pi(a|s) - Q(s,a));
// its minimizer over the masked simplex is softmax(Q/alpha) on the support.
torch::Tensor actor_loss(InnerPolicy& net, const torch::Tensor& state,
                         const torch::Tensor& agent_onehot, const torch::Tensor& avail,
                         const torch::Tensor& q_values, const RewardConfig& cfg);

// One critic + actor update; returns (critic_loss, actor_loss). Increments
// *update_counter and hard-syncs the target critic every cfg.target_copy.
std::pair<double, double> masac_update(InnerPolicy& net, const MasacBatch& batch,
                                       const RewardConfig& cfg, torch::optim::Adam& pi_opt,
                                       torch::optim::Adam& q_opt, int* update_counter);

struct RewardMetrics {
  double final_loss = 0.0;
  double expert_return = 0.0;  // mean discounted rhat over expert batch, last step
  double policy_return = 0.0;
  double val_unavail_abs = 0.0;  // mean |rhat| over unavailable actions, val episodes
  int reward_steps = 0;
  int policy_steps = 0;
  json to_json() const;
};

// Adversarial alternation: every reward step regenerates imagined policy
// rollouts from the sampled experts' initial states (conditioned on the same
// descriptions), runs cfg.k inner-policy updates on those transitions, then
// takes one reward-model step.
RewardMetrics train_reward(const std::vector<const data::EpisodeStore*>& train_stores,
                           const std::vector<const data::EpisodeStore*>& val_stores,
                           dyn::DynamicsModel& dynamics, vq::VqVae& tokenizer,
                           const RewardConfig& cfg, const model::ModelLayout& layout,
                           uint64_t seed, const std::filesystem::path& out_ckpt,
                           bool augment_terrain = true);

RewardModel load_reward(const std::filesystem::path& ckpt, json* meta_out = nullptr);

// Ground-truth per-agent rewards: the stored global reward split equally among
// the agents alive at the step's start (zero for the dead).
std::vector<std::vector<float>> split_ground_truth(const data::Trajectory& traj,
                                                   const env::Scenario& scn);

}  // namespace lbi::reward
