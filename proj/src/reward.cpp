#include "lbi/reward.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <random>

#include "lbi/transformer.hpp"

namespace lbi::reward {

using torch::Tensor;

namespace {
constexpr float kMaskFill = -1e9f;
constexpr int kSacHidden = 128;

enum SlotType { kSlotState = 0, kSlotDesc = 1, kSlotAction = 2, kSlotReward = 3 };

Tensor row_tensor(const std::vector<float>& v) {
  return torch::from_blob(const_cast<float*>(v.data()), {static_cast<int64_t>(v.size())}).clone();
}
}  // namespace

json RewardConfig::to_json() const {
  return json{{"layers", layers},
              {"heads", heads},
              {"embed_dim", embed_dim},
              {"grad_clip", grad_clip},
              {"weight_decay", weight_decay},
              {"beta1", beta1},
              {"beta2", beta2},
              {"lr", lr},
              {"steps", steps},
              {"batch", batch},
              {"gamma", gamma},
              {"beta_margin", beta_margin},
              {"lambda_rc", lambda_rc},
              {"reward_constraint", reward_constraint},
              {"k", k},
              {"policy_horizon", policy_horizon},
              {"masac_batch", masac_batch},
              {"alpha_sac", alpha_sac},
              {"sac_lr", sac_lr},
              {"target_copy", target_copy}};
}

RewardConfig RewardConfig::from_json(const json& j) {
  RewardConfig c;
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.lr = j.value("lr", c.lr);
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.gamma = j.value("gamma", c.gamma);
  c.beta_margin = j.value("beta_margin", c.beta_margin);
  c.lambda_rc = j.value("lambda_rc", c.lambda_rc);
  c.reward_constraint = j.value("reward_constraint", c.reward_constraint);
  c.k = j.value("k", c.k);
  c.policy_horizon = j.value("policy_horizon", c.policy_horizon);
  c.masac_batch = j.value("masac_batch", c.masac_batch);
  c.alpha_sac = j.value("alpha_sac", c.alpha_sac);
  c.sac_lr = j.value("sac_lr", c.sac_lr);
  c.target_copy = j.value("target_copy", c.target_copy);
  return c;
}

json RewardMetrics::to_json() const {
  return json{{"final_loss", final_loss},
              {"expert_return", expert_return},
              {"policy_return", policy_return},
              {"val_unavail_abs", val_unavail_abs},
              {"reward_steps", reward_steps},
              {"policy_steps", policy_steps}};
}

// --- model ------------------------------------------------------------------

RewardModelImpl::RewardModelImpl(RewardConfig cfg, model::ModelLayout layout)
    : cfg_(cfg), layout_(layout) {
  if (cfg_.embed_dim % cfg_.heads != 0)
    throw ConfigError("embed_dim must be divisible by heads");
  const int E = cfg_.embed_dim;
  s_in_ = register_module("s_in", torch::nn::Linear(layout_.state_dim(), E));
  desc_in_ = register_module("desc_in", torch::nn::Linear(vision::kDescriptorDim, E));
  u_in_ = register_module("u_in", torch::nn::Embedding(layout_.a_max(), E));
  type_embed_ = register_module("type_embed", torch::nn::Embedding(4, E));
  agent_embed_ = register_module("agent_embed", torch::nn::Embedding(layout_.n_max, E));
  time_embed_ = register_module("time_embed", torch::nn::Embedding(dyn::kMaxContext + 1, E));
  rhat_token_ = register_parameter("rhat_token", torch::randn({E}) * 0.02);
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int l = 0; l < cfg_.layers; ++l)
    blocks_->push_back(model::TransformerBlock(E, cfg_.heads));
  final_ln_ =
      register_module("final_ln", torch::nn::LayerNorm(torch::nn::LayerNormOptions({E})));
  head_ = register_module("head", torch::nn::Linear(E, layout_.n_max * layout_.a_max()));
}

Tensor RewardModelImpl::forward(Tensor state, Tensor actions, Tensor desc, Tensor lengths) {
  const auto B = state.size(0);
  const auto Tm = actions.size(1);
  const int n = layout_.n_max;
  const int group = n + 3;
  if (Tm > dyn::kMaxContext) throw ContractViolation("sequence exceeds maximum context");

  Tensor agent_ids = agent_embed_(torch::arange(n));                         // [n,E]
  Tensor desc_slot = desc_in_(desc).unsqueeze(1) + type_embed_->weight[kSlotDesc];

  std::vector<Tensor> slots;
  for (int64_t t = 0; t < Tm; ++t) {
    Tensor te = time_embed_->weight[t];
    slots.push_back(s_in_(state.select(1, t)).unsqueeze(1) + type_embed_->weight[kSlotState] +
                    te);
    slots.push_back(desc_slot + te);
    slots.push_back(u_in_(actions.select(1, t)) + agent_ids + type_embed_->weight[kSlotAction] +
                    te);
    slots.push_back((rhat_token_ + type_embed_->weight[kSlotReward] + te)
                        .reshape({1, 1, -1})
                        .expand({B, 1, cfg_.embed_dim}));
  }
  slots.push_back(s_in_(state.select(1, Tm)).unsqueeze(1) + type_embed_->weight[kSlotState] +
                  time_embed_->weight[Tm]);
  Tensor x = torch::cat(slots, 1);  // [B, Tm*group + 1, E]

  // Bidirectional attention over real slots only; padded episodes hide their
  // tail so short and long trajectories can share a batch.
  Tensor steps = torch::arange(Tm + 1).unsqueeze(0);       // [1,Tm+1]
  Tensor len = lengths.unsqueeze(1);                       // [B,1]
  Tensor s_valid = steps <= len;                           // [B,Tm+1]
  Tensor grp_valid = steps.narrow(1, 0, Tm) < len;         // [B,Tm]
  Tensor slot_valid = torch::zeros({B, Tm * group + 1}, torch::kBool);
  for (int64_t t = 0; t < Tm; ++t) {
    slot_valid.select(1, t * group).copy_(s_valid.select(1, t));
    slot_valid.narrow(1, t * group + 1, group - 1)
        .copy_(grp_valid.select(1, t).unsqueeze(1).expand({B, group - 1}));
  }
  slot_valid.select(1, Tm * group).copy_(s_valid.select(1, Tm));
  std::optional<Tensor> attn_mask = slot_valid.unsqueeze(1).unsqueeze(2);  // [B,1,1,S]

  for (auto& block : *blocks_)
    x = block->as<model::TransformerBlockImpl>()->forward(x, attn_mask, /*causal=*/false);
  x = final_ln_(x);

  Tensor idx = torch::arange(Tm) * group + (group - 1);
  Tensor read = x.index_select(1, idx);  // [B,Tm,E]
  return torch::tanh(head_(read)).reshape({B, Tm, n, layout_.a_max()});
}

// --- trajectory adapters ------------------------------------------------------

RewardTraj traj_from_tensors(const dyn::EpisodeTensors& ep, const model::ModelLayout& layout) {
  RewardTraj tr;
  tr.state = ep.state;
  tr.actions = ep.actions;
  tr.avail = ep.avail;
  tr.desc = ep.desc;
  Tensor flags = torch::arange(layout.n_max) * env::kStateBlock + 7;
  tr.alive = (ep.state.narrow(0, 0, ep.T).index_select(1, flags) >= 0.5).to(torch::kFloat);
  return tr;
}

RewardTraj traj_from_sim(const dyn::SimEpisode& sim, const Tensor& desc) {
  const int T = sim.T();
  const int S = static_cast<int>(sim.states[0].size());
  const int n = T > 0 ? static_cast<int>(sim.actions[0].size()) : 0;
  const int a_max = T > 0 ? static_cast<int>(sim.avail[0][0].size()) : 0;
  RewardTraj tr;
  tr.state = torch::zeros({T + 1, S});
  for (int t = 0; t <= T; ++t) tr.state[t] = row_tensor(sim.states[t]);
  tr.actions = torch::zeros({T, std::max(n, 1)}, torch::kLong);
  tr.avail = torch::zeros({T, std::max(n, 1), std::max(a_max, 1)});
  tr.alive = torch::zeros({T, std::max(n, 1)});
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < n; ++i) {
      tr.actions[t][i] = sim.actions[t][i];
      for (int a = 0; a < a_max; ++a) tr.avail[t][i][a] = sim.avail[t][i][a];
      tr.alive[t][i] = sim.alive[t][i] ? 1.0f : 0.0f;
    }
  tr.desc = desc;
  return tr;
}

RewardBatch reward_forward(RewardModel& model, const std::vector<RewardTraj>& trajs) {
  if (trajs.empty()) throw DomainError("reward batch is empty");
  const model::ModelLayout& L = model->layout();
  const int n = L.n_max;
  const int a_max = L.a_max();
  const int B = static_cast<int>(trajs.size());
  int Tm = 0;
  for (const auto& tr : trajs) Tm = std::max(Tm, static_cast<int>(tr.actions.size(0)));

  Tensor state = torch::zeros({B, Tm + 1, L.state_dim()});
  Tensor actions = torch::zeros({B, Tm, n}, torch::kLong);
  Tensor avail = torch::zeros({B, Tm, n, a_max});
  Tensor alive = torch::zeros({B, Tm, n});
  Tensor valid = torch::zeros({B, Tm});
  Tensor desc = torch::zeros({B, vision::kDescriptorDim});
  Tensor lengths = torch::zeros({B}, torch::kLong);
  for (int b = 0; b < B; ++b) {
    const auto T = trajs[b].actions.size(0);
    state[b].narrow(0, 0, T + 1).copy_(trajs[b].state);
    if (T > 0) {
      actions[b].narrow(0, 0, T).copy_(trajs[b].actions);
      avail[b].narrow(0, 0, T).copy_(trajs[b].avail);
      alive[b].narrow(0, 0, T).copy_(trajs[b].alive);
      valid[b].narrow(0, 0, T).fill_(1.0f);
    }
    desc[b] = trajs[b].desc;
    lengths[b] = T;
  }

  RewardBatch out;
  out.out = model->forward(state, actions, desc, lengths);
  out.actions = actions;
  out.avail = avail;
  out.alive = alive;
  out.valid = valid;
  return out;
}

Tensor taken_rewards(const RewardBatch& batch) {
  Tensor taken = batch.out.gather(-1, batch.actions.unsqueeze(-1)).squeeze(-1);  // [B,T,n]
  return taken * batch.alive * batch.valid.unsqueeze(-1);
}

std::vector<std::vector<float>> relabel(RewardModel& model, const RewardTraj& traj) {
  torch::NoGradGuard ng;
  const bool was_training = model->is_training();
  model->eval();
  RewardBatch batch = reward_forward(model, {traj});
  Tensor taken = taken_rewards(batch)[0].contiguous();  // [T,n]
  model->train(was_training);
  const int T = static_cast<int>(taken.size(0));
  const int n = static_cast<int>(taken.size(1));
  std::vector<std::vector<float>> out(T, std::vector<float>(n));
  for (int t = 0; t < T; ++t)
    std::memcpy(out[t].data(), taken[t].data_ptr<float>(), sizeof(float) * n);
  return out;
}

// --- IRL objective ------------------------------------------------------------

IrlParts irl_loss(const IrlBatch& expert, const IrlBatch& policy, const Tensor& margin_actions,
                  const RewardConfig& cfg) {
  if (expert.out.size(0) == 0 || policy.out.size(0) == 0)
    throw DomainError("IRL update needs non-empty expert and policy batches");

  Tensor r_exp = expert.out.gather(-1, expert.actions.unsqueeze(-1)).squeeze(-1);  // [B,T,n]
  Tensor r_alt = expert.out.gather(-1, margin_actions.unsqueeze(-1)).squeeze(-1);
  // Confident expert wins stop accumulating reward: detached entries keep the
  // squashed head from saturating.
  Tensor capped = (r_exp - r_alt).detach() > cfg.beta_margin;
  Tensor r_used = torch::where(capped, r_exp.detach(), r_exp);

  IrlParts parts;
  parts.expert_term = -(r_used * expert.weight).sum({1, 2}).mean();
  Tensor r_pol = policy.out.gather(-1, policy.actions.unsqueeze(-1)).squeeze(-1);
  parts.policy_term = (r_pol * policy.weight).sum({1, 2}).mean();

  auto live = [](const IrlBatch& b) { return (b.weight > 0).to(torch::kFloat).unsqueeze(-1); };
  Tensor exp_live = live(expert);
  Tensor pol_live = live(policy);
  parts.unavail_term = (expert.out.pow(2) * (1.0 - expert.avail) * exp_live).sum({1, 2, 3}).mean() +
                       (policy.out.pow(2) * (1.0 - policy.avail) * pol_live).sum({1, 2, 3}).mean();
  parts.total = parts.expert_term + parts.policy_term + parts.unavail_term;
  if (cfg.reward_constraint) {
    parts.rc_term =
        cfg.lambda_rc * ((expert.out.pow(2) * expert.avail * exp_live).sum({1, 2, 3}).mean() +
                         (policy.out.pow(2) * policy.avail * pol_live).sum({1, 2, 3}).mean());
    parts.total = parts.total + parts.rc_term;
  } else {
    parts.rc_term = torch::zeros({});
  }
  return parts;
}

// --- inner policy ---------------------------------------------------------------

namespace {
torch::nn::Sequential sac_mlp(int in_dim, int out_dim) {
  return torch::nn::Sequential(torch::nn::Linear(in_dim, kSacHidden), torch::nn::GELU(),
                               torch::nn::Linear(kSacHidden, kSacHidden), torch::nn::GELU(),
                               torch::nn::Linear(kSacHidden, out_dim));
}
}  // namespace

InnerPolicyImpl::InnerPolicyImpl(int state_dim, int n_max, int a_max) : a_max_(a_max) {
  pi_ = register_module("pi", sac_mlp(state_dim + n_max, a_max));
  q_ = register_module("q", sac_mlp(state_dim + n_max, a_max));
  q_tgt_ = register_module("q_tgt", sac_mlp(state_dim + n_max, a_max));
  sync_target();
}

Tensor InnerPolicyImpl::pi_logits(Tensor state, Tensor agent_onehot) {
  return pi_->forward(torch::cat({state, agent_onehot}, -1));
}

Tensor InnerPolicyImpl::q_values(Tensor state, Tensor agent_onehot) {
  return q_->forward(torch::cat({state, agent_onehot}, -1));
}

Tensor InnerPolicyImpl::q_target(Tensor state, Tensor agent_onehot) {
  return q_tgt_->forward(torch::cat({state, agent_onehot}, -1));
}

void InnerPolicyImpl::sync_target() {
  torch::NoGradGuard ng;
  auto src = q_->parameters();
  auto dst = q_tgt_->parameters();
  for (size_t i = 0; i < src.size(); ++i) dst[i].copy_(src[i]);
}

Tensor masked_log_softmax(const Tensor& logits, const Tensor& avail) {
  return torch::log_softmax(logits + (1.0 - avail) * kMaskFill, -1);
}

Tensor critic_target(InnerPolicy& net, const MasacBatch& batch, const RewardConfig& cfg) {
  torch::NoGradGuard ng;
  Tensor logp = masked_log_softmax(net->pi_logits(batch.next_state, batch.agent),
                                   batch.next_avail);
  Tensor u = torch::multinomial(logp.exp(), 1);  // [B,1]
  Tensor q_u = net->q_target(batch.next_state, batch.agent).gather(1, u).squeeze(1);
  Tensor logp_u = logp.gather(1, u).squeeze(1);
  return batch.reward +
         cfg.gamma * (1.0 - batch.done) * (q_u - cfg.alpha_sac * logp_u);
}

Tensor actor_loss(InnerPolicy& net, const Tensor& state, const Tensor& agent_onehot,
                  const Tensor& avail, const Tensor& q_values, const RewardConfig& cfg) {
  Tensor logp = masked_log_softmax(net->pi_logits(state, agent_onehot), avail);
  Tensor p = logp.exp();
  return (p * (cfg.alpha_sac * logp - q_values)).sum(1).mean();
}

std::pair<double, double> masac_update(InnerPolicy& net, const MasacBatch& batch,
                                       const RewardConfig& cfg, torch::optim::Adam& pi_opt,
                                       torch::optim::Adam& q_opt, int* update_counter) {
  Tensor y = critic_target(net, batch, cfg);
  Tensor q = net->q_values(batch.state, batch.agent)
                 .gather(1, batch.action.unsqueeze(1))
                 .squeeze(1);
  Tensor critic_loss = (q - y).pow(2).mean();
  q_opt.zero_grad();
  critic_loss.backward();
  q_opt.step();

  Tensor q_all = net->q_values(batch.state, batch.agent).detach();
  Tensor pi_loss = actor_loss(net, batch.state, batch.agent, batch.avail, q_all, cfg);
  pi_opt.zero_grad();
  pi_loss.backward();
  pi_opt.step();

  if (update_counter) {
    ++*update_counter;
    if (cfg.target_copy > 0 && *update_counter % cfg.target_copy == 0) net->sync_target();
  }
  return {critic_loss.item<double>(), pi_loss.item<double>()};
}

// --- adversarial training -------------------------------------------------------

namespace {

struct ExpertPool {
  std::vector<RewardTraj> trajs;
  std::vector<dyn::RolloutStart> starts;
  std::vector<int> store_of;  // trajectory -> owning store index
};

ExpertPool build_pool(const std::vector<const data::EpisodeStore*>& stores,
                      const model::ModelLayout& layout, vq::VqVae& tokenizer, bool augment,
                      bool with_starts) {
  ExpertPool pool;
  for (size_t s = 0; s < stores.size(); ++s) {
    auto eps = dyn::episode_tensors(*stores[s], layout, nullptr, augment);
    std::vector<int> idx(eps.size());
    for (size_t e = 0; e < eps.size(); ++e) {
      pool.trajs.push_back(traj_from_tensors(eps[e], layout));
      pool.store_of.push_back(static_cast<int>(s));
      idx[e] = static_cast<int>(e);
    }
    if (with_starts) {
      auto st = dyn::starts_from_store(*stores[s], layout, tokenizer, idx, augment);
      std::move(st.begin(), st.end(), std::back_inserter(pool.starts));
    }
  }
  return pool;
}

Tensor discount_weights(const RewardBatch& b, double gamma) {
  Tensor g = torch::pow(gamma, torch::arange(b.valid.size(1), torch::kFloat));
  return g.unsqueeze(0).unsqueeze(-1) * b.alive * b.valid.unsqueeze(-1);
}

// Availability-masked categorical draw for every (row, agent) pair.
Tensor sample_masked(InnerPolicy& pol, Tensor state, Tensor agent, Tensor avail) {
  torch::NoGradGuard ng;
  Tensor p = masked_log_softmax(pol->pi_logits(state, agent), avail).exp();
  return torch::multinomial(p, 1).squeeze(1);
}

struct TransitionPool {
  std::vector<Tensor> state, agent, next_state, avail, next_avail;
  std::vector<float> reward, done;
  std::vector<int64_t> action;

  int size() const { return static_cast<int>(reward.size()); }

  MasacBatch sample(int batch, std::mt19937_64& rng) const {
    std::uniform_int_distribution<int> pick(0, size() - 1);
    std::vector<int64_t> idx(batch);
    for (auto& v : idx) v = pick(rng);
    Tensor sel = torch::tensor(idx);
    MasacBatch b;
    b.state = torch::stack(state).index_select(0, sel);
    b.agent = torch::stack(agent).index_select(0, sel);
    b.next_state = torch::stack(next_state).index_select(0, sel);
    b.avail = torch::stack(avail).index_select(0, sel);
    b.next_avail = torch::stack(next_avail).index_select(0, sel);
    Tensor r = row_tensor(reward), d = row_tensor(done);
    b.reward = r.index_select(0, sel);
    b.done = d.index_select(0, sel);
    std::vector<int64_t> act(batch);
    for (int i = 0; i < batch; ++i) act[i] = action[idx[i]];
    b.action = torch::tensor(act);
    return b;
  }
};

void fill_transitions(TransitionPool& pool, const dyn::SimEpisode& sim, const RewardTraj& traj,
                      RewardModel& rm, const model::ModelLayout& layout, int horizon) {
  const int T = sim.T();
  if (T == 0) return;
  const int n = layout.n_max;
  const int a_max = layout.a_max();
  const auto rhat = relabel(rm, traj);
  Tensor eye = torch::eye(n);
  for (int t = 0; t < T; ++t) {
    Tensor s = traj.state[t];
    Tensor s_next = traj.state[t + 1];
    const bool env_done = (t + 1 == T) && (T < horizon);
    for (int i = 0; i < n; ++i) {
      if (!sim.alive[t][i]) continue;
      pool.state.push_back(s);
      pool.next_state.push_back(s_next);
      pool.agent.push_back(eye[i]);
      pool.action.push_back(sim.actions[t][i]);
      pool.reward.push_back(rhat[t][i]);
      Tensor av = torch::zeros({a_max});
      for (int a = 0; a < a_max; ++a) av[a] = sim.avail[t][i][a];
      pool.avail.push_back(av);
      Tensor av_next = torch::zeros({a_max});
      if (t + 1 < T) {
        for (int a = 0; a < a_max; ++a) av_next[a] = sim.avail[t + 1][i][a];
      } else {
        av_next[env::kActionNoop] = 1.0f;
      }
      pool.next_avail.push_back(av_next);
      const bool dead_next = !sim.alive[t + 1][i];
      pool.done.push_back(env_done || dead_next ? 1.0f : 0.0f);
    }
  }
}

double unavail_metric(RewardModel& rm, const std::vector<RewardTraj>& trajs, int chunk) {
  if (trajs.empty()) return 0.0;
  torch::NoGradGuard ng;
  rm->eval();
  double num = 0.0, den = 0.0;
  for (size_t at = 0; at < trajs.size(); at += chunk) {
    std::vector<RewardTraj> part(trajs.begin() + at,
                                 trajs.begin() + std::min(trajs.size(), at + chunk));
    RewardBatch b = reward_forward(rm, part);
    Tensor live = (b.alive * b.valid.unsqueeze(-1)).unsqueeze(-1);
    Tensor mask = (1.0 - b.avail) * live;
    num += (b.out.abs() * mask).sum().item<double>();
    den += mask.sum().item<double>();
  }
  rm->train();
  return den > 0 ? num / den : 0.0;
}

}  // namespace

RewardMetrics train_reward(const std::vector<const data::EpisodeStore*>& train_stores,
                           const std::vector<const data::EpisodeStore*>& val_stores,
                           dyn::DynamicsModel& dynamics, vq::VqVae& tokenizer,
                           const RewardConfig& cfg, const model::ModelLayout& layout,
                           uint64_t seed, const std::filesystem::path& out_ckpt,
                           bool augment_terrain) {
  if (train_stores.empty()) throw ConfigError("reward training needs at least one store");
  if (cfg.k < 1) throw ConfigError("k must be positive");
  if (cfg.policy_horizon < 1 || cfg.policy_horizon > dyn::kMaxContext)
    throw ConfigError("policy_horizon must lie in [1, T_max]");
  if (dynamics->layout() != layout)
    throw ConfigError("dynamics checkpoint layout does not match");
  model::init_torch(mix_seed(seed, 0x5EED));

  ExpertPool pool = build_pool(train_stores, layout, tokenizer, augment_terrain, true);
  if (pool.trajs.empty()) throw ConfigError("reward training stores contain no episodes");
  ExpertPool val_pool = build_pool(val_stores, layout, tokenizer, augment_terrain, false);

  const int n = layout.n_max;
  const int a_max = layout.a_max();
  RewardModel rm(cfg, layout);
  torch::optim::AdamW rm_opt(rm->parameters(), torch::optim::AdamWOptions(cfg.lr)
                                                   .betas({cfg.beta1, cfg.beta2})
                                                   .weight_decay(cfg.weight_decay));
  InnerPolicy pol(layout.state_dim(), n, a_max);
  torch::optim::Adam pi_opt(pol->pi_parameters(), torch::optim::AdamOptions(cfg.sac_lr));
  torch::optim::Adam q_opt(pol->q_parameters(), torch::optim::AdamOptions(cfg.sac_lr));

  std::mt19937_64 rng(mix_seed(seed, 4));
  std::uniform_int_distribution<size_t> pick_ep(0, pool.trajs.size() - 1);
  dynamics->eval();

  // Joint action sampler used inside imagination; dead agents are handled by
  // their no-op-only masks.
  auto pi_actor = [&](int, const std::vector<float>& state,
                      const std::vector<std::vector<float>>&,
                      const std::vector<std::vector<uint8_t>>& avail,
                      const std::vector<std::vector<float>>&) {
    torch::NoGradGuard ng;
    Tensor s = row_tensor(state).unsqueeze(0).expand({n, -1});
    Tensor av = torch::zeros({n, a_max});
    for (int i = 0; i < n; ++i)
      for (int a = 0; a < a_max; ++a) av[i][a] = avail[i][a];
    Tensor acts = sample_masked(pol, s, torch::eye(n), av);
    std::vector<int> out(n);
    for (int i = 0; i < n; ++i) out[i] = static_cast<int>(acts[i].item<int64_t>());
    return out;
  };

  RewardMetrics metrics;
  int masac_counter = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    const double cos_lr =
        cfg.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / cfg.steps));
    for (auto& group : rm_opt.param_groups())
      static_cast<torch::optim::AdamWOptions&>(group.options()).lr(cos_lr);

    // Fresh expert sample and matching imagined opponents, grouped per store
    // so every rollout runs under its own scenario. Policy episodes inherit
    // the description of the expert they oppose.
    std::vector<size_t> chosen(cfg.batch);
    for (auto& c : chosen) c = pick_ep(rng);
    std::vector<RewardTraj> expert_trajs, policy_trajs;
    std::vector<dyn::SimEpisode> sims_all;
    for (size_t c : chosen) expert_trajs.push_back(pool.trajs[c]);

    std::map<int, std::vector<size_t>> by_store;
    for (size_t c : chosen) by_store[pool.store_of[c]].push_back(c);
    for (const auto& [s_idx, members] : by_store) {
      std::vector<dyn::RolloutStart> starts;
      for (size_t c : members) starts.push_back(pool.starts[c]);
      auto sims = dyn::rollout(dynamics, train_stores[s_idx]->scenario(), starts, pi_actor,
                               cfg.policy_horizon);
      for (size_t j = 0; j < sims.size(); ++j) {
        policy_trajs.push_back(traj_from_sim(sims[j], row_tensor(starts[j].desc)));
        sims_all.push_back(std::move(sims[j]));
      }
    }

    // k inner-policy updates on the freshly relabeled imagined transitions.
    TransitionPool transitions;
    for (size_t j = 0; j < sims_all.size(); ++j)
      fill_transitions(transitions, sims_all[j], policy_trajs[j], rm, layout,
                       cfg.policy_horizon);
    if (transitions.size() > 0) {
      const int mb = std::min(cfg.masac_batch, transitions.size());
      for (int u = 0; u < cfg.k; ++u) {
        masac_update(pol, transitions.sample(mb, rng), cfg, pi_opt, q_opt, &masac_counter);
        ++metrics.policy_steps;
      }
    }

    // One reward-model step on the paired batches.
    RewardBatch exp_fw = reward_forward(rm, expert_trajs);
    RewardBatch pol_fw = reward_forward(rm, policy_trajs);
    IrlBatch exp_b{exp_fw.out, exp_fw.actions, exp_fw.avail,
                   discount_weights(exp_fw, cfg.gamma)};
    IrlBatch pol_b{pol_fw.out, pol_fw.actions, pol_fw.avail,
                   discount_weights(pol_fw, cfg.gamma)};

    // Margin comparison actions: the inner policy queried at the experts'
    // own states.
    Tensor margin_actions;
    {
      const auto B = exp_fw.actions.size(0);
      const auto Tm = exp_fw.actions.size(1);
      Tensor st = torch::zeros({B, Tm, layout.state_dim()});
      for (int64_t b = 0; b < B; ++b) {
        const auto T = expert_trajs[b].actions.size(0);
        if (T > 0) st[b].narrow(0, 0, T).copy_(expert_trajs[b].state.narrow(0, 0, T));
      }
      Tensor st_flat = st.unsqueeze(2).expand({B, Tm, n, layout.state_dim()}).reshape(
          {B * Tm * n, layout.state_dim()});
      Tensor agents = torch::eye(n).unsqueeze(0).unsqueeze(0).expand({B, Tm, n, n}).reshape(
          {B * Tm * n, n});
      Tensor av = exp_fw.avail.reshape({B * Tm * n, a_max}).clone();
      // Padded rows carry all-zero masks; give them a no-op so sampling has
      // support (their entries never reach the loss).
      Tensor empty = av.sum(1) < 0.5;
      av.narrow(1, env::kActionNoop, 1).masked_fill_(empty.unsqueeze(1), 1.0f);
      margin_actions = sample_masked(pol, st_flat, agents, av).reshape({B, Tm, n});
    }

    IrlParts parts = irl_loss(exp_b, pol_b, margin_actions, cfg);
    const double loss_val = parts.total.item<double>();
    if (!std::isfinite(loss_val))
      throw DomainError("reward loss diverged at step " + std::to_string(step));
    rm_opt.zero_grad();
    parts.total.backward();
    torch::nn::utils::clip_grad_norm_(rm->parameters(), cfg.grad_clip);
    rm_opt.step();

    metrics.final_loss = loss_val;
    metrics.expert_return = -parts.expert_term.item<double>();
    metrics.policy_return = parts.policy_term.item<double>();
    metrics.reward_steps = step + 1;
  }

  metrics.val_unavail_abs = unavail_metric(rm, val_pool.trajs, cfg.batch);

  json meta{{"kind", "reward"},
            {"config", cfg.to_json()},
            {"layout", layout.to_json()},
            {"seed", seed},
            {"metrics", metrics.to_json()}};
  meta["config_hash"] = model::config_hash(
      json{{"config", cfg.to_json()}, {"layout", layout.to_json()}, {"seed", seed}});
  model::save_checkpoint(out_ckpt, *rm, meta);
  return metrics;
}

RewardModel load_reward(const std::filesystem::path& ckpt, json* meta_out) {
  const json meta = model::load_checkpoint_meta(ckpt);
  if (meta.at("kind").get<std::string>() != "reward")
    throw ConfigError("'" + ckpt.string() + "' is not a reward checkpoint");
  RewardModel rm(RewardConfig::from_json(meta.at("config")),
                 model::ModelLayout::from_json(meta.at("layout")));
  model::load_checkpoint_into(ckpt, *rm);
  rm->eval();
  if (meta_out) *meta_out = meta;
  return rm;
}

std::vector<std::vector<float>> split_ground_truth(const data::Trajectory& traj,
                                                   const env::Scenario& scn) {
  const int T = traj.T();
  const int n = scn.n_allies();
  std::vector<std::vector<float>> out(T, std::vector<float>(n, 0.0f));
  for (int t = 0; t < T; ++t) {
    int live = 0;
    for (int i = 0; i < n; ++i)
      if (!traj.done[t][i]) ++live;
    if (live == 0) continue;
    const float share = traj.rewards[t] / static_cast<float>(live);
    for (int i = 0; i < n; ++i)
      if (!traj.done[t][i]) out[t][i] = share;
  }
  return out;
}

}  // namespace lbi::reward
