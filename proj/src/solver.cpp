#include "lbi/solver.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <optional>

#include "lbi/vision.hpp"

namespace lbi::solver {

namespace {

using torch::Tensor;

constexpr float kMaskFill = -1e9f;
constexpr int kHidden = 128;
constexpr uint64_t kSolverSalt = 0x50F7;

Tensor row_tensor(const std::vector<float>& v) {
  Tensor t = torch::empty({static_cast<int64_t>(v.size())});
  std::memcpy(t.data_ptr<float>(), v.data(), sizeof(float) * v.size());
  return t;
}

void patch_terrain(std::vector<float>& padded, const model::ModelLayout& layout, int terrain) {
  const int base = env::kStateBlock * layout.units();
  for (int k = 0; k < env::kNumTerrains; ++k)
    padded[base + k] = k == terrain ? 1.0f : 0.0f;
}

void copy_params(QNet& src, QNet& dst) {
  torch::NoGradGuard ng;
  auto s = src->parameters();
  auto d = dst->parameters();
  for (size_t i = 0; i < s.size(); ++i) d[i].copy_(s[i]);
}

void check_config(const SolverConfig& cfg) {
  if (cfg.behavior_reg && cfg.alpha <= 0.0) throw ConfigError("alpha must be positive");
  if (cfg.gamma < 0.0 || cfg.gamma > 1.0) throw ConfigError("gamma must lie in [0, 1]");
  if (cfg.episodes < 1) throw ConfigError("episodes must be positive");
  if (cfg.horizon < 1 || cfg.horizon > dyn::kMaxContext)
    throw ConfigError("horizon must lie in [1, " + std::to_string(dyn::kMaxContext) + "]");
  if (cfg.batch < 1 || cfg.rollout_batch < 1 || cfg.updates_per_episode < 1)
    throw ConfigError("batch sizes and update counts must be positive");
  if (cfg.buffer_capacity < 1) throw ConfigError("buffer capacity must be positive");
  if (cfg.target_copy < 1) throw ConfigError("target copy period must be positive");
}

double epsilon_at(const SolverConfig& cfg, int episode) {
  const double span = std::max(1.0, cfg.eps_frac * cfg.episodes);
  const double f = std::min(1.0, static_cast<double>(episode) / span);
  return cfg.eps_start + f * (cfg.eps_end - cfg.eps_start);
}

// Greedy joint action for one timestep; rows whose mask is a lone no-op are
// taken verbatim so padding/dead slots never consume exploration draws.
std::vector<int> act_batch(QNet& q, const SolverConfig& cfg,
                           const std::vector<std::vector<float>>& obs,
                           const std::vector<std::vector<uint8_t>>& avail,
                           const std::vector<std::vector<float>>& qref, double eps,
                           std::mt19937_64& rng) {
  torch::NoGradGuard ng;
  const int n = static_cast<int>(obs.size());
  const int a_max = static_cast<int>(avail[0].size());
  const int obs_dim = static_cast<int>(obs[0].size());
  Tensor o = torch::empty({n, obs_dim});
  Tensor ref = torch::empty({n, a_max});
  Tensor mask = torch::zeros({n, a_max});
  auto mask_a = mask.accessor<float, 2>();
  for (int i = 0; i < n; ++i) {
    std::memcpy(o[i].data_ptr<float>(), obs[i].data(), sizeof(float) * obs_dim);
    std::memcpy(ref[i].data_ptr<float>(), qref[i].data(), sizeof(float) * a_max);
    for (int a = 0; a < a_max; ++a) mask_a[i][a] = avail[i][a] ? 1.0f : 0.0f;
  }
  Tensor qv = q->forward(o, torch::eye(n));
  Tensor greedy = cfg.behavior_reg ? (torch::log(ref) + qv / cfg.alpha).argmax(-1)
                                   : qv.masked_fill(mask < 0.5f, kMaskFill).argmax(-1);
  greedy = greedy.contiguous();
  auto greedy_a = greedy.accessor<int64_t, 1>();

  std::vector<int> acts(n, env::kActionNoop);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    std::vector<int> options;
    for (int a = 0; a < a_max; ++a)
      if (avail[i][a]) options.push_back(a);
    if (options.size() == 1) {
      acts[i] = options[0];
      continue;
    }
    if (unif(rng) < eps) {
      std::uniform_int_distribution<size_t> pick(0, options.size() - 1);
      acts[i] = options[pick(rng)];
    } else {
      acts[i] = static_cast<int>(greedy_a[i]);
    }
  }
  return acts;
}

void seal_tail(Transition& tr, int obs_dim, int a_max) {
  tr.next_obs.assign(obs_dim, 0.0f);
  tr.next_avail.assign(a_max, 0);
  tr.next_avail[env::kActionNoop] = 1;
  tr.next_qref.assign(a_max, 0.0f);
  tr.next_qref[env::kActionNoop] = 1.0f;
}

std::vector<Transition> imagined_transitions(const dyn::SimEpisode& sim,
                                             const std::vector<std::vector<float>>& rhat,
                                             int n_allies) {
  const int T = sim.T();
  std::vector<Transition> rows;
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < n_allies; ++i) {
      if (!sim.alive[t][i]) continue;
      Transition tr;
      tr.obs = sim.obs[t][i];
      tr.agent = i;
      tr.action = sim.actions[t][i];
      tr.reward = rhat[t][i];
      tr.done = t + 1 == T || !sim.alive[t + 1][i];
      if (t + 1 < T) {
        tr.next_obs = sim.obs[t + 1][i];
        tr.next_avail = sim.avail[t + 1][i];
        tr.next_qref = sim.qref[t + 1][i];
      } else {
        seal_tail(tr, static_cast<int>(sim.obs[t][i].size()),
                  static_cast<int>(sim.avail[t][i].size()));
      }
      rows.push_back(std::move(tr));
    }
  }
  return rows;
}

std::vector<float> tensor_row(const Tensor& t) {
  Tensor c = t.contiguous();
  return std::vector<float>(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
}

std::vector<Transition> stored_transitions(const data::Trajectory& ep,
                                           const dyn::EpisodeTensors& et,
                                           const std::vector<Tensor>& qrefs,
                                           const std::vector<std::vector<float>>& gt,
                                           int n_allies) {
  const int T = et.T;
  const int obs_dim = static_cast<int>(et.obs.size(2));
  const int a_max = static_cast<int>(et.avail.size(2));
  std::vector<Transition> rows;
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < n_allies; ++i) {
      if (ep.done[t][i]) continue;
      Transition tr;
      tr.obs = tensor_row(et.obs[t][i]);
      tr.agent = i;
      tr.action = ep.actions[t][i];
      tr.reward = gt[t][i];
      tr.done = t + 1 == T || ep.done[t + 1][i];
      if (t + 1 < T) {
        tr.next_obs = tensor_row(et.obs[t + 1][i]);
        const auto mask_row = tensor_row(et.avail[t + 1][i]);
        tr.next_avail.resize(mask_row.size());
        for (size_t a = 0; a < mask_row.size(); ++a)
          tr.next_avail[a] = mask_row[a] >= 0.5f ? 1 : 0;
        tr.next_qref = tensor_row(qrefs[t + 1][i]);
      } else {
        seal_tail(tr, obs_dim, a_max);
      }
      rows.push_back(std::move(tr));
    }
  }
  return rows;
}

void fit_q(QNet& q, QNet& q_tgt, torch::optim::Adam& opt, ReplayBuffer& buffer,
           const SolverConfig& cfg, int updates, std::mt19937_64& rng, SolveMetrics& metrics) {
  for (int u = 0; u < updates; ++u) {
    TransitionBatch tb = buffer.sample(cfg.batch, rng);
    Tensor target = q_target(q_tgt, tb, cfg);
    Tensor taken = q->forward(tb.obs, tb.agent).gather(1, tb.action.unsqueeze(1)).squeeze(1);
    Tensor loss = torch::mse_loss(taken, target);
    opt.zero_grad();
    loss.backward();
    opt.step();
    metrics.final_loss = loss.item<double>();
    if (!std::isfinite(metrics.final_loss)) throw DomainError("policy loss diverged");
    if (++metrics.updates % cfg.target_copy == 0) copy_params(q, q_tgt);
  }
}

json policy_meta(const PolicyHandle& policy) {
  json meta{{"kind", "policy"},
            {"config", policy.cfg.to_json()},
            {"layout", policy.layout.to_json()},
            {"mode", policy_mode_name(policy.mode)}};
  meta["config_hash"] = model::config_hash(
      json{{"config", policy.cfg.to_json()}, {"layout", policy.layout.to_json()},
           {"mode", policy_mode_name(policy.mode)}});
  return meta;
}

}  // namespace

json SolverConfig::to_json() const {
  return json{{"alpha", alpha},
              {"gamma", gamma},
              {"lr", lr},
              {"episodes", episodes},
              {"horizon", horizon},
              {"batch", batch},
              {"updates_per_episode", updates_per_episode},
              {"eps_start", eps_start},
              {"eps_end", eps_end},
              {"eps_frac", eps_frac},
              {"target_copy", target_copy},
              {"buffer_capacity", buffer_capacity},
              {"rollout_batch", rollout_batch},
              {"behavior_reg", behavior_reg},
              {"gt_image", gt_image}};
}

SolverConfig SolverConfig::from_json(const json& j) {
  SolverConfig c;
  c.alpha = j.value("alpha", c.alpha);
  c.gamma = j.value("gamma", c.gamma);
  c.lr = j.value("lr", c.lr);
  c.episodes = j.value("episodes", c.episodes);
  c.horizon = j.value("horizon", c.horizon);
  c.batch = j.value("batch", c.batch);
  c.updates_per_episode = j.value("updates_per_episode", c.updates_per_episode);
  c.eps_start = j.value("eps_start", c.eps_start);
  c.eps_end = j.value("eps_end", c.eps_end);
  c.eps_frac = j.value("eps_frac", c.eps_frac);
  c.target_copy = j.value("target_copy", c.target_copy);
  c.buffer_capacity = j.value("buffer_capacity", c.buffer_capacity);
  c.rollout_batch = j.value("rollout_batch", c.rollout_batch);
  c.behavior_reg = j.value("behavior_reg", c.behavior_reg);
  c.gt_image = j.value("gt_image", c.gt_image);
  return c;
}

json BcConfig::to_json() const {
  return json{{"steps", steps}, {"batch", batch}, {"lr", lr}};
}

BcConfig BcConfig::from_json(const json& j) {
  BcConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  return c;
}

json SolveMetrics::to_json() const {
  return json{{"final_loss", final_loss},
              {"mean_imagined_return", mean_imagined_return},
              {"bc_accuracy", bc_accuracy},
              {"episodes", episodes},
              {"updates", updates}};
}

json EvalResult::to_json() const {
  return json{{"win_rate", win_rate},
              {"mean_return", mean_return},
              {"std_return", std_return},
              {"episodes", episodes}};
}

double soft_backup(const std::vector<double>& q, const std::vector<double>& q_ref, double alpha) {
  if (alpha <= 0.0) throw DomainError("soft backup requires alpha > 0");
  if (q.size() != q_ref.size() || q.empty())
    throw DomainError("soft backup needs matching non-empty value/reference rows");
  double top = -std::numeric_limits<double>::infinity();
  double mass = 0.0;
  for (size_t a = 0; a < q.size(); ++a) {
    if (q_ref[a] < 0.0) throw DomainError("reference probabilities must be non-negative");
    if (q_ref[a] > 0.0) {
      top = std::max(top, q[a]);
      mass += q_ref[a];
    }
  }
  if (mass <= 0.0) throw DomainError("reference distribution has empty support");
  double acc = 0.0;
  for (size_t a = 0; a < q.size(); ++a)
    if (q_ref[a] > 0.0) acc += q_ref[a] * std::exp((q[a] - top) / alpha);
  return top + alpha * std::log(acc);
}

Tensor soft_backup_batch(const Tensor& q, const Tensor& q_ref, double alpha) {
  if (alpha <= 0.0) throw DomainError("soft backup requires alpha > 0");
  return alpha * torch::logsumexp(torch::log(q_ref) + q / alpha, -1);
}

Tensor behavior_policy(const Tensor& q, const Tensor& q_ref, double alpha) {
  if (alpha <= 0.0) throw DomainError("behavior policy requires alpha > 0");
  return torch::softmax(torch::log(q_ref) + q / alpha, -1);
}

QNetImpl::QNetImpl(int obs_dim, int n_max, int a_max) : a_max_(a_max) {
  net_ = register_module(
      "net", torch::nn::Sequential(torch::nn::Linear(obs_dim + n_max, kHidden), torch::nn::GELU(),
                                   torch::nn::Linear(kHidden, kHidden), torch::nn::GELU(),
                                   torch::nn::Linear(kHidden, a_max)));
}

Tensor QNetImpl::forward(Tensor obs, Tensor agent_onehot) {
  return net_->forward(torch::cat({obs, agent_onehot}, -1));
}

PolicyMode parse_policy_mode(const std::string& s) {
  if (s == "soft-q") return PolicyMode::kSoftQ;
  if (s == "hard-q") return PolicyMode::kHardQ;
  if (s == "bc") return PolicyMode::kBc;
  throw ConfigError("unknown policy mode '" + s + "'");
}

std::string policy_mode_name(PolicyMode m) {
  switch (m) {
    case PolicyMode::kSoftQ: return "soft-q";
    case PolicyMode::kHardQ: return "hard-q";
    case PolicyMode::kBc: return "bc";
  }
  throw ContractViolation("unhandled policy mode");
}

void save_policy(const std::filesystem::path& path, PolicyHandle& policy, const json& extra_meta) {
  json meta = policy_meta(policy);
  for (const auto& [key, value] : extra_meta.items()) meta[key] = value;
  model::save_checkpoint(path, *policy.q, meta);
}

PolicyHandle load_policy(const std::filesystem::path& path, json* meta_out) {
  json meta = model::load_checkpoint_meta(path);
  if (meta.value("kind", "") != "policy")
    throw ConfigError("'" + path.string() + "' is not a policy checkpoint");
  PolicyHandle h;
  h.layout = model::ModelLayout::from_json(meta.at("layout"));
  h.cfg = SolverConfig::from_json(meta.at("config"));
  h.mode = parse_policy_mode(meta.at("mode").get<std::string>());
  h.q = QNet(h.layout.obs_dim(), h.layout.n_max, h.layout.a_max());
  model::load_checkpoint_into(path, *h.q);
  if (meta_out) *meta_out = std::move(meta);
  return h;
}

ReplayBuffer::ReplayBuffer(int capacity_episodes, int n_max)
    : capacity_(capacity_episodes), n_max_(n_max) {
  if (capacity_ < 1) throw ConfigError("replay capacity must be positive");
  if (n_max_ < 1) throw ConfigError("replay n_max must be positive");
}

void ReplayBuffer::push_episode(std::vector<Transition> rows) {
  if (rows.empty()) return;
  transitions_ += static_cast<int>(rows.size());
  episodes_.push_back(std::move(rows));
  while (static_cast<int>(episodes_.size()) > capacity_) {
    transitions_ -= static_cast<int>(episodes_.front().size());
    episodes_.pop_front();
  }
}

TransitionBatch ReplayBuffer::sample(int batch, std::mt19937_64& rng) const {
  if (batch < 1) throw DomainError("sample needs a positive batch size");
  if (transitions_ == 0) throw DomainError("sampling from an empty replay buffer");
  std::vector<int64_t> prefix(episodes_.size());
  int64_t acc = 0;
  for (size_t e = 0; e < episodes_.size(); ++e) {
    acc += static_cast<int64_t>(episodes_[e].size());
    prefix[e] = acc;
  }
  const int obs_dim = static_cast<int>(episodes_.front().front().obs.size());
  const int a_max = static_cast<int>(episodes_.front().front().next_avail.size());

  TransitionBatch out;
  out.obs = torch::zeros({batch, obs_dim});
  out.agent = torch::zeros({batch, n_max_});
  out.action = torch::zeros({batch}, torch::kLong);
  out.reward = torch::zeros({batch});
  out.next_obs = torch::zeros({batch, obs_dim});
  out.next_avail = torch::zeros({batch, a_max});
  out.next_qref = torch::zeros({batch, a_max});
  out.done = torch::zeros({batch});

  auto obs_a = out.obs.accessor<float, 2>();
  auto agent_a = out.agent.accessor<float, 2>();
  auto act_a = out.action.accessor<int64_t, 1>();
  auto rew_a = out.reward.accessor<float, 1>();
  auto nobs_a = out.next_obs.accessor<float, 2>();
  auto avail_a = out.next_avail.accessor<float, 2>();
  auto qref_a = out.next_qref.accessor<float, 2>();
  auto done_a = out.done.accessor<float, 1>();

  std::uniform_int_distribution<int64_t> pick(0, transitions_ - 1);
  for (int b = 0; b < batch; ++b) {
    const int64_t r = pick(rng);
    const size_t e = std::upper_bound(prefix.begin(), prefix.end(), r) - prefix.begin();
    const int64_t base = e == 0 ? 0 : prefix[e - 1];
    const Transition& tr = episodes_[e][static_cast<size_t>(r - base)];
    for (int k = 0; k < obs_dim; ++k) {
      obs_a[b][k] = tr.obs[k];
      nobs_a[b][k] = tr.next_obs[k];
    }
    agent_a[b][tr.agent] = 1.0f;
    act_a[b] = tr.action;
    rew_a[b] = tr.reward;
    for (int k = 0; k < a_max; ++k) {
      avail_a[b][k] = tr.next_avail[k] ? 1.0f : 0.0f;
      qref_a[b][k] = tr.next_qref[k];
    }
    done_a[b] = tr.done ? 1.0f : 0.0f;
  }
  return out;
}

Tensor q_target(QNet& target_net, const TransitionBatch& batch, const SolverConfig& cfg) {
  torch::NoGradGuard ng;
  Tensor next_q = target_net->forward(batch.next_obs, batch.agent);
  Tensor v = cfg.behavior_reg
                 ? soft_backup_batch(next_q, batch.next_qref, cfg.alpha)
                 : next_q.masked_fill(batch.next_avail < 0.5f, kMaskFill).amax(-1);
  return batch.reward + cfg.gamma * (1.0 - batch.done) * v;
}

SolveMetrics train_policy(dyn::DynamicsModel& dynamics, vq::VqVae& tokenizer,
                          reward::RewardModel& reward_model, const env::Scenario& scn,
                          const vision::TaskDescription& task, const SolverConfig& cfg,
                          const model::ModelLayout& layout, uint64_t seed,
                          const std::filesystem::path& out_ckpt) {
  check_config(cfg);
  if (!layout.fits(scn)) throw ConfigError("scenario exceeds the solver layout");
  if (dynamics->layout() != layout || reward_model->layout() != layout)
    throw ConfigError("solver layout must match the dynamics and reward models");
  model::init_torch(mix_seed(seed, kSolverSalt));
  std::mt19937_64 rng(mix_seed(seed, 5));

  const int n = layout.n_max;
  QNet q(layout.obs_dim(), n, layout.a_max());
  QNet q_tgt(layout.obs_dim(), n, layout.a_max());
  copy_params(q, q_tgt);
  torch::optim::Adam opt(q->parameters(), torch::optim::AdamOptions(cfg.lr));

  const auto dvec = vision::encode_description(task);
  const std::vector<float> desc_row(dvec.begin(), dvec.end());
  Tensor desc_t = row_tensor(desc_row);

  env::BattleEnv env(scn);
  ReplayBuffer buffer(cfg.buffer_capacity, n);
  SolveMetrics metrics;

  int episodes_done = 0;
  while (episodes_done < cfg.episodes) {
    const int bsz = std::min(cfg.rollout_batch, cfg.episodes - episodes_done);
    std::vector<dyn::RolloutStart> starts(bsz);
    Tensor frames = torch::empty({bsz, 3, vision::kFrameH, vision::kFrameW});
    for (int b = 0; b < bsz; ++b) {
      const auto rr = env.reset(rng());
      starts[b].state = model::pad_state(scn, layout, rr.state_vec);
      patch_terrain(starts[b].state, layout, task.terrain_id);
      starts[b].desc = desc_row;
      frames[b] = vq::frame_to_tensor(vision::augment(scn, rr.state, task.terrain_id));
    }
    {
      torch::NoGradGuard ng;
      Tensor pooled = vq::pooled_embedding_batch(tokenizer, frames);
      for (int b = 0; b < bsz; ++b) starts[b].zbar = tensor_row(pooled[b]);
    }

    const double eps = epsilon_at(cfg, episodes_done);
    auto policy = [&](int, const std::vector<float>&, const std::vector<std::vector<float>>& obs,
                      const std::vector<std::vector<uint8_t>>& avail,
                      const std::vector<std::vector<float>>& qref) {
      return act_batch(q, cfg, obs, avail, qref, eps, rng);
    };
    const auto sims = dyn::rollout(dynamics, scn, starts, policy, cfg.horizon,
                                   cfg.gt_image ? &tokenizer : nullptr);

    double batch_return = 0.0;
    for (const auto& sim : sims) {
      const reward::RewardTraj rt = reward::traj_from_sim(sim, desc_t);
      const auto rhat = reward::relabel(reward_model, rt);
      buffer.push_episode(imagined_transitions(sim, rhat, scn.n_allies()));
      for (const auto& step : rhat)
        for (float r : step) batch_return += r;
    }
    metrics.mean_imagined_return = batch_return / bsz;
    episodes_done += bsz;

    fit_q(q, q_tgt, opt, buffer, cfg, bsz * cfg.updates_per_episode, rng, metrics);
  }
  metrics.episodes = episodes_done;

  PolicyHandle handle{q, layout, cfg,
                      cfg.behavior_reg ? PolicyMode::kSoftQ : PolicyMode::kHardQ};
  save_policy(out_ckpt, handle,
              json{{"seed", seed}, {"scenario", scn.name}, {"metrics", metrics.to_json()}});
  return metrics;
}

SolveMetrics train_policy_gtr(dyn::DynamicsModel& dynamics, vq::VqVae& tokenizer,
                              const std::vector<const data::EpisodeStore*>& stores,
                              const SolverConfig& cfg, const model::ModelLayout& layout,
                              uint64_t seed, const std::filesystem::path& out_ckpt) {
  check_config(cfg);
  int total_eps = 0;
  for (const auto* s : stores) total_eps += s->size();
  if (total_eps == 0) throw DomainError("ground-truth-reward training needs episodes");
  std::string names;
  for (const auto* s : stores) {
    if (!layout.fits(s->scenario())) throw ConfigError("scenario exceeds the solver layout");
    names += (names.empty() ? "" : ",") + s->scenario().name;
  }
  if (dynamics->layout() != layout)
    throw ConfigError("solver layout must match the dynamics model");
  model::init_torch(mix_seed(seed, kSolverSalt));
  std::mt19937_64 rng(mix_seed(seed, 5));

  const int n = layout.n_max;
  QNet q(layout.obs_dim(), n, layout.a_max());
  QNet q_tgt(layout.obs_dim(), n, layout.a_max());
  copy_params(q, q_tgt);
  torch::optim::Adam opt(q->parameters(), torch::optim::AdamOptions(cfg.lr));

  ReplayBuffer buffer(cfg.buffer_capacity, n);
  SolveMetrics metrics;
  {
    torch::NoGradGuard ng;
    dynamics->eval();
    double total_return = 0.0;
    for (const auto* sp : stores) {
      const data::EpisodeStore& store = *sp;
      const env::Scenario& scn = store.scenario();
      const auto tensors = dyn::episode_tensors(store, layout, &tokenizer, true);
      for (int e = 0; e < store.size(); ++e) {
        const data::Trajectory& ep = store.episode(e);
        const dyn::EpisodeTensors& et = tensors[e];
        dyn::SequenceContext ctx(dynamics, et.desc.unsqueeze(0));
        std::vector<Tensor> qrefs(et.T);
        for (int t = 0; t < et.T; ++t) {
          Tensor logits = ctx.step_begin(et.zbar.narrow(0, t, 1), et.state.narrow(0, t, 1),
                                         et.obs.narrow(0, t, 1));
          qrefs[t] = dyn::masked_softmax(logits[0], et.avail[t]).contiguous();
          ctx.step_end(et.actions.narrow(0, t, 1));
        }
        const auto gt = reward::split_ground_truth(ep, scn);
        buffer.push_episode(stored_transitions(ep, et, qrefs, gt, scn.n_allies()));
        for (const auto& step : gt)
          for (float r : step) total_return += r;
      }
    }
    metrics.mean_imagined_return = total_return / total_eps;
  }

  fit_q(q, q_tgt, opt, buffer, cfg, cfg.episodes * cfg.updates_per_episode, rng, metrics);
  metrics.episodes = total_eps;

  PolicyHandle handle{q, layout, cfg,
                      cfg.behavior_reg ? PolicyMode::kSoftQ : PolicyMode::kHardQ};
  save_policy(out_ckpt, handle,
              json{{"seed", seed}, {"scenario", names}, {"metrics", metrics.to_json()}});
  return metrics;
}

SolveMetrics bc_baseline(const std::vector<const data::EpisodeStore*>& stores, const BcConfig& cfg,
                         const model::ModelLayout& layout, uint64_t seed,
                         const std::filesystem::path& out_ckpt) {
  if (cfg.steps < 1 || cfg.batch < 1) throw ConfigError("cloning steps and batch must be positive");
  int total_eps = 0;
  std::string names;
  for (const auto* s : stores) {
    if (!layout.fits(s->scenario())) throw ConfigError("scenario exceeds the solver layout");
    total_eps += s->size();
    names += (names.empty() ? "" : ",") + s->scenario().name;
  }
  if (total_eps == 0) throw DomainError("behavior cloning needs episodes");
  model::init_torch(mix_seed(seed, kSolverSalt));
  std::mt19937_64 rng(mix_seed(seed, 6));

  const int n = layout.n_max;
  std::vector<std::vector<dyn::EpisodeTensors>> tensors;
  for (const auto* s : stores) tensors.push_back(dyn::episode_tensors(*s, layout, nullptr, false));
  int64_t total = 0;
  for (size_t k = 0; k < stores.size(); ++k) {
    const data::EpisodeStore& store = *stores[k];
    for (int e = 0; e < store.size(); ++e) {
      const data::Trajectory& ep = store.episode(e);
      for (int t = 0; t < tensors[k][e].T; ++t)
        for (int i = 0; i < store.scenario().n_allies(); ++i)
          if (!ep.done[t][i]) ++total;
    }
  }
  if (total == 0) throw DomainError("behavior cloning needs live-agent steps");

  Tensor obs = torch::zeros({total, layout.obs_dim()});
  Tensor ids = torch::zeros({total, n});
  Tensor acts = torch::zeros({total}, torch::kLong);
  Tensor avail = torch::zeros({total, layout.a_max()});
  int64_t row = 0;
  for (size_t k = 0; k < stores.size(); ++k) {
    const data::EpisodeStore& store = *stores[k];
    for (int e = 0; e < store.size(); ++e) {
      const data::Trajectory& ep = store.episode(e);
      const dyn::EpisodeTensors& et = tensors[k][e];
      for (int t = 0; t < et.T; ++t)
        for (int i = 0; i < store.scenario().n_allies(); ++i) {
          if (ep.done[t][i]) continue;
          obs[row] = et.obs[t][i];
          ids[row][i] = 1.0f;
          acts[row] = ep.actions[t][i];
          avail[row] = et.avail[t][i];
          ++row;
        }
    }
  }

  QNet net(layout.obs_dim(), n, layout.a_max());
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.lr));
  SolveMetrics metrics;
  std::uniform_int_distribution<int64_t> pick(0, total - 1);
  const int64_t bsz = std::min<int64_t>(cfg.batch, total);
  for (int s = 0; s < cfg.steps; ++s) {
    Tensor sel = torch::empty({bsz}, torch::kLong);
    auto sel_a = sel.accessor<int64_t, 1>();
    for (int64_t b = 0; b < bsz; ++b) sel_a[b] = pick(rng);
    Tensor logits = net->forward(obs.index_select(0, sel), ids.index_select(0, sel));
    Tensor logp = torch::log_softmax(logits, -1);
    Tensor loss = -logp.gather(1, acts.index_select(0, sel).unsqueeze(1)).mean();
    opt.zero_grad();
    loss.backward();
    opt.step();
    metrics.final_loss = loss.item<double>();
    if (!std::isfinite(metrics.final_loss)) throw DomainError("cloning loss diverged");
    ++metrics.updates;
  }
  {
    torch::NoGradGuard ng;
    Tensor logits = net->forward(obs, ids).masked_fill(avail < 0.5f, kMaskFill);
    metrics.bc_accuracy = (logits.argmax(-1) == acts).to(torch::kFloat).mean().item<double>();
  }
  metrics.episodes = total_eps;

  PolicyHandle handle{net, layout, SolverConfig{}, PolicyMode::kBc};
  save_policy(out_ckpt, handle,
              json{{"seed", seed},
                   {"scenario", names},
                   {"bc_config", cfg.to_json()},
                   {"metrics", metrics.to_json()}});
  return metrics;
}

EvalResult evaluate(PolicyHandle& policy, dyn::DynamicsModel* dynamics, vq::VqVae* tokenizer,
                    const env::Scenario& scn, const vision::TaskDescription& task, int episodes,
                    uint64_t seed) {
  if (episodes <= 0) throw DomainError("evaluate needs a positive episode count");
  const model::ModelLayout& layout = policy.layout;
  if (!layout.fits(scn)) throw ConfigError("scenario exceeds the policy layout");
  const bool needs_ref = policy.mode == PolicyMode::kSoftQ;
  if (needs_ref && policy.cfg.alpha <= 0.0) throw ConfigError("alpha must be positive");
  if (needs_ref && (dynamics == nullptr || tokenizer == nullptr))
    throw ConfigError("soft-q evaluation needs the dynamics model and tokenizer");
  if (needs_ref && (*dynamics)->layout() != layout)
    throw ConfigError("policy layout must match the dynamics model");

  torch::NoGradGuard ng;
  policy.q->eval();
  if (needs_ref) (*dynamics)->eval();
  const int n = layout.n_max;
  const int a_max = layout.a_max();
  Tensor ids = torch::eye(n);
  const auto dvec = vision::encode_description(task);
  const std::vector<float> desc_row(dvec.begin(), dvec.end());

  env::BattleEnv env(scn);
  std::mt19937_64 rng(mix_seed(seed, 7));
  int wins = 0;
  std::vector<double> returns;
  returns.reserve(episodes);
  for (int e = 0; e < episodes; ++e) {
    auto rr = env.reset(rng());
    env::EnvState st = rr.state;
    double ret = 0.0;
    bool won = false;
    std::optional<dyn::SequenceContext> ctx;
    if (needs_ref) ctx.emplace(*dynamics, row_tensor(desc_row).unsqueeze(0));

    for (int t = 0; t < scn.max_steps; ++t) {
      Tensor obs = torch::zeros({n, layout.obs_dim()});
      Tensor mask = torch::zeros({n, a_max});
      std::vector<std::vector<uint8_t>> masks(n);
      auto mask_a = mask.accessor<float, 2>();
      for (int i = 0; i < n; ++i) {
        if (i < scn.n_allies()) {
          const auto padded = model::pad_obs(scn, layout, env.observe(st, i), i);
          std::memcpy(obs[i].data_ptr<float>(), padded.data(), sizeof(float) * padded.size());
          masks[i] = model::pad_mask(scn, layout, env.available_actions(st, i).mask);
        } else {
          masks[i].assign(a_max, 0);
          masks[i][env::kActionNoop] = 1;
        }
        for (int a = 0; a < a_max; ++a) mask_a[i][a] = masks[i][a] ? 1.0f : 0.0f;
      }

      Tensor qv = policy.q->forward(obs, ids);
      Tensor pickt;
      if (needs_ref) {
        std::vector<float> padded_state = model::pad_state(scn, layout, env.state_vector(st));
        patch_terrain(padded_state, layout, task.terrain_id);
        Tensor frame = vq::frame_to_tensor(vision::augment(scn, st, task.terrain_id)).unsqueeze(0);
        Tensor zbar = vq::pooled_embedding_batch(*tokenizer, frame);
        Tensor logits = ctx->step_begin(zbar, row_tensor(padded_state).unsqueeze(0),
                                        obs.unsqueeze(0));
        Tensor qref = dyn::masked_softmax(logits[0], mask);
        pickt = (torch::log(qref) + qv / policy.cfg.alpha).argmax(-1);
      } else {
        pickt = qv.masked_fill(mask < 0.5f, kMaskFill).argmax(-1);
      }
      pickt = pickt.contiguous();
      auto pick_a = pickt.accessor<int64_t, 1>();

      std::vector<int> acts(scn.n_allies(), env::kActionNoop);
      Tensor step_actions = torch::zeros({1, n}, torch::kLong);
      for (int i = 0; i < n; ++i) {
        const int a = i < scn.n_allies() ? static_cast<int>(pick_a[i]) : env::kActionNoop;
        if (!masks[i][a]) throw ContractViolation("greedy action is unavailable");
        if (i < scn.n_allies()) acts[i] = a;
        step_actions[0][i] = a;
      }
      if (needs_ref) ctx->step_end(step_actions);

      const auto sr = env.step(st, acts);
      ret += sr.global_reward;
      st = sr.state;
      if (sr.terminated) {
        won = sr.won;
        break;
      }
    }
    wins += won ? 1 : 0;
    returns.push_back(ret);
  }

  EvalResult out;
  out.episodes = episodes;
  out.win_rate = static_cast<double>(wins) / episodes;
  double mean = 0.0;
  for (double r : returns) mean += r;
  mean /= episodes;
  double var = 0.0;
  for (double r : returns) var += (r - mean) * (r - mean);
  out.mean_return = mean;
  out.std_return = std::sqrt(var / episodes);
  return out;
}

}  // namespace lbi::solver
