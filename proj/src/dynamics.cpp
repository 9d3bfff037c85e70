#include "lbi/dynamics.hpp"

#include "lbi/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace lbi::dyn {

using torch::Tensor;

namespace {
constexpr float kMaskFill = -1e9f;
constexpr int kObsHeadHidden = 256;
}  // namespace

json DynamicsConfig::to_json() const {
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
              {"window", window},
              {"residual", residual},
              {"image_ref", image_ref}};
}

DynamicsConfig DynamicsConfig::from_json(const json& j) {
  DynamicsConfig c;
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
  c.window = j.value("window", c.window);
  c.residual = j.value("residual", c.residual);
  c.image_ref = j.value("image_ref", c.image_ref);
  return c;
}

json DynMetrics::to_json() const {
  return json{{"final_loss", final_loss},
              {"val_state_mse", val_state_mse},
              {"val_action_ce", val_action_ce},
              {"val_obs_mse", val_obs_mse}};
}

namespace {

enum SlotType { kSlotDesc = 0, kSlotImage = 1, kSlotState = 2, kSlotObs = 3, kSlotAction = 4 };

}  // namespace

// --- model ------------------------------------------------------------------

DynamicsModelImpl::DynamicsModelImpl(DynamicsConfig cfg, model::ModelLayout layout, int latent_dim)
    : cfg_(cfg), layout_(layout), latent_dim_(latent_dim) {
  if (cfg_.embed_dim % cfg_.heads != 0)
    throw ConfigError("embed_dim must be divisible by heads");
  const int E = cfg_.embed_dim;
  desc_in_ = register_module("desc_in", torch::nn::Linear(vision::kDescriptorDim, E));
  z_in_ = register_module("z_in", torch::nn::Linear(latent_dim_, E));
  s_in_ = register_module("s_in", torch::nn::Linear(layout_.state_dim(), E));
  o_in_ = register_module("o_in", torch::nn::Linear(layout_.obs_dim(), E));
  u_in_ = register_module("u_in", torch::nn::Embedding(layout_.a_max(), E));
  type_embed_ = register_module("type_embed", torch::nn::Embedding(5, E));
  agent_embed_ = register_module("agent_embed", torch::nn::Embedding(layout_.n_max, E));
  time_embed_ = register_module("time_embed", torch::nn::Embedding(kMaxContext, E));
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int l = 0; l < cfg_.layers; ++l) blocks_->push_back(model::TransformerBlock(E, cfg_.heads));
  final_ln_ = register_module("final_ln",
                              torch::nn::LayerNorm(torch::nn::LayerNormOptions({E})));
  action_head_ = register_module("action_head", torch::nn::Linear(E, layout_.a_max()));
  state_head_ = register_module("state_head", torch::nn::Linear(E, layout_.state_dim()));
  z_head_ = register_module("z_head", torch::nn::Linear(E, latent_dim_));
  obs_head_ = register_module(
      "obs_head",
      torch::nn::Sequential(torch::nn::Linear(layout_.state_dim(), kObsHeadHidden),
                            torch::nn::GELU(),
                            torch::nn::Linear(kObsHeadHidden,
                                              layout_.n_max * layout_.obs_dim())));
}

int DynamicsModelImpl::slots_per_step() const {
  return (cfg_.image_ref ? 3 : 2) + 2 * layout_.n_max;
}

Tensor DynamicsModelImpl::embed_obs_group(Tensor desc, Tensor zbar, Tensor state, Tensor obs,
                                          Tensor t) {
  const int n = layout_.n_max;
  std::vector<Tensor> slots;
  slots.push_back(desc_in_(desc).unsqueeze(1) + type_embed_->weight[kSlotDesc]);
  if (cfg_.image_ref)
    slots.push_back(z_in_(zbar).unsqueeze(1) + type_embed_->weight[kSlotImage]);
  slots.push_back(s_in_(state).unsqueeze(1) + type_embed_->weight[kSlotState]);
  Tensor agents = agent_embed_(torch::arange(n)).unsqueeze(0);  // [1,n,E]
  slots.push_back(o_in_(obs) + type_embed_->weight[kSlotObs] + agents);
  Tensor x = torch::cat(slots, 1);
  return x + time_embed_(t).unsqueeze(1);
}

Tensor DynamicsModelImpl::embed_action_group(Tensor actions, Tensor t) {
  const int n = layout_.n_max;
  Tensor agents = agent_embed_(torch::arange(n)).unsqueeze(0);
  Tensor x = u_in_(actions) + type_embed_->weight[kSlotAction] + agents;
  return x + time_embed_(t).unsqueeze(1);
}

Tensor DynamicsModelImpl::obs_from_state(Tensor state) {
  Tensor flat = obs_head_->forward(state.clamp(0.0, 1.0));
  auto shape = state.sizes().vec();
  shape.pop_back();
  shape.push_back(layout_.n_max);
  shape.push_back(layout_.obs_dim());
  return flat.reshape(shape);
}

Predictions DynamicsModelImpl::forward(const SequenceBatch& batch) {
  const auto B = batch.state.size(0);
  const auto W = batch.state.size(1) - 1;
  const int n = layout_.n_max;
  const int spp = slots_per_step();
  const int obs_off = cfg_.image_ref ? 3 : 2;  // first o slot within a step group

  std::vector<Tensor> groups;
  groups.reserve(2 * W);
  for (int64_t k = 0; k < W; ++k) {
    // Slots past an episode's end are masked from the loss; clamping keeps
    // their time ids inside the table when a coverage window overhangs.
    Tensor t = torch::clamp_max(batch.t0 + k, kMaxContext - 1);
    Tensor zb = cfg_.image_ref ? batch.zbar.select(1, k) : Tensor();
    groups.push_back(embed_obs_group(batch.desc, zb, batch.state.select(1, k),
                                     batch.obs.select(1, k), t));
    groups.push_back(embed_action_group(batch.actions.select(1, k), t));
  }
  Tensor x = torch::cat(groups, 1);  // [B, W*spp, E]
  for (auto& block : *blocks_) x = block->as<model::TransformerBlockImpl>()->forward(x, {}, /*causal=*/true);
  x = final_ln_(x);

  // Output positions: action logits at the o^i slots, state/zbar at u^n.
  Tensor step_base = torch::arange(W, torch::kLong) * spp;
  Tensor o_pos = (step_base.unsqueeze(1) + obs_off + torch::arange(n, torch::kLong).unsqueeze(0))
                     .reshape(-1);
  Tensor un_pos = step_base + (spp - 1);

  Predictions out;
  out.action_logits =
      action_head_(x.index_select(1, o_pos)).reshape({B, W, n, layout_.a_max()});
  Tensor un = x.index_select(1, un_pos);
  out.state_out = state_head_(un);
  out.zbar_out = cfg_.image_ref ? z_head_(un) : Tensor();
  out.obs_pred = obs_from_state(batch.state.narrow(1, 0, W).reshape({B * W, -1}))
                     .reshape({B, W, n, layout_.obs_dim()});
  return out;
}

// --- incremental context ------------------------------------------------------

SequenceContext::SequenceContext(DynamicsModel model, Tensor desc)
    : model_(std::move(model)), desc_(std::move(desc)) {
  k_cache_.resize(model_->config().layers);
  v_cache_.resize(model_->config().layers);
}

Tensor SequenceContext::run_blocks(Tensor x) {
  auto& blocks = *model_->blocks_;
  for (size_t l = 0; l < blocks.size(); ++l)
    x = blocks[l]->as<model::TransformerBlockImpl>()->forward_cached(x, k_cache_[l],
                                                                     v_cache_[l]);
  return model_->final_ln_(x);
}

Tensor SequenceContext::step_begin(Tensor zbar, Tensor state, Tensor obs) {
  if (awaiting_actions_) throw ContractViolation("step_end must follow step_begin");
  if (t_ >= kMaxContext) throw ContractViolation("sequence context exceeded T_max");
  const int n = model_->layout().n_max;
  Tensor t = torch::full({desc_.size(0)}, t_, torch::kLong);
  Tensor x = model_->embed_obs_group(desc_, zbar, state, obs, t);
  Tensor h = run_blocks(x);
  awaiting_actions_ = true;
  return model_->action_head_(h.narrow(1, h.size(1) - n, n));
}

std::pair<Tensor, Tensor> SequenceContext::step_end(Tensor actions) {
  if (!awaiting_actions_) throw ContractViolation("step_begin must precede step_end");
  Tensor t = torch::full({desc_.size(0)}, t_, torch::kLong);
  Tensor x = model_->embed_action_group(actions, t);
  Tensor h = run_blocks(x);
  Tensor un = h.select(1, h.size(1) - 1);
  awaiting_actions_ = false;
  ++t_;
  return {model_->state_head_(un),
          model_->config().image_ref ? model_->z_head_(un) : Tensor()};
}

Tensor masked_softmax(Tensor logits, Tensor avail) {
  return torch::softmax(logits + (1.0 - avail) * kMaskFill, -1);
}

// --- data assembly ------------------------------------------------------------

int augmented_terrain(const env::Scenario& scn, int index, bool augment) {
  return augment ? (scn.terrain_id + index % env::kNumTerrains) % env::kNumTerrains
                 : scn.terrain_id;
}

namespace {

void patch_terrain(std::vector<float>& padded, const model::ModelLayout& L, int terrain) {
  const int base = env::kStateBlock * L.units();
  for (int k = 0; k < env::kNumTerrains; ++k) padded[base + k] = 0.0f;
  padded[base + terrain] = 1.0f;
}

Tensor row_tensor(const std::vector<float>& v) {
  return torch::from_blob(const_cast<float*>(v.data()), {static_cast<int64_t>(v.size())})
      .clone();
}

}  // namespace

std::vector<EpisodeTensors> episode_tensors(const data::EpisodeStore& store,
                                            const model::ModelLayout& layout, vq::VqVae* tokenizer,
                                            bool augment_terrain) {
  torch::NoGradGuard ng;
  const env::Scenario& scn = store.scenario();
  if (!layout.fits(scn)) throw ContractViolation("scenario exceeds model layout");
  const int n = layout.n_max;
  const int a_max = layout.a_max();

  std::vector<EpisodeTensors> out;
  out.reserve(store.size());
  for (int e = 0; e < store.size(); ++e) {
    const data::Trajectory& ep = store.episode(e);
    const int T = ep.T();
    const int terrain = augmented_terrain(scn, e, augment_terrain);
    EpisodeTensors et;
    et.T = T;

    et.state = torch::zeros({T + 1, layout.state_dim()});
    for (int t = 0; t <= T; ++t) {
      std::vector<float> padded = model::pad_state(scn, layout, ep.states[t]);
      patch_terrain(padded, layout, terrain);
      et.state[t] = row_tensor(padded);
    }

    et.obs = torch::zeros({T, n, layout.obs_dim()});
    et.avail = torch::zeros({T, n, a_max});
    et.actions = torch::zeros({T, n}, torch::kLong);
    for (int t = 0; t < T; ++t) {
      for (int i = 0; i < scn.n_allies(); ++i) {
        et.obs[t][i] = row_tensor(model::pad_obs(scn, layout, ep.obs[t][i], i));
        const auto mask = model::pad_mask(scn, layout, ep.avail[t][i]);
        for (int a = 0; a < a_max; ++a) et.avail[t][i][a] = mask[a];
        et.actions[t][i] = ep.actions[t][i];
      }
      for (int i = scn.n_allies(); i < n; ++i) et.avail[t][i][env::kActionNoop] = 1.0f;
    }

    vision::TaskDescription desc = store.description(e);
    desc.terrain_id = terrain;
    const auto dvec = vision::encode_description(desc);
    et.desc = torch::from_blob(const_cast<float*>(dvec.data()), {vision::kDescriptorDim}).clone();

    if (tokenizer) {
      Tensor frames = torch::empty({T + 1, 3, vision::kFrameH, vision::kFrameW});
      for (int t = 0; t <= T; ++t) {
        env::EnvState st = vision::state_from_vector(scn, ep.states[t]);
        frames[t] = vq::frame_to_tensor(vision::augment(scn, st, terrain));
      }
      et.zbar = vq::pooled_embedding_batch(*tokenizer, frames);
    }
    out.push_back(std::move(et));
  }
  return out;
}

// --- training -------------------------------------------------------------------

namespace {

struct WindowSource {
  const std::vector<EpisodeTensors>* episodes;
  std::vector<int> index;  // flattened across stores
};

SequenceBatch assemble_windows(const std::vector<const EpisodeTensors*>& eps,
                               const std::vector<int>& t0s, const DynamicsConfig& cfg,
                               const model::ModelLayout& layout, int latent_dim) {
  const int B = static_cast<int>(eps.size());
  const int W = cfg.window;
  SequenceBatch b;
  b.desc = torch::zeros({B, vision::kDescriptorDim});
  b.zbar = torch::zeros({B, W + 1, latent_dim});
  b.state = torch::zeros({B, W + 1, layout.state_dim()});
  b.obs = torch::zeros({B, W, layout.n_max, layout.obs_dim()});
  b.actions = torch::zeros({B, W, layout.n_max}, torch::kLong);
  b.avail = torch::zeros({B, W, layout.n_max, layout.a_max()});
  b.avail.select(-1, env::kActionNoop).fill_(1.0f);  // padded rows stay valid rows
  b.t0 = torch::zeros({B}, torch::kLong);
  b.valid = torch::zeros({B, W});
  for (int i = 0; i < B; ++i) {
    const EpisodeTensors& ep = *eps[i];
    const int t0 = t0s[i];
    const int len = std::min(W, ep.T - t0);
    b.desc[i] = ep.desc;
    b.state[i].narrow(0, 0, len + 1) = ep.state.narrow(0, t0, len + 1);
    if (ep.zbar.defined()) b.zbar[i].narrow(0, 0, len + 1) = ep.zbar.narrow(0, t0, len + 1);
    b.obs[i].narrow(0, 0, len) = ep.obs.narrow(0, t0, len);
    b.actions[i].narrow(0, 0, len) = ep.actions.narrow(0, t0, len);
    b.avail[i].narrow(0, 0, len) = ep.avail.narrow(0, t0, len);
    b.t0[i] = t0;
    b.valid[i].narrow(0, 0, len).fill_(1.0f);
  }
  return b;
}

struct LossParts {
  Tensor total, ce, state_mse, z_mse, obs_mse;
};

LossParts sequence_loss(DynamicsModel& model, const SequenceBatch& b) {
  const DynamicsConfig& cfg = model->config();
  const auto W = b.state.size(1) - 1;
  Predictions pred = model->forward(b);

  Tensor logp = torch::log_softmax(pred.action_logits + (1.0 - b.avail) * kMaskFill, -1);
  Tensor nll = -logp.gather(-1, b.actions.unsqueeze(-1)).squeeze(-1);  // [B,W,n]
  Tensor steps = b.valid.sum().clamp_min(1.0);
  LossParts parts;
  parts.ce = (nll * b.valid.unsqueeze(-1)).sum() / (steps * nll.size(2));

  Tensor s_tgt = cfg.residual ? b.state.narrow(1, 1, W) - b.state.narrow(1, 0, W)
                              : b.state.narrow(1, 1, W);
  parts.state_mse = ((pred.state_out - s_tgt).pow(2) * b.valid.unsqueeze(-1)).sum() /
                    (steps * s_tgt.size(2));

  parts.obs_mse = ((pred.obs_pred - b.obs).pow(2) * b.valid.unsqueeze(-1).unsqueeze(-1)).sum() /
                  (steps * b.obs.size(2) * b.obs.size(3));

  parts.total = parts.ce + parts.state_mse + parts.obs_mse;
  if (cfg.image_ref) {
    Tensor z_tgt = b.zbar.narrow(1, 1, W) - b.zbar.narrow(1, 0, W);
    parts.z_mse =
        ((pred.zbar_out - z_tgt).pow(2) * b.valid.unsqueeze(-1)).sum() / (steps * z_tgt.size(2));
    parts.total = parts.total + parts.z_mse;
  }
  return parts;
}

// Deterministic full coverage of a store with stride-W windows.
std::vector<std::pair<int, int>> coverage_windows(const std::vector<EpisodeTensors>& eps, int W) {
  std::vector<std::pair<int, int>> out;
  for (size_t e = 0; e < eps.size(); ++e)
    for (int t0 = 0; t0 < std::max(1, eps[e].T); t0 += W)
      if (eps[e].T > 0) out.emplace_back(static_cast<int>(e), t0);
  return out;
}

DynMetrics validate(DynamicsModel& model, const std::vector<EpisodeTensors>& val,
                    const DynamicsConfig& cfg, const model::ModelLayout& layout, int latent_dim) {
  torch::NoGradGuard ng;
  model->eval();
  DynMetrics m;
  const auto windows = coverage_windows(val, cfg.window);
  double ce = 0, smse = 0, omse = 0;
  int count = 0;
  for (size_t at = 0; at < windows.size(); at += cfg.batch) {
    std::vector<const EpisodeTensors*> eps;
    std::vector<int> t0s;
    for (size_t i = at; i < std::min(windows.size(), at + cfg.batch); ++i) {
      eps.push_back(&val[windows[i].first]);
      t0s.push_back(windows[i].second);
    }
    SequenceBatch b = assemble_windows(eps, t0s, cfg, layout, latent_dim);
    LossParts parts = sequence_loss(model, b);
    const int k = static_cast<int>(eps.size());
    ce += parts.ce.item<double>() * k;
    smse += parts.state_mse.item<double>() * k;
    omse += parts.obs_mse.item<double>() * k;
    count += k;
  }
  m.val_action_ce = ce / std::max(1, count);
  m.val_state_mse = smse / std::max(1, count);
  m.val_obs_mse = omse / std::max(1, count);
  model->train();
  return m;
}

}  // namespace

DynMetrics train_dynamics(const std::vector<const data::EpisodeStore*>& train,
                          const std::vector<const data::EpisodeStore*>& val, vq::VqVae& tokenizer,
                          const DynamicsConfig& cfg, const model::ModelLayout& layout,
                          uint64_t seed, const std::filesystem::path& out_ckpt,
                          bool augment_terrain) {
  if (train.empty()) throw ConfigError("dynamics training needs at least one store");
  if (cfg.window < 1 || cfg.window > kMaxContext)
    throw ConfigError("window must lie in [1, T_max]");
  model::init_torch(mix_seed(seed, 0xD1CE));

  std::vector<EpisodeTensors> train_eps, val_eps;
  for (const auto* s : train) {
    auto eps = episode_tensors(*s, layout, cfg.image_ref ? &tokenizer : nullptr, augment_terrain);
    std::move(eps.begin(), eps.end(), std::back_inserter(train_eps));
  }
  for (const auto* s : val) {
    auto eps = episode_tensors(*s, layout, cfg.image_ref ? &tokenizer : nullptr, augment_terrain);
    std::move(eps.begin(), eps.end(), std::back_inserter(val_eps));
  }
  if (train_eps.empty()) throw ConfigError("dynamics training stores contain no episodes");
  const int latent = tokenizer->config().latent_dim;

  DynamicsModel model(cfg, layout, latent);
  torch::optim::AdamW opt(model->parameters(), torch::optim::AdamWOptions(cfg.lr)
                                                   .betas({cfg.beta1, cfg.beta2})
                                                   .weight_decay(cfg.weight_decay));
  std::mt19937_64 rng(mix_seed(seed, 3));
  std::uniform_int_distribution<size_t> pick_ep(0, train_eps.size() - 1);

  DynMetrics metrics;
  for (int step = 0; step < cfg.steps; ++step) {
    const double cos_lr =
        cfg.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / cfg.steps));
    for (auto& group : opt.param_groups())
      static_cast<torch::optim::AdamWOptions&>(group.options()).lr(cos_lr);

    std::vector<const EpisodeTensors*> eps;
    std::vector<int> t0s;
    for (int b = 0; b < cfg.batch; ++b) {
      const EpisodeTensors& ep = train_eps[pick_ep(rng)];
      const int hi = std::max(0, ep.T - cfg.window);
      eps.push_back(&ep);
      t0s.push_back(hi == 0 ? 0 : static_cast<int>(rng() % (hi + 1)));
    }
    SequenceBatch batch = assemble_windows(eps, t0s, cfg, layout, latent);
    LossParts parts = sequence_loss(model, batch);
    const double loss_val = parts.total.item<double>();
    if (!std::isfinite(loss_val))
      throw DomainError("dynamics loss diverged at step " + std::to_string(step));
    opt.zero_grad();
    parts.total.backward();
    torch::nn::utils::clip_grad_norm_(model->parameters(), cfg.grad_clip);
    opt.step();
    metrics.final_loss = loss_val;
  }

  if (!val_eps.empty()) {
    DynMetrics v = validate(model, val_eps, cfg, layout, latent);
    metrics.val_state_mse = v.val_state_mse;
    metrics.val_action_ce = v.val_action_ce;
    metrics.val_obs_mse = v.val_obs_mse;
  }

  json meta{{"kind", "dynamics"},
            {"config", cfg.to_json()},
            {"layout", layout.to_json()},
            {"latent_dim", latent},
            {"seed", seed},
            {"metrics", metrics.to_json()}};
  meta["config_hash"] = model::config_hash(
      json{{"kind", "dynamics"}, {"config", cfg.to_json()}, {"layout", layout.to_json()}, {"seed", seed}});
  model::save_checkpoint(out_ckpt, *model, meta);
  return metrics;
}

DynamicsModel load_dynamics(const std::filesystem::path& ckpt) {
  const json meta = model::load_checkpoint_meta(ckpt);
  if (meta.at("kind").get<std::string>() != "dynamics")
    throw ConfigError("'" + ckpt.string() + "' is not a dynamics checkpoint");
  DynamicsModel model(DynamicsConfig::from_json(meta.at("config")),
                      model::ModelLayout::from_json(meta.at("layout")),
                      meta.at("latent_dim").get<int>());
  model::load_checkpoint_into(ckpt, *model);
  model->eval();
  return model;
}

// --- rollout -------------------------------------------------------------------

std::vector<SimEpisode> rollout(DynamicsModel& model, const env::Scenario& scn,
                                const std::vector<RolloutStart>& starts,
                                const RolloutPolicy& policy, int horizon,
                                vq::VqVae* gt_image_tokenizer) {
  if (horizon < 0 || horizon > kMaxContext)
    throw ContractViolation("rollout horizon must lie in [0, T_max]");
  torch::NoGradGuard ng;
  const bool was_training = model->is_training();
  model->eval();
  const model::ModelLayout& L = model->layout();
  if (!L.fits(scn)) throw ContractViolation("scenario exceeds model layout");
  const int n = L.n_max;
  const int units = L.units();
  const int B = static_cast<int>(starts.size());
  const int S = L.state_dim();
  const int latent = model->latent_dim();

  Tensor state = torch::zeros({B, S});
  Tensor zbar = torch::zeros({B, latent});
  Tensor desc = torch::zeros({B, vision::kDescriptorDim});
  for (int b = 0; b < B; ++b) {
    state[b] = row_tensor(starts[b].state);
    if (!starts[b].zbar.empty()) zbar[b] = row_tensor(starts[b].zbar);
    desc[b] = row_tensor(starts[b].desc);
  }

  std::vector<std::vector<uint8_t>> alive(B, std::vector<uint8_t>(units, 0));
  for (int b = 0; b < B; ++b)
    for (int u = 0; u < units; ++u)
      alive[b][u] = starts[b].state[model::layout_alive_index(u)] >= 0.5f ? 1 : 0;

  std::vector<bool> is_healer(n, false);
  for (int i = 0; i < scn.n_allies(); ++i)
    is_healer[i] = scn.ally_units[i].unit_type == env::UnitType::kHealer;

  auto side_dead = [&](const std::vector<uint8_t>& a, bool enemy) {
    const int lo = enemy ? L.n_max : 0;
    const int count = enemy ? scn.n_enemies() : scn.n_allies();
    for (int u = lo; u < lo + count; ++u)
      if (a[u]) return false;
    return true;
  };

  std::vector<SimEpisode> out(B);
  std::vector<bool> done(B, false);
  for (int b = 0; b < B; ++b) {
    out[b].states.push_back(starts[b].state);
    out[b].zbars.push_back(std::vector<float>(latent, 0.0f));
    if (!starts[b].zbar.empty()) out[b].zbars[0] = starts[b].zbar;
    out[b].alive.push_back(alive[b]);
    done[b] = side_dead(alive[b], false) || side_dead(alive[b], true);
  }

  SequenceContext ctx(model, desc);
  for (int t = 0; t < horizon; ++t) {
    if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;

    Tensor obs = model->obs_from_state(state);  // [B,n,O], clamped inside
    // Terminated agents observe nothing and may only no-op.
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < n; ++i)
        if (!alive[b][i]) obs[b][i].zero_();

    Tensor logits = ctx.step_begin(zbar, state, obs);

    Tensor actions = torch::zeros({B, n}, torch::kLong);
    std::vector<std::vector<std::vector<uint8_t>>> step_masks(B);
    std::vector<std::vector<std::vector<float>>> step_qref(B);
    for (int b = 0; b < B; ++b) {
      std::vector<std::vector<uint8_t>> masks(n);
      for (int i = 0; i < n; ++i) masks[i] = model::rollout_mask(L, alive[b], i, is_healer[i]);
      step_masks[b] = masks;
      if (done[b]) continue;  // frozen episodes feed no-ops to stay in lockstep
      Tensor mask_row = torch::zeros({n, L.a_max()});
      for (int i = 0; i < n; ++i)
        for (int a = 0; a < L.a_max(); ++a) mask_row[i][a] = static_cast<float>(masks[i][a]);
      Tensor qref = masked_softmax(logits[b], mask_row).contiguous();
      std::vector<std::vector<float>> qref_rows(n, std::vector<float>(L.a_max()));
      std::vector<std::vector<float>> obs_rows(n, std::vector<float>(L.obs_dim()));
      for (int i = 0; i < n; ++i) {
        Tensor row = obs[b][i].contiguous();
        std::memcpy(obs_rows[i].data(), row.data_ptr<float>(), sizeof(float) * L.obs_dim());
        std::memcpy(qref_rows[i].data(), qref[i].data_ptr<float>(),
                    sizeof(float) * L.a_max());
      }
      step_qref[b] = std::move(qref_rows);
      std::vector<int> acts = policy(b, out[b].states.back(), obs_rows, step_masks[b],
                                     step_qref[b]);
      if (static_cast<int>(acts.size()) != n)
        throw ContractViolation("policy returned wrong number of actions");
      for (int i = 0; i < n; ++i) {
        if (acts[i] < 0 || acts[i] >= L.a_max() || !masks[i][acts[i]])
          throw ContractViolation("policy chose an unavailable action");
        actions[b][i] = acts[i];
      }
    }

    auto [ds, dz] = ctx.step_end(actions);
    Tensor next_state = model->config().residual ? state + ds : ds;
    Tensor next_zbar = zbar;
    if (model->config().image_ref) next_zbar = zbar + dz;

    // Termination from predicted health (plus the alive flag); monotone.
    auto ns = next_state.accessor<float, 2>();
    for (int b = 0; b < B; ++b) {
      if (done[b]) continue;
      for (int u = 0; u < units; ++u) {
        if (!alive[b][u]) continue;
        const float health = ns[b][model::layout_health_index(u)];
        const float flag = ns[b][model::layout_alive_index(u)];
        if (health < 0.0f || flag < 0.5f) alive[b][u] = 0;
      }
      // Dead units snap to the all-zero encoding used by the training data.
      for (int u = 0; u < units; ++u)
        if (!alive[b][u]) next_state[b].narrow(0, u * env::kStateBlock, env::kStateBlock).zero_();
    }

    if (gt_image_tokenizer) {
      // Ground-truth-image mode: re-render the predicted state each step
      // instead of accumulating pooled-embedding residuals.
      Tensor frames = torch::empty({B, 3, vision::kFrameH, vision::kFrameW});
      for (int b = 0; b < B; ++b) {
        std::vector<float> padded(S);
        Tensor row = next_state[b].clamp(0.0, 1.0).contiguous();
        std::memcpy(padded.data(), row.data_ptr<float>(), sizeof(float) * S);
        const auto unpadded = model::unpad_state(scn, L, padded);
        env::EnvState st = vision::state_from_vector(scn, unpadded);
        frames[b] = vq::frame_to_tensor(vision::render(scn, st));
      }
      next_zbar = vq::pooled_embedding_batch(*gt_image_tokenizer, frames);
    }

    for (int b = 0; b < B; ++b) {
      if (done[b]) continue;
      const auto arow = actions[b];
      SimEpisode& epi = out[b];
      epi.actions.emplace_back();
      epi.obs.emplace_back(n, std::vector<float>(L.obs_dim()));
      for (int i = 0; i < n; ++i) {
        epi.actions.back().push_back(static_cast<int>(arow[i].item<int64_t>()));
        Tensor row = obs[b][i].contiguous();
        std::memcpy(epi.obs.back()[i].data(), row.data_ptr<float>(),
                    sizeof(float) * L.obs_dim());
      }
      epi.avail.push_back(step_masks[b]);
      epi.qref.push_back(step_qref[b]);
      std::vector<float> srow(S), zrow(latent);
      Tensor sc = next_state[b].contiguous();
      std::memcpy(srow.data(), sc.data_ptr<float>(), sizeof(float) * S);
      Tensor zc = next_zbar[b].contiguous();
      std::memcpy(zrow.data(), zc.data_ptr<float>(), sizeof(float) * latent);
      epi.states.push_back(std::move(srow));
      epi.zbars.push_back(std::move(zrow));
      epi.alive.push_back(alive[b]);
      if (side_dead(alive[b], false) || side_dead(alive[b], true)) done[b] = true;
    }

    // Frozen episodes carry their last state forward unchanged.
    for (int b = 0; b < B; ++b)
      if (done[b]) {
        next_state[b] = row_tensor(out[b].states.back());
        next_zbar[b] = row_tensor(out[b].zbars.back());
      }
    state = next_state;
    zbar = next_zbar;
  }

  if (was_training) model->train();
  return out;
}

std::vector<RolloutStart> starts_from_store(const data::EpisodeStore& store,
                                            const model::ModelLayout& layout, vq::VqVae& tokenizer,
                                            const std::vector<int>& episode_indices,
                                            bool augment_terrain) {
  torch::NoGradGuard ng;
  const env::Scenario& scn = store.scenario();
  std::vector<RolloutStart> out;
  out.reserve(episode_indices.size());
  Tensor frames = torch::empty({static_cast<int64_t>(episode_indices.size()), 3, vision::kFrameH,
                                vision::kFrameW});
  for (size_t k = 0; k < episode_indices.size(); ++k) {
    const int e = episode_indices[k];
    const data::Trajectory& ep = store.episode(e);
    const int terrain = augmented_terrain(scn, e, augment_terrain);
    RolloutStart rs;
    rs.state = model::pad_state(scn, layout, ep.states[0]);
    patch_terrain(rs.state, layout, terrain);
    vision::TaskDescription desc = store.description(e);
    desc.terrain_id = terrain;
    const auto dvec = vision::encode_description(desc);
    rs.desc.assign(dvec.begin(), dvec.end());
    env::EnvState st = vision::state_from_vector(scn, ep.states[0]);
    frames[static_cast<int64_t>(k)] = vq::frame_to_tensor(vision::augment(scn, st, terrain));
    out.push_back(std::move(rs));
  }
  Tensor pooled = vq::pooled_embedding_batch(tokenizer, frames);
  for (size_t k = 0; k < out.size(); ++k) {
    Tensor row = pooled[static_cast<int64_t>(k)].contiguous();
    out[k].zbar.assign(row.data_ptr<float>(), row.data_ptr<float>() + row.numel());
  }
  return out;
}

vision::Frame frame_from_zbar(vq::VqVae& tokenizer, const std::vector<float>& zbar) {
  vq::TokenGrid grid;
  grid.fill(vq::nearest_code(tokenizer, zbar));
  return vq::decode_tokens(tokenizer, grid);
}

}  // namespace lbi::dyn
