#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <utility>
#include <vector>

#include "lbi/data.hpp"
#include "lbi/model_common.hpp"
#include "lbi/vqvae.hpp"

namespace lbi::dyn {

inline constexpr int kMaxContext = 40;  // timesteps per sequence

struct DynamicsConfig {
  int layers = 6;
  int heads = 8;
  int embed_dim = 64;
  double grad_clip = 1.0;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double lr = 3e-4;
  int steps = 3000;
  int batch = 16;
  int window = 16;          // timesteps per training window
  bool residual = true;     // predict deltas; false -> absolute next state
  bool image_ref = true;    // include z slots; false drops image conditioning
  json to_json() const;
  static DynamicsConfig from_json(const json& j);
};

// One training batch of windowed sequences, already padded to the layout.
// Slot order per timestep: L, z (when image_ref), s, o^1..o^n, u^1..u^n.
struct SequenceBatch {
  torch::Tensor desc;     // [B, kDescriptorDim]
  torch::Tensor zbar;     // [B, W+1, latent] pooled image embeddings
  torch::Tensor state;    // [B, W+1, S]
  torch::Tensor obs;      // [B, W, n_max, O]
  torch::Tensor actions;  // [B, W, n_max] int64
  torch::Tensor avail;    // [B, W, n_max, a_max] float {0,1}
  torch::Tensor t0;       // [B] int64 absolute offset of the window
  torch::Tensor valid;    // [B, W] float {0,1}
};

struct Predictions {
  torch::Tensor action_logits;  // [B, W, n_max, a_max] (unmasked)
  torch::Tensor state_out;      // [B, W, S] delta (or absolute when !residual)
  torch::Tensor zbar_out;       // [B, W, latent] delta in pooled space
  torch::Tensor obs_pred;       // [B, W, n_max, O] from the state-only head
};

class DynamicsModelImpl : public torch::nn::Module {
 public:
  DynamicsModelImpl(DynamicsConfig cfg, model::ModelLayout layout, int latent_dim);

  Predictions forward(const SequenceBatch& batch);

  // Observation head: raw (clamped) state only, no sequence history.
  torch::Tensor obs_from_state(torch::Tensor state);  // [B,S] -> [B,n_max,O]

  const DynamicsConfig& config() const { return cfg_; }
  const model::ModelLayout& layout() const { return layout_; }
  int latent_dim() const { return latent_dim_; }
  int slots_per_step() const;

 private:
  friend class SequenceContext;

  // [B, slots/step, E] input embeddings for one timestep's L/z/s/o group
  // and for the action group; t is the absolute timestep index.
  torch::Tensor embed_obs_group(torch::Tensor desc, torch::Tensor zbar, torch::Tensor state,
                                torch::Tensor obs, torch::Tensor t);
  torch::Tensor embed_action_group(torch::Tensor actions, torch::Tensor t);

  DynamicsConfig cfg_;
  model::ModelLayout layout_;
  int latent_dim_;
  torch::nn::Linear desc_in_{nullptr}, z_in_{nullptr}, s_in_{nullptr}, o_in_{nullptr};
  torch::nn::Embedding u_in_{nullptr}, type_embed_{nullptr}, agent_embed_{nullptr},
      time_embed_{nullptr};
  torch::nn::ModuleList blocks_;
  torch::nn::LayerNorm final_ln_{nullptr};
  torch::nn::Linear action_head_{nullptr}, state_head_{nullptr}, z_head_{nullptr};
  torch::nn::Sequential obs_head_{nullptr};
};
TORCH_MODULE(DynamicsModel);

// Incremental decoding with a KV cache over a batch of parallel sequences.
// Per timestep: step_begin feeds the L/z/s/o slots and returns the reference
// policy logits read at the o slots; step_end feeds the chosen actions and
// returns the state/zbar predictions read at the last action slot.
class SequenceContext {
 public:
  SequenceContext(DynamicsModel model, torch::Tensor desc);  // desc [B, kDescriptorDim]

  torch::Tensor step_begin(torch::Tensor zbar, torch::Tensor state,
                           torch::Tensor obs);                         // -> [B,n_max,a_max]
  std::pair<torch::Tensor, torch::Tensor> step_end(torch::Tensor actions);  // -> ds, dz

  int t() const { return t_; }

 private:
  torch::Tensor run_blocks(torch::Tensor x);

  DynamicsModel model_;
  torch::Tensor desc_;
  std::vector<torch::Tensor> k_cache_, v_cache_;
  int t_ = 0;
  bool awaiting_actions_ = false;
};

// Softmax over logits with unavailable entries forced to (effectively) -inf;
// a row with a single available action gets probability exactly 1.
torch::Tensor masked_softmax(torch::Tensor logits, torch::Tensor avail);

struct DynMetrics {
  double final_loss = 0.0;
  double val_state_mse = 0.0;
  double val_action_ce = 0.0;
  double val_obs_mse = 0.0;
  json to_json() const;
};

// Padded per-episode tensors ready for sequence assembly; built once per
// store and shared between the dynamics and reward trainers.
struct EpisodeTensors {
  torch::Tensor state;    // [T+1, S]
  torch::Tensor obs;      // [T, n_max, O]
  torch::Tensor actions;  // [T, n_max] int64
  torch::Tensor avail;    // [T, n_max, a_max] float
  torch::Tensor zbar;     // [T+1, latent] (undefined when tokenizer absent)
  torch::Tensor desc;     // [kDescriptorDim]
  int T = 0;
};

// Terrain used for episode `index` under deterministic augmentation: the
// original terrain rotated by index mod 3 so every terrain id gets coverage.
int augmented_terrain(const env::Scenario& scn, int index, bool augment);

std::vector<EpisodeTensors> episode_tensors(const data::EpisodeStore& store,
                                            const model::ModelLayout& layout, vq::VqVae* tokenizer,
                                            bool augment_terrain);

DynMetrics train_dynamics(const std::vector<const data::EpisodeStore*>& train,
                          const std::vector<const data::EpisodeStore*>& val, vq::VqVae& tokenizer,
                          const DynamicsConfig& cfg, const model::ModelLayout& layout,
                          uint64_t seed, const std::filesystem::path& out_ckpt,
                          bool augment_terrain = true);

DynamicsModel load_dynamics(const std::filesystem::path& ckpt);

// --- Imagination rollouts -------------------------------------------------

struct RolloutStart {
  std::vector<float> state;  // padded layout state
  std::vector<float> zbar;   // pooled embedding of the initial frame
  std::vector<float> desc;   // DescriptorVec driving the L slots
};

struct SimEpisode {
  std::vector<std::vector<float>> states;             // [T+1][S] raw recursion values
  std::vector<std::vector<float>> zbars;              // [T+1][latent]
  std::vector<std::vector<std::vector<float>>> obs;   // [T][n_max][O]
  std::vector<std::vector<int>> actions;              // [T][n_max]
  std::vector<std::vector<std::vector<uint8_t>>> avail;  // [T][n_max][a_max]
  std::vector<std::vector<std::vector<float>>> qref;  // [T][n_max][a_max] masked softmax
  std::vector<std::vector<uint8_t>> alive;            // [T+1][units]
  int T() const { return static_cast<int>(actions.size()); }
};

// Maps (episode index, padded state, per-agent obs rows, masks, reference
// policy rows) to a joint action; every chosen action must satisfy its mask.
using RolloutPolicy = std::function<std::vector<int>(
    int ep, const std::vector<float>& state, const std::vector<std::vector<float>>& obs,
    const std::vector<std::vector<uint8_t>>& avail,
    const std::vector<std::vector<float>>& qref)>;

std::vector<SimEpisode> rollout(DynamicsModel& model, const env::Scenario& scn,
                                const std::vector<RolloutStart>& starts,
                                const RolloutPolicy& policy, int horizon,
                                vq::VqVae* gt_image_tokenizer = nullptr);

// Starts drawn from dataset initial states (episode e -> reset state of e).
std::vector<RolloutStart> starts_from_store(const data::EpisodeStore& store,
                                            const model::ModelLayout& layout, vq::VqVae& tokenizer,
                                            const std::vector<int>& episode_indices,
                                            bool augment_terrain);

// Answer-style frame for a rolled-out step: nearest-code projection of the
// pooled embedding, decoded through the tokenizer.
vision::Frame frame_from_zbar(vq::VqVae& tokenizer, const std::vector<float>& zbar);

}  // namespace lbi::dyn
