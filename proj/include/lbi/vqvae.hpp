#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>

#include "lbi/data.hpp"
#include "lbi/model_common.hpp"
#include "lbi/vision.hpp"

namespace lbi::vq {

inline constexpr int kTokenSide = 8;
inline constexpr int kTokensPerFrame = kTokenSide * kTokenSide;

using TokenGrid = std::array<int32_t, kTokensPerFrame>;

struct VqConfig {
  int num_codes = 256;
  int latent_dim = 32;
  double commitment_cost = 0.25;
  int channels = 64;
  int steps = 4000;
  int batch = 32;
  double lr = 1e-4;
  int dead_code_steps = 500;
  json to_json() const;
  static VqConfig from_json(const json& j);
};

struct QuantizeResult {
  torch::Tensor tokens;           // [B, 8, 8] int64
  torch::Tensor quantized;        // straight-through latents [B, D, 8, 8]
  torch::Tensor codebook_loss;    // scalar, ||sg(z_e) - e||^2 mean
  torch::Tensor commitment_loss;  // scalar, cost * ||z_e - sg(e)||^2 mean
};

class VqVaeImpl : public torch::nn::Module {
 public:
  explicit VqVaeImpl(VqConfig cfg);

  torch::Tensor encode_latents(torch::Tensor frames);     // [B,3,64,64] -> [B,D,8,8]
  QuantizeResult quantize(torch::Tensor latents);
  torch::Tensor decode_latents(torch::Tensor quantized);  // [B,D,8,8] -> [B,3,64,64]
  torch::Tensor embed_tokens(torch::Tensor tokens);       // [B,8,8] -> [B,D,8,8]

  const VqConfig& config() const { return cfg_; }
  torch::Tensor codebook() { return codebook_; }

 private:
  VqConfig cfg_;
  torch::nn::Sequential encoder_{nullptr}, decoder_{nullptr};
  torch::Tensor codebook_;
};
TORCH_MODULE(VqVae);

torch::Tensor frame_to_tensor(const vision::Frame& frame);
vision::Frame tensor_to_frame(torch::Tensor chw);

TokenGrid encode_frame(VqVae& model, const vision::Frame& frame);
vision::Frame decode_tokens(VqVae& model, const TokenGrid& tokens);

// Mean of the code embeddings of one frame's tokens: the per-frame image
// conditioning vector used by the dynamics model.
std::vector<float> pooled_embedding(VqVae& model, const TokenGrid& tokens);
torch::Tensor pooled_embedding_batch(VqVae& model, torch::Tensor frames);  // [B,3,64,64]->[B,D]

// Nearest codebook row to an arbitrary vector in embedding space.
int nearest_code(VqVae& model, const std::vector<float>& embed);

struct TokenizerMetrics {
  double final_loss = 0.0;
  double val_recon_mse = 0.0;
  double codebook_usage = 0.0;
  bool diverged = false;
  json to_json() const;
};

TokenizerMetrics train_tokenizer(const std::vector<const data::EpisodeStore*>& train,
                                 const std::vector<const data::EpisodeStore*>& val,
                                 const VqConfig& cfg, uint64_t seed,
                                 const std::filesystem::path& out_ckpt);
TokenizerMetrics train_tokenizer(const data::EpisodeStore& train, const data::EpisodeStore& val,
                                 const VqConfig& cfg, uint64_t seed,
                                 const std::filesystem::path& out_ckpt);

VqVae load_tokenizer(const std::filesystem::path& ckpt);

}  // namespace lbi::vq
