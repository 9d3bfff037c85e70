#pragma once

#include <torch/torch.h>

namespace lbi::model {

// Pre-LN transformer block with manual qkv so incremental decoding can reuse
// cached keys/values; torch's bundled encoder has no KV cache.
class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int embed, int heads);

  // attn_mask (optional) is a bool tensor broadcastable to [B,H,Q,K];
  // causal=true applies the standard lower-triangular mask instead.
  torch::Tensor forward(torch::Tensor x, const std::optional<torch::Tensor>& attn_mask,
                        bool causal);

  // Appends the new slots' keys/values to the cache; queries attend to all
  // cached positions plus the causal prefix within the new block.
  torch::Tensor forward_cached(torch::Tensor x, torch::Tensor& k_cache, torch::Tensor& v_cache);

 private:
  torch::Tensor split_heads(torch::Tensor x);
  torch::Tensor merge_heads(torch::Tensor x);
  torch::Tensor finish(torch::Tensor x, torch::Tensor att);

  int heads_;
  torch::nn::LayerNorm ln1_{nullptr}, ln2_{nullptr};
  torch::nn::Linear qkv_{nullptr}, proj_{nullptr}, fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(TransformerBlock);

}  // namespace lbi::model
