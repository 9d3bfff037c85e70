#include "lbi/transformer.hpp"

namespace lbi::model {

using torch::Tensor;

TransformerBlockImpl::TransformerBlockImpl(int embed, int heads)
    : heads_(heads),
      ln1_(register_module("ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({embed})))),
      ln2_(register_module("ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({embed})))),
      qkv_(register_module("qkv", torch::nn::Linear(embed, 3 * embed))),
      proj_(register_module("proj", torch::nn::Linear(embed, embed))),
      fc1_(register_module("fc1", torch::nn::Linear(embed, 4 * embed))),
      fc2_(register_module("fc2", torch::nn::Linear(4 * embed, embed))) {}

Tensor TransformerBlockImpl::split_heads(Tensor x) {
  const auto B = x.size(0);
  const auto S = x.size(1);
  return x.reshape({B, S, heads_, x.size(2) / heads_}).transpose(1, 2);
}

Tensor TransformerBlockImpl::merge_heads(Tensor x) {
  const auto B = x.size(0);
  const auto S = x.size(2);
  return x.transpose(1, 2).reshape({B, S, -1});
}

Tensor TransformerBlockImpl::finish(Tensor x, Tensor att) {
  x = x + proj_(merge_heads(att));
  x = x + fc2_(torch::gelu(fc1_(ln2_(x))));
  return x;
}

Tensor TransformerBlockImpl::forward(Tensor x, const std::optional<Tensor>& attn_mask,
                                     bool causal) {
  Tensor h = ln1_(x);
  auto parts = qkv_(h).chunk(3, -1);
  Tensor att = at::scaled_dot_product_attention(split_heads(parts[0]), split_heads(parts[1]),
                                                split_heads(parts[2]), attn_mask, 0.0, causal);
  return finish(x, att);
}

Tensor TransformerBlockImpl::forward_cached(Tensor x, Tensor& k_cache, Tensor& v_cache) {
  Tensor h = ln1_(x);
  auto parts = qkv_(h).chunk(3, -1);
  Tensor q = split_heads(parts[0]);
  Tensor k = split_heads(parts[1]);
  Tensor v = split_heads(parts[2]);
  if (k_cache.defined()) {
    k = torch::cat({k_cache, k}, 2);
    v = torch::cat({v_cache, v}, 2);
  }
  k_cache = k;
  v_cache = v;
  const auto Q = q.size(2);
  const auto K = k.size(2);
  Tensor mask = torch::arange(K).unsqueeze(0) <= (K - Q) + torch::arange(Q).unsqueeze(1);
  Tensor att = at::scaled_dot_product_attention(q, k, v, mask, 0.0, false);
  return finish(x, att);
}

}  // namespace lbi::model
