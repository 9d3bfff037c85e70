#include "lbi/vqvae.hpp"

#include <cmath>
#include <cstring>

namespace lbi::vq {

using torch::Tensor;

json VqConfig::to_json() const {
  return json{{"num_codes", num_codes},   {"latent_dim", latent_dim},
              {"commitment_cost", commitment_cost}, {"channels", channels},
              {"steps", steps},           {"batch", batch},
              {"lr", lr},                 {"dead_code_steps", dead_code_steps}};
}

VqConfig VqConfig::from_json(const json& j) {
  VqConfig c;
  c.num_codes = j.value("num_codes", c.num_codes);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.commitment_cost = j.value("commitment_cost", c.commitment_cost);
  c.channels = j.value("channels", c.channels);
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.dead_code_steps = j.value("dead_code_steps", c.dead_code_steps);
  return c;
}

json TokenizerMetrics::to_json() const {
  return json{{"final_loss", final_loss},
              {"val_recon_mse", val_recon_mse},
              {"codebook_usage", codebook_usage},
              {"diverged", diverged}};
}

namespace {

class ResBlockImpl : public torch::nn::Module {
 public:
  explicit ResBlockImpl(int ch)
      : conv1_(register_module(
            "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 3).padding(1).padding_mode(
                         torch::kReplicate)))),
        conv2_(register_module(
            "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 3).padding(1).padding_mode(
                         torch::kReplicate)))) {}
  Tensor forward(Tensor x) { return x + conv2_(torch::gelu(conv1_(torch::gelu(x)))); }

 private:
  torch::nn::Conv2d conv1_, conv2_;
};
TORCH_MODULE(ResBlock);

torch::nn::Conv2d down_conv(int in, int out) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, 4).stride(2).padding(1).padding_mode(torch::kReplicate));
}

}  // namespace

VqVaeImpl::VqVaeImpl(VqConfig cfg) : cfg_(cfg) {
  const int ch = cfg_.channels;
  encoder_ = torch::nn::Sequential(
      down_conv(3, ch / 2), torch::nn::GELU(), down_conv(ch / 2, ch), torch::nn::GELU(),
      down_conv(ch, ch), torch::nn::GELU(), ResBlock(ch), ResBlock(ch),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, cfg_.latent_dim, 1)));
  decoder_ = torch::nn::Sequential(
      torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg_.latent_dim, ch, 1)), ResBlock(ch),
      ResBlock(ch),
      torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(ch, ch, 4).stride(2).padding(1)),
      torch::nn::GELU(),
      torch::nn::ConvTranspose2d(
          torch::nn::ConvTranspose2dOptions(ch, ch / 2, 4).stride(2).padding(1)),
      torch::nn::GELU(),
      torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(ch / 2, 3, 4).stride(2).padding(1)),
      torch::nn::Sigmoid());
  register_module("encoder", encoder_);
  register_module("decoder", decoder_);
  codebook_ = register_parameter(
      "codebook", torch::randn({cfg_.num_codes, cfg_.latent_dim}) * 0.05);
}

Tensor VqVaeImpl::encode_latents(Tensor frames) {
  if (frames.dim() != 4 || frames.size(1) != 3 || frames.size(2) != vision::kFrameH ||
      frames.size(3) != vision::kFrameW)
    throw ContractViolation("tokenizer expects [B,3,64,64] frames");
  return encoder_->forward(frames);
}

QuantizeResult VqVaeImpl::quantize(Tensor latents) {
  if (torch::isnan(latents).any().item<bool>())
    throw DomainError("NaN latents passed to quantize");
  const auto B = latents.size(0);
  const auto D = latents.size(1);
  const auto H = latents.size(2);
  const auto W = latents.size(3);
  Tensor flat = latents.permute({0, 2, 3, 1}).reshape({-1, D});  // [N, D]
  Tensor d = flat.pow(2).sum(1, true) + codebook_.pow(2).sum(1).unsqueeze(0) -
             2.0 * flat.matmul(codebook_.t());
  Tensor tokens = d.argmin(1);  // first index wins ties
  Tensor chosen = codebook_.index_select(0, tokens);

  QuantizeResult out;
  out.codebook_loss = torch::mse_loss(chosen, flat.detach());
  out.commitment_loss = cfg_.commitment_cost * torch::mse_loss(flat, chosen.detach());
  Tensor q = chosen.reshape({B, H, W, D}).permute({0, 3, 1, 2});
  Tensor z = latents;
  out.quantized = z + (q - z).detach();  // straight-through estimator
  out.tokens = tokens.reshape({B, H, W});
  return out;
}

Tensor VqVaeImpl::decode_latents(Tensor quantized) { return decoder_->forward(quantized); }

Tensor VqVaeImpl::embed_tokens(Tensor tokens) {
  const auto B = tokens.size(0);
  const auto H = tokens.size(1);
  const auto W = tokens.size(2);
  if ((tokens.min().item<int64_t>() < 0) ||
      (tokens.max().item<int64_t>() >= cfg_.num_codes))
    throw ContractViolation("token index out of codebook range");
  Tensor flat = codebook_.index_select(0, tokens.reshape(-1));
  return flat.reshape({B, H, W, cfg_.latent_dim}).permute({0, 3, 1, 2});
}

Tensor frame_to_tensor(const vision::Frame& frame) {
  Tensor t = torch::from_blob(const_cast<float*>(frame.pixels.data()),
                              {vision::kFrameH, vision::kFrameW, vision::kFrameC})
                 .clone();
  return t.permute({2, 0, 1});
}

vision::Frame tensor_to_frame(Tensor chw) {
  vision::Frame f;
  Tensor hwc = chw.detach().clamp(0, 1).permute({1, 2, 0}).contiguous().to(torch::kFloat);
  std::memcpy(f.pixels.data(), hwc.data_ptr<float>(), sizeof(float) * f.pixels.size());
  return f;
}

TokenGrid encode_frame(VqVae& model, const vision::Frame& frame) {
  torch::NoGradGuard ng;
  Tensor latents = model->encode_latents(frame_to_tensor(frame).unsqueeze(0));
  Tensor tokens = model->quantize(latents).tokens.reshape(-1).to(torch::kInt);
  TokenGrid grid;
  std::memcpy(grid.data(), tokens.contiguous().data_ptr<int32_t>(), sizeof(int32_t) * grid.size());
  return grid;
}

vision::Frame decode_tokens(VqVae& model, const TokenGrid& tokens) {
  torch::NoGradGuard ng;
  Tensor idx = torch::from_blob(const_cast<int32_t*>(tokens.data()),
                                {1, kTokenSide, kTokenSide}, torch::kInt)
                   .to(torch::kLong);
  return tensor_to_frame(model->decode_latents(model->embed_tokens(idx)).squeeze(0));
}

std::vector<float> pooled_embedding(VqVae& model, const TokenGrid& tokens) {
  torch::NoGradGuard ng;
  Tensor idx = torch::from_blob(const_cast<int32_t*>(tokens.data()),
                                {1, kTokenSide, kTokenSide}, torch::kInt)
                   .to(torch::kLong);
  Tensor pooled = model->embed_tokens(idx).mean({2, 3}).squeeze(0).contiguous();
  return std::vector<float>(pooled.data_ptr<float>(),
                            pooled.data_ptr<float>() + pooled.numel());
}

Tensor pooled_embedding_batch(VqVae& model, Tensor frames) {
  torch::NoGradGuard ng;
  Tensor latents = model->encode_latents(frames);
  QuantizeResult q = model->quantize(latents);
  return model->embed_tokens(q.tokens).mean({2, 3});
}

int nearest_code(VqVae& model, const std::vector<float>& embed) {
  torch::NoGradGuard ng;
  Tensor x = torch::from_blob(const_cast<float*>(embed.data()),
                              {1, static_cast<int64_t>(embed.size())})
                 .clone();
  Tensor d = x.pow(2).sum(1, true) + model->codebook().pow(2).sum(1).unsqueeze(0) -
             2.0 * x.matmul(model->codebook().t());
  return static_cast<int>(d.argmin(1).item<int64_t>());
}

namespace {

struct FrameIndex {
  const data::EpisodeStore* store;
  int episode;
  int t;
};

std::vector<FrameIndex> index_frames(const std::vector<const data::EpisodeStore*>& stores) {
  std::vector<FrameIndex> out;
  for (const auto* store : stores)
    for (int e = 0; e < store->size(); ++e)
      for (size_t t = 0; t < store->episode(e).states.size(); ++t)
        out.push_back({store, e, static_cast<int>(t)});
  return out;
}

Tensor render_batch(const std::vector<FrameIndex>& frames, const std::vector<size_t>& picks,
                    std::mt19937_64* aug_rng) {
  Tensor batch = torch::empty({static_cast<int64_t>(picks.size()), 3, 64, 64});
  for (size_t b = 0; b < picks.size(); ++b) {
    const FrameIndex& fi = frames[picks[b]];
    const env::Scenario& scn = fi.store->scenario();
    env::EnvState st =
        vision::state_from_vector(scn, fi.store->episode(fi.episode).states[fi.t]);
    const int terrain =
        aug_rng ? static_cast<int>((*aug_rng)() % env::kNumTerrains) : st.terrain_id;
    batch[static_cast<int64_t>(b)] = frame_to_tensor(vision::augment(scn, st, terrain));
  }
  return batch;
}

std::vector<Tensor> snapshot_params(VqVae& model) {
  std::vector<Tensor> out;
  for (const auto& p : model->parameters()) out.push_back(p.detach().clone());
  return out;
}

void restore_params(VqVae& model, const std::vector<Tensor>& snap) {
  torch::NoGradGuard ng;
  size_t i = 0;
  for (auto& p : model->parameters()) p.copy_(snap[i++]);
}

}  // namespace

TokenizerMetrics train_tokenizer(const data::EpisodeStore& train, const data::EpisodeStore& val,
                                 const VqConfig& cfg, uint64_t seed,
                                 const std::filesystem::path& out_ckpt) {
  return train_tokenizer(std::vector<const data::EpisodeStore*>{&train},
                         std::vector<const data::EpisodeStore*>{&val}, cfg, seed, out_ckpt);
}

TokenizerMetrics train_tokenizer(const std::vector<const data::EpisodeStore*>& train,
                                 const std::vector<const data::EpisodeStore*>& val,
                                 const VqConfig& cfg, uint64_t seed,
                                 const std::filesystem::path& out_ckpt) {
  int train_eps = 0;
  for (const auto* s : train) train_eps += s->size();
  if (train_eps == 0) throw ConfigError("tokenizer training store is empty");
  model::init_torch(mix_seed(seed, 0xF00D));
  VqVae model(cfg);
  torch::optim::AdamW opt(model->parameters(),
                          torch::optim::AdamWOptions(cfg.lr).weight_decay(0.0));

  const auto frames = index_frames(train);
  std::mt19937_64 pick_rng(mix_seed(seed, 1));
  std::mt19937_64 aug_rng(mix_seed(seed, 2));
  std::uniform_int_distribution<size_t> pick(0, frames.size() - 1);

  std::vector<int64_t> last_used(cfg.num_codes, 0);
  std::vector<Tensor> snapshot = snapshot_params(model);
  TokenizerMetrics metrics;

  for (int step = 0; step < cfg.steps; ++step) {
    const double cos_lr =
        cfg.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / cfg.steps));
    for (auto& group : opt.param_groups())
      static_cast<torch::optim::AdamWOptions&>(group.options()).lr(cos_lr);

    std::vector<size_t> picks(cfg.batch);
    for (auto& p : picks) p = pick(pick_rng);
    Tensor batch = render_batch(frames, picks, &aug_rng);

    Tensor latents = model->encode_latents(batch);
    QuantizeResult q = model->quantize(latents);
    Tensor recon = model->decode_latents(q.quantized);
    Tensor loss = torch::mse_loss(recon, batch) + q.codebook_loss + q.commitment_loss;

    if (!std::isfinite(loss.item<double>())) {
      restore_params(model, snapshot);
      metrics.diverged = true;
      break;
    }
    opt.zero_grad();
    loss.backward();
    opt.step();
    metrics.final_loss = loss.item<double>();

    {
      torch::NoGradGuard ng;
      Tensor used = std::get<0>(at::_unique(q.tokens.reshape(-1)));
      auto acc = used.accessor<int64_t, 1>();
      for (int64_t i = 0; i < used.size(0); ++i) last_used[acc[i]] = step;
      Tensor flat = latents.detach().permute({0, 2, 3, 1}).reshape({-1, cfg.latent_dim});
      for (int c = 0; c < cfg.num_codes; ++c) {
        if (step - last_used[c] < cfg.dead_code_steps) continue;
        const auto row = static_cast<int64_t>(pick_rng() % flat.size(0));
        model->codebook().index_put_({c}, flat[row]);
        last_used[c] = step;
      }
    }
    if (step % 200 == 0) snapshot = snapshot_params(model);
  }

  {
    torch::NoGradGuard ng;
    model->eval();
    const auto val_frames = index_frames(val);
    std::vector<size_t> picks;
    for (size_t i = 0; i < val_frames.size(); i += std::max<size_t>(1, val_frames.size() / 256))
      picks.push_back(i);
    double mse_sum = 0.0;
    std::vector<uint8_t> code_seen(cfg.num_codes, 0);
    const size_t chunk = 32;
    size_t done = 0;
    for (size_t at = 0; at < picks.size(); at += chunk) {
      std::vector<size_t> sub(picks.begin() + at,
                              picks.begin() + std::min(picks.size(), at + chunk));
      Tensor batch = render_batch(val_frames, sub, nullptr);
      Tensor latents = model->encode_latents(batch);
      QuantizeResult q = model->quantize(latents);
      Tensor recon = model->decode_latents(q.quantized);
      mse_sum += torch::mse_loss(recon, batch).item<double>() * static_cast<double>(sub.size());
      Tensor used = std::get<0>(at::_unique(q.tokens.reshape(-1)));
      auto acc = used.accessor<int64_t, 1>();
      for (int64_t i = 0; i < used.size(0); ++i) code_seen[acc[i]] = 1;
      done += sub.size();
    }
    metrics.val_recon_mse = mse_sum / static_cast<double>(std::max<size_t>(1, done));
    int used_count = 0;
    for (uint8_t u : code_seen) used_count += u;
    metrics.codebook_usage = static_cast<double>(used_count) / cfg.num_codes;
    model->train();
  }

  json meta{{"kind", "tokenizer"},
            {"config", cfg.to_json()},
            {"seed", seed},
            {"metrics", metrics.to_json()}};
  meta["config_hash"] = model::config_hash(json{{"kind", "tokenizer"}, {"config", cfg.to_json()}, {"seed", seed}});
  model::save_checkpoint(out_ckpt, *model, meta);
  return metrics;
}

VqVae load_tokenizer(const std::filesystem::path& ckpt) {
  const json meta = model::load_checkpoint_meta(ckpt);
  if (meta.at("kind").get<std::string>() != "tokenizer")
    throw ConfigError("'" + ckpt.string() + "' is not a tokenizer checkpoint");
  VqVae model(VqConfig::from_json(meta.at("config")));
  model::load_checkpoint_into(ckpt, *model);
  model->eval();
  return model;
}

}  // namespace lbi::vq
