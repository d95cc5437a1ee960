#include "spectr/model.hpp"

#include <cmath>
#include <string>

#include "spectr/rng.hpp"

namespace spectr {

namespace {

int ceil_half(int n) { return (n + 1) / 2; }

Tensor init_normal(std::vector<int> shape, double sigma, Rng& rng) {
  Tensor t(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i)
    t.data()[i] = static_cast<float>(rng.normal(0.0, sigma));
  return t;
}

Tensor init_he(std::vector<int> shape, int fan_in, Rng& rng) {
  return init_normal(std::move(shape), std::sqrt(2.0 / fan_in), rng);
}

Tensor init_xavier(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
  return init_normal(std::move(shape), std::sqrt(2.0 / (fan_in + fan_out)), rng);
}

}  // namespace

uint64_t ModelConfig::hash() const {
  std::string s = "bc=" + std::to_string(base_channels) +
                  ";heads=" + std::to_string(heads) +
                  ";groups=" + std::to_string(groups) +
                  ";e2=" + std::to_string(transformer_e2) +
                  ";e3=" + std::to_string(transformer_e3) +
                  ";e4=" + std::to_string(transformer_e4) +
                  ";sparsity=" + std::to_string(sparsity) +
                  ";sn=" + std::to_string(spectral_norm) +
                  ";dw=" + std::to_string(depthwise_encoder) +
                  ";share=" + std::to_string(share_band_filters);
  return fnv1a(s);
}

Tensor& SpectrModel::add_param(const std::string& name, Tensor t) {
  t.set_requires_grad(true);
  index_[name] = params_.size();
  params_.push_back({name, std::move(t)});
  return params_.back().tensor;
}

Tensor& SpectrModel::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return params_[it->second].tensor;
}

const Tensor& SpectrModel::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return params_[it->second].tensor;
}

bool SpectrModel::has_param(const std::string& name) const {
  return index_.count(name) > 0;
}

size_t SpectrModel::param_count() const {
  size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

SpectrModel::SpectrModel(const ModelConfig& cfg, int bands, uint64_t seed)
    : cfg_(cfg), bands_(bands), seed_(seed) {
  if (cfg_.levels != 4) throw ConfigError("model: levels must be 4");
  if (cfg_.base_channels < 1) throw ConfigError("model: base_channels must be positive");
  if (bands_ < 1) throw ConfigError("model: bands must be positive");

  extents_.resize(4);
  extents_[0] = bands_;
  for (int l = 1; l < 4; ++l) extents_[l] = ceil_half(extents_[l - 1]);

  for (int level = 1; level <= 4; ++level) {
    const int c = cfg_.channels(level);
    if (c % cfg_.groups != 0)
      throw ConfigError("model: channels at level " + std::to_string(level) +
                        " not divisible by groups");
    if (cfg_.transformer_at(level) && c % cfg_.heads != 0)
      throw ConfigError("model: embed dim at level " + std::to_string(level) +
                        " not divisible by heads");
  }

  auto rng_for = [&](const std::string& name) {
    return Rng(mix_seed(seed_, fnv1a(name)));
  };
  auto make = [&](const std::string& name, auto&& fn) {
    Rng rng = rng_for(name);
    add_param(name, fn(rng));
  };

  // encoder
  for (int level = 1; level <= 4; ++level) {
    const std::string pre = "enc" + std::to_string(level) + ".";
    const int cin0 = level == 1 ? 1 : cfg_.channels(level - 1);
    const int c = cfg_.channels(level);
    const int lext = extents_[level - 1];
    for (int round = 1; round <= 2; ++round) {
      const int ci = round == 1 ? cin0 : c;
      const std::string conv = pre + "conv" + std::to_string(round);
      if (cfg_.depthwise_encoder) {
        if (cfg_.share_band_filters) {
          make(conv + ".w", [&](Rng& r) { return init_he({c, ci, 3, 3}, ci * 9, r); });
        } else {
          make(conv + ".w",
               [&](Rng& r) { return init_he({lext, c, ci, 3, 3}, ci * 9, r); });
        }
      } else {
        make(conv + ".w", [&](Rng& r) { return init_he({c, ci, 3, 3, 3}, ci * 27, r); });
      }
      make(conv + ".b", [&](Rng&) { return Tensor({c}, 0.0f); });
      const int nb = cfg_.spectral_norm ? lext : 1;
      const std::string norm = pre + "norm" + std::to_string(round);
      make(norm + ".gamma", [&](Rng&) { return Tensor({nb, c}, 1.0f); });
      make(norm + ".beta", [&](Rng&) { return Tensor({nb, c}, 0.0f); });
    }
    if (cfg_.transformer_at(level)) {
      const std::string tr = pre + "tr.";
      const int dmodel = c;
      make(tr + "embed.w", [&](Rng& r) { return init_xavier({c, dmodel}, c, dmodel, r); });
      make(tr + "pos", [&](Rng& r) { return init_normal({lext, dmodel}, 0.02, r); });
      make(tr + "ln1.gamma", [&](Rng&) { return Tensor({dmodel}, 1.0f); });
      make(tr + "ln1.beta", [&](Rng&) { return Tensor({dmodel}, 0.0f); });
      for (const char* w : {"wq", "wk", "wv", "wo"}) {
        make(tr + w + std::string(".w"),
             [&](Rng& r) { return init_xavier({dmodel, dmodel}, dmodel, dmodel, r); });
        make(tr + w + std::string(".b"), [&](Rng&) { return Tensor({dmodel}, 0.0f); });
      }
      make(tr + "ln2.gamma", [&](Rng&) { return Tensor({dmodel}, 1.0f); });
      make(tr + "ln2.beta", [&](Rng&) { return Tensor({dmodel}, 0.0f); });
      const int hidden = 4 * dmodel;
      make(tr + "mlp1.w", [&](Rng& r) { return init_he({dmodel, hidden}, dmodel, r); });
      make(tr + "mlp1.b", [&](Rng&) { return Tensor({hidden}, 0.0f); });
      make(tr + "mlp2.w", [&](Rng& r) { return init_xavier({hidden, dmodel}, hidden, dmodel, r); });
      make(tr + "mlp2.b", [&](Rng&) { return Tensor({dmodel}, 0.0f); });
      make(tr + "back.w", [&](Rng& r) { return init_xavier({dmodel, c}, dmodel, c, r); });
      make(tr + "back.b", [&](Rng&) { return Tensor({c}, 0.0f); });
      if (cfg_.sparsity) {
        make(tr + "alpha_raw", [&](Rng& r) {
          Tensor t({cfg_.heads});
          for (int h = 0; h < cfg_.heads; ++h)
            t.data()[h] = static_cast<float>(r.uniform(-1.0, 1.0));
          return t;
        });
      }
    }
  }

  // decoder mirrors the encoder ladder with 3D convs and plain group norms
  for (int level = 3; level >= 1; --level) {
    const std::string pre = "dec" + std::to_string(level) + ".";
    const int c = cfg_.channels(level);
    const int cin1 = cfg_.channels(level + 1) + c;  // upsampled + skip
    for (int round = 1; round <= 2; ++round) {
      const int ci = round == 1 ? cin1 : c;
      const std::string conv = pre + "conv" + std::to_string(round);
      make(conv + ".w", [&](Rng& r) { return init_he({c, ci, 3, 3, 3}, ci * 27, r); });
      make(conv + ".b", [&](Rng&) { return Tensor({c}, 0.0f); });
      const std::string norm = pre + "norm" + std::to_string(round);
      make(norm + ".gamma", [&](Rng&) { return Tensor({1, c}, 1.0f); });
      make(norm + ".beta", [&](Rng&) { return Tensor({1, c}, 0.0f); });
    }
  }
  make("head.w", [&](Rng& r) { return init_xavier({cfg_.channels(1), 1}, cfg_.channels(1), 1, r); });
  make("head.b", [&](Rng&) { return Tensor({1}, 0.0f); });
}

Tensor SpectrModel::conv_norm_relu(const std::string& prefix, int norm_bands,
                                   const Tensor& x, bool depthwise) {
  Tensor h;
  if (depthwise) {
    h = band_conv2d(x, param(prefix + ".w"), param(prefix + ".b"));
  } else {
    h = conv3d(x, param(prefix + ".w"), param(prefix + ".b"));
  }
  // norm parameter name: convN -> normN within the same stage prefix
  std::string norm = prefix;
  norm.replace(norm.find("conv"), 4, "norm");
  h = spectral_group_norm(h, norm_bands, param(norm + ".gamma"), param(norm + ".beta"),
                          cfg_.groups);
  return relu(h);
}

Tensor SpectrModel::transformer_block(int level, const Tensor& z0, Tensor* weights) {
  const std::string tr = "enc" + std::to_string(level) + ".tr.";
  Tensor h = layer_norm(z0, param(tr + "ln1.gamma"), param(tr + "ln1.beta"));
  Tensor qh = linear(h, param(tr + "wq.w"), param(tr + "wq.b"));
  Tensor kh = linear(h, param(tr + "wk.w"), param(tr + "wk.b"));
  Tensor vh = linear(h, param(tr + "wv.w"), param(tr + "wv.b"));
  Tensor alphas;
  if (cfg_.sparsity) alphas = alpha_from_raw(param(tr + "alpha_raw"));
  Tensor att = multihead_attention(qh, kh, vh, cfg_.heads, alphas, weights);
  att = linear(att, param(tr + "wo.w"), param(tr + "wo.b"));
  Tensor z1p = add(att, z0);
  Tensor m = layer_norm(z1p, param(tr + "ln2.gamma"), param(tr + "ln2.beta"));
  m = linear(m, param(tr + "mlp1.w"), param(tr + "mlp1.b"));
  m = relu(m);
  m = linear(m, param(tr + "mlp2.w"), param(tr + "mlp2.b"));
  return add(m, z1p);
}

Tensor SpectrModel::apply_stage_transformer(int level, const Tensor& f, Tensor* weights) {
  const std::string tr = "enc" + std::to_string(level) + ".tr.";
  const int H = f.dim(1), W = f.dim(2);
  Tensor seq = gather_sequences(f);                       // [N, L', C]
  Tensor tokens = linear(seq, param(tr + "embed.w"), Tensor());
  Tensor z0 = add_rows(tokens, param(tr + "pos"));
  Tensor z1 = transformer_block(level, z0, weights);
  Tensor back = linear(z1, param(tr + "back.w"), param(tr + "back.b"));
  return scatter_sequences(back, H, W);
}

SpectrModel::Forward SpectrModel::forward(const Tensor& cube) {
  if (cube.ndim() != 4 || cube.dim(3) != 1)
    throw ShapeError("forward: expected [L,H,W,1] cube tensor");
  const int L = cube.dim(0), H = cube.dim(1), W = cube.dim(2);
  if (W % 8 != 0 || H % 8 != 0)
    throw ShapeError("forward: spatial dims must be divisible by 8, got " +
                     std::to_string(W) + "x" + std::to_string(H));
  if (L < 8) throw ShapeError("forward: need at least 8 bands, got " + std::to_string(L));
  if (L != bands_)
    throw ShapeError("forward: cube has " + std::to_string(L) +
                     " bands but the model was built for " + std::to_string(bands_));

  Forward out;
  Tensor x = cube;
  std::vector<Tensor> skips(5);
  for (int level = 1; level <= 4; ++level) {
    const std::string pre = "enc" + std::to_string(level) + ".";
    const int nb = cfg_.spectral_norm ? extents_[level - 1] : 1;
    x = conv_norm_relu(pre + "conv1", nb, x, cfg_.depthwise_encoder);
    x = conv_norm_relu(pre + "conv2", nb, x, cfg_.depthwise_encoder);
    if (cfg_.transformer_at(level)) {
      Tensor weights;
      Tensor res = apply_stage_transformer(level, x, &weights);
      x = add(x, res);
      out.attention.push_back({level, weights});
    }
    skips[level] = x;
    if (level < 4) x = maxpool3(x);
  }

  for (int level = 3; level >= 1; --level) {
    const std::string pre = "dec" + std::to_string(level) + ".";
    Tensor skip = skips[level];
    x = upsample3(x);
    x = crop3(x, skip.dim(0), skip.dim(1), skip.dim(2));
    if (debug_zero_skip == level) skip = mul_scalar(skip, 0.0f);
    x = concat_channels(x, skip);
    x = conv_norm_relu(pre + "conv1", 1, x, false);
    x = conv_norm_relu(pre + "conv2", 1, x, false);
  }

  Tensor logits = linear(x, param("head.w"), param("head.b"));  // [L,H,W,1]
  out.band_probs = sigmoid(logits).reshape({L, H, W});
  out.prob_map = mean_axis0(out.band_probs);
  return out;
}

Mask predict(const Tensor& prob_map, float threshold) {
  if (!(threshold > 0.0f && threshold < 1.0f))
    throw DomainError("predict: threshold must lie in (0,1)");
  if (prob_map.ndim() != 2) throw ShapeError("predict: expected [H,W] map");
  Mask m;
  m.height = prob_map.dim(0);
  m.width = prob_map.dim(1);
  m.values.resize(prob_map.size());
  for (size_t i = 0; i < prob_map.size(); ++i)
    m.values[i] = prob_map.data()[i] >= threshold ? 1 : 0;
  return m;
}

}  // namespace spectr
