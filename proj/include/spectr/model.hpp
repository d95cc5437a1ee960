#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "spectr/data.hpp"
#include "spectr/ops.hpp"
#include "spectr/tensor.hpp"

namespace spectr {

// Four-level u-shape network over [L,H,W,C] feature volumes. The encoder runs
// band-wise 2D convolutions (or full 3D convolutions), per-band spectral
// normalization (or a plain group norm), and a sparse spectral transformer at
// the enabled stages. The decoder mirrors the channel ladder with 3D
// convolutions and skip connections, and the prediction averages per-band
// probability maps.
struct ModelConfig {
  int base_channels = 16;  // doubles per level: 16/32/64/128
  int levels = 4;
  int heads = 8;
  int groups = 4;
  bool transformer_e2 = true;
  bool transformer_e3 = true;
  bool transformer_e4 = true;
  bool sparsity = true;        // learnable alpha-entmax attention vs softmax
  bool spectral_norm = true;   // per-band normalization vs plain group norm
  bool depthwise_encoder = true;  // band-wise 2D convs vs 3D convs
  bool share_band_filters = true; // one 2D filter set for all bands

  bool transformer_at(int level) const {
    return (level == 2 && transformer_e2) || (level == 3 && transformer_e3) ||
           (level == 4 && transformer_e4);
  }
  int channels(int level) const { return base_channels << (level - 1); }
  uint64_t hash() const;
};

struct Param {
  std::string name;
  Tensor tensor;
};

struct StageAttention {
  int stage = 0;            // encoder level
  Tensor weights;           // [N, heads, L', L']
};

class SpectrModel {
 public:
  struct Forward {
    Tensor prob_map;    // [H, W] in [0,1]
    Tensor band_probs;  // [L, H, W]
    std::vector<StageAttention> attention;
  };

  SpectrModel(const ModelConfig& cfg, int bands, uint64_t seed);

  Forward forward(const Tensor& cube);  // cube: [L, H, W, 1]

  // The spectral transformer of one encoder stage: embeds each spatial
  // location's band sequence, runs the block, and back-projects to a
  // [L',H,W,C] residual map. Exposed for the weight-sharing and oracle tests.
  Tensor apply_stage_transformer(int level, const Tensor& f,
                                 Tensor* weights = nullptr);
  // z -> MLP(LN(MSA(LN(z)) + z)) + (MSA(LN(z)) + z) on [N, L', D]
  Tensor transformer_block(int level, const Tensor& z0, Tensor* weights = nullptr);

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  size_t param_count() const;

  const ModelConfig& config() const { return cfg_; }
  int bands() const { return bands_; }
  uint64_t seed() const { return seed_; }
  // spectral extent seen by each encoder stage (before that stage's pooling)
  const std::vector<int>& stage_spectral_extents() const { return extents_; }

  // test hook: when set to a level in {1,2,3}, that skip connection is zeroed
  int debug_zero_skip = -1;

 private:
  Tensor conv_norm_relu(const std::string& prefix, int norm_bands, const Tensor& x,
                        bool depthwise);
  Tensor& add_param(const std::string& name, Tensor t);

  ModelConfig cfg_;
  int bands_;
  uint64_t seed_;
  std::vector<int> extents_;
  std::vector<Param> params_;
  std::unordered_map<std::string, size_t> index_;
};

// threshold in (0,1); pixels with prob >= threshold are foreground
Mask predict(const Tensor& prob_map, float threshold = 0.5f);

}  // namespace spectr
