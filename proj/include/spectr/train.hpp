#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spectr/data.hpp"
#include "spectr/metrics.hpp"
#include "spectr/model.hpp"

namespace spectr {

struct TrainConfig {
  float lr0 = 3e-4f;
  float lr_min = 0.0f;
  float weight_decay = 5e-4f;
  int batch_size = 1;
  int epochs = 20;
  uint64_t seed = 0;

  void validate() const;
};

// lr_min + 0.5 (lr0 - lr_min)(1 + cos(pi t / T)); t in [0, T]
double cosine_lr(int64_t t, int64_t T, double lr0, double lr_min);

struct AdamState {
  std::vector<Tensor> m, v;  // parallel to the model's parameter list
  int64_t step = 0;

  static AdamState init(const std::vector<Param>& params);
};

// Adam (beta1=0.9, beta2=0.999, eps=1e-8) with decoupled weight decay applied
// as theta <- theta - lr wd theta before the moment update. Parameters whose
// gradient buffer was never touched are treated as zero-gradient.
void adam_step(std::vector<Param>& params, AdamState& st, double lr, double weight_decay);

// 0.5 (1 - soft Dice, smooth=1) + 0.5 mean BCE on the band-averaged map,
// probabilities clipped to [1e-6, 1 - 1e-6]
Tensor dice_bce_loss(const Tensor& prob_map, const Mask& mask);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double test_dsc = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  double best_dsc = -1.0;
  int best_epoch = -1;
};

// Seeded-shuffle epochs of augment -> forward -> loss -> backward -> Adam with
// the cosine schedule over all epochs * |train| steps. Per-epoch RNG streams
// are derived from (seed, epoch), so resuming from an epoch-boundary
// checkpoint reproduces the remaining steps exactly. Saves the best-test-DSC
// checkpoint to best_path when non-empty. NaN losses abort with the step index.
TrainResult train(SpectrModel& model, AdamState& adam, const Dataset& data,
                  const TrainConfig& cfg,
                  const std::filesystem::path& best_path = {}, int start_epoch = 0);

MetricReport evaluate(SpectrModel& model, const Dataset& data, float threshold = 0.5f);

// mean dice_bce_loss over a list of items, no augmentation, no recording
double dataset_loss(SpectrModel& model, const Dataset& data, const std::vector<int>& indices);

struct AblationRow {
  std::string name;
  bool depthwise, e2, e3, e4, sparsity, sn;
  double reference_dsc;  // published full-scale benchmark score, for context
};

const std::vector<AblationRow>& ablation_grid();
ModelConfig ablation_config(const ModelConfig& base, const AblationRow& row);

// Trains and evaluates every grid row, writing one CSV line per row.
void run_ablation(const Dataset& data, const ModelConfig& base, const TrainConfig& cfg,
                  const std::filesystem::path& csv_path);

struct HeadStats {
  int stage = 0;
  int head = 0;
  double alpha = 0.0;  // 1 when the softmax path is active
  double zero_fraction = 0.0;
  int seq_len = 0;
  int window_len = 0;       // window size in stage key positions
  double window_mass = 0.0; // averaged attention mass on the window keys
  double uniform_baseline = 0.0;
  double mass_ratio = 0.0;
  std::vector<double> key_mass;             // per key, averaged everywhere
  std::vector<double> key_mass_lesion;      // averaged over lesion locations
  std::vector<double> key_mass_background;  // averaged over background locations
};

struct AttentionReport {
  std::vector<HeadStats> heads;
  // averaged query x key attention matrix per (stage, head)
  std::vector<std::pair<std::string, Tensor>> heatmaps;
};

// Aggregates attention over the given cubes: zero fraction, per-key mass split
// by lesion vs background (ground-truth masks when provided, otherwise the
// model's own prediction), and band-window mass against the uniform baseline.
AttentionReport attention_report(SpectrModel& model,
                                 const std::vector<const HsiCube*>& cubes,
                                 const std::vector<const Mask*>& masks,
                                 int window_lo, int window_hi);

// summary.csv + key_mass.csv + one P5 PGM heatmap per (stage, head)
void write_attention_report(const AttentionReport& report,
                            const std::filesystem::path& dir);

}  // namespace spectr
