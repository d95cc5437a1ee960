#include "spectr/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "spectr/checkpoint.hpp"
#include "spectr/error.hpp"
#include "spectr/rng.hpp"

namespace spectr {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(lr0 > lr_min) || lr_min < 0.0f)
    throw ConfigError("train: need lr0 > lr_min >= 0");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size != 1) throw ConfigError("train: batch_size must be 1");
  if (weight_decay < 0.0f) throw ConfigError("train: weight_decay must be >= 0");
}

double cosine_lr(int64_t t, int64_t T, double lr0, double lr_min) {
  if (t < 0 || t > T) throw ContractError("cosine_lr: step outside [0, T]");
  return lr_min + 0.5 * (lr0 - lr_min) *
                      (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(t) /
                                      static_cast<double>(T)));
}

AdamState AdamState::init(const std::vector<Param>& params) {
  AdamState st;
  for (const auto& p : params) {
    st.m.push_back(Tensor(p.tensor.shape(), 0.0f));
    st.v.push_back(Tensor(p.tensor.shape(), 0.0f));
  }
  return st;
}

void adam_step(std::vector<Param>& params, AdamState& st, double lr, double weight_decay) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (st.m.size() != params.size())
    throw ContractError("adam: state does not match parameter list");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& t = params[pi].tensor;
    const bool has_g = t.grad_allocated();
    float* th = t.data();
    float* m = st.m[pi].data();
    float* v = st.v[pi].data();
    const float* g = has_g ? t.grad_vec().data() : nullptr;
    for (size_t i = 0; i < t.size(); ++i) {
      const double gi = g ? static_cast<double>(g[i]) : 0.0;
      if (!std::isfinite(gi))
        throw NumericError("adam: non-finite gradient in " + params[pi].name);
      double w = static_cast<double>(th[i]);
      w -= lr * weight_decay * w;
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      w -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
      th[i] = static_cast<float>(w);
    }
  }
}

Tensor dice_bce_loss(const Tensor& prob_map, const Mask& mask) {
  if (prob_map.ndim() != 2 || prob_map.dim(0) != mask.height ||
      prob_map.dim(1) != mask.width)
    throw ShapeError("loss: probability map and mask shapes differ");
  Tensor y({mask.height, mask.width});
  double ysum = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    y.data()[i] = static_cast<float>(mask.values[i]);
    ysum += mask.values[i];
  }
  Tensor p = clamp(prob_map, 1e-6f, 1.0f - 1e-6f);
  // soft Dice with smooth = 1
  Tensor inter = sum_all(mul(p, y));
  Tensor num = add_scalar(mul_scalar(inter, 2.0f), 1.0f);
  Tensor den = add_scalar(sum_all(p), static_cast<float>(ysum) + 1.0f);
  Tensor dice_term = add_scalar(mul_scalar(div(num, den), -1.0f), 1.0f);
  // mean binary cross-entropy
  Tensor one_minus_y = add_scalar(mul_scalar(y, -1.0f), 1.0f);
  Tensor one_minus_p = add_scalar(mul_scalar(p, -1.0f), 1.0f);
  Tensor ll = add(mul(y, log(p)), mul(one_minus_y, log(one_minus_p)));
  Tensor bce = mul_scalar(mean_all(ll), -1.0f);
  return add(mul_scalar(dice_term, 0.5f), mul_scalar(bce, 0.5f));
}

MetricReport evaluate(SpectrModel& model, const Dataset& data, float threshold) {
  NoGradGuard ng;
  MetricReport report;
  for (int idx : data.test_indices) {
    auto out = model.forward(data.cubes[static_cast<size_t>(idx)].to_tensor());
    Mask pred = predict(out.prob_map, threshold);
    const Mask& truth = data.masks[static_cast<size_t>(idx)];
    report.rows.push_back(
        {idx, dsc(pred, truth), iou(pred, truth), hausdorff(pred, truth)});
  }
  return report;
}

double dataset_loss(SpectrModel& model, const Dataset& data,
                    const std::vector<int>& indices) {
  NoGradGuard ng;
  double total = 0.0;
  for (int idx : indices) {
    auto out = model.forward(data.cubes[static_cast<size_t>(idx)].to_tensor());
    total += dice_bce_loss(out.prob_map, data.masks[static_cast<size_t>(idx)]).item();
  }
  return indices.empty() ? 0.0 : total / static_cast<double>(indices.size());
}

TrainResult train(SpectrModel& model, AdamState& adam, const Dataset& data,
                  const TrainConfig& cfg, const fs::path& best_path, int start_epoch) {
  cfg.validate();
  if (data.train_indices.empty()) throw ContractError("train: empty training split");
  TrainResult result;
  const int64_t steps_per_epoch = static_cast<int64_t>(data.train_indices.size());
  const int64_t total_steps = steps_per_epoch * cfg.epochs;
  int64_t step = static_cast<int64_t>(start_epoch) * steps_per_epoch;

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, 0xE70C0000ULL + static_cast<uint64_t>(epoch)));
    std::vector<int> order = data.train_indices;
    shuffle(order, rng);
    double epoch_loss = 0.0;
    for (int idx : order) {
      auto [cube, mask] =
          augment(data.cubes[static_cast<size_t>(idx)], data.masks[static_cast<size_t>(idx)], rng);
      for (auto& p : model.params()) p.tensor.zero_grad();
      Tape::active().clear();
      auto out = model.forward(cube.to_tensor());
      Tensor loss = dice_bce_loss(out.prob_map, mask);
      const double lv = loss.item();
      if (!std::isfinite(lv))
        throw NumericError("train: non-finite loss at step " + std::to_string(step));
      backward(loss);
      adam_step(model.params(), adam, cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min),
                cfg.weight_decay);
      epoch_loss += lv;
      ++step;
    }
    Tape::active().clear();
    MetricReport rep = evaluate(model, data);
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = epoch_loss / static_cast<double>(steps_per_epoch);
    log.test_dsc = rep.mean_dsc();
    result.log.push_back(log);
    std::fprintf(stderr, "epoch %d  loss %.5f  test dsc %.4f\n", epoch, log.train_loss,
                 log.test_dsc);
    if (log.test_dsc > result.best_dsc) {
      result.best_dsc = log.test_dsc;
      result.best_epoch = epoch;
      if (!best_path.empty()) {
        TrainingMeta meta{epoch + 1, step, result.best_dsc};
        save_checkpoint(best_path, model, &cfg, &adam, &meta);
      }
    }
  }
  return result;
}

const std::vector<AblationRow>& ablation_grid() {
  static const std::vector<AblationRow> grid = {
      {"full", true, true, true, true, true, true, 75.21},
      {"conv3d_encoder", false, true, true, true, true, true, 72.79},
      {"only_e4", true, false, false, true, true, true, 72.17},
      {"only_e3", true, false, true, false, true, true, 72.39},
      {"only_e2", true, true, false, false, true, true, 73.21},
      {"no_sn", true, true, true, true, true, false, 70.66},
      {"no_sparsity", true, true, true, true, false, true, 73.28},
      {"conv_only", true, false, false, false, false, false, 70.40},
  };
  return grid;
}

ModelConfig ablation_config(const ModelConfig& base, const AblationRow& row) {
  ModelConfig cfg = base;
  cfg.depthwise_encoder = row.depthwise;
  cfg.transformer_e2 = row.e2;
  cfg.transformer_e3 = row.e3;
  cfg.transformer_e4 = row.e4;
  cfg.sparsity = row.sparsity;
  cfg.spectral_norm = row.sn;
  return cfg;
}

void run_ablation(const Dataset& data, const ModelConfig& base, const TrainConfig& cfg,
                  const fs::path& csv_path) {
  if (data.cubes.empty() || data.train_indices.empty())
    throw ContractError("ablation: empty dataset");
  const int bands = data.cubes[static_cast<size_t>(data.train_indices[0])].bands;
  std::string csv =
      "row,name,depthwise,e2,e3,e4,sparsity,sn,config_hash,param_count,epochs,dsc,"
      "reference_dsc\n";
  char buf[256];
  int row_id = 0;
  for (const AblationRow& row : ablation_grid()) {
    ModelConfig mc = ablation_config(base, row);
    SpectrModel model(mc, bands, cfg.seed);
    AdamState adam = AdamState::init(model.params());
    std::fprintf(stderr, "ablation row %d (%s)\n", row_id, row.name.c_str());
    TrainResult tr = train(model, adam, data, cfg);
    MetricReport rep = evaluate(model, data);
    std::snprintf(buf, sizeof(buf), "%d,%s,%d,%d,%d,%d,%d,%d,%016llx,%zu,%d,%.4f,%.2f\n",
                  row_id, row.name.c_str(), row.depthwise ? 1 : 0, row.e2 ? 1 : 0,
                  row.e3 ? 1 : 0, row.e4 ? 1 : 0, row.sparsity ? 1 : 0, row.sn ? 1 : 0,
                  static_cast<unsigned long long>(mc.hash()), model.param_count(),
                  cfg.epochs, rep.mean_dsc(), row.reference_dsc);
    csv += buf;
    ++row_id;
  }
  std::ofstream out(csv_path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + csv_path.string());
  out << csv;
}

namespace {

Mask halve_mask(const Mask& m) {
  Mask out;
  out.width = (m.width + 1) / 2;
  out.height = (m.height + 1) / 2;
  out.values.assign(static_cast<size_t>(out.width) * out.height, 0);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      uint8_t v = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const int sx = std::min(2 * x + dx, m.width - 1);
          const int sy = std::min(2 * y + dy, m.height - 1);
          v |= m.at(sx, sy);
        }
      out.at(x, y) = v;
    }
  return out;
}

void write_pgm(const fs::path& path, const Tensor& img) {
  const int h = img.dim(0), w = img.dim(1);
  float vmax = 0.0f;
  for (size_t i = 0; i < img.size(); ++i) vmax = std::max(vmax, img.data()[i]);
  std::string bytes = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (size_t i = 0; i < img.size(); ++i) {
    const float v = vmax > 0.0f ? img.data()[i] / vmax : 0.0f;
    bytes.push_back(static_cast<char>(
        static_cast<unsigned char>(std::lround(255.0f * std::min(1.0f, std::max(0.0f, v))))));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

AttentionReport attention_report(SpectrModel& model,
                                 const std::vector<const HsiCube*>& cubes,
                                 const std::vector<const Mask*>& masks,
                                 int window_lo, int window_hi) {
  if (cubes.empty()) throw ContractError("attention_report: no cubes");
  NoGradGuard ng;
  AttentionReport report;
  const int heads = model.config().heads;

  struct Acc {
    int stage = 0;
    int L = 0;
    std::vector<double> zero_count, total;        // per head
    std::vector<double> mass, mass_les, mass_bg;  // per head x key
    double n_rows = 0, n_rows_les = 0, n_rows_bg = 0;
    std::vector<double> heat;  // per head x L x L
  };
  std::vector<Acc> accs;

  for (size_t ci = 0; ci < cubes.size(); ++ci) {
    auto out = model.forward(cubes[ci]->to_tensor());
    Mask location_mask;
    if (ci < masks.size() && masks[ci] != nullptr)
      location_mask = *masks[ci];
    else
      location_mask = predict(out.prob_map, 0.5f);

    for (size_t si = 0; si < out.attention.size(); ++si) {
      const StageAttention& sa = out.attention[si];
      const Tensor& wts = sa.weights;  // [N, heads, L, L]
      const int N = wts.dim(0), L = wts.dim(2);
      if (accs.size() <= si) {
        Acc a;
        a.stage = sa.stage;
        a.L = L;
        a.zero_count.assign(static_cast<size_t>(heads), 0.0);
        a.total.assign(static_cast<size_t>(heads), 0.0);
        a.mass.assign(static_cast<size_t>(heads) * L, 0.0);
        a.mass_les.assign(static_cast<size_t>(heads) * L, 0.0);
        a.mass_bg.assign(static_cast<size_t>(heads) * L, 0.0);
        a.heat.assign(static_cast<size_t>(heads) * L * L, 0.0);
        accs.push_back(std::move(a));
      }
      Acc& acc = accs[si];
      // lesion flags at this stage's spatial resolution
      Mask mk = location_mask;
      for (int l = 1; l < sa.stage; ++l) mk = halve_mask(mk);
      const float* w = wts.data();
      for (int n = 0; n < N; ++n) {
        const bool lesion = mk.values[static_cast<size_t>(n)] != 0;
        for (int h = 0; h < heads; ++h) {
          const float* mat = w + (static_cast<size_t>(n) * heads + h) * L * L;
          double* heat = acc.heat.data() + static_cast<size_t>(h) * L * L;
          for (int q = 0; q < L; ++q) {
            const float* row = mat + static_cast<size_t>(q) * L;
            for (int k = 0; k < L; ++k) {
              const double v = row[k];
              if (row[k] == 0.0f) acc.zero_count[static_cast<size_t>(h)] += 1.0;
              acc.total[static_cast<size_t>(h)] += 1.0;
              acc.mass[static_cast<size_t>(h) * L + k] += v;
              if (lesion)
                acc.mass_les[static_cast<size_t>(h) * L + k] += v;
              else
                acc.mass_bg[static_cast<size_t>(h) * L + k] += v;
              heat[static_cast<size_t>(q) * L + k] += v;
            }
          }
        }
        if (lesion)
          acc.n_rows_les += L;
        else
          acc.n_rows_bg += L;
        acc.n_rows += L;
      }
    }
  }

  for (const Acc& acc : accs) {
    const int L = acc.L;
    const int factor = 1 << (acc.stage - 1);
    int wlen = 0;
    std::vector<bool> in_window(static_cast<size_t>(L), false);
    for (int k = 0; k < L; ++k) {
      const int lo = k * factor, hi = (k + 1) * factor - 1;
      if (hi >= window_lo && lo <= window_hi) {
        in_window[static_cast<size_t>(k)] = true;
        ++wlen;
      }
    }
    for (int h = 0; h < heads; ++h) {
      HeadStats hs;
      hs.stage = acc.stage;
      hs.head = h;
      hs.seq_len = L;
      hs.window_len = wlen;
      const std::string alpha_name =
          "enc" + std::to_string(acc.stage) + ".tr.alpha_raw";
      if (model.config().sparsity && model.has_param(alpha_name)) {
        const float raw = model.param(alpha_name).data()[h];
        hs.alpha = 1.0 + 1.0 / (1.0 + std::exp(-static_cast<double>(raw)));
      } else {
        hs.alpha = 1.0;
      }
      hs.zero_fraction = acc.total[static_cast<size_t>(h)] > 0
                             ? acc.zero_count[static_cast<size_t>(h)] /
                                   acc.total[static_cast<size_t>(h)]
                             : 0.0;
      hs.key_mass.resize(static_cast<size_t>(L));
      hs.key_mass_lesion.resize(static_cast<size_t>(L));
      hs.key_mass_background.resize(static_cast<size_t>(L));
      const double rows_all = acc.n_rows;
      for (int k = 0; k < L; ++k) {
        hs.key_mass[static_cast<size_t>(k)] =
            rows_all > 0 ? acc.mass[static_cast<size_t>(h) * L + k] / rows_all : 0.0;
        hs.key_mass_lesion[static_cast<size_t>(k)] =
            acc.n_rows_les > 0 ? acc.mass_les[static_cast<size_t>(h) * L + k] / acc.n_rows_les
                               : 0.0;
        hs.key_mass_background[static_cast<size_t>(k)] =
            acc.n_rows_bg > 0 ? acc.mass_bg[static_cast<size_t>(h) * L + k] / acc.n_rows_bg
                              : 0.0;
        if (in_window[static_cast<size_t>(k)])
          hs.window_mass += hs.key_mass[static_cast<size_t>(k)];
      }
      hs.uniform_baseline = static_cast<double>(wlen) / static_cast<double>(L);
      hs.mass_ratio = hs.uniform_baseline > 0 ? hs.window_mass / hs.uniform_baseline : 0.0;
      report.heads.push_back(std::move(hs));

      Tensor heat({L, L});
      const double denom = acc.n_rows > 0 ? acc.n_rows / L : 1.0;  // matrices averaged
      for (int q = 0; q < L; ++q)
        for (int k = 0; k < L; ++k)
          heat.data()[static_cast<size_t>(q) * L + k] = static_cast<float>(
              acc.heat[(static_cast<size_t>(h) * L + q) * L + k] / denom);
      report.heatmaps.push_back(
          {"attn_s" + std::to_string(acc.stage) + "_h" + std::to_string(h), heat});
    }
  }
  return report;
}

void write_attention_report(const AttentionReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  std::string summary =
      "stage,head,alpha,zero_fraction,seq_len,window_len,window_mass,uniform_baseline,"
      "mass_ratio\n";
  std::string key_mass = "stage,head,key,mass_all,mass_lesion,mass_background\n";
  char buf[256];
  for (const HeadStats& hs : report.heads) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%.6f,%d,%d,%.6f,%.6f,%.6f\n", hs.stage,
                  hs.head, hs.alpha, hs.zero_fraction, hs.seq_len, hs.window_len,
                  hs.window_mass, hs.uniform_baseline, hs.mass_ratio);
    summary += buf;
    for (int k = 0; k < hs.seq_len; ++k) {
      std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.6f,%.6f,%.6f\n", hs.stage, hs.head, k,
                    hs.key_mass[static_cast<size_t>(k)],
                    hs.key_mass_lesion[static_cast<size_t>(k)],
                    hs.key_mass_background[static_cast<size_t>(k)]);
      key_mass += buf;
    }
  }
  std::ofstream s(dir / "summary.csv", std::ios::trunc);
  s << summary;
  std::ofstream k(dir / "key_mass.csv", std::ios::trunc);
  k << key_mass;
  for (const auto& [name, heat] : report.heatmaps)
    write_pgm(dir / (name + ".pgm"), heat);
}

}  // namespace spectr
