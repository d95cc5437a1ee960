#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "spectr/checkpoint.hpp"
#include "spectr/data.hpp"
#include "spectr/error.hpp"
#include "spectr/gradcheck.hpp"
#include "spectr/metrics.hpp"
#include "spectr/model.hpp"
#include "spectr/threading.hpp"
#include "spectr/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace spectr;

namespace {

json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    // nlohmann reports line/column in the message
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key()))
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

ModelConfig parse_model_cfg(const json& root) {
  ModelConfig cfg;
  if (!root.contains("model")) return cfg;
  const json& j = root.at("model");
  check_keys(j,
             {"base_channels", "levels", "heads", "groups", "transformer_e2",
              "transformer_e3", "transformer_e4", "sparsity", "spectral_norm",
              "depthwise_encoder", "share_band_filters"},
             "model");
  if (j.contains("base_channels")) cfg.base_channels = j.at("base_channels").get<int>();
  if (j.contains("levels")) cfg.levels = j.at("levels").get<int>();
  if (j.contains("heads")) cfg.heads = j.at("heads").get<int>();
  if (j.contains("groups")) cfg.groups = j.at("groups").get<int>();
  if (j.contains("transformer_e2")) cfg.transformer_e2 = j.at("transformer_e2").get<bool>();
  if (j.contains("transformer_e3")) cfg.transformer_e3 = j.at("transformer_e3").get<bool>();
  if (j.contains("transformer_e4")) cfg.transformer_e4 = j.at("transformer_e4").get<bool>();
  if (j.contains("sparsity")) cfg.sparsity = j.at("sparsity").get<bool>();
  if (j.contains("spectral_norm")) cfg.spectral_norm = j.at("spectral_norm").get<bool>();
  if (j.contains("depthwise_encoder"))
    cfg.depthwise_encoder = j.at("depthwise_encoder").get<bool>();
  if (j.contains("share_band_filters"))
    cfg.share_band_filters = j.at("share_band_filters").get<bool>();
  return cfg;
}

TrainConfig parse_train_cfg(const json& root, int default_epochs) {
  TrainConfig cfg;
  cfg.epochs = default_epochs;
  if (!root.contains("train")) return cfg;
  const json& j = root.at("train");
  check_keys(j, {"lr0", "lr_min", "weight_decay", "batch_size", "epochs", "seed"},
             "train");
  if (j.contains("lr0")) cfg.lr0 = j.at("lr0").get<float>();
  if (j.contains("lr_min")) cfg.lr_min = j.at("lr_min").get<float>();
  if (j.contains("weight_decay")) cfg.weight_decay = j.at("weight_decay").get<float>();
  if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
  if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<int>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
  return cfg;
}

PhantomConfig parse_phantom_cfg(const json& root) {
  PhantomConfig cfg;
  if (!root.contains("phantom")) return cfg;
  const json& j = root.at("phantom");
  check_keys(j,
             {"width", "height", "bands", "window_lo", "window_hi", "delta", "sigma",
              "min_lesions", "max_lesions", "min_coverage", "max_coverage", "seed"},
             "phantom");
  if (j.contains("width")) cfg.width = j.at("width").get<int>();
  if (j.contains("height")) cfg.height = j.at("height").get<int>();
  if (j.contains("bands")) cfg.bands = j.at("bands").get<int>();
  if (j.contains("window_lo")) cfg.window_lo = j.at("window_lo").get<int>();
  if (j.contains("window_hi")) cfg.window_hi = j.at("window_hi").get<int>();
  if (j.contains("delta")) cfg.delta = j.at("delta").get<float>();
  if (j.contains("sigma")) cfg.sigma = j.at("sigma").get<float>();
  if (j.contains("min_lesions")) cfg.min_lesions = j.at("min_lesions").get<int>();
  if (j.contains("max_lesions")) cfg.max_lesions = j.at("max_lesions").get<int>();
  if (j.contains("min_coverage")) cfg.min_coverage = j.at("min_coverage").get<float>();
  if (j.contains("max_coverage")) cfg.max_coverage = j.at("max_coverage").get<float>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
  return cfg;
}

void validate_config_sections(const json& root) {
  check_keys(root, {"model", "train", "phantom"}, "config");
}

int bands_of(const Dataset& ds) {
  if (ds.train_indices.empty()) throw ConfigError("dataset has an empty training split");
  return ds.cubes[static_cast<size_t>(ds.train_indices[0])].bands;
}

struct GenArgs {
  std::string out;
  int n = 0;
  int width = 32, height = 32, bands = 30;
  uint64_t seed = 0;
  double delta = 0.4, sigma = 0.1;
  int window_lo = 8, window_hi = 13;
  bool force = false;
};

int cmd_gen(const GenArgs& a) {
  if (a.n < 1) throw ConfigError("gen: --n must be positive");
  if (a.bands < 1) throw ConfigError("gen: --bands must be positive");
  if (a.width < 1 || a.height < 1) throw ConfigError("gen: dimensions must be positive");
  const fs::path dir(a.out);
  if (fs::exists(dir) && !fs::is_empty(dir) && !a.force)
    throw ConfigError("gen: output directory " + dir.string() +
                      " is not empty (use --force to overwrite)");
  PhantomConfig cfg;
  cfg.width = a.width;
  cfg.height = a.height;
  cfg.bands = a.bands;
  cfg.window_lo = a.window_lo;
  cfg.window_hi = a.window_hi;
  cfg.delta = static_cast<float>(a.delta);
  cfg.sigma = static_cast<float>(a.sigma);
  cfg.seed = a.seed;
  write_dataset(dir, a.n, cfg);
  std::fprintf(stderr, "wrote %d cube/mask pairs to %s\n", a.n, dir.string().c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_ckpt) {
  const json root = load_json(config_path);
  validate_config_sections(root);
  const ModelConfig mc = parse_model_cfg(root);
  const TrainConfig tc = parse_train_cfg(root, 20);
  tc.validate();
  Dataset ds = load_dataset(data_dir);
  SpectrModel model(mc, bands_of(ds), tc.seed);
  AdamState adam = AdamState::init(model.params());
  TrainResult result = train(model, adam, ds, tc, out_ckpt);
  std::fprintf(stderr, "best test dsc %.4f (epoch %d), checkpoint %s\n", result.best_dsc,
               result.best_epoch, out_ckpt.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& report_path) {
  LoadedCheckpoint ck = load_checkpoint(ckpt_path);
  SpectrModel model = restore_model(ck);
  Dataset ds = load_dataset(data_dir);
  MetricReport report = evaluate(model, ds);
  std::ofstream out(report_path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + report_path);
  out << report.to_csv();
  std::fprintf(stderr, "evaluated %zu images, mean dsc %.4f -> %s\n", report.rows.size(),
               report.mean_dsc(), report_path.c_str());
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& data_dir,
               const std::string& out_csv) {
  const json root = load_json(config_path);
  validate_config_sections(root);
  const ModelConfig mc = parse_model_cfg(root);
  const TrainConfig tc = parse_train_cfg(root, 5);
  tc.validate();
  Dataset ds = load_dataset(data_dir);
  run_ablation(ds, mc, tc, out_csv);
  std::fprintf(stderr, "ablation grid written to %s\n", out_csv.c_str());
  return 0;
}

int cmd_attn(const std::string& ckpt_path, const std::string& cube_path,
             const std::string& out_dir, int window_lo, int window_hi) {
  LoadedCheckpoint ck = load_checkpoint(ckpt_path);
  SpectrModel model = restore_model(ck);
  HsiCube cube = read_cube(cube_path);
  AttentionReport report =
      attention_report(model, {&cube}, {nullptr}, window_lo, window_hi);
  write_attention_report(report, out_dir);
  std::fprintf(stderr, "attention report written to %s\n", out_dir.c_str());
  return 0;
}

int cmd_gradcheck(uint64_t seed) {
  const auto results = run_gradcheck(seed);
  bool all_pass = true;
  for (const auto& r : results) {
    std::printf("%-32s max rel err %.3e  (tol %.0e)  %s\n", r.name.c_str(),
                r.max_rel_err, r.tolerance, r.pass ? "PASS" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spectral-transformer hyperspectral segmentation toolkit"};
  app.require_subcommand(1);
  bool det = true;
  app.add_flag("--deterministic,!--no-deterministic", det,
               "fix reduction order (bit-identical results for any thread count)");

  GenArgs gen;
  auto* sgen = app.add_subcommand("gen", "generate a synthetic phantom dataset");
  sgen->add_option("--out", gen.out, "output directory")->required();
  sgen->add_option("--n", gen.n, "number of cube/mask pairs")->required();
  sgen->add_option("--width", gen.width, "cube width");
  sgen->add_option("--height", gen.height, "cube height");
  sgen->add_option("--bands", gen.bands, "spectral bands");
  sgen->add_option("--seed", gen.seed, "rng seed");
  sgen->add_option("--delta", gen.delta, "lesion amplitude");
  sgen->add_option("--sigma", gen.sigma, "noise level");
  sgen->add_option("--window-lo", gen.window_lo, "discriminative window start band");
  sgen->add_option("--window-hi", gen.window_hi, "discriminative window end band");
  sgen->add_flag("--force", gen.force, "overwrite a non-empty directory");

  std::string cfg_path, data_dir, out_path, ckpt_path, cube_path;
  int window_lo = 8, window_hi = 13;
  uint64_t gc_seed = 0;

  auto* strain = app.add_subcommand("train", "train a model on a dataset");
  strain->add_option("--config", cfg_path, "JSON run config")->required();
  strain->add_option("--data", data_dir, "dataset directory")->required();
  strain->add_option("--out", out_path, "output checkpoint")->required();

  auto* seval = app.add_subcommand("eval", "evaluate a checkpoint");
  seval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  seval->add_option("--data", data_dir, "dataset directory")->required();
  seval->add_option("--report", out_path, "output CSV")->required();

  auto* sablate = app.add_subcommand("ablate", "train/evaluate the ablation grid");
  sablate->add_option("--config", cfg_path, "JSON run config")->required();
  sablate->add_option("--data", data_dir, "dataset directory")->required();
  sablate->add_option("--out", out_path, "output CSV")->required();

  auto* sattn = app.add_subcommand("attn", "export attention statistics");
  sattn->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  sattn->add_option("--cube", cube_path, "input cube (.hsc)")->required();
  sattn->add_option("--out", out_path, "output directory")->required();
  sattn->add_option("--window-lo", window_lo, "discriminative window start band");
  sattn->add_option("--window-hi", window_hi, "discriminative window end band");

  auto* sgrad = app.add_subcommand("gradcheck", "finite-difference self verification");
  sgrad->add_option("--seed", gc_seed, "rng seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  set_deterministic(det);

  try {
    if (sgen->parsed()) return cmd_gen(gen);
    if (strain->parsed()) return cmd_train(cfg_path, data_dir, out_path);
    if (seval->parsed()) return cmd_eval(ckpt_path, data_dir, out_path);
    if (sablate->parsed()) return cmd_ablate(cfg_path, data_dir, out_path);
    if (sattn->parsed()) return cmd_attn(ckpt_path, cube_path, out_path, window_lo, window_hi);
    if (sgrad->parsed()) return cmd_gradcheck(gc_seed);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 1;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
