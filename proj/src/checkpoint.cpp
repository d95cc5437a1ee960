#include "spectr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "spectr/error.hpp"

namespace spectr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr uint32_t kVersion = 1;

void put_u32le(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

uint32_t get_u32le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

json model_cfg_to_json(const ModelConfig& c, int bands, uint64_t seed) {
  json j;
  j["base_channels"] = c.base_channels;
  j["levels"] = c.levels;
  j["heads"] = c.heads;
  j["groups"] = c.groups;
  j["transformer_e2"] = c.transformer_e2;
  j["transformer_e3"] = c.transformer_e3;
  j["transformer_e4"] = c.transformer_e4;
  j["sparsity"] = c.sparsity;
  j["spectral_norm"] = c.spectral_norm;
  j["depthwise_encoder"] = c.depthwise_encoder;
  j["share_band_filters"] = c.share_band_filters;
  j["bands"] = bands;
  j["seed"] = seed;
  return j;
}

}  // namespace

void save_checkpoint(const fs::path& path, const SpectrModel& model,
                     const TrainConfig* train_cfg, const AdamState* adam,
                     const TrainingMeta* meta) {
  json j;
  j["model"] = model_cfg_to_json(model.config(), model.bands(), model.seed());
  if (train_cfg) {
    json t;
    t["lr0"] = train_cfg->lr0;
    t["lr_min"] = train_cfg->lr_min;
    t["weight_decay"] = train_cfg->weight_decay;
    t["batch_size"] = train_cfg->batch_size;
    t["epochs"] = train_cfg->epochs;
    t["seed"] = train_cfg->seed;
    j["train"] = t;
  }
  if (meta) {
    json s;
    s["epoch"] = meta->epoch;
    s["step"] = meta->step;
    s["best_dsc"] = meta->best_dsc;
    j["state"] = s;
  }

  std::vector<std::pair<std::string, const Tensor*>> tensors;
  for (const auto& p : model.params()) tensors.push_back({"model/" + p.name, &p.tensor});
  if (adam) {
    const auto& params = model.params();
    if (adam->m.size() != params.size())
      throw ContractError("checkpoint: optimizer state does not match model");
    for (size_t i = 0; i < params.size(); ++i) {
      tensors.push_back({"adam_m/" + params[i].name, &adam->m[i]});
      tensors.push_back({"adam_v/" + params[i].name, &adam->v[i]});
    }
    j["adam_step"] = adam->step;
  }

  uint64_t offset = 0;
  json dir = json::array();
  for (const auto& [name, t] : tensors) {
    json e;
    e["name"] = name;
    e["shape"] = t->shape();
    e["offset"] = offset;
    dir.push_back(e);
    offset += t->size() * 4;
  }
  j["tensors"] = dir;

  const std::string header = j.dump();
  std::string bytes;
  bytes.reserve(12 + header.size() + offset);
  bytes += "SPTR";
  put_u32le(bytes, kVersion);
  put_u32le(bytes, static_cast<uint32_t>(header.size()));
  bytes += header;
  for (const auto& [name, t] : tensors) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes.append(reinterpret_cast<const char*>(t->data()), t->size() * 4);
    } else {
      for (size_t i = 0; i < t->size(); ++i)
        put_u32le(bytes, std::bit_cast<uint32_t>(t->data()[i]));
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12)
    throw FormatError(path.string() + ": truncated header, " +
                      std::to_string(bytes.size()) + " bytes present, 12 required");
  if (bytes.compare(0, 4, "SPTR") != 0)
    throw FormatError(path.string() + ": bad magic at byte 0, expected 'SPTR'");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const uint32_t version = get_u32le(p + 4);
  if (version != kVersion)
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  const uint32_t hlen = get_u32le(p + 8);
  if (bytes.size() < 12 + static_cast<size_t>(hlen))
    throw FormatError(path.string() + ": truncated JSON header at byte 12");
  json j;
  try {
    j = json::parse(bytes.substr(12, hlen));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": header parse error: " + e.what());
  }

  LoadedCheckpoint ck;
  const json& m = j.at("model");
  ck.model_cfg.base_channels = m.at("base_channels").get<int>();
  ck.model_cfg.levels = m.at("levels").get<int>();
  ck.model_cfg.heads = m.at("heads").get<int>();
  ck.model_cfg.groups = m.at("groups").get<int>();
  ck.model_cfg.transformer_e2 = m.at("transformer_e2").get<bool>();
  ck.model_cfg.transformer_e3 = m.at("transformer_e3").get<bool>();
  ck.model_cfg.transformer_e4 = m.at("transformer_e4").get<bool>();
  ck.model_cfg.sparsity = m.at("sparsity").get<bool>();
  ck.model_cfg.spectral_norm = m.at("spectral_norm").get<bool>();
  ck.model_cfg.depthwise_encoder = m.at("depthwise_encoder").get<bool>();
  ck.model_cfg.share_band_filters = m.at("share_band_filters").get<bool>();
  ck.bands = m.at("bands").get<int>();
  ck.seed = m.at("seed").get<uint64_t>();
  if (j.contains("train")) {
    const json& t = j.at("train");
    ck.train_cfg.lr0 = t.at("lr0").get<float>();
    ck.train_cfg.lr_min = t.at("lr_min").get<float>();
    ck.train_cfg.weight_decay = t.at("weight_decay").get<float>();
    ck.train_cfg.batch_size = t.at("batch_size").get<int>();
    ck.train_cfg.epochs = t.at("epochs").get<int>();
    ck.train_cfg.seed = t.at("seed").get<uint64_t>();
    ck.has_train_cfg = true;
  }
  if (j.contains("state")) {
    const json& s = j.at("state");
    ck.meta.epoch = s.at("epoch").get<int>();
    ck.meta.step = s.at("step").get<int64_t>();
    ck.meta.best_dsc = s.at("best_dsc").get<double>();
  }

  const size_t payload_off = 12 + hlen;
  const size_t payload_len = bytes.size() - payload_off;
  for (const json& e : j.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    const std::vector<int> shape = e.at("shape").get<std::vector<int>>();
    const uint64_t offset = e.at("offset").get<uint64_t>();
    const size_t n = shape_numel(shape);
    if (offset + n * 4 > payload_len)
      throw FormatError(path.string() + ": tensor '" + name +
                        "' payload out of range at byte " +
                        std::to_string(payload_off + offset));
    std::vector<float> vals(n);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(vals.data(), bytes.data() + payload_off + offset, n * 4);
    } else {
      const auto* q = reinterpret_cast<const unsigned char*>(bytes.data()) + payload_off + offset;
      for (size_t i = 0; i < n; ++i)
        vals[i] = std::bit_cast<float>(get_u32le(q + i * 4));
    }
    ck.tensors.push_back({name, Tensor::from(shape, std::move(vals))});
  }
  if (j.contains("adam_step")) ck.adam_step = j.at("adam_step").get<int64_t>();
  return ck;
}

SpectrModel restore_model(const LoadedCheckpoint& ck) {
  SpectrModel model(ck.model_cfg, ck.bands, ck.seed);
  size_t restored = 0;
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("model/", 0) != 0) continue;
    const std::string pname = name.substr(6);
    if (!model.has_param(pname))
      throw FormatError("checkpoint: unknown model parameter '" + pname + "'");
    Tensor& dst = model.param(pname);
    if (dst.shape() != t.shape())
      throw FormatError("checkpoint: shape mismatch for '" + pname + "'");
    std::memcpy(dst.data(), t.data(), t.size() * sizeof(float));
    ++restored;
  }
  if (restored != model.params().size())
    throw FormatError("checkpoint: tensor directory covers " + std::to_string(restored) +
                      " of " + std::to_string(model.params().size()) + " parameters");
  return model;
}

std::optional<AdamState> restore_adam(const LoadedCheckpoint& ck, const SpectrModel& model) {
  bool any = false;
  for (const auto& [name, t] : ck.tensors)
    if (name.rfind("adam_m/", 0) == 0) any = true;
  if (!any) return std::nullopt;
  AdamState st = AdamState::init(model.params());
  size_t found = 0;
  for (const auto& [name, t] : ck.tensors) {
    bool is_m = name.rfind("adam_m/", 0) == 0;
    bool is_v = name.rfind("adam_v/", 0) == 0;
    if (!is_m && !is_v) continue;
    const std::string pname = name.substr(7);
    bool matched = false;
    for (size_t i = 0; i < model.params().size(); ++i) {
      if (model.params()[i].name == pname) {
        Tensor& dst = is_m ? st.m[i] : st.v[i];
        if (dst.shape() != t.shape())
          throw FormatError("checkpoint: optimizer shape mismatch for '" + pname + "'");
        std::memcpy(dst.data(), t.data(), t.size() * sizeof(float));
        matched = true;
        ++found;
        break;
      }
    }
    if (!matched)
      throw FormatError("checkpoint: optimizer tensor for unknown parameter '" + pname + "'");
  }
  if (found != 2 * model.params().size())
    throw FormatError("checkpoint: incomplete optimizer state");
  st.step = ck.adam_step;
  return st;
}

}  // namespace spectr
