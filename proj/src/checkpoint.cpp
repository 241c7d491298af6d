#include "iqt/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace iqt {

namespace {

constexpr char kMagic[4] = {'I', 'Q', 'T', 'C'};
constexpr std::uint8_t kVersion = 0x01;

template <class T>
void put(std::ostream& f, T x) {
  f.write(reinterpret_cast<const char*>(&x), sizeof(T));
}

template <class T>
T take(std::istream& f) {
  T x;
  if (!f.read(reinterpret_cast<char*>(&x), sizeof(T)))
    throw CheckpointError("truncated checkpoint");
  return x;
}

nlohmann::ordered_json config_json(const DenoiserConfig& cfg) {
  nlohmann::ordered_json j;
  j["patch"] = cfg.patch;
  j["in_channels"] = cfg.in_channels;
  j["filters"] = cfg.filters;
  j["token_size"] = cfg.token_size;
  j["heads"] = cfg.heads;
  j["embed_dim"] = cfg.embed_dim;
  j["dfe_depth"] = cfg.dfe_depth;
  j["shuffle_r"] = cfg.shuffle_r;
  j["halo"] = cfg.halo;
  j["skip_scale"] = cfg.skip_scale;
  j["norm_groups"] = cfg.norm_groups;
  j["use_cross_batch"] = cfg.use_cross_batch;
  j["cond_residual"] = cfg.cond_residual;
  return j;
}

DenoiserConfig config_from(const nlohmann::json& j) {
  DenoiserConfig cfg;
  cfg.patch = j.at("patch");
  cfg.in_channels = j.at("in_channels");
  cfg.filters = j.at("filters").get<std::vector<int>>();
  cfg.token_size = j.at("token_size").get<std::vector<int>>();
  cfg.heads = j.at("heads");
  cfg.embed_dim = j.at("embed_dim");
  cfg.dfe_depth = j.at("dfe_depth");
  cfg.shuffle_r = j.at("shuffle_r");
  cfg.halo = j.at("halo");
  cfg.skip_scale = j.at("skip_scale");
  cfg.norm_groups = j.at("norm_groups");
  cfg.use_cross_batch = j.at("use_cross_batch");
  cfg.cond_residual = j.value("cond_residual", true);
  return cfg;
}

nlohmann::ordered_json train_json(const TrainConfig& tc) {
  nlohmann::ordered_json j;
  j["learning_rate"] = tc.learning_rate;
  j["steps"] = tc.steps;
  j["seed"] = tc.seed;
  j["parametrization"] = pred_kind_to_string(tc.parametrization);
  j["beta1"] = tc.beta1;
  j["beta2"] = tc.beta2;
  j["adam_eps"] = tc.adam_eps;
  j["log_every"] = tc.log_every;
  j["grad_accum"] = tc.grad_accum;
  j["augment"] = tc.augment;
  return j;
}

TrainConfig train_from(const nlohmann::json& j) {
  TrainConfig tc;
  tc.learning_rate = j.at("learning_rate");
  tc.steps = j.at("steps");
  tc.seed = j.at("seed");
  tc.parametrization = pred_kind_from_string(j.at("parametrization"));
  tc.beta1 = j.at("beta1");
  tc.beta2 = j.at("beta2");
  tc.adam_eps = j.at("adam_eps");
  tc.log_every = j.at("log_every");
  tc.grad_accum = j.at("grad_accum");
  tc.augment = j.value("augment", true);
  return tc;
}

void write_store(std::ostream& f, const std::string& prefix,
                 const ParamStore& ps) {
  for (const auto& [name, t] : ps) {
    std::string full = prefix + name;
    put(f, (std::uint16_t)full.size());
    f.write(full.data(), (std::streamsize)full.size());
    put(f, (std::uint8_t)t.shape.size());
    for (int d : t.shape) put(f, (std::uint32_t)d);
  }
}

}  // namespace

std::string denoiser_config_to_json(const DenoiserConfig& cfg) {
  return config_json(cfg).dump();
}

DenoiserConfig denoiser_config_from_json(const std::string& json_text) {
  return config_from(nlohmann::json::parse(json_text));
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open for writing: " + path);
  f.write(kMagic, 4);
  put(f, kVersion);

  nlohmann::ordered_json j;
  j["denoiser"] = config_json(ck.config);
  j["train"] = train_json(ck.train);
  j["step"] = ck.step;
  j["rng_state"] = ck.rng_state;
  std::string js = j.dump();
  put(f, (std::uint32_t)js.size());
  f.write(js.data(), (std::streamsize)js.size());

  std::uint32_t count = (std::uint32_t)(ck.params.size() + ck.adam_m.size() +
                                        ck.adam_v.size());
  put(f, count);
  write_store(f, "p:", ck.params);
  write_store(f, "m:", ck.adam_m);
  write_store(f, "v:", ck.adam_v);
  auto write_payload = [&](const ParamStore& ps) {
    for (const auto& [name, t] : ps)
      f.write(reinterpret_cast<const char*>(t.v.data()),
              (std::streamsize)(t.v.size() * 4));
  };
  write_payload(ck.params);
  write_payload(ck.adam_m);
  write_payload(ck.adam_v);
  if (!f) throw CheckpointError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open: " + path);
  char magic[4];
  if (!f.read(magic, 4)) throw CheckpointError("truncated checkpoint");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError("bad checkpoint magic in " + path);
  auto version = take<std::uint8_t>(f);
  if (version != kVersion)
    throw CheckpointError("unsupported checkpoint version");

  auto jlen = take<std::uint32_t>(f);
  std::string js((size_t)jlen, '\0');
  if (!f.read(js.data(), jlen)) throw CheckpointError("truncated config block");
  nlohmann::json j = nlohmann::json::parse(js);

  Checkpoint ck;
  ck.config = config_from(j.at("denoiser"));
  ck.train = train_from(j.at("train"));
  ck.step = j.at("step");
  ck.rng_state = j.at("rng_state");

  auto count = take<std::uint32_t>(f);
  struct Entry {
    std::string name;
    std::vector<int> shape;
  };
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto nlen = take<std::uint16_t>(f);
    std::string name((size_t)nlen, '\0');
    if (!f.read(name.data(), nlen)) throw CheckpointError("truncated name table");
    auto ndim = take<std::uint8_t>(f);
    std::vector<int> shape((size_t)ndim);
    for (auto& d : shape) d = (int)take<std::uint32_t>(f);
    entries.push_back({std::move(name), std::move(shape)});
  }
  for (const auto& e : entries) {
    Tensor<float> t(e.shape);
    if (!f.read(reinterpret_cast<char*>(t.v.data()),
                (std::streamsize)(t.v.size() * 4)))
      throw CheckpointError("truncated tensor payload: " + e.name);
    if (e.name.size() < 3 || e.name[1] != ':')
      throw CheckpointError("bad tensor name: " + e.name);
    std::string base = e.name.substr(2);
    switch (e.name[0]) {
      case 'p': ck.params.emplace(base, std::move(t)); break;
      case 'm': ck.adam_m.emplace(base, std::move(t)); break;
      case 'v': ck.adam_v.emplace(base, std::move(t)); break;
      default: throw CheckpointError("bad tensor prefix: " + e.name);
    }
  }
  // structural cross-check against the config
  ParamStore expect = init_params(ck.config, 0);
  if (expect.size() != ck.params.size())
    throw CheckpointError("checkpoint does not match its config (tensor count)");
  for (const auto& [name, t] : expect) {
    auto it = ck.params.find(name);
    if (it == ck.params.end())
      throw CheckpointError("checkpoint missing tensor: " + name);
    if (it->second.shape != t.shape)
      throw CheckpointError("checkpoint tensor shape mismatch: " + name);
  }
  return ck;
}

}  // namespace iqt
