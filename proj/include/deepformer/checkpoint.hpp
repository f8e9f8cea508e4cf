#pragma once

#include <bit>
#include <memory>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepformer/admin.hpp"
#include "deepformer/errors.hpp"
#include "deepformer/model.hpp"
#include "deepformer/runconfig.hpp"

namespace deepformer {

// sidecar metadata next to the raw parameter blob. The blob is always raw
// little-endian 32-bit floats in parameter order; everything needed to
// rebuild the model lives in the JSON
struct CheckpointMeta {
  int format_version = 1;
  std::string endianness = "little";
  std::string init_mode = "default";  // default | admin | folded
  uint64_t step_count = 0;
  RunConfig run_config;
  std::vector<double> omegas;
  std::vector<double> ln_eps;
  std::optional<OmegaProfile> profile;
  std::vector<std::pair<std::string, Shape>> params;
};

namespace detail {

inline void to_little_endian_f32(const float* src, size_t n, std::vector<char>& out) {
  out.resize(n * 4);
  std::memcpy(out.data(), src, n * 4);
  if constexpr (std::endian::native == std::endian::big) {
    for (size_t i = 0; i < n; ++i) {
      std::swap(out[4 * i + 0], out[4 * i + 3]);
      std::swap(out[4 * i + 1], out[4 * i + 2]);
    }
  }
}

inline void from_little_endian_f32(std::vector<char>& bytes) {
  if constexpr (std::endian::native == std::endian::big) {
    for (size_t i = 0; i + 4 <= bytes.size(); i += 4) {
      std::swap(bytes[i + 0], bytes[i + 3]);
      std::swap(bytes[i + 1], bytes[i + 2]);
    }
  }
}

}  // namespace detail

template <typename T>
void save_checkpoint(Transformer<T>& model, const RunConfig& run_config,
                     const std::string& init_mode, uint64_t step_count,
                     const std::string& stem,
                     const OmegaProfile* profile = nullptr) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["endianness"] = "little";
  j["init_mode"] = init_mode;
  j["step_count"] = step_count;
  j["run_config"] = run_config.to_json();
  j["omegas"] = model.omegas();
  j["ln_eps"] = model.ln_eps_per_branch();
  if (profile) j["profile"] = nlohmann::json::parse(profile->to_json());
  j["params"] = nlohmann::json::array();

  std::ofstream blob(stem + ".bin", std::ios::binary);
  if (!blob) throw DataError("cannot write checkpoint blob " + stem + ".bin");
  std::vector<float> f32;
  std::vector<char> bytes;
  for (const Parameter<T>* p : model.parameters()) {
    j["params"].push_back({{"name", p->name}, {"shape", p->value.shape}});
    f32.assign(p->value.data.begin(), p->value.data.end());
    detail::to_little_endian_f32(f32.data(), f32.size(), bytes);
    blob.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  if (!blob) throw DataError("short write on checkpoint blob " + stem + ".bin");
  blob.close();

  std::ofstream meta(stem + ".json", std::ios::binary);
  if (!meta) throw DataError("cannot write checkpoint meta " + stem + ".json");
  meta << j.dump(2) << '\n';
}

inline CheckpointMeta load_checkpoint_meta(const std::string& stem) {
  std::ifstream f(stem + ".json", std::ios::binary);
  if (!f) throw DataError("cannot read checkpoint meta " + stem + ".json");
  nlohmann::json j = nlohmann::json::parse(f);

  CheckpointMeta m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != 1) {
    throw DataError("unsupported checkpoint format version " +
                    std::to_string(m.format_version));
  }
  m.endianness = j.at("endianness").get<std::string>();
  if (m.endianness != "little") {
    throw DataError("unsupported checkpoint endianness '" + m.endianness + "'");
  }
  m.init_mode = j.at("init_mode").get<std::string>();
  m.step_count = j.at("step_count").get<uint64_t>();
  m.run_config = parse_run_config_json(j.at("run_config"));
  m.omegas = j.at("omegas").get<std::vector<double>>();
  m.ln_eps = j.at("ln_eps").get<std::vector<double>>();
  if (j.contains("profile")) m.profile = OmegaProfile::from_json(j["profile"].dump());
  for (const auto& p : j.at("params")) {
    m.params.emplace_back(p.at("name").get<std::string>(),
                          p.at("shape").get<Shape>());
  }
  return m;
}

// rebuilds the model from the stored config and fills every parameter from
// the blob. Loading into the saved float width reproduces logits bit-exactly
template <typename T>
std::pair<CheckpointMeta, std::unique_ptr<Transformer<T>>> load_checkpoint(
    const std::string& stem) {
  CheckpointMeta m = load_checkpoint_meta(stem);
  auto model = std::make_unique<Transformer<T>>(m.run_config.model);
  model->set_omegas(m.omegas);
  if (m.ln_eps.size() != model->ln_eps_per_branch().size()) {
    throw DataError("checkpoint ln_eps count " + std::to_string(m.ln_eps.size()) +
                    " does not match " +
                    std::to_string(model->ln_eps_per_branch().size()) + " branches");
  }
  model->ln_eps_per_branch() = m.ln_eps;

  auto params = model->parameters();
  if (params.size() != m.params.size()) {
    throw DataError("checkpoint has " + std::to_string(m.params.size()) +
                    " parameters, model wants " + std::to_string(params.size()));
  }
  std::ifstream blob(stem + ".bin", std::ios::binary);
  if (!blob) throw DataError("cannot read checkpoint blob " + stem + ".bin");
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, shape] = m.params[i];
    if (name != params[i]->name || shape != params[i]->value.shape) {
      throw DataError("checkpoint parameter " + std::to_string(i) + " is " + name +
                      ", model expects " + params[i]->name);
    }
    size_t n = params[i]->value.numel();
    std::vector<char> bytes(n * 4);
    blob.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<size_t>(blob.gcount()) != bytes.size()) {
      throw DataError("checkpoint blob " + stem + ".bin is truncated at " + name);
    }
    detail::from_little_endian_f32(bytes);
    std::vector<float> f32(n);
    std::memcpy(f32.data(), bytes.data(), n * 4);
    for (size_t k = 0; k < n; ++k) params[i]->value.data[k] = static_cast<T>(f32[k]);
  }
  char extra;
  if (blob.read(&extra, 1)) {
    throw DataError("checkpoint blob " + stem + ".bin has trailing bytes");
  }
  return {std::move(m), std::move(model)};
}

}  // namespace deepformer
