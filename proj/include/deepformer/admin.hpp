#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepformer/config.hpp"
#include "deepformer/errors.hpp"
#include "deepformer/model.hpp"

namespace deepformer {

struct OmegaProfile {
  std::vector<double> branch_variances;  // global branch order, encoder first
  std::vector<double> omegas;
  size_t profiling_tokens = 0;
  size_t encoder_branches = 0;
  size_t decoder_branches = 0;

  std::string to_json() const {
    nlohmann::json j;
    j["branch_variances"] = branch_variances;
    j["omegas"] = omegas;
    j["profiling_tokens"] = profiling_tokens;
    j["chain_layout"] = {{"encoder", encoder_branches}, {"decoder", decoder_branches}};
    return j.dump(2) + "\n";
  }

  static OmegaProfile from_json(const std::string& text) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("bad profile JSON: ") + e.what());
    }
    OmegaProfile p;
    try {
      p.branch_variances = j.at("branch_variances").get<std::vector<double>>();
      p.omegas = j.at("omegas").get<std::vector<double>>();
      p.profiling_tokens = j.at("profiling_tokens").get<size_t>();
      p.encoder_branches = j.at("chain_layout").at("encoder").get<size_t>();
      p.decoder_branches = j.at("chain_layout").at("decoder").get<size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("profile JSON missing fields: ") + e.what());
    }
    if (p.branch_variances.size() != p.omegas.size() ||
        p.branch_variances.size() != p.encoder_branches + p.decoder_branches) {
      throw DataError("profile lists do not match chain layout");
    }
    return p;
  }
};

// omega chain for one stack: omega_1 = 1, omega_i = sqrt of the running
// variance sum before branch i, with a zero-sum fallback to 1
inline std::vector<double> compute_omega(const std::vector<double>& variances) {
  std::vector<double> om(variances.size());
  double run = 0.0;
  for (size_t i = 0; i < variances.size(); ++i) {
    if (variances[i] < 0.0) {
      throw DataError("negative variance at branch " + std::to_string(i));
    }
    if (i == 0) {
      om[i] = 1.0;
    } else {
      om[i] = run > 0.0 ? std::sqrt(run) : 1.0;
    }
    run += variances[i];
  }
  return om;
}

// One forward pass with omega = 1 and dropout off; records the scalar
// variance of each branch output over non-pad positions and all features.
template <typename T>
std::vector<double> profile_variances(Transformer<T>& model,
                                      const std::vector<int32_t>& src, size_t src_len,
                                      const std::vector<int32_t>& tgt_in, size_t tgt_len,
                                      size_t batch, size_t* tokens_out = nullptr) {
  const ModelConfig& cfg = model.config();
  if (cfg.block_mode != BlockMode::admin) {
    throw ProfilingError("profiling requires an admin-mode model");
  }
  for (double o : model.omegas()) {
    if (o != 1.0) throw ProfilingError("profiling requires all omegas = 1");
  }
  if (batch == 0 || src.empty() || tgt_in.empty()) {
    throw ProfilingError("profiling batch is empty");
  }
  size_t src_tokens = 0, tgt_tokens = 0;
  for (int32_t id : src) src_tokens += id != kPadId;
  for (int32_t id : tgt_in) tgt_tokens += id != kPadId;
  if (src_tokens == 0 || tgt_tokens == 0) {
    throw ProfilingError("profiling batch is all padding");
  }
  if (tokens_out != nullptr) *tokens_out = src_tokens + tgt_tokens;

  Probe<T> probe;
  probe.capture_branches = true;
  Tape<T> tape(false);
  model.forward_logits(tape, src, src_len, tgt_in, tgt_len, batch, false, 0, &probe);
  if (probe.branch_outputs.size() != cfg.n_branches()) {
    throw ProfilingError("captured " + std::to_string(probe.branch_outputs.size()) +
                         " branches, expected " + std::to_string(cfg.n_branches()));
  }

  size_t d = cfg.d_model;
  auto variance_of = [&](const Tensor<T>& out, const std::vector<int32_t>& ids,
                         size_t len) {
    double mean = 0.0;
    size_t n = 0;
    for (size_t b = 0; b < batch; ++b)
      for (size_t t = 0; t < len; ++t) {
        if (ids[b * len + t] == kPadId) continue;
        const T* row = out.data.data() + (b * len + t) * d;
        for (size_t j = 0; j < d; ++j) mean += static_cast<double>(row[j]);
        n += d;
      }
    mean /= static_cast<double>(n);
    double acc = 0.0;
    for (size_t b = 0; b < batch; ++b)
      for (size_t t = 0; t < len; ++t) {
        if (ids[b * len + t] == kPadId) continue;
        const T* row = out.data.data() + (b * len + t) * d;
        for (size_t j = 0; j < d; ++j) {
          double c = static_cast<double>(row[j]) - mean;
          acc += c * c;
        }
      }
    return acc / static_cast<double>(n);
  };

  std::vector<double> vars(cfg.n_branches());
  size_t enc_n = 2 * cfg.n_enc_layers;
  for (size_t i = 0; i < cfg.n_branches(); ++i) {
    bool enc_side = i < enc_n;
    vars[i] = variance_of(probe.branch_outputs[i], enc_side ? src : tgt_in,
                          enc_side ? src_len : tgt_len);
    if (!std::isfinite(vars[i])) {
      throw ProfilingError("non-finite variance at branch " + std::to_string(i));
    }
  }
  return vars;
}

// full profiling pass: variances, per-chain omegas, and the construction
// invariants (omega_1 = 1 and non-decreasing along each chain)
template <typename T>
OmegaProfile build_profile(Transformer<T>& model, const std::vector<int32_t>& src,
                           size_t src_len, const std::vector<int32_t>& tgt_in,
                           size_t tgt_len, size_t batch) {
  OmegaProfile p;
  p.branch_variances = profile_variances(model, src, src_len, tgt_in, tgt_len, batch,
                                         &p.profiling_tokens);
  p.encoder_branches = 2 * model.config().n_enc_layers;
  p.decoder_branches = 3 * model.config().n_dec_layers;
  std::vector<double> enc_v(p.branch_variances.begin(),
                            p.branch_variances.begin() + p.encoder_branches);
  std::vector<double> dec_v(p.branch_variances.begin() + p.encoder_branches,
                            p.branch_variances.end());
  p.omegas = compute_omega(enc_v);
  std::vector<double> dec_om = compute_omega(dec_v);
  p.omegas.insert(p.omegas.end(), dec_om.begin(), dec_om.end());
  auto check_chain = [](const std::vector<double>& om, size_t lo, size_t hi) {
    for (size_t i = lo + 1; i < hi; ++i) {
      if (om[i] < om[i - 1]) {
        throw ProfilingError("omegas decrease at branch " + std::to_string(i) +
                             "; branch variances too small for this width");
      }
    }
  };
  check_chain(p.omegas, 0, p.encoder_branches);
  check_chain(p.omegas, p.encoder_branches, p.omegas.size());
  return p;
}

template <typename T>
void apply_profile(Transformer<T>& model, const OmegaProfile& p) {
  if (p.encoder_branches != 2 * model.config().n_enc_layers ||
      p.decoder_branches != 3 * model.config().n_dec_layers) {
    throw ConfigError("profile chain layout does not match the model");
  }
  model.set_omegas(p.omegas);
}

}  // namespace deepformer
