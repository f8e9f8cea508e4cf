#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "deepformer/errors.hpp"

namespace deepformer {

// reserved vocabulary slots, shared by every module
constexpr int32_t kPadId = 0;
constexpr int32_t kBosId = 1;
constexpr int32_t kEosId = 2;
constexpr int32_t kUnkId = 3;

enum class BlockMode { postln, preln, admin };

inline std::string block_mode_name(BlockMode m) {
  switch (m) {
    case BlockMode::postln: return "postln";
    case BlockMode::preln: return "preln";
    case BlockMode::admin: return "admin";
  }
  return "?";
}

inline BlockMode block_mode_from_name(const std::string& s) {
  if (s == "postln") return BlockMode::postln;
  if (s == "preln") return BlockMode::preln;
  if (s == "admin") return BlockMode::admin;
  throw ConfigError("unknown block mode '" + s + "'");
}

struct ModelConfig {
  size_t n_enc_layers = 6;
  size_t n_dec_layers = 6;
  size_t d_model = 64;
  size_t d_ff = 128;
  size_t n_heads = 2;
  size_t src_vocab = 64;
  size_t tgt_vocab = 64;
  size_t max_len = 512;
  double dropout = 0.1;
  double label_smoothing = 0.1;
  double ln_eps = 1e-5;
  BlockMode block_mode = BlockMode::postln;

  size_t n_branches() const { return 2 * n_enc_layers + 3 * n_dec_layers; }
  size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (n_enc_layers < 1 || n_dec_layers < 1) {
      throw ConfigError("encoder and decoder need at least one layer");
    }
    if (n_heads < 1 || d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (d_model % 2 != 0) {
      throw ConfigError("d_model must be even for sinusoidal positions");
    }
    if (src_vocab < 4 || tgt_vocab < 4) {
      throw ConfigError("vocabulary must cover the 4 reserved ids");
    }
    if (max_len < 2) throw ConfigError("max_len too small");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
      throw ConfigError("label smoothing must be in [0,1)");
    }
    if (ln_eps < 0.0) throw ConfigError("ln_eps must be >= 0");
  }
};

}  // namespace deepformer
