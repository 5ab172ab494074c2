#pragma once

// Versioned checkpoint container.
//
// Byte layout (all integers little-endian):
//   magic        8 bytes  "TERSECKP"
//   version      u32      kCheckpointVersion
//   config_len   u32      followed by config_len bytes of compact JSON
//                         (model config, sorted keys)
//   step         u64      training-step counter
//   rng_len      u32      followed by rng_len bytes (textual mt19937_64 state)
//   n_tensors    u32
//   per tensor:  name_len u32, name bytes, ndim u32, dims u64[ndim],
//                values f64[numel]
//   adam_step    u64
//   n_slots      u32      0 (no optimiser state) or n_tensors
//   per slot:    m f64[numel], v f64[numel] in tensor order

#include <cstdint>
#include <string>
#include <vector>

#include "terse/model.hpp"
#include "terse/optim.hpp"

namespace terse::model {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Transformer model;
  AdamState optimizer;  // may be empty
  std::string rng_state;
  std::uint64_t step = 0;

  std::vector<std::uint8_t> to_bytes() const;
  static Checkpoint from_bytes(const std::vector<std::uint8_t>& bytes);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

// SHA-256 over config and weights only (optimiser/step excluded), so a
// direction stays tied to the exact parameters it was extracted from.
std::string model_hash(const Transformer& model);

}  // namespace terse::model
