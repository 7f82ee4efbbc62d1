// SPDX-License-Identifier: Apache-2.0
//
// Weight bundle = text manifest + one little-endian binary blob.
//
//   headlrp-weights 1
//   config <key> <value>                       (one line per ModelConfig field)
//   blob <file name relative to the manifest>
//   blob_length <bytes>
//   blob_checksum fnv1a64:<16 hex digits>
//   tensor <name> <f64|f32> <d0,d1,...> <byte offset> <byte length>
//
// Tensor records appear in blob order. f32 payloads are widened to f64 on load.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>

#include "headlrp/model.hpp"

namespace headlrp {

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType { f64, f32 };

std::uint64_t fnv1a64(std::span<const unsigned char> bytes);

/// Visits every tensor of `weights` with its manifest name, in manifest order.
void for_each_tensor(ModelWeights& weights, const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_tensor(const ModelWeights& weights,
                     const std::function<void(const std::string&, const Tensor&)>& fn);

void save_weights(const std::filesystem::path& manifest_path, const ModelConfig& config,
                  const ModelWeights& weights, DType dtype = DType::f64);

std::pair<ModelConfig, ModelWeights> load_weights(const std::filesystem::path& manifest_path);

}  // namespace headlrp
