// SPDX-License-Identifier: Apache-2.0
//
// Scalar-loop reference forward pass used as a test oracle. Shares no code
// with the library beyond the data containers.
#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "headlrp/model.hpp"

namespace reftest {

/// Called after each block's softmax with (block, attention [M][T][T]) so a
/// test can perturb the attention entries that multiply the values.
using AttentionHook = std::function<void(std::size_t, std::vector<std::vector<std::vector<double>>>&)>;

/// Flat logits in the same order as ForwardTrace::logits.
std::vector<double> reference_logits(const headlrp::ModelConfig& config, const headlrp::ModelWeights& weights,
                                     const std::vector<std::size_t>& ids, const AttentionHook& hook = {});

/// Per-block attention [M][T][T] from the reference forward.
std::vector<std::vector<std::vector<std::vector<double>>>> reference_attention(
    const headlrp::ModelConfig& config, const headlrp::ModelWeights& weights, const std::vector<std::size_t>& ids);

}  // namespace reftest
