// SPDX-License-Identifier: Apache-2.0
//
// Static SVG/HTML views: head-mask grid, token heatmaps, ablation curves.
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "headlrp/eval.hpp"
#include "headlrp/headmask.hpp"

namespace headlrp {

std::string escape_xml(const std::string& text);

/// B x M grid; cells coloured by syntactic / positional / both / unselected.
std::string mask_grid_svg(const HeadMask& mask);
std::string mask_grid_html(const HeadMask& mask, const std::string& title = "Head mask");

struct HeatmapRow {
  std::string label;                 // e.g. the method name
  std::vector<std::string> tokens;   // display strings
  std::vector<double> scores;
};

/// One row of coloured token cells per entry; scores normalised by each row's max.
std::string token_heatmap_html(const std::vector<HeatmapRow>& rows, const std::string& title = "Attribution");

/// AOPC and LOdds against the corruption rate with +-1 stddev bands; optional
/// horizontal reference lines (e.g. GAE's aggregates).
std::string ablation_svg(const std::vector<SweepRow>& rows, std::optional<double> aopc_reference = std::nullopt,
                         std::optional<double> lodds_reference = std::nullopt);

}  // namespace headlrp
