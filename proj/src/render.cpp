// SPDX-License-Identifier: Apache-2.0
#include "headlrp/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace headlrp {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

constexpr const char* kSyntColor = "#4e79a7";
constexpr const char* kPosColor = "#f28e2b";
constexpr const char* kBothColor = "#9c6ade";
constexpr const char* kOtherColor = "#59a14f";
constexpr const char* kOffColor = "#eeeeee";

const char* cell_color(const HeadMask& mask, std::size_t b, std::size_t m) {
  if (!mask.at(b, m)) return kOffColor;
  const bool s = mask.is_syntactic(b, m), p = mask.is_positional(b, m);
  if (s && p) return kBothColor;
  if (s) return kSyntColor;
  if (p) return kPosColor;
  return kOtherColor;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : sep) + p;
  return out;
}

}  // namespace

std::string escape_xml(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string mask_grid_svg(const HeadMask& mask) {
  const int cell = 28, left = 60, top = 30;
  const int width = left + static_cast<int>(mask.num_heads()) * cell + 10;
  const int height = top + static_cast<int>(mask.num_blocks()) * cell + 70;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << std::max(width, 260) << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  for (std::size_t m = 0; m < mask.num_heads(); ++m) {
    s << "<text x=\"" << left + static_cast<int>(m) * cell + cell / 2 << "\" y=\"" << top - 8
      << "\" text-anchor=\"middle\">" << m << "</text>\n";
  }
  for (std::size_t b = 0; b < mask.num_blocks(); ++b) {
    const int y = top + static_cast<int>(b) * cell;
    s << "<text x=\"" << left - 8 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">block " << b
      << "</text>\n";
    for (std::size_t m = 0; m < mask.num_heads(); ++m) {
      const auto& why = mask.provenance(b, m);
      s << "<rect x=\"" << left + static_cast<int>(m) * cell << "\" y=\"" << y << "\" width=\"" << cell - 2
        << "\" height=\"" << cell - 2 << "\" fill=\"" << cell_color(mask, b, m) << "\"><title>block " << b
        << " head " << m << (why.empty() ? "" : ": " + escape_xml(join(why, ", "))) << "</title></rect>\n";
    }
  }
  const int ly = top + static_cast<int>(mask.num_blocks()) * cell + 20;
  const std::vector<std::pair<const char*, const char*>> legend = {
      {kSyntColor, "syntactic"}, {kPosColor, "positional"}, {kBothColor, "both"}, {kOtherColor, "other"}};
  int lx = 10;
  for (const auto& [color, name] : legend) {
    s << "<rect x=\"" << lx << "\" y=\"" << ly << "\" width=\"12\" height=\"12\" fill=\"" << color << "\"/>";
    s << "<text x=\"" << lx + 16 << "\" y=\"" << ly + 10 << "\">" << name << "</text>\n";
    lx += 70;
  }
  s << "<text x=\"10\" y=\"" << ly + 34 << "\">" << mask.count() << " of "
    << mask.num_blocks() * mask.num_heads() << " heads selected</text>\n";
  s << "</svg>\n";
  return s.str();
}

std::string mask_grid_html(const HeadMask& mask, const std::string& title) {
  std::ostringstream s;
  s << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" << escape_xml(title)
    << "</title></head>\n<body>\n<h1>" << escape_xml(title) << "</h1>\n"
    << mask_grid_svg(mask) << "</body></html>\n";
  return s.str();
}

std::string token_heatmap_html(const std::vector<HeatmapRow>& rows, const std::string& title) {
  std::ostringstream s;
  s << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" << escape_xml(title) << "</title>\n"
    << "<style>body{font-family:sans-serif}table{border-collapse:collapse}"
       "td{padding:4px 6px;border:1px solid #ddd;font-family:monospace}th{text-align:left;padding-right:12px}"
       "</style></head>\n<body>\n<h1>"
    << escape_xml(title) << "</h1>\n<table>\n";
  for (const auto& row : rows) {
    double hi = 0.0;
    for (double v : row.scores) hi = std::max(hi, v);
    s << "<tr><th>" << escape_xml(row.label) << "</th>";
    for (std::size_t t = 0; t < row.tokens.size(); ++t) {
      const double v = t < row.scores.size() ? row.scores[t] : 0.0;
      const double w = hi > 0.0 ? std::clamp(v / hi, 0.0, 1.0) : 0.0;
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - w)));
      char color[8];
      std::snprintf(color, sizeof color, "#ff%02x%02x", shade, shade);
      s << "<td style=\"background:" << color << "\" title=\"" << num(v) << "\">" << escape_xml(row.tokens[t])
        << "</td>";
    }
    s << "</tr>\n";
  }
  s << "</table>\n</body></html>\n";
  return s.str();
}

std::string ablation_svg(const std::vector<SweepRow>& rows, std::optional<double> aopc_reference,
                         std::optional<double> lodds_reference) {
  const double W = 360, H = 240, left = 50, right = 15, top = 30, bottom = 40;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 2 * W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  auto panel = [&](double x0, const std::string& name, auto value, auto stddev, std::optional<double> ref) {
    double lo = 0.0, hi = 0.0;
    bool first = true;
    auto extend = [&](double v) {
      if (!std::isfinite(v)) return;
      lo = first ? v : std::min(lo, v);
      hi = first ? v : std::max(hi, v);
      first = false;
    };
    for (const auto& r : rows) {
      extend(value(r) - stddev(r));
      extend(value(r) + stddev(r));
    }
    if (ref) extend(*ref);
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    }
    const double pw = W - left - right, ph = H - top - bottom;
    auto px = [&](double rho) { return x0 + left + rho * pw; };
    auto py = [&](double v) { return top + (hi - v) / (hi - lo) * ph; };
    s << "<g>\n<text x=\"" << x0 + W / 2 << "\" y=\"16\" text-anchor=\"middle\">" << name
      << " vs corruption rate</text>\n";
    s << "<line x1=\"" << px(0) << "\" y1=\"" << top + ph << "\" x2=\"" << px(1) << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << px(0) << "\" y1=\"" << top << "\" x2=\"" << px(0) << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n";
    for (double t : {0.0, 0.5, 1.0}) {
      s << "<text x=\"" << px(t) << "\" y=\"" << top + ph + 14 << "\" text-anchor=\"middle\">" << num(t)
        << "</text>\n";
    }
    s << "<text x=\"" << x0 + left - 4 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\">" << num(hi)
      << "</text>\n";
    s << "<text x=\"" << x0 + left - 4 << "\" y=\"" << top + ph << "\" text-anchor=\"end\">" << num(lo)
      << "</text>\n";
    s << "<text x=\"" << x0 + left + pw / 2 << "\" y=\"" << H - 6 << "\" text-anchor=\"middle\">rho</text>\n";
    if (!rows.empty()) {
      std::ostringstream band, line;
      for (const auto& r : rows) band << px(r.rho) << ',' << py(value(r) + stddev(r)) << ' ';
      for (auto it = rows.rbegin(); it != rows.rend(); ++it)
        band << px(it->rho) << ',' << py(value(*it) - stddev(*it)) << ' ';
      for (const auto& r : rows) line << px(r.rho) << ',' << py(value(r)) << ' ';
      s << "<polygon points=\"" << band.str() << "\" fill=\"#4e79a7\" fill-opacity=\"0.25\" stroke=\"none\"/>\n";
      s << "<polyline points=\"" << line.str() << "\" fill=\"none\" stroke=\"#4e79a7\" stroke-width=\"2\"/>\n";
      for (const auto& r : rows) {
        s << "<circle cx=\"" << px(r.rho) << "\" cy=\"" << py(value(r)) << "\" r=\"3\" fill=\"#4e79a7\"/>\n";
      }
    }
    if (ref) {
      s << "<line x1=\"" << px(0) << "\" y1=\"" << py(*ref) << "\" x2=\"" << px(1) << "\" y2=\"" << py(*ref)
        << "\" stroke=\"#e15759\" stroke-dasharray=\"4 3\"/>\n";
      s << "<text x=\"" << px(1) << "\" y=\"" << py(*ref) - 4 << "\" text-anchor=\"end\" fill=\"#e15759\">GAE</text>\n";
    }
    s << "</g>\n";
  };
  panel(0, "AOPC", [](const SweepRow& r) { return r.aopc_mean; }, [](const SweepRow& r) { return r.aopc_std; },
        aopc_reference);
  panel(W, "LOdds", [](const SweepRow& r) { return r.lodds_mean; }, [](const SweepRow& r) { return r.lodds_std; },
        lodds_reference);
  s << "</svg>\n";
  return s.str();
}

}  // namespace headlrp
