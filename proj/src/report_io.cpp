// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <fstream>
#include <sstream>

#include "headlrp/eval.hpp"

namespace headlrp {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace

nlohmann::ordered_json report_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["task"] = to_string(report.task);
  j["examples"] = report.examples;
  j["degenerate"] = report.degenerate;
  j["k_grid"] = report.k_grid;
  auto methods = nlohmann::ordered_json::array();
  for (const auto& m : report.methods) {
    nlohmann::ordered_json mj;
    mj["method"] = m.method;
    mj["runs"] = m.runs;
    mj["aopc"] = m.aopc;
    mj["lodds"] = m.lodds;
    mj["aopc_std"] = m.aopc_std;
    mj["lodds_std"] = m.lodds_std;
    mj["aopc_mean"] = m.aopc_mean;
    mj["lodds_mean"] = m.lodds_mean;
    mj["aopc_mean_std"] = m.aopc_mean_std;
    mj["lodds_mean_std"] = m.lodds_mean_std;
    if (m.has_precision) {
      mj["precision"] = m.precision;
      mj["precision_std"] = m.precision_std;
    }
    mj["degenerate"] = m.degenerate;
    mj["floored"] = m.floored;
    methods.push_back(std::move(mj));
  }
  j["methods"] = std::move(methods);
  auto sweep = nlohmann::ordered_json::array();
  for (const auto& r : report.sweep) {
    nlohmann::ordered_json rj;
    rj["rho"] = r.rho;
    rj["runs"] = r.runs;
    rj["aopc_mean"] = r.aopc_mean;
    rj["aopc_std"] = r.aopc_std;
    rj["lodds_mean"] = r.lodds_mean;
    rj["lodds_std"] = r.lodds_std;
    rj["aopc_runs"] = r.aopc_runs;
    rj["lodds_runs"] = r.lodds_runs;
    rj["degenerate"] = r.degenerate;
    sweep.push_back(std::move(rj));
  }
  j["sweep"] = std::move(sweep);
  return j;
}

std::string report_to_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "section,method,rho,k,aopc,aopc_std,lodds,lodds_std\n";
  for (const auto& m : report.methods) {
    for (std::size_t q = 0; q < report.k_grid.size(); ++q) {
      out << "curve," << m.method << ",," << fmt(report.k_grid[q]) << ',' << fmt(m.aopc[q]) << ','
          << fmt(m.aopc_std[q]) << ',' << fmt(m.lodds[q]) << ',' << fmt(m.lodds_std[q]) << '\n';
    }
    out << "aggregate," << m.method << ",,mean," << fmt(m.aopc_mean) << ',' << fmt(m.aopc_mean_std) << ','
        << fmt(m.lodds_mean) << ',' << fmt(m.lodds_mean_std) << '\n';
    if (m.has_precision) {
      out << "precision," << m.method << ",,," << fmt(m.precision) << ',' << fmt(m.precision_std) << ",,\n";
    }
  }
  for (const auto& r : report.sweep) {
    out << "sweep,ours," << fmt(r.rho) << ",mean," << fmt(r.aopc_mean) << ',' << fmt(r.aopc_std) << ','
        << fmt(r.lodds_mean) << ',' << fmt(r.lodds_std) << '\n';
  }
  return out.str();
}

void write_report(const std::filesystem::path& json_path, const std::filesystem::path& csv_path,
                  const EvalReport& report) {
  if (!json_path.empty()) write_text(json_path, report_to_json(report).dump(2) + "\n");
  if (!csv_path.empty()) write_text(csv_path, report_to_csv(report));
}

}  // namespace headlrp
