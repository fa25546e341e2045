#pragma once

// Small hand-built panels shared by the unit tests.

#include <memory>
#include <sstream>
#include <string>

#include "snmm/snmm.hpp"

namespace testing_support {

inline snmm::PanelData parse(const std::string& csv, snmm::Grid grid = {}, std::vector<std::pair<std::string, snmm::CovariateKind>> cov = {}) {
  snmm::CsvSchema s;
  s.grid = grid;
  s.covariates = std::move(cov);
  std::istringstream in(csv);
  return snmm::load_csv(in, s);
}

/// One patient on a horizon-H grid: treatment starts at `start` (-1: never), Y_m = base + m.
inline std::string patient_rows(const std::string& id, int horizon, int start, double base = 100.0) {
  std::ostringstream o;
  for (int m = 0; m <= horizon; ++m)
    o << id << ',' << m << ",1," << (start >= 0 && m >= start ? 1 : 0) << ',' << base + m << ",0\n";
  return o.str();
}

inline const char* kHeader = "id,month,visit,A,Y,C\n";

/// Simulated scenario panel shared by several tests.
inline std::shared_ptr<const snmm::PanelData> scenario_data(const std::string& name, int n, std::uint64_t seed) {
  return snmm::generate(snmm::builtin_scenario(name), n, seed).data;
}

}  // namespace testing_support
