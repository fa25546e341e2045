#pragma once

// Longitudinal panel on a monthly grid 0..horizon, where horizon = K + 1.
// Treatment may start at months 0..K; outcomes are recorded on 0..K+1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "snmm/error.hpp"
#include "snmm/terms.hpp"

namespace snmm {

inline constexpr int kNever = std::numeric_limits<int>::max();

struct Grid {
  int horizon = 24;  // K + 1
  int lag = 12;      // treatment-effect window length
  int origin = 0;    // calendar month of grid month 0

  int last_start() const { return horizon - 1; }  // K
  double calendar(int month) const { return static_cast<double>(month + origin); }

  void validate() const {
    if (lag < 1) throw ConfigError("grid: lag must be at least 1");
    if (horizon <= lag) throw ConfigError("grid: horizon must exceed lag");
  }
  bool operator==(const Grid&) const = default;
};

enum class CovariateKind { numeric, categorical };

/// One source column and the model covariates it expands into.
struct CovariateSource {
  std::string name;
  CovariateKind kind = CovariateKind::numeric;
  std::vector<std::string> levels;  // categorical: all levels, first is the reference
  int first = 0;                    // index of the first expanded covariate
  int count = 1;                    // number of expanded covariates
  bool has_missing_indicator = false;
  bool operator==(const CovariateSource&) const = default;
};

struct PatientRecord {
  std::string id;
  std::vector<double> covariates;       // (horizon + 1) x n_covariates, row-major by month
  std::vector<std::uint8_t> treatment;  // A_m
  std::vector<std::uint8_t> visit;      // 1_visit(m)
  std::vector<double> outcome;          // Y_k, NaN when absent
  std::optional<int> censored_from;     // first month with C = 1
  int start = kNever;                   // T, the first month with A = 1

  /// Uncensored at every month up to and including k.
  bool observed_through(int k) const { return !censored_from || *censored_from > k; }
  /// Uncensored at m with no treatment before m.
  bool at_risk(int m) const { return start >= m && observed_through(m); }
  bool treated_at(int m) const { return start == m; }

  std::span<const double> covariates_at(int month, std::size_t ncov) const {
    return {covariates.data() + static_cast<std::size_t>(month) * ncov, ncov};
  }
  // absent outcomes (NaN) compare equal
  bool operator==(const PatientRecord& o) const {
    if (id != o.id || covariates != o.covariates || treatment != o.treatment || visit != o.visit ||
        censored_from != o.censored_from || start != o.start || outcome.size() != o.outcome.size())
      return false;
    for (std::size_t k = 0; k < outcome.size(); ++k)
      if (!(outcome[k] == o.outcome[k] || (std::isnan(outcome[k]) && std::isnan(o.outcome[k])))) return false;
    return true;
  }
};

struct PanelData {
  std::vector<PatientRecord> records;
  Grid grid;
  std::vector<std::string> covariate_names;  // expanded model covariates
  std::vector<CovariateSource> sources;

  std::size_t size() const { return records.size(); }
  std::size_t n_covariates() const { return covariate_names.size(); }

  /// Evaluation context for terms at grid month m (covariates at m) and outcome month k.
  TermContext context(const PatientRecord& r, int m, int k = -1) const {
    TermContext ctx;
    ctx.m = grid.calendar(m);
    ctx.k = k >= 0 ? grid.calendar(k) : kNaN;
    ctx.treated = r.treatment[static_cast<std::size_t>(m)];
    ctx.outcome = r.outcome[static_cast<std::size_t>(m)];
    ctx.covariates = r.covariates_at(m, n_covariates());
    return ctx;
  }

  /// Checks every record invariant; also recomputes T.
  void validate() {
    grid.validate();
    const std::size_t months = static_cast<std::size_t>(grid.horizon) + 1;
    std::set<std::string> ids;
    for (auto& r : records) {
      const std::string who = "patient '" + r.id + "'";
      if (!ids.insert(r.id).second) throw DataError(who + ": duplicate id");
      if (r.treatment.size() != months || r.visit.size() != months || r.outcome.size() != months ||
          r.covariates.size() != months * n_covariates())
        throw DataError(who + ": record arrays do not match the grid");
      const int end = r.censored_from ? std::min(*r.censored_from, grid.horizon + 1) : grid.horizon + 1;
      if (r.censored_from && (*r.censored_from < 0 || *r.censored_from > grid.horizon))
        throw DataError(who + ": censoring month outside grid");
      r.start = kNever;
      for (int m = 0; m < end; ++m) {
        const auto a = r.treatment[static_cast<std::size_t>(m)];
        if (a > 1) throw DataError(who + ": treatment must be 0/1");
        if (a == 1 && r.start == kNever) {
          if (r.visit[static_cast<std::size_t>(m)] != 1)
            throw DataError(who + ": treatment starts at month " + std::to_string(m) + " without a visit");
          r.start = m;
        }
        if (a == 0 && r.start != kNever)
          throw DataError(who + ": non-monotone treatment at month " + std::to_string(m));
        if (std::isnan(r.outcome[static_cast<std::size_t>(m)]))
          throw DataError(who + ": outcome missing at month " + std::to_string(m));
      }
      for (int m = end; m <= grid.horizon; ++m) {
        if (!std::isnan(r.outcome[static_cast<std::size_t>(m)]) || r.treatment[static_cast<std::size_t>(m)] != 0)
          throw DataError(who + ": data present after censoring");
      }
    }
  }
};

/// Patients uncensored at m with no treatment before m.
inline std::vector<std::size_t> risk_set(const PanelData& data, int m) {
  if (m < 0 || m > data.grid.last_start())
    throw DataError("risk_set: month " + std::to_string(m) + " outside 0.." + std::to_string(data.grid.last_start()));
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < data.records.size(); ++i)
    if (data.records[i].at_risk(m)) out.push_back(i);
  return out;
}

struct IndexPair {
  int k;
  int m;
  bool operator==(const IndexPair&) const = default;
};

/// Outcome/initiation month pairs with lag <= k <= K+1 and k-lag <= m <= k-1.
inline std::vector<IndexPair> index_pairs(const Grid& grid) {
  std::vector<IndexPair> out;
  for (int k = grid.lag; k <= grid.horizon; ++k)
    for (int m = k - grid.lag; m <= std::min(k - 1, grid.last_start()); ++m) out.push_back({k, m});
  return out;
}

inline std::vector<IndexPair> index_pairs(const PanelData& data) { return index_pairs(data.grid); }

// ---------------------------------------------------------------------------
// CSV ingestion

/// Column mapping for long-format CSV input. Empty visit/censored names mean
/// the column is absent (visit defaults to 1, nobody censored).
struct CsvSchema {
  std::string id = "id";
  std::string month = "month";
  std::string visit = "visit";
  std::string treatment = "A";
  std::string outcome = "Y";
  std::string censored = "C";
  std::vector<std::pair<std::string, CovariateKind>> covariates;
  Grid grid;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  s = s.substr(b, e - b + 1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') quoted = !quoted;
    if (c == ',' && !quoted) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline bool is_missing(const std::string& s) { return s.empty() || s == "NA" || s == "NaN" || s == "nan" || s == "."; }

inline double parse_real(const std::string& s, const std::string& what, long line) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("malformed " + what + " value '" + s + "'", line);
  }
}

inline int parse_int(const std::string& s, const std::string& what, long line) {
  const double v = parse_real(s, what, line);
  if (v != std::floor(v)) throw DataError("malformed " + what + " value '" + s + "'", line);
  return static_cast<int>(v);
}

inline int parse_flag(const std::string& s, const std::string& what, long line) {
  const int v = parse_int(s, what, line);
  if (v != 0 && v != 1) throw DataError(what + " must be 0 or 1, got '" + s + "'", line);
  return v;
}

}  // namespace detail

/// Reads a long-format CSV (one row per patient-month) into a validated panel.
/// Numeric covariates are carried forward when missing and gain a
/// `<name>:missing` indicator; categoricals gain a `missing` level and are
/// expanded into `<name>:<level>` indicators against the first sorted level.
inline PanelData load_csv(std::istream& in, const CsvSchema& schema) {
  schema.grid.validate();
  std::string line;
  long lineno = 0;
  if (!std::getline(in, line)) throw DataError("empty input: no header row");
  ++lineno;
  const auto header = detail::split_csv(line);
  auto col = [&](const std::string& name, bool required) -> int {
    if (name.empty()) {
      if (required) throw ConfigError("schema: required column name is empty");
      return -1;
    }
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      if (required) throw DataError("missing column '" + name + "'", 1);
      return -1;
    }
    return static_cast<int>(it - header.begin());
  };
  const int c_id = col(schema.id, true), c_month = col(schema.month, true);
  const int c_a = col(schema.treatment, true), c_y = col(schema.outcome, true);
  const int c_visit = col(schema.visit, false), c_cens = col(schema.censored, false);
  std::vector<int> c_cov;
  for (const auto& [name, kind] : schema.covariates) c_cov.push_back(col(name, true));

  const int months = schema.grid.horizon + 1;
  struct Raw {
    std::string id;
    std::vector<std::optional<double>> y;
    std::vector<int> a, visit, present;
    std::vector<std::vector<std::string>> cov;  // per month, per source
    std::optional<int> censored_from;
    std::vector<long> lines;
  };
  std::vector<Raw> raws;
  std::unordered_map<std::string, std::size_t> by_id;

  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != header.size())
      throw DataError("malformed row: expected " + std::to_string(header.size()) + " fields, got " +
                          std::to_string(f.size()), lineno);
    const std::string& id = f[static_cast<std::size_t>(c_id)];
    if (id.empty()) throw DataError("malformed row: empty id", lineno);
    const int month = detail::parse_int(f[static_cast<std::size_t>(c_month)], "month", lineno);
    if (month < 0 || month >= months)
      throw DataError("month " + std::to_string(month) + " outside grid 0.." + std::to_string(months - 1), lineno);
    auto [it, fresh] = by_id.try_emplace(id, raws.size());
    if (fresh) {
      Raw r;
      r.id = id;
      r.y.assign(static_cast<std::size_t>(months), std::nullopt);
      r.a.assign(static_cast<std::size_t>(months), 0);
      r.visit.assign(static_cast<std::size_t>(months), 1);
      r.present.assign(static_cast<std::size_t>(months), 0);
      r.cov.assign(static_cast<std::size_t>(months), std::vector<std::string>(c_cov.size()));
      r.lines.assign(static_cast<std::size_t>(months), 0);
      raws.push_back(std::move(r));
    }
    Raw& r = raws[it->second];
    const auto mi = static_cast<std::size_t>(month);
    if (r.present[mi]) throw DataError("duplicate (id, month) = (" + id + ", " + std::to_string(month) + ")", lineno);
    if (r.censored_from && month > *r.censored_from)
      throw DataError("row after censoring month " + std::to_string(*r.censored_from) + " for id " + id, lineno);
    r.present[mi] = 1;
    r.lines[mi] = lineno;
    const bool cens = c_cens >= 0 && !detail::is_missing(f[static_cast<std::size_t>(c_cens)]) &&
                      detail::parse_flag(f[static_cast<std::size_t>(c_cens)], "censoring", lineno) == 1;
    if (cens) {
      for (int later = month + 1; later < months; ++later)
        if (r.present[static_cast<std::size_t>(later)])
          throw DataError("row after censoring month " + std::to_string(month) + " for id " + id,
                          r.lines[static_cast<std::size_t>(later)]);
      r.censored_from = month;
      continue;  // nothing on the censoring row is used
    }
    const auto& ys = f[static_cast<std::size_t>(c_y)];
    if (!detail::is_missing(ys)) r.y[mi] = detail::parse_real(ys, "outcome", lineno);
    const auto& as = f[static_cast<std::size_t>(c_a)];
    // the outcome-only final row may leave treatment empty; it is carried forward
    r.a[mi] = detail::is_missing(as) ? (month == months - 1 ? -2 : -1) : detail::parse_flag(as, "treatment", lineno);
    if (r.a[mi] == -1) throw DataError("treatment missing", lineno);
    if (c_visit >= 0 && !detail::is_missing(f[static_cast<std::size_t>(c_visit)]))
      r.visit[mi] = detail::parse_flag(f[static_cast<std::size_t>(c_visit)], "visit", lineno);
    for (std::size_t j = 0; j < c_cov.size(); ++j) r.cov[mi][j] = f[static_cast<std::size_t>(c_cov[j])];
  }
  if (raws.empty()) throw DataError("no data rows");

  // covariate layout
  PanelData data;
  data.grid = schema.grid;
  for (std::size_t j = 0; j < schema.covariates.size(); ++j) {
    CovariateSource src;
    src.name = schema.covariates[j].first;
    src.kind = schema.covariates[j].second;
    src.first = static_cast<int>(data.covariate_names.size());
    bool any_missing = false;
    std::set<std::string> levels;
    for (const auto& r : raws) {
      const int last = r.censored_from ? *r.censored_from : months;
      for (int m = 0; m < std::min(last, months - 1); ++m) {
        const auto& s = r.cov[static_cast<std::size_t>(m)][j];
        if (detail::is_missing(s)) any_missing = true;
        else if (src.kind == CovariateKind::categorical) levels.insert(s);
      }
    }
    if (src.kind == CovariateKind::categorical) {
      src.levels.assign(levels.begin(), levels.end());
      if (any_missing) src.levels.push_back("missing");
      if (src.levels.size() < 2)
        throw DataError("categorical covariate '" + src.name + "' has fewer than two levels");
      src.count = static_cast<int>(src.levels.size()) - 1;
      for (std::size_t l = 1; l < src.levels.size(); ++l) data.covariate_names.push_back(src.name + ":" + src.levels[l]);
    } else {
      src.has_missing_indicator = any_missing;
      src.count = any_missing ? 2 : 1;
      data.covariate_names.push_back(src.name);
      if (any_missing) data.covariate_names.push_back(src.name + ":missing");
    }
    data.sources.push_back(src);
  }
  const std::size_t ncov = data.covariate_names.size();

  for (auto& raw : raws) {
    PatientRecord rec;
    rec.id = raw.id;
    rec.censored_from = raw.censored_from;
    rec.treatment.assign(static_cast<std::size_t>(months), 0);
    rec.visit.assign(static_cast<std::size_t>(months), 1);
    rec.outcome.assign(static_cast<std::size_t>(months), kNaN);
    rec.covariates.assign(static_cast<std::size_t>(months) * ncov, 0.0);
    const int end = raw.censored_from ? *raw.censored_from : months;
    for (int m = 0; m < end; ++m) {
      const auto mi = static_cast<std::size_t>(m);
      if (!raw.present[mi] || !raw.y[mi])
        throw DataError("patient '" + raw.id + "': outcome missing at month " + std::to_string(m) +
                            " while uncensored", raw.present[mi] ? raw.lines[mi] : -1);
      rec.outcome[mi] = *raw.y[mi];
      rec.treatment[mi] = raw.a[mi] == -2 ? (m > 0 ? rec.treatment[mi - 1] : 0) : static_cast<std::uint8_t>(raw.a[mi]);
      rec.visit[mi] = static_cast<std::uint8_t>(raw.visit[mi]);
      for (std::size_t j = 0; j < data.sources.size(); ++j) {
        const auto& src = data.sources[j];
        const auto& s = raw.cov[mi][j];
        double* row = rec.covariates.data() + mi * ncov + static_cast<std::size_t>(src.first);
        const bool missing = detail::is_missing(s);
        if (src.kind == CovariateKind::categorical) {
          std::string level = missing ? "missing" : s;
          if (missing && m == months - 1 && m > 0) {
            // outcome-only final row: repeat the previous month
            for (int l = 0; l < src.count; ++l) row[l] = row[l - static_cast<int>(ncov)];
            continue;
          }
          auto it = std::find(src.levels.begin(), src.levels.end(), level);
          const auto idx = static_cast<int>(it - src.levels.begin());
          for (int l = 0; l < src.count; ++l) row[l] = (idx == l + 1) ? 1.0 : 0.0;
        } else if (!missing) {
          row[0] = detail::parse_real(s, "covariate '" + src.name + "'", raw.lines[mi]);
        } else {
          row[0] = m > 0 ? row[-static_cast<std::ptrdiff_t>(ncov)] : 0.0;
          if (src.has_missing_indicator && m < months - 1) row[1] = 1.0;
        }
      }
    }
    data.records.push_back(std::move(rec));
  }
  data.validate();
  return data;
}

inline PanelData load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return load_csv(in, schema);
}

/// Writes the panel back in the long format accepted by load_csv.
inline void write_csv(std::ostream& out, const PanelData& data, const CsvSchema& schema = {}) {
  const std::size_t ncov = data.n_covariates();
  out << schema.id << ',' << schema.month << ',' << schema.visit << ',' << schema.treatment << ','
      << schema.outcome << ',' << schema.censored;
  for (const auto& src : data.sources) out << ',' << src.name;
  out << '\n';
  out << std::setprecision(17);
  for (const auto& r : data.records) {
    const int end = r.censored_from ? *r.censored_from : data.grid.horizon + 1;
    for (int m = 0; m < end; ++m) {
      const auto mi = static_cast<std::size_t>(m);
      out << r.id << ',' << m << ',' << int(r.visit[mi]) << ',' << int(r.treatment[mi]) << ',' << r.outcome[mi]
          << ",0";
      for (const auto& src : data.sources) {
        const double* row = r.covariates.data() + mi * ncov + static_cast<std::size_t>(src.first);
        out << ',';
        if (src.kind == CovariateKind::categorical) {
          int level = 0;
          for (int l = 0; l < src.count; ++l)
            if (row[l] == 1.0) level = l + 1;
          const auto& name = src.levels[static_cast<std::size_t>(level)];
          if (name != "missing") out << name;
        } else if (!(src.has_missing_indicator && row[1] == 1.0)) {
          out << row[0];
        }
      }
      out << '\n';
    }
    if (r.censored_from) {
      out << r.id << ',' << *r.censored_from << ",,,,1";
      for (std::size_t j = 0; j < data.sources.size(); ++j) out << ',';
      out << '\n';
    }
  }
}

inline void write_csv(const std::string& path, const PanelData& data, const CsvSchema& schema = {}) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  write_csv(out, data, schema);
}

}  // namespace snmm
