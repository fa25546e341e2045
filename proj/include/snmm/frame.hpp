#pragma once

// Pooled row tables built once per panel:
//  * person-months (i, m) with patient i at risk at m, m = 0..K;
//  * cells (i, m, k) for every k in the lag window of m
//    [max(m + 1, lag), min(m + lag, K + 1)], flagged observed when the patient
//    is uncensored through k;
//  * censoring rows (i, p), p = 1..K+1, for patients uncensored through p - 1.
// Rows are grouped by patient so per-patient sums are contiguous segments.

#include <algorithm>
#include <memory>
#include <vector>

#include <Eigen/Dense>

#include "snmm/blip.hpp"
#include "snmm/panel.hpp"
#include "snmm/terms.hpp"

namespace snmm {

class AnalysisFrame {
 public:
  struct PersonMonth {
    int patient;
    int month;
    bool treated;  // A_m (equivalently T == m)
    bool visit;
    int cell_begin;
    int cell_end;
  };
  struct Cell {
    int pm;
    int patient;
    int m;
    int k;
    bool observed;
  };
  struct CensorRow {
    int patient;
    int p;
    bool event;
  };

  explicit AnalysisFrame(std::shared_ptr<const PanelData> data) : data_(std::move(data)) {
    const auto& d = *data_;
    const Grid& g = d.grid;
    const int n = static_cast<int>(d.size());
    patient_pm_.assign(static_cast<std::size_t>(n) + 1, 0);
    patient_cell_.assign(static_cast<std::size_t>(n) + 1, 0);
    patient_cen_.assign(static_cast<std::size_t>(n) + 1, 0);
    for (int i = 0; i < n; ++i) {
      const auto& r = d.records[static_cast<std::size_t>(i)];
      for (int m = 0; m <= g.last_start(); ++m) {
        if (!r.at_risk(m)) continue;
        PersonMonth pm{i, m, r.treated_at(m), r.visit[static_cast<std::size_t>(m)] == 1,
                       static_cast<int>(cells_.size()), 0};
        for (int k = window_first(m); k <= window_last(m); ++k)
          cells_.push_back({static_cast<int>(pms_.size()), i, m, k, r.observed_through(k)});
        pm.cell_end = static_cast<int>(cells_.size());
        pms_.push_back(pm);
      }
      const int last_p = r.censored_from ? std::min(*r.censored_from, g.horizon) : g.horizon;
      for (int p = 1; p <= last_p; ++p) cens_.push_back({i, p, r.censored_from && *r.censored_from == p});
      patient_pm_[static_cast<std::size_t>(i) + 1] = static_cast<int>(pms_.size());
      patient_cell_[static_cast<std::size_t>(i) + 1] = static_cast<int>(cells_.size());
      patient_cen_[static_cast<std::size_t>(i) + 1] = static_cast<int>(cens_.size());
    }
    y_.resize(static_cast<Eigen::Index>(cells_.size()));
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      const auto& cell = cells_[c];
      y_[static_cast<Eigen::Index>(c)] =
          cell.observed ? d.records[static_cast<std::size_t>(cell.patient)].outcome[static_cast<std::size_t>(cell.k)] : 0.0;
    }
  }

  const PanelData& data() const { return *data_; }
  std::shared_ptr<const PanelData> data_ptr() const { return data_; }
  const Grid& grid() const { return data_->grid; }
  int n_patients() const { return static_cast<int>(data_->size()); }

  int window_first(int m) const { return std::max(m + 1, grid().lag); }
  int window_last(int m) const { return std::min(m + grid().lag, grid().horizon); }

  const std::vector<PersonMonth>& person_months() const { return pms_; }
  const std::vector<Cell>& cells() const { return cells_; }
  const std::vector<CensorRow>& censor_rows() const { return cens_; }
  int censor_events() const {
    return static_cast<int>(std::count_if(cens_.begin(), cens_.end(), [](const CensorRow& c) { return c.event; }));
  }

  // [begin, end) offsets per patient
  int pm_begin(int i) const { return patient_pm_[static_cast<std::size_t>(i)]; }
  int pm_end(int i) const { return patient_pm_[static_cast<std::size_t>(i) + 1]; }
  int cell_begin(int i) const { return patient_cell_[static_cast<std::size_t>(i)]; }
  int cell_end(int i) const { return patient_cell_[static_cast<std::size_t>(i) + 1]; }
  int cen_begin(int i) const { return patient_cen_[static_cast<std::size_t>(i)]; }
  int cen_end(int i) const { return patient_cen_[static_cast<std::size_t>(i) + 1]; }

  /// Outcomes on cells; zero on unobserved cells (which always carry zero weight).
  const Eigen::VectorXd& cell_outcome() const { return y_; }

  Eigen::VectorXd cell_observed() const {
    Eigen::VectorXd o(static_cast<Eigen::Index>(cells_.size()));
    for (std::size_t c = 0; c < cells_.size(); ++c) o[static_cast<Eigen::Index>(c)] = cells_[c].observed ? 1.0 : 0.0;
    return o;
  }

  Eigen::VectorXd pm_treated() const {
    Eigen::VectorXd a(static_cast<Eigen::Index>(pms_.size()));
    for (std::size_t j = 0; j < pms_.size(); ++j) a[static_cast<Eigen::Index>(j)] = pms_[j].treated ? 1.0 : 0.0;
    return a;
  }

  Eigen::VectorXd pm_visit() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(pms_.size()));
    for (std::size_t j = 0; j < pms_.size(); ++j) v[static_cast<Eigen::Index>(j)] = pms_[j].visit ? 1.0 : 0.0;
    return v;
  }

  Eigen::VectorXd censor_response() const {
    Eigen::VectorXd c(static_cast<Eigen::Index>(cens_.size()));
    for (std::size_t j = 0; j < cens_.size(); ++j) c[static_cast<Eigen::Index>(j)] = cens_[j].event ? 1.0 : 0.0;
    return c;
  }

  /// Design over person-months, terms evaluated at month m.
  Eigen::MatrixXd pm_design(const Design& design) const {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> x(pms_.size(), design.size());
    for (std::size_t j = 0; j < pms_.size(); ++j) {
      const auto& pm = pms_[j];
      const auto ctx = data_->context(record(pm.patient), pm.month);
      design.evaluate(ctx, {x.data() + j * design.size(), design.size()});
    }
    return x;
  }

  /// Design over censoring rows, terms evaluated at month p - 1 (A is A_{p-1}).
  Eigen::MatrixXd censor_design(const Design& design) const {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> x(cens_.size(), design.size());
    for (std::size_t j = 0; j < cens_.size(); ++j) {
      const auto& c = cens_[j];
      const auto ctx = data_->context(record(c.patient), c.p - 1);
      design.evaluate(ctx, {x.data() + j * design.size(), design.size()});
    }
    return x;
  }

  /// Design over all cells, terms evaluated with covariates at m and outcome month k.
  Eigen::MatrixXd cell_design(const Design& design) const {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> x(cells_.size(), design.size());
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      const auto& cell = cells_[c];
      const auto ctx = data_->context(record(cell.patient), cell.m, cell.k);
      design.evaluate(ctx, {x.data() + c * design.size(), design.size()});
    }
    return x;
  }

  /// b(T, k, L_T) on observed cells with T < k, zero elsewhere. H_psi = Y - B psi.
  Eigen::MatrixXd blip_at_start(const BlipModel& blip) const {
    const std::size_t p = blip.dimension();
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> b =
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(cells_.size(), p);
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      const auto& cell = cells_[c];
      const auto& r = record(cell.patient);
      if (!cell.observed || r.start >= cell.k) continue;
      blip.basis(data_->context(r, r.start, cell.k), {b.data() + c * p, p});
    }
    return b;
  }

  /// b(m, k, L_m): the blip regressors had treatment started at m.
  Eigen::MatrixXd blip_at_month(const BlipModel& blip) const {
    const std::size_t p = blip.dimension();
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> b(cells_.size(), p);
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      const auto& cell = cells_[c];
      blip.basis(data_->context(record(cell.patient), cell.m, cell.k), {b.data() + c * p, p});
    }
    return b;
  }

  const PatientRecord& record(int i) const { return data_->records[static_cast<std::size_t>(i)]; }

 private:
  std::shared_ptr<const PanelData> data_;
  std::vector<PersonMonth> pms_;
  std::vector<Cell> cells_;
  std::vector<CensorRow> cens_;
  std::vector<int> patient_pm_, patient_cell_, patient_cen_;
  Eigen::VectorXd y_;
};

}  // namespace snmm
