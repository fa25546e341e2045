#pragma once

// Linear-in-psi treatment-effect ("blip") models
//   gamma_{m,psi}^k(L_m) = sum_j psi_j b_j(m, k, L_m),  zero when k <= m,
// and the blipped-down outcome H_psi(k) = Y_k - gamma_{T,psi}^k(L_T).

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "snmm/error.hpp"
#include "snmm/panel.hpp"
#include "snmm/terms.hpp"

namespace snmm {

inline const std::vector<std::string>& default_blip_basis() {
  static const std::vector<std::string> basis{"dur", "m*dur"};
  return basis;
}

class BlipModel {
 public:
  BlipModel() = default;
  BlipModel(const std::vector<std::string>& basis, const std::vector<std::string>& covariates)
      : design_(basis, covariates, TermScope::with_outcome_month(), "blip") {
    for (const auto& t : design_.terms())
      if (!t.vanishes_at_zero_duration())
        throw ConfigError("blip term '" + t.source() + "' must contain a positive power of dur");
  }

  std::size_t dimension() const { return design_.size(); }
  const Design& design() const { return design_; }
  std::vector<std::string> names() const { return design_.sources(); }

  /// b(m, k, L_m); the zero vector when k <= m.
  void basis(const TermContext& ctx, std::span<double> out) const {
    if (!(ctx.k > ctx.m)) {
      std::fill(out.begin(), out.end(), 0.0);
      return;
    }
    design_.evaluate(ctx, out);
  }

  Eigen::VectorXd basis(const TermContext& ctx) const {
    Eigen::VectorXd b(static_cast<Eigen::Index>(dimension()));
    basis(ctx, std::span<double>(b.data(), dimension()));
    return b;
  }

  bool contains(const std::string& canonical) const {
    for (const auto& t : design_.terms())
      if (t.text() == canonical) return true;
    return false;
  }

 private:
  Design design_;
};

inline void check_dimension(const BlipModel& model, const Eigen::VectorXd& psi) {
  if (static_cast<std::size_t>(psi.size()) != model.dimension())
    throw ConfigError("psi has length " + std::to_string(psi.size()) + " but the blip has dimension " +
                      std::to_string(model.dimension()));
}

inline double gamma(const BlipModel& model, const Eigen::VectorXd& psi, const TermContext& ctx) {
  check_dimension(model, psi);
  return model.basis(ctx).dot(psi);
}

/// gamma_{m,psi}^k for a record, covariates taken at grid month m.
inline double gamma(const BlipModel& model, const Eigen::VectorXd& psi, const PanelData& data,
                    const PatientRecord& record, int m, int k) {
  return gamma(model, psi, data.context(record, m, k));
}

namespace detail {

inline void require_outcome(const PatientRecord& record, int k) {
  if (k < 0 || static_cast<std::size_t>(k) >= record.outcome.size() ||
      std::isnan(record.outcome[static_cast<std::size_t>(k)]))
    throw DataError("patient '" + record.id + "': outcome at month " + std::to_string(k) + " is missing");
}

}  // namespace detail

/// H_psi(k) = Y_k - gamma_{T,psi}^k(L_T); equals Y_k when T >= k.
inline double blip_down(const BlipModel& model, const Eigen::VectorXd& psi, const PanelData& data,
                        const PatientRecord& record, int k) {
  check_dimension(model, psi);
  detail::require_outcome(record, k);
  const double y = record.outcome[static_cast<std::size_t>(k)];
  if (record.start >= k) return y;
  return y - gamma(model, psi, data, record, record.start, k);
}

/// dH_psi(k)/dpsi = -b(T, k, L_T) when T < k, else zero; free of psi.
inline Eigen::VectorXd dH_dpsi(const BlipModel& model, const PanelData& data, const PatientRecord& record, int k) {
  detail::require_outcome(record, k);
  if (record.start >= k) return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.dimension()));
  return -model.basis(data.context(record, record.start, k));
}

}  // namespace snmm
