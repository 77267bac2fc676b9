#pragma once

// Reference distributions for the tests and intervals.

#include <cmath>

#include <boost/math/special_functions/erf.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include "vcforest/errors.hpp"

namespace vcforest {

// P[χ²_dof > x] = Q(dof/2, x/2).
inline double chi2_upper_tail(double x, std::size_t dof) {
  if (!(x >= 0.0)) throw DomainError("chi-square tail needs x >= 0");
  if (dof < 1) throw DomainError("chi-square tail needs dof >= 1");
  if (x == 0.0) return 1.0;
  if (std::isinf(x)) return 0.0;
  return boost::math::gamma_q(0.5 * static_cast<double>(dof), 0.5 * x);
}

inline double normal_cdf(double x) { return 0.5 * boost::math::erfc(-x / std::sqrt(2.0)); }

inline double normal_upper_tail(double x) { return 0.5 * boost::math::erfc(x / std::sqrt(2.0)); }

inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("normal quantile needs p in (0, 1)");
  return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * p);
}

}  // namespace vcforest
