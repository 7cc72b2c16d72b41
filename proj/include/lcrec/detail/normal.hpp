#pragma once

#include <cmath>
#include <numbers>

#include <boost/math/special_functions/erf.hpp>

namespace lcrec::detail {

inline double standard_normal_cdf(double x) noexcept
{
    return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

// Unchecked; callers guarantee 0 < p < 1.
inline double standard_normal_quantile(double p) noexcept
{
    return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

}  // namespace lcrec::detail
