#pragma once

#include <doctest.h>

#include <cmath>

#include "probes.hpp"

namespace testing {

using namespace ddis;

inline std::vector<double> values_of(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

inline bool bit_equal(const Tensor& a, const Tensor& b) { return a.shape() == b.shape() && a.values() == b.values(); }

}  // namespace testing
