#pragma once

// Shared test helpers: finite-difference gradient checks, small fixtures and a
// minimal property-test driver.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "grouppref/archive.hpp"
#include "grouppref/common.hpp"
#include "grouppref/simworld.hpp"

namespace gp_test {

using grouppref::Mat;
using grouppref::Rng;
using grouppref::Vec;

struct FdReport {
  double max_rel_error = 0.0;
  int checked = 0;
  std::string worst;
};

// Relative error with a floor of 1e-6 on the denominator, so coordinates whose
// true derivative is ~0 are judged on absolute agreement instead.
inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

// Central differences on `n_coords` randomly chosen coordinates of `params`.
// `loss` evaluates the objective at a parameter value.
template <class P>
FdReport finite_difference_check(const P& params, const P& analytic,
                                 const std::function<double(const P&)>& loss, int n_coords,
                                 std::uint64_t seed, double h = 1e-5) {
  P work = params;
  auto spans = grouppref::tensor_spans(work);
  auto grads = grouppref::tensor_spans(analytic);
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < spans.size(); ++i)
    for (std::size_t j = 0; j < spans[i].size(); ++j) coords.emplace_back(i, j);
  Rng rng(seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  if (static_cast<int>(coords.size()) > n_coords) coords.resize(static_cast<std::size_t>(n_coords));

  FdReport rep;
  for (auto [i, j] : coords) {
    const double orig = spans[i][j];
    spans[i][j] = orig + h;
    const double up = loss(work);
    spans[i][j] = orig - h;
    const double down = loss(work);
    spans[i][j] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double err = rel_error(grads[i][j], numeric);
    if (err > rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst = "tensor " + std::to_string(i) + " coord " + std::to_string(j) + ": analytic " +
                  std::to_string(grads[i][j]) + " numeric " + std::to_string(numeric);
    }
    ++rep.checked;
  }
  return rep;
}

// A small world that keeps every model tiny.
inline grouppref::WorldConfig tiny_world_config() {
  grouppref::WorldConfig c;
  c.n_users = 40;
  c.n_products = 3;
  c.n_categories = 2;
  c.creatives_per_product = 4;
  c.n_styles = 4;
  c.n_attr = 3;
  c.cardinalities = {3, 4, 5};
  c.d_raw = 6;
  c.m_t = 2;
  c.m_v = 3;
  return c;
}

inline Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
  return grouppref::random_normal(r, c, sd, rng);
}

inline Vec random_vec(Eigen::Index n, Rng& rng, double sd = 1.0) {
  Mat m = grouppref::random_normal(n, 1, sd, rng);
  return m.col(0);
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double uniform_real(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Runs `prop` on `cases` generated inputs; each case gets its own seed, which
// is reported on failure so the case can be replayed.
inline void for_all(int cases, std::uint64_t seed, const std::function<void(Rng&)>& prop) {
  for (int i = 0; i < cases; ++i) {
    const std::uint64_t case_seed = grouppref::derive_seed(seed, "property-case", static_cast<std::uint64_t>(i));
    Rng rng(case_seed);
    SCOPED_TRACE("property case " + std::to_string(i) + " (seed " + std::to_string(case_seed) + ")");
    prop(rng);
    if (::testing::Test::HasFatalFailure()) return;
  }
}

}  // namespace gp_test
