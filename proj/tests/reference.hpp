#pragma once

// Straightforward long-double reimplementations used as test oracles.

#include <cstddef>
#include <cstdint>
#include <vector>

namespace testing {

struct RefMetrics {
  long double oa = 0, aa = 0, kc = 0;
};

/// cm[t][p] counts; classes without truth samples are left out of AA.
inline RefMetrics reference_metrics(const std::vector<std::vector<std::uint64_t>>& cm) {
  const std::size_t n = cm.size();
  long double total = 0, diag = 0;
  std::vector<long double> rows(n, 0), cols(n, 0);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t p = 0; p < n; ++p) {
      total += cm[t][p];
      rows[t] += cm[t][p];
      cols[p] += cm[t][p];
    }
    diag += cm[t][t];
  }
  RefMetrics m;
  m.oa = diag / total;
  long double recall = 0;
  std::size_t present = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (rows[t] == 0) continue;
    recall += cm[t][t] / rows[t];
    ++present;
  }
  m.aa = recall / present;
  long double pe = 0;
  for (std::size_t c = 0; c < n; ++c) pe += rows[c] * cols[c];
  pe /= total * total;
  m.kc = (m.oa - pe) / (1 - pe);
  return m;
}

}  // namespace testing

#include <algorithm>
#include <cmath>
#include <numeric>

namespace testing {

/// Exact W₁ between equal-size uniform point sets: the cheapest perfect
/// matching, found by trying every permutation. Rows are points.
inline double exact_assignment_w1(const std::vector<std::vector<double>>& a,
                                  const std::vector<std::vector<double>>& b) {
  const std::size_t n = a.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = INFINITY;
  do {
    double cost = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < a[i].size(); ++k) s += (a[i][k] - b[perm[i]][k]) * (a[i][k] - b[perm[i]][k]);
      cost += std::sqrt(s);
    }
    best = std::min(best, cost / static_cast<double>(n));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace testing
