#pragma once

// Independent reference computations used by the unit tests and the
// acceptance binary. Deliberately written with plain loops and no calls into
// the library code they check.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace oracle {

/// Euclidean projection onto the simplex by enumerating every support set:
/// for support S the stationary point is p_i = z_i - t on S with t fixed by
/// sum p = 1. The feasible candidate closest to z is the projection.
inline std::vector<double> simplex_projection(const std::vector<double>& z) {
  const std::size_t k = z.size();
  std::vector<double> best;
  double best_dist = std::numeric_limits<double>::infinity();
  for (unsigned long mask = 1; mask < (1ul << k); ++mask) {
    double sum = 0.0;
    int size = 0;
    for (std::size_t i = 0; i < k; ++i)
      if (mask >> i & 1) {
        sum += z[i];
        ++size;
      }
    const double t = (sum - 1.0) / size;
    std::vector<double> p(k, 0.0);
    bool feasible = true;
    for (std::size_t i = 0; i < k; ++i)
      if (mask >> i & 1) {
        p[i] = z[i] - t;
        if (p[i] < -1e-15) feasible = false;
      }
    if (!feasible) continue;
    double dist = 0.0;
    for (std::size_t i = 0; i < k; ++i) dist += (p[i] - z[i]) * (p[i] - z[i]);
    if (dist < best_dist) {
      best_dist = dist;
      best = p;
    }
  }
  for (auto& v : best) v = std::max(v, 0.0);
  return best;
}

struct Scored {
  std::string segment;
  int cls;
  double score;
};

/// MAP by direct enumeration: per class, rank by (score desc, id asc); for
/// each rank k <= top_k recount precision over the first k items and add it
/// when item k is relevant; divide by the class's positive count.
inline double mean_average_precision(const std::vector<Scored>& preds,
                                     const std::set<std::pair<std::string, int>>& positives,
                                     const std::vector<int>& classes, std::size_t top_k) {
  double total = 0.0;
  int counted = 0;
  for (int c : classes) {
    int n_c = 0;
    for (const auto& p : positives) n_c += p.second == c;
    if (n_c == 0) continue;
    std::vector<Scored> ranked;
    for (const auto& p : preds)
      if (p.cls == c) ranked.push_back(p);
    // Selection sort keeps this independent of std::sort comparator details.
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      std::size_t pick = i;
      for (std::size_t j = i + 1; j < ranked.size(); ++j) {
        const bool better = ranked[j].score > ranked[pick].score ||
                            (ranked[j].score == ranked[pick].score && ranked[j].segment < ranked[pick].segment);
        if (better) pick = j;
      }
      std::swap(ranked[i], ranked[pick]);
    }
    double ap = 0.0;
    for (std::size_t k = 1; k <= ranked.size() && k <= top_k; ++k) {
      const bool rel_k = positives.count({ranked[k - 1].segment, c}) > 0;
      if (!rel_k) continue;
      int hits = 0;
      for (std::size_t i = 0; i < k; ++i) hits += positives.count({ranked[i].segment, c}) > 0;
      ap += static_cast<double>(hits) / static_cast<double>(k);
    }
    total += ap / n_c;
    ++counted;
  }
  return counted ? total / counted : 0.0;
}

/// Textbook Adam on a scalar.
struct ScalarAdam {
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double m = 0.0, v = 0.0;
  int t = 0;

  double step(double x, double g) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    return x - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

}  // namespace oracle
