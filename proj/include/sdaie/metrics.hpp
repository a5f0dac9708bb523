#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "sdaie/common.hpp"

namespace sdaie {

template <typename A, typename B>
double compute_accuracy(const std::vector<A>& predictions, const std::vector<B>& labels) {
  if (predictions.size() != labels.size()) throw Error("compute_accuracy: length mismatch");
  if (predictions.empty()) throw Error("compute_accuracy: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

namespace detail {

// Running sum of fractions in 128-bit integers; gives up on overflow.
struct ExactSum {
  __int128 num = 0, den = 1;
  bool ok = true;

  static __int128 gcd(__int128 a, __int128 b) {
    if (a < 0) a = -a;
    while (b != 0) {
      const __int128 t = a % b;
      a = b;
      b = t;
    }
    return a;
  }

  void add(__int128 n, __int128 d) {
    if (!ok) return;
    __int128 a, b, c;
    if (__builtin_mul_overflow(num, d, &a) || __builtin_mul_overflow(n, den, &b) || __builtin_add_overflow(a, b, &c) ||
        __builtin_mul_overflow(den, d, &den)) {
      ok = false;
      return;
    }
    const __int128 g = gcd(c, den);
    num = c / g;
    den /= g;
  }

  // correctly rounded when both parts are exact doubles
  bool exact_double(double& out) const {
    constexpr __int128 limit = __int128(1) << 53;
    if (!ok || num >= limit || den >= limit) return false;
    out = static_cast<double>(num) / static_cast<double>(den);
    return true;
  }
};

}  // namespace detail

/// Average precision with label 1 as the positive class. Items are swept by
/// descending score; tied scores enter as one precision-recall step, so the
/// result does not depend on input order.
inline double compute_ap(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw Error("compute_ap: length mismatch");
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (positives == 0) throw Error("compute_ap: no positive labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  detail::ExactSum exact;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, group_tp = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) group_tp += labels[order[j++]] == 1;
    tp += group_tp;
    seen = j;
    if (group_tp) {
      ap += (static_cast<double>(group_tp) / static_cast<double>(positives)) *
            (static_cast<double>(tp) / static_cast<double>(seen));
      exact.add(static_cast<__int128>(group_tp) * tp, static_cast<__int128>(seen) * positives);
    }
    i = j;
  }
  double rounded;
  return exact.exact_double(rounded) ? rounded : ap;
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw Error("mean of an empty list");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace sdaie
