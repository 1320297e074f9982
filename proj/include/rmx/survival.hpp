#pragma once

#include "rmx/cohort.hpp"
#include "rmx/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace rmx {

/// Kaplan-Meier product-limit curve, one step per distinct event time.
struct km_curve {
  std::vector<double> times;
  std::vector<double> survival;
  std::vector<std::size_t> at_risk;
  std::vector<std::size_t> events;

  /// S(t): 1 before the first event time, then right-continuous steps.
  double at(double t) const noexcept {
    auto it = std::upper_bound(times.begin(), times.end(), t);
    if (it == times.begin()) return 1.0;
    return survival[static_cast<std::size_t>(it - times.begin()) - 1];
  }
};

inline void to_json(json& j, const km_curve& km) {
  j = {{"times", km.times}, {"survival", km.survival}, {"at_risk", km.at_risk}, {"events", km.events}};
}

namespace detail {
inline void check_survival_input(std::size_t a, std::size_t b, std::size_t c = SIZE_MAX) {
  if (a != b || (c != SIZE_MAX && a != c))
    throw invalid_argument("survival inputs differ in length");
}

// Row order by descending time, ties broken by index for determinism.
inline std::vector<std::size_t> order_by_time_desc(std::span<const double> times) {
  std::vector<std::size_t> idx(times.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });
  return idx;
}
} // namespace detail

/// Product-limit estimator over distinct event times up to `horizon` (all
/// event times when absent). S may reach 0 when the last patient at risk
/// has the event.
inline km_curve km_fit(std::span<const double> times, std::span<const std::uint8_t> events,
                       std::optional<double> horizon = std::nullopt) {
  detail::check_survival_input(times.size(), events.size());
  if (times.empty()) throw invalid_argument("km_fit: empty input");
  std::vector<std::size_t> idx(times.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return times[a] < times[b]; });

  km_curve km;
  double s = 1.0;
  std::size_t at_risk = times.size();
  for (std::size_t i = 0; i < idx.size();) {
    const double t = times[idx[i]];
    if (t < 0) throw invalid_argument("km_fit: negative time");
    std::size_t d = 0, m = 0;
    for (; i + m < idx.size() && times[idx[i + m]] == t; ++m) d += events[idx[i + m]] ? 1 : 0;
    if (d > 0 && (!horizon || t <= *horizon)) {
      s *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
      km.times.push_back(t);
      km.survival.push_back(s);
      km.at_risk.push_back(at_risk);
      km.events.push_back(d);
    }
    at_risk -= m;
    i += m;
  }
  return km;
}

/// Integer pair counts behind Harrell's C.
struct concordance_counts {
  std::int64_t concordant = 0;
  std::int64_t tied = 0;
  std::int64_t comparable = 0;

  /// (concordant + ties/2) / comparable.
  double value() const {
    if (comparable == 0)
      throw computation_error("c-index undefined: no comparable pairs");
    return static_cast<double>(2 * concordant + tied) / static_cast<double>(2 * comparable);
  }

  friend bool operator==(const concordance_counts&, const concordance_counts&) = default;
};

namespace detail {
class fenwick {
public:
  explicit fenwick(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t i) noexcept {
    for (++i; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
  }
  // Count of inserted ranks < i.
  std::int64_t prefix(std::size_t i) const noexcept {
    std::int64_t s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

private:
  std::vector<std::int64_t> tree_;
};
} // namespace detail

/// Pair (i,j) is comparable iff event_i = 1 and either t_i < t_j, or
/// t_i = t_j with j censored. It is concordant iff score_i > score_j.
/// O(n log n): sweep by descending time with a Fenwick tree over score ranks.
inline concordance_counts concordance(std::span<const double> scores, std::span<const double> times,
                                      std::span<const std::uint8_t> events) {
  detail::check_survival_input(scores.size(), times.size(), events.size());
  const auto n = scores.size();
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<std::size_t> rank(n);
  for (std::size_t i = 0; i < n; ++i)
    rank[i] = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), scores[i]) -
                                       sorted.begin());

  auto order = detail::order_by_time_desc(times);
  detail::fenwick tree(sorted.size());
  std::int64_t inserted = 0;
  concordance_counts out;
  for (std::size_t g = 0; g < n;) {
    std::size_t end = g;
    while (end < n && times[order[end]] == times[order[g]]) ++end;
    for (std::size_t k = g; k < end; ++k)
      if (!events[order[k]]) {
        tree.add(rank[order[k]]);
        ++inserted;
      }
    for (std::size_t k = g; k < end; ++k) {
      auto i = order[k];
      if (!events[i]) continue;
      const auto below = tree.prefix(rank[i]);
      const auto equal = tree.prefix(rank[i] + 1) - below;
      out.concordant += below;
      out.tied += equal;
      out.comparable += inserted;
    }
    for (std::size_t k = g; k < end; ++k)
      if (events[order[k]]) {
        tree.add(rank[order[k]]);
        ++inserted;
      }
    g = end;
  }
  return out;
}

/// Harrell's concordance index. Throws when no pair is comparable.
inline double c_index(std::span<const double> scores, std::span<const double> times,
                      std::span<const std::uint8_t> events) {
  return concordance(scores, times, events).value();
}

// -- Cox partial likelihood -----------------------------------------------------

struct cox_derivatives {
  double loglik = 0;
  double score = 0;        // first derivative
  double information = 0;  // negative second derivative
};

/// Breslow partial log-likelihood of a one-covariate Cox model and its first
/// two derivatives, at coefficient `beta`.
inline cox_derivatives cox_partial_likelihood(double beta, std::span<const double> x,
                                              std::span<const double> times,
                                              std::span<const std::uint8_t> events) {
  detail::check_survival_input(x.size(), times.size(), events.size());
  const auto n = x.size();
  double shift = -std::numeric_limits<double>::infinity();
  for (double v : x) shift = std::max(shift, beta * v);
  if (!std::isfinite(shift)) shift = 0;

  auto order = detail::order_by_time_desc(times);
  double s0 = 0, s1 = 0, s2 = 0;
  cox_derivatives out;
  for (std::size_t g = 0; g < n;) {
    std::size_t end = g;
    while (end < n && times[order[end]] == times[order[g]]) ++end;
    double sum_x = 0;
    std::size_t d = 0;
    for (std::size_t k = g; k < end; ++k) {
      const double xi = x[order[k]];
      const double w = std::exp(beta * xi - shift);
      s0 += w;
      s1 += w * xi;
      s2 += w * xi * xi;
      if (events[order[k]]) {
        sum_x += xi;
        ++d;
      }
    }
    if (d > 0) {
      const double dd = static_cast<double>(d);
      const double mean = s1 / s0;
      out.loglik += beta * sum_x - dd * (std::log(s0) + shift);
      out.score += sum_x - dd * mean;
      out.information += dd * (s2 / s0 - mean * mean);
    }
    g = end;
  }
  return out;
}

/// Coefficient of a univariate Cox refit on the model's linear predictor,
/// by Newton-Raphson (tolerance 1e-8 on the coefficient, at most 50 steps).
inline double calibration_slope(std::span<const double> scores, std::span<const double> times,
                                std::span<const std::uint8_t> events) {
  detail::check_survival_input(scores.size(), times.size(), events.size());
  if (scores.empty()) throw computation_error("calibration slope: empty input");

  std::vector<double> event_times;
  for (std::size_t i = 0; i < events.size(); ++i)
    if (events[i]) event_times.push_back(times[i]);
  if (event_times.empty()) throw computation_error("calibration slope: no events");
  std::sort(event_times.begin(), event_times.end());
  if (std::unique(event_times.begin(), event_times.end()) - event_times.begin() < 2)
    throw computation_error("calibration slope: fewer than two distinct event times");

  // Centering leaves the coefficient unchanged and keeps exp() tame.
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) /
                      static_cast<double>(scores.size());
  std::vector<double> x(scores.size());
  double spread = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = scores[i] - mean;
    spread = std::max(spread, std::abs(x[i]));
  }
  if (spread == 0) throw computation_error("calibration slope: constant scores");

  double beta = 0;
  auto cur = cox_partial_likelihood(beta, x, times, events);
  for (int iter = 0; iter < 50; ++iter) {
    if (!(cur.information > 0))
      throw computation_error("calibration slope: singular information");
    double step = cur.score / cur.information;
    auto next = cox_partial_likelihood(beta + step, x, times, events);
    for (int halve = 0; halve < 30 && !(next.loglik >= cur.loglik); ++halve) {
      step /= 2;
      next = cox_partial_likelihood(beta + step, x, times, events);
    }
    beta += step;
    cur = next;
    if (!std::isfinite(beta)) break;
    if (std::abs(step) < 1e-8) return beta;
  }
  throw computation_error("calibration slope: Newton-Raphson did not converge");
}

/// Discrimination and calibration of one model on one patient set.
struct performance_summary {
  std::optional<double> c_index;
  std::optional<double> calibration_slope;
  km_curve km;
  std::size_t n = 0;
  std::size_t events = 0;
};

} // namespace rmx
