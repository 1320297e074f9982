#pragma once

#include "rmx/cohort.hpp"
#include "rmx/error.hpp"
#include "rmx/riskmodels.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace rmx {

// -- group fairness -----------------------------------------------------------

/// Protected attribute with its privileged and unprivileged levels. Metric
/// differences are always unprivileged minus privileged.
struct protected_split {
  std::string attribute;
  std::string privileged;
  std::string unprivileged;

  friend bool operator==(const protected_split&, const protected_split&) = default;
};

inline void to_json(json& j, const protected_split& s) {
  j = {{"attribute", s.attribute}, {"privileged", s.privileged}, {"unprivileged", s.unprivileged}};
}

inline void from_json(const json& j, protected_split& s) {
  try {
    s.attribute = j.at("attribute").get<std::string>();
    s.privileged = j.at("privileged").get<std::string>();
    s.unprivileged = j.at("unprivileged").get<std::string>();
  } catch (const json::exception& e) {
    throw usage_error(std::string("malformed protected split: ") + e.what());
  }
}

/// Level indices of a split on a concrete schema variable.
struct split_levels {
  double privileged = 0;
  double unprivileged = 1;
};

inline split_levels resolve_split(const variable_schema& v, const protected_split& s) {
  if (!v.roles.protected_attr)
    throw invalid_argument("variable '" + v.name + "' does not carry the protected role");
  if (!v.is_discrete())
    throw invalid_argument("protected attribute '" + v.name + "' must be binary or categorical");
  auto p = v.level_index(s.privileged);
  auto u = v.level_index(s.unprivileged);
  if (!p) throw not_found("'" + v.name + "' has no level '" + s.privileged + "'");
  if (!u) throw not_found("'" + v.name + "' has no level '" + s.unprivileged + "'");
  if (*p == *u) throw invalid_argument("privileged and unprivileged levels of '" + v.name + "' coincide");
  return {static_cast<double>(*p), static_cast<double>(*u)};
}

/// Difference of two rates; `value` is empty when either side has no eligible patient.
struct rate_difference {
  std::optional<double> value;
  std::size_t n_priv = 0;
  std::size_t n_unpriv = 0;
};

/// P(label=1 | unprivileged) - P(label=1 | privileged).
inline rate_difference statistical_parity_difference(std::span<const std::uint8_t> labels,
                                                     std::span<const double> attribute,
                                                     split_levels split) {
  if (labels.size() != attribute.size()) throw invalid_argument("SPD inputs differ in length");
  rate_difference out;
  std::size_t pos_p = 0, pos_u = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (attribute[i] == split.privileged) {
      ++out.n_priv;
      pos_p += labels[i];
    } else if (attribute[i] == split.unprivileged) {
      ++out.n_unpriv;
      pos_u += labels[i];
    }
  }
  if (out.n_priv && out.n_unpriv)
    out.value = static_cast<double>(pos_u) / static_cast<double>(out.n_unpriv) -
                static_cast<double>(pos_p) / static_cast<double>(out.n_priv);
  return out;
}

/// Horizon outcome per patient: an event observed by the horizon is positive;
/// follow-up reaching the horizon is negative; earlier censoring is unknown.
struct horizon_labels {
  std::vector<std::uint8_t> event;
  std::vector<std::uint8_t> ascertainable;
};

inline horizon_labels make_horizon_labels(std::span<const double> times,
                                          std::span<const std::uint8_t> events, double horizon) {
  horizon_labels out;
  out.event.reserve(times.size());
  out.ascertainable.reserve(times.size());
  for (std::size_t i = 0; i < times.size(); ++i) {
    const bool positive = events[i] && times[i] <= horizon;
    out.event.push_back(positive ? 1 : 0);
    out.ascertainable.push_back(positive || times[i] >= horizon ? 1 : 0);
  }
  return out;
}

/// TPR(unprivileged) - TPR(privileged) over ascertainable patients. The
/// counts report each side's TPR denominator (ascertainable true events).
inline rate_difference tpr_difference(std::span<const std::uint8_t> labels,
                                      std::span<const std::uint8_t> true_events,
                                      std::span<const std::uint8_t> ascertainable,
                                      std::span<const double> attribute, split_levels split) {
  if (labels.size() != attribute.size() || labels.size() != true_events.size() ||
      labels.size() != ascertainable.size())
    throw invalid_argument("TPRD inputs differ in length");
  rate_difference out;
  std::size_t tp_p = 0, tp_u = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!ascertainable[i] || !true_events[i]) continue;
    if (attribute[i] == split.privileged) {
      ++out.n_priv;
      tp_p += labels[i];
    } else if (attribute[i] == split.unprivileged) {
      ++out.n_unpriv;
      tp_u += labels[i];
    }
  }
  if (out.n_priv && out.n_unpriv)
    out.value = static_cast<double>(tp_u) / static_cast<double>(out.n_unpriv) -
                static_cast<double>(tp_p) / static_cast<double>(out.n_priv);
  return out;
}

struct group_fairness_result {
  std::optional<double> spd;
  std::optional<double> tprd;
  std::size_t n_priv = 0;
  std::size_t n_unpriv = 0;
  std::size_t n_tpr_priv = 0;
  std::size_t n_tpr_unpriv = 0;
  std::vector<std::string> undefined_flags;
};

inline group_fairness_result group_fairness(std::span<const std::uint8_t> labels,
                                            const horizon_labels& outcome,
                                            std::span<const double> attribute, split_levels split) {
  auto spd = statistical_parity_difference(labels, attribute, split);
  auto tprd = tpr_difference(labels, outcome.event, outcome.ascertainable, attribute, split);
  group_fairness_result r;
  r.spd = spd.value;
  r.tprd = tprd.value;
  r.n_priv = spd.n_priv;
  r.n_unpriv = spd.n_unpriv;
  r.n_tpr_priv = tprd.n_priv;
  r.n_tpr_unpriv = tprd.n_unpriv;
  if (!r.spd) r.undefined_flags.push_back(spd.n_priv ? "spd:no_unprivileged" : "spd:no_privileged");
  if (!r.tprd)
    r.undefined_flags.push_back(tprd.n_priv ? "tprd:no_unprivileged_events" : "tprd:no_privileged_events");
  return r;
}

// -- sensitive subspace and fair distance ---------------------------------------

struct standardization {
  std::vector<double> mean;
  std::vector<double> sd;

  std::vector<double> apply(std::span<const double> raw) const {
    std::vector<double> z(raw.size());
    for (std::size_t k = 0; k < raw.size(); ++k) z[k] = (raw[k] - mean[k]) / sd[k];
    return z;
  }
  std::vector<double> invert(std::span<const double> z) const {
    std::vector<double> raw(z.size());
    for (std::size_t k = 0; k < z.size(); ++k) raw[k] = mean[k] + sd[k] * z[k];
    return raw;
  }
};

/// Orthonormal directions, in standardized covariate space, along which a fair
/// distance ignores displacement.
struct sensitive_subspace {
  std::vector<std::string> covariates;
  standardization scaling;
  std::vector<std::vector<double>> basis;
  /// Attributes whose fitted direction had (near) zero norm, hence no basis vector.
  std::vector<std::string> degenerate;
  /// Attributes whose direction was already spanned by earlier ones.
  std::vector<std::string> collinear;

  std::size_t dimension() const noexcept { return covariates.size(); }
};

inline constexpr double logistic_l2_penalty = 1e-4;
inline constexpr double degenerate_direction_norm = 1e-6;

namespace detail {

/// L2-penalized logistic regression by damped Newton. Maximizes
/// mean log-likelihood - penalty/2 * |w|^2 (intercept unpenalized).
/// Returns the slope coefficients.
inline Eigen::VectorXd fit_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double penalty,
                                    double tol = 1e-8, int max_iter = 200) {
  const auto n = X.rows();
  const auto p = X.cols();
  Eigen::MatrixXd A(n, p + 1);
  A.col(0).setOnes();
  A.rightCols(p) = X;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(p + 1);
  const double inv_n = 1.0 / static_cast<double>(n);

  auto objective = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd eta = A * v;
    double ll = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      // log(1+exp(eta)) computed stably
      const double e = eta(i);
      const double softplus = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
      ll += y(i) * e - softplus;
    }
    return ll * inv_n - 0.5 * penalty * v.tail(p).squaredNorm();
  };

  double cur = objective(w);
  for (int iter = 0; iter < max_iter; ++iter) {
    Eigen::VectorXd eta = A * w;
    Eigen::VectorXd mu(n), wt(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      mu(i) = 1.0 / (1.0 + std::exp(-eta(i)));
      wt(i) = mu(i) * (1.0 - mu(i));
    }
    Eigen::VectorXd grad = A.transpose() * (y - mu) * inv_n;
    grad.tail(p) -= penalty * w.tail(p);
    Eigen::MatrixXd H = A.transpose() * wt.asDiagonal() * A * inv_n;
    H.diagonal().tail(p).array() += penalty;
    H(0, 0) += 1e-12;
    Eigen::VectorXd step = H.ldlt().solve(grad);
    if (!step.allFinite()) throw computation_error("logistic regression: singular Hessian");
    double t = 1.0;
    Eigen::VectorXd next = w + step;
    double val = objective(next);
    while (val < cur && t > 1e-10) {
      t /= 2;
      next = w + t * step;
      val = objective(next);
    }
    const double moved = (t * step).cwiseAbs().maxCoeff();
    w = next;
    cur = val;
    if (moved < tol) return w.tail(p);
  }
  throw computation_error("logistic regression did not converge");
}

} // namespace detail

/// For each protected attribute, regresses the attribute (unprivileged = 1)
/// on the other covariates in standardized space and keeps the coefficient
/// vector as a sensitive direction; directions are then Gram-Schmidt
/// orthonormalized. Rows with any missing covariate or an attribute level
/// outside the split are ignored.
inline sensitive_subspace fit_sensitive_subspace(const cohort_snapshot& snap,
                                                 std::span<const protected_split> splits,
                                                 const std::vector<std::string>& covariates) {
  if (covariates.empty()) throw invalid_argument("sensitive subspace needs covariates");
  sensitive_subspace sub;
  sub.covariates = covariates;
  const auto p = covariates.size();

  std::vector<column_view> cols;
  for (const auto& c : covariates) cols.push_back(snap.column(c));
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < snap.size(); ++i)
    if (std::none_of(cols.begin(), cols.end(), [i](const column_view& c) { return c.missing(i); }))
      rows.push_back(i);
  if (rows.size() < 2) throw data_error("sensitive subspace: fewer than two complete rows");

  sub.scaling.mean.assign(p, 0);
  sub.scaling.sd.assign(p, 1);
  for (std::size_t k = 0; k < p; ++k) {
    double m = 0;
    for (auto i : rows) m += cols[k][i];
    m /= static_cast<double>(rows.size());
    double v = 0;
    for (auto i : rows) v += (cols[k][i] - m) * (cols[k][i] - m);
    v /= static_cast<double>(rows.size() - 1);
    sub.scaling.mean[k] = m;
    sub.scaling.sd[k] = v > 0 ? std::sqrt(v) : 1.0;
  }

  for (const auto& split : splits) {
    const auto& var = snap.variable(split.attribute);
    auto levels = resolve_split(var, split);
    auto attr = snap.column(split.attribute);
    std::vector<std::size_t> regressors;
    for (std::size_t k = 0; k < p; ++k)
      if (covariates[k] != split.attribute) regressors.push_back(k);

    std::vector<std::size_t> used;
    for (auto i : rows)
      if (attr[i] == levels.privileged || attr[i] == levels.unprivileged) used.push_back(i);
    std::vector<double> dir(p, 0.0);
    if (!regressors.empty() && used.size() >= 2) {
      Eigen::MatrixXd X(static_cast<Eigen::Index>(used.size()), static_cast<Eigen::Index>(regressors.size()));
      Eigen::VectorXd y(static_cast<Eigen::Index>(used.size()));
      for (std::size_t r = 0; r < used.size(); ++r) {
        const auto i = used[r];
        for (std::size_t c = 0; c < regressors.size(); ++c) {
          const auto k = regressors[c];
          X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
              (cols[k][i] - sub.scaling.mean[k]) / sub.scaling.sd[k];
        }
        y(static_cast<Eigen::Index>(r)) = attr[i] == levels.unprivileged ? 1.0 : 0.0;
      }
      auto w = detail::fit_logistic(X, y, logistic_l2_penalty);
      for (std::size_t c = 0; c < regressors.size(); ++c) dir[regressors[c]] = w(static_cast<Eigen::Index>(c));
    }

    double norm = 0;
    for (double v : dir) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < degenerate_direction_norm) {
      sub.degenerate.push_back(split.attribute);
      continue;
    }
    for (auto& v : dir) v /= norm;
    for (const auto& b : sub.basis) {
      double dot = 0;
      for (std::size_t k = 0; k < p; ++k) dot += dir[k] * b[k];
      for (std::size_t k = 0; k < p; ++k) dir[k] -= dot * b[k];
    }
    double rest = 0;
    for (double v : dir) rest += v * v;
    rest = std::sqrt(rest);
    if (rest < 1e-8) {
      sub.collinear.push_back(split.attribute);
      continue;
    }
    for (auto& v : dir) v /= rest;
    sub.basis.push_back(std::move(dir));
  }
  return sub;
}

namespace detail {
/// Component of `delta` orthogonal to the sensitive basis; written to `out`.
inline void orthogonal_part(const sensitive_subspace& sub, std::span<const double> delta,
                            std::span<double> out) noexcept {
  std::copy(delta.begin(), delta.end(), out.begin());
  for (const auto& b : sub.basis) {
    double dot = 0;
    for (std::size_t k = 0; k < b.size(); ++k) dot += b[k] * delta[k];
    for (std::size_t k = 0; k < b.size(); ++k) out[k] -= dot * b[k];
  }
}
} // namespace detail

/// sqrt((x-x')^T (I-P) (x-x')) on standardized vectors, P the projector onto
/// the sensitive basis.
inline double fair_distance(const sensitive_subspace& sub, std::span<const double> x,
                            std::span<const double> y) {
  if (x.size() != sub.dimension() || y.size() != sub.dimension())
    throw invalid_argument("fair_distance: dimension mismatch");
  std::vector<double> delta(x.size()), orth(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) delta[k] = x[k] - y[k];
  detail::orthogonal_part(sub, delta, orth);
  double s = 0;
  for (double v : orth) s += v * v;
  return std::sqrt(s);
}

// -- individual fairness audit ----------------------------------------------------

inline constexpr double default_audit_lambda = 1.0;

struct audit_config {
  double lambda = default_audit_lambda;
  /// Per-covariate [min,max] in raw units, model variable order.
  std::vector<value_range> box;
  /// Initial step; grown on accepted steps and halved on rejected ones.
  double step_size = 0.1;
  int max_iters = 500;
  double tolerance = 1e-8;
  threshold thr;
  bool record_trace = false;
};

/// Observed per-covariate ranges over `rows`, model variable order.
inline std::vector<value_range> observed_box(const bound_model& bm, std::span<const std::size_t> rows) {
  std::vector<value_range> box(bm.columns().size(),
                               {std::numeric_limits<double>::infinity(),
                                -std::numeric_limits<double>::infinity()});
  for (auto r : rows)
    for (std::size_t k = 0; k < bm.columns().size(); ++k) {
      double v = bm.snapshot().column(bm.columns()[k])[r];
      if (is_missing(v)) continue;
      box[k].min = std::min(box[k].min, v);
      box[k].max = std::max(box[k].max, v);
    }
  for (auto& b : box)
    if (b.min > b.max) b = {0, 0};
  return box;
}

struct audit_result {
  std::vector<double> counterfactual;  // raw units
  bool original_label = false;
  bool flipped = false;
  double risk_original = 0;
  double risk_counterfactual = 0;
  int iterations = 0;
  std::vector<double> objective_trace;  // accepted iterates, when recorded
};

/// Searches for a fair-distance-close individual on the other side of the
/// threshold: minimizes p(u) + lambda*d(x,u) when x is labeled high risk and
/// maximizes p(u) - lambda*d(x,u) otherwise, with u confined to the box and
/// p the horizon risk. Proximal gradient: the distance term is handled by
/// its proximal map (shrinkage of the orthogonal displacement), the box by
/// projection, and steps are only accepted when the objective improves.
inline audit_result audit_individual(std::span<const double> x, const bound_model& bm,
                                     const sensitive_subspace& sub, const audit_config& cfg) {
  const auto p = bm.variables().size();
  if (sub.covariates != bm.variables())
    throw invalid_argument("audit: subspace covariates do not match model variables");
  if (x.size() != p || cfg.box.size() != p) throw invalid_argument("audit: dimension mismatch");
  if (!(cfg.lambda > 0)) throw invalid_argument("audit: lambda must be positive");
  if (cfg.thr.model != bm.model().name) throw invalid_argument("audit: threshold bound to another model");
  for (std::size_t k = 0; k < p; ++k) {
    if (is_missing(x[k])) throw data_error("audit: missing covariate '" + bm.variables()[k] + "'");
    if (!(cfg.box[k].min <= cfg.box[k].max))
      throw invalid_argument("audit: box min exceeds max for '" + bm.variables()[k] + "'");
    if (!cfg.box[k].contains(x[k]))
      throw invalid_argument("audit: covariate '" + bm.variables()[k] + "' lies outside the box");
  }

  const auto& model = bm.model();
  const auto& sc = sub.scaling;
  std::vector<double> z0 = sc.apply(x);
  std::vector<double> lo(p), hi(p);
  for (std::size_t k = 0; k < p; ++k) {
    lo[k] = (cfg.box[k].min - sc.mean[k]) / sc.sd[k];
    hi[k] = (cfg.box[k].max - sc.mean[k]) / sc.sd[k];
  }

  const double s0 = bm.score(x);
  audit_result res;
  res.risk_original = risk_from_score(model, s0);
  res.original_label = res.risk_original >= cfg.thr.risk_value;
  const double sign = res.original_label ? 1.0 : -1.0;

  std::vector<double> raw(p), delta(p), orth(p), grad(p), z = z0, cand(p);
  auto objective = [&](std::span<const double> zz) {
    for (std::size_t k = 0; k < p; ++k) {
      raw[k] = sc.mean[k] + sc.sd[k] * zz[k];
      delta[k] = zz[k] - z0[k];
    }
    detail::orthogonal_part(sub, delta, orth);
    double d = 0;
    for (double v : orth) d += v * v;
    return sign * risk_from_score(model, bm.score(raw)) + cfg.lambda * std::sqrt(d);
  };

  double f = objective(z);
  if (!std::isfinite(f)) throw computation_error("audit: non-finite objective");
  if (cfg.record_trace) res.objective_trace.push_back(f);
  double eta = cfg.step_size;
  for (int it = 0; it < cfg.max_iters; ++it) {
    res.iterations = it + 1;
    for (std::size_t k = 0; k < p; ++k) raw[k] = sc.mean[k] + sc.sd[k] * z[k];
    bm.score_gradient(raw, grad);
    const double dp = sign * risk_derivative(model, bm.score(raw));
    // gradient step on the smooth part, in standardized coordinates
    for (std::size_t k = 0; k < p; ++k) delta[k] = z[k] - eta * dp * grad[k] * sc.sd[k] - z0[k];
    detail::orthogonal_part(sub, delta, orth);
    double on = 0;
    for (double v : orth) on += v * v;
    on = std::sqrt(on);
    const double shrink = on > 0 ? std::max(0.0, 1.0 - eta * cfg.lambda / on) : 0.0;
    double moved = 0;
    for (std::size_t k = 0; k < p; ++k) {
      const double sensitive = delta[k] - orth[k];
      cand[k] = std::clamp(z0[k] + sensitive + shrink * orth[k], lo[k], hi[k]);
      moved += (cand[k] - z[k]) * (cand[k] - z[k]);
    }
    moved = std::sqrt(moved);
    const double fc = objective(cand);
    if (!std::isfinite(fc)) throw computation_error("audit: non-finite objective");
    if (fc <= f) {
      z.swap(cand);
      f = fc;
      if (cfg.record_trace) res.objective_trace.push_back(f);
      if (moved < cfg.tolerance) break;
      eta = std::min(eta * 2.0, 1e12);
    } else {
      eta /= 2.0;
      if (eta < 1e-14) break;
    }
  }

  res.counterfactual = sc.invert(z);
  for (std::size_t k = 0; k < p; ++k)
    res.counterfactual[k] = std::clamp(res.counterfactual[k], cfg.box[k].min, cfg.box[k].max);
  res.risk_counterfactual = risk_from_score(model, bm.score(res.counterfactual));
  res.flipped = (res.risk_counterfactual >= cfg.thr.risk_value) != res.original_label;
  return res;
}

struct violation_summary {
  std::optional<double> rate;
  std::size_t flipped = 0;
  std::size_t audited = 0;
};

/// Fraction of audited rows whose counterfactual lands across the threshold.
inline violation_summary violation_rate(const bound_model& bm, std::span<const std::size_t> rows,
                                        const sensitive_subspace& sub, const audit_config& cfg) {
  violation_summary out;
  for (auto r : rows) {
    auto x = bm.covariates(r);
    auto res = audit_individual(x, bm, sub, cfg);
    ++out.audited;
    out.flipped += res.flipped ? 1 : 0;
  }
  if (out.audited)
    out.rate = static_cast<double>(out.flipped) / static_cast<double>(out.audited);
  return out;
}

/// Seeded subsample without replacement, size max(1, round(fraction*n)),
/// returned in ascending row order.
inline std::vector<std::size_t> sample_rows(std::span<const std::size_t> rows, double fraction,
                                            std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw invalid_argument("sampling fraction must lie in (0,1]");
  if (rows.empty()) return {};
  std::vector<std::size_t> pool(rows.begin(), rows.end());
  const auto k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool.size()))));
  if (k >= pool.size()) return pool;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

} // namespace rmx
