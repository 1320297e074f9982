#pragma once

#include "rmx/cohort.hpp"
#include "rmx/error.hpp"
#include "rmx/riskmodels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace rmx {

/// Target distribution of one variable. Continuous variables use mean/std
/// (the marginal std; the residual noise is reduced to leave room for
/// confounder shifts). Discrete variables use level proportions.
struct marginal_target {
  double mean = 0;
  double std = 1;
  std::vector<double> proportions;
  double missing = 0;  // fraction of rows left missing
};

/// Shift applied to `target` by the centered value of an earlier `source`:
/// additive (target units per source SD) for continuous targets, on the
/// logit scale for binary targets. Discrete sources are centered on their
/// expected level index instead of standardized.
struct confounder {
  std::string source;
  std::string target;
  double effect = 0;
};

struct synth_spec {
  std::size_t n = 0;
  std::uint64_t seed = 0;
  schema_list schema;
  std::map<std::string, marginal_target> marginals;
  std::vector<confounder> confounders;
  risk_model outcome_model;
  double target_incidence = 0.0166;
  int horizon_days = 1826;
  /// Fraction of patients given a uniform dropout time in [1, horizon].
  double dropout = 0;

  void validate() const {
    if (n == 0) throw invalid_argument("synthetic spec: n must be positive");
    validate_schema(schema);
    if (!(target_incidence > 0 && target_incidence < 1))
      throw invalid_argument("synthetic spec: target_incidence must lie in (0,1)");
    if (horizon_days <= 0) throw invalid_argument("synthetic spec: horizon_days must be positive");
    if (!(dropout >= 0 && dropout <= 1)) throw invalid_argument("synthetic spec: dropout must lie in [0,1]");
    outcome_model.validate();
    for (const auto& v : schema) {
      auto it = marginals.find(v.name);
      if (it == marginals.end()) throw invalid_argument("synthetic spec: no marginal for '" + v.name + "'");
      const auto& m = it->second;
      if (!(m.missing >= 0 && m.missing < 1))
        throw invalid_argument("synthetic spec: missing fraction of '" + v.name + "' must lie in [0,1)");
      if (v.is_discrete()) {
        if (m.proportions.size() != v.level_count())
          throw invalid_argument("synthetic spec: '" + v.name + "' needs " +
                                 std::to_string(v.level_count()) + " level proportions");
        double sum = 0;
        for (double p : m.proportions) {
          if (!(p >= 0)) throw invalid_argument("synthetic spec: negative proportion for '" + v.name + "'");
          sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9)
          throw invalid_argument("synthetic spec: proportions of '" + v.name + "' sum to " +
                                 detail::format_double(sum));
      } else if (!(m.std > 0)) {
        throw invalid_argument("synthetic spec: std of '" + v.name + "' must be positive");
      }
    }
    for (const auto& m : marginals)
      if (std::none_of(schema.begin(), schema.end(), [&](const auto& v) { return v.name == m.first; }))
        throw invalid_argument("synthetic spec: marginal for unknown variable '" + m.first + "'");
    auto position = [&](const std::string& name) -> std::size_t {
      for (std::size_t i = 0; i < schema.size(); ++i)
        if (schema[i].name == name) return i;
      throw not_found("synthetic spec: confounder names unknown variable '" + name + "'");
    };
    for (const auto& c : confounders) {
      const auto s = position(c.source), t = position(c.target);
      if (s >= t)
        throw invalid_argument("synthetic spec: confounder source '" + c.source +
                               "' must be declared before target '" + c.target + "'");
      if (schema[t].kind == variable_kind::categorical)
        throw invalid_argument("synthetic spec: categorical target '" + c.target + "' cannot be shifted");
    }
    for (const auto& var : outcome_model.variables()) {
      auto it = marginals.find(var);
      if (it == marginals.end())
        throw not_found("outcome model variable '" + var + "' is not generated");
      if (it->second.missing > 0)
        throw invalid_argument("outcome model variable '" + var + "' may not be missing");
    }
  }
};

inline void to_json(json& j, const marginal_target& m) {
  j = json::object();
  if (m.proportions.empty()) {
    j["mean"] = m.mean;
    j["std"] = m.std;
  } else {
    j["proportions"] = m.proportions;
  }
  if (m.missing > 0) j["missing"] = m.missing;
}

inline void to_json(json& j, const synth_spec& s) {
  json marg = json::object();
  for (const auto& [k, v] : s.marginals) marg[k] = v;
  json conf = json::array();
  for (const auto& c : s.confounders)
    conf.push_back({{"source", c.source}, {"target", c.target}, {"effect", c.effect}});
  j = {{"n", s.n},
       {"seed", s.seed},
       {"schema", s.schema},
       {"marginals", marg},
       {"confounders", conf},
       {"outcome_model", s.outcome_model},
       {"target_incidence", s.target_incidence},
       {"horizon_days", s.horizon_days},
       {"dropout", s.dropout}};
}

inline synth_spec parse_synth_spec(const json& j) {
  synth_spec s;
  try {
    s.n = j.at("n").get<std::size_t>();
    s.seed = j.value("seed", std::uint64_t{0});
    s.schema = parse_schema(j.at("schema"));
    for (const auto& [name, m] : j.at("marginals").items()) {
      marginal_target t;
      if (m.contains("proportions")) {
        t.proportions = m["proportions"].get<std::vector<double>>();
      } else {
        t.mean = m.at("mean").get<double>();
        t.std = m.at("std").get<double>();
      }
      t.missing = m.value("missing", 0.0);
      s.marginals[name] = t;
    }
    for (const auto& c : j.value("confounders", json::array()))
      s.confounders.push_back(
          {c.at("source").get<std::string>(), c.at("target").get<std::string>(), c.at("effect").get<double>()});
    const auto& om = j.at("outcome_model");
    if (om.is_string()) {
      auto builtins = builtin_models();
      s.outcome_model = find_model(builtins, om.get<std::string>());
    } else {
      s.outcome_model = om.get<risk_model>();
    }
    s.target_incidence = j.at("target_incidence").get<double>();
    s.horizon_days = j.value("horizon_days", 1826);
    s.dropout = j.value("dropout", 0.0);
  } catch (const json::exception& e) {
    throw data_error(std::string("malformed synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

struct synth_result {
  cohort_snapshot snapshot;
  /// Fraction with an event time inside the horizon before dropout censoring.
  double horizon_incidence = 0;
  /// Fraction with an observed event.
  double observed_incidence = 0;
  /// Calibrated log(baseline rate * horizon).
  double log_rate = 0;
};

namespace detail {

struct centered_source {
  double center = 0;
  double scale = 1;
  double variance = 1;  // variance of the centered, scaled value
};

inline centered_source centering(const variable_schema& v, const marginal_target& m) {
  if (!v.is_discrete()) return {m.mean, m.std, 1.0};
  double mu = 0, var = 0;
  for (std::size_t l = 0; l < m.proportions.size(); ++l) mu += static_cast<double>(l) * m.proportions[l];
  for (std::size_t l = 0; l < m.proportions.size(); ++l)
    var += m.proportions[l] * (static_cast<double>(l) - mu) * (static_cast<double>(l) - mu);
  return {mu, 1.0, var};
}

} // namespace detail

/// Draws a cohort from the spec. Covariates are generated column by column in
/// schema order; event times follow an exponential hazard proportional to
/// exp(outcome score) whose rate is calibrated by bisection so the realized
/// horizon incidence matches the target. Administrative censoring at the
/// horizon, plus optional uniform dropout.
inline synth_result generate_synthetic(const synth_spec& spec) {
  spec.validate();
  const auto n = spec.n;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<std::vector<double>> cols(spec.schema.size());
  for (std::size_t c = 0; c < spec.schema.size(); ++c) {
    const auto& v = spec.schema[c];
    const auto& m = spec.marginals.at(v.name);

    struct active_shift {
      const std::vector<double>* values;
      detail::centered_source center;
      double effect;
    };
    std::vector<active_shift> shifts;
    double shift_var = 0;
    for (const auto& conf : spec.confounders) {
      if (conf.target != v.name) continue;
      std::size_t s = 0;
      while (spec.schema[s].name != conf.source) ++s;
      auto cs = detail::centering(spec.schema[s], spec.marginals.at(conf.source));
      shifts.push_back({&cols[s], cs, conf.effect});
      shift_var += conf.effect * conf.effect * cs.variance;
    }
    double resid_sd = m.std;
    if (!v.is_discrete()) {
      const double r2 = m.std * m.std - shift_var;
      if (r2 <= 0)
        throw invalid_argument("synthetic spec: confounder shifts on '" + v.name +
                               "' exceed its target variance");
      resid_sd = std::sqrt(r2);
    }

    auto& col = cols[c];
    col.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double u_missing = unif(rng);
      double shift = 0;
      for (const auto& sh : shifts) {
        const double src = (*sh.values)[i];
        if (!is_missing(src)) shift += sh.effect * (src - sh.center.center) / sh.center.scale;
      }
      double value = 0;
      switch (v.kind) {
        case variable_kind::continuous: {
          value = m.mean + shift + resid_sd * normal(rng);
          if (v.valid_range) value = std::clamp(value, v.valid_range->min, v.valid_range->max);
          break;
        }
        case variable_kind::binary: {
          const double p1 = m.proportions[1];
          double p = p1;
          if (shift != 0 && p1 > 0 && p1 < 1) {
            const double logit = std::log(p1 / (1 - p1)) + shift;
            p = 1.0 / (1.0 + std::exp(-logit));
          }
          value = unif(rng) < p ? 1.0 : 0.0;
          break;
        }
        case variable_kind::categorical: {
          double u = unif(rng), acc = 0;
          std::size_t level = m.proportions.size() - 1;
          for (std::size_t l = 0; l < m.proportions.size(); ++l) {
            acc += m.proportions[l];
            if (u < acc) {
              level = l;
              break;
            }
          }
          value = static_cast<double>(level);
          break;
        }
      }
      col[i] = u_missing < m.missing ? missing_value : value;
    }
  }

  // Outcome: E_i ~ Exp(1); the event falls inside the horizon iff
  // log E_i - s_i <= a, where a = log(rate * horizon).
  std::vector<double> scores(n);
  {
    cohort_snapshot tmp(spec.schema, cols, std::vector<int>(n, 0), std::vector<std::uint8_t>(n, 0));
    bound_model bm(spec.outcome_model, tmp);
    for (std::size_t i = 0; i < n; ++i) scores[i] = bm.score_row(i);
  }
  std::vector<double> q(n), dropout_u(n), dropout_v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double e = -std::log1p(-unif(rng));
    q[i] = std::log(e) - scores[i];
    dropout_u[i] = unif(rng);
    dropout_v[i] = unif(rng);
  }

  auto incidence = [&](double a) {
    std::size_t k = 0;
    for (double qi : q) k += qi <= a ? 1 : 0;
    return static_cast<double>(k) / static_cast<double>(n);
  };
  double lo = *std::min_element(q.begin(), q.end()) - 1.0;
  double hi = *std::max_element(q.begin(), q.end()) + 1.0;
  double inc_lo = incidence(lo), inc_hi = incidence(hi);
  for (int step = 0; step < 100; ++step) {
    const double mid = 0.5 * (lo + hi);
    const double inc = incidence(mid);
    if (inc < spec.target_incidence) {
      lo = mid;
      inc_lo = inc;
    } else {
      hi = mid;
      inc_hi = inc;
    }
  }
  const bool pick_hi =
      std::abs(inc_hi - spec.target_incidence) <= std::abs(inc_lo - spec.target_incidence);
  const double a = pick_hi ? hi : lo;
  const double achieved = pick_hi ? inc_hi : inc_lo;
  if (std::abs(achieved - spec.target_incidence) > 1.0 / static_cast<double>(n) + 1e-12)
    throw computation_error("synthetic spec: incidence " + detail::format_double(spec.target_incidence) +
                            " unreachable; achievable bracket [" + detail::format_double(inc_lo) +
                            ", " + detail::format_double(inc_hi) + "]");

  const int horizon = spec.horizon_days;
  std::vector<int> days(n);
  std::vector<std::uint8_t> event(n);
  std::size_t observed = 0;
  for (std::size_t i = 0; i < n; ++i) {
    int t = horizon;
    bool ev = false;
    if (q[i] <= a) {
      const double time = static_cast<double>(horizon) * std::exp(q[i] - a);
      t = std::clamp(static_cast<int>(std::ceil(time)), 1, horizon);
      ev = true;
    }
    if (dropout_u[i] < spec.dropout) {
      const int c = std::clamp(static_cast<int>(std::ceil(dropout_v[i] * horizon)), 1, horizon);
      if (c < t) {
        t = c;
        ev = false;
      }
    }
    days[i] = t;
    event[i] = ev ? 1 : 0;
    observed += ev ? 1 : 0;
  }

  std::vector<ledger_entry> ledger{{"synthetic cohort (seed " + std::to_string(spec.seed) + ")", n}};
  return {cohort_snapshot(spec.schema, std::move(cols), std::move(days), std::move(event), std::move(ledger)),
          achieved, static_cast<double>(observed) / static_cast<double>(n), a};
}

// -- bundled synthetic cohort ----------------------------------------------------

namespace detail {
inline variable_schema binary_var(std::string name, std::vector<std::string> levels = {},
                                  role_set roles = {true, false, false}) {
  variable_schema v;
  v.name = std::move(name);
  v.kind = variable_kind::binary;
  v.levels = std::move(levels);
  v.roles = roles;
  return v;
}
inline variable_schema continuous_var(std::string name, std::string units, double lo, double hi,
                                      role_set roles = {true, false, false}) {
  variable_schema v;
  v.name = std::move(name);
  v.units = std::move(units);
  v.valid_range = value_range{lo, hi};
  v.roles = roles;
  return v;
}
} // namespace detail

/// Cohort resembling an adult atrial-fibrillation study population:
/// demographic and risk-factor marginals, 5-year incidence 1.66 %, and an
/// income gradient in age, height, risk factors and unrecorded risk.
inline synth_spec default_synth_spec(std::size_t n = 50000, std::uint64_t seed = 42) {
  using detail::binary_var;
  using detail::continuous_var;
  synth_spec s;
  s.n = n;
  s.seed = seed;

  variable_schema income;
  income.name = "income";
  income.kind = variable_kind::categorical;
  income.units = "GBP per year";
  income.levels = {"lt_18k", "18k_31k", "31k_52k", "52k_100k", "gt_100k"};
  income.missing_codes = {"Do not know", "Prefer not to answer"};
  income.roles = {false, true, true};

  s.schema = {
      income,
      binary_var("sex", {"female", "male"}, {true, true, true}),
      binary_var("race", {"nonwhite", "white"}, {true, true, true}),
      continuous_var("age", "years", 18, 110, {true, true, false}),
      binary_var("smoking", {}, {true, true, false}),
      continuous_var("sbp", "mmHg", 60, 260),
      continuous_var("dbp", "mmHg", 30, 160),
      continuous_var("height", "cm", 120, 220),
      continuous_var("weight", "kg", 30, 250),
      binary_var("hypertension", {}, {true, true, false}),
      binary_var("diabetes", {}, {true, true, false}),
      binary_var("hyperlipidemia", {}, {true, true, false}),
      binary_var("heart_failure"),
      binary_var("myocardial_infarction"),
      binary_var("coronary_heart_disease"),
      binary_var("valvular_disease"),
      binary_var("stroke_tia"),
      binary_var("peripheral_artery_disease"),
      binary_var("pulmonary_disease"),
      binary_var("chronic_kidney_disease"),
      binary_var("hypothyroidism"),
      binary_var("unrecorded_risk", {}, {false, false, false}),
  };

  auto prop = [](double p1) { return marginal_target{0, 1, {1 - p1, p1}, 0}; };
  auto cont = [](double mean, double sd) { return marginal_target{mean, sd, {}, 0}; };
  // Income shares renormalized over reporters; non-reporters stay missing.
  const double reported = 1.0 - 0.151;
  s.marginals["income"] = {0, 1, {0.195 / reported, 0.221 / reported, 0.219 / reported, 0.169 / reported,
                                  0.045 / reported}, 0.151};
  {
    // exact unit sum for the validation tolerance
    auto& p = s.marginals["income"].proportions;
    p.back() = 1.0 - (p[0] + p[1] + p[2] + p[3]);
  }
  s.marginals["sex"] = {0, 1, {0.55, 0.45}, 0};
  s.marginals["race"] = {0, 1, {0.053, 0.947}, 0};
  s.marginals["age"] = cont(58.4, 7.0);
  s.marginals["smoking"] = prop(0.107);
  s.marginals["sbp"] = cont(138.9, 18.6);
  s.marginals["dbp"] = cont(82.5, 10.1);
  s.marginals["height"] = cont(168.2, 9.2);
  s.marginals["weight"] = cont(77.9, 15.8);
  s.marginals["hypertension"] = prop(0.305);
  s.marginals["diabetes"] = prop(0.025);
  s.marginals["hyperlipidemia"] = prop(0.157);
  s.marginals["heart_failure"] = prop(0.004);
  s.marginals["myocardial_infarction"] = prop(0.02);
  s.marginals["coronary_heart_disease"] = prop(0.05);
  s.marginals["valvular_disease"] = prop(0.01);
  s.marginals["stroke_tia"] = prop(0.015);
  s.marginals["peripheral_artery_disease"] = prop(0.006);
  s.marginals["pulmonary_disease"] = prop(0.03);
  s.marginals["chronic_kidney_disease"] = prop(0.01);
  s.marginals["hypothyroidism"] = prop(0.05);
  s.marginals["unrecorded_risk"] = prop(0.25);

  s.confounders = {
      {"income", "age", -3.0},
      {"income", "smoking", -0.3},
      {"income", "height", 1.0},
      {"income", "hypertension", -0.15},
      {"income", "unrecorded_risk", -0.5},
      {"sex", "height", 13.0},
      {"sex", "weight", 12.0},
      {"age", "sbp", 5.0},
      {"age", "hypertension", 0.4},
      {"sex", "myocardial_infarction", 0.8},
      {"sex", "coronary_heart_disease", 0.7},
      {"age", "coronary_heart_disease", 0.4},
      {"sex", "hypothyroidism", -1.2},
      {"sbp", "dbp", 5.0},
  };

  auto models = builtin_models();
  risk_model truth = find_model(models, "ehr-af");
  truth.name = "synthetic-truth";
  // The true age effect flattens with age (peaking near 67), which the
  // published models do not capture, so older subgroups are ranked worse.
  truth.terms.push_back({"age", transform_kind::scale, 10, {}, 2.5, {}});
  truth.terms.push_back({"age", transform_kind::scaled_square, 10, {}, -0.25, {}});
  truth.terms.push_back({"unrecorded_risk", transform_kind::identity, 0, {}, 1.0, {}});
  s.outcome_model = truth;
  s.target_incidence = 0.0166;
  s.horizon_days = 1826;
  s.dropout = 0.02;
  return s;
}

} // namespace rmx
