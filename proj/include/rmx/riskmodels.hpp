#pragma once

#include "rmx/cohort.hpp"
#include "rmx/error.hpp"

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rmx {

enum class transform_kind { identity, scale, scaled_square, indicator_ge, indicator_eq };

inline std::string_view to_string(transform_kind t) noexcept {
  switch (t) {
    case transform_kind::identity: return "identity";
    case transform_kind::scale: return "scale";
    case transform_kind::scaled_square: return "scaled_square";
    case transform_kind::indicator_ge: return "indicator_ge";
    case transform_kind::indicator_eq: return "indicator_eq";
  }
  return "identity";
}

/// One coefficient row of a linear risk score.
///
/// `param` is the divisor k for scale/scaled_square and the cutoff for
/// indicator_ge; `level` names the matched level for indicator_eq.
/// scaled_square computes (x/k)^2, i.e. rescale first, then square.
struct model_term {
  std::string variable;
  transform_kind transform = transform_kind::identity;
  double param = 0;
  std::string level;
  double coefficient = 0;
  /// Variable this term is attributed to in explanations; defaults to `variable`.
  std::string display;

  const std::string& display_variable() const noexcept {
    return display.empty() ? variable : display;
  }

  friend bool operator==(const model_term&, const model_term&) = default;
};

struct risk_model {
  std::string name;
  std::vector<model_term> terms;
  /// Average event-free survival at the horizon, in (0,1).
  double c = 0.5;
  double bias = 0;
  int horizon_days = 1826;

  friend bool operator==(const risk_model&, const risk_model&) = default;

  void validate() const {
    if (name.empty()) throw data_error("risk model without a name");
    if (!(c > 0 && c < 1)) throw data_error("model '" + name + "': c must lie in (0,1)");
    if (!std::isfinite(bias)) throw data_error("model '" + name + "': bias must be finite");
    if (horizon_days <= 0) throw data_error("model '" + name + "': horizon_days must be positive");
    for (const auto& t : terms) {
      if (t.variable.empty()) throw data_error("model '" + name + "': term without variable");
      if ((t.transform == transform_kind::scale || t.transform == transform_kind::scaled_square) &&
          !(t.param > 0))
        throw data_error("model '" + name + "': scale divisor for '" + t.variable +
                         "' must be positive");
      if (t.transform == transform_kind::indicator_eq && t.level.empty())
        throw data_error("model '" + name + "': indicator_eq on '" + t.variable +
                         "' names no level");
      if (!std::isfinite(t.coefficient))
        throw data_error("model '" + name + "': non-finite coefficient");
    }
  }

  /// Distinct underlying variables, in first-use order.
  std::vector<std::string> variables() const {
    std::vector<std::string> out;
    for (const auto& t : terms)
      if (std::find(out.begin(), out.end(), t.variable) == out.end()) out.push_back(t.variable);
    return out;
  }

  /// Distinct display variables, in first-use order.
  std::vector<std::string> display_variables() const {
    std::vector<std::string> out;
    for (const auto& t : terms)
      if (std::find(out.begin(), out.end(), t.display_variable()) == out.end())
        out.push_back(t.display_variable());
    return out;
  }
};

// -- JSON ---------------------------------------------------------------------

inline void to_json(json& j, const model_term& t) {
  j = {{"variable", t.variable}, {"transform", to_string(t.transform)}, {"coefficient", t.coefficient}};
  switch (t.transform) {
    case transform_kind::identity: j["param"] = nullptr; break;
    case transform_kind::indicator_eq: j["param"] = t.level; break;
    default: j["param"] = t.param; break;
  }
  if (!t.display.empty()) j["display"] = t.display;
}

inline void from_json(const json& j, model_term& t) {
  try {
    t = {};
    t.variable = j.at("variable").get<std::string>();
    t.coefficient = j.at("coefficient").get<double>();
    auto kind = j.value("transform", "identity");
    const json param = j.contains("param") ? j["param"] : json(nullptr);
    if (kind == "identity") {
      t.transform = transform_kind::identity;
    } else if (kind == "scale" || kind == "scaled_square" || kind == "indicator_ge") {
      t.transform = kind == "scale"           ? transform_kind::scale
                    : kind == "scaled_square" ? transform_kind::scaled_square
                                              : transform_kind::indicator_ge;
      if (!param.is_number())
        throw data_error("term '" + t.variable + "': transform " + kind + " needs a numeric param");
      t.param = param.get<double>();
    } else if (kind == "indicator_eq") {
      t.transform = transform_kind::indicator_eq;
      if (param.is_string()) t.level = param.get<std::string>();
      else if (param.is_number()) t.level = detail::format_double(param.get<double>());
      else throw data_error("term '" + t.variable + "': indicator_eq needs a level param");
    } else {
      throw data_error("term '" + t.variable + "': unknown transform '" + kind + "'");
    }
    t.display = j.value("display", "");
  } catch (const json::exception& e) {
    throw data_error(std::string("malformed model term: ") + e.what());
  }
}

inline void to_json(json& j, const risk_model& m) {
  j = {{"name", m.name}, {"horizon_days", m.horizon_days}, {"c", m.c}, {"bias", m.bias}, {"terms", m.terms}};
}

inline void from_json(const json& j, risk_model& m) {
  try {
    m = {};
    m.name = j.at("name").get<std::string>();
    m.horizon_days = j.value("horizon_days", 1826);
    m.c = j.at("c").get<double>();
    m.bias = j.at("bias").get<double>();
    m.terms = j.at("terms").get<std::vector<model_term>>();
  } catch (const json::exception& e) {
    throw data_error(std::string("malformed risk model: ") + e.what());
  }
  m.validate();
}

inline std::vector<risk_model> parse_models(const json& doc) {
  const json& list = doc.is_object() && doc.contains("models") ? doc["models"] : doc;
  if (list.is_object()) return {list.get<risk_model>()};
  if (!list.is_array()) throw data_error("model document must be a model or an array of models");
  return list.get<std::vector<risk_model>>();
}

// -- built-in atrial fibrillation scores ----------------------------------------

namespace detail {
inline model_term term(std::string var, transform_kind tr, double param, double coef,
                       std::string display = {}) {
  return {std::move(var), tr, param, {}, coef, std::move(display)};
}
inline model_term level_term(std::string var, std::string level, double coef) {
  return {std::move(var), transform_kind::indicator_eq, 0, std::move(level), coef, {}};
}
} // namespace detail

/// EHR-AF, CHARGE-AF and C2HEST with their published 5-year coefficients.
/// Variable names follow the bundled synthetic cohort schema.
namespace detail {
inline std::vector<risk_model> make_builtin_models() {
  using detail::level_term;
  using detail::term;
  using tk = transform_kind;
  risk_model ehr{"ehr-af",
                 {
                     level_term("sex", "male", 0.137),
                     term("age", tk::scale, 10, 1.494),
                     term("age", tk::scaled_square, 10, -0.048),
                     level_term("race", "white", -0.208),
                     term("smoking", tk::identity, 0, 0.152),
                     term("height", tk::scale, 10, -0.231),
                     term("height", tk::scaled_square, 10, 0.012),
                     term("weight", tk::scale, 15, -0.050),
                     term("weight", tk::scaled_square, 15, 0.021),
                     term("dbp", tk::indicator_ge, 80, -0.104),
                     term("hypertension", tk::identity, 0, 0.106),
                     term("hyperlipidemia", tk::identity, 0, -0.156),
                     term("heart_failure", tk::identity, 0, 0.563),
                     term("coronary_heart_disease", tk::identity, 0, 0.210),
                     term("valvular_disease", tk::identity, 0, 0.487),
                     term("stroke_tia", tk::identity, 0, 0.132),
                     term("peripheral_artery_disease", tk::identity, 0, 0.126),
                     term("chronic_kidney_disease", tk::identity, 0, 0.279),
                     term("hypothyroidism", tk::identity, 0, -0.138),
                 },
                 0.971,
                 6.454,
                 1826};
  risk_model charge{"charge-af",
                    {
                        term("age", tk::scale, 10, 1.016),
                        level_term("race", "white", 0.465),
                        term("smoking", tk::identity, 0, 0.359),
                        term("height", tk::scale, 10, 0.248),
                        term("weight", tk::scale, 15, 0.115),
                        term("sbp", tk::scale, 20, 0.197),
                        term("dbp", tk::scale, 10, -0.101),
                        term("diabetes", tk::identity, 0, 0.237),
                        term("myocardial_infarction", tk::identity, 0, 0.496),
                        term("heart_failure", tk::identity, 0, 0.701),
                        term("coronary_heart_disease", tk::identity, 0, 0.349),
                    },
                    0.972,
                    12.582,
                    1826};
  risk_model c2hest{"c2hest",
                    {
                        term("age", tk::indicator_ge, 75, 2),
                        term("hypertension", tk::identity, 0, 1),
                        term("heart_failure", tk::identity, 0, 2),
                        term("coronary_heart_disease", tk::identity, 0, 1),
                        term("pulmonary_disease", tk::identity, 0, 1),
                        term("hypothyroidism", tk::identity, 0, 1),
                    },
                    0.975,
                    0.370,
                    1826};
  return {std::move(ehr), std::move(charge), std::move(c2hest)};
}
} // namespace detail

/// The built-in registry, built once.
inline const std::vector<risk_model>& builtin_models() {
  static const std::vector<risk_model> models = detail::make_builtin_models();
  return models;
}

inline const risk_model& find_model(std::span<const risk_model> models, std::string_view name) {
  for (const auto& m : models)
    if (m.name == name) return m;
  throw not_found("unknown model '" + std::string(name) + "'");
}

// -- score evaluation ---------------------------------------------------------

/// Term value for raw covariate value `x`. `level_index` is the resolved level
/// for indicator_eq. Binary indicator_eq is evaluated on the continuous hull
/// (x for level 1, 1-x for level 0), which agrees with the exact indicator on
/// {0,1} and keeps the audit differentiable.
inline double term_value(const model_term& t, double x, double level_index, bool binary) noexcept {
  switch (t.transform) {
    case transform_kind::identity: return x;
    case transform_kind::scale: return x / t.param;
    case transform_kind::scaled_square: {
      double z = x / t.param;
      return z * z;
    }
    case transform_kind::indicator_ge: return x >= t.param ? 1.0 : 0.0;
    case transform_kind::indicator_eq:
      if (binary) return level_index == 1.0 ? x : 1.0 - x;
      return std::round(x) == level_index ? 1.0 : 0.0;
  }
  return 0;
}

/// d term_value / dx; zero where the transform is piecewise constant.
inline double term_derivative(const model_term& t, double x, double level_index, bool binary) noexcept {
  switch (t.transform) {
    case transform_kind::identity: return 1.0;
    case transform_kind::scale: return 1.0 / t.param;
    case transform_kind::scaled_square: return 2.0 * x / (t.param * t.param);
    case transform_kind::indicator_ge: return 0.0;
    case transform_kind::indicator_eq:
      if (binary) return level_index == 1.0 ? 1.0 : -1.0;
      return 0.0;
  }
  return 0;
}

/// A model resolved against a schema: each term knows its column and level.
class bound_model {
public:
  struct bound_term {
    const model_term* term;
    std::size_t column;     // index into the snapshot schema
    std::size_t slot;       // index into model().variables()
    double level_index;     // indicator_eq only
    bool binary;
  };

  bound_model(const risk_model& m, const cohort_snapshot& snap)
      : model_(std::make_shared<const risk_model>(m)), snap_(&snap), variables_(m.variables()) {
    const auto& model = *model_;
    model.validate();
    for (const auto& v : variables_) {
      auto idx = snap.find(v);
      if (!idx)
        throw not_found("model '" + model.name + "' uses variable '" + v +
                        "' which is not in the cohort schema");
      columns_.push_back(*idx);
    }
    for (const auto& t : model.terms) {
      auto slot = static_cast<std::size_t>(
          std::find(variables_.begin(), variables_.end(), t.variable) - variables_.begin());
      const auto& schema = snap.schema()[columns_[slot]];
      double level = 0;
      if (t.transform == transform_kind::indicator_eq) {
        auto li = schema.level_index(t.level);
        if (!li)
          throw not_found("model '" + model.name + "': variable '" + t.variable +
                          "' has no level '" + t.level + "'");
        level = static_cast<double>(*li);
      }
      terms_.push_back({&t, columns_[slot], slot, level, schema.kind == variable_kind::binary});
    }
  }

  const risk_model& model() const noexcept { return *model_; }
  const cohort_snapshot& snapshot() const noexcept { return *snap_; }
  const std::vector<std::string>& variables() const noexcept { return variables_; }
  const std::vector<std::size_t>& columns() const noexcept { return columns_; }
  const std::vector<bound_term>& terms() const noexcept { return terms_; }

  bool complete(std::size_t row) const {
    for (auto c : columns_)
      if (snap_->column(c).missing(row)) return false;
    return true;
  }

  /// Rows of `rows` with every model covariate present.
  std::vector<std::size_t> complete_rows(std::span<const std::size_t> rows) const {
    std::vector<std::size_t> out;
    out.reserve(rows.size());
    for (auto r : rows)
      if (complete(r)) out.push_back(r);
    return out;
  }

  /// Covariate vector (model variable order) of one snapshot row.
  std::vector<double> covariates(std::size_t row) const {
    std::vector<double> x;
    x.reserve(columns_.size());
    for (auto c : columns_) x.push_back(snap_->column(c)[row]);
    return x;
  }

  /// Linear score for a covariate vector in model variable order.
  double score(std::span<const double> x) const noexcept {
    double s = 0;
    for (const auto& bt : terms_)
      s += bt.term->coefficient * term_value(*bt.term, x[bt.slot], bt.level_index, bt.binary);
    return s;
  }

  /// Gradient of score() with respect to each covariate; `grad` is overwritten.
  void score_gradient(std::span<const double> x, std::span<double> grad) const noexcept {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (const auto& bt : terms_)
      grad[bt.slot] += bt.term->coefficient *
                       term_derivative(*bt.term, x[bt.slot], bt.level_index, bt.binary);
  }

  double score_row(std::size_t row) const {
    double s = 0;
    for (const auto& bt : terms_) {
      double x = snap_->column(bt.column)[row];
      if (is_missing(x))
        throw data_error("row " + std::to_string(row + 1) + ": missing covariate '" +
                         bt.term->variable + "' for model '" + model_->name + "'");
      s += bt.term->coefficient * term_value(*bt.term, x, bt.level_index, bt.binary);
    }
    return s;
  }

private:
  std::shared_ptr<const risk_model> model_;  // owned copy; terms_ point into it
  const cohort_snapshot* snap_;
  std::vector<std::string> variables_;
  std::vector<std::size_t> columns_;
  std::vector<bound_term> terms_;
};

/// Per-row sum of coefficient times transformed covariate.
inline std::vector<double> score(const risk_model& model, const cohort_snapshot& snap,
                                 std::span<const std::size_t> rows) {
  bound_model bm(model, snap);
  std::vector<double> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(bm.score_row(r));
  return out;
}

/// Horizon risk 1 - c^exp(score - bias).
inline double risk_from_score(const risk_model& model, double score) noexcept {
  return -std::expm1(std::exp(score - model.bias) * std::log(model.c));
}

/// d risk / d score.
inline double risk_derivative(const risk_model& model, double score) noexcept {
  double t = -std::exp(score - model.bias) * std::log(model.c);
  return t * std::exp(-t);
}

inline std::vector<double> estimate_risk(const risk_model& model, std::span<const double> scores) {
  std::vector<double> out;
  out.reserve(scores.size());
  for (double s : scores) out.push_back(risk_from_score(model, s));
  return out;
}

/// Closed-form inverse of the horizon-risk transform.
inline double invert_risk(const risk_model& model, double risk) {
  if (!(risk > 0 && risk < 1))
    throw invalid_argument("risk " + detail::format_double(risk) + " must lie in (0,1)");
  return model.bias + std::log(std::log1p(-risk) / std::log(model.c));
}

/// Decision threshold. The risk value is authoritative; the score value is
/// derived from it so the two domains always agree.
struct threshold {
  std::string model;
  double risk_value = 0.05;
  double score_value = 0;
};

inline threshold make_threshold(const risk_model& model, double risk) {
  return {model.name, risk, invert_risk(model, risk)};
}

inline void to_json(json& j, const threshold& t) {
  j = {{"model", t.model}, {"risk", t.risk_value}, {"score", t.score_value}};
}

enum class value_domain { score, risk };

/// Label 1 iff value >= threshold (boundary counts as high risk).
inline std::vector<std::uint8_t> classify(const risk_model& model, std::span<const double> values,
                                          const threshold& thr, value_domain domain) {
  if (thr.model != model.name)
    throw invalid_argument("threshold is bound to model '" + thr.model + "', not '" + model.name + "'");
  const double cut = domain == value_domain::score ? thr.score_value : thr.risk_value;
  std::vector<std::uint8_t> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(v >= cut ? 1 : 0);
  return out;
}

} // namespace rmx
