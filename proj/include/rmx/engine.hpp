#pragma once

#include "rmx/cohort.hpp"
#include "rmx/error.hpp"
#include "rmx/explain.hpp"
#include "rmx/fairness.hpp"
#include "rmx/riskmodels.hpp"
#include "rmx/subgroups.hpp"
#include "rmx/survival.hpp"

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace rmx {

inline constexpr double default_threshold_risk = 0.05;

struct audit_request {
  double lambda = default_audit_lambda;
  double fraction = 1.0;
  std::uint64_t seed = 0;
};

/// Everything that determines a summary. Echoed back (normalized) in the
/// payload so a report carries its own request.
struct summary_request {
  std::string partition_id;
  std::vector<std::string> models;
  double threshold_risk = default_threshold_risk;
  std::vector<protected_split> protected_splits;
  std::optional<audit_request> audit;
};

inline json to_json_value(const summary_request& r) {
  json splits = json::array();
  for (const auto& s : r.protected_splits) splits.push_back(s);
  json audit = nullptr;
  if (r.audit) audit = {{"lambda", r.audit->lambda}, {"fraction", r.audit->fraction}, {"seed", r.audit->seed}};
  return {{"partition_id", r.partition_id},
          {"models", r.models},
          {"threshold", {{"risk", r.threshold_risk}}},
          {"protected", splits},
          {"audit", audit}};
}

inline summary_request parse_summary_request(const json& j, double default_risk = default_threshold_risk) {
  if (!j.is_object()) throw usage_error("summary request must be a JSON object");
  summary_request r;
  try {
    r.partition_id = j.at("partition_id").get<std::string>();
    r.models = j.at("models").get<std::vector<std::string>>();
    r.threshold_risk = default_risk;
    if (j.contains("threshold") && !j["threshold"].is_null()) {
      const auto& t = j["threshold"];
      r.threshold_risk = t.is_number() ? t.get<double>() : t.at("risk").get<double>();
    }
    for (const auto& s : j.value("protected", json::array())) r.protected_splits.push_back(s.get<protected_split>());
    if (j.contains("audit") && !j["audit"].is_null()) {
      const auto& a = j["audit"];
      audit_request ar;
      ar.lambda = a.value("lambda", default_audit_lambda);
      ar.fraction = a.value("fraction", 1.0);
      ar.seed = a.value("seed", std::uint64_t{0});
      r.audit = ar;
    }
  } catch (const json::exception& e) {
    throw usage_error(std::string("malformed summary request: ") + e.what());
  }
  if (r.models.empty()) throw usage_error("summary request names no models");
  if (!(r.threshold_risk > 0 && r.threshold_risk < 1))
    throw invalid_argument("threshold risk must lie in (0,1), got " + detail::format_double(r.threshold_risk));
  if (r.audit) {
    if (!(r.audit->lambda > 0)) throw invalid_argument("audit lambda must be positive");
    if (!(r.audit->fraction > 0 && r.audit->fraction <= 1))
      throw invalid_argument("audit fraction must lie in (0,1]");
  }
  return r;
}

/// Sensitive subspaces and audit boxes per (snapshot, model, split). Fitting
/// is deterministic, so a racing duplicate fit is harmless.
class subspace_cache {
public:
  struct entry {
    sensitive_subspace subspace;
    std::vector<value_range> box;
  };

  std::shared_ptr<const entry> get(const bound_model& bm, const protected_split& split) {
    const std::string key = bm.snapshot().id() + "|" + bm.model().name + "|" + json(bm.variables()).dump() +
                            "|" + split.attribute + "|" + split.privileged + "|" + split.unprivileged;
    {
      std::lock_guard lock(mutex_);
      if (auto it = entries_.find(key); it != entries_.end()) return it->second;
    }
    std::vector<protected_split> one{split};
    auto e = std::make_shared<entry>();
    e->subspace = fit_sensitive_subspace(bm.snapshot(), one, bm.variables());
    std::vector<std::size_t> all(bm.snapshot().size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    e->box = observed_box(bm, bm.complete_rows(all));
    std::lock_guard lock(mutex_);
    return entries_.emplace(key, std::move(e)).first->second;
  }

private:
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const entry>> entries_;
};

namespace detail {

inline json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

struct outcome_columns {
  std::vector<double> times;
  std::vector<std::uint8_t> events;
};

inline outcome_columns gather_outcome(const cohort_snapshot& snap, std::span<const std::size_t> rows) {
  outcome_columns o;
  o.times.reserve(rows.size());
  o.events.reserve(rows.size());
  for (auto r : rows) {
    o.times.push_back(static_cast<double>(snap.followup_days()[r]));
    o.events.push_back(snap.events()[r]);
  }
  return o;
}

} // namespace detail

inline json summary_entry(const cohort_snapshot& snap, const subgroup& group, std::size_t index,
                          const bound_model& bm, const threshold& thr, const summary_request& req,
                          subspace_cache& cache) {
  const auto& model = bm.model();
  auto rows = bm.complete_rows(group.members);
  auto outcome = detail::gather_outcome(snap, rows);
  std::vector<double> scores;
  scores.reserve(rows.size());
  for (auto r : rows) scores.push_back(bm.score_row(r));

  json flags = json::array();
  std::optional<double> c, slope;
  std::size_t n_events = 0;
  for (auto e : outcome.events) n_events += e;
  if (!rows.empty()) {
    try {
      c = c_index(scores, outcome.times, outcome.events);
    } catch (const error& e) {
      if (e.kind() != error_kind::computation) throw;
      flags.push_back("c_index");
    }
    try {
      slope = calibration_slope(scores, outcome.times, outcome.events);
    } catch (const error& e) {
      if (e.kind() != error_kind::computation) throw;
      flags.push_back("calibration_slope");
    }
  } else {
    flags.push_back("c_index");
    flags.push_back("calibration_slope");
  }
  km_curve km;
  if (!rows.empty()) km = km_fit(outcome.times, outcome.events, static_cast<double>(model.horizon_days));

  auto labels = classify(model, scores, thr, value_domain::score);
  auto hl = make_horizon_labels(outcome.times, outcome.events, static_cast<double>(model.horizon_days));

  json fairness = json::array();
  for (const auto& split : req.protected_splits) {
    const auto& var = snap.variable(split.attribute);
    auto levels = resolve_split(var, split);
    auto col = snap.column(split.attribute);
    std::vector<double> attr;
    attr.reserve(rows.size());
    for (auto r : rows) attr.push_back(col[r]);
    auto g = group_fairness(labels, hl, attr, levels);

    json item_flags = json::array();
    for (const auto& f : g.undefined_flags) item_flags.push_back(f);
    json counts = {{"privileged", g.n_priv},
                   {"unprivileged", g.n_unpriv},
                   {"tpr_privileged", g.n_tpr_priv},
                   {"tpr_unprivileged", g.n_tpr_unpriv}};
    std::optional<double> rate;
    if (req.audit) {
      auto cached = cache.get(bm, split);
      audit_config cfg;
      cfg.lambda = req.audit->lambda;
      cfg.box = cached->box;
      cfg.thr = thr;
      auto audited = sample_rows(rows, req.audit->fraction, req.audit->seed);
      auto v = violation_rate(bm, audited, cached->subspace, cfg);
      rate = v.rate;
      counts["audited"] = v.audited;
      counts["flipped"] = v.flipped;
      if (!rate) item_flags.push_back("if_violation_rate:no_patients");
      for (const auto& d : cached->subspace.degenerate) item_flags.push_back("subspace:degenerate:" + d);
    } else {
      item_flags.push_back("if_violation_rate:not_requested");
    }
    fairness.push_back({{"attribute", split.attribute},
                        {"privileged", split.privileged},
                        {"unprivileged", split.unprivileged},
                        {"spd", detail::optional_number(g.spd)},
                        {"tprd", detail::optional_number(g.tprd)},
                        {"if_violation_rate", detail::optional_number(rate)},
                        {"counts", counts},
                        {"undefined_flags", item_flags}});
  }

  return {{"subgroup", group.label},
          {"subgroup_index", index},
          {"color_index", group.color_index},
          {"model", model.name},
          {"n", rows.size()},
          {"n_excluded_missing_covariates", group.members.size() - rows.size()},
          {"events", n_events},
          {"c_index", detail::optional_number(c)},
          {"calibration_slope", detail::optional_number(slope)},
          {"km", km},
          {"fairness", fairness},
          {"undefined_flags", flags}};
}

/// Per subgroup x model performance and fairness. Pure over (snapshot,
/// partition, request); the cache only memoizes deterministic fits.
inline json summary_payload(const cohort_snapshot& snap, const subgroup_partition& part,
                            std::span<const risk_model> registry, const summary_request& req,
                            subspace_cache& cache) {
  if (part.snapshot_id != snap.id()) throw not_found("partition belongs to another snapshot");
  if (req.partition_id != part.id) throw not_found("unknown partition '" + req.partition_id + "'");
  std::vector<bound_model> bound;
  std::vector<threshold> thresholds;
  json thr_json = json::object();
  for (const auto& name : req.models) {
    const auto& m = find_model(registry, name);
    bound.emplace_back(m, snap);
    thresholds.push_back(make_threshold(m, req.threshold_risk));
    thr_json[m.name] = {{"risk", thresholds.back().risk_value}, {"score", thresholds.back().score_value}};
  }
  for (const auto& s : req.protected_splits) resolve_split(snap.variable(s.attribute), s);

  json entries = json::array();
  for (std::size_t g = 0; g < part.subgroups.size(); ++g)
    for (std::size_t m = 0; m < bound.size(); ++m)
      entries.push_back(summary_entry(snap, part.subgroups[g], g, bound[m], thresholds[m], req, cache));
  return {{"request", to_json_value(req)},
          {"snapshot_id", snap.id()},
          {"partition_id", part.id},
          {"thresholds", thr_json},
          {"entries", entries}};
}

// -- distributions ----------------------------------------------------------------

struct histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<std::size_t> counts;
};

/// Equal-width bins over [min, max]; the last bin is closed so counts sum
/// to the number of values.
inline histogram make_histogram(std::span<const double> values, std::size_t bins) {
  if (bins == 0) throw invalid_argument("histogram needs at least one bin");
  histogram h;
  h.counts.assign(bins, 0);
  if (values.empty()) {
    h.edges.assign(bins + 1, 0.0);
    return h;
  }
  auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const double lo = *mn;
  const double hi = *mx > lo ? *mx : lo + 1.0;
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(b == bins ? hi : lo + width * static_cast<double>(b));
  for (double v : values) {
    auto b = static_cast<std::size_t>((v - lo) / width);
    ++h.counts[std::min(b, bins - 1)];
  }
  return h;
}

inline json distribution_payload(const cohort_snapshot& snap, std::span<const std::size_t> rows,
                                 const risk_model& model, std::size_t bins, double threshold_risk) {
  bound_model bm(model, snap);
  auto complete = bm.complete_rows(rows);
  std::vector<double> scores;
  scores.reserve(complete.size());
  for (auto r : complete) scores.push_back(bm.score_row(r));
  auto risks = estimate_risk(model, scores);
  auto thr = make_threshold(model, threshold_risk);
  auto hs = make_histogram(scores, bins);
  auto hr = make_histogram(risks, bins);
  return {{"model", model.name},
          {"n", complete.size()},
          {"bins", bins},
          {"score", {{"edges", hs.edges}, {"counts", hs.counts}}},
          {"risk", {{"edges", hr.edges}, {"counts", hr.counts}}},
          {"threshold", thr}};
}

inline json survival_payload(const cohort_snapshot& snap, const subgroup_partition& part, int horizon_days) {
  json curves = json::array();
  for (const auto& g : part.subgroups) {
    auto o = detail::gather_outcome(snap, g.members);
    std::size_t ev = 0;
    for (auto e : o.events) ev += e;
    curves.push_back({{"subgroup", g.label},
                      {"color_index", g.color_index},
                      {"n", g.members.size()},
                      {"events", ev},
                      {"km", km_fit(o.times, o.events, static_cast<double>(horizon_days))}});
  }
  return {{"partition_id", part.id}, {"horizon_days", horizon_days}, {"curves", curves}};
}

/// The batch report: the summary payload plus cohort-level distributions
/// (rows of the partition) per model and the per-subgroup survival curves.
inline json report_payload(const cohort_snapshot& snap, const subgroup_partition& part,
                           std::span<const risk_model> registry, const summary_request& req,
                           subspace_cache& cache, std::size_t bins = 50) {
  json out = summary_payload(snap, part, registry, req, cache);
  std::vector<std::size_t> included;
  for (const auto& g : part.subgroups) included.insert(included.end(), g.members.begin(), g.members.end());
  std::sort(included.begin(), included.end());
  json dist = json::array();
  int horizon = 0;
  for (const auto& name : req.models) {
    const auto& m = find_model(registry, name);
    horizon = std::max(horizon, m.horizon_days);
    dist.push_back(distribution_payload(snap, included, m, bins, req.threshold_risk));
  }
  out["distribution"] = dist;
  out["survival"] = survival_payload(snap, part, horizon);
  return out;
}

// -- explanations -----------------------------------------------------------------

struct explain_request {
  std::string partition_id;
  std::string subgroup;
  std::string model;
  double fraction = 0.1;
  std::uint64_t seed = 0;
};

inline explain_request parse_explain_request(const json& j) {
  if (!j.is_object()) throw usage_error("explain request must be a JSON object");
  explain_request r;
  try {
    r.partition_id = j.at("partition_id").get<std::string>();
    r.subgroup = j.at("subgroup").get<std::string>();
    r.model = j.at("model").get<std::string>();
    r.fraction = j.value("fraction", 0.1);
    r.seed = j.value("seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    throw usage_error(std::string("malformed explain request: ") + e.what());
  }
  if (!(r.fraction > 0 && r.fraction <= 1)) throw invalid_argument("fraction must lie in (0,1]");
  return r;
}

/// SHAP values for one subgroup (reference = subgroup means over patients
/// with complete covariates), a seeded beeswarm sample, and parallel trends
/// of the model's features across every subgroup of the partition.
inline json explain_payload(const cohort_snapshot& snap, const subgroup_partition& part,
                            std::span<const risk_model> registry, const explain_request& req) {
  if (req.partition_id != part.id) throw not_found("unknown partition '" + req.partition_id + "'");
  const auto& model = find_model(registry, req.model);
  const auto& group = part.find(req.subgroup);
  bound_model bm(model, snap);
  auto rows = bm.complete_rows(group.members);
  if (rows.empty()) throw computation_error("subgroup '" + group.label + "' has no complete patients");
  auto all = shap_linear(model, snap, rows);
  auto sample = beeswarm_sample(all, req.fraction, req.seed);

  std::vector<std::string> trend_features;
  for (const auto& f : sample.features)
    if (snap.find(f)) trend_features.push_back(f);
  auto trends = parallel_trends(snap, part, trend_features);

  json out = explanation_json(sample, &trends);
  out["request"] = {{"partition_id", req.partition_id},
                    {"subgroup", req.subgroup},
                    {"model", req.model},
                    {"fraction", req.fraction},
                    {"seed", req.seed}};
  out["subgroup_size"] = group.members.size();
  out["explained"] = rows.size();
  return out;
}

} // namespace rmx
