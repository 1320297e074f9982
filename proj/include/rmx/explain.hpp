#pragma once

#include "rmx/cohort.hpp"
#include "rmx/fairness.hpp"
#include "rmx/riskmodels.hpp"
#include "rmx/subgroups.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace rmx {

struct shap_record {
  std::size_t row = 0;
  double score = 0;
  std::vector<double> phi;    // score units, one per feature
  std::vector<double> value;  // raw feature value
  std::vector<double> norm;   // min-max normalized over the record set
};

struct shap_explanation {
  std::string model;
  std::vector<std::string> features;
  /// Score of the reference point; sum(phi) == score - base for every record.
  double base = 0;
  std::vector<shap_record> records;
};

namespace detail {
inline void normalize_records(shap_explanation& ex) {
  const auto f = ex.features.size();
  for (std::size_t k = 0; k < f; ++k) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& r : ex.records) {
      lo = std::min(lo, r.value[k]);
      hi = std::max(hi, r.value[k]);
    }
    for (auto& r : ex.records) {
      r.norm.resize(f);
      r.norm[k] = hi > lo ? (r.value[k] - lo) / (hi - lo) : 0.5;
    }
  }
}
} // namespace detail

/// Exact Shapley values of a linear score: each term contributes
/// beta * (t(x) - mean t) with the mean over `rows`, and terms are summed
/// per display variable (so age and age^2 both land on "age").
inline shap_explanation shap_linear(const risk_model& model, const cohort_snapshot& snap,
                                    std::span<const std::size_t> rows) {
  if (rows.empty()) throw invalid_argument("shap_linear: no rows");
  bound_model bm(model, snap);
  shap_explanation ex;
  ex.model = model.name;
  ex.features = model.display_variables();
  const auto nterm = bm.terms().size();

  std::vector<std::size_t> feature_of(nterm);
  for (std::size_t t = 0; t < nterm; ++t) {
    const auto& name = bm.terms()[t].term->display_variable();
    feature_of[t] = static_cast<std::size_t>(
        std::find(ex.features.begin(), ex.features.end(), name) - ex.features.begin());
  }
  // Raw value shown for a feature: the display column itself when present,
  // else the first term's underlying variable.
  std::vector<std::size_t> value_column(ex.features.size());
  for (std::size_t k = 0; k < ex.features.size(); ++k) {
    if (auto c = snap.find(ex.features[k])) {
      value_column[k] = *c;
    } else {
      for (std::size_t t = 0; t < nterm; ++t)
        if (feature_of[t] == k) {
          value_column[k] = bm.terms()[t].column;
          break;
        }
    }
  }

  std::vector<std::vector<double>> tv(rows.size(), std::vector<double>(nterm));
  std::vector<double> mean(nterm, 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto x = bm.covariates(rows[r]);
    for (std::size_t k = 0; k < x.size(); ++k)
      if (is_missing(x[k]))
        throw data_error("row " + std::to_string(rows[r] + 1) + ": missing covariate '" +
                         bm.variables()[k] + "'");
    for (std::size_t t = 0; t < nterm; ++t) {
      const auto& bt = bm.terms()[t];
      tv[r][t] = term_value(*bt.term, x[bt.slot], bt.level_index, bt.binary);
      mean[t] += tv[r][t];
    }
  }
  for (auto& m : mean) m /= static_cast<double>(rows.size());
  for (std::size_t t = 0; t < nterm; ++t) ex.base += bm.terms()[t].term->coefficient * mean[t];

  ex.records.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    shap_record rec;
    rec.row = rows[r];
    rec.phi.assign(ex.features.size(), 0.0);
    for (std::size_t t = 0; t < nterm; ++t) {
      const double beta = bm.terms()[t].term->coefficient;
      rec.score += beta * tv[r][t];
      rec.phi[feature_of[t]] += beta * (tv[r][t] - mean[t]);
    }
    for (auto c : value_column) rec.value.push_back(snap.column(c)[rows[r]]);
    ex.records.push_back(std::move(rec));
  }
  detail::normalize_records(ex);
  return ex;
}

/// Seeded subsample of records for the beeswarm, re-normalized over the
/// sample, with features reordered by descending mean |phi|.
inline shap_explanation beeswarm_sample(const shap_explanation& all, double fraction, std::uint64_t seed) {
  if (all.records.empty()) throw invalid_argument("beeswarm_sample: no records");
  std::vector<std::size_t> positions(all.records.size());
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  auto picked = sample_rows(positions, fraction, seed);

  shap_explanation out;
  out.model = all.model;
  out.base = all.base;
  const auto f = all.features.size();
  std::vector<double> importance(f, 0.0);
  for (auto i : picked)
    for (std::size_t k = 0; k < f; ++k) importance[k] += std::abs(all.records[i].phi[k]);
  std::vector<std::size_t> order(f);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return importance[a] > importance[b]; });

  for (auto k : order) out.features.push_back(all.features[k]);
  for (auto i : picked) {
    const auto& src = all.records[i];
    shap_record rec;
    rec.row = src.row;
    rec.score = src.score;
    for (auto k : order) {
      rec.phi.push_back(src.phi[k]);
      rec.value.push_back(src.value[k]);
    }
    out.records.push_back(std::move(rec));
  }
  detail::normalize_records(out);
  return out;
}

struct trend_band {
  std::string label;
  std::vector<double> means;
  std::vector<double> stds;
  std::vector<std::size_t> counts;  // non-missing values per feature
};

struct parallel_trends_summary {
  std::vector<std::string> features;
  std::vector<trend_band> subgroups;
  /// Features constant over the included rows; normalized to 0.5.
  std::vector<std::string> constant_features;
};

/// Per-subgroup mean and (population) standard deviation of each feature
/// after min-max normalization over every included row, so all subgroups
/// share one axis. Missing values are skipped per feature.
inline parallel_trends_summary parallel_trends(const cohort_snapshot& snap, const subgroup_partition& part,
                                               const std::vector<std::string>& features) {
  parallel_trends_summary out;
  out.features = features;
  std::vector<column_view> cols;
  for (const auto& f : features) cols.push_back(snap.column(f));

  std::vector<double> lo(features.size(), std::numeric_limits<double>::infinity());
  std::vector<double> hi(features.size(), -std::numeric_limits<double>::infinity());
  for (const auto& g : part.subgroups)
    for (auto r : g.members)
      for (std::size_t k = 0; k < cols.size(); ++k)
        if (!cols[k].missing(r)) {
          lo[k] = std::min(lo[k], cols[k][r]);
          hi[k] = std::max(hi[k], cols[k][r]);
        }
  for (std::size_t k = 0; k < features.size(); ++k)
    if (!(hi[k] > lo[k])) out.constant_features.push_back(features[k]);

  for (const auto& g : part.subgroups) {
    trend_band band{g.label, {}, {}, {}};
    for (std::size_t k = 0; k < cols.size(); ++k) {
      const bool constant = !(hi[k] > lo[k]);
      double sum = 0, sq = 0;
      std::size_t n = 0;
      for (auto r : g.members) {
        if (cols[k].missing(r)) continue;
        const double v = constant ? 0.5 : (cols[k][r] - lo[k]) / (hi[k] - lo[k]);
        sum += v;
        ++n;
      }
      const double mean = n ? sum / static_cast<double>(n) : 0.0;
      for (auto r : g.members) {
        if (cols[k].missing(r)) continue;
        const double v = constant ? 0.5 : (cols[k][r] - lo[k]) / (hi[k] - lo[k]);
        sq += (v - mean) * (v - mean);
      }
      band.means.push_back(mean);
      band.stds.push_back(n ? std::sqrt(sq / static_cast<double>(n)) : 0.0);
      band.counts.push_back(n);
    }
    out.subgroups.push_back(std::move(band));
  }
  return out;
}

inline json explanation_json(const shap_explanation& ex, const parallel_trends_summary* trends = nullptr) {
  json records = json::array();
  for (const auto& r : ex.records)
    records.push_back({{"row", r.row}, {"score", r.score}, {"phi", r.phi}, {"norm", r.norm}});
  json out = {{"model", ex.model}, {"features", ex.features}, {"base", ex.base}, {"records", records}};
  if (trends) {
    json t = json::object();
    for (const auto& band : trends->subgroups)
      t[band.label] = {{"means", band.means}, {"stds", band.stds}};
    out["trends"] = t;
    out["trend_features"] = trends->features;
    out["constant_features"] = trends->constant_features;
  }
  return out;
}

} // namespace rmx
