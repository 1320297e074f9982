#pragma once

#include "rmx/cohort.hpp"
#include "rmx/error.hpp"

#include <map>
#include <string>
#include <vector>

namespace rmx {

/// Variables to cross, in significance order. Continuous variables need cut
/// points: k strictly increasing edges split the line into k+1 bins
/// (-inf,e0), [e0,e1), ..., [e_{k-1},+inf).
struct subgroup_spec {
  std::vector<std::string> variables;
  std::map<std::string, std::vector<double>> bins;
};

struct subgroup_condition {
  std::string variable;
  std::size_t level = 0;  // level or bin index
  std::string label;      // level label or bin text

  friend bool operator==(const subgroup_condition&, const subgroup_condition&) = default;
};

struct subgroup {
  std::string label;
  std::vector<subgroup_condition> predicate;
  std::vector<std::size_t> members;  // ascending row indices
  std::size_t color_index = 0;

  friend bool operator==(const subgroup&, const subgroup&) = default;
};

struct subgroup_partition {
  std::string id;
  std::string snapshot_id;
  subgroup_spec spec;
  std::vector<subgroup> subgroups;
  std::vector<std::size_t> excluded_missing;

  std::size_t included() const noexcept {
    std::size_t n = 0;
    for (const auto& g : subgroups) n += g.members.size();
    return n;
  }

  const subgroup& find(std::string_view label) const {
    for (const auto& g : subgroups)
      if (g.label == label) return g;
    throw not_found("unknown subgroup '" + std::string(label) + "'");
  }
};

namespace detail {

inline std::string bin_label(const std::string& var, const std::vector<double>& edges, std::size_t b) {
  if (b == 0) return var + "<" + format_double(edges.front());
  if (b == edges.size()) return var + ">=" + format_double(edges.back());
  return format_double(edges[b - 1]) + "<=" + var + "<" + format_double(edges[b]);
}

struct axis {
  std::string variable;
  std::vector<std::string> labels;
  std::vector<std::size_t> cell;  // per row; SIZE_MAX when missing
};

inline axis make_axis(const cohort_snapshot& snap, const subgroup_spec& spec, const std::string& name) {
  const auto& v = snap.variable(name);
  if (!v.roles.subgroup)
    throw invalid_argument("variable '" + name + "' does not carry the subgroup role");
  auto col = snap.column(name);
  axis ax{name, {}, std::vector<std::size_t>(snap.size(), SIZE_MAX)};
  if (v.is_discrete()) {
    for (std::size_t l = 0; l < v.level_count(); ++l) ax.labels.push_back(name + "=" + v.level_label(l));
    for (std::size_t i = 0; i < snap.size(); ++i)
      if (!col.missing(i)) ax.cell[i] = static_cast<std::size_t>(col[i]);
    return ax;
  }
  auto it = spec.bins.find(name);
  if (it == spec.bins.end() || it->second.empty())
    throw invalid_argument("continuous variable '" + name + "' needs bin edges");
  const auto& edges = it->second;
  for (std::size_t k = 1; k < edges.size(); ++k)
    if (!(edges[k - 1] < edges[k]))
      throw invalid_argument("bin edges for '" + name + "' must be strictly increasing");
  for (std::size_t b = 0; b <= edges.size(); ++b) ax.labels.push_back(bin_label(name, edges, b));
  for (std::size_t i = 0; i < snap.size(); ++i)
    if (!col.missing(i))
      ax.cell[i] = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), col[i]) -
                                            edges.begin());
  return ax;
}

} // namespace detail

inline std::string partition_id(const std::string& snapshot_id, const subgroup_spec& spec) {
  detail::fnv1a h;
  h.update(snapshot_id);
  h.update(json(spec.variables).dump());
  for (const auto& v : spec.variables) {
    auto it = spec.bins.find(v);
    if (it != spec.bins.end()) h.update(json(it->second).dump());
  }
  return h.hex();
}

/// Cartesian product of the selected variables' levels (or bins). Cells are
/// ordered lexicographically by declared level order, first variable most
/// significant; empty cells are dropped; rows missing any selected variable
/// go to excluded_missing.
inline subgroup_partition build_partition(const cohort_snapshot& snap, const subgroup_spec& spec) {
  if (spec.variables.empty()) throw invalid_argument("subgroup spec selects no variables");
  for (std::size_t i = 0; i < spec.variables.size(); ++i)
    for (std::size_t j = i + 1; j < spec.variables.size(); ++j)
      if (spec.variables[i] == spec.variables[j])
        throw invalid_argument("subgroup variable '" + spec.variables[i] + "' selected twice");

  std::vector<detail::axis> axes;
  for (const auto& name : spec.variables) axes.push_back(detail::make_axis(snap, spec, name));

  // Mixed-radix cell code; the product is bounded by the row count in practice,
  // but guard against overflow from absurd level counts.
  std::size_t cells = 1;
  for (const auto& ax : axes) {
    if (ax.labels.size() > 0 && cells > SIZE_MAX / ax.labels.size())
      throw invalid_argument("too many subgroup combinations");
    cells *= ax.labels.size();
  }

  subgroup_partition part;
  part.snapshot_id = snap.id();
  part.spec = spec;
  part.id = partition_id(snap.id(), spec);

  std::map<std::size_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < snap.size(); ++i) {
    std::size_t code = 0;
    bool missing = false;
    for (const auto& ax : axes) {
      if (ax.cell[i] == SIZE_MAX) {
        missing = true;
        break;
      }
      code = code * ax.labels.size() + ax.cell[i];
    }
    if (missing) part.excluded_missing.push_back(i);
    else members[code].push_back(i);
  }

  for (auto& [code, rows] : members) {
    subgroup g;
    std::vector<std::size_t> digits(axes.size());
    auto rest = code;
    for (std::size_t a = axes.size(); a-- > 0;) {
      digits[a] = rest % axes[a].labels.size();
      rest /= axes[a].labels.size();
    }
    for (std::size_t a = 0; a < axes.size(); ++a) {
      const auto& text = axes[a].labels[digits[a]];
      g.predicate.push_back({axes[a].variable, digits[a], text});
      g.label += (a ? " & " : "") + text;
    }
    g.members = std::move(rows);
    g.color_index = part.subgroups.size();
    part.subgroups.push_back(std::move(g));
  }
  return part;
}

struct subgroup_count {
  std::string label;
  std::size_t count = 0;
  double percent = 0;  // of included (non-missing) rows
};

inline std::vector<subgroup_count> partition_counts(const subgroup_partition& part) {
  const double total = static_cast<double>(part.included());
  std::vector<subgroup_count> out;
  for (const auto& g : part.subgroups)
    out.push_back({g.label, g.members.size(),
                   total > 0 ? 100.0 * static_cast<double>(g.members.size()) / total : 0.0});
  return out;
}

inline json partition_json(const subgroup_partition& part, bool include_members = false) {
  json groups = json::array();
  auto counts = partition_counts(part);
  for (std::size_t k = 0; k < part.subgroups.size(); ++k) {
    const auto& g = part.subgroups[k];
    json pred = json::array();
    for (const auto& c : g.predicate)
      pred.push_back({{"variable", c.variable}, {"level", c.level}, {"label", c.label}});
    json item = {{"index", k},
                 {"label", g.label},
                 {"predicate", pred},
                 {"count", counts[k].count},
                 {"percent", counts[k].percent},
                 {"color_index", g.color_index}};
    if (include_members) item["members"] = g.members;
    groups.push_back(std::move(item));
  }
  json bins = json::object();
  for (const auto& [k, v] : part.spec.bins) bins[k] = v;
  return {{"partition_id", part.id},
          {"snapshot_id", part.snapshot_id},
          {"variables", part.spec.variables},
          {"bins", bins},
          {"subgroups", groups},
          {"included", part.included()},
          {"excluded_missing", part.excluded_missing.size()}};
}

} // namespace rmx
