#pragma once

#include "rmx/error.hpp"
#include "rmx/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace rmx {

using json = nlohmann::json;

// -- schema -------------------------------------------------------------------

enum class variable_kind { continuous, binary, categorical };

inline std::string_view to_string(variable_kind k) noexcept {
  switch (k) {
    case variable_kind::continuous: return "continuous";
    case variable_kind::binary: return "binary";
    case variable_kind::categorical: return "categorical";
  }
  return "continuous";
}

/// Column roles. A variable may hold any subset.
struct role_set {
  bool predictor = false;
  bool subgroup = false;
  bool protected_attr = false;

  friend bool operator==(const role_set&, const role_set&) = default;
};

struct value_range {
  double min = 0;
  double max = 0;

  bool contains(double v) const noexcept { return v >= min && v <= max; }
  friend bool operator==(const value_range&, const value_range&) = default;
};

struct variable_schema {
  std::string name;
  variable_kind kind = variable_kind::continuous;
  std::string units;
  role_set roles;
  /// Ordered level labels. Required for categorical; optional for binary
  /// (two labels for values 0 and 1, defaulting to "0" and "1").
  std::vector<std::string> levels;
  std::optional<value_range> valid_range;
  std::vector<std::string> missing_codes;

  friend bool operator==(const variable_schema&, const variable_schema&) = default;

  bool is_discrete() const noexcept { return kind != variable_kind::continuous; }

  std::size_t level_count() const noexcept {
    switch (kind) {
      case variable_kind::binary: return 2;
      case variable_kind::categorical: return levels.size();
      default: return 0;
    }
  }

  std::string level_label(std::size_t index) const {
    if (kind == variable_kind::binary && levels.empty())
      return index == 0 ? "0" : "1";
    return levels.at(index);
  }

  std::optional<std::size_t> level_index(std::string_view label) const {
    for (std::size_t i = 0; i < level_count(); ++i)
      if (level_label(i) == label) return i;
    return std::nullopt;
  }

  bool is_missing_code(std::string_view raw) const {
    return std::find(missing_codes.begin(), missing_codes.end(), raw) !=
           missing_codes.end();
  }

  void validate() const {
    if (name.empty()) throw data_error("variable with empty name");
    if (name == "followup_days" || name == "event")
      throw data_error("variable name '" + name + "' is reserved");
    if (kind == variable_kind::categorical && levels.empty())
      throw data_error("categorical variable '" + name + "' declares no levels");
    if (kind == variable_kind::binary && !levels.empty() && levels.size() != 2)
      throw data_error("binary variable '" + name + "' must declare exactly 2 levels");
    for (std::size_t i = 0; i < levels.size(); ++i)
      for (std::size_t j = i + 1; j < levels.size(); ++j)
        if (levels[i] == levels[j])
          throw data_error("variable '" + name + "' repeats level '" + levels[i] + "'");
    if (valid_range && !(valid_range->min < valid_range->max))
      throw data_error("variable '" + name + "' has valid_range min >= max");
  }
};

using schema_list = std::vector<variable_schema>;

inline void validate_schema(const schema_list& schema) {
  for (std::size_t i = 0; i < schema.size(); ++i) {
    schema[i].validate();
    for (std::size_t j = i + 1; j < schema.size(); ++j)
      if (schema[i].name == schema[j].name)
        throw data_error("schema declares '" + schema[i].name + "' twice");
  }
}

inline void to_json(json& j, const variable_schema& v) {
  json roles = json::array();
  if (v.roles.predictor) roles.push_back("predictor");
  if (v.roles.subgroup) roles.push_back("subgroup");
  if (v.roles.protected_attr) roles.push_back("protected");
  j = json{{"name", v.name},
           {"kind", to_string(v.kind)},
           {"units", v.units},
           {"roles", roles},
           {"levels", v.levels},
           {"valid_range", v.valid_range ? json::array({v.valid_range->min, v.valid_range->max})
                                         : json(nullptr)},
           {"missing_codes", v.missing_codes}};
}

inline void from_json(const json& j, variable_schema& v) {
  try {
    v = {};
    v.name = j.at("name").get<std::string>();
    auto kind = j.at("kind").get<std::string>();
    if (kind == "continuous") v.kind = variable_kind::continuous;
    else if (kind == "binary") v.kind = variable_kind::binary;
    else if (kind == "categorical") v.kind = variable_kind::categorical;
    else throw data_error("variable '" + v.name + "': unknown kind '" + kind + "'");
    v.units = j.value("units", "");
    for (const auto& r : j.value("roles", json::array())) {
      auto s = r.get<std::string>();
      if (s == "predictor") v.roles.predictor = true;
      else if (s == "subgroup") v.roles.subgroup = true;
      else if (s == "protected") v.roles.protected_attr = true;
      else throw data_error("variable '" + v.name + "': unknown role '" + s + "'");
    }
    v.levels = j.value("levels", std::vector<std::string>{});
    if (j.contains("valid_range") && !j["valid_range"].is_null()) {
      const auto& r = j["valid_range"];
      if (!r.is_array() || r.size() != 2)
        throw data_error("variable '" + v.name + "': valid_range must be [min,max]");
      v.valid_range = value_range{r[0].get<double>(), r[1].get<double>()};
    }
    v.missing_codes = j.value("missing_codes", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw data_error(std::string("malformed variable schema: ") + e.what());
  }
}

/// Accepts either a bare array of variables or {"variables": [...]}.
inline schema_list parse_schema(const json& doc) {
  const json& list = doc.is_object() && doc.contains("variables") ? doc["variables"] : doc;
  if (!list.is_array()) throw data_error("schema document must be an array of variables");
  schema_list out;
  for (const auto& v : list) out.push_back(v.get<variable_schema>());
  validate_schema(out);
  return out;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw data_error("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline schema_list load_schema(const std::string& path) {
  return parse_schema(read_json_file(path));
}

// -- selection filter ---------------------------------------------------------

namespace rules {
struct min_age_at_baseline {
  double threshold = 45;
  std::string variable = "age";
};
struct complete_case {
  std::vector<std::string> variables;
};
struct exclude_flag {
  std::string variable;
};
struct exclude_missing {
  std::string variable;
};
} // namespace rules

using selection_rule = std::variant<rules::min_age_at_baseline, rules::complete_case,
                                    rules::exclude_flag, rules::exclude_missing>;

struct selection_filter {
  std::vector<selection_rule> rules;
};

inline std::string describe(const selection_rule& rule) {
  return std::visit(
      [](const auto& r) -> std::string {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, rules::min_age_at_baseline>) {
          return "min_age_at_baseline(" + r.variable + " >= " +
                 detail::format_double(r.threshold) + ")";
        } else if constexpr (std::is_same_v<T, rules::complete_case>) {
          std::string s = "complete_case(";
          for (std::size_t i = 0; i < r.variables.size(); ++i)
            s += (i ? "," : "") + r.variables[i];
          return s + ")";
        } else if constexpr (std::is_same_v<T, rules::exclude_flag>) {
          return "exclude_flag(" + r.variable + ")";
        } else {
          return "exclude_missing(" + r.variable + ")";
        }
      },
      rule);
}

inline json rule_json(const selection_rule& rule) {
  json j;
  std::visit(
      [&j](const auto& r) {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, rules::min_age_at_baseline>)
          j = {{"rule", "min_age_at_baseline"}, {"threshold", r.threshold}, {"variable", r.variable}};
        else if constexpr (std::is_same_v<T, rules::complete_case>)
          j = {{"rule", "complete_case"}, {"variables", r.variables}};
        else if constexpr (std::is_same_v<T, rules::exclude_flag>)
          j = {{"rule", "exclude_flag"}, {"variable", r.variable}};
        else
          j = {{"rule", "exclude_missing"}, {"variable", r.variable}};
      },
      rule);
  return j;
}

inline selection_rule parse_rule(const json& j) {
  selection_rule rule;
  try {
    auto kind = j.at("rule").get<std::string>();
    if (kind == "min_age_at_baseline")
      rule = rules::min_age_at_baseline{j.at("threshold").get<double>(), j.value("variable", "age")};
    else if (kind == "complete_case")
      rule = rules::complete_case{j.at("variables").get<std::vector<std::string>>()};
    else if (kind == "exclude_flag")
      rule = rules::exclude_flag{j.at("variable").get<std::string>()};
    else if (kind == "exclude_missing")
      rule = rules::exclude_missing{j.at("variable").get<std::string>()};
    else
      throw data_error("unknown selection rule '" + kind + "'");
  } catch (const json::exception& e) {
    throw data_error(std::string("malformed selection rule: ") + e.what());
  }
  return rule;
}

inline selection_filter parse_filter(const json& doc) {
  const json& list = doc.is_object() && doc.contains("rules") ? doc["rules"] : doc;
  if (!list.is_array()) throw data_error("filter document must be an array of rules");
  selection_filter f;
  for (const auto& r : list) f.rules.push_back(parse_rule(r));
  return f;
}

/// One line of the population-selection ledger: rows remaining after `rule`.
struct ledger_entry {
  std::string rule;
  std::size_t count = 0;

  friend bool operator==(const ledger_entry&, const ledger_entry&) = default;
};

inline void to_json(json& j, const ledger_entry& e) {
  j = {{"rule", e.rule}, {"count", e.count}};
}

// -- snapshot -----------------------------------------------------------------

/// Read-only view of one covariate column. Missing entries hold NaN.
struct column_view {
  const variable_schema* schema = nullptr;
  std::span<const double> values;

  std::size_t size() const noexcept { return values.size(); }
  double operator[](std::size_t i) const noexcept { return values[i]; }
  bool missing(std::size_t i) const noexcept { return is_missing(values[i]); }
};

/// Immutable column-major cohort table plus survival outcome.
class cohort_snapshot {
public:
  cohort_snapshot(schema_list schema, std::vector<std::vector<double>> columns,
                  std::vector<int> followup_days, std::vector<std::uint8_t> event,
                  std::vector<ledger_entry> ledger = {})
      : schema_(std::move(schema)),
        columns_(std::move(columns)),
        followup_(std::move(followup_days)),
        event_(std::move(event)),
        ledger_(std::move(ledger)) {
    validate_schema(schema_);
    if (columns_.size() != schema_.size())
      throw data_error("snapshot has " + std::to_string(columns_.size()) +
                       " columns but schema declares " + std::to_string(schema_.size()));
    const auto n = followup_.size();
    if (event_.size() != n) throw data_error("followup_days and event lengths differ");
    for (std::size_t c = 0; c < columns_.size(); ++c) {
      if (columns_[c].size() != n)
        throw data_error("column '" + schema_[c].name + "' has wrong length");
      check_column(schema_[c], columns_[c]);
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (followup_[i] < 0)
        throw data_error("row " + std::to_string(i + 1) + ": negative followup_days");
      if (event_[i] > 1)
        throw data_error("row " + std::to_string(i + 1) + ": event must be 0 or 1");
    }
    id_ = compute_id();
  }

  /// Content hash of schema and data; equal content gives equal ids.
  const std::string& id() const noexcept { return id_; }
  std::size_t size() const noexcept { return followup_.size(); }
  const schema_list& schema() const noexcept { return schema_; }
  std::span<const ledger_entry> ledger() const noexcept { return ledger_; }
  std::span<const int> followup_days() const noexcept { return followup_; }
  std::span<const std::uint8_t> events() const noexcept { return event_; }

  std::optional<std::size_t> find(std::string_view name) const noexcept {
    for (std::size_t i = 0; i < schema_.size(); ++i)
      if (schema_[i].name == name) return i;
    return std::nullopt;
  }

  std::size_t index_of(std::string_view name) const {
    if (auto i = find(name)) return *i;
    throw not_found("unknown variable '" + std::string(name) + "'");
  }

  const variable_schema& variable(std::string_view name) const {
    return schema_[index_of(name)];
  }

  column_view column(std::string_view name) const { return column(index_of(name)); }

  column_view column(std::size_t index) const {
    return {&schema_.at(index), columns_.at(index)};
  }

private:
  static void check_column(const variable_schema& v, const std::vector<double>& col) {
    for (std::size_t i = 0; i < col.size(); ++i) {
      double x = col[i];
      if (is_missing(x)) continue;
      if (!std::isfinite(x))
        throw data_error("row " + std::to_string(i + 1) + ", column '" + v.name + "': non-finite value");
      if (v.is_discrete()) {
        if (x != std::floor(x) || x < 0 || x >= static_cast<double>(v.level_count()))
          throw data_error("row " + std::to_string(i + 1) + ", column '" + v.name +
                           "': level index " + detail::format_double(x) + " out of range");
      } else if (v.valid_range && !v.valid_range->contains(x)) {
        throw data_error("row " + std::to_string(i + 1) + ", column '" + v.name + "': value " +
                         detail::format_double(x) + " outside valid_range");
      }
    }
  }

  std::string compute_id() const {
    detail::fnv1a h;
    h.update(json(schema_).dump());
    for (const auto& col : columns_) {
      // NaN payloads may differ; hash a canonical marker for missing.
      for (double x : col) {
        if (is_missing(x)) h.update("NA");
        else h.update_pod(x);
      }
    }
    h.update_span(std::span<const int>(followup_));
    h.update_span(std::span<const std::uint8_t>(event_));
    return h.hex();
  }

  schema_list schema_;
  std::vector<std::vector<double>> columns_;
  std::vector<int> followup_;
  std::vector<std::uint8_t> event_;
  std::vector<ledger_entry> ledger_;
  std::string id_;
};

using snapshot_ptr = std::shared_ptr<const cohort_snapshot>;

// -- CSV ingestion ------------------------------------------------------------

namespace detail {

inline double parse_cell(const variable_schema& v, std::string_view raw, std::size_t row) {
  auto cell = trim(raw);
  if (cell.empty() || v.is_missing_code(cell)) return missing_value;
  auto where = [&] {
    return "row " + std::to_string(row) + ", column '" + v.name + "'";
  };
  switch (v.kind) {
    case variable_kind::continuous: {
      auto x = parse_double(cell);
      if (!x) throw data_error(where() + ": cannot parse '" + std::string(cell) + "'");
      if (v.valid_range && !v.valid_range->contains(*x))
        throw data_error(where() + ": value " + std::string(cell) + " outside valid_range [" +
                         format_double(v.valid_range->min) + ", " +
                         format_double(v.valid_range->max) + "]");
      return *x;
    }
    case variable_kind::binary: {
      if (auto idx = v.level_index(cell)) return static_cast<double>(*idx);
      if (cell == "0") return 0.0;
      if (cell == "1") return 1.0;
      throw data_error(where() + ": cannot parse '" + std::string(cell) + "' as binary");
    }
    case variable_kind::categorical: {
      if (auto idx = v.level_index(cell)) return static_cast<double>(*idx);
      throw data_error(where() + ": unknown level '" + std::string(cell) + "'");
    }
  }
  return missing_value;
}

inline std::vector<std::size_t> apply_rule(const selection_rule& rule, const schema_list& schema,
                                           const std::vector<std::vector<double>>& cols,
                                           std::vector<std::size_t> rows) {
  auto col_of = [&](const std::string& name) -> const std::vector<double>& {
    for (std::size_t i = 0; i < schema.size(); ++i)
      if (schema[i].name == name) return cols[i];
    throw not_found("selection rule references unknown variable '" + name + "'");
  };
  std::vector<std::size_t> kept;
  kept.reserve(rows.size());
  std::visit(
      [&](const auto& r) {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, rules::min_age_at_baseline>) {
          const auto& age = col_of(r.variable);
          for (auto i : rows)
            if (!is_missing(age[i]) && age[i] >= r.threshold) kept.push_back(i);
        } else if constexpr (std::is_same_v<T, rules::complete_case>) {
          std::vector<const std::vector<double>*> cs;
          for (const auto& name : r.variables) cs.push_back(&col_of(name));
          for (auto i : rows)
            if (std::none_of(cs.begin(), cs.end(), [i](auto* c) { return is_missing((*c)[i]); }))
              kept.push_back(i);
        } else if constexpr (std::is_same_v<T, rules::exclude_flag>) {
          const auto& flag = col_of(r.variable);
          for (auto i : rows)
            if (is_missing(flag[i]) || flag[i] == 0.0) kept.push_back(i);
        } else {
          const auto& c = col_of(r.variable);
          for (auto i : rows)
            if (!is_missing(c[i])) kept.push_back(i);
        }
      },
      rule);
  return kept;
}

} // namespace detail

/// Parses a cohort CSV stream. Rows surviving every rule of `filter` are kept
/// in their original order, and the per-rule counts are attached as the ledger.
inline cohort_snapshot parse_csv(std::istream& in, const schema_list& schema,
                                 const selection_filter& filter = {}) {
  validate_schema(schema);
  std::string line;
  if (!std::getline(in, line)) throw data_error("cohort file is empty");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  auto header = detail::split_csv_line(line);
  for (auto& h : header) h = std::string(detail::trim(h));

  // Map each header column to a schema slot; -1 time, -2 event.
  std::vector<long> slot(header.size(), -3);
  long time_col = -1, event_col = -1;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "followup_days") {
      time_col = static_cast<long>(c);
      slot[c] = -1;
      continue;
    }
    if (header[c] == "event") {
      event_col = static_cast<long>(c);
      slot[c] = -2;
      continue;
    }
    bool found = false;
    for (std::size_t s = 0; s < schema.size(); ++s)
      if (schema[s].name == header[c]) {
        slot[c] = static_cast<long>(s);
        found = true;
      }
    if (!found) throw data_error("header column '" + header[c] + "' is not in the schema");
  }
  if (time_col < 0) throw data_error("header lacks the 'followup_days' column");
  if (event_col < 0) throw data_error("header lacks the 'event' column");
  for (const auto& v : schema)
    if (std::find(header.begin(), header.end(), v.name) == header.end())
      throw data_error("schema variable '" + v.name + "' missing from header");

  std::vector<std::vector<double>> cols(schema.size());
  std::vector<int> time;
  std::vector<std::uint8_t> event;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size())
      throw data_error("row " + std::to_string(row) + ": expected " +
                       std::to_string(header.size()) + " fields, found " +
                       std::to_string(fields.size()));
    for (std::size_t c = 0; c < fields.size(); ++c) {
      if (slot[c] >= 0) {
        auto s = static_cast<std::size_t>(slot[c]);
        cols[s].push_back(detail::parse_cell(schema[s], fields[c], row));
      } else if (slot[c] == -1) {
        auto t = detail::parse_int(fields[c]);
        if (!t || *t < 0 || *t > std::numeric_limits<int>::max())
          throw data_error("row " + std::to_string(row) +
                           ", column 'followup_days': expected a non-negative integer, found '" +
                           fields[c] + "'");
        time.push_back(static_cast<int>(*t));
      } else {
        auto e = detail::parse_int(fields[c]);
        if (!e || (*e != 0 && *e != 1))
          throw data_error("row " + std::to_string(row) + ", column 'event': expected 0 or 1, found '" +
                           fields[c] + "'");
        event.push_back(static_cast<std::uint8_t>(*e));
      }
    }
  }

  std::vector<std::size_t> rows(time.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  std::vector<ledger_entry> ledger{{"all rows", rows.size()}};
  for (const auto& rule : filter.rules) {
    rows = detail::apply_rule(rule, schema, cols, std::move(rows));
    ledger.push_back({describe(rule), rows.size()});
  }
  if (rows.size() == time.size())
    return {schema, std::move(cols), std::move(time), std::move(event), std::move(ledger)};

  std::vector<std::vector<double>> kept_cols(schema.size());
  std::vector<int> kept_time;
  std::vector<std::uint8_t> kept_event;
  for (std::size_t s = 0; s < schema.size(); ++s) {
    kept_cols[s].reserve(rows.size());
    for (auto i : rows) kept_cols[s].push_back(cols[s][i]);
  }
  for (auto i : rows) {
    kept_time.push_back(time[i]);
    kept_event.push_back(event[i]);
  }
  return {schema, std::move(kept_cols), std::move(kept_time), std::move(kept_event),
          std::move(ledger)};
}

inline cohort_snapshot load_csv(const std::string& path, const schema_list& schema,
                                const selection_filter& filter = {}) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open cohort file '" + path + "'");
  return parse_csv(in, schema, filter);
}

/// Writes the snapshot in the cohort CSV format: schema columns in declaration
/// order, then followup_days and event. Missing cells are left empty.
inline void write_csv(std::ostream& out, const cohort_snapshot& snap) {
  const auto& schema = snap.schema();
  for (const auto& v : schema) out << detail::csv_escape(v.name) << ',';
  out << "followup_days,event\n";
  std::vector<column_view> cols;
  for (std::size_t c = 0; c < schema.size(); ++c) cols.push_back(snap.column(c));
  std::string line;
  for (std::size_t i = 0; i < snap.size(); ++i) {
    line.clear();
    for (const auto& col : cols) {
      double x = col[i];
      if (!is_missing(x)) {
        const auto& v = *col.schema;
        if (v.kind == variable_kind::categorical)
          line += detail::csv_escape(v.level_label(static_cast<std::size_t>(x)));
        else if (v.kind == variable_kind::binary)
          line += x == 0.0 ? '0' : '1';
        else
          line += detail::format_double(x);
      }
      line += ',';
    }
    line += std::to_string(snap.followup_days()[i]);
    line += ',';
    line += snap.events()[i] ? '1' : '0';
    line += '\n';
    out << line;
  }
}

inline void write_csv(const std::string& path, const cohort_snapshot& snap) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write '" + path + "'");
  write_csv(out, snap);
}

} // namespace rmx
