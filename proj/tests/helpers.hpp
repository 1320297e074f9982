#pragma once

#include "rmx/rmx.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

namespace rmx::test {

inline variable_schema continuous(std::string name, double lo = -1e9, double hi = 1e9,
                                  role_set roles = {true, true, false}) {
  variable_schema v;
  v.name = std::move(name);
  v.kind = variable_kind::continuous;
  v.valid_range = value_range{lo, hi};
  v.roles = roles;
  return v;
}

inline variable_schema binary(std::string name, std::vector<std::string> levels = {},
                              role_set roles = {true, true, true}) {
  variable_schema v;
  v.name = std::move(name);
  v.kind = variable_kind::binary;
  v.levels = std::move(levels);
  v.roles = roles;
  return v;
}

inline variable_schema categorical(std::string name, std::vector<std::string> levels,
                                   role_set roles = {false, true, true}) {
  variable_schema v;
  v.name = std::move(name);
  v.kind = variable_kind::categorical;
  v.levels = std::move(levels);
  v.roles = roles;
  return v;
}

/// Snapshot with unit follow-up and no events unless given.
inline cohort_snapshot make_snapshot(schema_list schema, std::vector<std::vector<double>> cols,
                                     std::vector<int> days = {}, std::vector<std::uint8_t> events = {}) {
  const auto n = cols.empty() ? days.size() : cols.front().size();
  if (days.empty()) days.assign(n, 1826);
  if (events.empty()) events.assign(n, 0);
  return {std::move(schema), std::move(cols), std::move(days), std::move(events)};
}

/// Fresh directory under the system temp dir, removed on destruction.
class temp_dir {
public:
  temp_dir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("rmx-test-" + std::to_string(rd()) + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~temp_dir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  temp_dir(const temp_dir&) = delete;
  temp_dir& operator=(const temp_dir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }

  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(file(name), std::ios::binary) << text;
    return file(name);
  }

private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <class F>
error_kind kind_of(F&& f) {
  try {
    f();
  } catch (const error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an rmx::error";
  return error_kind::usage;
}

template <class F>
std::string message_of(F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected an exception";
  return {};
}

/// Random censored survival data with integer times (ties likely).
struct survival_data {
  std::vector<double> scores, times;
  std::vector<std::uint8_t> events;
};

inline survival_data random_survival(std::size_t n, std::uint64_t seed, int max_time = 50,
                                     int score_levels = 20) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> t(1, max_time), s(0, score_levels - 1), e(0, 2);
  survival_data d;
  for (std::size_t i = 0; i < n; ++i) {
    d.scores.push_back(static_cast<double>(s(rng)));
    d.times.push_back(static_cast<double>(t(rng)));
    d.events.push_back(e(rng) > 0 ? 1 : 0);
  }
  return d;
}

} // namespace rmx::test
