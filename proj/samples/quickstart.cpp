// Generate a small synthetic cohort, split it by income and print per-subgroup
// discrimination for each built-in model.

#include "rmx/rmx.hpp"

#include <cstdio>
#include <numeric>

int main() {
  using namespace rmx;
  auto cohort = generate_synthetic(default_synth_spec(5000, 42));
  const auto& snap = cohort.snapshot;
  std::printf("cohort %s: %zu patients, incidence %.4f\n", snap.id().c_str(), snap.size(),
              cohort.horizon_incidence);

  auto part = build_partition(snap, {{"income"}, {}});
  for (const auto& model : builtin_models()) {
    bound_model bm(model, snap);
    auto thr = make_threshold(model, 0.05);
    std::printf("\n%s (score threshold %.3f)\n", model.name.c_str(), thr.score_value);
    for (const auto& g : part.subgroups) {
      auto rows = bm.complete_rows(g.members);
      std::vector<double> s, t;
      std::vector<std::uint8_t> e;
      for (auto r : rows) {
        s.push_back(bm.score_row(r));
        t.push_back(snap.followup_days()[r]);
        e.push_back(snap.events()[r]);
      }
      try {
        std::printf("  %-16s n=%5zu  c-index %.3f\n", g.label.c_str(), rows.size(), c_index(s, t, e));
      } catch (const error& err) {
        std::printf("  %-16s n=%5zu  c-index undefined (%s)\n", g.label.c_str(), rows.size(), err.what());
      }
    }
  }
}
