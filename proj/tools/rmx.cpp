// rmx: batch front end for cohort synthesis, subgroup reports, explanations
// and the HTTP service.

#include "rmx/rmx.hpp"
#include "rmx/service.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

namespace {

using namespace rmx;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write '" + path + "'");
  out << text;
  if (!out) throw data_error("write to '" + path + "' failed");
}

void write_json(const std::string& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

std::vector<std::string> split_list(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  for (const auto& item : items)
    for (auto& part : detail::split(item, ','))
      if (auto t = detail::trim(part); !t.empty()) out.emplace_back(t);
  return out;
}

protected_split parse_protected(const std::string& text) {
  auto eq = text.find('=');
  auto comma = text.find(',', eq == std::string::npos ? 0 : eq);
  if (eq == std::string::npos || comma == std::string::npos)
    throw usage_error("--protected expects attr=privileged,unprivileged, got '" + text + "'");
  return {text.substr(0, eq), text.substr(eq + 1, comma - eq - 1), text.substr(comma + 1)};
}

std::map<std::string, std::vector<double>> parse_bins(const std::vector<std::string>& items) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& item : items) {
    auto eq = item.find('=');
    if (eq == std::string::npos) throw usage_error("--bins expects var=e1,e2,..., got '" + item + "'");
    std::vector<double> edges;
    for (const auto& e : detail::split(item.substr(eq + 1), ',')) {
      auto v = detail::parse_double(e);
      if (!v) throw usage_error("bad bin edge '" + e + "' in '" + item + "'");
      edges.push_back(*v);
    }
    out[item.substr(0, eq)] = edges;
  }
  return out;
}

struct cohort_args {
  std::string cohort;
  std::string schema;
  std::string filter;
  std::vector<std::string> group_by;
  std::vector<std::string> bins;
  std::string model_file;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--cohort", cohort, "Cohort CSV")->required()->check(CLI::ExistingFile);
    cmd->add_option("--schema", schema, "Schema JSON")->required()->check(CLI::ExistingFile);
    cmd->add_option("--filter", filter, "Selection filter JSON")->check(CLI::ExistingFile);
    cmd->add_option("--group-by", group_by, "Subgroup variables (comma separated or repeated)")->required();
    cmd->add_option("--bins", bins, "Bin edges for a continuous subgroup variable: var=e1,e2,...");
    cmd->add_option("--model-file", model_file, "Additional model definitions (JSON)")
        ->check(CLI::ExistingFile);
  }

  cohort_snapshot load() const {
    selection_filter f;
    if (!filter.empty()) f = parse_filter(read_json_file(filter));
    return load_csv(cohort, load_schema(schema), f);
  }

  subgroup_spec spec() const { return {split_list(group_by), parse_bins(bins)}; }

  std::vector<risk_model> registry() const {
    auto models = builtin_models();
    if (!model_file.empty())
      for (auto& m : parse_models(read_json_file(model_file))) {
        for (const auto& b : models)
          if (b.name == m.name) throw invalid_argument("model '" + m.name + "' is already defined");
        models.push_back(std::move(m));
      }
    return models;
  }
};

int run(int argc, char** argv) {
  CLI::App app{"Risk-model evaluation across patient subgroups"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort");
  std::string spec_path, synth_out, schema_out;
  std::optional<std::uint64_t> seed_override;
  std::optional<std::size_t> n_override;
  synth->add_option("--spec", spec_path, "Synthetic spec JSON")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "Output CSV")->required();
  synth->add_option("--seed", seed_override, "Override the spec seed");
  synth->add_option("--n", n_override, "Override the patient count");
  synth->add_option("--schema-out", schema_out, "Also write the cohort schema JSON");

  // template
  auto* templ = app.add_subcommand("template", "Write the bundled synthetic spec");
  std::string templ_out;
  std::size_t templ_n = 50000;
  std::uint64_t templ_seed = 42;
  templ->add_option("--out", templ_out, "Output JSON")->required();
  templ->add_option("--n", templ_n, "Patient count");
  templ->add_option("--seed", templ_seed, "Seed");

  // models
  auto* models_cmd = app.add_subcommand("models", "Export the built-in models");
  std::string models_out;
  models_cmd->add_option("--out", models_out, "Output JSON (stdout when omitted)");

  // report
  auto* report = app.add_subcommand("report", "Summarize subgroups");
  cohort_args report_args;
  report_args.add_to(report);
  std::vector<std::string> model_names, protected_args;
  double threshold_risk = default_threshold_risk;
  bool audit = false;
  audit_request audit_cfg;
  std::size_t hist_bins = 50;
  std::string report_out;
  report->add_option("--models", model_names, "Model names (comma separated or repeated)")->required();
  report->add_option("--threshold-risk", threshold_risk, "Horizon-risk threshold");
  report->add_option("--protected", protected_args, "Protected split attr=privileged,unprivileged");
  report->add_flag("--audit", audit, "Run the individual-fairness audit");
  report->add_option("--lambda", audit_cfg.lambda, "Audit distance penalty");
  report->add_option("--audit-fraction", audit_cfg.fraction, "Fraction of each subgroup audited");
  report->add_option("--audit-seed", audit_cfg.seed, "Seed of the audit sample");
  report->add_option("--hist-bins", hist_bins, "Histogram bins");
  report->add_option("--out", report_out, "Output JSON")->required();

  // explain
  auto* explain = app.add_subcommand("explain", "Explain one subgroup");
  cohort_args explain_args;
  explain_args.add_to(explain);
  explain_request ereq;
  std::string explain_out;
  explain->add_option("--subgroup", ereq.subgroup, "Subgroup label")->required();
  explain->add_option("--model", ereq.model, "Model name")->required();
  explain->add_option("--fraction", ereq.fraction, "Beeswarm sample fraction");
  explain->add_option("--seed", ereq.seed, "Sample seed");
  explain->add_option("--out", explain_out, "Output JSON")->required();

  // serve
  auto* serve = app.add_subcommand("serve", "Run the HTTP API");
  service_config scfg;
  std::string listen = "127.0.0.1:8080";
  std::string serve_cohort, serve_schema, serve_synth;
  serve->add_option("--listen", listen, "host:port")->envname("RMX_LISTEN");
  serve->add_option("--max-jobs", scfg.max_jobs, "Concurrent request workers")->envname("RMX_MAX_JOBS");
  serve->add_option("--default-threshold", scfg.default_threshold, "Default horizon-risk threshold")
      ->envname("RMX_DEFAULT_THRESHOLD");
  serve->add_option("--cohort", serve_cohort, "Preload a cohort CSV")->check(CLI::ExistingFile);
  serve->add_option("--schema", serve_schema, "Schema of the preloaded cohort")->check(CLI::ExistingFile);
  serve->add_option("--synth", serve_synth, "Preload a synthetic cohort from a spec")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code(error_kind::usage);
  }

  if (*synth) {
    auto spec = parse_synth_spec(read_json_file(spec_path));
    if (seed_override) spec.seed = *seed_override;
    if (n_override) spec.n = *n_override;
    auto res = generate_synthetic(spec);
    write_csv(synth_out, res.snapshot);
    if (!schema_out.empty()) write_json(schema_out, json{{"variables", res.snapshot.schema()}});
    std::cout << "snapshot " << res.snapshot.id() << "\n";
    for (const auto& e : res.snapshot.ledger()) std::cout << e.count << "\t" << e.rule << "\n";
    std::cout << "horizon incidence " << detail::format_double(res.horizon_incidence) << " (target "
              << detail::format_double(spec.target_incidence) << ")\n";
    std::cout << "observed events " << detail::format_double(res.observed_incidence) << "\n";
    return 0;
  }
  if (*templ) {
    write_json(templ_out, default_synth_spec(templ_n, templ_seed));
    return 0;
  }
  if (*models_cmd) {
    json doc = {{"models", builtin_models()}};
    if (models_out.empty()) std::cout << doc.dump(2) << "\n";
    else write_json(models_out, doc);
    return 0;
  }
  if (*report) {
    auto models = report_args.registry();
    auto snap = report_args.load();
    auto part = build_partition(snap, report_args.spec());
    summary_request req;
    req.partition_id = part.id;
    req.models = split_list(model_names);
    req.threshold_risk = threshold_risk;
    for (const auto& p : protected_args) req.protected_splits.push_back(parse_protected(p));
    if (audit) req.audit = audit_cfg;
    req = parse_summary_request(to_json_value(req));  // same validation as the service
    subspace_cache cache;
    write_text(report_out, report_payload(snap, part, models, req, cache, hist_bins).dump() + "\n");
    return 0;
  }
  if (*explain) {
    auto models = explain_args.registry();
    auto snap = explain_args.load();
    auto part = build_partition(snap, explain_args.spec());
    ereq.partition_id = part.id;
    if (!(ereq.fraction > 0 && ereq.fraction <= 1)) throw invalid_argument("fraction must lie in (0,1]");
    write_text(explain_out, explain_payload(snap, part, models, ereq).dump() + "\n");
    return 0;
  }
  if (*serve) {
    auto colon = listen.rfind(':');
    if (colon == std::string::npos) throw usage_error("--listen expects host:port");
    scfg.host = listen.substr(0, colon);
    auto port = detail::parse_int(listen.substr(colon + 1));
    if (!port || *port < 0 || *port > 65535) throw usage_error("bad port in '" + listen + "'");
    scfg.port = static_cast<int>(*port);
    if (!(scfg.default_threshold > 0 && scfg.default_threshold < 1))
      throw invalid_argument("default threshold must lie in (0,1)");
    service svc(scfg);
    if (!serve_synth.empty()) {
      auto res = generate_synthetic(parse_synth_spec(read_json_file(serve_synth)));
      svc.load_snapshot(std::make_shared<const cohort_snapshot>(std::move(res.snapshot)));
    } else if (!serve_cohort.empty()) {
      if (serve_schema.empty()) throw usage_error("--cohort needs --schema");
      svc.load_snapshot(std::make_shared<const cohort_snapshot>(load_csv(serve_cohort, load_schema(serve_schema))));
    }
    std::cerr << "listening on " << scfg.host << ":" << scfg.port << "\n";
    svc.listen();
    return 0;
  }
  return exit_code(error_kind::usage);
}

} // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const rmx::error& e) {
    std::cerr << "rmx: " << e.what() << "\n";
    return rmx::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "rmx: " << e.what() << "\n";
    return 1;
  }
}
