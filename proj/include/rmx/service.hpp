#pragma once

#include "rmx/cohort.hpp"
#include "rmx/engine.hpp"
#include "rmx/error.hpp"
#include "rmx/riskmodels.hpp"
#include "rmx/subgroups.hpp"
#include "rmx/synth.hpp"

#include <httplib.h>

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

namespace rmx {

struct service_config {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t max_jobs = std::max(1u, std::thread::hardware_concurrency());
  double default_threshold = default_threshold_risk;
};

struct service_response {
  int status = 200;
  json body;

  std::string text() const { return body.dump(); }
};

/// One active cohort plus everything derived from it. Replacing the cohort
/// swaps the whole session, so dependent caches go with it.
struct session_state {
  snapshot_ptr snapshot;
  std::mutex partitions_mutex;
  std::map<std::string, std::shared_ptr<const subgroup_partition>> partitions;
  subspace_cache subspaces;

  std::shared_ptr<const subgroup_partition> partition(const std::string& id) {
    std::lock_guard lock(partitions_mutex);
    auto it = partitions.find(id);
    if (it == partitions.end()) throw not_found("unknown partition '" + id + "'");
    return it->second;
  }
};

class service {
public:
  using query_map = std::map<std::string, std::string>;

  explicit service(service_config cfg = {}, std::vector<risk_model> models = builtin_models())
      : cfg_(std::move(cfg)), models_(std::move(models)), state_(std::make_shared<session_state>()) {
    for (const auto& m : models_) m.validate();
  }

  const service_config& config() const noexcept { return cfg_; }
  const std::vector<risk_model>& models() const noexcept { return models_; }

  /// Installs a cohort, discarding the previous session.
  void load_snapshot(snapshot_ptr snap) {
    auto fresh = std::make_shared<session_state>();
    fresh->snapshot = std::move(snap);
    std::lock_guard lock(state_mutex_);
    state_ = std::move(fresh);
  }

  snapshot_ptr current_snapshot() const { return session()->snapshot; }

  /// Transport-independent dispatch; the HTTP server is a thin shell over it.
  service_response handle(std::string_view method, std::string_view path, const query_map& query,
                          std::string_view body) {
    try {
      return route(method, path, query, body);
    } catch (const error& e) {
      return error_response(http_status(e.kind()), to_string(e.kind()), e.what());
    } catch (const json::exception& e) {
      return error_response(400, "usage", e.what());
    } catch (const std::exception& e) {
      return error_response(500, "internal", e.what());
    }
  }

  /// Blocks serving HTTP until stop() is called.
  void listen() {
    {
      std::lock_guard lock(server_mutex_);
      server_ = std::make_unique<httplib::Server>();
      const auto jobs = std::max<std::size_t>(1, cfg_.max_jobs);
      server_->new_task_queue = [jobs] { return new httplib::ThreadPool(jobs); };
      auto dispatch = [this](const httplib::Request& req, httplib::Response& res) {
        query_map q;
        for (const auto& [k, v] : req.params) q.emplace(k, v);
        auto out = handle(req.method, req.path, q, req.body);
        res.status = out.status;
        res.set_content(out.text(), "application/json");
      };
      server_->Get(R"(/api/.*)", dispatch);
      server_->Post(R"(/api/.*)", dispatch);
    }
    // port 0 asks the OS for a free port; see bound_port()
    int port = cfg_.port;
    if (port == 0) port = server_->bind_to_any_port(cfg_.host);
    else if (!server_->bind_to_port(cfg_.host, port)) port = -1;
    if (port < 0) throw data_error("cannot listen on " + cfg_.host + ":" + std::to_string(cfg_.port));
    bound_port_ = port;
    if (!server_->listen_after_bind())
      throw data_error("cannot listen on " + cfg_.host + ":" + std::to_string(port));
  }

  /// Port actually bound by listen(); 0 before binding.
  int bound_port() const noexcept { return bound_port_.load(); }

  bool is_running() const {
    std::lock_guard lock(server_mutex_);
    return server_ && server_->is_running();
  }

  void stop() {
    std::lock_guard lock(server_mutex_);
    if (server_) server_->stop();
  }

private:
  static service_response error_response(int status, std::string_view kind, std::string_view message) {
    return {status, {{"error", {{"kind", kind}, {"message", message}}}}};
  }

  std::atomic<int> bound_port_{0};

  std::shared_ptr<session_state> session() const {
    std::lock_guard lock(state_mutex_);
    return state_;
  }

  static json parse_body(std::string_view body) {
    if (body.empty()) return json::object();
    try {
      return json::parse(body);
    } catch (const json::parse_error& e) {
      throw usage_error(std::string("request body is not valid JSON: ") + e.what());
    }
  }

  static const std::string* param(const query_map& q, const std::string& key) {
    auto it = q.find(key);
    return it == q.end() ? nullptr : &it->second;
  }

  static snapshot_ptr require_snapshot(const session_state& s) {
    if (!s.snapshot) throw conflict("no cohort loaded");
    return s.snapshot;
  }

  // 409 has no error_kind; it is the one status minted here.
  struct conflict : std::runtime_error {
    using std::runtime_error::runtime_error;
  };

  service_response route(std::string_view method, std::string_view path, const query_map& query,
                         std::string_view body) {
    const bool get = method == "GET", post = method == "POST";
    try {
      if (path == "/api/models" && get) return {200, models_json()};
      if (path == "/api/schema" && get) return {200, json{{"variables", require_snapshot(*session())->schema()}}};
      if (path == "/api/cohort" && post) return post_cohort(parse_body(body));
      if (path == "/api/subgroups" && post) return post_subgroups(parse_body(body));
      if (path == "/api/summary" && post) return post_summary(parse_body(body));
      if (path == "/api/distribution" && get) return get_distribution(query);
      if (path == "/api/explain" && post) return post_explain(parse_body(body));
      if (path == "/api/survival" && get) return get_survival(query);
    } catch (const conflict& e) {
      return error_response(409, "conflict", e.what());
    }
    static const char* known[] = {"/api/models",  "/api/schema",       "/api/cohort",  "/api/subgroups",
                                  "/api/summary", "/api/distribution", "/api/explain", "/api/survival"};
    for (const char* k : known)
      if (path == k) return error_response(405, "usage", "method not allowed");
    return error_response(404, "not_found", "no route for " + std::string(path));
  }

  json models_json() const {
    json list = json::array();
    for (const auto& m : models_)
      list.push_back({{"name", m.name},
                      {"c", m.c},
                      {"bias", m.bias},
                      {"horizon_days", m.horizon_days},
                      {"variables", m.variables()},
                      {"terms", m.terms}});
    return {{"models", list}, {"default_threshold", {{"risk", cfg_.default_threshold}}}};
  }

  service_response post_cohort(const json& req) {
    json extra = json::object();
    snapshot_ptr snap;
    if (req.contains("synth")) {
      const auto& spec_doc = req["synth"];
      auto spec = spec_doc.is_string() ? parse_synth_spec(read_json_file(spec_doc.get<std::string>()))
                                       : parse_synth_spec(spec_doc);
      auto res = generate_synthetic(spec);
      extra["horizon_incidence"] = res.horizon_incidence;
      extra["observed_incidence"] = res.observed_incidence;
      snap = std::make_shared<const cohort_snapshot>(std::move(res.snapshot));
    } else if (req.contains("csv")) {
      if (!req.contains("schema")) throw usage_error("cohort request with csv needs a schema");
      const auto& sd = req["schema"];
      auto schema = sd.is_string() ? load_schema(sd.get<std::string>()) : parse_schema(sd);
      selection_filter filter;
      if (req.contains("filter") && !req["filter"].is_null()) {
        const auto& fd = req["filter"];
        filter = fd.is_string() ? parse_filter(read_json_file(fd.get<std::string>())) : parse_filter(fd);
      }
      snap = std::make_shared<const cohort_snapshot>(load_csv(req["csv"].get<std::string>(), schema, filter));
    } else {
      throw usage_error("cohort request needs a 'csv' path or a 'synth' spec");
    }
    load_snapshot(snap);
    json ledger = snap->ledger();
    json out = {{"snapshot_id", snap->id()}, {"n", snap->size()}, {"ledger", ledger}};
    out.update(extra);
    return {200, out};
  }

  service_response post_subgroups(const json& req) {
    auto s = session();
    auto snap = require_snapshot(*s);
    subgroup_spec spec;
    try {
      spec.variables = req.at("variables").get<std::vector<std::string>>();
      if (req.contains("bins") && !req["bins"].is_null())
        spec.bins = req["bins"].get<std::map<std::string, std::vector<double>>>();
    } catch (const json::exception& e) {
      throw usage_error(std::string("malformed subgroup request: ") + e.what());
    }
    const auto id = partition_id(snap->id(), spec);
    std::shared_ptr<const subgroup_partition> part;
    {
      std::lock_guard lock(s->partitions_mutex);
      if (auto it = s->partitions.find(id); it != s->partitions.end()) part = it->second;
    }
    if (!part) {
      auto built = std::make_shared<const subgroup_partition>(build_partition(*snap, spec));
      std::lock_guard lock(s->partitions_mutex);
      part = s->partitions.emplace(id, std::move(built)).first->second;
    }
    return {200, partition_json(*part, req.value("include_members", false))};
  }

  service_response post_summary(const json& body) {
    auto s = session();
    auto snap = require_snapshot(*s);
    auto req = parse_summary_request(body, cfg_.default_threshold);
    auto part = s->partition(req.partition_id);
    return {200, summary_payload(*snap, *part, models_, req, s->subspaces)};
  }

  service_response get_distribution(const query_map& q) {
    auto s = session();
    auto snap = require_snapshot(*s);
    const auto* model = param(q, "model");
    if (!model) throw usage_error("distribution needs ?model=");
    const auto& m = find_model(models_, *model);
    std::size_t bins = 50;
    if (const auto* b = param(q, "bins")) {
      auto v = detail::parse_int(*b);
      if (!v) throw usage_error("bins must be an integer");
      if (*v < 1 || *v > 100000) throw invalid_argument("bins must lie in [1, 100000]");
      bins = static_cast<std::size_t>(*v);
    }
    double risk = cfg_.default_threshold;
    if (const auto* r = param(q, "risk")) {
      auto v = detail::parse_double(*r);
      if (!v) throw usage_error("risk must be a number");
      risk = *v;
    }
    std::vector<std::size_t> rows;
    if (const auto* pid = param(q, "partition_id")) {
      auto part = s->partition(*pid);
      if (const auto* label = param(q, "subgroup")) {
        rows = part->find(*label).members;
      } else {
        for (const auto& g : part->subgroups) rows.insert(rows.end(), g.members.begin(), g.members.end());
        std::sort(rows.begin(), rows.end());
      }
    } else {
      if (param(q, "subgroup")) throw usage_error("subgroup needs partition_id");
      rows.resize(snap->size());
      std::iota(rows.begin(), rows.end(), std::size_t{0});
    }
    return {200, distribution_payload(*snap, rows, m, bins, risk)};
  }

  service_response post_explain(const json& body) {
    auto s = session();
    auto snap = require_snapshot(*s);
    auto req = parse_explain_request(body);
    auto part = s->partition(req.partition_id);
    return {200, explain_payload(*snap, *part, models_, req)};
  }

  service_response get_survival(const query_map& q) {
    auto s = session();
    auto snap = require_snapshot(*s);
    const auto* pid = param(q, "partition_id");
    if (!pid) throw usage_error("survival needs ?partition_id=");
    auto part = s->partition(*pid);
    int horizon = 1826;
    if (const auto* h = param(q, "horizon_days")) {
      auto v = detail::parse_int(*h);
      if (!v || *v <= 0) throw invalid_argument("horizon_days must be a positive integer");
      horizon = static_cast<int>(*v);
    }
    return {200, survival_payload(*snap, *part, horizon)};
  }

  service_config cfg_;
  std::vector<risk_model> models_;
  mutable std::mutex state_mutex_;
  std::shared_ptr<session_state> state_;
  mutable std::mutex server_mutex_;
  std::unique_ptr<httplib::Server> server_;
};

} // namespace rmx
