#include "cascade/cli.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cascade/calibration.hpp"
#include "cascade/datamodel.hpp"
#include "cascade/error.hpp"
#include "cascade/evaluation.hpp"
#include "cascade/routing.hpp"
#include "cascade/synthetic.hpp"
#include "cascade/uncertainty.hpp"
#include "cascade/verify.hpp"

namespace cascade::cli {

using nlohmann::json;

namespace {

struct Options {
  std::string records;
  std::string config;
  std::string model;
  std::vector<std::string> policies;
  std::string out;
  std::string spec;
  std::string calibration_records;
  std::string split_prefix;
  std::string signal = "margin";
  std::string baseline = "ucci";
  std::string method = "isotonic";
  std::uint64_t seed = 0;
  double tau = 0.0;
  double cost_ratio = 0.0;
  int bootstrap = 0;
  int bins = 0;
  std::size_t n = 0;
  bool quick = false;
  bool inject_fault = false;

  // Set when the flag was given, so config values are only overridden on request.
  // One entry per subcommand that declares the flag.
  std::vector<CLI::Option*> seed_flag;
  std::vector<CLI::Option*> tau_flag;
  std::vector<CLI::Option*> cost_flag;
  std::vector<CLI::Option*> bootstrap_flag;
  std::vector<CLI::Option*> bins_flag;
  std::vector<CLI::Option*> n_flag;
};

bool given(const std::vector<CLI::Option*>& flags) {
  for (const auto* flag : flags) {
    if (flag->count() > 0) return true;
  }
  return false;
}

RunConfig effective_config(const Options& o) {
  RunConfig config = o.config.empty() ? default_config() : load_config(o.config);
  if (given(o.seed_flag)) config.rng_seed = o.seed;
  if (given(o.tau_flag)) config.accuracy_target = o.tau;
  if (given(o.cost_flag)) config.cost_model = CostModel{1.0, o.cost_ratio};
  const bool bootstrap_given = given(o.bootstrap_flag);
  if (bootstrap_given && o.bootstrap != 0) config.bootstrap_resamples = o.bootstrap;
  if (given(o.bins_flag)) config.ece_bins = o.bins;
  config.validate();
  // Zero is only meaningful on the command line: it switches the intervals off.
  if (bootstrap_given && o.bootstrap == 0) config.bootstrap_resamples = 0;
  return config;
}

void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty()) {
    out << text;
    return;
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw Error(ErrorKind::Io, "cannot open '" + path + "' for writing");
  file << text;
  if (!file) throw Error(ErrorKind::Io, "write failed for '" + path + "'");
}

void emit_json(const json& doc, std::ostream& out) { out << doc.dump(2) << '\n'; }

std::vector<LabeledScore> margin_pairs(std::span<const InferenceRecord> records) {
  std::vector<LabeledScore> pairs;
  pairs.reserve(records.size());
  for (const auto& r : records) pairs.push_back({margin_uncertainty(r.small_tokens), derive_correctness(r, ModelSide::Small)});
  return pairs;
}

std::vector<LabeledScore> calibrated_pairs(const Calibrator& model, std::vector<LabeledScore> pairs) {
  for (auto& p : pairs) p.score = calibrate(model, p.score);
  return pairs;
}

int cmd_calibrate(const Options& o, std::ostream& out) {
  const RunConfig config = effective_config(o);
  const auto records = load_records(o.records, config.entity_schema);
  const auto pairs = margin_pairs(records);
  Calibrator model = o.method == "temperature" ? Calibrator(fit_temperature(pairs)) : Calibrator(fit_isotonic(pairs));
  save_calibrator(o.out, model);

  const auto before = expected_calibration_error(pairs, config.ece_bins);
  const auto after = expected_calibration_error(calibrated_pairs(model, pairs), config.ece_bins);
  emit_json({{"model", o.out},
             {"method", o.method},
             {"n", records.size()},
             {"ece_before", before.ece},
             {"ece_after", after.ece},
             {"reliability_before", reliability_to_json(before)},
             {"reliability_after", reliability_to_json(after)}},
            out);
  return kOk;
}

int cmd_select(const Options& o, std::ostream& out) {
  const RunConfig config = effective_config(o);
  const auto validation = load_records(o.records, config.entity_schema);
  const double tau = config.accuracy_target;
  SelectionResult result;
  if (o.baseline == "ucci") {
    if (o.model.empty()) throw Error(ErrorKind::Usage, "select: --model is required for the calibrated router");
    result = select_calibrated(validation, load_calibrator(o.model), config.cost_model, tau);
  } else if (o.baseline == "entropy") {
    result = build_entropy_baseline(validation, config.cost_model, tau);
  } else if (o.baseline == "frugal") {
    result = build_frugal_baseline(validation, config.cost_model, tau);
  } else {
    if (o.calibration_records.empty()) {
      throw Error(ErrorKind::Usage, "select: --calibration-records is required for the conformal router");
    }
    const auto calibration = load_records(o.calibration_records, config.entity_schema);
    result = select_conformal(calibration, validation, config.cost_model, tau, default_miscoverage_grid());
  }
  if (!o.out.empty()) save_policy(o.out, result.policy);
  json doc = selection_to_json(result);
  doc["baseline"] = o.baseline;
  doc["tau"] = tau;
  emit_json(doc, out);
  return kOk;
}

json evaluate_one(const RoutingPolicy& policy, std::span<const InferenceRecord> records, const RunConfig& config) {
  const auto decisions = route_all(policy, records);
  const auto report = evaluate_decisions(records, decisions, config.cost_model, config.entity_schema, describe(policy));
  json doc = {{"report", report_to_json(report)}};

  if (config.bootstrap_resamples > 0) {
    const auto outcomes = outcomes_of(records);
    json cis = json::object();
    for (auto stat : {BootstrapStatistic::Cost, BootstrapStatistic::MicroF1, BootstrapStatistic::CostSavingVsLarge}) {
      cis[std::string(to_string(stat))] = bootstrap_to_json(
          bootstrap_ci(outcomes, decisions, stat, config.cost_model, config.bootstrap_resamples, config.rng_seed));
    }
    doc["bootstrap"] = cis;
  }

  std::vector<double> ratios{config.cost_model.ratio()};
  for (double r : {5.0, 10.0}) {
    if (r != ratios.front()) ratios.push_back(r);
  }
  json rows = json::array();
  for (const auto& row : cost_sensitivity(report.escalation_fraction, ratios)) {
    rows.push_back({{"ratio", row.ratio}, {"cost", row.cost}, {"saving_vs_large", row.saving_vs_large}});
  }
  doc["cost_sensitivity"] = rows;

  try {
    const auto diag = assumption_ii_diagnostic(records, decisions);
    doc["assumption_ii"] = {{"f1_large_on_escalated", diag.f1_large_on_escalated},
                            {"f1_large_on_all", diag.f1_large_on_all},
                            {"gap", diag.gap}};
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::DiagnosticUndefined) throw;
    doc["assumption_ii"] = {{"undefined", e.what()}};
  }
  return doc;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const RunConfig config = effective_config(o);
  const auto records = load_records(o.records, config.entity_schema);
  json cascades = json::array();
  for (const auto& path : o.policies) {
    json one = evaluate_one(load_policy(path), records, config);
    one["policy_file"] = path;
    cascades.push_back(std::move(one));
  }
  const auto small = evaluate_single_model(records, ModelSide::Small, config.cost_model, config.entity_schema, "small_only");
  const auto large = evaluate_single_model(records, ModelSide::Large, config.cost_model, config.entity_schema, "large_only");
  emit_json({{"cascades", cascades},
             {"small_only", report_to_json(small)},
             {"large_only", report_to_json(large)},
             {"cost_ratio", config.cost_model.ratio()},
             {"seed", config.rng_seed}},
            out);
  return kOk;
}

int cmd_sweep(const Options& o, std::ostream& out) {
  const RunConfig config = effective_config(o);
  const auto records = load_records(o.records, config.entity_schema);
  RoutingPolicy prototype;
  if (!o.policies.empty()) {
    prototype = load_policy(o.policies.front());
  } else {
    const SignalKind kind = parse_signal_kind(o.signal);
    prototype.source = kind == SignalKind::Margin        ? ScoreSource::RawMargin
                       : kind == SignalKind::MeanEntropy ? ScoreSource::MeanEntropy
                                                         : ScoreSource::MeanMaxProb;
    prototype.direction = natural_direction(prototype.source);
  }
  emit(o.out, pareto_to_csv(pareto_sweep(records, prototype, config.cost_model)), out);
  return kOk;
}

int cmd_synth(const Options& o, std::ostream& out) {
  SyntheticSpec spec = o.spec.empty() ? matched_workload_spec(1000, 0) : load_spec(o.spec);
  if (given(o.n_flag)) spec.n = o.n;
  if (given(o.seed_flag)) spec.seed = o.seed;
  const auto data = generate(spec);

  if (o.split_prefix.empty()) {
    std::ostringstream text;
    write_records(text, data.records);
    emit(o.out, text.str(), out);
    return kOk;
  }
  const RunConfig config = effective_config(o);
  const auto splits = split_dataset(data.records, SplitFractions{}, config.rng_seed);
  json files = json::object();
  for (const DatasetSplit* split : {&splits.calibration, &splits.validation, &splits.test}) {
    const std::string path = o.split_prefix + "." + std::string(to_string(split->name)) + ".jsonl";
    save_records(path, split->records);
    files[std::string(to_string(split->name))] = {{"path", path}, {"n", split->records.size()}};
  }
  emit_json({{"spec", spec_to_json(spec)}, {"splits", files}}, out);
  return kOk;
}

int cmd_report(const Options& o, std::ostream& out) {
  const RunConfig config = effective_config(o);
  const auto records = load_records(o.records, config.entity_schema);
  const auto pairs = margin_pairs(records);
  json doc = {{"n", records.size()}, {"raw", reliability_to_json(expected_calibration_error(pairs, config.ece_bins))}};
  if (!o.model.empty()) {
    const auto model = load_calibrator(o.model);
    doc["calibrated"] = reliability_to_json(expected_calibration_error(calibrated_pairs(model, pairs), config.ece_bins));
  }
  emit_json(doc, out);
  return kOk;
}

int cmd_serve(const Options& o, std::istream& in, std::ostream& out) {
  const RoutingPolicy policy = load_policy(o.policies.front());
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    json reply;
    try {
      const TokenRequest request = parse_token_request(line);
      const double raw = policy.raw_signal(request.tokens);
      const double score = policy.score(request.tokens);
      reply = {{"id", request.id}, {"score", raw}};
      if (policy.source == ScoreSource::CalibratedP) reply["p_hat"] = score;
      reply["decision"] = policy.decide(score) == ModelSide::Small ? "small" : "large";
    } catch (const Error& e) {
      reply = {{"line", number}, {"error", e.what()}};
    }
    out << reply.dump() << '\n' << std::flush;
  }
  return kOk;
}

int cmd_verify(const Options& o, std::ostream& out) {
  VerifyOptions options;
  options.seed = o.seed;
  options.quick = o.quick;
  options.inject_interpolating_predictor = o.inject_fault;
  bool ok = true;
  for (const auto& result : run_verify(options)) {
    ok = ok && result.passed;
    out << property_to_json(result).dump() << '\n';
  }
  return ok ? kOk : kPropertyFailure;
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage: return kUsage;
    case ErrorKind::Io: return kIo;
    default: return kValidation;
  }
}

void report_error(std::ostream& err, const std::string& kind, const std::string& message) {
  err << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Calibrated two-model cascade router", "cascade_router"};
  app.require_subcommand(1, 1);

  auto add_records = [&](CLI::App* sub, const char* what) {
    sub->add_option("--records", o.records, what)->required();
  };
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run configuration JSON");
  };
  auto add_seed = [&](CLI::App* sub) { o.seed_flag.push_back(sub->add_option("--seed", o.seed, "RNG seed override")); };
  auto add_cost = [&](CLI::App* sub) {
    o.cost_flag.push_back(sub->add_option("--cost-ratio", o.cost_ratio, "Large/small cost ratio (c_s = 1)"));
  };

  auto* calibrate = app.add_subcommand("calibrate", "Fit the calibration map on calibration records");
  add_records(calibrate, "Calibration records (JSONL)");
  add_config(calibrate);
  calibrate->add_option("--out", o.out, "Model output path")->required();
  o.bins_flag.push_back(calibrate->add_option("--bins", o.bins, "ECE bin count"));
  calibrate->add_option("--method", o.method, "Calibrator family")
      ->check(CLI::IsMember({"isotonic", "temperature"}));

  auto* select = app.add_subcommand("select", "Choose the threshold on validation records");
  add_records(select, "Validation records (JSONL)");
  add_config(select);
  select->add_option("--model", o.model, "Calibration model for the calibrated router");
  select->add_option("--out", o.out, "Policy output path");
  o.tau_flag.push_back(select->add_option("--tau", o.tau, "Accuracy target (micro-F1)"));
  add_cost(select);
  select->add_option("--baseline", o.baseline, "Router family")
      ->check(CLI::IsMember({"ucci", "entropy", "conformal", "frugal"}));
  select->add_option("--calibration-records", o.calibration_records, "Calibration records (conformal router)");

  auto* eval = app.add_subcommand("eval", "Evaluate policies on test records");
  add_records(eval, "Test records (JSONL)");
  add_config(eval);
  eval->add_option("--policy", o.policies, "Policy file (repeatable)")->required();
  o.bootstrap_flag.push_back(eval->add_option("--bootstrap", o.bootstrap, "Bootstrap resamples (0 disables)"));
  add_seed(eval);
  add_cost(eval);

  auto* sweep = app.add_subcommand("sweep", "Emit the cost/accuracy curve as CSV");
  add_records(sweep, "Records (JSONL)");
  add_config(sweep);
  auto* sweep_policy = sweep->add_option("--policy", o.policies, "Policy whose score source to sweep");
  sweep->add_option("--signal", o.signal, "Raw signal to sweep")
      ->check(CLI::IsMember({"margin", "entropy", "maxprob"}))
      ->excludes(sweep_policy);
  sweep->add_option("--out", o.out, "CSV output path (default: stdout)");
  add_cost(sweep);

  auto* synth = app.add_subcommand("synth", "Generate synthetic records");
  synth->add_option("--spec", o.spec, "Synthetic spec JSON (default: matched workload)");
  o.n_flag.push_back(synth->add_option("--n", o.n, "Record count override"));
  add_seed(synth);
  add_config(synth);
  auto* synth_out = synth->add_option("--out", o.out, "Records output path (default: stdout)");
  synth->add_option("--split-prefix", o.split_prefix, "Write PREFIX.{calibration,validation,test}.jsonl")
      ->excludes(synth_out);

  auto* report = app.add_subcommand("report", "Reliability tables before and after calibration");
  add_records(report, "Records (JSONL)");
  add_config(report);
  report->add_option("--model", o.model, "Calibration model");
  o.bins_flag.push_back(report->add_option("--bins", o.bins, "ECE bin count"));

  auto* serve = app.add_subcommand("serve", "Route {id, tokens} requests from stdin, one JSON line each");
  serve->add_option("--policy", o.policies, "Policy file")->required()->expected(1);

  auto* verify = app.add_subcommand("verify", "Run the oracle property suites");
  add_seed(verify);
  verify->add_flag("--quick", o.quick, "Smaller grids");
  verify->add_flag("--inject-fault", o.inject_fault, "Swap in an interpolating predictor");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    report_error(err, "usage", e.what());
    return kUsage;
  }

  try {
    if (calibrate->parsed()) return cmd_calibrate(o, out);
    if (select->parsed()) return cmd_select(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    if (sweep->parsed()) return cmd_sweep(o, out);
    if (synth->parsed()) return cmd_synth(o, out);
    if (report->parsed()) return cmd_report(o, out);
    if (serve->parsed()) return cmd_serve(o, in, out);
    if (verify->parsed()) return cmd_verify(o, out);
  } catch (const Error& e) {
    report_error(err, to_string(e.kind()), e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return kValidation;
  }
  return kUsage;
}

}  // namespace cascade::cli
