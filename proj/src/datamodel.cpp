#include "cascade/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include "cascade/error.hpp"
#include "json.hpp"

namespace cascade {

using nlohmann::json;

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Io: return "io";
    case ErrorKind::SignalUnavailable: return "signal_unavailable";
    case ErrorKind::FitDegenerate: return "fit_degenerate";
    case ErrorKind::InvalidSpec: return "invalid_spec";
    case ErrorKind::DiagnosticUndefined: return "diagnostic_undefined";
  }
  return "unknown";
}

std::string_view to_string(SplitName name) noexcept {
  switch (name) {
    case SplitName::Calibration: return "calibration";
    case SplitName::Validation: return "validation";
    case SplitName::Test: return "test";
  }
  return "unknown";
}

const EntityMap& output_of(const InferenceRecord& record, ModelSide side) noexcept {
  return side == ModelSide::Small ? record.small_output : record.large_output;
}

void CostModel::validate() const {
  if (!std::isfinite(small_cost) || !std::isfinite(large_cost) || !(small_cost > 0.0) ||
      !(large_cost > small_cost)) {
    throw Error(ErrorKind::Validation, "cost model requires large_cost > small_cost > 0");
  }
}

double CostModel::mean_cost(std::size_t escalated, std::size_t total) const noexcept {
  if (total == 0) return 0.0;
  const auto kept = static_cast<double>(total - escalated);
  return (kept * small_cost + static_cast<double>(escalated) * large_cost) / static_cast<double>(total);
}

void RunConfig::validate() const {
  cost_model.validate();
  if (!(accuracy_target >= 0.0 && accuracy_target <= 1.0)) {
    throw Error(ErrorKind::Validation, "accuracy_target must lie in [0, 1]");
  }
  if (ece_bins < 2) throw Error(ErrorKind::Validation, "ece_bins must be >= 2");
  if (bootstrap_resamples < 1) throw Error(ErrorKind::Validation, "bootstrap_resamples must be >= 1");
  if (entity_schema.empty()) throw Error(ErrorKind::Validation, "entity_schema must not be empty");
  std::unordered_set<std::string> seen;
  for (const auto& name : entity_schema) {
    if (name.empty()) throw Error(ErrorKind::Validation, "entity_schema contains an empty name");
    if (!seen.insert(name).second) {
      throw Error(ErrorKind::Validation, "entity_schema repeats '" + name + "'");
    }
  }
}

std::vector<std::string> default_entity_schema() {
  return {"camera", "lens", "aperture", "shutter_speed", "iso", "focal_length"};
}

RunConfig default_config() {
  RunConfig config;
  config.entity_schema = default_entity_schema();
  return config;
}

RunConfig parse_config(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Parse, std::string("config: ") + e.what());
  }
  if (!doc.is_object()) throw Error(ErrorKind::Parse, "config: expected a JSON object");

  static const std::unordered_set<std::string> known = {
      "entity_schema", "small_cost", "large_cost", "accuracy_target", "ece_bins", "bootstrap_resamples", "seed"};
  for (const auto& [key, _] : doc.items()) {
    if (!known.contains(key)) throw Error(ErrorKind::Validation, "config: unknown key '" + key + "'");
  }

  RunConfig config = default_config();
  try {
    if (doc.contains("entity_schema")) config.entity_schema = doc.at("entity_schema").get<std::vector<std::string>>();
    if (doc.contains("small_cost")) config.cost_model.small_cost = doc.at("small_cost").get<double>();
    if (doc.contains("large_cost")) config.cost_model.large_cost = doc.at("large_cost").get<double>();
    if (doc.contains("accuracy_target")) config.accuracy_target = doc.at("accuracy_target").get<double>();
    if (doc.contains("ece_bins")) config.ece_bins = doc.at("ece_bins").get<int>();
    if (doc.contains("bootstrap_resamples")) config.bootstrap_resamples = doc.at("bootstrap_resamples").get<int>();
    if (doc.contains("seed")) config.rng_seed = doc.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Validation, std::string("config: ") + e.what());
  }
  config.validate();
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open config file '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::string config_to_json(const RunConfig& config) {
  json doc = {
      {"entity_schema", config.entity_schema},
      {"small_cost", config.cost_model.small_cost},
      {"large_cost", config.cost_model.large_cost},
      {"accuracy_target", config.accuracy_target},
      {"ece_bins", config.ece_bins},
      {"bootstrap_resamples", config.bootstrap_resamples},
      {"seed", config.rng_seed},
  };
  return doc.dump();
}

namespace {

[[noreturn]] void invalid(const std::string& id, const std::string& rule) {
  throw Error(ErrorKind::Validation, "record '" + id + "': " + rule);
}

void validate_entities(const std::string& id, const char* which, const EntityMap& entities,
                       std::span<const std::string> schema) {
  for (const auto& [type, value] : entities) {
    if (std::find(schema.begin(), schema.end(), type) == schema.end()) {
      invalid(id, std::string(which) + " has unknown entity type '" + type + "'");
    }
    if (value.empty()) invalid(id, std::string(which) + "." + type + " is an empty string");
  }
}

// Generated records build p1 + p2 from halves of a sum; allow that rounding.
constexpr double kMassTolerance = 1e-12;

EntityMap parse_entities(const json& node, const std::string& id, const char* which) {
  if (!node.is_object()) invalid(id, std::string(which) + " must be an object");
  EntityMap out;
  for (const auto& [key, value] : node.items()) {
    if (!value.is_string()) invalid(id, std::string(which) + "." + key + " must be a string");
    out.emplace(key, value.get<std::string>());
  }
  return out;
}

std::vector<TokenStats> parse_tokens(const json& tokens, const std::string& id) {
  if (!tokens.is_array()) invalid(id, "tokens must be an array");
  std::vector<TokenStats> out;
  out.reserve(tokens.size());
  for (const json& tok : tokens) {
    if (!tok.is_object() || !tok.contains("p1") || !tok.contains("p2") || !tok["p1"].is_number() ||
        !tok["p2"].is_number()) {
      invalid(id, "each token needs numeric p1 and p2");
    }
    for (const auto& [key, _] : tok.items()) {
      if (key != "p1" && key != "p2" && key != "entropy") invalid(id, "unknown token key '" + key + "'");
    }
    TokenStats stats{tok["p1"].get<double>(), tok["p2"].get<double>(), std::nullopt};
    if (tok.contains("entropy") && !tok["entropy"].is_null()) {
      if (!tok["entropy"].is_number()) invalid(id, "token entropy must be numeric");
      stats.entropy = tok["entropy"].get<double>();
    }
    out.push_back(stats);
  }
  return out;
}

json entities_to_json(const EntityMap& entities) {
  json node = json::object();
  for (const auto& [type, value] : entities) node[type] = value;
  return node;
}

}  // namespace

void validate_record(const InferenceRecord& record, std::span<const std::string> schema) {
  const std::string& id = record.id;
  if (id.empty()) invalid(id, "id must be a non-empty string");
  if (record.small_tokens.empty()) invalid(id, "tokens must be non-empty");
  if (record.small_tokens.size() > kMaxTokens) {
    invalid(id, "tokens exceed the maximum length of " + std::to_string(kMaxTokens));
  }
  for (std::size_t t = 0; t < record.small_tokens.size(); ++t) {
    const TokenStats& tok = record.small_tokens[t];
    const std::string where = "token " + std::to_string(t) + ": ";
    if (!std::isfinite(tok.top1_prob) || !std::isfinite(tok.top2_prob)) invalid(id, where + "non-finite probability");
    if (tok.top2_prob < 0.0) invalid(id, where + "p2 must be >= 0");
    if (tok.top2_prob > tok.top1_prob) invalid(id, where + "p2 must not exceed p1");
    if (tok.top1_prob > 1.0) invalid(id, where + "p1 must be <= 1");
    if (tok.top1_prob + tok.top2_prob > 1.0 + kMassTolerance) invalid(id, where + "p1 + p2 must be <= 1");
    if (tok.entropy && (!std::isfinite(*tok.entropy) || *tok.entropy < 0.0)) {
      invalid(id, where + "entropy must be finite and >= 0");
    }
  }
  validate_entities(id, "small", record.small_output, schema);
  validate_entities(id, "large", record.large_output, schema);
  validate_entities(id, "gold", record.gold, schema);
}

InferenceRecord parse_record(std::string_view json_line, std::span<const std::string> schema) {
  json doc;
  try {
    doc = json::parse(json_line);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Parse, e.what());
  }
  if (!doc.is_object()) throw Error(ErrorKind::Parse, "record must be a JSON object");

  InferenceRecord record;
  if (!doc.contains("id") || !doc["id"].is_string()) throw Error(ErrorKind::Validation, "record: missing string 'id'");
  record.id = doc["id"].get<std::string>();
  const std::string& id = record.id;

  static const std::unordered_set<std::string> known = {"id", "tokens", "small", "large", "gold"};
  for (const auto& [key, _] : doc.items()) {
    if (!known.contains(key)) invalid(id, "unknown key '" + key + "'");
  }
  for (const char* key : {"tokens", "small", "large", "gold"}) {
    if (!doc.contains(key)) invalid(id, std::string("missing key '") + key + "'");
  }

  record.small_tokens = parse_tokens(doc["tokens"], id);
  record.small_output = parse_entities(doc["small"], id, "small");
  record.large_output = parse_entities(doc["large"], id, "large");
  record.gold = parse_entities(doc["gold"], id, "gold");

  validate_record(record, schema);
  return record;
}

TokenRequest parse_token_request(std::string_view json_line) {
  json doc;
  try {
    doc = json::parse(json_line);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Parse, e.what());
  }
  if (!doc.is_object()) throw Error(ErrorKind::Parse, "request must be a JSON object");
  if (!doc.contains("id") || !doc["id"].is_string()) throw Error(ErrorKind::Validation, "request: missing string 'id'");
  TokenRequest request;
  request.id = doc["id"].get<std::string>();
  for (const auto& [key, _] : doc.items()) {
    if (key != "id" && key != "tokens") invalid(request.id, "unknown key '" + key + "'");
  }
  if (!doc.contains("tokens")) invalid(request.id, "missing key 'tokens'");
  request.tokens = parse_tokens(doc["tokens"], request.id);
  // Token rules are the record rules; entity maps are empty.
  InferenceRecord probe;
  probe.id = request.id;
  probe.small_tokens = request.tokens;
  validate_record(probe, {});
  return request;
}

std::string serialize_record(const InferenceRecord& record) {
  json tokens = json::array();
  for (const TokenStats& tok : record.small_tokens) {
    json node = {{"p1", tok.top1_prob}, {"p2", tok.top2_prob}};
    if (tok.entropy) node["entropy"] = *tok.entropy;
    tokens.push_back(std::move(node));
  }
  json doc = {
      {"id", record.id},
      {"tokens", std::move(tokens)},
      {"small", entities_to_json(record.small_output)},
      {"large", entities_to_json(record.large_output)},
      {"gold", entities_to_json(record.gold)},
  };
  return doc.dump();
}

std::vector<InferenceRecord> read_records(std::istream& in, std::span<const std::string> schema) {
  std::vector<InferenceRecord> records;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    try {
      records.push_back(parse_record(line, schema));
    } catch (const Error& e) {
      throw Error(e.kind(), "line " + std::to_string(line_number) + ": " + e.what());
    }
    if (!ids.insert(records.back().id).second) {
      throw Error(ErrorKind::Validation,
                  "line " + std::to_string(line_number) + ": record '" + records.back().id + "': duplicate id");
    }
  }
  return records;
}

std::vector<InferenceRecord> load_records(const std::string& path, std::span<const std::string> schema) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open records file '" + path + "'");
  return read_records(in, schema);
}

void write_records(std::ostream& out, std::span<const InferenceRecord> records) {
  for (const auto& record : records) out << serialize_record(record) << '\n';
}

void save_records(const std::string& path, std::span<const InferenceRecord> records) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot open '" + path + "' for writing");
  write_records(out, records);
  if (!out) throw Error(ErrorKind::Io, "write failed for '" + path + "'");
}

Splits split_dataset(std::span<const InferenceRecord> records, const SplitFractions& fractions, std::uint64_t seed) {
  if (records.empty()) throw Error(ErrorKind::Validation, "split_dataset: empty input");
  const double sum = fractions.calibration + fractions.validation + fractions.test;
  if (!(fractions.calibration > 0.0 && fractions.validation > 0.0 && fractions.test > 0.0) ||
      std::abs(sum - 1.0) > 1e-9) {
    throw Error(ErrorKind::Validation, "split_dataset: fractions must be positive and sum to 1");
  }

  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto n = static_cast<double>(records.size());
  // The epsilon absorbs products like 0.3 * 75000 landing just below an integer.
  const auto n_cal = static_cast<std::size_t>(std::floor(n * fractions.calibration + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(n * fractions.validation + 1e-9));

  Splits splits;
  for (std::size_t i = 0; i < order.size(); ++i) {
    DatasetSplit& target = i < n_cal ? splits.calibration : (i < n_cal + n_val ? splits.validation : splits.test);
    target.records.push_back(records[order[i]]);
  }
  return splits;
}

int derive_correctness(const InferenceRecord& record, ModelSide side) {
  return output_of(record, side) == record.gold ? 0 : 1;
}

MatchCounts match_counts_for_type(const EntityMap& predicted, const EntityMap& gold, const std::string& entity_type) {
  const auto p = predicted.find(entity_type);
  const auto g = gold.find(entity_type);
  const bool has_p = p != predicted.end();
  const bool has_g = g != gold.end();
  MatchCounts counts;
  if (has_p && has_g) {
    if (p->second == g->second) {
      counts.tp = 1;
    } else {
      counts.fp = 1;
      counts.fn = 1;
    }
  } else if (has_p) {
    counts.fp = 1;
  } else if (has_g) {
    counts.fn = 1;
  }
  return counts;
}

MatchCounts match_counts(const EntityMap& predicted, const EntityMap& gold) {
  MatchCounts counts;
  // Walk the union of keys of two sorted maps.
  auto p = predicted.begin();
  auto g = gold.begin();
  while (p != predicted.end() || g != gold.end()) {
    if (g == gold.end() || (p != predicted.end() && p->first < g->first)) {
      ++counts.fp;
      ++p;
    } else if (p == predicted.end() || g->first < p->first) {
      ++counts.fn;
      ++g;
    } else {
      if (p->second == g->second) {
        ++counts.tp;
      } else {
        ++counts.fp;
        ++counts.fn;
      }
      ++p;
      ++g;
    }
  }
  return counts;
}

MatchCounts derive_match_counts(const InferenceRecord& record, ModelSide side) {
  return match_counts(output_of(record, side), record.gold);
}

}  // namespace cascade
