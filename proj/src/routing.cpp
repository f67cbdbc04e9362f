#include "cascade/routing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "cascade/error.hpp"
#include "cascade/evaluation.hpp"
#include "cascade/uncertainty.hpp"

namespace cascade {

using nlohmann::json;

std::string_view to_string(ScoreSource source) noexcept {
  switch (source) {
    case ScoreSource::CalibratedP: return "calibrated_p";
    case ScoreSource::RawMargin: return "raw_margin";
    case ScoreSource::MeanEntropy: return "mean_entropy";
    case ScoreSource::MeanMaxProb: return "mean_max_prob";
  }
  return "unknown";
}

std::string_view to_string(Direction direction) noexcept {
  return direction == Direction::EscalateIfAbove ? "above" : "below";
}

ScoreSource parse_score_source(std::string_view name) {
  if (name == "calibrated_p") return ScoreSource::CalibratedP;
  if (name == "raw_margin") return ScoreSource::RawMargin;
  if (name == "mean_entropy") return ScoreSource::MeanEntropy;
  if (name == "mean_max_prob") return ScoreSource::MeanMaxProb;
  throw Error(ErrorKind::Validation, "unknown score source '" + std::string(name) + "'");
}

Direction parse_direction(std::string_view name) {
  if (name == "above") return Direction::EscalateIfAbove;
  if (name == "below") return Direction::EscalateIfBelow;
  throw Error(ErrorKind::Validation, "unknown direction '" + std::string(name) + "'");
}

Direction natural_direction(ScoreSource source) noexcept {
  return source == ScoreSource::MeanMaxProb ? Direction::EscalateIfBelow : Direction::EscalateIfAbove;
}

void RoutingPolicy::validate() const {
  if (!std::isfinite(threshold)) throw Error(ErrorKind::Validation, "policy threshold must be finite");
  if (direction != natural_direction(source)) {
    throw Error(ErrorKind::Validation, "policy direction '" + std::string(to_string(direction)) +
                                           "' does not match score source '" + std::string(to_string(source)) + "'");
  }
  if (source == ScoreSource::CalibratedP && !calibration) {
    throw Error(ErrorKind::Validation, "calibrated_p policy requires a calibration model");
  }
}

double RoutingPolicy::raw_signal(std::span<const TokenStats> tokens) const {
  switch (source) {
    case ScoreSource::CalibratedP:
    case ScoreSource::RawMargin: return margin_uncertainty(tokens);
    case ScoreSource::MeanEntropy: return mean_entropy(tokens);
    case ScoreSource::MeanMaxProb: return mean_max_prob_confidence(tokens);
  }
  return 0.0;
}

double RoutingPolicy::score(std::span<const TokenStats> tokens) const {
  const double raw = raw_signal(tokens);
  if (source == ScoreSource::CalibratedP) return calibrate(*calibration, raw);
  return raw;
}

ModelSide RoutingPolicy::decide(double value) const noexcept {
  if (direction == Direction::EscalateIfAbove) return value <= threshold ? ModelSide::Small : ModelSide::Large;
  return value <= threshold ? ModelSide::Large : ModelSide::Small;
}

ModelSide route(const RoutingPolicy& policy, const InferenceRecord& record) {
  try {
    return policy.decide(policy.score(record.small_tokens));
  } catch (const Error& e) {
    throw Error(e.kind(), "record '" + record.id + "': " + e.what());
  }
}

std::vector<ModelSide> route_all(const RoutingPolicy& policy, std::span<const InferenceRecord> records) {
  std::vector<ModelSide> decisions;
  decisions.reserve(records.size());
  for (const auto& record : records) decisions.push_back(route(policy, record));
  return decisions;
}

// Raw margin lies in [0, 1]; thresholds beyond either end fix the decision.
RoutingPolicy keep_everything_policy() {
  return RoutingPolicy{ScoreSource::RawMargin, 2.0, Direction::EscalateIfAbove, std::nullopt};
}

RoutingPolicy escalate_everything_policy() {
  return RoutingPolicy{ScoreSource::RawMargin, -1.0, Direction::EscalateIfAbove, std::nullopt};
}

json policy_to_json(const RoutingPolicy& policy) {
  json doc = {{"score", std::string(to_string(policy.source))},
              {"direction", std::string(to_string(policy.direction))},
              {"threshold", policy.threshold}};
  if (policy.calibration) doc["calibration_model"] = calibrator_to_json(*policy.calibration);
  return doc;
}

RoutingPolicy policy_from_json(const json& doc) {
  if (!doc.is_object()) throw Error(ErrorKind::Validation, "policy must be a JSON object");
  for (const auto& [key, _] : doc.items()) {
    if (key != "score" && key != "direction" && key != "threshold" && key != "calibration_model") {
      throw Error(ErrorKind::Validation, "policy: unknown key '" + key + "'");
    }
  }
  RoutingPolicy policy;
  try {
    policy.source = parse_score_source(doc.at("score").get<std::string>());
    policy.direction = parse_direction(doc.at("direction").get<std::string>());
    policy.threshold = doc.at("threshold").get<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Validation, std::string("policy: ") + e.what());
  }
  if (doc.contains("calibration_model")) policy.calibration = calibrator_from_json(doc["calibration_model"]);
  policy.validate();
  return policy;
}

RoutingPolicy load_policy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open policy file '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Parse, "policy file '" + path + "': " + e.what());
  }
  return policy_from_json(doc);
}

void save_policy(const std::string& path, const RoutingPolicy& policy) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot open '" + path + "' for writing");
  out << policy_to_json(policy).dump() << '\n';
}

RecordOutcome outcome_of(const InferenceRecord& record) {
  return {derive_match_counts(record, ModelSide::Small), derive_match_counts(record, ModelSide::Large)};
}

std::vector<RecordOutcome> outcomes_of(std::span<const InferenceRecord> records) {
  std::vector<RecordOutcome> out;
  out.reserve(records.size());
  for (const auto& record : records) out.push_back(outcome_of(record));
  return out;
}

std::vector<SweepPoint> threshold_sweep(std::span<const RecordOutcome> outcomes, std::span<const double> scores,
                                        Direction direction, const CostModel& cost) {
  if (outcomes.size() != scores.size()) throw Error(ErrorKind::Validation, "threshold_sweep: size mismatch");
  if (outcomes.empty()) throw Error(ErrorKind::Validation, "threshold_sweep: empty validation set");
  for (double s : scores) {
    if (!std::isfinite(s)) throw Error(ErrorKind::Validation, "threshold_sweep: non-finite score");
  }

  const bool above = direction == Direction::EscalateIfAbove;
  // Records in escalation order: most doubtful first.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return above ? scores[a] > scores[b] : scores[a] < scores[b];
  });

  MatchCounts counts;
  for (const auto& o : outcomes) counts += o.small;
  const std::size_t n = outcomes.size();

  std::vector<SweepPoint> points;
  points.reserve(n + 2);
  auto emit = [&](double threshold, std::size_t escalated) {
    points.push_back({threshold, escalated, cost.mean_cost(escalated, n), micro_f1(counts), counts});
  };

  const double first = scores[order.front()];
  const double last = scores[order.back()];
  // Nothing escalated: sentinel beyond the most doubtful score.
  emit(above ? first + 1.0 : first - 1.0, 0);

  std::size_t escalated = 0;
  std::size_t i = 0;
  if (above) {
    // theta = d keeps every score <= d; walk distinct values downward.
    while (i < n) {
      const double level = scores[order[i]];
      emit(level, escalated);
      while (i < n && scores[order[i]] == level) {
        counts += outcomes[order[i]].large - outcomes[order[i]].small;
        ++escalated;
        ++i;
      }
    }
    emit(last - 1.0, escalated);
  } else {
    // theta = c escalates every score <= c; walk distinct values upward.
    while (i < n) {
      const double level = scores[order[i]];
      while (i < n && scores[order[i]] == level) {
        counts += outcomes[order[i]].large - outcomes[order[i]].small;
        ++escalated;
        ++i;
      }
      emit(level, escalated);
    }
    emit(last + 1.0, escalated);
  }
  return points;
}

ThresholdChoice choose_threshold(std::span<const RecordOutcome> outcomes, std::span<const double> scores,
                                 Direction direction, const CostModel& cost, double tau) {
  const auto points = threshold_sweep(outcomes, scores, direction, cost);
  const SweepPoint* best_feasible = nullptr;
  const SweepPoint* best_any = &points.front();
  for (const auto& p : points) {
    if (p.micro_f1 > best_any->micro_f1) best_any = &p;
    if (p.micro_f1 >= tau) {
      if (best_feasible == nullptr || p.escalated < best_feasible->escalated ||
          (p.escalated == best_feasible->escalated && p.micro_f1 > best_feasible->micro_f1)) {
        best_feasible = &p;
      }
    }
  }
  if (best_feasible != nullptr) return {*best_feasible, true};
  return {*best_any, false};
}

namespace {

std::vector<double> policy_scores(std::span<const InferenceRecord> records, const RoutingPolicy& policy) {
  std::vector<double> scores;
  scores.reserve(records.size());
  for (const auto& record : records) {
    try {
      scores.push_back(policy.score(record.small_tokens));
    } catch (const Error& e) {
      throw Error(e.kind(), "record '" + record.id + "': " + e.what());
    }
  }
  return scores;
}

}  // namespace

SelectionResult select_threshold(std::span<const InferenceRecord> validation, const RoutingPolicy& prototype,
                                 const CostModel& cost, double tau) {
  if (validation.empty()) throw Error(ErrorKind::Validation, "select_threshold: empty validation set");
  const auto outcomes = outcomes_of(validation);
  const auto scores = policy_scores(validation, prototype);
  const auto choice = choose_threshold(outcomes, scores, prototype.direction, cost, tau);

  SelectionResult result;
  result.policy = prototype;
  result.policy.threshold = choice.point.threshold;
  result.validation_cost = choice.point.cost;
  result.validation_accuracy = choice.point.micro_f1;
  result.feasible = choice.feasible;
  return result;
}

SelectionResult select_calibrated(std::span<const InferenceRecord> validation, const Calibrator& model,
                                  const CostModel& cost, double tau) {
  RoutingPolicy prototype{ScoreSource::CalibratedP, 0.0, Direction::EscalateIfAbove, model};
  return select_threshold(validation, prototype, cost, tau);
}

SelectionResult build_frugal_baseline(std::span<const InferenceRecord> validation, const CostModel& cost, double tau) {
  RoutingPolicy prototype{ScoreSource::MeanMaxProb, 0.0, Direction::EscalateIfBelow, std::nullopt};
  return select_threshold(validation, prototype, cost, tau);
}

SelectionResult build_entropy_baseline(std::span<const InferenceRecord> validation, const CostModel& cost,
                                       double tau) {
  RoutingPolicy prototype{ScoreSource::MeanEntropy, 0.0, Direction::EscalateIfAbove, std::nullopt};
  return select_threshold(validation, prototype, cost, tau);
}

double conformal_quantile(std::span<const double> sorted_scores, double delta) {
  if (sorted_scores.empty()) throw Error(ErrorKind::Validation, "conformal_quantile: no scores");
  if (!(delta > 0.0 && delta < 1.0)) throw Error(ErrorKind::Validation, "conformal_quantile: delta must be in (0, 1)");
  const auto k = static_cast<double>(sorted_scores.size());
  // The tolerance keeps products such as 10 * 0.9 from rounding up a rank.
  double rank = std::ceil((k + 1.0) * (1.0 - delta) - 1e-9);
  rank = std::clamp(rank, 1.0, k);
  return sorted_scores[static_cast<std::size_t>(rank) - 1];
}

std::vector<double> default_miscoverage_grid() {
  std::vector<double> grid;
  for (int i = 1; i < 200; ++i) grid.push_back(i * 0.005);
  return grid;
}

SelectionResult select_conformal(std::span<const InferenceRecord> calibration,
                                 std::span<const InferenceRecord> validation, const CostModel& cost, double tau,
                                 std::span<const double> miscoverage_grid) {
  if (miscoverage_grid.empty()) throw Error(ErrorKind::Validation, "select_conformal: empty miscoverage grid");
  if (validation.empty()) throw Error(ErrorKind::Validation, "select_conformal: empty validation set");

  std::vector<double> correct_scores;
  for (const auto& record : calibration) {
    if (derive_correctness(record, ModelSide::Small) == 0) correct_scores.push_back(margin_uncertainty(record.small_tokens));
  }
  if (correct_scores.empty()) {
    throw Error(ErrorKind::Validation, "select_conformal: no calibration record with a correct small output");
  }
  std::sort(correct_scores.begin(), correct_scores.end());

  // Validation records sorted by u ascending, with suffix sums of the
  // escalation deltas so each alpha is evaluated by binary search.
  const auto outcomes = outcomes_of(validation);
  std::vector<double> u(validation.size());
  for (std::size_t i = 0; i < validation.size(); ++i) u[i] = margin_uncertainty(validation[i].small_tokens);
  std::vector<std::size_t> order(validation.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return u[a] < u[b]; });
  std::vector<double> sorted_u(order.size());
  std::vector<MatchCounts> suffix(order.size() + 1);
  for (std::size_t i = order.size(); i-- > 0;) {
    sorted_u[i] = u[order[i]];
    suffix[i] = suffix[i + 1] + (outcomes[order[i]].large - outcomes[order[i]].small);
  }
  MatchCounts small_total;
  for (const auto& o : outcomes) small_total += o.small;
  const std::size_t n = validation.size();

  struct Candidate {
    double delta;
    double alpha;
    std::size_t escalated;
    double f1;
  };
  std::optional<Candidate> best_feasible;
  std::optional<Candidate> best_any;
  for (double delta : miscoverage_grid) {
    const double alpha = conformal_quantile(correct_scores, delta);
    const auto first_above = static_cast<std::size_t>(
        std::distance(sorted_u.begin(), std::upper_bound(sorted_u.begin(), sorted_u.end(), alpha)));
    const Candidate c{delta, alpha, n - first_above, micro_f1(small_total + suffix[first_above])};
    if (!best_any || c.f1 > best_any->f1) best_any = c;
    if (c.f1 >= tau && (!best_feasible || c.escalated < best_feasible->escalated ||
                        (c.escalated == best_feasible->escalated && c.f1 > best_feasible->f1))) {
      best_feasible = c;
    }
  }

  const Candidate& chosen = best_feasible ? *best_feasible : *best_any;
  SelectionResult result;
  result.policy = RoutingPolicy{ScoreSource::RawMargin, chosen.alpha, Direction::EscalateIfAbove, std::nullopt};
  result.validation_cost = cost.mean_cost(chosen.escalated, n);
  result.validation_accuracy = chosen.f1;
  result.feasible = best_feasible.has_value();
  result.miscoverage = chosen.delta;
  return result;
}

json selection_to_json(const SelectionResult& result) {
  json doc = {{"policy", policy_to_json(result.policy)},
              {"threshold", result.policy.threshold},
              {"validation_cost", result.validation_cost},
              {"validation_accuracy", result.validation_accuracy},
              {"feasible", result.feasible}};
  if (result.miscoverage) doc["miscoverage"] = *result.miscoverage;
  return doc;
}

}  // namespace cascade
