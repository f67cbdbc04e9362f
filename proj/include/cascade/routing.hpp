#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cascade/calibration.hpp"
#include "cascade/datamodel.hpp"
#include "json.hpp"

namespace cascade {

enum class ScoreSource { CalibratedP, RawMargin, MeanEntropy, MeanMaxProb };

// EscalateIfAbove keeps the small model when score <= threshold.
// EscalateIfBelow escalates when score <= threshold (boundary goes to large).
enum class Direction { EscalateIfAbove, EscalateIfBelow };

[[nodiscard]] std::string_view to_string(ScoreSource source) noexcept;
[[nodiscard]] std::string_view to_string(Direction direction) noexcept;
[[nodiscard]] ScoreSource parse_score_source(std::string_view name);
[[nodiscard]] Direction parse_direction(std::string_view name);
[[nodiscard]] Direction natural_direction(ScoreSource source) noexcept;

struct RoutingPolicy {
  ScoreSource source = ScoreSource::CalibratedP;
  double threshold = 0.0;
  Direction direction = Direction::EscalateIfAbove;
  std::optional<Calibrator> calibration;  // required for CalibratedP

  void validate() const;
  // Raw signal for the policy's source (u for CalibratedP).
  [[nodiscard]] double raw_signal(std::span<const TokenStats> tokens) const;
  // The value compared against the threshold.
  [[nodiscard]] double score(std::span<const TokenStats> tokens) const;
  [[nodiscard]] ModelSide decide(double score) const noexcept;
};

[[nodiscard]] ModelSide route(const RoutingPolicy& policy, const InferenceRecord& record);
[[nodiscard]] std::vector<ModelSide> route_all(const RoutingPolicy& policy, std::span<const InferenceRecord> records);

[[nodiscard]] RoutingPolicy keep_everything_policy();
[[nodiscard]] RoutingPolicy escalate_everything_policy();

[[nodiscard]] nlohmann::json policy_to_json(const RoutingPolicy& policy);
[[nodiscard]] RoutingPolicy policy_from_json(const nlohmann::json& doc);
[[nodiscard]] RoutingPolicy load_policy(const std::string& path);
void save_policy(const std::string& path, const RoutingPolicy& policy);

// Match counts of both models against gold, precomputed once per record.
struct RecordOutcome {
  MatchCounts small;
  MatchCounts large;
};

[[nodiscard]] RecordOutcome outcome_of(const InferenceRecord& record);
[[nodiscard]] std::vector<RecordOutcome> outcomes_of(std::span<const InferenceRecord> records);

// One candidate threshold of an exact sweep.
struct SweepPoint {
  double threshold = 0.0;
  std::size_t escalated = 0;
  double cost = 0.0;
  double micro_f1 = 0.0;
  MatchCounts counts;
};

// Candidates are the distinct scores plus one sentinel beyond each end,
// ordered from "escalate nothing" to "escalate everything".
[[nodiscard]] std::vector<SweepPoint> threshold_sweep(std::span<const RecordOutcome> outcomes,
                                                      std::span<const double> scores, Direction direction,
                                                      const CostModel& cost);

struct ThresholdChoice {
  SweepPoint point;
  bool feasible = false;
};

// Minimum-cost candidate with micro-F1 >= tau; ties on cost go to higher F1.
// With no feasible candidate, returns the F1-maximising one flagged infeasible.
[[nodiscard]] ThresholdChoice choose_threshold(std::span<const RecordOutcome> outcomes, std::span<const double> scores,
                                               Direction direction, const CostModel& cost, double tau);

struct SelectionResult {
  RoutingPolicy policy;
  double validation_cost = 0.0;
  double validation_accuracy = 0.0;
  bool feasible = false;
  std::optional<double> miscoverage;  // set by the conformal selector
};

// Sweeps thresholds for `prototype`'s score source/direction; the returned
// policy copies the prototype with the chosen threshold.
[[nodiscard]] SelectionResult select_threshold(std::span<const InferenceRecord> validation,
                                               const RoutingPolicy& prototype, const CostModel& cost, double tau);

[[nodiscard]] SelectionResult select_calibrated(std::span<const InferenceRecord> validation, const Calibrator& model,
                                                const CostModel& cost, double tau);
[[nodiscard]] SelectionResult build_frugal_baseline(std::span<const InferenceRecord> validation,
                                                    const CostModel& cost, double tau);
[[nodiscard]] SelectionResult build_entropy_baseline(std::span<const InferenceRecord> validation,
                                                     const CostModel& cost, double tau);

// Split-conformal quantile: the ceil((k+1)(1-delta))-th smallest of k scores,
// capped at the largest. `sorted_scores` must be ascending and non-empty.
[[nodiscard]] double conformal_quantile(std::span<const double> sorted_scores, double delta);

// 0.005, 0.010, ..., 0.995
[[nodiscard]] std::vector<double> default_miscoverage_grid();

// Nonconformity score is raw margin uncertainty of calibration records the
// small model got right; escalates u > alpha(delta).
[[nodiscard]] SelectionResult select_conformal(std::span<const InferenceRecord> calibration,
                                               std::span<const InferenceRecord> validation, const CostModel& cost,
                                               double tau, std::span<const double> miscoverage_grid);

[[nodiscard]] nlohmann::json selection_to_json(const SelectionResult& result);

}  // namespace cascade
