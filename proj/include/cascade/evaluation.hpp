#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cascade/datamodel.hpp"
#include "cascade/routing.hpp"
#include "json.hpp"

namespace cascade {

// 2 TP / (2 TP + FP + FN); 0 when the denominator is 0.
[[nodiscard]] double micro_f1(const MatchCounts& counts) noexcept;
[[nodiscard]] double micro_f1(std::span<const MatchCounts> counts) noexcept;

struct CascadeReport {
  std::string policy;
  double total_cost = 0.0;
  double micro_f1 = 0.0;
  double escalation_fraction = 0.0;
  std::map<std::string, double> per_entity_f1;  // types with no support are omitted
  std::size_t n = 0;
  std::size_t escalated = 0;
  MatchCounts counts;

  bool operator==(const CascadeReport&) const = default;
};

// Uses the stored output of whichever model each decision selects.
[[nodiscard]] CascadeReport evaluate_decisions(std::span<const InferenceRecord> records,
                                               std::span<const ModelSide> decisions, const CostModel& cost,
                                               std::span<const std::string> schema, std::string descriptor);

[[nodiscard]] CascadeReport evaluate_cascade(const RoutingPolicy& policy, std::span<const InferenceRecord> records,
                                             const CostModel& cost, std::span<const std::string> schema);

[[nodiscard]] CascadeReport evaluate_single_model(std::span<const InferenceRecord> records, ModelSide side,
                                                  const CostModel& cost, std::span<const std::string> schema,
                                                  std::string descriptor);

[[nodiscard]] std::string describe(const RoutingPolicy& policy);

[[nodiscard]] std::map<std::string, double> per_entity_report(std::span<const InferenceRecord> records,
                                                              std::span<const ModelSide> decisions,
                                                              std::span<const std::string> schema);

struct ParetoPoint {
  double threshold = 0.0;
  double cost = 0.0;
  double micro_f1 = 0.0;
  double escalation_fraction = 0.0;
};

struct ParetoCurve {
  std::vector<ParetoPoint> points;  // ascending cost; one point per distinct decision set
};

[[nodiscard]] ParetoCurve pareto_sweep(std::span<const InferenceRecord> records, const RoutingPolicy& prototype,
                                       const CostModel& cost);
[[nodiscard]] ParetoCurve pareto_sweep(std::span<const RecordOutcome> outcomes, std::span<const double> scores,
                                       Direction direction, const CostModel& cost);

// Best-F1 point whose cost does not exceed `budget`.
[[nodiscard]] std::optional<ParetoPoint> best_under_budget(const ParetoCurve& curve, double budget);
// Cheapest point reaching `target` F1.
[[nodiscard]] std::optional<ParetoPoint> cheapest_reaching(const ParetoCurve& curve, double target);

[[nodiscard]] std::string pareto_to_csv(const ParetoCurve& curve);

enum class BootstrapStatistic { Cost, MicroF1, CostSavingVsLarge };

[[nodiscard]] std::string_view to_string(BootstrapStatistic statistic) noexcept;

struct BootstrapCI {
  double point = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double level = 0.95;
  int resamples = 0;
  std::uint64_t seed = 0;

  bool operator==(const BootstrapCI&) const = default;
};

// Value of `statistic` for records routed by `decisions`.
[[nodiscard]] double cascade_statistic(std::span<const RecordOutcome> outcomes, std::span<const ModelSide> decisions,
                                       BootstrapStatistic statistic, const CostModel& cost);

// Percentile bootstrap over records: resample with replacement, recompute the
// statistic on the routed outputs, report the (1-level)/2 and (1+level)/2
// percentiles. Each resample draws from its own seed_seq{seed, r} stream.
[[nodiscard]] BootstrapCI bootstrap_ci(std::span<const RecordOutcome> outcomes, std::span<const ModelSide> decisions,
                                       BootstrapStatistic statistic, const CostModel& cost, int resamples,
                                       std::uint64_t seed, double level = 0.95);
[[nodiscard]] BootstrapCI bootstrap_ci(std::span<const InferenceRecord> records, const RoutingPolicy& policy,
                                       BootstrapStatistic statistic, const CostModel& cost, int resamples,
                                       std::uint64_t seed, double level = 0.95);

struct CostSensitivityRow {
  double ratio = 0.0;
  double cost = 0.0;
  double saving_vs_large = 0.0;
};

// Re-prices fixed decisions at c_s = 1, c_l = ratio.
[[nodiscard]] std::vector<CostSensitivityRow> cost_sensitivity(double escalation_fraction,
                                                               std::span<const double> ratios);

struct AssumptionDiagnostic {
  double f1_large_on_escalated = 0.0;
  double f1_large_on_all = 0.0;
  double gap = 0.0;  // all - escalated
};

// Throws DiagnosticUndefined when nothing was escalated.
[[nodiscard]] AssumptionDiagnostic assumption_ii_diagnostic(std::span<const InferenceRecord> records,
                                                            std::span<const ModelSide> decisions);

[[nodiscard]] nlohmann::json report_to_json(const CascadeReport& report);
[[nodiscard]] nlohmann::json bootstrap_to_json(const BootstrapCI& ci);

}  // namespace cascade
