#include "cascade/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "cascade/error.hpp"

namespace cascade {

using nlohmann::json;

double micro_f1(const MatchCounts& counts) noexcept {
  const std::int64_t denominator = 2 * counts.tp + counts.fp + counts.fn;
  if (denominator == 0) return 0.0;
  return static_cast<double>(2 * counts.tp) / static_cast<double>(denominator);
}

double micro_f1(std::span<const MatchCounts> counts) noexcept {
  MatchCounts total;
  for (const auto& c : counts) total += c;
  return micro_f1(total);
}

namespace {

void require_same_size(std::size_t records, std::size_t decisions) {
  if (records != decisions) throw Error(ErrorKind::Validation, "decision count does not match record count");
}

}  // namespace

std::map<std::string, double> per_entity_report(std::span<const InferenceRecord> records,
                                                std::span<const ModelSide> decisions,
                                                std::span<const std::string> schema) {
  require_same_size(records.size(), decisions.size());
  std::map<std::string, double> out;
  for (const auto& type : schema) {
    MatchCounts counts;
    for (std::size_t i = 0; i < records.size(); ++i) {
      counts += match_counts_for_type(output_of(records[i], decisions[i]), records[i].gold, type);
    }
    if (2 * counts.tp + counts.fp + counts.fn > 0) out.emplace(type, micro_f1(counts));
  }
  return out;
}

CascadeReport evaluate_decisions(std::span<const InferenceRecord> records, std::span<const ModelSide> decisions,
                                 const CostModel& cost, std::span<const std::string> schema, std::string descriptor) {
  require_same_size(records.size(), decisions.size());
  CascadeReport report;
  report.policy = std::move(descriptor);
  report.n = records.size();
  for (std::size_t i = 0; i < records.size(); ++i) {
    report.counts += derive_match_counts(records[i], decisions[i]);
    if (decisions[i] == ModelSide::Large) ++report.escalated;
  }
  report.micro_f1 = micro_f1(report.counts);
  report.total_cost = cost.mean_cost(report.escalated, report.n);
  report.escalation_fraction =
      report.n == 0 ? 0.0 : static_cast<double>(report.escalated) / static_cast<double>(report.n);
  report.per_entity_f1 = per_entity_report(records, decisions, schema);
  return report;
}

std::string describe(const RoutingPolicy& policy) {
  std::ostringstream out;
  out << to_string(policy.source) << ' ' << to_string(policy.direction) << ' ' << std::setprecision(17)
      << policy.threshold;
  return out.str();
}

CascadeReport evaluate_cascade(const RoutingPolicy& policy, std::span<const InferenceRecord> records,
                               const CostModel& cost, std::span<const std::string> schema) {
  const auto decisions = route_all(policy, records);
  return evaluate_decisions(records, decisions, cost, schema, describe(policy));
}

CascadeReport evaluate_single_model(std::span<const InferenceRecord> records, ModelSide side, const CostModel& cost,
                                    std::span<const std::string> schema, std::string descriptor) {
  const std::vector<ModelSide> decisions(records.size(), side);
  return evaluate_decisions(records, decisions, cost, schema, std::move(descriptor));
}

ParetoCurve pareto_sweep(std::span<const RecordOutcome> outcomes, std::span<const double> scores, Direction direction,
                         const CostModel& cost) {
  const auto sweep = threshold_sweep(outcomes, scores, direction, cost);
  const auto n = static_cast<double>(outcomes.size());
  ParetoCurve curve;
  for (const auto& p : sweep) {
    // Equal escalation counts along the sweep mean identical decision sets.
    if (!curve.points.empty() && static_cast<double>(p.escalated) / n == curve.points.back().escalation_fraction) {
      continue;
    }
    curve.points.push_back({p.threshold, p.cost, p.micro_f1, static_cast<double>(p.escalated) / n});
  }
  return curve;
}

ParetoCurve pareto_sweep(std::span<const InferenceRecord> records, const RoutingPolicy& prototype,
                         const CostModel& cost) {
  std::vector<double> scores;
  scores.reserve(records.size());
  for (const auto& record : records) scores.push_back(prototype.score(record.small_tokens));
  const auto outcomes = outcomes_of(records);
  return pareto_sweep(outcomes, scores, prototype.direction, cost);
}

std::optional<ParetoPoint> best_under_budget(const ParetoCurve& curve, double budget) {
  std::optional<ParetoPoint> best;
  for (const auto& p : curve.points) {
    if (p.cost <= budget + 1e-12 && (!best || p.micro_f1 > best->micro_f1)) best = p;
  }
  return best;
}

std::optional<ParetoPoint> cheapest_reaching(const ParetoCurve& curve, double target) {
  for (const auto& p : curve.points) {
    if (p.micro_f1 >= target) return p;
  }
  return std::nullopt;
}

std::string pareto_to_csv(const ParetoCurve& curve) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "threshold,cost,micro_f1,escalation_fraction\n";
  for (const auto& p : curve.points) {
    out << p.threshold << ',' << p.cost << ',' << p.micro_f1 << ',' << p.escalation_fraction << '\n';
  }
  return out.str();
}

std::string_view to_string(BootstrapStatistic statistic) noexcept {
  switch (statistic) {
    case BootstrapStatistic::Cost: return "cost";
    case BootstrapStatistic::MicroF1: return "micro_f1";
    case BootstrapStatistic::CostSavingVsLarge: return "cost_saving_vs_large";
  }
  return "unknown";
}

double cascade_statistic(std::span<const RecordOutcome> outcomes, std::span<const ModelSide> decisions,
                         BootstrapStatistic statistic, const CostModel& cost) {
  require_same_size(outcomes.size(), decisions.size());
  std::size_t escalated = 0;
  MatchCounts counts;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const bool large = decisions[i] == ModelSide::Large;
    escalated += large ? 1 : 0;
    counts += large ? outcomes[i].large : outcomes[i].small;
  }
  switch (statistic) {
    case BootstrapStatistic::Cost: return cost.mean_cost(escalated, outcomes.size());
    case BootstrapStatistic::MicroF1: return micro_f1(counts);
    case BootstrapStatistic::CostSavingVsLarge:
      return 1.0 - cost.mean_cost(escalated, outcomes.size()) / cost.large_cost;
  }
  return 0.0;
}

namespace {

// Linear interpolation between order statistics.
double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.size() == 1) return sorted.front();
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

BootstrapCI bootstrap_ci(std::span<const RecordOutcome> outcomes, std::span<const ModelSide> decisions,
                         BootstrapStatistic statistic, const CostModel& cost, int resamples, std::uint64_t seed,
                         double level) {
  if (outcomes.empty()) throw Error(ErrorKind::Validation, "bootstrap_ci: empty test set");
  if (resamples < 1) throw Error(ErrorKind::Validation, "bootstrap_ci: resamples must be >= 1");
  if (!(level > 0.0 && level < 1.0)) throw Error(ErrorKind::Validation, "bootstrap_ci: level must be in (0, 1)");
  require_same_size(outcomes.size(), decisions.size());

  const std::size_t n = outcomes.size();
  std::vector<RecordOutcome> sample_outcomes(n);
  std::vector<ModelSide> sample_decisions(n);
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(resamples));
  for (int r = 0; r < resamples; ++r) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(r)};
    std::mt19937_64 rng(seq);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = pick(rng);
      sample_outcomes[i] = outcomes[j];
      sample_decisions[i] = decisions[j];
    }
    stats.push_back(cascade_statistic(sample_outcomes, sample_decisions, statistic, cost));
  }
  std::sort(stats.begin(), stats.end());

  BootstrapCI ci;
  ci.point = cascade_statistic(outcomes, decisions, statistic, cost);
  ci.lower = percentile(stats, (1.0 - level) / 2.0);
  ci.upper = percentile(stats, (1.0 + level) / 2.0);
  ci.level = level;
  ci.resamples = resamples;
  ci.seed = seed;
  return ci;
}

BootstrapCI bootstrap_ci(std::span<const InferenceRecord> records, const RoutingPolicy& policy,
                         BootstrapStatistic statistic, const CostModel& cost, int resamples, std::uint64_t seed,
                         double level) {
  const auto decisions = route_all(policy, records);
  const auto outcomes = outcomes_of(records);
  return bootstrap_ci(outcomes, decisions, statistic, cost, resamples, seed, level);
}

std::vector<CostSensitivityRow> cost_sensitivity(double escalation_fraction, std::span<const double> ratios) {
  if (!(escalation_fraction >= 0.0 && escalation_fraction <= 1.0)) {
    throw Error(ErrorKind::Validation, "cost_sensitivity: escalation fraction must lie in [0, 1]");
  }
  std::vector<CostSensitivityRow> rows;
  rows.reserve(ratios.size());
  for (double r : ratios) {
    if (!(r > 1.0) || !std::isfinite(r)) throw Error(ErrorKind::Validation, "cost_sensitivity: ratio must exceed 1");
    const double cost = (1.0 - escalation_fraction) + escalation_fraction * r;
    rows.push_back({r, cost, 1.0 - cost / r});
  }
  return rows;
}

AssumptionDiagnostic assumption_ii_diagnostic(std::span<const InferenceRecord> records,
                                              std::span<const ModelSide> decisions) {
  require_same_size(records.size(), decisions.size());
  MatchCounts escalated;
  MatchCounts all;
  bool any = false;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const MatchCounts c = derive_match_counts(records[i], ModelSide::Large);
    all += c;
    if (decisions[i] == ModelSide::Large) {
      escalated += c;
      any = true;
    }
  }
  if (!any) throw Error(ErrorKind::DiagnosticUndefined, "assumption diagnostic: no record was escalated");
  AssumptionDiagnostic out;
  out.f1_large_on_escalated = micro_f1(escalated);
  out.f1_large_on_all = micro_f1(all);
  out.gap = out.f1_large_on_all - out.f1_large_on_escalated;
  return out;
}

json report_to_json(const CascadeReport& report) {
  return {{"policy", report.policy},
          {"total_cost", report.total_cost},
          {"micro_f1", report.micro_f1},
          {"escalation_fraction", report.escalation_fraction},
          {"per_entity_f1", report.per_entity_f1},
          {"n", report.n},
          {"escalated", report.escalated},
          {"tp", report.counts.tp},
          {"fp", report.counts.fp},
          {"fn", report.counts.fn}};
}

json bootstrap_to_json(const BootstrapCI& ci) {
  return {{"point", ci.point}, {"lower", ci.lower},         {"upper", ci.upper},
          {"level", ci.level}, {"resamples", ci.resamples}, {"seed", ci.seed}};
}

}  // namespace cascade
