#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cascade/calibration.hpp"
#include "cascade/datamodel.hpp"
#include "cascade/routing.hpp"
#include "json.hpp"

namespace cascade {

// True probability that the small model is wrong given uncertainty u.
struct ErrorCurve {
  enum class Kind { Logistic, Constant };

  Kind kind = Kind::Logistic;
  double slope = 2.15;       // logistic: sigmoid(slope * u + intercept), slope > 0
  double intercept = -2.37;
  double level = 0.0;        // constant curve value

  [[nodiscard]] double operator()(double u) const noexcept;
};

// Entity type with its sampling weight and target per-type F1 for each model.
struct EntityProfile {
  std::string name;
  double weight = 1.0;
  double small_f1 = 1.0;
  double large_f1 = 1.0;
};

// Six photo-search entity types with per-type small/large targets; weights are
// solved so the pooled targets land on 0.847 / ~0.93.
[[nodiscard]] std::vector<EntityProfile> photo_entity_profile();

enum class LargeMode { Independent, DifficultyCorrelated };
enum class TailMode { None, Heavy };

struct SyntheticSpec {
  std::size_t n = 1000;
  double beta_a = 2.0;  // u ~ Beta(beta_a, beta_b)
  double beta_b = 5.0;
  ErrorCurve curve;
  double large_accuracy = 0.932;
  LargeMode large_mode = LargeMode::Independent;
  double correlation = 0.0;
  TailMode tail_mode = TailMode::None;
  double contamination = 0.0;     // fraction of records whose error rate ignores u
  double contaminant_error = 0.9;
  int tokens_per_record = 8;
  std::uint64_t seed = 0;
  std::vector<EntityProfile> entities = photo_entity_profile();
  std::string id_prefix = "q";

  // Throws Error(InvalidSpec).
  void validate() const;
  // E[error rate] over the u distribution, including contamination.
  [[nodiscard]] double mean_small_error() const;
};

// Logistic intercept so that E[sigmoid(slope * u + b)] = target under Beta(a, b).
[[nodiscard]] double intercept_for_mean_error(double slope, double beta_a, double beta_b, double target);

// Matched workload: small exact-match 0.847, large 0.932.
[[nodiscard]] SyntheticSpec matched_workload_spec(std::size_t n, std::uint64_t seed);

struct SyntheticDataset {
  std::vector<InferenceRecord> records;
  std::vector<double> uncertainty;
  std::vector<double> small_error_rate;
  std::vector<double> large_error_rate;
};

// Record i draws from its own stream seeded from (seed, i), so output is a
// pure function of the spec.
[[nodiscard]] SyntheticDataset generate(const SyntheticSpec& spec);

// (u, e) draws only, following the same per-record law as generate().
[[nodiscard]] std::vector<LabeledScore> draw_labeled_uncertainty(const SyntheticSpec& spec);

[[nodiscard]] nlohmann::json spec_to_json(const SyntheticSpec& spec);
[[nodiscard]] SyntheticSpec spec_from_json(const nlohmann::json& doc);
[[nodiscard]] SyntheticSpec load_spec(const std::string& path);

inline constexpr std::size_t kMaxOracleRecords = 20;

struct OracleResult {
  bool feasible = false;
  double min_cost = 0.0;
  double micro_f1 = 0.0;
  std::vector<bool> escalate;  // witness subset
};

// Exhaustive search over all 2^n escalation subsets (n <= 20): minimum cost
// with micro-F1 >= tau, ties to higher F1. Infeasible returns the best-F1 subset.
[[nodiscard]] OracleResult brute_force_optimal_policy(std::span<const RecordOutcome> outcomes, const CostModel& cost,
                                                      double tau);

// Same search restricted to subsets closed upward in score (a record is
// escalated whenever any record with a score >= its own is).
[[nodiscard]] OracleResult brute_force_upper_set_policy(std::span<const RecordOutcome> outcomes,
                                                        std::span<const double> scores, const CostModel& cost,
                                                        double tau);

// Least-squares non-decreasing fit by exhaustive search over contiguous
// partitions of the distinct scores (tie runs stay together). Returns one
// fitted value per input pair, in input order. Exponential; n <= 20.
[[nodiscard]] std::vector<double> brute_force_isotonic(std::span<const LabeledScore> pairs);

struct RateRow {
  std::size_t n = 0;
  double mean_ece = 0.0;
  double std_ece = 0.0;
};

struct RateResult {
  std::vector<RateRow> rows;
  double slope = 0.0;  // least-squares slope of log(mean ECE) on log(n)
};

struct RateExperimentConfig {
  SyntheticSpec spec;
  std::vector<std::size_t> n_grid{100, 1000, 10000, 100000};
  int trials = 10;
  std::size_t eval_n = 200000;
  int bins = 10;
};

// Fit isotonic on n draws, measure ECE on a fresh sample of eval_n draws.
[[nodiscard]] RateResult rate_experiment(const RateExperimentConfig& config);

struct CoverageRow {
  double delta = 0.0;
  double mean_coverage = 0.0;
};

// Fraction of fresh small-correct records with u <= alpha(delta), averaged over trials.
[[nodiscard]] std::vector<CoverageRow> conformal_coverage_experiment(const SyntheticSpec& spec, std::size_t n_cal,
                                                                     std::size_t n_test,
                                                                     std::span<const double> deltas, int trials);

struct FalsificationRow {
  double contamination = 0.0;
  double mean_gap = 0.0;
  double std_gap = 0.0;
  double min_gap = 0.0;
  int trials = 0;
};

struct FalsificationConfig {
  SyntheticSpec spec;  // contamination and tail mode are overridden per row
  std::vector<double> contaminations{0.0, 0.05, 0.15};
  int trials = 20;
  std::size_t n_cal = 5000;
  std::size_t n_eval = 5000;
  double tau = 0.91;
};

// Per instance: the calibrated threshold router and an oracle ranking by true
// error rate each escalate the fewest records whose expected exact-match
// accuracy (from the generator's true rates) reaches tau; gap = router - oracle cost.
[[nodiscard]] std::vector<FalsificationRow> falsification_experiment(const FalsificationConfig& config,
                                                                     const CostModel& cost);

}  // namespace cascade
