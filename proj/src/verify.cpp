#include "cascade/verify.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "cascade/routing.hpp"
#include "cascade/synthetic.hpp"

namespace cascade {

using nlohmann::json;

double step_predictor(const IsotonicModel& model, double u) { return model.predict(u); }

double interpolating_predictor(const IsotonicModel& model, double u) {
  const auto& b = model.breakpoints();
  const auto& v = model.values();
  const std::size_t k = model.block_index(u);
  if (u <= b[k] || k + 1 == b.size()) return v[k];
  const double t = (u - b[k]) / (b[k + 1] - b[k]);
  return v[k] + t * (v[k + 1] - v[k]);
}

namespace {

// Scores on a dyadic grid are exact under u = 1 - (p1 - p2), so tied scores
// survive the round trip through token statistics.
constexpr int kScoreLevels = 64;

InferenceRecord toy_record(std::size_t index, int level, bool small_correct, bool large_correct, int wrong_kind) {
  const double u = static_cast<double>(level) / kScoreLevels;
  const double m = 1.0 - u;
  InferenceRecord r;
  r.id = "t" + std::to_string(index);
  r.small_tokens = {TokenStats{(1.0 + m) / 2.0, (1.0 - m) / 2.0, std::nullopt}};
  r.gold = {{"camera", "a"}};
  // A wrong output is either a different value or a missing entity.
  const EntityMap wrong = wrong_kind == 0 ? EntityMap{{"camera", "b"}} : EntityMap{};
  r.small_output = small_correct ? r.gold : wrong;
  r.large_output = large_correct ? r.gold : wrong;
  return r;
}

}  // namespace

PropertyResult check_pava_oracle(int instances, std::size_t max_n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  int failures = 0;
  for (int t = 0; t < instances; ++t) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, max_n)(rng);
    const int levels = std::uniform_int_distribution<int>(1, static_cast<int>(n) + 2)(rng);
    std::uniform_int_distribution<int> level(0, levels);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<LabeledScore> pairs;
    for (std::size_t i = 0; i < n; ++i) {
      const double score = static_cast<double>(level(rng)) / levels;
      pairs.push_back({score, unit(rng) < 0.2 + 0.6 * score ? 1 : 0});
    }
    const auto model = fit_isotonic(pairs);
    const auto expected = brute_force_isotonic(pairs);
    double gap = 0.0;
    for (std::size_t i = 0; i < n; ++i) gap = std::max(gap, std::abs(model.predict(pairs[i].score) - expected[i]));
    worst = std::max(worst, gap);
    failures += gap > 1e-9 ? 1 : 0;
  }
  return {"pava_oracle",
          failures == 0,
          {{"instances", instances}, {"failures", failures}, {"max_abs_diff", worst}}};
}

PropertyResult check_threshold_oracle(int instances, std::size_t max_n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const CostModel cost;
  const RoutingPolicy prototype{ScoreSource::RawMargin, 0.0, Direction::EscalateIfAbove, std::nullopt};

  int upper_matches = 0;
  int ordered = 0;
  int ordered_matches = 0;
  int feasibility_mismatches = 0;
  for (int t = 0; t < instances; ++t) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, max_n)(rng);
    const double large_accuracy = 0.6 + 0.35 * unit(rng);
    const double tau = 0.4 + 0.6 * unit(rng);
    // Every other instance places distinct scores by escalation gain so the
    // score orders the true outcomes.
    const bool by_gain = t % 2 == 1;
    // With one error kind per instance micro-F1 is increasing in total tp,
    // so the tp gain alone orders records.
    const int instance_wrong_kind = std::uniform_int_distribution<int>(0, 1)(rng);

    // Three bands of 20 levels, one per gain; shuffled offsets keep scores distinct.
    std::vector<int> offsets(20);
    for (int k = 0; k < 20; ++k) offsets[static_cast<std::size_t>(k)] = k;
    std::shuffle(offsets.begin(), offsets.end(), rng);

    std::vector<InferenceRecord> records;
    for (std::size_t i = 0; i < n; ++i) {
      int level = std::uniform_int_distribution<int>(0, kScoreLevels)(rng);
      const bool small_correct = unit(rng) >= static_cast<double>(level) / kScoreLevels;
      const bool large_correct = unit(rng) < large_accuracy;
      int wrong_kind = std::uniform_int_distribution<int>(0, 1)(rng);
      if (by_gain) {
        wrong_kind = instance_wrong_kind;
        const int gain = (large_correct ? 1 : 0) - (small_correct ? 1 : 0);
        level = (gain + 1) * 21 + offsets[i];
      }
      records.push_back(toy_record(i, level, small_correct, large_correct, wrong_kind));
    }

    const auto outcomes = outcomes_of(records);
    std::vector<double> scores;
    for (const auto& r : records) scores.push_back(prototype.score(r.small_tokens));
    const auto selected = select_threshold(records, prototype, cost, tau);
    const auto upper = brute_force_upper_set_policy(outcomes, scores, cost, tau);
    if (selected.feasible != upper.feasible) {
      ++feasibility_mismatches;
    } else if (!selected.feasible || std::abs(selected.validation_cost - upper.min_cost) < 1e-12) {
      ++upper_matches;
    }

    // Score orders the outcomes: scores are distinct and gain never increases
    // as the score drops. With ties the upper-set restriction can bind.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    auto gain = [&](std::size_t i) { return outcomes[i].large.tp - outcomes[i].small.tp; };
    bool any_missing = false;
    bool any_mismatch = false;
    for (const auto& r : records) {
      for (const EntityMap* out : {&r.small_output, &r.large_output}) {
        any_missing = any_missing || out->empty();
        any_mismatch = any_mismatch || (!out->empty() && *out != r.gold);
      }
    }
    bool separates = !(any_missing && any_mismatch);
    for (std::size_t k = 1; k < n && separates; ++k) {
      const std::size_t a = order[k - 1];
      const std::size_t b = order[k];
      separates = scores[a] > scores[b] && gain(a) >= gain(b);
    }
    if (separates && selected.feasible) {
      ++ordered;
      const auto best = brute_force_optimal_policy(outcomes, cost, tau);
      ordered_matches += std::abs(selected.validation_cost - best.min_cost) < 1e-12 ? 1 : 0;
    }
  }
  return {"threshold_oracle",
          upper_matches == instances && ordered_matches == ordered,
          {{"instances", instances},
           {"upper_set_matches", upper_matches},
           {"feasibility_mismatches", feasibility_mismatches},
           {"ordered_instances", ordered},
           {"unrestricted_matches", ordered_matches}}};
}

PropertyResult check_rate(const std::vector<std::size_t>& n_grid, int trials, std::size_t eval_n,
                          std::uint64_t seed) {
  RateExperimentConfig config;
  config.spec = matched_workload_spec(1, seed);
  config.n_grid = n_grid;
  config.trials = trials;
  config.eval_n = eval_n;
  const auto result = rate_experiment(config);

  bool decreasing = true;
  json rows = json::array();
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    const auto& row = result.rows[i];
    if (i > 0 && row.mean_ece > result.rows[i - 1].mean_ece) decreasing = false;
    rows.push_back({{"n", row.n}, {"mean_ece", row.mean_ece}, {"std_ece", row.std_ece}});
  }
  const bool in_band = result.slope >= -0.5 && result.slope <= -0.2;
  return {"rate_slope",
          in_band && decreasing,
          {{"slope", result.slope},
           {"band", {-0.5, -0.2}},
           {"non_increasing", decreasing},
           {"trials", trials},
           {"rows", rows}}};
}

PropertyResult check_conformal_coverage(std::size_t n_cal, int trials, std::uint64_t seed) {
  const std::vector<double> deltas{0.05, 0.1, 0.2};
  const auto rows = conformal_coverage_experiment(matched_workload_spec(1, seed), n_cal, 10000, deltas, trials);
  bool ok = true;
  json out = json::array();
  for (const auto& row : rows) {
    const bool covered = row.mean_coverage >= 1.0 - row.delta - 0.02;
    ok = ok && covered;
    out.push_back({{"delta", row.delta}, {"mean_coverage", row.mean_coverage}, {"passed", covered}});
  }
  return {"conformal_coverage",
          ok,
          {{"n_calibration", n_cal}, {"trials", trials}, {"rows", out}}};
}

PropertyResult check_falsification(int trials, std::size_t n, std::uint64_t seed) {
  FalsificationConfig config;
  config.spec = matched_workload_spec(1, seed);
  config.trials = trials;
  config.n_cal = n;
  config.n_eval = n;
  const auto rows = falsification_experiment(config, CostModel{});
  bool increasing = true;
  bool oracle_dominates = true;
  json out = json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0 && !(rows[i].mean_gap > rows[i - 1].mean_gap)) increasing = false;
    if (rows[i].min_gap < -1e-12) oracle_dominates = false;
    out.push_back({{"contamination", rows[i].contamination},
                   {"mean_gap", rows[i].mean_gap},
                   {"std_gap", rows[i].std_gap},
                   {"min_gap", rows[i].min_gap}});
  }
  return {"falsification_ordering",
          increasing && oracle_dominates,
          {{"strictly_increasing", increasing},
           {"oracle_never_worse", oracle_dominates},
           {"trials", trials},
           {"rows", out}}};
}

PropertyResult check_level_set_ties(const Predictor& predictor, std::uint64_t seed) {
  auto spec = matched_workload_spec(2000, seed);
  const auto model = fit_isotonic(draw_labeled_uncertainty(spec));
  const auto& b = model.breakpoints();
  const auto& v = model.values();

  // Probe each block at its left edge and at interior points; with the
  // threshold at the block's own value, a step calibrator keeps every probe
  // on the same side.
  std::size_t split_blocks = 0;
  for (std::size_t k = 0; k < b.size(); ++k) {
    const double right = k + 1 < b.size() ? b[k + 1] : 1.0;
    if (!(right > b[k])) continue;
    const RoutingPolicy policy{ScoreSource::RawMargin, v[k], Direction::EscalateIfAbove, std::nullopt};
    bool any_small = false;
    bool any_large = false;
    for (int j = 0; j < 8; ++j) {
      const double u = b[k] + (right - b[k]) * j / 8.0;
      const ModelSide side = policy.decide(predictor(model, u));
      (side == ModelSide::Small ? any_small : any_large) = true;
    }
    split_blocks += any_small && any_large ? 1 : 0;
  }
  return {"level_set_ties", split_blocks == 0, {{"blocks", b.size()}, {"split_blocks", split_blocks}}};
}

std::vector<PropertyResult> run_verify(const VerifyOptions& options) {
  const std::uint64_t s = options.seed;
  std::vector<PropertyResult> results;
  if (options.quick) {
    results.push_back(check_pava_oracle(100, 12, s + 1));
    results.push_back(check_threshold_oracle(50, 10, s + 2));
    results.push_back(check_rate({100, 1000, 10000}, 5, 50000, s + 3));
    results.push_back(check_conformal_coverage(2000, 5, s + 4));
    results.push_back(check_falsification(10, 2000, s + 5));
  } else {
    results.push_back(check_pava_oracle(500, 12, s + 1));
    results.push_back(check_threshold_oracle(200, 12, s + 2));
    results.push_back(check_rate({100, 1000, 10000, 100000}, 10, 200000, s + 3));
    results.push_back(check_conformal_coverage(10000, 20, s + 4));
    results.push_back(check_falsification(20, 5000, s + 5));
  }
  const Predictor predictor = options.inject_interpolating_predictor ? Predictor(interpolating_predictor)
                                                                     : Predictor(step_predictor);
  results.push_back(check_level_set_ties(predictor, s + 6));
  return results;
}

json property_to_json(const PropertyResult& result) {
  return {{"property", result.name}, {"passed", result.passed}, {"details", result.details}};
}

}  // namespace cascade
