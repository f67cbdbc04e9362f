#include <cmath>
#include <random>

#include "cascade/error.hpp"
#include "cascade/evaluation.hpp"
#include "cascade/routing.hpp"
#include "cascade/synthetic.hpp"
#include "cascade/uncertainty.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace cascade;
using testing::toy;

namespace {

const RoutingPolicy kMargin{ScoreSource::RawMargin, 0.0, Direction::EscalateIfAbove, std::nullopt};

std::vector<double> margin_scores(std::span<const InferenceRecord> records) {
  std::vector<double> out;
  for (const auto& r : records) out.push_back(kMargin.score(r.small_tokens));
  return out;
}

// Random single-entity instance on the dyadic grid j/32.
std::vector<InferenceRecord> random_instance(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> level(0, 32);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<InferenceRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = level(rng) / 32.0;
    out.push_back(toy("r" + std::to_string(i), u, unit(rng) >= u, unit(rng) < 0.85));
  }
  return out;
}

}  // namespace

TEST_CASE("route boundary conventions") {
  const auto r = toy("a", 0.25, true, true);
  RoutingPolicy p = kMargin;
  p.threshold = 1.0;
  CHECK(route(p, r) == ModelSide::Small);
  p.threshold = -0.5;
  CHECK(route(p, r) == ModelSide::Large);
  p.threshold = 0.25;  // score == threshold keeps small
  CHECK(route(p, r) == ModelSide::Small);

  RoutingPolicy conf{ScoreSource::MeanMaxProb, 0.0, Direction::EscalateIfBelow, std::nullopt};
  conf.threshold = mean_max_prob_confidence(r.small_tokens);  // boundary goes to large
  CHECK(route(conf, r) == ModelSide::Large);
  conf.threshold -= 0.01;
  CHECK(route(conf, r) == ModelSide::Small);
}

TEST_CASE("policy validation") {
  RoutingPolicy wrong{ScoreSource::RawMargin, 0.3, Direction::EscalateIfBelow, std::nullopt};
  CHECK_THROWS_AS(wrong.validate(), Error);
  RoutingPolicy needs_model{ScoreSource::CalibratedP, 0.3, Direction::EscalateIfAbove, std::nullopt};
  CHECK_THROWS_AS(needs_model.validate(), Error);
  RoutingPolicy entropy{ScoreSource::MeanEntropy, 0.3, Direction::EscalateIfAbove, std::nullopt};
  CHECK_THROWS_AS((void)route(entropy, toy("no-entropy", 0.5, true, true)), Error);
}

TEST_CASE("policy JSON round trip") {
  const auto model = fit_isotonic(std::vector<LabeledScore>{{0.1, 0}, {0.2, 1}, {0.3, 1}});
  const RoutingPolicy p{ScoreSource::CalibratedP, 0.4, Direction::EscalateIfAbove, Calibrator(model)};
  const auto back = policy_from_json(policy_to_json(p));
  CHECK(back.source == p.source);
  CHECK(back.threshold == p.threshold);
  CHECK(back.direction == p.direction);
  CHECK(std::get<IsotonicModel>(*back.calibration) == model);

  const auto dir = testing::scratch_dir("routing_io");
  save_policy((dir / "p.json").string(), p);
  CHECK(load_policy((dir / "p.json").string()).threshold == 0.4);

  auto doc = policy_to_json(p);
  doc["extra"] = 1;
  CHECK_THROWS_AS((void)policy_from_json(doc), Error);
  CHECK_THROWS_AS((void)policy_from_json(nlohmann::json{{"score", "raw_margin"}, {"direction", "below"}, {"threshold", 0.5}}),
                  Error);
}

TEST_CASE("select_threshold: trivial feasibility cases") {
  std::vector<InferenceRecord> v{toy("a", 0.1, true, true), toy("b", 0.6, false, true), toy("c", 0.3, true, false)};
  const double small_f1 = evaluate_single_model(v, ModelSide::Small, CostModel{}, default_entity_schema(), "s").micro_f1;
  const auto keep = select_threshold(v, kMargin, CostModel{}, small_f1);
  CHECK(keep.feasible);
  CHECK(keep.validation_cost == doctest::Approx(1.0));
  CHECK(route_all(keep.policy, v) == std::vector<ModelSide>(3, ModelSide::Small));

  const auto zero = select_threshold(v, kMargin, CostModel{}, 0.0);
  CHECK(zero.validation_cost == doctest::Approx(1.0));

  // Large-only F1 is 2/3 here; the best subset reaches 1.0 so 0.99 is feasible.
  const auto best = select_threshold(v, kMargin, CostModel{}, 0.99);
  CHECK(best.feasible);
  CHECK(route_all(best.policy, v) == std::vector<ModelSide>{ModelSide::Small, ModelSide::Large, ModelSide::Small});

  std::vector<InferenceRecord> hard{toy("a", 0.1, false, false), toy("b", 0.6, false, true)};
  const auto infeasible = select_threshold(hard, kMargin, CostModel{}, 0.9);
  CHECK_FALSE(infeasible.feasible);
  // Escalating b alone already reaches the best F1 (1/2); the cheaper tie wins.
  CHECK(infeasible.validation_accuracy == doctest::Approx(0.5));
  CHECK(route_all(infeasible.policy, hard) == std::vector<ModelSide>{ModelSide::Small, ModelSide::Large});

  CHECK_THROWS_AS((void)select_threshold({}, kMargin, CostModel{}, 0.5), Error);
}

TEST_CASE("select_threshold: four-record toy against the subset oracle") {
  const std::vector<InferenceRecord> v{toy("a", 0.125, true, true), toy("b", 0.25, false, true),
                                       toy("c", 0.5, true, false), toy("d", 0.75, false, true)};
  const auto outcomes = outcomes_of(v);
  const auto scores = margin_scores(v);
  for (double tau : {0.0, 0.25, 0.5, 0.6, 0.75, 0.8, 1.0}) {
    const auto sel = select_threshold(v, kMargin, CostModel{}, tau);
    const auto upper = brute_force_upper_set_policy(outcomes, scores, CostModel{}, tau);
    CHECK(sel.feasible == upper.feasible);
    if (sel.feasible) CHECK(sel.validation_cost == doctest::Approx(upper.min_cost));
    if (sel.feasible) CHECK(sel.validation_accuracy >= tau);
  }
  // tau = 0.75: escalating only d reaches 3/4 at cost (3 + 3.02) / 4.
  const auto sel = select_threshold(v, kMargin, CostModel{}, 0.75);
  CHECK(sel.validation_cost == doctest::Approx((3.0 + 3.02) / 4.0));
}

TEST_CASE("select_threshold: random instances against oracles") {
  std::mt19937_64 rng(41);
  for (int t = 0; t < 150; ++t) {
    const auto v = random_instance(rng, 1 + static_cast<std::size_t>(t % 10));
    const auto outcomes = outcomes_of(v);
    const auto scores = margin_scores(v);
    const double tau = 0.3 + 0.7 * (t % 13) / 12.0;
    const auto sel = select_threshold(v, kMargin, CostModel{}, tau);
    const auto upper = brute_force_upper_set_policy(outcomes, scores, CostModel{}, tau);
    const auto any = brute_force_optimal_policy(outcomes, CostModel{}, tau);
    REQUIRE(sel.feasible == upper.feasible);
    if (sel.feasible) {
      CHECK(sel.validation_cost == doctest::Approx(upper.min_cost).epsilon(1e-12));
      CHECK(any.min_cost <= sel.validation_cost + 1e-12);
    }
  }
}

TEST_CASE("select_threshold invariances") {
  std::mt19937_64 rng(43);
  for (int t = 0; t < 40; ++t) {
    const auto v = random_instance(rng, 40);
    const auto base = select_threshold(v, kMargin, CostModel{1.0, 3.02}, 0.8);
    const auto decisions = route_all(base.policy, v);
    // Cost ratio does not move the decision set.
    for (double r : {5.0, 10.0}) {
      CHECK(route_all(select_threshold(v, kMargin, CostModel{1.0, r}, 0.8).policy, v) == decisions);
    }
    // A strictly increasing transform of the scores gives the same decisions.
    const auto outcomes = outcomes_of(v);
    auto scores = margin_scores(v);
    const auto a = choose_threshold(outcomes, scores, Direction::EscalateIfAbove, CostModel{}, 0.8);
    for (auto& s : scores) s = std::exp(3.0 * s) + 7.0;
    const auto b = choose_threshold(outcomes, scores, Direction::EscalateIfAbove, CostModel{}, 0.8);
    CHECK(a.point.escalated == b.point.escalated);
    CHECK(a.point.counts == b.point.counts);
    // Identical scores always share a decision.
    for (std::size_t i = 0; i < v.size(); ++i) {
      for (std::size_t j = 0; j < v.size(); ++j) {
        if (margin_scores(v)[i] == margin_scores(v)[j]) CHECK(decisions[i] == decisions[j]);
      }
    }
  }
}

TEST_CASE("threshold_sweep structure") {
  const std::vector<InferenceRecord> v{toy("a", 0.25, true, true), toy("b", 0.25, false, true),
                                       toy("c", 0.5, true, false)};
  const auto sweep = threshold_sweep(outcomes_of(v), margin_scores(v), Direction::EscalateIfAbove, CostModel{});
  REQUIRE(sweep.size() == 4);  // two distinct scores plus two sentinels
  CHECK(sweep.front().escalated == 0);
  CHECK(sweep.back().escalated == 3);
  for (std::size_t i = 1; i < sweep.size(); ++i) CHECK(sweep[i].escalated >= sweep[i - 1].escalated);
}

TEST_CASE("baselines") {
  // All-confident records: constant max-prob score, small-only decides.
  std::vector<InferenceRecord> v;
  for (int i = 0; i < 6; ++i) {
    auto r = toy("c" + std::to_string(i), 0.0, i != 0, true);
    v.push_back(r);
  }
  const auto frugal = build_frugal_baseline(v, CostModel{}, 5.0 / 6.0);
  CHECK(frugal.feasible);
  CHECK(frugal.validation_cost == doctest::Approx(1.0));
  const auto frugal_hard = build_frugal_baseline(v, CostModel{}, 0.95);
  CHECK(frugal_hard.feasible);
  CHECK(frugal_hard.validation_cost == doctest::Approx(3.02));
  CHECK(frugal.policy.direction == Direction::EscalateIfBelow);

  for (auto& r : v) r.small_tokens[0].entropy = 0.3;
  const auto entropy = build_entropy_baseline(v, CostModel{}, 0.5);
  CHECK(entropy.validation_cost == doctest::Approx(1.0));
  CHECK(entropy.policy.direction == Direction::EscalateIfAbove);
  CHECK(pareto_sweep(v, entropy.policy, CostModel{}).points.size() == 2);

  v[0].small_tokens[0].entropy.reset();
  CHECK_THROWS_AS((void)build_entropy_baseline(v, CostModel{}, 0.5), Error);
}

TEST_CASE("frugal baseline on anti-correlated confidence matches the oracle") {
  std::mt19937_64 rng(47);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int t = 0; t < 60; ++t) {
    std::vector<InferenceRecord> v;
    const std::size_t n = 2 + static_cast<std::size_t>(t % 9);
    for (std::size_t i = 0; i < n; ++i) {
      const double u = std::floor(unit(rng) * 16.0) / 16.0;
      // Confident records are the wrong ones.
      v.push_back(toy("f" + std::to_string(i), u, unit(rng) < u, unit(rng) < 0.9));
    }
    const auto sel = build_frugal_baseline(v, CostModel{}, 0.7);
    std::vector<double> scores;
    for (const auto& r : v) scores.push_back(-mean_max_prob_confidence(r.small_tokens));
    const auto upper = brute_force_upper_set_policy(outcomes_of(v), scores, CostModel{}, 0.7);
    REQUIRE(sel.feasible == upper.feasible);
    if (sel.feasible) CHECK(sel.validation_cost == doctest::Approx(upper.min_cost));
  }
}

TEST_CASE("conformal quantile against order statistics") {
  const std::vector<double> three{0.1, 0.2, 0.3};
  CHECK(conformal_quantile(three, 0.5) == 0.2);
  CHECK(conformal_quantile(three, 0.001) == 0.3);
  CHECK(conformal_quantile(three, 0.999) == 0.1);

  std::mt19937_64 rng(53);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> s(1 + static_cast<std::size_t>(t % 40));
    for (auto& x : s) x = unit(rng);
    std::sort(s.begin(), s.end());
    const double delta = unit(rng);
    const auto k = static_cast<double>(s.size());
    // Smallest index i (1-based) with i >= (k+1)(1-delta), capped at k.
    std::size_t idx = 1;
    while (static_cast<double>(idx) < (k + 1.0) * (1.0 - delta) - 1e-9 && idx < s.size()) ++idx;
    CHECK(conformal_quantile(s, delta) == s[idx - 1]);
  }
}

TEST_CASE("select_conformal") {
  const std::vector<InferenceRecord> cal{toy("c1", 0.125, true, true), toy("c2", 0.25, true, true),
                                         toy("c3", 0.375, true, true), toy("c4", 0.75, false, true)};
  const std::vector<InferenceRecord> val{toy("v1", 0.125, true, true), toy("v2", 0.5, false, true),
                                         toy("v3", 0.25, true, true)};
  const auto sel = select_conformal(cal, val, CostModel{}, 0.9, default_miscoverage_grid());
  CHECK(sel.feasible);
  REQUIRE(sel.miscoverage.has_value());
  CHECK(route_all(sel.policy, val) == std::vector<ModelSide>{ModelSide::Small, ModelSide::Large, ModelSide::Small});

  const std::vector<InferenceRecord> all_wrong{toy("w", 0.5, false, true), toy("x", 0.25, false, false)};
  CHECK_THROWS_AS((void)select_conformal(all_wrong, val, CostModel{}, 0.9, default_miscoverage_grid()), Error);
  CHECK_THROWS_AS((void)select_conformal(cal, val, CostModel{}, 0.9, {}), Error);
  const auto grid = default_miscoverage_grid();
  CHECK(grid.size() == 199);
  CHECK(grid.front() == doctest::Approx(0.005));
  CHECK(grid.back() == doctest::Approx(0.995));
}

TEST_CASE("calibrated selection uses the model") {
  const std::vector<InferenceRecord> v{toy("a", 0.125, true, true), toy("b", 0.25, true, true),
                                       toy("c", 0.5, false, true), toy("d", 0.75, false, true)};
  std::vector<LabeledScore> pairs;
  for (const auto& r : v) pairs.push_back({margin_uncertainty(r.small_tokens), derive_correctness(r, ModelSide::Small)});
  const auto sel = select_calibrated(v, Calibrator(fit_isotonic(pairs)), CostModel{}, 1.0);
  CHECK(sel.feasible);
  CHECK(sel.policy.source == ScoreSource::CalibratedP);
  CHECK(sel.validation_cost == doctest::Approx((2.0 + 2.0 * 3.02) / 4.0));
}
