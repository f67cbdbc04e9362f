#include <cmath>
#include <random>

#include "cascade/error.hpp"
#include "cascade/evaluation.hpp"
#include "cascade/synthetic.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace cascade;
using testing::toy;

namespace {

const std::vector<std::string> kSchema = default_entity_schema();
const RoutingPolicy kMargin{ScoreSource::RawMargin, 0.0, Direction::EscalateIfAbove, std::nullopt};

RoutingPolicy margin_at(double threshold) {
  RoutingPolicy p = kMargin;
  p.threshold = threshold;
  return p;
}

std::vector<InferenceRecord> coin_flips(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::vector<InferenceRecord> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(toy("b" + std::to_string(i), 0.5, coin(rng), true));
  return out;
}

}  // namespace

TEST_CASE("micro_f1 conventions") {
  CHECK(micro_f1(MatchCounts{1, 1, 1}) == doctest::Approx(0.5));
  CHECK(micro_f1(std::vector<MatchCounts>{{3, 0, 0}, {2, 0, 0}}) == 1.0);
  CHECK(micro_f1(MatchCounts{0, 0, 0}) == 0.0);
  CHECK(micro_f1(std::vector<MatchCounts>{{1, 0, 1}, {0, 1, 0}}) == doctest::Approx(0.5));
}

TEST_CASE("evaluate_cascade: hand-computed three-record set") {
  InferenceRecord r1 = toy("r1", 0.5, true, true);
  r1.gold = {{"camera", "X"}, {"iso", "800"}};
  r1.small_output = {{"camera", "X"}, {"iso", "400"}};
  r1.large_output = r1.gold;
  InferenceRecord r2 = toy("r2", 0.25, true, true);
  r2.gold = {{"camera", "Y"}};
  r2.small_output = r2.gold;
  r2.large_output = {};
  InferenceRecord r3 = toy("r3", 0.75, true, true);
  r3.gold = {{"lens", "L"}};
  r3.small_output = {};
  r3.large_output = {{"lens", "L"}, {"iso", "100"}};
  const std::vector<InferenceRecord> v{r1, r2, r3};

  const auto report = evaluate_cascade(margin_at(0.3), v, CostModel{}, kSchema);
  CHECK(report.escalated == 2);
  CHECK(report.counts == MatchCounts{4, 1, 0});
  CHECK(report.micro_f1 == doctest::Approx(8.0 / 9.0));
  CHECK(report.total_cost == doctest::Approx((1.0 + 2.0 * 3.02) / 3.0));
  CHECK(report.per_entity_f1.at("camera") == 1.0);
  CHECK(report.per_entity_f1.at("iso") == doctest::Approx(2.0 / 3.0));
  CHECK(report.per_entity_f1.count("aperture") == 0);
}

TEST_CASE("end-to-end identity with single-model reports") {
  const auto data = generate(matched_workload_spec(500, 4));
  const CostModel cost;
  auto small = evaluate_single_model(data.records, ModelSide::Small, cost, kSchema, "x");
  auto large = evaluate_single_model(data.records, ModelSide::Large, cost, kSchema, "x");
  auto keep = evaluate_cascade(keep_everything_policy(), data.records, cost, kSchema);
  auto all = evaluate_cascade(escalate_everything_policy(), data.records, cost, kSchema);
  keep.policy = all.policy = "x";
  CHECK(keep == small);
  CHECK(all == large);
  CHECK(small.total_cost == 1.0);
  CHECK(large.total_cost == doctest::Approx(3.02));
}

TEST_CASE("cost decomposition holds for every threshold") {
  const auto data = generate(matched_workload_spec(400, 5));
  for (double theta : {0.0, 0.1, 0.2, 0.3, 0.5, 0.9}) {
    const auto r = evaluate_cascade(margin_at(theta), data.records, CostModel{}, kSchema);
    CHECK(r.total_cost == doctest::Approx((1.0 - r.escalation_fraction) * 1.0 + r.escalation_fraction * 3.02).epsilon(1e-12));
  }
}

TEST_CASE("pareto sweep") {
  const auto data = generate(matched_workload_spec(300, 6));
  const auto curve = pareto_sweep(data.records, kMargin, CostModel{});
  REQUIRE(curve.points.size() >= 2);
  const auto small = evaluate_single_model(data.records, ModelSide::Small, CostModel{}, kSchema, "s");
  const auto large = evaluate_single_model(data.records, ModelSide::Large, CostModel{}, kSchema, "l");
  CHECK(curve.points.front().cost == small.total_cost);
  CHECK(curve.points.front().micro_f1 == small.micro_f1);
  CHECK(curve.points.back().cost == large.total_cost);
  CHECK(curve.points.back().micro_f1 == large.micro_f1);
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    CHECK(curve.points[i].threshold < curve.points[i - 1].threshold);
    CHECK(curve.points[i].escalation_fraction > curve.points[i - 1].escalation_fraction);
    CHECK(curve.points[i].cost > curve.points[i - 1].cost);
  }

  std::vector<InferenceRecord> flat;
  for (int i = 0; i < 5; ++i) flat.push_back(toy("f" + std::to_string(i), 0.25, i % 2 == 0, true));
  CHECK(pareto_sweep(flat, kMargin, CostModel{}).points.size() == 2);

  const auto budget = best_under_budget(curve, 2.0);
  REQUIRE(budget.has_value());
  CHECK(budget->cost <= 2.0);
  for (const auto& p : curve.points) {
    if (p.cost <= 2.0) CHECK(p.micro_f1 <= budget->micro_f1);
  }
  const auto reach = cheapest_reaching(curve, small.micro_f1);
  REQUIRE(reach.has_value());
  CHECK(reach->cost == 1.0);
  CHECK_FALSE(cheapest_reaching(curve, 1.01).has_value());

  const auto csv = pareto_to_csv(curve);
  CHECK(csv.rfind("threshold,cost,micro_f1,escalation_fraction\n", 0) == 0);
}

TEST_CASE("bootstrap: degenerate and deterministic cases") {
  const auto data = coin_flips(200, 1);
  const auto policy = keep_everything_policy();
  const auto one = bootstrap_ci(data, policy, BootstrapStatistic::MicroF1, CostModel{}, 1, 9);
  CHECK(one.lower == one.upper);

  std::vector<InferenceRecord> same(50, toy("s", 0.5, true, false));
  const auto flat = bootstrap_ci(same, policy, BootstrapStatistic::MicroF1, CostModel{}, 200, 9);
  CHECK(flat.lower == flat.point);
  CHECK(flat.upper == flat.point);

  const auto a = bootstrap_ci(data, policy, BootstrapStatistic::MicroF1, CostModel{}, 300, 5);
  const auto b = bootstrap_ci(data, policy, BootstrapStatistic::MicroF1, CostModel{}, 300, 5);
  CHECK(a == b);
  CHECK(a.lower <= a.point);
  CHECK(a.point <= a.upper);

  CHECK_THROWS_AS((void)bootstrap_ci(std::vector<InferenceRecord>{}, policy, BootstrapStatistic::Cost, CostModel{}, 10, 1),
                  Error);
  CHECK_THROWS_AS((void)bootstrap_ci(data, policy, BootstrapStatistic::Cost, CostModel{}, 0, 1), Error);
}

TEST_CASE("bootstrap: Bernoulli width and its scaling") {
  const auto policy = keep_everything_policy();
  const auto small_n = bootstrap_ci(coin_flips(10000, 2), policy, BootstrapStatistic::MicroF1, CostModel{}, 1000, 3);
  const double width = small_n.upper - small_n.lower;
  CHECK(width >= 0.015);
  CHECK(width <= 0.025);
  const auto big_n = bootstrap_ci(coin_flips(40000, 4), policy, BootstrapStatistic::MicroF1, CostModel{}, 1000, 3);
  const double ratio = (big_n.upper - big_n.lower) / width;
  CHECK(ratio >= 0.4);
  CHECK(ratio <= 0.6);
}

TEST_CASE("bootstrap statistics") {
  const auto data = coin_flips(100, 8);
  const auto decisions = route_all(margin_at(0.4), data);
  const auto outcomes = outcomes_of(data);
  CHECK(cascade_statistic(outcomes, decisions, BootstrapStatistic::Cost, CostModel{}) == doctest::Approx(3.02));
  CHECK(cascade_statistic(outcomes, decisions, BootstrapStatistic::CostSavingVsLarge, CostModel{}) ==
        doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("cost sensitivity re-pricing") {
  const double phi = 1.08 / 2.02;
  const std::vector<double> ratios{3.02, 5.0, 10.0};
  const auto rows = cost_sensitivity(phi, ratios);
  CHECK(std::round(rows[0].cost * 100) / 100 == doctest::Approx(2.08));
  CHECK(std::round(rows[0].saving_vs_large * 100) == 31);
  CHECK(std::round(rows[1].cost * 100) / 100 == doctest::Approx(3.14));
  CHECK(std::round(rows[1].saving_vs_large * 100) == 37);
  CHECK(std::round(rows[2].cost * 100) / 100 == doctest::Approx(5.81));
  CHECK(std::round(rows[2].saving_vs_large * 100) == 42);

  const auto none = cost_sensitivity(0.0, ratios);
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    CHECK(none[i].cost == 1.0);
    CHECK(none[i].saving_vs_large == doctest::Approx(1.0 - 1.0 / ratios[i]));
  }
  CHECK_THROWS_AS((void)cost_sensitivity(0.5, std::vector<double>{1.0}), Error);
}

TEST_CASE("assumption (ii) diagnostic") {
  const auto data = generate(matched_workload_spec(2000, 12));
  const auto all = route_all(escalate_everything_policy(), data.records);
  CHECK(assumption_ii_diagnostic(data.records, all).gap == 0.0);

  const auto none = route_all(keep_everything_policy(), data.records);
  try {
    (void)assumption_ii_diagnostic(data.records, none);
    FAIL("expected DiagnosticUndefined");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::DiagnosticUndefined);
  }
}

TEST_CASE("per-entity report") {
  std::vector<InferenceRecord> v{toy("a", 0.1, true, true), toy("b", 0.2, true, true)};
  const std::vector<ModelSide> d(2, ModelSide::Small);
  const auto table = per_entity_report(v, d, kSchema);
  CHECK(table.size() == 1);
  CHECK(table.at("camera") == 1.0);
}

TEST_CASE("no-simulation metamorphic property") {
  const auto data = generate(matched_workload_spec(300, 21));
  const std::vector<RoutingPolicy> policies{keep_everything_policy(), margin_at(0.2), margin_at(0.35),
                                            escalate_everything_policy()};
  for (std::size_t target : {0u, 17u, 150u}) {
    auto changed = data.records;
    changed[target].large_output = {{"camera", "never-right"}};
    for (const auto& p : policies) {
      const auto before = evaluate_cascade(p, data.records, CostModel{}, kSchema);
      const auto after = evaluate_cascade(p, changed, CostModel{}, kSchema);
      if (route(p, data.records[target]) == ModelSide::Large && data.records[target].large_output != changed[target].large_output) {
        CHECK_FALSE(before == after);
      } else {
        CHECK(before == after);
      }
    }
  }
}
