#include <algorithm>
#include <cmath>
#include <random>

#include "cascade/error.hpp"
#include "cascade/uncertainty.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace cascade;

namespace {

std::vector<TokenStats> random_tokens(std::mt19937_64& rng, int len) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<TokenStats> out;
  for (int i = 0; i < len; ++i) {
    const double p1 = unit(rng);
    const double p2 = unit(rng) * std::min(p1, 1.0 - p1);
    out.push_back({p1, p2, std::nullopt});
  }
  return out;
}

}  // namespace

TEST_CASE("margin_uncertainty examples") {
  CHECK(margin_uncertainty(std::vector<TokenStats>{{1.0, 0.0, {}}, {1.0, 0.0, {}}}) == 0.0);
  CHECK(margin_uncertainty(std::vector<TokenStats>{{0.5, 0.5, {}}, {0.3, 0.3, {}}}) == 1.0);
  CHECK(margin_uncertainty(std::vector<TokenStats>{{0.9, 0.1, {}}, {0.6, 0.4, {}}}) == doctest::Approx(0.5));
  CHECK_THROWS_AS((void)margin_uncertainty(std::vector<TokenStats>{}), Error);
}

TEST_CASE("mean_entropy examples") {
  CHECK(mean_entropy(std::vector<TokenStats>{{0.9, 0.1, 0.0}, {0.9, 0.1, 0.0}}) == 0.0);
  CHECK(mean_entropy(std::vector<TokenStats>{{0.5, 0.5, std::log(2.0)}, {1.0, 0.0, 0.0}}) ==
        doctest::Approx(std::log(2.0) / 2.0));
  try {
    (void)mean_entropy(std::vector<TokenStats>{{0.5, 0.5, 0.1}, {0.9, 0.1, std::nullopt}});
    FAIL("expected SignalUnavailable");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::SignalUnavailable);
  }
}

TEST_CASE("mean_max_prob_confidence examples") {
  CHECK(mean_max_prob_confidence(std::vector<TokenStats>{{1.0, 0.0, {}}, {1.0, 0.0, {}}}) == 1.0);
  CHECK(mean_max_prob_confidence(std::vector<TokenStats>{{0.9, 0.1, {}}, {0.5, 0.2, {}}}) == doctest::Approx(0.7));
  CHECK(mean_max_prob_confidence(std::vector<TokenStats>{{0.6, 0.3, {}}}) == 0.6);
}

TEST_CASE("score_records") {
  CHECK(score_records({}, SignalKind::Margin).scores.empty());

  auto r = testing::toy("only", 0.25, true, true);
  const auto margin = score_records(std::vector{r}, SignalKind::Margin);
  REQUIRE(margin.scores.size() == 1);
  CHECK(margin.scores[0].id == "only");
  CHECK(margin.scores[0].score == margin_uncertainty(r.small_tokens));
  CHECK(margin.orientation == Orientation::Uncertainty);

  r.small_tokens = {{0.4, 0.4, {}}, {0.2, 0.2, {}}};
  CHECK(score_records(std::vector{r}, SignalKind::Margin).scores[0].score == 1.0);
  CHECK(score_records(std::vector{r}, SignalKind::MeanMaxProb).orientation == Orientation::Confidence);

  try {
    (void)score_records(std::vector{r}, SignalKind::MeanEntropy);
    FAIL("expected SignalUnavailable");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::SignalUnavailable);
    CHECK(std::string(e.what()).find("only") != std::string::npos);
  }
}

TEST_CASE("signal names round trip") {
  for (auto kind : {SignalKind::Margin, SignalKind::MeanEntropy, SignalKind::MeanMaxProb}) {
    CHECK(parse_signal_kind(to_string(kind)) == kind);
  }
  CHECK_THROWS_AS((void)parse_signal_kind("vibes"), Error);
}

TEST_CASE("margin properties") {
  std::mt19937_64 rng(23);
  for (int t = 0; t < 300; ++t) {
    auto tokens = random_tokens(rng, 1 + t % 9);
    const double u = margin_uncertainty(tokens);
    CHECK(u >= 0.0);
    CHECK(u <= 1.0);
    const double c = mean_max_prob_confidence(tokens);
    CHECK(c >= 0.0);
    CHECK(c <= 1.0);

    // Token order does not matter.
    auto shuffled = tokens;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(margin_uncertainty(shuffled) == doctest::Approx(u).epsilon(1e-12));

    // A token whose margin equals the current mean leaves u unchanged.
    const double m = 1.0 - u;
    auto extended = tokens;
    extended.push_back({(1.0 + m) / 2.0, (1.0 - m) / 2.0, {}});
    CHECK(margin_uncertainty(extended) == doctest::Approx(u).epsilon(1e-12));

    // Raising one top1_prob never raises u.
    auto raised = tokens;
    auto& tok = raised[static_cast<std::size_t>(t) % raised.size()];
    tok.top1_prob = std::min(1.0 - tok.top2_prob, tok.top1_prob + 0.05);
    CHECK(margin_uncertainty(raised) <= u + 1e-15);
  }
}
